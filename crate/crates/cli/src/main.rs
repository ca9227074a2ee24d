use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    actwm_cli::tune_allocator();
    actwm_cli::run(actwm_cli::Cli::parse())
}
