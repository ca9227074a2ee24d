//! Action-prediction quality metrics (direction, magnitude and their
//! harmonic mean, in 3D and averaged over 2D projections), per-vertex and
//! per-seed aggregation, and PCA of latent points.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plantsim::{ActionVec, DoeDataset, PressureCurve};
use crate::trainloop::{PairingPlan, SampleId};
use crate::worldmodel::{LatentVec, WorldModel, LATENT_DIM};

/// Ground-truth and predicted action for one test pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPair {
    pub truth: ActionVec,
    pub pred: ActionVec,
}

impl ActionPair {
    pub fn new(truth: ActionVec, pred: ActionVec) -> Result<Self> {
        same_dim(&truth, &pred)?;
        Ok(Self { truth, pred })
    }
}

fn same_dim(a: &ActionVec, b: &ActionVec) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "action dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    sum: f64,
    comp: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
        self.n += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| (self.sum + self.comp) / self.n as f64)
    }
}

fn angle_of(t: &[f64], p: &[f64]) -> Option<f64> {
    let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tn == 0.0 || pn == 0.0 {
        return None;
    }
    // 2·atan2(‖t̂ − p̂‖, ‖t̂ + p̂‖) equals the arccos of the cosine but stays
    // exact near 0° and 180°
    let (mut minus, mut plus) = (0.0, 0.0);
    for (a, b) in t.iter().zip(p) {
        let (u, w) = (a / tn, b / pn);
        minus += (u - w) * (u - w);
        plus += (u + w) * (u + w);
    }
    Some((2.0 * minus.sqrt().atan2(plus.sqrt())).to_degrees().clamp(0.0, 180.0))
}

/// Angle between the two actions in degrees; `None` when either is zero.
pub fn angle(truth: &ActionVec, pred: &ActionVec) -> Result<Option<f64>> {
    same_dim(truth, pred)?;
    Ok(angle_of(truth.values(), pred.values()))
}

/// Euclidean distance.
pub fn distance(truth: &ActionVec, pred: &ActionVec) -> Result<f64> {
    same_dim(truth, pred)?;
    Ok(truth
        .values()
        .iter()
        .zip(pred.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

fn check_dims(n: usize, (i, j): (usize, usize)) -> Result<()> {
    if i == j || i >= n || j >= n {
        return Err(Error::InvalidArgument(format!(
            "bad dimension pair ({i}, {j}) for {n}-dim actions"
        )));
    }
    Ok(())
}

/// `sqrt(½[(a_i − â_i)² + (a_j − â_j)²])`.
pub fn distance_2d(truth: &ActionVec, pred: &ActionVec, dims: (usize, usize)) -> Result<f64> {
    same_dim(truth, pred)?;
    check_dims(truth.len(), dims)?;
    let (t, p) = (truth.values(), pred.values());
    let di = t[dims.0] - p[dims.0];
    let dj = t[dims.1] - p[dims.1];
    Ok((0.5 * (di * di + dj * dj)).sqrt())
}

/// Angle between the projections onto dimensions `(i, j)`; `None` when the
/// projected truth is zero.
pub fn angle_2d(truth: &ActionVec, pred: &ActionVec, dims: (usize, usize)) -> Result<Option<f64>> {
    same_dim(truth, pred)?;
    check_dims(truth.len(), dims)?;
    let (t, p) = (truth.values(), pred.values());
    let tp = [t[dims.0], t[dims.1]];
    if tp == [0.0, 0.0] {
        return Ok(None);
    }
    Ok(Some(angle_of(&tp, &[p[dims.0], p[dims.1]]).unwrap_or(90.0)))
}

/// All unordered dimension pairs `(i, j)`, `i < j`.
pub fn dim_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Mean 2D angle and mean 2D distance over all `n(n−1)/2` dimension pairs.
/// Pairs whose projected truth is zero are left out of the angle mean.
pub fn metrics_2d(truth: &ActionVec, pred: &ActionVec) -> Result<(f64, f64)> {
    same_dim(truth, pred)?;
    if truth.len() < 2 {
        return Err(Error::InvalidArgument("2D metrics need at least 2 dimensions".into()));
    }
    let mut th = Acc::default();
    let mut d = Acc::default();
    for dims in dim_pairs(truth.len()) {
        if let Some(a) = angle_2d(truth, pred, dims)? {
            th.push(a);
        }
        d.push(distance_2d(truth, pred, dims)?);
    }
    let theta = th
        .mean()
        .ok_or_else(|| Error::InvalidArgument("every 2D projection of the truth is zero".into()))?;
    Ok((theta, d.mean().expect("at least one pair")))
}

/// Harmonic mean of `θ/180` and `d`; zero when either is zero.
pub fn overall_q(theta_degrees: f64, d: f64) -> Result<f64> {
    if !(theta_degrees >= 0.0 && d >= 0.0) || !theta_degrees.is_finite() || !d.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "q needs finite non-negative inputs, got theta {theta_degrees}, d {d}"
        )));
    }
    let t = theta_degrees / 180.0;
    if t == 0.0 || d == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 / (1.0 / t + 1.0 / d))
}

/// Averaged metrics. Angles in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub theta_2d: f64,
    pub d_2d: f64,
    pub q_2d: f64,
    pub theta_3d: f64,
    pub d_3d: f64,
    pub q_3d: f64,
    pub n_evaluated: usize,
    pub n_excluded: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "theta_2d,d_2d,q_2d,theta_3d,d_3d,q_3d,n_evaluated,n_excluded";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.theta_2d,
            self.d_2d,
            self.q_2d,
            self.theta_3d,
            self.d_3d,
            self.q_3d,
            self.n_evaluated,
            self.n_excluded
        )
    }

    /// `q` of the averaged angle and distance, as opposed to the mean per-pair `q`.
    pub fn q_of_means(&self) -> (f64, f64) {
        (
            overall_q(self.theta_2d, self.d_2d).unwrap_or(f64::NAN),
            overall_q(self.theta_3d, self.d_3d).unwrap_or(f64::NAN),
        )
    }
}

#[derive(Clone, Copy, Default)]
struct Sums {
    theta_2d: Acc,
    d_2d: Acc,
    q_2d: Acc,
    theta_3d: Acc,
    d_3d: Acc,
    q_3d: Acc,
    excluded: usize,
}

impl Sums {
    fn push(&mut self, p: &ActionPair) -> Result<()> {
        self.d_3d.push(distance(&p.truth, &p.pred)?);
        let d2: Vec<f64> = dim_pairs(p.truth.len())
            .into_iter()
            .map(|dims| distance_2d(&p.truth, &p.pred, dims))
            .collect::<Result<_>>()?;
        let d2 = d2.iter().sum::<f64>() / d2.len() as f64;
        self.d_2d.push(d2);
        if p.truth.is_zero() {
            self.excluded += 1;
            return Ok(());
        }
        // a zero prediction for a real action points nowhere: count it as orthogonal
        let th3 = angle(&p.truth, &p.pred)?.unwrap_or(90.0);
        let (th2, d2) = metrics_2d(&p.truth, &p.pred)?;
        let d3 = distance(&p.truth, &p.pred)?;
        self.theta_3d.push(th3);
        self.theta_2d.push(th2);
        self.q_3d.push(overall_q(th3, d3)?);
        self.q_2d.push(overall_q(th2, d2)?);
        Ok(())
    }

    fn report(&self) -> MetricReport {
        let m = |a: &Acc| a.mean().unwrap_or(f64::NAN);
        MetricReport {
            theta_2d: m(&self.theta_2d),
            d_2d: m(&self.d_2d),
            q_2d: m(&self.q_2d),
            theta_3d: m(&self.theta_3d),
            d_3d: m(&self.d_3d),
            q_3d: m(&self.q_3d),
            n_evaluated: self.theta_3d.n,
            n_excluded: self.excluded,
        }
    }
}

/// Metrics of the pairs sharing one reference vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexReport {
    pub vertex: usize,
    pub metrics: MetricReport,
}

/// Two-stage mean plus the per-vertex breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: MetricReport,
    pub q_of_means_2d: f64,
    pub q_of_means_3d: f64,
    pub per_vertex: Vec<VertexReport>,
}

/// Averages within each reference vertex, then across vertices. `vertex[i]`
/// is the reference vertex of `pairs[i]`. Zero-truth pairs only contribute
/// to the distance columns and `n_excluded`.
pub fn evaluate(pairs: &[ActionPair], vertex: &[usize]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    if pairs.len() != vertex.len() {
        return Err(Error::Shape(format!(
            "{} pairs but {} vertex labels",
            pairs.len(),
            vertex.len()
        )));
    }
    let mut groups: BTreeMap<usize, Sums> = BTreeMap::new();
    for (p, &v) in pairs.iter().zip(vertex) {
        groups.entry(v).or_default().push(p)?;
    }
    let per_vertex: Vec<VertexReport> = groups
        .iter()
        .map(|(&vertex, s)| VertexReport {
            vertex,
            metrics: s.report(),
        })
        .collect();

    let mut outer = [Acc::default(); 6];
    for v in &per_vertex {
        let m = &v.metrics;
        for (acc, x) in outer
            .iter_mut()
            .zip([m.theta_2d, m.d_2d, m.q_2d, m.theta_3d, m.d_3d, m.q_3d])
        {
            if !x.is_nan() {
                acc.push(x);
            }
        }
    }
    let m = |i: usize| outer[i].mean().unwrap_or(f64::NAN);
    let summary = MetricReport {
        theta_2d: m(0),
        d_2d: m(1),
        q_2d: m(2),
        theta_3d: m(3),
        d_3d: m(4),
        q_3d: m(5),
        n_evaluated: per_vertex.iter().map(|v| v.metrics.n_evaluated).sum(),
        n_excluded: per_vertex.iter().map(|v| v.metrics.n_excluded).sum(),
    };
    let (q_of_means_2d, q_of_means_3d) = summary.q_of_means();
    Ok(EvalReport {
        summary,
        q_of_means_2d,
        q_of_means_3d,
        per_vertex,
    })
}

/// Fieldwise mean over seeds; counts are summed.
pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to aggregate".into()));
    }
    let mean = |f: fn(&MetricReport) -> f64| {
        let mut a = Acc::default();
        reports.iter().for_each(|r| a.push(f(r)));
        a.mean().expect("non-empty")
    };
    Ok(MetricReport {
        theta_2d: mean(|r| r.theta_2d),
        d_2d: mean(|r| r.d_2d),
        q_2d: mean(|r| r.q_2d),
        theta_3d: mean(|r| r.theta_3d),
        d_3d: mean(|r| r.d_3d),
        q_3d: mean(|r| r.q_3d),
        n_evaluated: reports.iter().map(|r| r.n_evaluated).sum(),
        n_excluded: reports.iter().map(|r| r.n_excluded).sum(),
    })
}

/// Predicted actions for every pair of a plan, grouped by reference setting.
/// Each distinct curve is encoded once.
pub fn predict_plan(
    model: &WorldModel,
    ds: &DoeDataset,
    plan: &PairingPlan,
) -> Result<(Vec<ActionPair>, Vec<usize>)> {
    let pairs = crate::trainloop::make_pairs(ds, plan)?;
    let mut ids: Vec<SampleId> = plan
        .reference_pool
        .iter()
        .chain(&plan.observation_pool)
        .copied()
        .collect();
    ids.sort();
    ids.dedup();
    let curves: Vec<&PressureCurve> = ids.iter().map(|s| ds.curve(s.setting, s.cycle)).collect();
    let latents = model.encode_many(&curves);
    let slot: HashMap<*const PressureCurve, usize> =
        curves.iter().enumerate().map(|(i, &c)| (c as *const _, i)).collect();
    let z = |c: &PressureCurve| latents[slot[&(c as *const _)]];

    let mut out = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let pred = model.predict_action(&z(p.x), &z(p.y));
        out.push(ActionPair::new(p.a.clone(), pred)?);
    }
    let vertex = plan.sample_pairs().into_iter().map(|(r, _)| r.setting).collect();
    Ok((out, vertex))
}

/// Runs the model on a test plan and evaluates it.
pub fn evaluate_model(model: &WorldModel, ds: &DoeDataset, plan: &PairingPlan) -> Result<EvalReport> {
    let (pairs, vertex) = predict_plan(model, ds, plan)?;
    evaluate(&pairs, &vertex)
}

pub fn write_report_csv<W: Write>(mut w: W, rows: &[(String, MetricReport)]) -> Result<()> {
    writeln!(w, "label,{}", MetricReport::CSV_HEADER)?;
    for (label, r) in rows {
        writeln!(w, "{label},{}", r.csv_row())?;
    }
    Ok(())
}

/// Fitted principal axes of a set of latent points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows, each of length `LATENT_DIM`.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub explained_variance: Vec<f64>,
    /// Fraction of the total variance along each component.
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    pub fn fit(latents: &[LatentVec], k: usize) -> Result<Self> {
        if k == 0 || k > LATENT_DIM {
            return Err(Error::InvalidArgument(format!("cannot keep {k} components")));
        }
        if latents.len() < k + 1 {
            return Err(Error::InvalidArgument(format!(
                "PCA with {k} components needs at least {} points",
                k + 1
            )));
        }
        let n = latents.len();
        let mut mean = vec![0.0; LATENT_DIM];
        for z in latents {
            for (m, v) in mean.iter_mut().zip(z.0) {
                *m += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, LATENT_DIM, |r, c| latents[r].0[c] - mean[c]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let total: f64 = cov.trace();
        let scale = mean.iter().map(|m| m.abs()).fold(1.0, f64::max);
        if !(total > 1e-24 * scale * scale) {
            return Err(Error::InvalidArgument("latents are all identical".into()));
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..LATENT_DIM).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &i in order.iter().take(k) {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(_, x)| x)
                .unwrap_or(1.0);
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            explained_variance.push(eig.eigenvalues[i].max(0.0));
        }
        let explained_ratio = explained_variance.iter().map(|v| v / total).collect();
        Ok(Self {
            mean,
            components,
            explained_variance,
            explained_ratio,
        })
    }

    pub fn project(&self, z: &LatentVec) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(z.0.iter().zip(&self.mean)).map(|(w, (x, m))| w * (x - m)).sum())
            .collect()
    }
}

/// Projections, components and explained variance of the top `k` axes.
pub fn pca_project(latents: &[LatentVec], k: usize) -> Result<(Vec<Vec<f64>>, Pca)> {
    let pca = Pca::fit(latents, k)?;
    Ok((latents.iter().map(|z| pca.project(z)).collect(), pca))
}

/// One dataset curve placed in the 2D principal plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub setting: usize,
    pub cycle: usize,
    pub params: Vec<f64>,
    pub pc1: f64,
    pub pc2: f64,
}

/// Encodes every curve of the dataset and projects onto the top two axes.
pub fn dataset_pca(model: &WorldModel, ds: &DoeDataset) -> Result<(Vec<PcaPoint>, Pca)> {
    let mut ids = Vec::new();
    let mut curves = Vec::new();
    for (s, row) in ds.curves.iter().enumerate() {
        for (c, curve) in row.iter().enumerate() {
            ids.push((s, c));
            curves.push(curve);
        }
    }
    let latents = model.encode_many(&curves);
    let (proj, pca) = pca_project(&latents, 2)?;
    let points = ids
        .into_iter()
        .zip(proj)
        .map(|((setting, cycle), p)| PcaPoint {
            setting,
            cycle,
            params: ds.settings[setting].values().to_vec(),
            pc1: p[0],
            pc2: p[1],
        })
        .collect();
    Ok((points, pca))
}

pub fn write_pca_csv<W: Write>(mut w: W, ds: &DoeDataset, points: &[PcaPoint]) -> Result<()> {
    writeln!(w, "setting,cycle,{},pc1,pc2", ds.param_names().join(","))?;
    for p in points {
        let params: Vec<String> = p.params.iter().map(f64::to_string).collect();
        writeln!(w, "{},{},{},{},{}", p.setting, p.cycle, params.join(","), p.pc1, p.pc2)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
