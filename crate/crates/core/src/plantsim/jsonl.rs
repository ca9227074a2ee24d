//! JSON-lines dataset files: one header object, then one object per curve.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{DatasetKind, DoeDataset, MachineParams, PressureCurve};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    kind: DatasetKind,
    seed: u64,
    param_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    setting: MachineParams,
    cycle: usize,
    samples: PressureCurve,
}

pub fn write_jsonl<W: Write>(ds: &DoeDataset, mut w: W) -> Result<()> {
    let header = Header {
        kind: ds.kind,
        seed: ds.seed,
        param_names: ds.param_names().iter().map(|s| s.to_string()).collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (setting, cycles) in ds.settings.iter().zip(&ds.curves) {
        for (cycle, curve) in cycles.iter().enumerate() {
            let rec = Record {
                setting: setting.clone(),
                cycle,
                samples: curve.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset back. Settings keep their order of first appearance and
/// every setting must carry cycles `0..n` for the same `n`.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<DoeDataset> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Dataset("empty dataset file".into()))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::Dataset(format!("bad header: {e}")))?;

    let mut settings: Vec<MachineParams> = Vec::new();
    let mut curves: Vec<Vec<Option<PressureCurve>>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", lineno + 2)))?;
        if rec.setting.len() != header.param_names.len() {
            return Err(Error::Dataset(format!(
                "line {}: setting has {} components, header names {}",
                lineno + 2,
                rec.setting.len(),
                header.param_names.len()
            )));
        }
        let idx = match settings.iter().position(|s| *s == rec.setting) {
            Some(i) => i,
            None => {
                settings.push(rec.setting);
                curves.push(Vec::new());
                settings.len() - 1
            }
        };
        let slot = &mut curves[idx];
        if slot.len() <= rec.cycle {
            slot.resize(rec.cycle + 1, None);
        }
        if slot[rec.cycle].replace(rec.samples).is_some() {
            return Err(Error::Dataset(format!(
                "duplicate cycle {} for setting {idx}",
                rec.cycle
            )));
        }
    }
    if settings.is_empty() {
        return Err(Error::Dataset("dataset has no curves".into()));
    }
    let cycles = curves[0].len();
    let curves = curves
        .into_iter()
        .enumerate()
        .map(|(i, cs)| {
            if cs.len() != cycles {
                return Err(Error::Dataset(format!(
                    "setting {i} has {} cycles, expected {cycles}",
                    cs.len()
                )));
            }
            cs.into_iter()
                .enumerate()
                .map(|(c, v)| v.ok_or_else(|| Error::Dataset(format!("setting {i} lacks cycle {c}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DoeDataset {
        kind: header.kind,
        seed: header.seed,
        model: header.kind.curve_model(),
        settings,
        cycles_per_setting: cycles,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plantsim::build_doe_dataset;

    #[test]
    fn round_trip_is_exact() {
        let ds = build_doe_dataset(DatasetKind::D1, 3);
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        assert!(first.contains("\"kind\":\"d1\""));
        assert!(first.contains("\"param_names\":[\"holding_pressure\""));
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert!(back == ds, "dataset changed across a JSONL round trip");
    }

    #[test]
    fn rejects_incomplete() {
        let ds = build_doe_dataset(DatasetKind::D1, 3);
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(read_jsonl(truncated.as_bytes()).is_err());
        assert!(read_jsonl("".as_bytes()).is_err());
        assert!(read_jsonl("{\"kind\":\"d1\",\"seed\":0,\"param_names\":[]}\n{\"x\":1}\n".as_bytes()).is_err());
    }
}
