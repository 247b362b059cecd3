//! Prototype trajectories as CSV: one row per prototype per iteration plus the
//! calibrated support, query and unlabeled points, ready for 2-D projection.

use std::io::{Read, Write};

use crate::calibration::CalibratedEpisode;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::proto_inference::Prototypes;

/// Parsed trajectory file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectories {
    /// Centers per iteration, `n_way x d` each.
    pub history: Vec<Matrix>,
    pub support: Vec<(usize, Vec<f64>)>,
    pub query: Vec<(usize, Vec<f64>)>,
    pub unlabeled: Vec<(usize, Vec<f64>)>,
}

fn record(kind: &str, iteration: Option<usize>, label: usize, coords: &[f64]) -> Vec<String> {
    let mut row = Vec::with_capacity(3 + coords.len());
    row.push(kind.to_string());
    row.push(iteration.map(|i| i.to_string()).unwrap_or_default());
    row.push(label.to_string());
    // Debug formatting of f64 round-trips exactly.
    row.extend(coords.iter().map(|v| format!("{v:?}")));
    row
}

/// Write `kind,iteration,label,x0..x{d-1}` rows. `kind` is `prototype`,
/// `support`, `query` or `unlabeled`; `iteration` is empty for data points.
pub fn export_trajectories<W: Write>(
    episode: &Episode,
    calibrated: &CalibratedEpisode,
    prototypes: &Prototypes,
    out: W,
) -> Result<()> {
    if prototypes.history.is_empty() {
        return Err(Error::HistoryUnavailable);
    }
    let d = prototypes.centers.ncols();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["kind".to_string(), "iteration".to_string(), "label".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (t, centers) in prototypes.history.iter().enumerate() {
        for (c, row) in centers.iter_rows().enumerate() {
            w.write_record(record("prototype", Some(t), c, row))?;
        }
    }
    let sets = [
        ("support", &calibrated.support_features, &episode.support.labels),
        ("query", &calibrated.query_features, &episode.query.labels),
        ("unlabeled", &calibrated.unlabeled_features, &episode.unlabeled.labels),
    ];
    for (kind, features, labels) in sets {
        for (row, &label) in features.iter_rows().zip(labels) {
            w.write_record(record(kind, None, label, row))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(line: u64, message: impl Into<String>) -> Error {
    Error::FormatError {
        offset: line,
        message: message.into(),
    }
}

/// Parse a file written by [`export_trajectories`]. Format errors carry the
/// byte offset of the offending record.
pub fn read_trajectories<R: Read>(input: R) -> Result<Trajectories> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Trajectories::default();
    let mut protos: Vec<Vec<(usize, Vec<f64>)>> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let at = rec.position().map(|p| p.byte()).unwrap_or(0);
        if rec.len() < 3 {
            return Err(bad(at, "record has fewer than 3 fields"));
        }
        let label: usize = rec[2].parse().map_err(|_| bad(at, "bad label"))?;
        let coords = rec
            .iter()
            .skip(3)
            .map(|s| s.parse::<f64>().map_err(|_| bad(at, format!("bad number {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        match &rec[0] {
            "prototype" => {
                let t: usize = rec[1].parse().map_err(|_| bad(at, "bad iteration"))?;
                if protos.len() <= t {
                    protos.resize_with(t + 1, Vec::new);
                }
                protos[t].push((label, coords));
            }
            "support" => out.support.push((label, coords)),
            "query" => out.query.push((label, coords)),
            "unlabeled" => out.unlabeled.push((label, coords)),
            other => return Err(bad(at, format!("unknown kind {other:?}"))),
        }
    }
    for mut rows in protos {
        rows.sort_by_key(|(c, _)| *c);
        let coords: Vec<&Vec<f64>> = rows.iter().map(|(_, v)| v).collect();
        out.history.push(Matrix::from_rows(&coords)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate_episode, CalibrationConfig};
    use crate::episodes::{sample_episode, synth_gaussian_dataset, EpisodeSpec, GaussianSynthConfig};
    use crate::numerics::RngStream;
    use crate::proto_inference::{cipa_infer, InferenceConfig};

    fn setup(sigma: f64) -> (Episode, CalibratedEpisode, Prototypes) {
        let cfg = GaussianSynthConfig { classes: 6, per_class: 20, dim: 5, nonnegative: true, offset: 1.0, ..Default::default() };
        let set = synth_gaussian_dataset(RngStream::new(2), &cfg).unwrap();
        let ep = sample_episode(&set, &EpisodeSpec::new(3, 2, 4), RngStream::new(3)).unwrap();
        let cal = calibrate_episode(&ep, &CalibrationConfig::default()).unwrap();
        let inf = InferenceConfig { sigma, ..Default::default() };
        let (_, protos) = cipa_infer(&cal, &inf).unwrap();
        (ep, cal, protos)
    }

    #[test]
    fn rows_per_class_and_round_trip() {
        let (ep, cal, protos) = setup(0.2);
        let mut buf = Vec::new();
        export_trajectories(&ep, &cal, &protos, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let proto_rows = text.lines().filter(|l| l.starts_with("prototype,")).count();
        assert_eq!(proto_rows, 21 * 3);
        let back = read_trajectories(buf.as_slice()).unwrap();
        assert_eq!(back.history, protos.history);
        assert_eq!(back.query.len(), 12);
        assert_eq!(back.support.len(), 6);
        assert_eq!(back.query[0].1, cal.query_features.row(0));
    }

    #[test]
    fn zero_momentum_keeps_centers() {
        let (_, _, protos) = setup(0.0);
        assert!(protos.history.iter().all(|h| *h == protos.history[0]));
    }

    #[test]
    fn missing_history() {
        let (ep, cal, mut protos) = setup(0.2);
        protos.history.clear();
        assert!(matches!(export_trajectories(&ep, &cal, &protos, Vec::new()), Err(Error::HistoryUnavailable)));
    }
}
