//! Scoring and convergence analysis: per-label and mean Dice, peak
//! epoch, epoch@85%, and comparison-report emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, VolumeBundle};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Scalar;
use crate::train::{predict_bundle, MetricsRecord, ModelArtifact, PreprocessMeta};

/// Dice similarity coefficient for one label: `2|P n R| / (|P| + |R|)`.
/// Both sets empty scores 1; exactly one empty scores 0.
pub fn dsc(pred: &LabelMap, reference: &LabelMap, label: u16) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::Dimension {
            axis: 0,
            msg: format!("prediction {:?} vs reference {:?}", pred.shape(), reference.shape()),
        });
    }
    let mut p = 0usize;
    let mut r = 0usize;
    let mut both = 0usize;
    for (&a, &b) in pred.data().iter().zip(reference.data()) {
        let pa = a == label;
        let rb = b == label;
        p += pa as usize;
        r += rb as usize;
        both += (pa && rb) as usize;
    }
    if p + r == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + r) as f64)
}

/// Per-label and mean DSC over a set of volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_label: BTreeMap<u16, f64>,
    pub mean: f64,
    pub n_volumes: usize,
}

/// Score a network on original-geometry bundles: sliding-window (or
/// slice) inference per bundle, per-label DSC averaged across volumes,
/// mean over the foreground labels.
pub fn evaluate_network<T: Scalar>(
    network: &Network<T>,
    preprocess: &PreprocessMeta,
    bundles: &[VolumeBundle],
    overlap: f64,
) -> Result<DiceReport> {
    if bundles.is_empty() {
        return Err(Error::Usage("evaluation needs at least one volume".into()));
    }
    let labels: Vec<u16> = preprocess.label_names.keys().copied().collect();
    if labels.is_empty() {
        return Err(Error::Usage("no foreground labels to score".into()));
    }
    let mut sums: BTreeMap<u16, f64> = labels.iter().map(|&l| (l, 0.0)).collect();
    for bundle in bundles {
        for (&id, _) in &bundle.label_names {
            if !sums.contains_key(&id) {
                return Err(Error::Data(format!(
                    "volume carries label id {id} unknown to the model"
                )));
            }
        }
        let pred = predict_bundle(network, preprocess, bundle, overlap)?;
        for &l in &labels {
            *sums.get_mut(&l).unwrap() += dsc(&pred, &bundle.labels, l)?;
        }
    }
    let n = bundles.len() as f64;
    let per_label: BTreeMap<u16, f64> = sums.into_iter().map(|(l, s)| (l, s / n)).collect();
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(DiceReport { per_label, mean, n_volumes: bundles.len() })
}

/// Score a saved model artifact.
pub fn evaluate(artifact: &ModelArtifact, bundles: &[VolumeBundle], overlap: f64) -> Result<DiceReport> {
    let network: Network<f32> = artifact.instantiate()?;
    evaluate_network(&network, &artifact.preprocess, bundles, overlap)
}

/// Convergence-speed summary of a per-epoch mean-DSC curve. Epochs are
/// 1-based; ties at the peak resolve to the earliest epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub peak_epoch: usize,
    pub peak_value: f64,
    /// First epoch reaching 85% of this curve's own peak.
    pub epoch_at_85: usize,
}

pub fn convergence(curve: &[f64]) -> Result<ConvergenceSummary> {
    if curve.is_empty() {
        return Err(Error::Usage("convergence of an empty curve".into()));
    }
    let mut peak_epoch = 1usize;
    let mut peak_value = curve[0];
    for (i, &v) in curve.iter().enumerate().skip(1) {
        if v > peak_value {
            peak_value = v;
            peak_epoch = i + 1;
        }
    }
    let threshold = 0.85 * peak_value;
    let epoch_at_85 = curve
        .iter()
        .position(|&v| v >= threshold)
        .map(|i| i + 1)
        .expect("the peak itself reaches the threshold");
    Ok(ConvergenceSummary { peak_epoch, peak_value, epoch_at_85 })
}

/// Comparison table in the style of a strategy-vs-baseline summary:
/// best average DSC, gain over the named baseline in percentage points,
/// peak epoch and epoch@85%. Writes `comparison.csv`, `comparison.txt`
/// and one `curve_<name>.csv` per run.
pub fn emit_report(records: &[(String, MetricsRecord)], baseline: Option<&str>, out_dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Usage("no runs to report".into()));
    }
    let baseline_best: Option<f64> = match baseline {
        Some(name) => {
            let rec = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Usage(format!("baseline run {name} not among the records")))?;
            Some(rec.1.best_mean_dsc)
        }
        None => None,
    };
    std::fs::create_dir_all(out_dir)?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (name, rec) in records {
        let curve = rec.mean_dsc_curve();
        let summary = convergence(&curve)?;
        let gain = baseline_best.map(|b| (rec.best_mean_dsc - b) * 100.0);
        let mut row = vec![name.clone(), format!("{:.4}", rec.best_mean_dsc)];
        if let Some(g) = gain {
            row.push(format!("{:+.2}", g));
        }
        row.push(summary.peak_epoch.to_string());
        row.push(summary.epoch_at_85.to_string());
        rows.push(row);

        let mut w = csv::Writer::from_path(out_dir.join(format!("curve_{name}.csv")))?;
        w.write_record(["epoch", "mean_dsc"]).map_err(|e| Error::Format(e.to_string()))?;
        for (i, v) in curve.iter().enumerate() {
            w.write_record(&[(i + 1).to_string(), format!("{v:.6}")])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
    }

    let mut header = vec!["strategy".to_string(), "best_avg_dsc".into()];
    if baseline_best.is_some() {
        header.push("gain_vs_baseline_pp".into());
    }
    header.push("peak_epoch".into());
    header.push("epoch_at_85pct".into());

    let mut w = csv::Writer::from_path(out_dir.join("comparison.csv"))?;
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for row in &rows {
        w.write_record(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;

    let mut text = String::new();
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r[i].len()).chain([h.len()]).max().unwrap())
        .collect();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:>w$}", w = w))
            .collect::<Vec<_>>()
            .join("  ")
    };
    text.push_str(&fmt_row(&header, &widths));
    text.push('\n');
    for row in &rows {
        text.push_str(&fmt_row(row, &widths));
        text.push('\n');
    }
    std::fs::write(out_dir.join("comparison.txt"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(data: Vec<u16>) -> LabelMap {
        let n = data.len();
        LabelMap::new(vec![n], data).unwrap()
    }

    #[test]
    fn dsc_hand_cases() {
        let a = labels(vec![1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);

        let b = labels(vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);

        // |P| = |R| = 4, |P n R| = 2 -> 0.5
        let c = labels(vec![0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.5);
    }

    #[test]
    fn dsc_empty_set_conventions() {
        let empty = labels(vec![0, 0, 0]);
        let full = labels(vec![1, 1, 0]);
        assert_eq!(dsc(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &full, 1).unwrap(), 0.0);
        assert_eq!(dsc(&full, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn dsc_is_symmetric() {
        let a = labels(vec![1, 1, 0, 2, 1, 0]);
        let b = labels(vec![1, 0, 0, 1, 1, 2]);
        for l in [1u16, 2] {
            assert_eq!(dsc(&a, &b, l).unwrap(), dsc(&b, &a, l).unwrap());
        }
    }

    #[test]
    fn dsc_shape_mismatch_is_dimension_error() {
        let a = labels(vec![1, 0]);
        let b = labels(vec![1, 0, 0]);
        assert!(matches!(dsc(&a, &b, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn convergence_scan_case() {
        let s = convergence(&[0.2, 0.5, 0.8, 0.85, 0.9]).unwrap();
        assert_eq!(s.peak_epoch, 5);
        assert_eq!(s.peak_value, 0.9);
        // threshold 0.765 first reached at epoch 3 (0.8)
        assert_eq!(s.epoch_at_85, 3);
    }

    #[test]
    fn convergence_tie_takes_earliest() {
        let s = convergence(&[0.7, 0.7]).unwrap();
        assert_eq!(s.peak_epoch, 1);
        assert_eq!(s.epoch_at_85, 1);

        let single = convergence(&[0.4]).unwrap();
        assert_eq!((single.peak_epoch, single.epoch_at_85), (1, 1));
    }

    #[test]
    fn convergence_invariant_under_low_tail() {
        let base = vec![0.2, 0.5, 0.8, 0.85, 0.9];
        let s1 = convergence(&base).unwrap();
        let mut extended = base.clone();
        extended.extend([0.1, 0.3, 0.7]); // all below 0.85 * 0.9
        let s2 = convergence(&extended).unwrap();
        assert_eq!(s1.epoch_at_85, s2.epoch_at_85);
        assert_eq!(s1.peak_epoch, s2.peak_epoch);
    }

    fn record_with_curve(curve: &[f64]) -> MetricsRecord {
        let mut names = BTreeMap::new();
        names.insert(1u16, "organ".to_string());
        let epochs = curve
            .iter()
            .enumerate()
            .map(|(i, &v)| crate::train::EpochRecord {
                epoch: i + 1,
                lr: 1e-3,
                train_loss: 1.0 - v,
                val_loss: 1.0 - v,
                per_label_dsc: BTreeMap::from([(1u16, v)]),
                mean_dsc: v,
                trainable_params: 10,
            })
            .collect::<Vec<_>>();
        let best = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best_epoch = curve.iter().position(|&v| v == best).unwrap() + 1;
        MetricsRecord {
            label_names: names,
            epochs,
            best_epoch,
            best_mean_dsc: best,
            initial_val_dsc: curve[0],
        }
    }

    #[test]
    fn report_gain_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            ("scratch".to_string(), record_with_curve(&[0.5, 0.7987])),
            ("lora".to_string(), record_with_curve(&[0.6, 0.8864])),
        ];
        emit_report(&records, Some("scratch"), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert!(csv.contains("+8.77"), "{csv}");
        assert!(csv.contains("0.8864"));
        assert!(dir.path().join("curve_scratch.csv").exists());
        assert!(dir.path().join("curve_lora.csv").exists());
        assert!(dir.path().join("comparison.txt").exists());
    }

    #[test]
    fn report_without_baseline_drops_gain_column() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![("only".to_string(), record_with_curve(&[0.4, 0.6]))];
        emit_report(&records, None, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert!(!csv.contains("gain"));
    }

    #[test]
    fn report_is_deterministic() {
        let records = vec![
            ("scratch".to_string(), record_with_curve(&[0.5, 0.75])),
            ("gu".to_string(), record_with_curve(&[0.72, 0.81])),
        ];
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_report(&records, Some("scratch"), d1.path()).unwrap();
        emit_report(&records, Some("scratch"), d2.path()).unwrap();
        for f in ["comparison.csv", "comparison.txt", "curve_gu.csv"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn missing_baseline_is_usage_error() {
        let records = vec![("run".to_string(), record_with_curve(&[0.4]))];
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&records, Some("scratch"), dir.path()),
            Err(Error::Usage(_))
        ));
    }
}
