//! Segmentation and reconstruction metrics plus report assembly.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::inference::{reconstruct_volume, residual_map, AnomalyMap, InferenceConfig};
use crate::model::Mcddpm;
use crate::postprocess::{brain_mask, clean, threshold_binarize, PostprocessConfig};
use crate::training::PNorm;
use crate::volume::{BinaryMap, Volume3D};
use crate::data::VolumeRecord;

/// `2|A∩B| / (|A| + |B|)`, 1.0 when both are empty.
pub fn dice(pred: &BinaryMap, truth: &BinaryMap) -> Result<f64> {
    ensure!(pred.dims() == truth.dims(), "prediction {:?} and truth {:?} differ in shape", pred.dims(), truth.dims());
    let (inter, total) = overlap(pred, truth);
    Ok(dice_from_counts(inter, total))
}

fn overlap(pred: &BinaryMap, truth: &BinaryMap) -> (usize, usize) {
    let mut inter = 0;
    let mut total = 0;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        inter += (a & b) as usize;
        total += a as usize + b as usize;
    }
    (inter, total)
}

fn dice_from_counts(inter: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Average precision: sum over distinct score levels (descending) of
/// recall increment times precision at that level.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> Result<f64> {
    ensure!(scores.len() == labels.len(), "{} scores for {} labels", scores.len(), labels.len());
    let npos = labels.iter().filter(|&&l| l).count();
    if npos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive voxel".into()));
    }
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores contain NaN");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut tp_prev) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let level = scores[order[i]];
        while i < order.len() && scores[order[i]] == level {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > tp_prev {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (tp - tp_prev) as f64 / npos as f64 * precision;
            tp_prev = tp;
        }
    }
    Ok(ap)
}

/// Scores and labels of the voxels inside `mask`.
pub fn masked_scores(scores: &AnomalyMap, truth: &BinaryMap, mask: &BinaryMap) -> Result<(Vec<f32>, Vec<bool>)> {
    ensure!(scores.dims() == truth.dims() && truth.dims() == mask.dims(), "score, truth and mask shapes differ");
    let mut s = Vec::new();
    let mut l = Vec::new();
    for ((&v, &t), &m) in scores.data.data().iter().zip(truth.data()).zip(mask.data()) {
        if m == 1 {
            s.push(v);
            l.push(t == 1);
        }
    }
    Ok((s, l))
}

/// Pixel-level AUPRC of `scores` against `truth` over the voxels of `mask`.
pub fn auprc(scores: &AnomalyMap, truth: &BinaryMap, mask: &BinaryMap) -> Result<f64> {
    let (s, l) = masked_scores(scores, truth, mask)?;
    average_precision(&s, &l)
}

/// Mean `|v − v̂|` over voxels where `v > 0`.
pub fn reconstruction_error(v: &Volume3D, v_hat: &Volume3D) -> Result<f64> {
    ensure!(v.dims() == v_hat.dims(), "volume {:?} and reconstruction {:?} differ in shape", v.dims(), v_hat.dims());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&a, &b) in v.data().iter().zip(v_hat.data()) {
        if a > 0.0 {
            sum += (a as f64 - b as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("reconstruction error over an empty brain mask".into()));
    }
    Ok(sum / n as f64)
}

/// Everything computed for one test volume before thresholding.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub subject_id: String,
    pub reconstruction: Volume3D,
    pub residual: AnomalyMap,
    /// Median-filtered residual.
    pub filtered: AnomalyMap,
    /// Eroded brain mask.
    pub mask: BinaryMap,
    pub truth: Option<BinaryMap>,
    pub recon_error: Option<f64>,
}

impl CaseResult {
    pub fn has_anomaly(&self) -> bool {
        self.truth.as_ref().is_some_and(|t| t.count() > 0)
    }

    pub fn segmentation(&self, theta: f64) -> Result<BinaryMap> {
        threshold_binarize(&self.filtered, &self.mask, theta)
    }
}

pub fn analyze_case<T: crate::tensor::Real>(
    model: &Mcddpm<T>,
    record: &VolumeRecord,
    schedule: &NoiseSchedule,
    infer: &InferenceConfig,
    post: &PostprocessConfig,
    p: PNorm,
) -> Result<CaseResult> {
    let v = &record.volume;
    let reconstruction = reconstruct_volume(model, v, schedule, infer)?;
    let residual = residual_map(v, &reconstruction, p)?;
    let cleaned = clean(v, &residual, post)?;
    let recon_error = if brain_mask(v).count() > 0 { Some(reconstruction_error(v, &reconstruction)?) } else { None };
    Ok(CaseResult {
        subject_id: record.subject_id.clone(),
        reconstruction,
        residual,
        filtered: cleaned.filtered,
        mask: cleaned.mask,
        truth: record.ground_truth.clone(),
        recon_error,
    })
}

/// One report row; percentages in `[0, 100]`, `None` where not applicable.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub dice_pooled: Option<f64>,
    pub dice_mean: Option<f64>,
    pub auprc: Option<f64>,
    pub recon_error: Option<f64>,
    pub theta: f64,
    pub p: u32,
    pub checkpoint: String,
}

/// Metrics of the cases at each threshold.
///
/// Dice is pooled over all voxels of anomalous cases and also averaged per
/// case; AUPRC pools the filtered scores inside the eroded masks; the
/// reconstruction error averages the healthy cases (all cases if none are healthy).
pub fn evaluate_cases(cases: &[CaseResult], thetas: &[f64], dataset: &str, checkpoint: &str) -> Result<Vec<EvalRow>> {
    ensure!(!cases.is_empty(), "no cases to evaluate");
    ensure!(!thetas.is_empty(), "no thresholds given");
    let p = cases[0].residual.p_norm.as_int();
    let anomalous: Vec<&CaseResult> = cases.iter().filter(|c| c.has_anomaly()).collect();
    let healthy: Vec<f64> = cases.iter().filter(|c| !c.has_anomaly()).filter_map(|c| c.recon_error).collect();
    let recon_error = if !healthy.is_empty() {
        Some(healthy.iter().sum::<f64>() / healthy.len() as f64)
    } else {
        let all: Vec<f64> = cases.iter().filter_map(|c| c.recon_error).collect();
        (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
    };
    let auprc_value = if anomalous.is_empty() {
        None
    } else {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for c in &anomalous {
            let (cs, cl) = masked_scores(&c.filtered, c.truth.as_ref().unwrap(), &c.mask)?;
            s.extend(cs);
            l.extend(cl);
        }
        match average_precision(&s, &l) {
            Ok(v) => Some(100.0 * v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        }
    };
    let mut rows = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let (dice_pooled, dice_mean) = if anomalous.is_empty() {
            (None, None)
        } else {
            let (mut inter, mut total, mut per_case) = (0, 0, 0.0);
            for c in &anomalous {
                let seg = c.segmentation(theta)?;
                let (i, t) = overlap(&seg, c.truth.as_ref().unwrap());
                inter += i;
                total += t;
                per_case += dice_from_counts(i, t);
            }
            (Some(100.0 * dice_from_counts(inter, total)), Some(100.0 * per_case / anomalous.len() as f64))
        };
        rows.push(EvalRow {
            dataset: dataset.to_string(),
            dice_pooled,
            dice_mean,
            auprc: auprc_value,
            recon_error,
            theta,
            p,
            checkpoint: checkpoint.to_string(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const REPORT_COLUMNS: [&str; 8] = ["dataset", "dice_pooled", "dice_mean", "auprc", "recon_error", "theta", "p", "checkpoint"];

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "NA".into())
}

impl EvalReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
        w.write_record(REPORT_COLUMNS).map_err(|e| Error::data(path, e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                cell(r.dice_pooled, 4),
                cell(r.dice_mean, 4),
                cell(r.auprc, 4),
                cell(r.recon_error, 6),
                format!("{}", r.theta),
                r.p.to_string(),
                r.checkpoint.clone(),
            ])
            .map_err(|e| Error::data(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>11} {:>9} {:>8} {:>11} {:>6} {:>2}  {}\n",
            "dataset", "dice_pooled", "dice_mean", "auprc", "recon_error", "theta", "p", "checkpoint"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>11} {:>9} {:>8} {:>11} {:>6} {:>2}  {}",
                r.dataset,
                cell(r.dice_pooled, 2),
                cell(r.dice_mean, 2),
                cell(r.auprc, 2),
                cell(r.recon_error, 5),
                r.theta,
                r.p,
                r.checkpoint
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(bits: &[u8]) -> BinaryMap {
        BinaryMap::new(bits.len(), 1, 1, bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = map(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = map(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &map(&[0, 0, 0, 0, 1, 1, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&map(&[0, 0]), &map(&[0, 0])).unwrap(), 1.0);
        assert_eq!(dice(&map(&[0, 0]), &map(&[1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn average_precision_cases() {
        let s = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let l = [true, true, false, true, false, false];
        let expected = (1.0 + 1.0 + 0.75) / 3.0;
        assert!((average_precision(&s, &l).unwrap() - expected).abs() < 1e-15);
        assert_eq!(average_precision(&[0.5; 4], &[true, false, false, false]).unwrap(), 0.25);
        assert!(matches!(average_precision(&[0.1], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn reconstruction_error_offset() {
        let v = Volume3D::new(2, 2, 1, vec![0.5, 0.0, 0.5, 0.5]).unwrap();
        let vh = Volume3D::new(2, 2, 1, vec![0.51, 0.3, 0.51, 0.51]).unwrap();
        assert!((reconstruction_error(&v, &vh).unwrap() - 0.01).abs() < 1e-6);
        assert_eq!(reconstruction_error(&v, &v).unwrap(), 0.0);
    }
}
