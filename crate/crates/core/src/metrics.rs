//! Binary classification metrics (positive class = hallucinated) and the
//! throughput harness.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("no predictions to count".into()));
    }
    let mut c = ConfusionCounts::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (p.is_positive(), l.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(precision, recall)`; zero denominators give 0.
pub fn precision_recall(c: &ConfusionCounts) -> (f64, f64) {
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

pub fn balanced_accuracy(c: &ConfusionCounts) -> f64 {
    (ratio(c.tp, c.tp + c.fn_) + ratio(c.tn, c.tn + c.fp)) / 2.0
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

/// Mann–Whitney ROC AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tie-averaged ranks integral.
    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, average = (i + j + 2) / 2
        let rank2 = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k].is_positive()).count() as u64;
        pos_rank_sum2 += rank2 * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Points for every distinct score used as a `≥` threshold, from the
/// highest down, starting at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(points)
}

pub fn write_roc_csv(mut w: impl Write, points: &[RocPoint]) -> Result<()> {
    writeln!(w, "threshold,fpr,tpr")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub balanced_accuracy: f64,
    pub mcc: f64,
    /// `None` when only one class is present.
    pub roc_auc: Option<f64>,
    pub latency_samples_per_sec: Option<f64>,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[Label], threshold: f64) -> Result<Self> {
        let preds: Vec<Label> = scores
            .iter()
            .map(|&s| crate::aggregator::predict(s, threshold))
            .collect();
        let counts = confusion(&preds, labels)?;
        let (precision, recall) = precision_recall(&counts);
        let roc_auc = match roc_auc(scores, labels) {
            Ok(v) => Some(v),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            precision,
            recall,
            balanced_accuracy: balanced_accuracy(&counts),
            mcc: mcc(&counts),
            roc_auc,
            latency_samples_per_sec: None,
            threshold,
            counts,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub mean_samples_per_sec: f64,
    pub std_samples_per_sec: f64,
}

/// Times `run(batch_index)` over consecutive batches; each call must process
/// `batch_size` samples. The closure is responsible for cycling its data.
pub fn latency_bench(
    batch_size: usize,
    warmup_iters: usize,
    timed_iters: usize,
    mut run: impl FnMut(usize) -> Result<()>,
) -> Result<LatencyReport> {
    if batch_size == 0 || timed_iters == 0 {
        return Err(Error::Config("batch size and timed iterations must be ≥ 1".into()));
    }
    for i in 0..warmup_iters {
        run(i)?;
    }
    let mut rates = Vec::with_capacity(timed_iters);
    for i in 0..timed_iters {
        let start = Instant::now();
        run(warmup_iters + i)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        rates.push(batch_size as f64 / secs);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
    Ok(LatencyReport {
        batch_size,
        warmup_iters,
        timed_iters,
        mean_samples_per_sec: mean,
        std_samples_per_sec: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Faithful as F, Hallucinated as H};

    fn cc(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| if b == 1 { H } else { F }).collect()
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&labels(&[1, 1, 0, 0]), &labels(&[1, 0, 0, 1])).unwrap();
        assert_eq!(c, cc(1, 1, 1, 1));
        let y = labels(&[1, 0, 1]);
        let c = confusion(&y, &y).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = labels(&[0, 1, 0]);
        let c = confusion(&inv, &y).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&y, &y[..2]).is_err());
    }

    #[test]
    fn precision_recall_examples() {
        assert_eq!(precision_recall(&cc(1, 0, 0, 0)), (1.0, 1.0));
        assert_eq!(precision_recall(&cc(0, 0, 5, 3)).0, 0.0);
        assert_eq!(precision_recall(&cc(3, 1, 0, 2)), (0.75, 0.6));
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&cc(5, 0, 5, 0)), 1.0);
        assert_eq!(balanced_accuracy(&cc(5, 5, 0, 0)), 0.5);
        assert!((balanced_accuracy(&cc(3, 1, 4, 2)) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&cc(4, 0, 6, 0)), 1.0);
        assert!((mcc(&cc(3, 1, 4, 2)) - 10.0 / 600f64.sqrt()).abs() < 1e-15);
        assert!((mcc(&cc(3, 1, 4, 2)) - 0.4082).abs() < 1e-4);
        assert_eq!(mcc(&cc(4, 6, 0, 0)), 0.0);
    }

    #[test]
    fn roc_auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &labels(&[1, 0, 1, 0, 0, 1])).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3], &labels(&[1, 0, 1])).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &labels(&[1, 1])), Err(Error::SingleClass)));
    }

    #[test]
    fn roc_curve_ends_at_one_one() {
        let pts = roc_curve(&[0.9, 0.8, 0.8, 0.1], &labels(&[1, 0, 1, 0])).unwrap();
        assert_eq!(pts.len(), 4);
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        let mut buf = Vec::new();
        write_roc_csv(&mut buf, &pts).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("threshold,fpr,tpr\n"));
    }

    #[test]
    fn report_with_one_class_has_null_auc() {
        let r = MetricsReport::compute(&[0.2, 0.7], &labels(&[0, 0]), 0.5).unwrap();
        assert_eq!(r.roc_auc, None);
        assert_eq!(r.counts, cc(0, 1, 1, 0));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["roc_auc"].is_null());
    }

    #[test]
    fn bench_reports_positive_rate() {
        let r = latency_bench(4, 1, 3, |_| Ok(())).unwrap();
        assert!(r.mean_samples_per_sec > 0.0);
        assert!(latency_bench(0, 0, 1, |_| Ok(())).is_err());
    }

    proptest! {
        #[test]
        fn auc_invariant_under_reordering(pairs in prop::collection::vec((0u8..5, any::<bool>()), 2..60), rot in 0usize..60) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let ls: Vec<Label> = pairs.iter().map(|p| if p.1 { H } else { F }).collect();
            prop_assume!(ls.contains(&H) && ls.contains(&F));
            let a = roc_auc(&scores, &ls).unwrap();
            let k = rot % scores.len();
            let (mut s2, mut l2) = (scores.clone(), ls.clone());
            s2.rotate_left(k);
            l2.rotate_left(k);
            prop_assert_eq!(a, roc_auc(&s2, &l2).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
