use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    /// Binary F1 with class 1 as positive.
    F1,
    Matthews,
    /// Mean of Pearson and Spearman correlation.
    PearsonSpearman,
    Rmse,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Rmse)
    }
}

/// A score plus whether it fell back to a default because the statistic was
/// undefined on this input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Score {
    pub value: f64,
    pub undefined: bool,
}

impl Score {
    fn defined(value: f64) -> Self {
        Score { value, undefined: false }
    }

    fn fallback(value: f64) -> Self {
        Score { value, undefined: true }
    }
}

struct Confusion {
    tp: f64,
    tn: f64,
    fp: f64,
    fn_: f64,
}

fn confusion(pred: &[f64], labels: &[f64]) -> Confusion {
    let mut c = Confusion { tp: 0.0, tn: 0.0, fp: 0.0, fn_: 0.0 };
    for (&p, &l) in pred.iter().zip(labels) {
        match (p.round() == 1.0, l.round() == 1.0) {
            (true, true) => c.tp += 1.0,
            (false, false) => c.tn += 1.0,
            (true, false) => c.fp += 1.0,
            (false, true) => c.fn_ += 1.0,
        }
    }
    c
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn compute_metric(pred: &[f64], labels: &[f64], kind: MetricKind) -> Result<Score> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "metric needs equal non-empty inputs, got {} predictions and {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite prediction or label".into()));
    }
    let n = pred.len() as f64;
    Ok(match kind {
        MetricKind::Accuracy => {
            let hits = pred.iter().zip(labels).filter(|(p, l)| p.round() == l.round()).count();
            Score::defined(hits as f64 / n)
        }
        MetricKind::F1 => {
            let c = confusion(pred, labels);
            let denom = 2.0 * c.tp + c.fp + c.fn_;
            if denom == 0.0 {
                // no positives predicted or present: nothing was missed
                Score::fallback(1.0)
            } else {
                Score::defined(2.0 * c.tp / denom)
            }
        }
        MetricKind::Matthews => {
            let c = confusion(pred, labels);
            let denom = ((c.tp + c.fp) * (c.tp + c.fn_) * (c.tn + c.fp) * (c.tn + c.fn_)).sqrt();
            if denom == 0.0 {
                Score::fallback(0.0)
            } else {
                Score::defined((c.tp * c.tn - c.fp * c.fn_) / denom)
            }
        }
        MetricKind::PearsonSpearman => {
            let p = pearson(pred, labels);
            let s = pearson(&average_ranks(pred), &average_ranks(labels));
            match (p, s) {
                (Some(p), Some(s)) => Score::defined((p + s) / 2.0),
                _ => Score::fallback(0.0),
            }
        }
        MetricKind::Rmse => {
            let mse = pred.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / n;
            Score::defined(mse.sqrt())
        }
    })
}

/// Median of `scores`; the mean of the two middle values for even counts.
pub fn median(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InsufficientData("median of no scores".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 { s[m] } else { (s[m - 1] + s[m]) / 2.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsSummary {
    pub task: String,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    pub raw_scores: Vec<f64>,
    pub median: f64,
}

/// Runs `run` once per seed and reports the median final score.
pub fn median_of_runs<F>(task: &str, seeds: &[u64], mut run: F) -> Result<RunsSummary>
where
    F: FnMut(u64) -> Result<f64>,
{
    if seeds.is_empty() {
        return Err(Error::Config("median_of_runs needs at least one seed".into()));
    }
    let mut distinct = seeds.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() {
        return Err(Error::Config("median_of_runs seeds must be distinct".into()));
    }
    let raw_scores = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    Ok(RunsSummary {
        task: task.to_string(),
        n_runs: seeds.len(),
        seeds: seeds.to_vec(),
        median: median(&raw_scores)?,
        raw_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_binary() {
        let y = [1.0, 0.0, 1.0, 1.0, 0.0];
        for k in [MetricKind::Accuracy, MetricKind::F1, MetricKind::Matthews] {
            assert_eq!(compute_metric(&y, &y, k).unwrap().value, 1.0, "{k:?}");
        }
    }

    #[test]
    fn hand_computed_confusion() {
        let p = [1.0, 1.0, 0.0, 0.0];
        let l = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(compute_metric(&p, &l, MetricKind::Accuracy).unwrap().value, 0.5);
        assert_eq!(compute_metric(&p, &l, MetricKind::Matthews).unwrap().value, 0.0);
        assert_eq!(compute_metric(&p, &l, MetricKind::F1).unwrap().value, 0.5);
    }

    #[test]
    fn matthews_single_class_flags() {
        let s = compute_metric(&[1.0, 1.0], &[1.0, 1.0], MetricKind::Matthews).unwrap();
        assert!(s.undefined);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn regression_identity() {
        let y = [0.5, 1.5, -2.0, 3.0];
        assert_eq!(compute_metric(&y, &y, MetricKind::Rmse).unwrap().value, 0.0);
        let c = compute_metric(&y, &y, MetricKind::PearsonSpearman).unwrap();
        assert!((c.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_share_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 3.0);
        assert_eq!(median(&[7.0]).unwrap(), 7.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        let s = median_of_runs("t", &[3, 1, 2], |seed| Ok(seed as f64 * 10.0)).unwrap();
        assert_eq!(s.median, 20.0);
        assert_eq!(s.raw_scores, vec![30.0, 10.0, 20.0]);
    }
}
