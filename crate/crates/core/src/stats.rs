//! Classification metrics, fold aggregation and the paired t-test.

use std::fmt;

use thiserror::Error;

use crate::xai::{heat_score_aggregate, HeatScoreResult, XaiError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ROC-AUC needs both classes among the labels")]
    OneClassOnly,
    #[error("paired differences have zero variance")]
    DegenerateDifferences,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error(transparent)]
    Xai(#[from] XaiError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

pub fn accuracy(labels: &[u8], predictions: &[u8]) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(StatsError::LengthMismatch(labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let hits = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Class decisions at the 0.5 threshold on positive-class scores.
pub fn threshold_predictions(scores: &[f64]) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= 0.5)).collect()
}

/// Area under the ROC curve: the fraction of (positive, negative) pairs
/// ranked correctly, ties counting one half. Computed from mid-ranks, so the
/// result equals the pair count divided by `n_pos·n_neg` exactly.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(StatsError::LengthMismatch(labels.len(), scores.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, kept integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the mid-rank (i+j+2)/2.
        let mid2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_pos += mid2 * pos_in_group;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    // 2·U = 2·R − n_pos·(n_pos + 1)
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
}

/// Paired two-sided Student t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = sample_std_with_mean(&d, mean);
    if sd == 0.0 || d.iter().all(|&x| x == d[0]) {
        return Err(StatsError::DegenerateDifferences);
    }
    let t = mean / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    Ok(TTestResult {
        t,
        p: student_t_two_sided_p(t, df),
        df,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by the modified-Lentz continued fraction, converged to 1e-10.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fastest for x < (a+1)/(a+b+2); use the symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-10;
    const MAX_ITER: usize = 10_000;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample (n − 1) standard deviation.
pub fn sample_std(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(StatsError::TooFewSamples(xs.len()));
    }
    Ok(sample_std_with_mean(xs, mean(xs)?))
}

fn sample_std_with_mean(xs: &[f64], m: f64) -> f64 {
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// A mean and its spread, rendered as `"0.803 ± 0.070"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Result<Self> {
        Ok(Self {
            mean: mean(xs)?,
            std: sample_std(xs)?,
        })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Test-set results of one cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub roc_auc: f64,
    pub subject_ids: Vec<String>,
    /// Positive-class probabilities.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Heat-Score of every lesion-positive test scan that could be scored.
    pub heat_scores: Vec<(String, HeatScoreResult)>,
    /// Lesion-positive scans whose Heat-Score computation failed.
    pub heat_score_failures: Vec<(String, String)>,
}

impl FoldMetrics {
    /// Accuracy at threshold 0.5 and ROC-AUC of `scores`.
    pub fn from_scores(fold: usize, subject_ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() || subject_ids.len() != labels.len() {
            return Err(StatsError::LengthMismatch(scores.len(), labels.len()));
        }
        let accuracy = accuracy(&labels, &threshold_predictions(&scores))?;
        let roc_auc = roc_auc(&labels, &scores)?;
        Ok(Self {
            fold,
            accuracy,
            roc_auc,
            subject_ids,
            scores,
            labels,
            heat_scores: Vec::new(),
            heat_score_failures: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub model: String,
    /// Transfer-learning regime tag (`no`, `1`, `23`, …).
    pub tl: String,
    pub modality: String,
    pub accuracy: MeanStd,
    pub roc_auc: MeanStd,
    /// Mean Heat-Score over all scored scans, `None` when no scan could be scored.
    pub heat_score: Option<f64>,
    pub heat_scored: usize,
    pub heat_excluded: usize,
}

pub const REPORT_HEADER: &str = "model,tl,modality,acc_mean,acc_std,roc_mean,roc_std,heat_score";

impl ExperimentReport {
    /// One row under [`REPORT_HEADER`]; a missing Heat-Score is written as `NA`.
    pub fn csv_row(&self) -> String {
        let hs = self.heat_score.map_or_else(|| "NA".to_string(), |h| format!("{h:.6}"));
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.model,
            self.tl,
            self.modality,
            self.accuracy.mean,
            self.accuracy.std,
            self.roc_auc.mean,
            self.roc_auc.std,
            hs
        )
    }

    /// Human-readable summary lines.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} (TL {}, {}): accuracy {}, ROC {}\n",
            self.model, self.tl, self.modality, self.accuracy, self.roc_auc
        );
        match self.heat_score {
            Some(h) => s.push_str(&format!("Heat-Score: {h:.3}")),
            None => s.push_str("Heat-Score: NA"),
        }
        if self.heat_excluded > 0 {
            s.push_str(&format!(" ({} scans excluded)", self.heat_excluded));
        }
        s.push('\n');
        s
    }
}

/// Fold-level mean ± sample std and the pooled Heat-Score.
pub fn summarize_runs(
    model: &str,
    tl: &str,
    modality: &str,
    folds: &[FoldMetrics],
) -> Result<ExperimentReport> {
    if folds.len() < 2 {
        return Err(StatsError::TooFewFolds(folds.len()));
    }
    let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let roc: Vec<f64> = folds.iter().map(|f| f.roc_auc).collect();
    let pooled: Vec<HeatScoreResult> = folds
        .iter()
        .flat_map(|f| f.heat_scores.iter().map(|(_, r)| *r))
        .collect();
    let heat_score = match heat_score_aggregate(&pooled) {
        Ok(h) => Some(h),
        Err(XaiError::EmptyInput) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(ExperimentReport {
        model: model.to_string(),
        tl: tl.to_string(),
        modality: modality.to_string(),
        accuracy: MeanStd::of(&acc)?,
        roc_auc: MeanStd::of(&roc)?,
        heat_score,
        heat_scored: pooled.len(),
        heat_excluded: folds.iter().map(|f| f.heat_score_failures.len()).sum(),
    })
}

/// The delimited report table.
pub fn report_csv(reports: &[ExperimentReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
