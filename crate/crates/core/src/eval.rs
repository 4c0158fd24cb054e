//! Classification metrics and paired Wilcoxon comparisons.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        bail!(Empty, "no predictions to score");
    }
    if preds.len() != labels.len() {
        bail!(Shape, "{} predictions for {} labels", preds.len(), labels.len());
    }
    Ok(())
}

/// Fraction of predictions equal to their label.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// `confusion[actual][predicted]`.
pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_pair(preds, labels)?;
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::InvalidTarget { target: p.max(l), classes: n_classes });
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1; a class with no true and no predicted
/// positives scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let m = confusion(preds, labels, n_classes)?;
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = m[c][c] as f64;
        let predicted: usize = (0..n_classes).map(|r| m[r][c]).sum();
        let actual: usize = m[c].iter().sum();
        // 2PR/(P+R) simplifies to 2TP/(predicted + actual).
        if predicted + actual > 0 {
            total += 2.0 * tp / (predicted + actual) as f64;
        }
    }
    Ok(total / n_classes as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    libm::sqrt(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 5;

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Number of subsets of `{1..n}` with each possible rank sum.
fn rank_sum_counts(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0.0; max + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Standard normal upper tail.
fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / core::f64::consts::SQRT_2)
}

/// Two-sided paired Wilcoxon signed-rank test.
///
/// Zero differences are dropped. The exact null distribution is used for
/// `n <= 25` without tied magnitudes; otherwise the normal approximation with
/// tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        bail!(Shape, "paired samples differ in length ({} vs {})", a.len(), b.len());
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        bail!(Degenerate, "all paired differences are zero");
    }
    if d.len() < MIN_PAIRS {
        bail!(Precondition, "need at least {MIN_PAIRS} non-zero differences, got {}", d.len());
    }
    let n = d.len();
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&mags);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    let tied = {
        let mut sorted = mags.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.windows(2).any(|p| p[0] == p[1])
    };
    if n <= EXACT_MAX_N && !tied {
        return Ok(WilcoxonResult { statistic: w, p_value: exact_p(n, w), n, method: WilcoxonMethod::Exact });
    }
    Ok(WilcoxonResult { statistic: w, p_value: normal_p(w, &ranks), n, method: WilcoxonMethod::Normal })
}

/// Two-sided p from the exact null distribution of the rank sum.
fn exact_p(n: usize, w: f64) -> f64 {
    let counts = rank_sum_counts(n);
    let below: f64 = counts[..=(w as usize)].iter().sum();
    (2.0 * below / libm::pow(2.0, n as f64)).min(1.0)
}

/// Two-sided p from the normal approximation with tie and continuity corrections.
fn normal_p(w: f64, ranks: &[f64]) -> f64 {
    let nf = ranks.len() as f64;
    let mean_w = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        let t = j as f64;
        var -= (t * t * t - t) / 48.0;
        i += j;
    }
    let diff = w - mean_w;
    let correction = 0.5
        * if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
    let z = (diff - correction) / libm::sqrt(var);
    (2.0 * normal_sf(z.abs())).min(1.0)
}

/// One off-diagonal cell of a comparison matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PCell {
    P(f64),
    /// Every paired difference was zero.
    Degenerate,
    /// Fewer than five non-zero differences.
    TooFew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    pub methods: Vec<String>,
    /// `cells[i][j]`; `None` on the diagonal.
    pub cells: Vec<Vec<Option<PCell>>>,
}

/// Per-subject accuracies (in %) for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub subjects: Vec<String>,
    pub accuracies: Vec<f64>,
}

/// Pairwise two-sided Wilcoxon p-values between methods scored on the same subjects.
pub fn compare_methods(results: &[MethodScores]) -> Result<PValueMatrix> {
    if let Some(first) = results.first() {
        for r in results {
            if r.subjects != first.subjects || r.accuracies.len() != r.subjects.len() {
                bail!(Shape, "method {} is not scored on the same subjects as {}", r.method, first.method);
            }
        }
    }
    let k = results.len();
    let mut cells = vec![vec![None; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            cells[i][j] = Some(match wilcoxon_signed_rank(&results[i].accuracies, &results[j].accuracies) {
                Ok(r) => PCell::P(r.p_value),
                Err(Error::Degenerate(_)) => PCell::Degenerate,
                Err(Error::Precondition(_)) => PCell::TooFew,
                Err(e) => return Err(e),
            });
        }
    }
    Ok(PValueMatrix { methods: results.iter().map(|r| r.method.clone()).collect(), cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject: String,
    /// Percent correct.
    pub accuracy: f64,
    pub f1: f64,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub subjects: Vec<SubjectResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

impl MethodReport {
    pub fn new(method: &str, subjects: Vec<SubjectResult>) -> Self {
        let acc: Vec<f64> = subjects.iter().map(|s| s.accuracy).collect();
        let f1: Vec<f64> = subjects.iter().map(|s| s.f1).collect();
        MethodReport {
            method: String::from(method),
            mean_accuracy: mean(&acc),
            std_accuracy: sample_std(&acc),
            mean_f1: mean(&f1),
            std_f1: sample_std(&f1),
            subjects,
        }
    }

    pub fn scores(&self) -> MethodScores {
        MethodScores {
            method: self.method.clone(),
            subjects: self.subjects.iter().map(|s| s.subject.clone()).collect(),
            accuracies: self.subjects.iter().map(|s| s.accuracy).collect(),
        }
    }
}

/// Scores one subject's predictions.
pub fn score_subject(subject: &str, preds: &[usize], labels: &[usize], n_classes: usize) -> Result<SubjectResult> {
    Ok(SubjectResult {
        subject: String::from(subject),
        accuracy: 100.0 * accuracy(preds, labels)?,
        f1: macro_f1(preds, labels, n_classes)?,
        n_windows: preds.len(),
    })
}

pub const REPORT_SCHEMA: &str = "fbssvep-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub methods: Vec<MethodReport>,
    pub p_values: Option<PValueMatrix>,
}

impl EvalReport {
    /// Builds the report and, when every method shares the subject list and
    /// there are at least two methods, the p-value matrix.
    pub fn new(methods: Vec<MethodReport>) -> Result<Self> {
        for m in &methods {
            if m.subjects.iter().any(|s| !(0.0..=100.0).contains(&s.accuracy) || !(0.0..=1.0).contains(&s.f1)) {
                bail!(Parameter, "method {} has scores out of range", m.method);
            }
        }
        let p_values = if methods.len() >= 2 {
            Some(compare_methods(&methods.iter().map(MethodReport::scores).collect::<Vec<_>>())?)
        } else {
            None
        };
        Ok(EvalReport { schema: String::from(REPORT_SCHEMA), methods, p_values })
    }
}
