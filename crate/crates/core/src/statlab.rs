//! Logistic regression, ROC/PR analysis, paired model comparisons and the
//! univariate test battery used for cohort description.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};
use statrs::function::factorial::ln_factorial;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("separation detected: term {term} diverges")]
    Separation { term: String },
    #[error("rank deficient design: {term} is collinear with earlier terms")]
    RankDeficient { term: String },
    #[error("logistic fit did not converge in {0} iterations")]
    NotConverged(usize),
    #[error("empty margin in contingency table")]
    EmptyMargin,
    #[error("sample size {n} outside supported range {lo}..={hi}")]
    SampleSize { n: usize, lo: usize, hi: usize },
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("invalid input: {0}")]
    Invalid(String),
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided(z: f64) -> f64 {
    (2.0 * std_normal().sf(z.abs())).min(1.0)
}

fn chi2_sf_1df(x: f64) -> f64 {
    ChiSquared::new(1.0).expect("chi2").sf(x).clamp(0.0, 1.0)
}

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), StatError> {
    if scores.len() != labels.len() {
        return Err(StatError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(StatError::NonFinite);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(StatError::Invalid(format!("label {bad} is not 0/1")));
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(StatError::SingleClass);
    }
    Ok((n1, n0))
}

// ---------------------------------------------------------------------------
// Logistic regression

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_loglik_tol: f64,
    /// Largest admissible |coefficient x sd(term)| before separation is declared.
    pub separation_bound: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-8,
            rel_loglik_tol: 1e-10,
            separation_bound: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TermEstimate {
    pub term: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_wald: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegressionResult {
    /// Intercept first, then the requested terms in order.
    pub terms: Vec<TermEstimate>,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
    pub n: usize,
}

impl RegressionResult {
    pub fn term(&self, name: &str) -> Option<&TermEstimate> {
        self.terms.iter().find(|t| t.term == name)
    }
}

pub const INTERCEPT: &str = "(Intercept)";

fn loglik(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &t)| {
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            t * e - softplus
        })
        .sum()
}

fn score_and_info(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eta = x * beta;
    let p = eta.map(crate::boost::sigmoid);
    let resid = y - &p;
    let w = p.map(|v| v * (1.0 - v));
    let score = x.transpose() * resid;
    let mut xw = x.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    (score, x.transpose() * xw)
}

/// Modified Gram-Schmidt over the design columns; reports the first column
/// that is (numerically) a combination of the earlier ones.
fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<(), StatError> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            return Err(StatError::RankDeficient { term: name.clone() });
        }
        basis.push(v / norm);
    }
    Ok(())
}

/// Maximum-likelihood logistic regression by Newton-Raphson with step
/// halving. `columns[j]` holds the values of `terms[j]`; an intercept is
/// always added.
pub fn logistic_fit<S: AsRef<str>>(
    columns: &[Vec<f64>],
    y: &[u8],
    terms: &[S],
    cfg: &LogisticConfig,
) -> Result<RegressionResult, StatError> {
    if columns.len() != terms.len() {
        return Err(StatError::LengthMismatch(columns.len(), terms.len()));
    }
    let n = y.len();
    for c in columns {
        if c.len() != n {
            return Err(StatError::LengthMismatch(c.len(), n));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(StatError::NonFinite);
        }
    }
    check_labels(&vec![0.0; n], y)?;
    let k = columns.len() + 1;
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(terms.iter().map(|t| t.as_ref().to_string()));
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    check_rank(&x, &names)?;
    let yv = DVector::from_iterator(n, y.iter().map(|&v| v as f64));
    let sds: Vec<f64> = (0..k)
        .map(|j| {
            if j == 0 {
                return 1.0;
            }
            let c = &columns[j - 1];
            let m = c.iter().sum::<f64>() / n as f64;
            (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .collect();

    let mut beta = DVector::zeros(k);
    let mean = yv.mean();
    beta[0] = (mean / (1.0 - mean)).ln();
    let mut ll = loglik(&x, &yv, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let (mut score, mut info) = score_and_info(&x, &yv, &beta);
    while iterations < cfg.max_iter {
        if score.amax() < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(step) = info.clone().cholesky().map(|c| c.solve(&score)) else {
            break;
        };
        let mut t = 1.0;
        let mut next = &beta + &step;
        let mut ll_next = loglik(&x, &yv, &next);
        let mut halvings = 0;
        while !(ll_next >= ll) && halvings < 40 {
            t *= 0.5;
            next = &beta + &step * t;
            ll_next = loglik(&x, &yv, &next);
            halvings += 1;
        }
        let rel = (ll_next - ll).abs() / ll.abs().max(1e-300);
        beta = next;
        ll = ll_next;
        (score, info) = score_and_info(&x, &yv, &beta);
        if score.amax() < cfg.grad_tol {
            converged = true;
            break;
        }
        if rel < cfg.rel_loglik_tol {
            // the likelihood is flat to rounding here, so polish with plain
            // Newton steps judged by the gradient instead
            for _ in 0..5 {
                let Some(step) = info.clone().cholesky().map(|c| c.solve(&score)) else {
                    break;
                };
                let next = &beta + &step;
                let (s_next, i_next) = score_and_info(&x, &yv, &next);
                if !(s_next.amax() < score.amax()) {
                    break;
                }
                ll = loglik(&x, &yv, &next);
                beta = next;
                (score, info) = (s_next, i_next);
                if score.amax() < cfg.grad_tol {
                    break;
                }
            }
            converged = true;
            break;
        }
    }

    for j in 0..k {
        let standardized = if j == 0 { beta[0].abs() } else { (beta[j] * sds[j]).abs() };
        if standardized > cfg.separation_bound || !beta[j].is_finite() {
            return Err(StatError::Separation { term: names[j].clone() });
        }
    }
    if !converged {
        return Err(StatError::NotConverged(iterations));
    }
    let cov = info
        .clone()
        .try_inverse()
        .ok_or_else(|| StatError::Separation { term: names[0].clone() })?;
    let z975 = 1.959963984540054;
    let terms = (0..k)
        .map(|j| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let b = beta[j];
            TermEstimate {
                term: names[j].clone(),
                coefficient: b,
                std_error: se,
                odds_ratio: b.exp(),
                ci_low: (b - z975 * se).exp(),
                ci_high: (b + z975 * se).exp(),
                p_wald: if se > 0.0 { normal_two_sided(b / se) } else { 1.0 },
            }
        })
        .collect();
    Ok(RegressionResult {
        terms,
        iterations,
        converged,
        log_likelihood: ll,
        n,
    })
}

/// Gradient of the log-likelihood at the given coefficients (intercept first).
pub fn logistic_score(columns: &[Vec<f64>], y: &[u8], beta: &[f64]) -> Vec<f64> {
    let n = y.len();
    let k = columns.len() + 1;
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    let yv = DVector::from_iterator(n, y.iter().map(|&v| v as f64));
    score_and_info(&x, &yv, &DVector::from_column_slice(beta)).0.iter().copied().collect()
}

pub fn write_regression_csv<W: Write>(out: W, r: &RegressionResult) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["term", "OR", "ciLow", "ciHigh", "p", "coefficient", "stdError"])?;
    for t in &r.terms {
        w.write_record([
            t.term.clone(),
            format!("{:?}", t.odds_ratio),
            format!("{:?}", t.ci_low),
            format!("{:?}", t.ci_high),
            format!("{:?}", t.p_wald),
            format!("{:?}", t.coefficient),
            format!("{:?}", t.std_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ROC / PR

/// Score-sorted blocks of tied scores, highest first: (score, positives, negatives).
fn tie_blocks(scores: &[f64], labels: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(f64, u64, u64)> = Vec::new();
    for i in idx {
        let s = scores[i];
        match blocks.last_mut() {
            Some(b) if b.0 == s => {
                if labels[i] == 1 {
                    b.1 += 1
                } else {
                    b.2 += 1
                }
            }
            _ => blocks.push((s, (labels[i] == 1) as u64, (labels[i] == 0) as u64)),
        }
    }
    blocks
}

/// Twice the number of concordant pairs plus tied pairs, and n1 * n0.
fn auc_counts(scores: &[f64], labels: &[u8]) -> (u128, u128) {
    let mut neg_below: u64 = labels.iter().filter(|&&l| l == 0).count() as u64;
    let mut num: u128 = 0;
    let mut n1: u128 = 0;
    for (_, pos, neg) in tie_blocks(scores, labels) {
        neg_below -= neg;
        num += 2 * pos as u128 * neg_below as u128 + pos as u128 * neg as u128;
        n1 += pos as u128;
    }
    let n0 = labels.len() as u128 - n1;
    (num, n1 * n0)
}

/// Area under the ROC curve: (#concordant + 1/2 #tied) / (n1 n0).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, StatError> {
    check_labels(scores, labels)?;
    let (num, pairs) = auc_counts(scores, labels);
    Ok(num as f64 / (2 * pairs) as f64)
}

/// Average precision with tied scores treated as one atomic block.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, StatError> {
    let (n1, _) = check_labels(scores, labels)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (_, pos, neg) in tie_blocks(scores, labels) {
        tp += pos;
        fp += neg;
        if pos > 0 {
            ap += (pos as f64 / n1 as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    /// Scores at or above this value are called positive.
    pub threshold: f64,
}

/// ROC points (fpr, tpr) from (0,0) to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>, StatError> {
    let (n1, n0) = check_labels(scores, labels)?;
    let mut pts = vec![CurvePoint {
        x: 0.0,
        y: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (s, pos, neg) in tie_blocks(scores, labels) {
        tp += pos;
        fp += neg;
        pts.push(CurvePoint {
            x: fp as f64 / n0 as f64,
            y: tp as f64 / n1 as f64,
            threshold: s,
        });
    }
    Ok(pts)
}

/// Precision-recall points (recall, precision), one per distinct score.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>, StatError> {
    let (n1, _) = check_labels(scores, labels)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    Ok(tie_blocks(scores, labels)
        .into_iter()
        .map(|(s, pos, neg)| {
            tp += pos;
            fp += neg;
            CurvePoint {
                x: tp as f64 / n1 as f64,
                y: tp as f64 / (tp + fp) as f64,
                threshold: s,
            }
        })
        .collect())
}

pub fn write_curve_csv<W: Write>(out: W, x_name: &str, y_name: &str, pts: &[CurvePoint]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([x_name, y_name, "threshold"])?;
    for p in pts {
        w.write_record([format!("{:?}", p.x), format!("{:?}", p.y), format!("{:?}", p.threshold)])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Paired comparisons

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PairedAucTest {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
}

/// Placement numerators, doubled to stay integral: for each positive,
/// 2 * #negatives scored lower + #negatives tied; for each negative,
/// 2 * #positives scored higher + #positives tied.
fn placements(scores: &[f64], labels: &[u8]) -> (Vec<u64>, Vec<u64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    let mut neg_sorted = neg.clone();
    neg_sorted.sort_by(f64::total_cmp);
    let mut pos_sorted = pos.clone();
    pos_sorted.sort_by(f64::total_cmp);
    let below = |v: &[f64], s: f64| v.partition_point(|&x| x < s) as u64;
    let at_or_below = |v: &[f64], s: f64| v.partition_point(|&x| x <= s) as u64;
    let v10 = pos
        .iter()
        .map(|&s| {
            let lt = below(&neg_sorted, s);
            let le = at_or_below(&neg_sorted, s);
            2 * lt + (le - lt)
        })
        .collect();
    let n1 = pos_sorted.len() as u64;
    let v01 = neg
        .iter()
        .map(|&s| {
            let le = at_or_below(&pos_sorted, s);
            let lt = below(&pos_sorted, s);
            2 * (n1 - le) + (le - lt)
        })
        .collect();
    (v10, v01)
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.len() < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// DeLong test for two correlated AUROCs on the same patients.
pub fn delong_test(a: &[f64], b: &[f64], labels: &[u8]) -> Result<PairedAucTest, StatError> {
    let (n1, n0) = check_labels(a, labels)?;
    check_labels(b, labels)?;
    let (a10, a01) = placements(a, labels);
    let (b10, b01) = placements(b, labels);
    let pairs = 2 * (n1 as u128) * (n0 as u128);
    let auc_a = a10.iter().map(|&v| v as u128).sum::<u128>() as f64 / pairs as f64;
    let auc_b = b10.iter().map(|&v| v as u128).sum::<u128>() as f64 / pairs as f64;
    let scale = |v: &[u64], d: usize| -> Vec<f64> { v.iter().map(|&x| x as f64 / (2 * d) as f64).collect() };
    let (a10, b10) = (scale(&a10, n0), scale(&b10, n0));
    let (a01, b01) = (scale(&a01, n1), scale(&b01, n1));
    let var10 = sample_cov(&a10, &a10) + sample_cov(&b10, &b10) - 2.0 * sample_cov(&a10, &b10);
    let var01 = sample_cov(&a01, &a01) + sample_cov(&b01, &b01) - 2.0 * sample_cov(&a01, &b01);
    let var = var10 / n1 as f64 + var01 / n0 as f64;
    let diff = auc_a - auc_b;
    if !(var > 1e-300) {
        if diff == 0.0 {
            return Ok(PairedAucTest {
                auc_a,
                auc_b,
                z: 0.0,
                p: 1.0,
            });
        }
        return Err(StatError::DegenerateVariance);
    }
    let z = diff / var.sqrt();
    Ok(PairedAucTest {
        auc_a,
        auc_b,
        z,
        p: normal_two_sided(z),
    })
}

/// Paired bootstrap test for a difference in AUPRC. Replicates with a single
/// class are redrawn.
pub fn bootstrap_auprc_test(
    a: &[f64],
    b: &[f64],
    labels: &[u8],
    replicates: usize,
    seed: u64,
) -> Result<PairedAucTest, StatError> {
    check_labels(a, labels)?;
    check_labels(b, labels)?;
    let auc_a = auprc(a, labels)?;
    let auc_b = auprc(b, labels)?;
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs = Vec::with_capacity(replicates);
    let (mut ra, mut rb, mut rl) = (vec![0.0; n], vec![0.0; n], vec![0u8; n]);
    while diffs.len() < replicates {
        for k in 0..n {
            let i = rng.random_range(0..n);
            ra[k] = a[i];
            rb[k] = b[i];
            rl[k] = labels[i];
        }
        let pos = rl.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        diffs.push(auprc(&ra, &rl)? - auprc(&rb, &rl)?);
    }
    let m = diffs.iter().sum::<f64>() / replicates as f64;
    let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (replicates as f64 - 1.0).max(1.0)).sqrt();
    let diff = auc_a - auc_b;
    if !(sd > 0.0) {
        if diff == 0.0 {
            return Ok(PairedAucTest {
                auc_a,
                auc_b,
                z: 0.0,
                p: 1.0,
            });
        }
        return Err(StatError::DegenerateVariance);
    }
    let z = diff / sd;
    Ok(PairedAucTest {
        auc_a,
        auc_b,
        z,
        p: normal_two_sided(z),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p: f64,
}

/// McNemar test on the discordant counts b and c.
pub fn mcnemar(b: u64, c: u64, corrected: bool) -> TestResult {
    if b + c == 0 {
        return TestResult { statistic: 0.0, p: 1.0 };
    }
    let d = (b as f64 - c as f64).abs();
    let num = if corrected { (d - 1.0).max(0.0) } else { d };
    let chi2 = num * num / (b + c) as f64;
    TestResult {
        statistic: chi2,
        p: chi2_sf_1df(chi2),
    }
}

/// Discordant counts (b = only A correct, c = only B correct) at a threshold.
pub fn discordant_counts(pa: &[f64], pb: &[f64], labels: &[u8], threshold: f64) -> (u64, u64) {
    let (mut b, mut c) = (0, 0);
    for ((&x, &y), &l) in pa.iter().zip(pb).zip(labels) {
        let ok_a = ((x >= threshold) as u8) == l;
        let ok_b = ((y >= threshold) as u8) == l;
        match (ok_a, ok_b) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    (b, c)
}

// ---------------------------------------------------------------------------
// Univariate tests

fn table_margins(t: [[u64; 2]; 2]) -> Result<([f64; 2], [f64; 2], f64), StatError> {
    let rows = [(t[0][0] + t[0][1]) as f64, (t[1][0] + t[1][1]) as f64];
    let cols = [(t[0][0] + t[1][0]) as f64, (t[0][1] + t[1][1]) as f64];
    if rows.contains(&0.0) || cols.contains(&0.0) {
        return Err(StatError::EmptyMargin);
    }
    Ok((rows, cols, rows[0] + rows[1]))
}

/// Pearson chi-square on a 2x2 table, optionally with Yates' correction.
pub fn chi2_2x2(t: [[u64; 2]; 2], yates: bool) -> Result<TestResult, StatError> {
    let (rows, cols, n) = table_margins(t)?;
    let mut chi2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            let mut d = (t[i][j] as f64 - e).abs();
            if yates {
                d = (d - 0.5).max(0.0);
            }
            chi2 += d * d / e;
        }
    }
    Ok(TestResult {
        statistic: chi2,
        p: chi2_sf_1df(chi2),
    })
}

/// Fisher's exact test, two-sided: sum of table probabilities not exceeding
/// the observed one.
pub fn fisher_exact(t: [[u64; 2]; 2]) -> Result<f64, StatError> {
    table_margins(t)?;
    let r1 = t[0][0] + t[0][1];
    let r2 = t[1][0] + t[1][1];
    let c1 = t[0][0] + t[1][0];
    let n = r1 + r2;
    let lf = |k: u64| ln_factorial(k);
    let base = lf(r1) + lf(r2) + lf(c1) + lf(n - c1) - lf(n);
    let logp = |a: u64| base - lf(a) - lf(r1 - a) - lf(c1 - a) - lf(r2 + a - c1);
    let observed = logp(t[0][0]);
    let lo = (r1 + c1).saturating_sub(n);
    let hi = r1.min(c1);
    let cutoff = observed + 1e-7f64.ln_1p();
    let p: f64 = (lo..=hi).map(logp).filter(|&l| l <= cutoff).map(f64::exp).sum();
    Ok(p.min(1.0))
}

/// Mann-Whitney U for sample `a`, normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult, StatError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatError::Invalid("empty sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatError::NonFinite);
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum_a += avg_rank * all[i..j].iter().filter(|e| e.1).count() as f64;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let nn = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if !(var > 0.0) {
        return Ok(TestResult { statistic: u, p: 1.0 });
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(TestResult {
        statistic: u,
        p: normal_two_sided(z),
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sample t-test; `pooled` selects Student's equal-variance form,
/// otherwise Welch.
pub fn t_test(a: &[f64], b: &[f64], pooled: bool) -> Result<TestResult, StatError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatError::Invalid("t-test needs at least 2 values per group".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatError::NonFinite);
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, v1) = mean_var(a);
    let (m2, v2) = mean_var(b);
    let (se2, df) = if pooled {
        let sp = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0);
        (sp * (1.0 / n1 + 1.0 / n2), n1 + n2 - 2.0)
    } else {
        let (q1, q2) = (v1 / n1, v2 / n2);
        let s = q1 + q2;
        (s, s * s / (q1 * q1 / (n1 - 1.0) + q2 * q2 / (n2 - 1.0)))
    };
    let diff = m1 - m2;
    if !(se2 > 0.0) {
        if diff == 0.0 {
            return Ok(TestResult { statistic: 0.0, p: 1.0 });
        }
        return Err(StatError::DegenerateVariance);
    }
    let t = diff / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| StatError::Invalid(e.to_string()))?;
    Ok(TestResult {
        statistic: t,
        p: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Shapiro-Wilk W and p-value using Royston's approximation (n in 3..=5000).
pub fn shapiro_wilk(x: &[f64]) -> Result<TestResult, StatError> {
    let n = x.len();
    if !(3..=5000).contains(&n) {
        return Err(StatError::SampleSize { n, lo: 3, hi: 5000 });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatError::NonFinite);
    }
    let mut xs = x.to_vec();
    xs.sort_by(f64::total_cmp);
    let range = xs[n - 1] - xs[0];
    if range < 1e-19 {
        return Err(StatError::DegenerateVariance);
    }
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let half = n / 2;
    let an = n as f64;
    // a[i] for the i-th smallest order statistic of the upper half, positive
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let norm = std_normal();
        let m: Vec<f64> = (1..=half)
            .map(|i| norm.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first_free, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first_free..half {
            a[i] = -m[i] / fac;
        }
    }
    let mut coef = vec![0.0; n];
    for i in 0..half {
        coef[i] = -a[i];
        coef[n - 1 - i] = a[i];
    }
    // W as the squared correlation between coefficients and order statistics
    let xm = xs.iter().sum::<f64>() / an;
    let cm = coef.iter().sum::<f64>() / an;
    let (mut sxx, mut scc, mut sxc) = (0.0, 0.0, 0.0);
    for (xi, ci) in xs.iter().zip(&coef) {
        let dx = (xi - xm) / range;
        let dc = ci - cm;
        sxx += dx * dx;
        scc += dc * dc;
        sxc += dx * dc;
    }
    let root = (scc * sxx).sqrt();
    let w1 = (root - sxc) * (root + sxc) / (scc * sxx);
    let w = 1.0 - w1;

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        (pi6 * (w.sqrt().asin() - stqr)).max(0.0)
    } else {
        let y = w1.ln();
        let (y, m, s) = if n <= 11 {
            let gamma = poly(&G, an);
            if y >= gamma {
                return Ok(TestResult { statistic: w, p: 0.0 });
            }
            (-(gamma - y).ln(), poly(&C3, an), poly(&C4, an).exp())
        } else {
            let lx = an.ln();
            (y, poly(&C5, lx), poly(&C6, lx).exp())
        };
        std_normal().sf((y - m) / s)
    };
    Ok(TestResult {
        statistic: w,
        p: p.clamp(0.0, 1.0),
    })
}

// ---------------------------------------------------------------------------
// Threshold metrics

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClassificationMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    /// False when nothing was predicted positive and precision was set to 0.
    pub precision_defined: bool,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn metrics_from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ClassificationMetrics {
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        0.0
    };
    ClassificationMetrics {
        tp,
        fp,
        fn_,
        tn,
        precision,
        precision_defined: tp + fp > 0,
        sensitivity,
        specificity: ratio(tn, tn + fp),
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
        f1,
    }
}

/// Confusion-matrix metrics calling `proba >= threshold` positive.
pub fn classification_metrics(proba: &[f64], labels: &[u8], threshold: f64) -> Result<ClassificationMetrics, StatError> {
    if proba.len() != labels.len() {
        return Err(StatError::LengthMismatch(proba.len(), labels.len()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in proba.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(metrics_from_counts(tp, fp, fn_, tn))
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub name: String,
    pub statistic: f64,
    pub p: f64,
    pub config: BTreeMap<String, serde_json::Value>,
}

impl TestRecord {
    pub fn new(name: impl Into<String>, r: TestResult) -> Self {
        Self {
            name: name.into(),
            statistic: r.statistic,
            p: r.p,
            config: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.config.insert(key.to_string(), value.into());
        self
    }
}
