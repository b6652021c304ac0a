//! Metrics and reports: accuracy, rank-based ROC AUC, the Mann–Whitney U
//! test (exact for small samples, tie-corrected normal approximation
//! otherwise), and the evaluation-report structures the harnesses fill in.

use statrs::function::erf::erfc;

use crate::aggregator::ParamCount;
use crate::tensor::{Result, TensorError};

/// Exact-match fraction.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(TensorError::Invalid {
            op: "accuracy",
            msg: format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("non-finite score"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of 1-based ranks i+1..=j+1
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the rank identity: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(TensorError::Invalid {
            op: "roc_auc",
            msg: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TensorError::Invalid {
            op: "roc_auc",
            msg: "AUC undefined: only one class present".into(),
        });
    }
    let ranks = average_ranks(scores);
    let rank_sum_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Result of a two-sided Mann–Whitney U test.
#[derive(Debug, Clone, Copy)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Whether the exact permutation distribution was used.
    pub exact: bool,
}

/// Product threshold below which the exact permutation distribution is
/// enumerated instead of the normal approximation.
pub const EXACT_LIMIT: usize = 400;

/// Two-sided Mann–Whitney U test between two samples.
///
/// Exact mode (n_a·n_b ≤ 400) counts, over all ways to assign the observed
/// (tied) ranks to the first sample, how many assignments are at least as
/// far from the null mean as the observed U. Larger samples use the normal
/// approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(TensorError::Invalid { op: "mann_whitney_u", msg: "empty sample".into() });
    }
    let (na, nb) = (a.len(), b.len());
    let mut all: Vec<f64> = Vec::with_capacity(na + nb);
    all.extend_from_slice(a);
    all.extend_from_slice(b);
    let ranks = average_ranks(&all);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let mu = (na * nb) as f64 / 2.0;

    if na * nb <= EXACT_LIMIT {
        // Doubling average ranks makes every rank an integer, ties included.
        let doubled: Vec<usize> = ranks.iter().map(|&r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        // counts[j][s] = number of j-subsets of the doubled ranks summing to s
        let mut counts = vec![vec![0.0f64; total + 1]; na + 1];
        counts[0][0] = 1.0;
        for &r in &doubled {
            for j in (0..na).rev() {
                for s in 0..=total.saturating_sub(r) {
                    if counts[j][s] > 0.0 {
                        counts[j + 1][s + r] += counts[j][s];
                    }
                }
            }
        }
        // doubled deviation |2U − 2μ| = |R2 − na(na+1) − na·nb|
        let dev_obs = (2.0 * u - 2.0 * mu).abs().round() as i64;
        let offset = (na * (na + 1) + na * nb) as i64;
        let mut extreme = 0.0f64;
        let mut grand = 0.0f64;
        for (s, &c) in counts[na].iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            grand += c;
            let dev = (s as i64 - offset).abs();
            if dev >= dev_obs {
                extreme += c;
            }
        }
        return Ok(MannWhitney { u, p: extreme / grand, exact: true });
    }

    // Normal approximation with tie-corrected variance.
    let n = na + nb;
    let mut tie_term = 0.0f64;
    let mut sorted = all.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = (na * nb) as f64 / 12.0 * ((n + 1) as f64 - tie_term / (n as f64 * (n as f64 - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u, p: 1.0, exact: false });
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(MannWhitney { u, p, exact: false })
}

/// Significance block comparing two models' per-fold scores.
#[derive(Debug, Clone)]
pub struct Significance {
    pub u: f64,
    pub p: f64,
    pub exact: bool,
    /// What the compared samples are (documented unit of comparison).
    pub unit: String,
}

/// Metrics of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldScore {
    pub fold: usize,
    pub acc: f64,
    pub auc: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// λ-grid ablation row.
#[derive(Debug, Clone)]
pub struct LambdaRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub acc: f64,
    pub auc: f64,
}

/// Projection-width / variant ablation row.
#[derive(Debug, Clone)]
pub struct WidthRow {
    pub name: String,
    pub params: usize,
    pub acc: f64,
    pub auc: f64,
}

/// Fixed-length (Δt) sweep row; `delta_t == None` is the variable-length
/// model on the unfiltered cohort.
#[derive(Debug, Clone)]
pub struct DeltaRow {
    pub delta_t: Option<usize>,
    pub kept: usize,
    pub dropped: usize,
    pub acc: f64,
    pub auc: f64,
}

/// Full evaluation report: per-fold metrics, parameter counts, optional
/// significance test, optional ablation tables.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub folds: Vec<FoldScore>,
    pub mean_acc: f64,
    pub mean_auc: f64,
    pub param_count: Option<ParamCount>,
    pub significance: Option<Significance>,
    pub lambda_table: Vec<LambdaRow>,
    pub width_table: Vec<WidthRow>,
    pub delta_table: Vec<DeltaRow>,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldScore>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_acc = folds.iter().map(|f| f.acc).sum::<f64>() / n;
        let mean_auc = folds.iter().map(|f| f.auc).sum::<f64>() / n;
        Self { folds, mean_acc, mean_auc, ..Default::default() }
    }

    /// Deterministic plain-text rendering (key-value lines + aligned
    /// tab-separated tables). Contains no timestamps or machine state.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.folds.is_empty() {
            out.push_str("fold\tacc\tauc\tn_train\tn_val\tn_test\n");
            for f in &self.folds {
                out.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
                    f.fold, f.acc, f.auc, f.n_train, f.n_val, f.n_test
                ));
            }
            out.push_str(&format!("mean\t{:.6}\t{:.6}\t-\t-\t-\n", self.mean_acc, self.mean_auc));
        }
        if let Some(pc) = &self.param_count {
            out.push_str("\nparameters\n");
            for (name, n) in &pc.components {
                out.push_str(&format!("  {name}\t{n}\n"));
            }
            out.push_str(&format!("  total\t{}\n", pc.total));
        }
        if let Some(sig) = &self.significance {
            out.push_str(&format!(
                "\nsignificance ({}): U={:.4} p={:.6} mode={}\n",
                sig.unit,
                sig.u,
                sig.p,
                if sig.exact { "exact" } else { "normal" }
            ));
        }
        if !self.lambda_table.is_empty() {
            out.push_str("\nlambda_grid\nlambda1\tlambda2\tacc\tauc\n");
            for r in &self.lambda_table {
                out.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\n", r.lambda1, r.lambda2, r.acc, r.auc));
            }
        }
        if !self.width_table.is_empty() {
            out.push_str("\nwidth_grid\nvariant\tparams\tacc\tauc\n");
            for r in &self.width_table {
                out.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\n", r.name, r.params, r.acc, r.auc));
            }
        }
        if !self.delta_table.is_empty() {
            out.push_str("\ndelta_t_sweep\ndelta_t\tkept\tdropped\tacc\tauc\n");
            for r in &self.delta_table {
                let dt = r.delta_t.map(|d| d.to_string()).unwrap_or_else(|| "variable".into());
                out.push_str(&format!("{}\t{}\t{}\t{:.6}\t{:.6}\n", dt, r.kept, r.dropped, r.acc, r.auc));
            }
        }
        out
    }
}
