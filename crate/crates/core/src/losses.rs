//! Training objectives and their gradients with respect to the posteriors.
//!
//! Every term is a per-batch mean. Threshold gates are constants: no gradient
//! flows through the indicator.

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, dot, norm, Matrix};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Pairwise BCE weight.
    pub alpha: f64,
    /// Entropy regularizer weight.
    pub beta: f64,
    /// Supervised CE weight.
    pub gamma: f64,
    /// Pseudo-label CE weight.
    pub delta: f64,
    /// Pseudo-label confidence gate.
    pub tau1: f64,
    /// Pair confidence gate.
    pub tau2: f64,
    /// Probabilities are clamped to this floor inside logarithms.
    pub prob_floor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1.0,
            delta: 1.0,
            tau1: 0.6,
            tau2: 0.8,
            prob_floor: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {w}")));
            }
        }
        // a gate above 1 never opens, which is allowed
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative, got {t}")));
            }
        }
        if !(self.prob_floor > 0.0 && self.prob_floor <= 1e-3) {
            return Err(Error::Config(format!(
                "prob_floor must lie in (0, 1e-3], got {}",
                self.prob_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyMode {
    /// Mean of per-row `Σ p log p`.
    #[default]
    PerSample,
    /// `Σ p̄ log p̄` of the batch-mean posterior.
    BatchMarginal,
}

impl std::str::FromStr for EntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(Self::PerSample),
            "batch_marginal" => Ok(Self::BatchMarginal),
            _ => Err(Error::Config(format!("unknown entropy mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerSample => "per_sample",
            Self::BatchMarginal => "batch_marginal",
        })
    }
}

/// A scalar loss and its gradient with respect to the rows it was computed on.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Matrix,
    pub selected: usize,
}

impl LossTerm {
    fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
            selected: 0,
        }
    }
}

fn clamped_log(p: f64, floor: f64) -> (f64, f64) {
    // (log max(p, floor), d/dp)
    if p > floor {
        (p.ln(), 1.0 / p)
    } else {
        (floor.ln(), 0.0)
    }
}

/// `-(1/M) Σ log P[i, y_i]` over the labeled rows.
pub fn supervised_ce(probs: &Matrix, labels: &[usize], prob_floor: f64) -> Result<LossTerm> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    let mut term = LossTerm::zero(probs.rows(), probs.cols());
    if labels.is_empty() {
        log::debug!("supervised CE on an empty labeled batch");
        return Ok(term);
    }
    let m = labels.len() as f64;
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        let (l, dl) = clamped_log(probs[(i, y)], prob_floor);
        sum += l;
        term.grad[(i, y)] = -dl / m;
    }
    term.value = -sum / m;
    term.selected = labels.len();
    Ok(term)
}

/// Cross-view pseudo-label CE: rows of `probs` (first view) are pushed toward
/// `targets` (second-view argmax) whenever the second-view confidence exceeds
/// `tau1`. Normalized by the number of unlabeled rows, selected or not.
pub fn pseudo_ce(probs: &Matrix, targets: &[usize], confidences: &[f64], tau1: f64, prob_floor: f64) -> Result<LossTerm> {
    if targets.len() != probs.rows() || confidences.len() != probs.rows() {
        return Err(Error::Shape("pseudo-label views are not row-aligned".into()));
    }
    let mut term = LossTerm::zero(probs.rows(), probs.cols());
    if probs.rows() == 0 {
        return Ok(term);
    }
    let u = probs.rows() as f64;
    let mut sum = 0.0;
    for (i, (&t, &c)) in targets.iter().zip(confidences).enumerate() {
        if c > tau1 {
            let (l, dl) = clamped_log(probs[(i, t)], prob_floor);
            sum += l;
            term.grad[(i, t)] = -dl / u;
            term.selected += 1;
        }
    }
    if term.selected == 0 {
        log::debug!("no pseudo-labels above tau1 = {tau1}");
    }
    term.value = -sum / u;
    Ok(term)
}

#[derive(Debug, Clone)]
pub struct PairTerm {
    pub value: f64,
    pub grad: Matrix,
    /// Gradient through the cosine targets, when requested.
    pub grad_z: Option<Matrix>,
    pub selected: usize,
}

struct PairRow {
    value: f64,
    count: usize,
    // coefficient of P_j in dP_i, for every j
    coeff: Vec<f64>,
    // coefficient of d cos(z_i, z_j) / d z_i
    target_coeff: Vec<f64>,
}

fn pair_target(i: usize, j: usize, z: &Matrix, labels: &[Option<usize>]) -> (f64, bool) {
    match (labels[i], labels[j]) {
        (Some(a), Some(b)) => ((a == b) as u8 as f64, false),
        _ => match cosine_similarity(z.row(i), z.row(j)) {
            Ok(c) => (c.clamp(0.0, 1.0), c > 0.0 && c < 1.0),
            Err(_) => (0.0, false),
        },
    }
}

/// Pairwise BCE between posterior inner products and similarity targets.
///
/// Pairs `i < j` with `min(p̂_i, p̂_j) > tau2` are scored. Both-labeled pairs
/// use label equality as target, every other pair the cosine of the
/// embeddings clamped to `[0, 1]`.
pub fn pairwise_bce(
    probs: &Matrix,
    z: &Matrix,
    labels: &[Option<usize>],
    confidences: &[f64],
    tau2: f64,
    prob_floor: f64,
    with_z_grad: bool,
) -> Result<PairTerm> {
    let b = probs.rows();
    if z.rows() != b || labels.len() != b || confidences.len() != b {
        return Err(Error::Shape("pairwise inputs are not row-aligned".into()));
    }
    let hi = 1.0 - prob_floor;
    let rows: Vec<PairRow> = parallel::map_indices(b, |i| {
        let mut row = PairRow {
            value: 0.0,
            count: 0,
            coeff: vec![0.0; b],
            target_coeff: vec![0.0; b],
        };
        if confidences[i] <= tau2 {
            return row;
        }
        for j in 0..b {
            if j == i || confidences[j] <= tau2 {
                continue;
            }
            let (s, cos_live) = pair_target(i, j, z, labels);
            let raw = dot(probs.row(i), probs.row(j));
            let q = raw.clamp(prob_floor, hi);
            let inside = raw > prob_floor && raw < hi;
            if j > i {
                row.value -= s * q.ln() + (1.0 - s) * (1.0 - q).ln();
                row.count += 1;
            }
            if inside {
                row.coeff[j] = -s / q + (1.0 - s) / (1.0 - q);
            }
            if with_z_grad && cos_live {
                row.target_coeff[j] = -q.ln() + (1.0 - q).ln();
            }
        }
        row
    });

    let pairs: usize = rows.iter().map(|r| r.count).sum();
    let mut term = PairTerm {
        value: 0.0,
        grad: Matrix::zeros(b, probs.cols()),
        grad_z: with_z_grad.then(|| Matrix::zeros(b, z.cols())),
        selected: pairs,
    };
    if pairs == 0 {
        log::debug!("no pairs above tau2 = {tau2}");
        return Ok(term);
    }
    let n = pairs as f64;
    term.value = rows.iter().map(|r| r.value).sum::<f64>() / n;

    let k = probs.cols();
    parallel::for_each_row(term.grad.data_mut(), k, |i, out| {
        for (j, &c) in rows[i].coeff.iter().enumerate() {
            if c != 0.0 {
                for (o, &pj) in out.iter_mut().zip(probs.row(j)) {
                    *o += c * pj / n;
                }
            }
        }
    });
    if let Some(gz) = term.grad_z.as_mut() {
        let d = z.cols();
        parallel::for_each_row(gz.data_mut(), d, |i, out| {
            let zi = z.row(i);
            let ni = norm(zi);
            for (j, &c) in rows[i].target_coeff.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let zj = z.row(j);
                let nj = norm(zj);
                let cos = dot(zi, zj) / (ni * nj);
                for ((o, &a), &bv) in out.iter_mut().zip(zi).zip(zj) {
                    *o += c * (bv / (ni * nj) - cos * a / (ni * ni)) / n;
                }
            }
        });
    }
    Ok(term)
}

/// Negative entropy, minimized by flat posteriors.
pub fn entropy_reg(probs: &Matrix, prob_floor: f64, mode: EntropyMode) -> LossTerm {
    let (b, k) = probs.shape();
    let mut term = LossTerm::zero(b, k);
    if b == 0 {
        return term;
    }
    let bf = b as f64;
    match mode {
        EntropyMode::PerSample => {
            let mut sum = 0.0;
            for i in 0..b {
                for j in 0..k {
                    let p = probs[(i, j)];
                    let (l, _) = clamped_log(p, prob_floor);
                    sum += p * l;
                    let g = if p > prob_floor { l + 1.0 } else { l };
                    term.grad[(i, j)] = g / bf;
                }
            }
            term.value = sum / bf;
        }
        EntropyMode::BatchMarginal => {
            let mean = probs.column_mean();
            let mut grad_col = vec![0.0; k];
            for (j, &m) in mean.iter().enumerate() {
                let (l, _) = clamped_log(m, prob_floor);
                term.value += m * l;
                grad_col[j] = (if m > prob_floor { l + 1.0 } else { l }) / bf;
            }
            for i in 0..b {
                term.grad.row_mut(i).copy_from_slice(&grad_col);
            }
        }
    }
    term.selected = b;
    term
}

/// Component values of one batch's objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_labeled: f64,
    pub ce_pseudo: f64,
    pub bce_pair: f64,
    pub entropy_reg: f64,
    pub selected_pseudo_count: usize,
    pub selected_pair_count: usize,
}

/// Component terms of one batch. `ce_labeled` covers the first
/// `ce_labeled.grad.rows()` rows of the scored set, `ce_pseudo` the rest;
/// the pair and entropy terms cover every scored row.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub ce_labeled: LossTerm,
    pub ce_pseudo: LossTerm,
    pub bce: PairTerm,
    pub entropy: LossTerm,
}

/// Weighted total `γ·CE_l + δ·CE_u + α·BCE + β·RE` with the matching
/// gradient over the scored rows (and embeddings, if the pair term has one).
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<(LossBreakdown, Matrix, Option<Matrix>)> {
    let rows = parts.bce.grad.rows();
    let cols = parts.bce.grad.cols();
    let split = parts.ce_labeled.grad.rows();
    if split + parts.ce_pseudo.grad.rows() != rows || parts.entropy.grad.shape() != (rows, cols) {
        return Err(Error::Shape("loss components cover different rows".into()));
    }
    let mut grad = parts.bce.grad.scaled(w.alpha);
    grad.add_scaled(&parts.entropy.grad, w.beta)?;
    for i in 0..split {
        for (g, &c) in grad.row_mut(i).iter_mut().zip(parts.ce_labeled.grad.row(i)) {
            *g += w.gamma * c;
        }
    }
    for i in 0..parts.ce_pseudo.grad.rows() {
        for (g, &c) in grad.row_mut(split + i).iter_mut().zip(parts.ce_pseudo.grad.row(i)) {
            *g += w.delta * c;
        }
    }
    let grad_z = parts.bce.grad_z.as_ref().map(|g| g.scaled(w.alpha));
    let breakdown = LossBreakdown {
        total: w.gamma * parts.ce_labeled.value
            + w.delta * parts.ce_pseudo.value
            + w.alpha * parts.bce.value
            + w.beta * parts.entropy.value,
        ce_labeled: parts.ce_labeled.value,
        ce_pseudo: parts.ce_pseudo.value,
        bce_pair: parts.bce.value,
        entropy_reg: parts.entropy.value,
        selected_pseudo_count: parts.ce_pseudo.selected,
        selected_pair_count: parts.bce.selected,
    };
    Ok((breakdown, grad, grad_z))
}
