//! Differentiable loss functions over batches of class-probability vectors.
//!
//! Everything here is computed in nats (natural log) and in `f64`, regardless
//! of what precision the networks run at. Conventions, fixed once for the whole
//! crate:
//!
//! - per-sample losses are mean-reduced over the batch;
//! - cross-entropy is summed over ensemble members;
//! - mutual information totals run over *ordered* member pairs `(m, m')`,
//!   `m != m'`, so each unordered pair is counted twice;
//! - probabilities are clamped to `[EPS, 1]` inside logarithms, with
//!   `0 * log 0 == 0`.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Clamp floor applied to probabilities inside logarithms.
pub const EPS: f64 = 1e-12;

/// Tolerance for "rows sum to one" validation.
const ROW_SUM_TOL: f64 = 1e-6;

fn ln_clamped(x: f64) -> f64 {
    x.max(EPS).ln()
}

/// `x * ln(x)` with the `0 * ln 0 == 0` convention.
fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A single probability distribution over `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Array1<f64>);

impl ProbVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        validate_row(values.view().to_slice().expect("contiguous"), 0)?;
        Ok(ProbVector(values))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

/// `N x C` row-stochastic matrix: one probability vector per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Array2<f64>);

impl ProbBatch {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::validation("probability batch must have N >= 1"));
        }
        for (i, row) in rows.outer_iter().enumerate() {
            validate_row(row.to_slice().expect("contiguous"), i)?;
        }
        Ok(ProbBatch(rows))
    }

    /// Wrap a matrix that is row-stochastic by construction (e.g. softmax
    /// output). Validated only in debug builds.
    pub fn from_normalized(rows: Array2<f64>) -> Self {
        debug_assert!(rows
            .outer_iter()
            .all(|r| (r.sum() - 1.0).abs() <= 1e-4 && r.iter().all(|&p| p >= -1e-9)));
        ProbBatch(rows)
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn num_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.ncols()
    }
}

fn validate_row(row: &[f64], index: usize) -> Result<()> {
    if row.is_empty() {
        return Err(Error::validation("probability vector must have C >= 1"));
    }
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() || p < -1e-9 || p > 1.0 + 1e-9 {
            return Err(Error::validation(format!(
                "row {index}: probability {p} outside [0, 1]"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::validation(format!(
            "row {index}: probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// `C x C` empirical joint distribution of two members' predicted classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseJoint(Array2<f64>);

impl PairwiseJoint {
    pub fn table(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Nonnegative scalar loss in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue(f64);

impl LossValue {
    /// Wraps an entropy/KL-style quantity: must be finite; tiny negative
    /// round-off is snapped to zero.
    fn entropy_like(v: f64) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::validation(format!("non-finite loss value {v}")));
        }
        Ok(LossValue(if v < 0.0 && v > -1e-9 { 0.0 } else { v }))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<LossValue> for f64 {
    fn from(v: LossValue) -> f64 {
        v.0
    }
}

/// Weight on the mutual-information term of a composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversificationWeight(f64);

impl DiversificationWeight {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::validation(format!(
                "diversification weight must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(DiversificationWeight(lambda))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Shape checks
// ---------------------------------------------------------------------------

fn check_same_shape(members: &[ProbBatch]) -> Result<(usize, usize)> {
    let first = members
        .first()
        .ok_or_else(|| Error::validation("at least one probability batch required"))?;
    let (n, c) = (first.num_samples(), first.num_classes());
    for (m, b) in members.iter().enumerate().skip(1) {
        if b.num_samples() != n || b.num_classes() != c {
            return Err(Error::shape(format!(
                "member {m} has shape {}x{}, expected {n}x{c}",
                b.num_samples(),
                b.num_classes()
            )));
        }
    }
    Ok((n, c))
}

fn check_pair(pa: &ProbBatch, pb: &ProbBatch) -> Result<(usize, usize)> {
    if pa.num_samples() != pb.num_samples() {
        return Err(Error::shape(format!(
            "batch sizes differ: {} vs {}",
            pa.num_samples(),
            pb.num_samples()
        )));
    }
    if pa.num_classes() != pb.num_classes() {
        return Err(Error::shape(format!(
            "class counts differ: {} vs {}",
            pa.num_classes(),
            pb.num_classes()
        )));
    }
    Ok((pa.num_samples(), pa.num_classes()))
}

// ---------------------------------------------------------------------------
// Entropies
// ---------------------------------------------------------------------------

/// Shannon entropy `H(p) = -sum_c p^c ln p^c` of one distribution, in nats.
pub fn entropy(p: &ProbVector) -> Result<LossValue> {
    LossValue::entropy_like(-p.values().iter().map(|&x| xlnx(x)).sum::<f64>())
}

fn entropy_of_slice(row: &[f64]) -> f64 {
    -row.iter().map(|&x| xlnx(x)).sum::<f64>()
}

/// Mean per-row entropy of a batch.
pub fn batch_entropy_mean(p: &ProbBatch) -> f64 {
    let n = p.num_samples() as f64;
    p.rows()
        .outer_iter()
        .map(|r| entropy_of_slice(r.to_slice().expect("contiguous")))
        .sum::<f64>()
        / n
}

/// Rowwise arithmetic mean of `M` probability batches.
pub fn marginal_probability(member_probs: &[ProbBatch]) -> Result<ProbBatch> {
    let (n, c) = check_same_shape(member_probs)?;
    let mut acc = Array2::<f64>::zeros((n, c));
    for b in member_probs {
        acc += b.rows();
    }
    acc /= member_probs.len() as f64;
    Ok(ProbBatch::from_normalized(acc))
}

/// Batch-mean entropy of the member-averaged distribution.
pub fn marginal_entropy_loss(member_probs: &[ProbBatch]) -> Result<LossValue> {
    let marginal = marginal_probability(member_probs)?;
    LossValue::entropy_like(batch_entropy_mean(&marginal))
}

/// Gradient of [`marginal_entropy_loss`] w.r.t. each member's probabilities.
pub fn marginal_entropy_loss_grads(member_probs: &[ProbBatch]) -> Result<Vec<Array2<f64>>> {
    let (n, c) = check_same_shape(member_probs)?;
    let m = member_probs.len() as f64;
    let marginal = marginal_probability(member_probs)?;
    // dL/dp_m[i,c] = -(ln pbar[i,c] + 1) / (N * M), identical for every member.
    let mut g = Array2::<f64>::zeros((n, c));
    for (mut grow, mrow) in g.outer_iter_mut().zip(marginal.rows().outer_iter()) {
        for (gv, &pv) in grow.iter_mut().zip(mrow.iter()) {
            *gv = -(ln_clamped(pv) + 1.0) / (n as f64 * m);
        }
    }
    Ok(vec![g; member_probs.len()])
}

// ---------------------------------------------------------------------------
// Pairwise mutual information
// ---------------------------------------------------------------------------

/// Batch-averaged outer product of two members' probability rows:
/// `J = (1/N) sum_i pa_i (x) pb_i`.
pub fn empirical_joint(pa: &ProbBatch, pb: &ProbBatch) -> Result<PairwiseJoint> {
    let (n, c) = check_pair(pa, pb)?;
    let mut table = Array2::<f64>::zeros((c, c));
    for (arow, brow) in pa.rows().outer_iter().zip(pb.rows().outer_iter()) {
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (j, &bv) in brow.iter().enumerate() {
                table[(i, j)] += av * bv;
            }
        }
    }
    table /= n as f64;
    Ok(PairwiseJoint(table))
}

fn column_means(p: &ProbBatch) -> Array1<f64> {
    p.rows().mean_axis(Axis(0)).expect("N >= 1")
}

/// KL divergence between the empirical joint of two members' predictions and
/// the product of their empirical marginals. Zero iff the predictions are
/// statistically independent over the batch.
pub fn pairwise_mi_loss(pa: &ProbBatch, pb: &ProbBatch) -> Result<LossValue> {
    check_pair(pa, pb)?;
    let joint = empirical_joint(pa, pb)?;
    let ma = column_means(pa);
    let mb = column_means(pb);
    let mut kl = 0.0;
    for (ci, &mav) in ma.iter().enumerate() {
        for (cj, &mbv) in mb.iter().enumerate() {
            let j = joint.0[(ci, cj)];
            if j > 0.0 {
                kl += j * (ln_clamped(j) - ln_clamped(mav) - ln_clamped(mbv));
            }
        }
    }
    LossValue::entropy_like(kl)
}

/// Gradients of [`pairwise_mi_loss`] w.r.t. `pa` and `pb`.
///
/// With `r[c,d] = ln(J[c,d] / (ma[c] mb[d]))` the gradients collapse to
/// `dL/dpa[i,c] = (1/N) sum_d pb[i,d] r[c,d]` and symmetrically for `pb`;
/// the `+1/-1` bookkeeping terms cancel because rows sum to one.
pub fn pairwise_mi_loss_grads(pa: &ProbBatch, pb: &ProbBatch) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, c) = check_pair(pa, pb)?;
    let joint = empirical_joint(pa, pb)?;
    let ma = column_means(pa);
    let mb = column_means(pb);
    let mut log_ratio = Array2::<f64>::zeros((c, c));
    for ci in 0..c {
        for cj in 0..c {
            log_ratio[(ci, cj)] =
                ln_clamped(joint.0[(ci, cj)]) - ln_clamped(ma[ci]) - ln_clamped(mb[cj]);
        }
    }
    // (N x C) = (N x C) . (C x C)^T and its mirror.
    let ga = pb.rows().dot(&log_ratio.t()) / n as f64;
    let gb = pa.rows().dot(&log_ratio) / n as f64;
    Ok((ga, gb))
}

/// Sum of [`pairwise_mi_loss`] over all ordered member pairs `m != m'`.
pub fn mutual_information_total(member_probs: &[ProbBatch]) -> Result<LossValue> {
    check_same_shape(member_probs)?;
    let m = member_probs.len();
    if m < 2 {
        return Err(Error::validation(
            "mutual information requires at least two members",
        ));
    }
    let mut total = 0.0;
    for a in 0..m {
        for b in 0..m {
            if a != b {
                total += pairwise_mi_loss(&member_probs[a], &member_probs[b])?.value();
            }
        }
    }
    LossValue::entropy_like(total)
}

/// Gradient of [`mutual_information_total`] w.r.t. each member's probabilities.
pub fn mutual_information_total_grads(member_probs: &[ProbBatch]) -> Result<Vec<Array2<f64>>> {
    let (n, c) = check_same_shape(member_probs)?;
    let m = member_probs.len();
    if m < 2 {
        return Err(Error::validation(
            "mutual information requires at least two members",
        ));
    }
    let mut grads = vec![Array2::<f64>::zeros((n, c)); m];
    // Ordered pairs: accumulate each unordered pair twice.
    for a in 0..m {
        for b in (a + 1)..m {
            let (ga, gb) = pairwise_mi_loss_grads(&member_probs[a], &member_probs[b])?;
            grads[a].scaled_add(2.0, &ga);
            grads[b].scaled_add(2.0, &gb);
        }
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Cross-entropy and composite losses
// ---------------------------------------------------------------------------

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    Ok(())
}

/// Sum over members of the batch-mean negative log-likelihood of the labels.
pub fn cross_entropy_sum(member_probs: &[ProbBatch], labels: &[usize]) -> Result<LossValue> {
    let (n, c) = check_same_shape(member_probs)?;
    check_labels(labels, n, c)?;
    let mut total = 0.0;
    for b in member_probs {
        let mut member = 0.0;
        for (row, &y) in b.rows().outer_iter().zip(labels) {
            member -= ln_clamped(row[y]);
        }
        total += member / n as f64;
    }
    LossValue::entropy_like(total)
}

/// Gradient of [`cross_entropy_sum`] w.r.t. each member's probabilities.
pub fn cross_entropy_sum_grads(
    member_probs: &[ProbBatch],
    labels: &[usize],
) -> Result<Vec<Array2<f64>>> {
    let (n, c) = check_same_shape(member_probs)?;
    check_labels(labels, n, c)?;
    let mut grads = Vec::with_capacity(member_probs.len());
    for b in member_probs {
        let mut g = Array2::<f64>::zeros((n, c));
        for (i, &y) in labels.iter().enumerate() {
            g[(i, y)] = -1.0 / (n as f64 * b.rows()[(i, y)].max(EPS));
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Supervised ensemble training objective:
/// cross-entropy sum plus `lambda` times the mutual-information total.
///
/// With a single member or `lambda == 0` the MI term is dropped entirely, so
/// `M == 1` stays valid for plain single-network training.
pub fn training_loss(
    member_probs: &[ProbBatch],
    labels: &[usize],
    lambda: DiversificationWeight,
) -> Result<LossValue> {
    let ce = cross_entropy_sum(member_probs, labels)?.value();
    let mi = if lambda.value() > 0.0 && member_probs.len() >= 2 {
        mutual_information_total(member_probs)?.value()
    } else {
        0.0
    };
    LossValue::entropy_like(ce + lambda.value() * mi)
}

/// Value and per-member probability gradients of [`training_loss`].
pub fn training_loss_grads(
    member_probs: &[ProbBatch],
    labels: &[usize],
    lambda: DiversificationWeight,
) -> Result<(LossValue, Vec<Array2<f64>>)> {
    let value = training_loss(member_probs, labels, lambda)?;
    let mut grads = cross_entropy_sum_grads(member_probs, labels)?;
    if lambda.value() > 0.0 && member_probs.len() >= 2 {
        let mi = mutual_information_total_grads(member_probs)?;
        for (g, gm) in grads.iter_mut().zip(mi) {
            g.scaled_add(lambda.value(), &gm);
        }
    }
    Ok((value, grads))
}

/// Unsupervised adaptation objective: marginal entropy plus `lambda` times
/// the mutual-information total. Requires `M >= 2`.
pub fn adaptation_loss(
    member_probs: &[ProbBatch],
    lambda: DiversificationWeight,
) -> Result<LossValue> {
    if member_probs.len() < 2 {
        return Err(Error::validation(
            "adaptation objective requires at least two members",
        ));
    }
    let me = marginal_entropy_loss(member_probs)?.value();
    let mi = if lambda.value() > 0.0 {
        mutual_information_total(member_probs)?.value()
    } else {
        0.0
    };
    LossValue::entropy_like(me + lambda.value() * mi)
}

/// Value and per-member probability gradients of [`adaptation_loss`].
pub fn adaptation_loss_grads(
    member_probs: &[ProbBatch],
    lambda: DiversificationWeight,
) -> Result<(LossValue, Vec<Array2<f64>>)> {
    let value = adaptation_loss(member_probs, lambda)?;
    let mut grads = marginal_entropy_loss_grads(member_probs)?;
    if lambda.value() > 0.0 {
        let mi = mutual_information_total_grads(member_probs)?;
        for (g, gm) in grads.iter_mut().zip(mi) {
            g.scaled_add(lambda.value(), &gm);
        }
    }
    Ok((value, grads))
}

/// Entropy-minimization objective over a model's own predictions: mean over
/// members of the batch-mean prediction entropy.
pub fn mean_prediction_entropy(member_probs: &[ProbBatch]) -> Result<LossValue> {
    check_same_shape(member_probs)?;
    let m = member_probs.len() as f64;
    let v = member_probs.iter().map(batch_entropy_mean).sum::<f64>() / m;
    LossValue::entropy_like(v)
}

/// Value and gradients of [`mean_prediction_entropy`].
pub fn mean_prediction_entropy_grads(
    member_probs: &[ProbBatch],
) -> Result<(LossValue, Vec<Array2<f64>>)> {
    let (n, c) = check_same_shape(member_probs)?;
    let value = mean_prediction_entropy(member_probs)?;
    let m = member_probs.len() as f64;
    let mut grads = Vec::with_capacity(member_probs.len());
    for b in member_probs {
        let mut g = Array2::<f64>::zeros((n, c));
        for (mut grow, prow) in g.outer_iter_mut().zip(b.rows().outer_iter()) {
            for (gv, &pv) in grow.iter_mut().zip(prow.iter()) {
                *gv = -(ln_clamped(pv) + 1.0) / (n as f64 * m);
            }
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Batch-mean entropy of the across-augmentation average probability:
/// one batch per augmented view of the same samples.
pub fn memo_marginal_entropy(augmented_probs: &[ProbBatch]) -> Result<LossValue> {
    if augmented_probs.is_empty() {
        return Err(Error::validation("at least one augmentation required"));
    }
    marginal_entropy_loss(augmented_probs)
}

/// Value and per-augmentation gradients of [`memo_marginal_entropy`].
pub fn memo_marginal_entropy_grads(
    augmented_probs: &[ProbBatch],
) -> Result<(LossValue, Vec<Array2<f64>>)> {
    let value = memo_marginal_entropy(augmented_probs)?;
    let grads = marginal_entropy_loss_grads(augmented_probs)?;
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// Softmax bridging
// ---------------------------------------------------------------------------

/// Numerically stable rowwise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Chain rule through a rowwise softmax: maps `dL/dp` to `dL/dz` where
/// `p = softmax(z)`, via `dz_c = p_c (dp_c - sum_d p_d dp_d)`.
pub fn prob_grad_to_logit_grad(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(probs.raw_dim());
    for ((mut orow, prow), grow) in out
        .outer_iter_mut()
        .zip(probs.outer_iter())
        .zip(dprobs.outer_iter())
    {
        let dot: f64 = prow.iter().zip(grow.iter()).map(|(&p, &g)| p * g).sum();
        for ((ov, &pv), &gv) in orow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
            *ov = pv * (gv - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn pb(rows: Array2<f64>) -> ProbBatch {
        ProbBatch::new(rows).unwrap()
    }

    fn pv(v: Array1<f64>) -> ProbVector {
        ProbVector::new(v).unwrap()
    }

    // -- independent oracles -------------------------------------------------

    /// Term-by-term KL over the explicitly enumerated C x C joint table.
    fn mi_bruteforce(pa: &Array2<f64>, pb: &Array2<f64>) -> f64 {
        let (n, c) = (pa.nrows(), pa.ncols());
        let mut joint = vec![vec![0.0; c]; c];
        for i in 0..n {
            for ca in 0..c {
                for cb in 0..c {
                    joint[ca][cb] += pa[(i, ca)] * pb[(i, cb)] / n as f64;
                }
            }
        }
        let mut ma = vec![0.0; c];
        let mut mb = vec![0.0; c];
        for i in 0..n {
            for cc in 0..c {
                ma[cc] += pa[(i, cc)] / n as f64;
                mb[cc] += pb[(i, cc)] / n as f64;
            }
        }
        let mut kl = 0.0;
        for ca in 0..c {
            for cb in 0..c {
                let j = joint[ca][cb];
                if j > 0.0 {
                    kl += j * (j / (ma[ca] * mb[cb])).ln();
                }
            }
        }
        kl
    }

    fn entropy_bruteforce(row: &[f64]) -> f64 {
        -row.iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    fn random_prob_batch(rng: &mut ChaCha8Rng, n: usize, c: usize) -> ProbBatch {
        let mut rows = Array2::<f64>::zeros((n, c));
        for mut row in rows.outer_iter_mut() {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.random_range(0.01..1.0);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        ProbBatch::new(rows).unwrap()
    }

    // -- entropy -------------------------------------------------------------

    #[test]
    fn entropy_uniform_two_classes() {
        let h = entropy(&pv(array![0.5, 0.5])).unwrap().value();
        assert_abs_diff_eq!(h, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let h = entropy(&pv(array![1.0, 0.0])).unwrap().value();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn entropy_point_nine_point_one() {
        let h = entropy(&pv(array![0.9, 0.1])).unwrap().value();
        let expected = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert_abs_diff_eq!(h, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.3251, epsilon = 5e-5);
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        assert!(ProbVector::new(array![0.7, 0.7]).is_err());
        assert!(ProbVector::new(array![1.2, -0.2]).is_err());
    }

    // -- marginal probability ------------------------------------------------

    #[test]
    fn marginal_probability_symmetric_average() {
        let a = pb(array![[0.9, 0.1]]);
        let b = pb(array![[0.1, 0.9]]);
        let m = marginal_probability(&[a, b]).unwrap();
        assert_abs_diff_eq!(m.rows()[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn marginal_probability_identical_batches_unchanged() {
        let a = pb(array![[0.3, 0.7], [0.6, 0.4]]);
        let m = marginal_probability(&[a.clone(), a.clone(), a.clone()]).unwrap();
        for (x, y) in m.rows().iter().zip(a.rows().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn marginal_probability_elementwise_mean() {
        let a = pb(array![[1.0, 0.0]]);
        let b = pb(array![[0.5, 0.5]]);
        let m = marginal_probability(&[a, b]).unwrap();
        assert_abs_diff_eq!(m.rows()[(0, 0)], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(m.rows()[(0, 1)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn marginal_probability_shape_mismatch_errors() {
        let a = pb(array![[0.5, 0.5]]);
        let b = pb(array![[0.5, 0.5], [0.5, 0.5]]);
        assert!(marginal_probability(&[a, b]).is_err());
    }

    // -- marginal entropy loss -----------------------------------------------

    #[test]
    fn marginal_entropy_opposed_members_is_ln2() {
        let a = pb(array![[0.9, 0.1]]);
        let b = pb(array![[0.1, 0.9]]);
        let v = marginal_entropy_loss(&[a, b]).unwrap().value();
        assert_abs_diff_eq!(v, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn marginal_entropy_identical_one_hot_is_zero() {
        let a = pb(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = marginal_entropy_loss(&[a.clone(), a]).unwrap().value();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn marginal_entropy_uniform_members_is_ln_c() {
        let a = pb(Array2::from_elem((3, 4), 0.25));
        let v = marginal_entropy_loss(&[a.clone(), a]).unwrap().value();
        assert_abs_diff_eq!(v, 4.0f64.ln(), epsilon = 1e-12);
    }

    // -- empirical joint -----------------------------------------------------

    #[test]
    fn empirical_joint_two_one_hot_rows() {
        let a = pb(array![[1.0, 0.0], [0.0, 1.0]]);
        let j = empirical_joint(&a, &a).unwrap();
        assert_abs_diff_eq!(j.table()[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(j.table()[(1, 1)], 0.5, epsilon = 1e-15);
        assert_eq!(j.table()[(0, 1)], 0.0);
        assert_eq!(j.table()[(1, 0)], 0.0);
    }

    #[test]
    fn empirical_joint_constant_factor_pulls_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = pb(Array2::from_elem((4, 2), 0.5));
        let b = random_prob_batch(&mut rng, 4, 2);
        let j = empirical_joint(&a, &b).unwrap();
        let mb = column_means(&b);
        for ci in 0..2 {
            for cj in 0..2 {
                assert_abs_diff_eq!(j.table()[(ci, cj)], 0.5 * mb[cj], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn empirical_joint_single_outer_product() {
        let a = pb(array![[1.0, 0.0]]);
        let b = pb(array![[0.0, 1.0]]);
        let j = empirical_joint(&a, &b).unwrap();
        assert_eq!(j.table()[(0, 1)], 1.0);
        assert_eq!(j.table()[(0, 0)], 0.0);
        assert_eq!(j.table()[(1, 0)], 0.0);
        assert_eq!(j.table()[(1, 1)], 0.0);
    }

    #[test]
    fn empirical_joint_row_sums_equal_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_prob_batch(&mut rng, 6, 3);
        let b = random_prob_batch(&mut rng, 6, 3);
        let j = empirical_joint(&a, &b).unwrap();
        let ma = column_means(&a);
        let mb = column_means(&b);
        for c in 0..3 {
            assert_abs_diff_eq!(j.table().row(c).sum(), ma[c], epsilon = 1e-12);
            assert_abs_diff_eq!(j.table().column(c).sum(), mb[c], epsilon = 1e-12);
        }
    }

    // -- pairwise MI ----------------------------------------------------------

    #[test]
    fn pairwise_mi_perfectly_dependent_is_ln2() {
        let a = pb(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = pairwise_mi_loss(&a, &a).unwrap().value();
        assert_abs_diff_eq!(v, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pairwise_mi_constant_batch_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = pb(Array2::from_elem((5, 2), 0.5));
        let b = random_prob_batch(&mut rng, 5, 2);
        let v = pairwise_mi_loss(&a, &b).unwrap().value();
        assert!(v.abs() < 1e-12, "constant factor should factorize, got {v}");
    }

    #[test]
    fn pairwise_mi_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let c = rng.random_range(2..5);
            let a = random_prob_batch(&mut rng, n, c);
            let b = random_prob_batch(&mut rng, n, c);
            let v = pairwise_mi_loss(&a, &b).unwrap().value();
            let oracle = mi_bruteforce(a.rows(), b.rows());
            assert_abs_diff_eq!(v, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn mutual_information_total_is_twice_pairwise_for_two_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_prob_batch(&mut rng, 4, 3);
        let b = random_prob_batch(&mut rng, 4, 3);
        let pair = pairwise_mi_loss(&a, &b).unwrap().value();
        let total = mutual_information_total(&[a, b]).unwrap().value();
        assert_abs_diff_eq!(total, 2.0 * pair, epsilon = 1e-12);
    }

    #[test]
    fn mutual_information_total_rejects_single_member() {
        let a = pb(array![[0.5, 0.5]]);
        assert!(mutual_information_total(&[a]).is_err());
    }

    // -- cross entropy ---------------------------------------------------------

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let a = pb(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = cross_entropy_sum(&[a.clone(), a], &[0, 1]).unwrap().value();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_binary_is_ln2_per_member() {
        let a = pb(array![[0.5, 0.5], [0.5, 0.5]]);
        let one = cross_entropy_sum(&[a.clone()], &[0, 1]).unwrap().value();
        assert_abs_diff_eq!(one, 2.0f64.ln(), epsilon = 1e-12);
        let two = cross_entropy_sum(&[a.clone(), a], &[0, 1]).unwrap().value();
        assert_abs_diff_eq!(two, 2.0 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let a = pb(array![[0.5, 0.5]]);
        assert!(cross_entropy_sum(&[a], &[2]).is_err());
    }

    // -- composite losses --------------------------------------------------------

    #[test]
    fn training_loss_lambda_zero_equals_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_prob_batch(&mut rng, 4, 2);
        let b = random_prob_batch(&mut rng, 4, 2);
        let labels = [0, 1, 0, 1];
        let ce = cross_entropy_sum(&[a.clone(), b.clone()], &labels).unwrap();
        let l = training_loss(
            &[a, b],
            &labels,
            DiversificationWeight::new(0.0).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(l.value(), ce.value(), epsilon = 1e-15);
    }

    #[test]
    fn training_loss_composes_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_prob_batch(&mut rng, 5, 2);
        let b = random_prob_batch(&mut rng, 5, 2);
        let labels = [0, 1, 1, 0, 1];
        let ce = cross_entropy_sum(&[a.clone(), b.clone()], &labels)
            .unwrap()
            .value();
        let mi = mutual_information_total(&[a.clone(), b.clone()])
            .unwrap()
            .value();
        let l = training_loss(
            &[a, b],
            &labels,
            DiversificationWeight::new(10.0).unwrap(),
        )
        .unwrap()
        .value();
        assert_abs_diff_eq!(l, ce + 10.0 * mi, epsilon = 1e-12);
    }

    #[test]
    fn adaptation_loss_lambda_zero_is_marginal_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = random_prob_batch(&mut rng, 4, 2);
        let b = random_prob_batch(&mut rng, 4, 2);
        let me = marginal_entropy_loss(&[a.clone(), b.clone()]).unwrap().value();
        let l = adaptation_loss(&[a, b], DiversificationWeight::new(0.0).unwrap())
            .unwrap()
            .value();
        assert_abs_diff_eq!(l, me, epsilon = 1e-15);
    }

    #[test]
    fn adaptation_loss_constant_uniform_members_is_ln_c() {
        let a = pb(Array2::from_elem((3, 3), 1.0 / 3.0));
        let l = adaptation_loss(
            &[a.clone(), a],
            DiversificationWeight::new(10.0).unwrap(),
        )
        .unwrap()
        .value();
        assert_abs_diff_eq!(l, 3.0f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn adaptation_loss_composes_sub_oracles() {
        // Identical one-hot members: marginal entropy 0, MI from its own oracle.
        let a = pb(array![[1.0, 0.0], [0.0, 1.0]]);
        let lambda = 2.5;
        let mi = mutual_information_total(&[a.clone(), a.clone()])
            .unwrap()
            .value();
        let l = adaptation_loss(
            &[a.clone(), a],
            DiversificationWeight::new(lambda).unwrap(),
        )
        .unwrap()
        .value();
        assert_abs_diff_eq!(l, lambda * mi, epsilon = 1e-12);
    }

    // -- MEMO ---------------------------------------------------------------------

    #[test]
    fn memo_single_augmentation_is_plain_entropy() {
        let a = pb(array![[0.8, 0.2], [0.4, 0.6]]);
        let v = memo_marginal_entropy(&[a.clone()]).unwrap().value();
        assert_abs_diff_eq!(v, batch_entropy_mean(&a), epsilon = 1e-15);
    }

    #[test]
    fn memo_opposed_augmentations_is_ln2() {
        let a = pb(array![[0.9, 0.1]]);
        let b = pb(array![[0.1, 0.9]]);
        let v = memo_marginal_entropy(&[a, b]).unwrap().value();
        assert_abs_diff_eq!(v, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn memo_empty_list_errors() {
        assert!(memo_marginal_entropy(&[]).is_err());
    }

    // -- invariants (property tests) ---------------------------------------------

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn entropy_and_mi_nonnegative(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..6);
            let c = rng.random_range(2..5);
            let a = random_prob_batch(&mut rng, n, c);
            let b = random_prob_batch(&mut rng, n, c);
            for row in a.rows().outer_iter() {
                let h = entropy_of_slice(row.to_slice().unwrap());
                prop_assert!(h >= 0.0 && h <= (c as f64).ln() + 1e-12);
            }
            let mi = pairwise_mi_loss(&a, &b).unwrap().value();
            prop_assert!(mi >= 0.0);
            let total = mutual_information_total(&[a, b]).unwrap().value();
            prop_assert!(total >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn mi_symmetry_and_factorization(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..6);
            let c = rng.random_range(2..4);
            let a = random_prob_batch(&mut rng, n, c);
            let b = random_prob_batch(&mut rng, n, c);
            let ab = pairwise_mi_loss(&a, &b).unwrap().value();
            let ba = pairwise_mi_loss(&b, &a).unwrap().value();
            prop_assert!((ab - ba).abs() < 1e-10);

            // Row-constant batch factorizes exactly.
            let mut row = vec![0.0; c];
            let mut sum = 0.0;
            for v in row.iter_mut() { *v = rng.random_range(0.05..1.0); sum += *v; }
            for v in row.iter_mut() { *v /= sum; }
            let constant = ProbBatch::new(Array2::from_shape_fn((n, c), |(_, j)| row[j])).unwrap();
            let mi = pairwise_mi_loss(&constant, &b).unwrap().value();
            prop_assert!(mi.abs() <= 1e-8);
        }
    }

    proptest! {
        #[test]
        fn marginal_reduction_identical_members(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..6);
            let c = rng.random_range(2..5);
            let a = random_prob_batch(&mut rng, n, c);
            let m = rng.random_range(2..5);
            let members = vec![a.clone(); m];
            let v = marginal_entropy_loss(&members).unwrap().value();
            prop_assert!((v - batch_entropy_mean(&a)).abs() < 1e-10);
        }
    }

    // -- gradient checks -----------------------------------------------------------

    /// Central finite differences of `f` w.r.t. pre-softmax scores.
    fn fd_logit_grad(
        logits: &[Array2<f64>],
        f: &dyn Fn(&[ProbBatch]) -> f64,
    ) -> Vec<Array2<f64>> {
        let h = 1e-6;
        let eval = |ls: &[Array2<f64>]| {
            let probs: Vec<ProbBatch> = ls
                .iter()
                .map(|z| ProbBatch::from_normalized(softmax_rows(z)))
                .collect();
            f(&probs)
        };
        let mut grads = Vec::new();
        for m in 0..logits.len() {
            let mut g = Array2::<f64>::zeros(logits[m].raw_dim());
            for i in 0..logits[m].nrows() {
                for j in 0..logits[m].ncols() {
                    let mut plus = logits.to_vec();
                    plus[m][(i, j)] += h;
                    let mut minus = logits.to_vec();
                    minus[m][(i, j)] -= h;
                    g[(i, j)] = (eval(&plus) - eval(&minus)) / (2.0 * h);
                }
            }
            grads.push(g);
        }
        grads
    }

    fn analytic_logit_grads(
        logits: &[Array2<f64>],
        grads_fn: &dyn Fn(&[ProbBatch]) -> Vec<Array2<f64>>,
    ) -> Vec<Array2<f64>> {
        let probs: Vec<ProbBatch> = logits
            .iter()
            .map(|z| ProbBatch::from_normalized(softmax_rows(z)))
            .collect();
        let dprobs = grads_fn(&probs);
        probs
            .iter()
            .zip(dprobs.iter())
            .map(|(p, dp)| prob_grad_to_logit_grad(p.rows(), dp))
            .collect()
    }

    fn assert_grads_close(analytic: &[Array2<f64>], fd: &[Array2<f64>], tol: f64) {
        for (a, f) in analytic.iter().zip(fd.iter()) {
            for (&av, &fv) in a.iter().zip(f.iter()) {
                let denom = av.abs().max(fv.abs()).max(1e-3);
                assert!(
                    (av - fv).abs() / denom < tol,
                    "gradient mismatch: analytic {av} vs fd {fv}"
                );
            }
        }
    }

    fn random_logits(rng: &mut ChaCha8Rng, m: usize, n: usize, c: usize) -> Vec<Array2<f64>> {
        (0..m)
            .map(|_| Array2::from_shape_fn((n, c), |_| rng.random_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn gradcheck_entropy_and_marginal_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 2, 3, 3);
            let analytic = analytic_logit_grads(&logits, &|p| {
                marginal_entropy_loss_grads(p).unwrap()
            });
            let fd = fd_logit_grad(&logits, &|p| marginal_entropy_loss(p).unwrap().value());
            assert_grads_close(&analytic, &fd, 1e-4);
        }
    }

    #[test]
    fn gradcheck_pairwise_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 2, 3, 3);
            let analytic = analytic_logit_grads(&logits, &|p| {
                let (ga, gb) = pairwise_mi_loss_grads(&p[0], &p[1]).unwrap();
                vec![ga, gb]
            });
            let fd = fd_logit_grad(&logits, &|p| {
                pairwise_mi_loss(&p[0], &p[1]).unwrap().value()
            });
            assert_grads_close(&analytic, &fd, 1e-4);
        }
    }

    #[test]
    fn gradcheck_training_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let lambda = DiversificationWeight::new(10.0).unwrap();
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 3, 3, 3);
            let labels = [0usize, 2, 1];
            let analytic = analytic_logit_grads(&logits, &|p| {
                training_loss_grads(p, &labels, lambda).unwrap().1
            });
            let fd = fd_logit_grad(&logits, &|p| {
                training_loss(p, &labels, lambda).unwrap().value()
            });
            assert_grads_close(&analytic, &fd, 1e-4);
        }
    }

    #[test]
    fn gradcheck_adaptation_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let lambda = DiversificationWeight::new(10.0).unwrap();
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 3, 3, 3);
            let analytic = analytic_logit_grads(&logits, &|p| {
                adaptation_loss_grads(p, lambda).unwrap().1
            });
            let fd = fd_logit_grad(&logits, &|p| adaptation_loss(p, lambda).unwrap().value());
            assert_grads_close(&analytic, &fd, 1e-4);
        }
    }

    #[test]
    fn gradcheck_memo() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 2, 4, 2);
            let analytic = analytic_logit_grads(&logits, &|p| {
                memo_marginal_entropy_grads(p).unwrap().1
            });
            let fd = fd_logit_grad(&logits, &|p| memo_marginal_entropy(p).unwrap().value());
            assert_grads_close(&analytic, &fd, 1e-4);
        }
    }

    #[test]
    fn gradcheck_mean_prediction_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        let logits = random_logits(&mut rng, 2, 3, 3);
        let analytic = analytic_logit_grads(&logits, &|p| {
            mean_prediction_entropy_grads(p).unwrap().1
        });
        let fd = fd_logit_grad(&logits, &|p| mean_prediction_entropy(p).unwrap().value());
        assert_grads_close(&analytic, &fd, 1e-4);
    }

    #[test]
    fn entropy_bruteforce_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        for _ in 0..20 {
            let b = random_prob_batch(&mut rng, 4, 4);
            let via_batch = batch_entropy_mean(&b);
            let oracle = b
                .rows()
                .outer_iter()
                .map(|r| entropy_bruteforce(r.to_slice().unwrap()))
                .sum::<f64>()
                / 4.0;
            assert_abs_diff_eq!(via_batch, oracle, epsilon = 1e-12);
        }
    }
}
