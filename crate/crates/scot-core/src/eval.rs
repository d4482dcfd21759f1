//! Downstream evaluation: ridge transfer readout, matching accuracy against
//! synthetic ground truth, and a randomized verifier for the risk-transfer
//! bound.
//!
//! The bound verifier checks, instance by instance, that the target risk of
//! swapping one Lipschitz readout for another is controlled by the source
//! risk plus a coupling-quality term:
//! `R_t <= R_s + (L_h + L_g) * sqrt(2 - 2 m)` where `m` lower-bounds the
//! expected inner product under the coupling via its contrastive loss:
//! `m = max(-1, tau log n_t - tau l_con - 1 - 1/(2 tau))`.

use crate::align::sphere_cost;
use crate::citydata::TwinCityTruth;
use crate::sinkhorn::{sinkhorn_solve, MarginalMode, SinkhornConfig};
use crate::{Result, Scalar, ScotError};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Linear readout `y = z . w + bias`.
#[derive(Debug, Clone)]
pub struct RidgeModel<F> {
    pub weights: Array1<F>,
    pub bias: F,
    pub alpha: F,
}

impl<F: Scalar> RidgeModel<F> {
    pub fn predict(&self, z: &Array2<F>) -> Result<Array1<F>> {
        if z.ncols() != self.weights.len() {
            return Err(ScotError::Input(format!(
                "model has {} features but embedding has {}",
                self.weights.len(),
                z.ncols()
            )));
        }
        Ok(z.dot(&self.weights) + self.bias)
    }
}

/// Solves `A x = rhs` for symmetric positive-definite `A` by Cholesky
/// factorization with forward/backward substitution.
fn cholesky_solve<F: Scalar>(a: &Array2<F>, rhs: &Array1<F>) -> Result<Array1<F>> {
    let n = a.nrows();
    let mut l = Array2::<F>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > F::zero()) {
                    return Err(ScotError::Stability(
                        "normal matrix is not positive definite".into(),
                    ));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<F>::zeros(n);
    for i in 0..n {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut w = Array1::<F>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * w[k];
        }
        w[i] = sum / l[[i, i]];
    }
    Ok(w)
}

/// Closed-form ridge regression `w = (Z'Z + alpha I)^-1 Z'y`. With `center`
/// the features and labels are mean-centered first and the means fold into
/// the bias; without it the bias is zero.
pub fn ridge_fit<F: Scalar>(
    z: &Array2<F>,
    y: &Array1<F>,
    alpha: F,
    center: bool,
) -> Result<RidgeModel<F>> {
    let (n, d) = z.dim();
    if n == 0 || d == 0 {
        return Err(ScotError::Input("ridge needs a nonempty design matrix".into()));
    }
    if y.len() != n {
        return Err(ScotError::Input(format!(
            "design has {n} rows but labels have {}",
            y.len()
        )));
    }
    if !(alpha > F::zero()) {
        return Err(ScotError::Input(format!(
            "ridge alpha must be positive, got {alpha}"
        )));
    }
    if z.iter().any(|x| !x.is_finite()) || y.iter().any(|x| !x.is_finite()) {
        return Err(ScotError::Input("ridge inputs must be finite".into()));
    }

    let (zc, yc, z_mean, y_mean) = if center {
        let z_mean = z.mean_axis(Axis(0)).expect("nonempty design");
        let y_mean = y.sum() / F::from(n).unwrap();
        (z - &z_mean, y.mapv(|v| v - y_mean), z_mean, y_mean)
    } else {
        (z.clone(), y.clone(), Array1::zeros(d), F::zero())
    };

    let mut gram = zc.t().dot(&zc);
    for i in 0..d {
        gram[[i, i]] += alpha;
    }
    let rhs = zc.t().dot(&yc);
    let weights = cholesky_solve(&gram, &rhs)?;
    let bias = y_mean - z_mean.dot(&weights);
    Ok(RidgeModel {
        weights,
        bias,
        alpha,
    })
}

/// Transfer-quality metrics of a readout on held-out labels.
#[derive(Debug, Clone)]
pub struct TransferMetrics<F> {
    pub mae: F,
    /// Mean absolute percentage error over nonzero targets, in percent.
    pub mape: F,
    /// Targets excluded from MAPE for being exactly zero.
    pub mape_excluded: usize,
}

/// `mae = mean |pred - y|`; `mape = 100 * mean_{y != 0} |pred - y| / |y|`.
/// Zero targets stay in the MAE but are excluded (and counted) for MAPE;
/// an all-zero target vector leaves MAPE undefined and errors.
pub fn transfer_metrics<F: Scalar>(
    model: &RidgeModel<F>,
    z: &Array2<F>,
    y: &Array1<F>,
) -> Result<TransferMetrics<F>> {
    if z.nrows() != y.len() || z.nrows() == 0 {
        return Err(ScotError::Input(format!(
            "embedding has {} rows but labels have {}",
            z.nrows(),
            y.len()
        )));
    }
    let pred = model.predict(z)?;
    let n = y.len();
    let mut abs_sum = F::zero();
    let mut pct_sum = F::zero();
    let mut pct_count = 0usize;
    for i in 0..n {
        let err = (pred[i] - y[i]).abs();
        abs_sum += err;
        if y[i] != F::zero() {
            pct_sum += err / y[i].abs();
            pct_count += 1;
        }
    }
    if pct_count == 0 {
        return Err(ScotError::Input(
            "every target label is zero; MAPE is undefined".into(),
        ));
    }
    Ok(TransferMetrics {
        mae: abs_sum / F::from(n).unwrap(),
        mape: F::from(100.0).unwrap() * pct_sum / F::from(pct_count).unwrap(),
        mape_excluded: n - pct_count,
    })
}

/// Matching quality of a coupling against known region pairs.
#[derive(Debug, Clone)]
pub struct MatchingMetrics<F> {
    /// Fraction of matched source regions whose argmax lands on the truth.
    pub top1_acc: F,
    /// Mean of `P[i, match(i)] / (rowsum_i / n_t)`: mass on the true match
    /// relative to a uniform spread of the row. 1 means no information.
    pub mean_true_mass_ratio: F,
    /// Rows whose maximum was shared by more than one column (lowest index
    /// wins).
    pub ties: usize,
    /// Source regions that had a ground-truth partner.
    pub matched_rows: usize,
}

/// Scores a plan against the known matching. Unmatched source regions
/// (dropped pairs) are skipped; rows with no mass contribute zero lift.
pub fn matching_metrics_from_pairs<F: Scalar>(
    p: &Array2<F>,
    true_match: &[Option<usize>],
) -> Result<MatchingMetrics<F>> {
    let (n_s, n_t) = p.dim();
    if true_match.len() != n_s {
        return Err(ScotError::Input(format!(
            "plan has {n_s} rows but the truth lists {}",
            true_match.len()
        )));
    }
    if let Some(j) = true_match.iter().flatten().find(|&&j| j >= n_t) {
        return Err(ScotError::Input(format!(
            "truth points at target region {j} but the plan has {n_t} columns"
        )));
    }
    let mut hits = 0usize;
    let mut ties = 0usize;
    let mut matched = 0usize;
    let mut lift_sum = F::zero();
    let n_t_f = F::from(n_t).unwrap();
    for (i, target) in true_match.iter().enumerate() {
        let Some(j_true) = target else { continue };
        matched += 1;
        let row = p.row(i);
        let mut best = 0usize;
        let mut best_val = row[0];
        let mut tied = false;
        for (j, &val) in row.iter().enumerate().skip(1) {
            if val > best_val {
                best = j;
                best_val = val;
                tied = false;
            } else if val == best_val {
                tied = true;
            }
        }
        if tied {
            ties += 1;
        }
        if best == *j_true {
            hits += 1;
        }
        let rowsum = row.sum();
        if rowsum > F::zero() {
            lift_sum += p[[i, *j_true]] * n_t_f / rowsum;
        }
    }
    if matched == 0 {
        return Err(ScotError::Input(
            "truth contains no matched pairs to score".into(),
        ));
    }
    let matched_f = F::from(matched).unwrap();
    Ok(MatchingMetrics {
        top1_acc: F::from(hits).unwrap() / matched_f,
        mean_true_mass_ratio: lift_sum / matched_f,
        ties,
        matched_rows: matched,
    })
}

/// [`matching_metrics_from_pairs`] with the plan shape checked against the
/// truth's city sizes.
pub fn matching_metrics<F: Scalar>(
    p: &Array2<F>,
    truth: &TwinCityTruth<F>,
) -> Result<MatchingMetrics<F>> {
    if p.dim() != (truth.source.n, truth.target.n) {
        return Err(ScotError::Input(format!(
            "plan is {:?} but the twin cities are {}x{}",
            p.dim(),
            truth.source.n,
            truth.target.n
        )));
    }
    matching_metrics_from_pairs(p, &truth.true_match)
}

/// One concrete instance of the risk-transfer bound: unit embeddings on both
/// sides, a coupling with marginals `(a, b)`, and two linear readouts whose
/// Lipschitz constants are exactly their weight norms.
#[derive(Debug, Clone)]
pub struct BoundInstance<F> {
    /// `n_s x d`, unit rows.
    pub u: Array2<F>,
    /// `n_t x d`, unit rows.
    pub v: Array2<F>,
    /// Row marginal, strictly positive simplex vector.
    pub a: Array1<F>,
    /// Column marginal.
    pub b: Array1<F>,
    /// Coupling with marginals `(a, b)` within 1e-6.
    pub p: Array2<F>,
    pub tau: F,
    pub g_weights: Array1<F>,
    pub h_weights: Array1<F>,
}

/// Everything the bound check computed, for reporting either way.
#[derive(Debug, Clone)]
pub struct BoundReport<F> {
    /// Target risk `R_t = sum_j b_j |h(v_j) - g(v_j)|`.
    pub lhs: F,
    /// `R_s + (L_h + L_g) sqrt(2 - 2 m)`.
    pub rhs: F,
    /// Contrastive loss of the instance (per-row `a_i` inside the log).
    pub l_con: F,
    /// The lower bound `m` on the expected inner product.
    pub m_lower: F,
    /// `E_{(I,J)~P} <u_I, v_J>`, for the intermediate check.
    pub e_uv: F,
    pub holds: bool,
    /// Whether `m_lower <= e_uv + 1e-9`.
    pub intermediate_holds: bool,
}

fn check_unit_rows<F: Scalar>(z: &Array2<F>, side: &str) -> Result<()> {
    let tol = F::from(1e-9).unwrap();
    for (i, row) in z.rows().into_iter().enumerate() {
        let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
        if (norm - F::one()).abs() > tol {
            return Err(ScotError::Input(format!(
                "{side} row {i} has norm {norm}, expected a unit vector"
            )));
        }
    }
    Ok(())
}

fn validate_bound_instance<F: Scalar>(inst: &BoundInstance<F>) -> Result<()> {
    let (n_s, n_t) = inst.p.dim();
    if inst.u.nrows() != n_s || inst.v.nrows() != n_t || inst.u.ncols() != inst.v.ncols() {
        return Err(ScotError::Input("bound instance shapes disagree".into()));
    }
    let d = inst.u.ncols();
    if inst.g_weights.len() != d || inst.h_weights.len() != d {
        return Err(ScotError::Input("readout weights have the wrong length".into()));
    }
    if !(inst.tau > F::zero()) {
        return Err(ScotError::Input(format!(
            "tau must be positive, got {}",
            inst.tau
        )));
    }
    check_unit_rows(&inst.u, "source")?;
    check_unit_rows(&inst.v, "target")?;
    if inst.a.iter().any(|&x| !(x > F::zero())) {
        return Err(ScotError::Input(
            "row marginal must be strictly positive".into(),
        ));
    }
    let tol = F::from(1e-6).unwrap();
    let rows = inst.p.sum_axis(Axis(1));
    let cols = inst.p.sum_axis(Axis(0));
    for i in 0..n_s {
        if (rows[i] - inst.a[i]).abs() > tol {
            return Err(ScotError::Input(format!(
                "coupling row {i} sums to {} but the marginal says {}; \
                 the bound requires exact marginals",
                rows[i], inst.a[i]
            )));
        }
    }
    for j in 0..n_t {
        if (cols[j] - inst.b[j]).abs() > tol {
            return Err(ScotError::Input(format!(
                "coupling column {j} sums to {} but the marginal says {}",
                cols[j], inst.b[j]
            )));
        }
    }
    Ok(())
}

/// Checks the risk-transfer bound on one instance.
///
/// The contrastive loss follows the bound's own convention,
/// `l_i = -log[ sum_j P_ij e^{S_ij} / (a_i sum_k e^{S_ik}) ]` weighted by
/// `a_i`, which differs from the training loss by the `a_i` factor inside
/// the log. The inner-product bound keeps only the steps that survive
/// scrutiny: `E<u,v> >= tau log n_t - tau l_con - 1 - 1/(2 tau)`, clamped
/// at -1.
pub fn verify_bound<F: Scalar>(inst: &BoundInstance<F>) -> Result<BoundReport<F>> {
    validate_bound_instance(inst)?;
    let (n_s, n_t) = inst.p.dim();
    let tau = inst.tau;

    // S_ij = <u_i, v_j> / tau, row-max shifted inside both sums.
    let dots = inst.u.dot(&inst.v.t());
    let mut l_con = F::zero();
    for i in 0..n_s {
        let row = dots.row(i);
        let shift = row
            .iter()
            .map(|&x| x / tau)
            .fold(F::neg_infinity(), F::max);
        let mut num = F::zero();
        let mut den = F::zero();
        for j in 0..n_t {
            let e = (row[j] / tau - shift).exp();
            num += inst.p[[i, j]] * e;
            den += e;
        }
        let l_i = -(num / (inst.a[i] * den)).ln();
        l_con += inst.a[i] * l_i;
    }

    let e_uv = (&inst.p * &dots).sum();
    let half = F::from(0.5).unwrap();
    let m_raw = tau * F::from(n_t).unwrap().ln() - tau * l_con - F::one() - half / tau;
    let m_lower = m_raw.max(-F::one());

    let risk = |w: &Array1<F>, x: &Array2<F>, weights: &Array1<F>| -> F {
        let g = x.dot(&inst.g_weights);
        let h = x.dot(&inst.h_weights);
        let mut acc = F::zero();
        for i in 0..x.nrows() {
            acc += w[i] * (h[i] - g[i]).abs();
        }
        let _ = weights;
        acc
    };
    let r_s = risk(&inst.a, &inst.u, &inst.g_weights);
    let r_t = risk(&inst.b, &inst.v, &inst.g_weights);

    let l_g = inst.g_weights.iter().map(|&x| x * x).sum::<F>().sqrt();
    let l_h = inst.h_weights.iter().map(|&x| x * x).sum::<F>().sqrt();
    let two = F::from(2.0).unwrap();
    let gap = (two - two * m_lower).max(F::zero()).sqrt();
    let rhs = r_s + (l_h + l_g) * gap;
    let slack = F::from(1e-9).unwrap();

    Ok(BoundReport {
        lhs: r_t,
        rhs,
        l_con,
        m_lower,
        e_uv,
        holds: r_t <= rhs + slack,
        intermediate_holds: m_lower <= e_uv + slack,
    })
}

/// Draws one random bound instance: unit embeddings, strictly positive
/// random marginals, a tightly converged entropic coupling between them, and
/// random unit readout weights at a temperature from `{0.1, 0.5, 1}`.
pub fn random_bound_instance(seed: u64) -> Result<BoundInstance<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_s = rng.random_range(2..=12);
    let n_t = rng.random_range(2..=12);
    let d = rng.random_range(2..=6);

    let mut unit_rows = |n: usize, rng: &mut ChaCha8Rng| {
        let mut z = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        for mut row in z.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        z
    };
    let u = unit_rows(n_s, &mut rng);
    let v = unit_rows(n_t, &mut rng);

    let mut simplex = |n: usize, rng: &mut ChaCha8Rng| {
        let mut w = Array1::from_shape_fn(n, |_| rng.random::<f64>() + 0.05);
        let total = w.sum();
        w.mapv_inplace(|x| x / total);
        w
    };
    let a = simplex(n_s, &mut rng);
    let b = simplex(n_t, &mut rng);

    let c = sphere_cost(&u, &v);
    let config = SinkhornConfig {
        epsilon: 0.2,
        max_iters: 10_000,
        tol: 1e-10,
        marginal_mode: MarginalMode::Uniform,
        unbalanced_rho: None,
        log_domain: false,
        auto_log_fallback: true,
    };
    let coupling = sinkhorn_solve(&c, &config, Some(&a), Some(&b))?;

    let mut unit_vec = |rng: &mut ChaCha8Rng| {
        let mut w = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.mapv_inplace(|x| x / norm);
        w
    };
    let g_weights = unit_vec(&mut rng);
    let h_weights = unit_vec(&mut rng);
    let tau = [0.1, 0.5, 1.0][rng.random_range(0..3)];

    Ok(BoundInstance {
        u,
        v,
        a,
        b,
        p: coupling.p,
        tau,
        g_weights,
        h_weights,
    })
}

/// Verifies `count` random instances starting at `base_seed`, in parallel.
/// Reports come back in seed order regardless of thread count.
pub fn verify_bound_batch(count: usize, base_seed: u64) -> Result<Vec<BoundReport<f64>>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let inst = random_bound_instance(base_seed.wrapping_add(i as u64))?;
            verify_bound(&inst)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    fn random_design(seed: u64, n: usize, d: usize) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = Array1::from_shape_fn(n, |_| rng.random::<f64>() * 4.0 - 2.0);
        (z, y)
    }

    /// Independent dense solve by Gaussian elimination with partial
    /// pivoting, used as the oracle for the Cholesky path.
    fn gauss_solve(a: &Array2<f64>, rhs: &Array1<f64>) -> Array1<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut r = rhs.clone();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| m[[x, col]].abs().partial_cmp(&m[[y, col]].abs()).unwrap())
                .unwrap();
            if pivot != col {
                for j in 0..n {
                    let tmp = m[[col, j]];
                    m[[col, j]] = m[[pivot, j]];
                    m[[pivot, j]] = tmp;
                }
                r.swap(col, pivot);
            }
            for row in (col + 1)..n {
                let factor = m[[row, col]] / m[[col, col]];
                for j in col..n {
                    m[[row, j]] -= factor * m[[col, j]];
                }
                r[row] -= factor * r[col];
            }
        }
        let mut x = Array1::<f64>::zeros(n);
        for row in (0..n).rev() {
            let mut sum = r[row];
            for j in (row + 1)..n {
                sum -= m[[row, j]] * x[j];
            }
            x[row] = sum / m[[row, row]];
        }
        x
    }

    #[test]
    fn cholesky_agrees_with_elimination_oracle() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
            let mut a = b.t().dot(&b);
            for i in 0..4 {
                a[[i, i]] += 1.0;
            }
            let rhs = Array1::from_shape_fn(4, |_| rng.random::<f64>());
            let x1 = cholesky_solve(&a, &rhs).unwrap();
            let x2 = gauss_solve(&a, &rhs);
            for (u, v) in x1.iter().zip(x2.iter()) {
                assert_abs_diff_eq!(*u, *v, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(cholesky_solve(&a, &arr1(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn ridge_identity_design_limit() {
        let z = Array2::<f64>::eye(3);
        let y = arr1(&[1.0, 0.0, 0.0]);
        let model = ridge_fit(&z, &y, 1e-8, false).unwrap();
        assert_abs_diff_eq!(model.weights[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(model.weights[1], 0.0, epsilon = 1e-6);
        let pred = model.predict(&z).unwrap();
        assert_abs_diff_eq!(pred[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn ridge_constant_labels_fold_into_bias() {
        let (z, _) = random_design(3, 6, 3);
        let y = Array1::from_elem(6, 42.5);
        for alpha in [1e-3, 1.0, 100.0] {
            let model = ridge_fit(&z, &y, alpha, true).unwrap();
            for &w in model.weights.iter() {
                assert_abs_diff_eq!(w, 0.0, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(model.bias, 42.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn ridge_matches_normal_equation_oracle() {
        // 5x2 centered instance against the 2x2 closed-form inverse.
        let (z, y) = random_design(7, 5, 2);
        let alpha = 0.3;
        let model = ridge_fit(&z, &y, alpha, true).unwrap();

        let z_mean = z.mean_axis(Axis(0)).unwrap();
        let y_mean = y.sum() / 5.0;
        let zc = &z - &z_mean;
        let yc = y.mapv(|v| v - y_mean);
        let g = zc.t().dot(&zc);
        let (a, b, d) = (g[[0, 0]] + alpha, g[[0, 1]], g[[1, 1]] + alpha);
        let det = a * d - b * b;
        let rhs = zc.t().dot(&yc);
        let w0 = (d * rhs[0] - b * rhs[1]) / det;
        let w1 = (-b * rhs[0] + a * rhs[1]) / det;
        assert_abs_diff_eq!(model.weights[0], w0, epsilon = 1e-10);
        assert_abs_diff_eq!(model.weights[1], w1, epsilon = 1e-10);
    }

    #[test]
    fn ridge_training_error_monotone_in_alpha() {
        let (z, y) = random_design(11, 12, 4);
        let mut last = -1.0f64;
        for alpha in [1e-3, 1e-1, 10.0] {
            let model = ridge_fit(&z, &y, alpha, true).unwrap();
            let pred = model.predict(&z).unwrap();
            let mse = pred
                .iter()
                .zip(y.iter())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / 12.0;
            assert!(mse >= last - 1e-12, "alpha {alpha}: {mse} < {last}");
            last = mse;
        }
    }

    #[test]
    fn ridge_rejects_bad_inputs() {
        let (z, y) = random_design(1, 4, 2);
        assert!(ridge_fit(&z, &y, 0.0, true).is_err());
        let mut bad = z.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(ridge_fit(&bad, &y, 1.0, true).is_err());
        assert!(ridge_fit(&z, &arr1(&[1.0]), 1.0, true).is_err());
    }

    #[test]
    fn transfer_metrics_hand_values() {
        let model = RidgeModel {
            weights: arr1(&[1.0]),
            bias: 0.0,
            alpha: 1.0,
        };
        let z = arr2(&[[100.0], [200.0]]);
        let y = arr1(&[100.0, 200.0]);
        let m = transfer_metrics(&model, &z, &y).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.mape, 0.0);

        let z = arr2(&[[110.0], [180.0]]);
        let m = transfer_metrics(&model, &z, &y).unwrap();
        assert_abs_diff_eq!(m.mae, 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mape, 10.0, epsilon = 1e-12);
        assert_eq!(m.mape_excluded, 0);
    }

    #[test]
    fn transfer_metrics_zero_target_convention() {
        let model = RidgeModel {
            weights: arr1(&[1.0]),
            bias: 0.0,
            alpha: 1.0,
        };
        let z = arr2(&[[110.0], [5.0], [180.0]]);
        let y = arr1(&[100.0, 0.0, 200.0]);
        let m = transfer_metrics(&model, &z, &y).unwrap();
        // The zero target contributes |5| to MAE but is excluded from MAPE.
        assert_abs_diff_eq!(m.mae, 35.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mape, 10.0, epsilon = 1e-12);
        assert_eq!(m.mape_excluded, 1);

        let all_zero = arr1(&[0.0, 0.0, 0.0]);
        assert!(transfer_metrics(&model, &z, &all_zero).is_err());
    }

    #[test]
    fn matching_metrics_permutation_and_uniform() {
        let n = 4;
        // Permutation plan equal to the truth.
        let mut p = Array2::<f64>::zeros((n, n));
        let truth: Vec<Option<usize>> = vec![Some(2), Some(0), Some(3), Some(1)];
        for (i, t) in truth.iter().enumerate() {
            p[[i, t.unwrap()]] = 1.0;
        }
        let m = matching_metrics_from_pairs(&p, &truth).unwrap();
        assert_eq!(m.top1_acc, 1.0);
        assert_abs_diff_eq!(m.mean_true_mass_ratio, n as f64, epsilon = 1e-12);
        assert_eq!(m.ties, 0);

        // Uniform plan: no information, lift exactly 1, every row tied.
        let p = Array2::<f64>::from_elem((n, n), 0.25);
        let m = matching_metrics_from_pairs(&p, &truth).unwrap();
        assert_abs_diff_eq!(m.mean_true_mass_ratio, 1.0, epsilon = 1e-12);
        assert_eq!(m.ties, n);
    }

    #[test]
    fn matching_metrics_skips_dropped_pairs() {
        let p = arr2(&[[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]]);
        let truth = vec![Some(0), None, Some(1)];
        let m = matching_metrics_from_pairs(&p, &truth).unwrap();
        assert_eq!(m.matched_rows, 2);
        // Row 2 ties and resolves to column 0, missing its truth.
        assert_abs_diff_eq!(m.top1_acc, 0.5, epsilon = 1e-12);
        assert_eq!(m.ties, 1);

        assert!(matching_metrics_from_pairs(&p, &[None, None, None]).is_err());
        assert!(matching_metrics_from_pairs(&p, &[Some(5), None, None]).is_err());
    }

    fn diag_instance(seed: u64) -> BoundInstance<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (5, 3);
        let mut u = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        for mut row in u.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        let a = Array1::from_elem(n, 1.0 / n as f64);
        let mut p = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            p[[i, i]] = a[i];
        }
        let mut unit = |rng: &mut ChaCha8Rng| {
            let mut w = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.mapv_inplace(|x| x / norm);
            w
        };
        let g_weights = unit(&mut rng);
        let h_weights = unit(&mut rng);
        BoundInstance {
            v: u.clone(),
            u,
            b: a.clone(),
            a,
            p,
            tau: 0.5,
            g_weights,
            h_weights,
        }
    }

    #[test]
    fn bound_identical_readouts_give_zero_risks() {
        let mut inst = diag_instance(1);
        inst.h_weights = inst.g_weights.clone();
        let report = verify_bound(&inst).unwrap();
        assert_eq!(report.lhs, 0.0);
        assert!(report.holds);
    }

    #[test]
    fn bound_diagonal_self_coupling() {
        let inst = diag_instance(2);
        let report = verify_bound(&inst).unwrap();
        // Same support and weights on both sides: risks coincide and the
        // gap term keeps the bound slack.
        assert!(report.rhs >= report.lhs);
        assert!(report.holds);
        assert!(report.intermediate_holds);
        // For the diagonal self-coupling, E<u,v> = 1 exactly.
        assert_abs_diff_eq!(report.e_uv, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bound_rejects_marginal_violations() {
        let mut inst = diag_instance(3);
        inst.p[[0, 0]] += 1e-3;
        assert!(verify_bound(&inst).is_err());

        let mut inst = diag_instance(4);
        inst.u[[0, 0]] *= 1.5;
        assert!(verify_bound(&inst).is_err());
    }

    #[test]
    fn bound_holds_on_random_batch() {
        let reports = verify_bound_batch(100, 9000).unwrap();
        assert_eq!(reports.len(), 100);
        for (i, r) in reports.iter().enumerate() {
            assert!(r.holds, "instance {i}: lhs {} rhs {}", r.lhs, r.rhs);
            assert!(
                r.intermediate_holds,
                "instance {i}: m {} e_uv {}",
                r.m_lower, r.e_uv
            );
        }
    }

    #[test]
    fn bound_batch_is_deterministic() {
        let r1 = verify_bound_batch(10, 123).unwrap();
        let r2 = verify_bound_batch(10, 123).unwrap();
        for (a, b) in r1.iter().zip(r2.iter()) {
            assert_eq!(a.lhs, b.lhs);
            assert_eq!(a.rhs, b.rhs);
        }
    }
}
