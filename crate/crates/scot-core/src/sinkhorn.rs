//! Entropic optimal-transport solver.
//!
//! Builds the Gibbs kernel `K = exp(-C/eps)` and runs Sinkhorn-Knopp scaling
//! `u <- a ./ Kv`, `v <- b ./ K'u` (always ending on a `v` update), with three
//! variants behind one entry point:
//!
//! * balanced scaling on `K` (the default),
//! * KL-unbalanced scaling, where both updates are raised to `rho/(rho+eps)`,
//! * log-domain iterations on dual potentials via log-sum-exp, used when
//!   requested, when `eps` is small, or as an automatic fallback once the
//!   scaling form underflows.
//!
//! Also provides sharpness diagnostics (`q_max`, `q_ent`) over a coupling.

use crate::{Result, Scalar, ScotError};
use ndarray::{Array1, Array2};

/// Epsilon below which the scaling form is presumed to underflow and the
/// log-domain path is chosen up front.
pub const AUTO_LOG_EPSILON: f64 = 0.05;

/// How default marginals are built when none are passed explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalMode {
    /// `a = 1` and `b = 1`: the literal single-source iteration. Infeasible
    /// as a transport polytope when `n_s != n_t`; the solve then runs for the
    /// full iteration budget and reports the residual it reached.
    Ones,
    /// `a = 1/n_s`, `b = 1/n_t`: probability marginals.
    Uniform,
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct SinkhornConfig<F> {
    /// Entropic temperature, > 0.
    pub epsilon: F,
    /// Iteration budget T.
    pub max_iters: usize,
    /// Early-stop threshold on the max marginal residual; 0 disables.
    pub tol: F,
    pub marginal_mode: MarginalMode,
    /// KL marginal-relaxation strength; `None` means balanced.
    pub unbalanced_rho: Option<F>,
    /// Force log-domain iterations.
    pub log_domain: bool,
    /// Retry in log domain when the scaling form underflows instead of
    /// surfacing a stability error.
    pub auto_log_fallback: bool,
}

impl<F: Scalar> Default for SinkhornConfig<F> {
    fn default() -> Self {
        Self {
            epsilon: F::from(0.15).unwrap(),
            max_iters: 100,
            tol: F::from(1e-6).unwrap(),
            marginal_mode: MarginalMode::Ones,
            unbalanced_rho: None,
            log_domain: false,
            auto_log_fallback: true,
        }
    }
}

/// A transport plan with its scaling vectors and convergence metadata.
#[derive(Debug, Clone)]
pub struct Coupling<F> {
    /// Nonnegative plan, `n_s x n_t`.
    pub p: Array2<F>,
    /// Final row scaling (in log mode, `exp` of the row potential).
    pub u: Array1<F>,
    /// Final column scaling.
    pub v: Array1<F>,
    pub iters_used: usize,
    /// `max_i |(P 1)_i - a_i|` at the final iterate.
    pub row_residual: F,
    /// `max_j |(P' 1)_j - b_j|` at the final iterate.
    pub col_residual: F,
    pub total_mass: F,
}

/// Sharpness and marginal diagnostics of a coupling.
#[derive(Debug, Clone)]
pub struct CouplingDiagnostics<F> {
    pub row_marginals: Array1<F>,
    pub col_marginals: Array1<F>,
    /// Shannon entropy of each row after row normalization; zero rows get 0.
    pub row_entropies: Array1<F>,
    /// Shannon entropy of each column after column normalization.
    pub col_entropies: Array1<F>,
    /// Mean over rows of the largest row-normalized entry.
    pub q_max: F,
    /// Mean row entropy.
    pub q_ent: F,
    /// `q_ent / log(n_columns)`.
    pub q_ent_normalized: F,
    /// Number of all-zero rows (entropy-0 convention applied).
    pub zero_rows: usize,
}

/// `K_ij = exp(-C_ij / epsilon)`.
pub fn gibbs_kernel<F: Scalar>(c: &Array2<F>, epsilon: F) -> Result<Array2<F>> {
    if !(epsilon > F::zero()) {
        return Err(ScotError::Input(format!(
            "epsilon must be positive, got {}",
            epsilon
        )));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(ScotError::Input("cost matrix has non-finite entries".into()));
    }
    Ok(c.mapv(|x| (-x / epsilon).exp()))
}

fn resolve_marginal<F: Scalar>(
    given: Option<&Array1<F>>,
    mode: MarginalMode,
    n: usize,
    side: &str,
) -> Result<Array1<F>> {
    match given {
        Some(m) => {
            if m.len() != n {
                return Err(ScotError::Input(format!(
                    "{} marginal length {} does not match cost ({})",
                    side,
                    m.len(),
                    n
                )));
            }
            if m.iter().any(|x| !x.is_finite() || *x < F::zero()) {
                return Err(ScotError::Input(format!(
                    "{} marginal must be nonnegative and finite",
                    side
                )));
            }
            Ok(m.clone())
        }
        None => Ok(match mode {
            MarginalMode::Ones => Array1::from_elem(n, F::one()),
            MarginalMode::Uniform => Array1::from_elem(n, F::one() / F::from(n).unwrap()),
        }),
    }
}

/// Solves entropic OT between the rows and columns of `c`.
///
/// Explicit `a`, `b` override the marginals from `config.marginal_mode`.
/// In balanced mode explicitly given marginals must have equal total mass.
pub fn sinkhorn_solve<F: Scalar>(
    c: &Array2<F>,
    config: &SinkhornConfig<F>,
    a: Option<&Array1<F>>,
    b: Option<&Array1<F>>,
) -> Result<Coupling<F>> {
    if config.max_iters == 0 {
        return Err(ScotError::Input("max_iters must be at least 1".into()));
    }
    if let Some(rho) = config.unbalanced_rho {
        if !(rho > F::zero()) {
            return Err(ScotError::Input(format!(
                "unbalanced_rho must be positive, got {}",
                rho
            )));
        }
    }
    let (n_s, n_t) = c.dim();
    if n_s == 0 || n_t == 0 {
        return Err(ScotError::Input("cost matrix must be nonempty".into()));
    }
    let av = resolve_marginal(a, config.marginal_mode, n_s, "source")?;
    let bv = resolve_marginal(b, config.marginal_mode, n_t, "target")?;
    if config.unbalanced_rho.is_none() && a.is_some() && b.is_some() {
        let (sa, sb) = (av.sum(), bv.sum());
        let scale = sa.abs().max(sb.abs()).max(F::one());
        if (sa - sb).abs() > F::from(1e-8).unwrap() * scale {
            return Err(ScotError::Input(format!(
                "balanced mode needs equal marginal mass, got {} vs {}",
                sa, sb
            )));
        }
    }

    let use_log = config.log_domain || config.epsilon.to_f64().unwrap() < AUTO_LOG_EPSILON;
    if use_log {
        return solve_log(c, config, &av, &bv);
    }
    match solve_scaling(c, config, &av, &bv) {
        Err(ScotError::Stability(msg)) if config.auto_log_fallback => {
            let _ = msg;
            solve_log(c, config, &av, &bv)
        }
        other => other,
    }
}

fn solve_scaling<F: Scalar>(
    c: &Array2<F>,
    config: &SinkhornConfig<F>,
    a: &Array1<F>,
    b: &Array1<F>,
) -> Result<Coupling<F>> {
    let k = gibbs_kernel(c, config.epsilon)?;
    let stability_err = || {
        ScotError::Stability(
            "Gibbs kernel underflowed (cost range too wide for epsilon); \
             enable log_domain"
                .into(),
        )
    };
    for i in 0..k.nrows() {
        if k.row(i).iter().all(|&x| x == F::zero()) {
            return Err(stability_err());
        }
    }
    for j in 0..k.ncols() {
        if k.column(j).iter().all(|&x| x == F::zero()) {
            return Err(stability_err());
        }
    }

    let exponent = config
        .unbalanced_rho
        .map(|rho| rho / (rho + config.epsilon));
    let kt = k.t().to_owned();
    let mut u = Array1::<F>::from_elem(a.len(), F::one());
    let mut v = Array1::<F>::from_elem(b.len(), F::one());
    let mut iters_used = 0;
    let mut row_residual = F::infinity();
    let mut col_residual = F::infinity();

    for iter in 1..=config.max_iters {
        let kv = k.dot(&v);
        u = scaled_update(a, &kv, exponent);
        let ktu = kt.dot(&u);
        v = scaled_update(b, &ktu, exponent);
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(stability_err());
        }
        iters_used = iter;

        let kv2 = k.dot(&v);
        row_residual = max_abs_dev(&(&u * &kv2), a);
        col_residual = max_abs_dev(&(&v * &ktu), b);
        if config.tol > F::zero() && row_residual.max(col_residual) < config.tol {
            break;
        }
    }

    let mut p = k;
    for ((i, j), x) in p.indexed_iter_mut() {
        *x = *x * u[i] * v[j];
    }
    let total_mass = p.sum();
    Ok(Coupling {
        p,
        u,
        v,
        iters_used,
        row_residual,
        col_residual,
        total_mass,
    })
}

/// One scaling update `(m ./ denom) ^ exponent`; division by an underflowed
/// denominator produces `inf`, caught by the caller's finiteness check.
fn scaled_update<F: Scalar>(m: &Array1<F>, denom: &Array1<F>, exponent: Option<F>) -> Array1<F> {
    let ratio = m / denom;
    match exponent {
        None => ratio,
        Some(e) => ratio.mapv(|x| x.powf(e)),
    }
}

fn max_abs_dev<F: Scalar>(x: &Array1<F>, target: &Array1<F>) -> F {
    x.iter()
        .zip(target.iter())
        .map(|(p, t)| (*p - *t).abs())
        .fold(F::zero(), F::max)
}

/// Log-sum-exp over `logits + shift[j]` for one row.
fn lse_row<F: Scalar>(logits: &[F], shift: &Array1<F>) -> F {
    let mut m = F::neg_infinity();
    for (x, s) in logits.iter().zip(shift.iter()) {
        let t = *x + *s;
        if t > m {
            m = t;
        }
    }
    if m == F::neg_infinity() {
        return F::neg_infinity();
    }
    let sum: F = logits
        .iter()
        .zip(shift.iter())
        .map(|(x, s)| (*x + *s - m).exp())
        .sum();
    m + sum.ln()
}

fn solve_log<F: Scalar>(
    c: &Array2<F>,
    config: &SinkhornConfig<F>,
    a: &Array1<F>,
    b: &Array1<F>,
) -> Result<Coupling<F>> {
    if c.iter().any(|x| !x.is_finite()) {
        return Err(ScotError::Input("cost matrix has non-finite entries".into()));
    }
    if !(config.epsilon > F::zero()) {
        return Err(ScotError::Input(format!(
            "epsilon must be positive, got {}",
            config.epsilon
        )));
    }
    let (n_s, n_t) = c.dim();
    let eps = config.epsilon;
    // Same fixed point as the scaling form, on potentials phi = log u,
    // psi = log v over the log-kernel -C/eps.
    let l = c.mapv(|x| -x / eps);
    let lt = l.t().to_owned();
    let exponent = config.unbalanced_rho.map(|rho| rho / (rho + eps));
    let ln_a = a.mapv(F::ln);
    let ln_b = b.mapv(F::ln);

    let mut phi = Array1::<F>::zeros(n_s);
    let mut psi = Array1::<F>::zeros(n_t);
    let mut iters_used = 0;
    let mut row_residual = F::infinity();
    let mut col_residual = F::infinity();

    let row_slice = |m: &Array2<F>, i: usize| m.row(i).to_vec();
    for iter in 1..=config.max_iters {
        for i in 0..n_s {
            let lse = lse_row(&row_slice(&l, i), &psi);
            let raw = ln_a[i] - lse;
            phi[i] = match exponent {
                None => raw,
                Some(e) => e * raw,
            };
        }
        let mut col_lse = Array1::<F>::zeros(n_t);
        for j in 0..n_t {
            let lse = lse_row(&row_slice(&lt, j), &phi);
            col_lse[j] = lse;
            let raw = ln_b[j] - lse;
            psi[j] = match exponent {
                None => raw,
                Some(e) => e * raw,
            };
        }
        iters_used = iter;

        let mut row_marg = Array1::<F>::zeros(n_s);
        for i in 0..n_s {
            row_marg[i] = (phi[i] + lse_row(&row_slice(&l, i), &psi)).exp();
        }
        let col_marg =
            Array1::from_shape_fn(n_t, |j| (psi[j] + col_lse[j]).exp());
        row_residual = max_abs_dev(&row_marg, a);
        col_residual = max_abs_dev(&col_marg, b);
        if config.tol > F::zero() && row_residual.max(col_residual) < config.tol {
            break;
        }
    }

    let mut p = Array2::<F>::zeros((n_s, n_t));
    for ((i, j), x) in p.indexed_iter_mut() {
        *x = (l[[i, j]] + phi[i] + psi[j]).exp();
    }
    let total_mass = p.sum();
    Ok(Coupling {
        p,
        u: phi.mapv(F::exp),
        v: psi.mapv(F::exp),
        iters_used,
        row_residual,
        col_residual,
        total_mass,
    })
}

/// Entropy of a nonnegative slice after normalization; 0 for a zero slice.
fn normalized_entropy<F: Scalar>(xs: &[F]) -> (F, bool) {
    let total: F = xs.iter().copied().sum();
    if total <= F::zero() {
        return (F::zero(), true);
    }
    let mut h = F::zero();
    for &x in xs {
        if x > F::zero() {
            let p = x / total;
            h -= p * p.ln();
        }
    }
    (h, false)
}

/// Computes marginal and sharpness diagnostics for a coupling.
///
/// Entropies use row/column-normalized distributions. All-zero rows take the
/// entropy-0 convention (counted in `zero_rows`) and contribute 1 to `q_max`,
/// consistent with a degenerate one-hot row.
pub fn coupling_diagnostics<F: Scalar>(p: &Array2<F>) -> Result<CouplingDiagnostics<F>> {
    let (n_s, n_t) = p.dim();
    if n_s == 0 || n_t == 0 {
        return Err(ScotError::Input("coupling must be nonempty".into()));
    }
    if p.iter().any(|x| !x.is_finite() || *x < F::zero()) {
        return Err(ScotError::Input(
            "coupling must be nonnegative and finite".into(),
        ));
    }
    if p.sum() <= F::zero() {
        return Err(ScotError::Input("coupling is identically zero".into()));
    }

    let row_marginals = p.sum_axis(ndarray::Axis(1));
    let col_marginals = p.sum_axis(ndarray::Axis(0));
    let mut row_entropies = Array1::<F>::zeros(n_s);
    let mut col_entropies = Array1::<F>::zeros(n_t);
    let mut zero_rows = 0usize;
    let mut q_max_sum = F::zero();
    for i in 0..n_s {
        let row = p.row(i).to_vec();
        let (h, zero) = normalized_entropy(&row);
        row_entropies[i] = h;
        if zero {
            zero_rows += 1;
            q_max_sum += F::one();
        } else {
            let m = row.iter().copied().fold(F::zero(), F::max);
            q_max_sum += m / row_marginals[i];
        }
    }
    for j in 0..n_t {
        let col = p.column(j).to_vec();
        col_entropies[j] = normalized_entropy(&col).0;
    }
    let nf = F::from(n_s).unwrap();
    let q_max = q_max_sum / nf;
    let q_ent = row_entropies.sum() / nf;
    let q_ent_normalized = if n_t > 1 {
        q_ent / F::from(n_t).unwrap().ln()
    } else {
        F::zero()
    };
    Ok(CouplingDiagnostics {
        row_marginals,
        col_marginals,
        row_entropies,
        col_entropies,
        q_max,
        q_ent,
        q_ent_normalized,
        zero_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_cfg(epsilon: f64) -> SinkhornConfig<f64> {
        SinkhornConfig {
            epsilon,
            marginal_mode: MarginalMode::Uniform,
            ..SinkhornConfig::default()
        }
    }

    fn random_cost(seed: u64, n_s: usize, n_t: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n_s, n_t), |_| rng.random::<f64>() * 2.0)
    }

    #[test]
    fn gibbs_kernel_examples() {
        let k = gibbs_kernel(&Array2::<f64>::zeros((2, 3)), 0.7).unwrap();
        assert!(k.iter().all(|&x| x == 1.0));

        let k = gibbs_kernel(&arr2(&[[0.5]]), 0.5).unwrap();
        assert_abs_diff_eq!(k[[0, 0]], (-1.0f64).exp(), epsilon = 1e-15);

        let k = gibbs_kernel(&arr2(&[[0.0, 1.0], [1.0, 0.0]]), 0.5).unwrap();
        let e2 = (-2.0f64).exp();
        assert_eq!(k[[0, 0]], 1.0);
        assert_abs_diff_eq!(k[[0, 1]], e2, epsilon = 1e-15);
        assert_abs_diff_eq!(k[[1, 0]], e2, epsilon = 1e-15);

        assert!(gibbs_kernel(&arr2(&[[1.0]]), 0.0).is_err());
        assert!(gibbs_kernel(&arr2(&[[f64::NAN]]), 1.0).is_err());
    }

    #[test]
    fn constant_cost_gives_product_coupling() {
        let c = Array2::<f64>::from_elem((3, 4), 0.7);
        let coupling = sinkhorn_solve(&c, &uniform_cfg(0.3), None, None).unwrap();
        for x in coupling.p.iter() {
            assert_abs_diff_eq!(*x, 1.0 / 12.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_two_by_two_closed_form() {
        // Scaling fixed point with C = [[0,1],[1,0]], eps = 1, uniform
        // marginals: P = 1/(2(1+e^-1)) * [[1, e^-1], [e^-1, 1]].
        let c = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let coupling = sinkhorn_solve(&c, &uniform_cfg(1.0), None, None).unwrap();
        let p11 = 1.0 / (2.0 * (1.0 + (-1.0f64).exp()));
        let p12 = (-1.0f64).exp() / (2.0 * (1.0 + (-1.0f64).exp()));
        assert_abs_diff_eq!(coupling.p[[0, 0]], p11, epsilon = 1e-9);
        assert_abs_diff_eq!(coupling.p[[0, 1]], p12, epsilon = 1e-9);
        assert_abs_diff_eq!(coupling.p[[1, 0]], p12, epsilon = 1e-9);
        assert_abs_diff_eq!(coupling.p[[1, 1]], p11, epsilon = 1e-9);
        assert!((p11 - 0.36553).abs() < 1e-4);
        assert!((p12 - 0.13447).abs() < 1e-4);
    }

    /// Exact OT value over permutation couplings of a square instance with
    /// uniform marginals; valid because such instances have a permutation
    /// optimum.
    fn brute_force_ot(c: &Array2<f64>) -> f64 {
        use itertools::Itertools;
        let n = c.nrows();
        (0..n)
            .permutations(n)
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| c[[i, j]])
                    .sum::<f64>()
                    / n as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn small_epsilon_matches_brute_force() {
        for seed in 0..3 {
            let c = random_cost(seed, 5, 5);
            let mut cfg = uniform_cfg(0.01);
            cfg.log_domain = true;
            cfg.max_iters = 2000;
            cfg.tol = 1e-10;
            let coupling = sinkhorn_solve(&c, &cfg, None, None).unwrap();
            let value: f64 = (&coupling.p * &c).sum();
            let exact = brute_force_ot(&c);
            assert!(
                (value - exact).abs() <= 0.02 * exact.abs(),
                "seed {}: entropic {} vs exact {}",
                seed,
                value,
                exact
            );
        }
    }

    #[test]
    fn balanced_converges_and_log_agrees() {
        for seed in 0..5 {
            let c = random_cost(seed, 17, 11);
            let cfg = uniform_cfg(0.2);
            let scaled = sinkhorn_solve(&c, &cfg, None, None).unwrap();
            assert!(scaled.row_residual.max(scaled.col_residual) < 1e-6);
            assert_abs_diff_eq!(scaled.total_mass, 1.0, epsilon = 1e-6);

            let mut log_cfg = cfg.clone();
            log_cfg.log_domain = true;
            let logged = sinkhorn_solve(&c, &log_cfg, None, None).unwrap();
            for (a, b) in scaled.p.iter().zip(logged.p.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn ones_mode_square_matches_uniform_shape() {
        let c = random_cost(11, 6, 6);
        let ones = sinkhorn_solve(&c, &SinkhornConfig::default(), None, None).unwrap();
        let unif = sinkhorn_solve(&c, &uniform_cfg(0.15), None, None).unwrap();
        // Ones marginals carry n times the mass of probability marginals.
        for (a, b) in ones.p.iter().zip(unif.p.iter()) {
            assert_abs_diff_eq!(*a, b * 6.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn rectangular_ones_mode_runs_full_budget() {
        let c = random_cost(3, 8, 5);
        let coupling = sinkhorn_solve(&c, &SinkhornConfig::default(), None, None).unwrap();
        assert_eq!(coupling.iters_used, 100);
        assert!(coupling.p.iter().all(|x| x.is_finite() && *x >= 0.0));
        // No coupling can satisfy both all-ones marginals when n_s != n_t.
        assert!(coupling.row_residual.max(coupling.col_residual) > 1e-3);
    }

    #[test]
    fn unbalanced_relaxes_mass_while_balanced_holds() {
        // Hub-shaped instance: many regions against few prototypes.
        let c = random_cost(5, 40, 8);
        let a = Array1::from_elem(40, 1.0 / 40.0);
        let b = Array1::from_elem(8, 1.0 / 8.0);

        let balanced = sinkhorn_solve(&c, &uniform_cfg(0.15), Some(&a), Some(&b)).unwrap();
        assert_abs_diff_eq!(balanced.total_mass, 1.0, epsilon = 1e-6);

        let mut cfg = uniform_cfg(0.15);
        cfg.unbalanced_rho = Some(0.3);
        let unbalanced = sinkhorn_solve(&c, &cfg, Some(&a), Some(&b)).unwrap();
        assert!(
            (unbalanced.total_mass - 1.0).abs() > 0.05,
            "unbalanced mass stayed at {}",
            unbalanced.total_mass
        );
    }

    #[test]
    fn explicit_unequal_masses_rejected_in_balanced_mode() {
        let c = random_cost(0, 3, 3);
        let a = Array1::from_elem(3, 1.0);
        let b = Array1::from_elem(3, 0.5);
        assert!(matches!(
            sinkhorn_solve(&c, &uniform_cfg(0.2), Some(&a), Some(&b)),
            Err(ScotError::Input(_))
        ));
    }

    #[test]
    fn underflow_errors_in_strict_mode_and_recovers_with_fallback() {
        // Costs spanning hundreds of epsilons: exp underflows to a zero row.
        let c = arr2(&[[0.0, 0.1], [900.0, 900.0]]);
        let mut strict = uniform_cfg(0.5);
        strict.auto_log_fallback = false;
        assert!(matches!(
            sinkhorn_solve(&c, &strict, None, None),
            Err(ScotError::Stability(_))
        ));

        let mut fallback = strict.clone();
        fallback.auto_log_fallback = true;
        let coupling = sinkhorn_solve(&c, &fallback, None, None).unwrap();
        assert!(coupling.p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(coupling.total_mass, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn tiny_epsilon_switches_to_log_domain() {
        let c = random_cost(2, 7, 7);
        let cfg = uniform_cfg(0.01);
        assert!(!cfg.log_domain);
        let coupling = sinkhorn_solve(&c, &cfg, None, None).unwrap();
        assert!(coupling.p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn mean_row_entropy_nondecreasing_in_epsilon() {
        for seed in 0..10 {
            let c = random_cost(100 + seed, 9, 9);
            let mut last = -1.0;
            for eps in [0.05, 0.15, 0.5, 1.0] {
                let mut cfg = uniform_cfg(eps);
                cfg.max_iters = 500;
                let coupling = sinkhorn_solve(&c, &cfg, None, None).unwrap();
                let d = coupling_diagnostics(&coupling.p).unwrap();
                assert!(
                    d.q_ent >= last - 1e-9,
                    "seed {}: entropy decreased from {} to {} at eps {}",
                    seed,
                    last,
                    d.q_ent,
                    eps
                );
                last = d.q_ent;
            }
        }
    }

    #[test]
    fn entropic_optimality_certificate() {
        // F(P) = <P,C> - eps H(P) cannot be improved by any feasible
        // perturbation (zero row and column sums) keeping P positive.
        let c = random_cost(42, 4, 4);
        let mut cfg = uniform_cfg(0.3);
        cfg.max_iters = 5000;
        cfg.tol = 1e-13;
        let coupling = sinkhorn_solve(&c, &cfg, None, None).unwrap();
        let eps = 0.3;
        let objective = |p: &Array2<f64>| -> f64 {
            let mut f = 0.0;
            for (x, cost) in p.iter().zip(c.iter()) {
                f += x * cost;
                if *x > 0.0 {
                    f += eps * x * x.ln();
                }
            }
            f
        };
        let base = objective(&coupling.p);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let i0 = rng.random_range(0..4);
            let i1 = (i0 + 1 + rng.random_range(0..3)) % 4;
            let j0 = rng.random_range(0..4);
            let j1 = (j0 + 1 + rng.random_range(0..3)) % 4;
            let t = 1e-4 * rng.random::<f64>();
            let mut p = coupling.p.clone();
            p[[i0, j0]] += t;
            p[[i1, j1]] += t;
            p[[i0, j1]] -= t;
            p[[i1, j0]] -= t;
            assert!(p.iter().all(|&x| x > 0.0), "perturbation left the cone");
            assert!(objective(&p) >= base - 1e-8);
        }
    }

    #[test]
    fn diagnostics_identity_and_uniform() {
        let p = Array2::<f64>::eye(4) * 0.25;
        let d = coupling_diagnostics(&p).unwrap();
        assert_eq!(d.q_max, 1.0);
        assert_eq!(d.q_ent, 0.0);
        assert_eq!(d.q_ent_normalized, 0.0);
        assert!(d.row_entropies.iter().all(|&h| h == 0.0));
        assert_eq!(d.zero_rows, 0);

        let p = Array2::<f64>::from_elem((6, 8), 1.0 / 48.0);
        let d = coupling_diagnostics(&p).unwrap();
        assert_abs_diff_eq!(d.q_max, 1.0 / 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.q_ent, (8.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.q_ent_normalized, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn diagnostics_zero_row_convention() {
        let mut p = Array2::<f64>::from_elem((3, 4), 0.1);
        p.row_mut(1).fill(0.0);
        let d = coupling_diagnostics(&p).unwrap();
        assert_eq!(d.zero_rows, 1);
        assert_eq!(d.row_entropies[1], 0.0);
        assert_eq!(d.row_marginals[1], 0.0);

        assert!(coupling_diagnostics(&Array2::<f64>::zeros((2, 2))).is_err());
    }

    #[test]
    fn diagnostics_effective_count_reading() {
        // q_ent_normalized ~= 0.4 over K columns means exp(q_ent) ~= K^0.4.
        let k = 32usize;
        let q_ent = 0.4 * (k as f64).ln();
        assert_abs_diff_eq!(q_ent.exp(), (k as f64).powf(0.4), epsilon = 1e-9);
        assert!((q_ent.exp() - 4.0).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn solver_output_is_nonnegative_and_marginal_consistent(
            seed in 0u64..500, n_s in 2usize..8, n_t in 2usize..8
        ) {
            let c = random_cost(seed, n_s, n_t);
            let coupling = sinkhorn_solve(&c, &uniform_cfg(0.25), None, None).unwrap();
            prop_assert!(coupling.p.iter().all(|&x| x >= 0.0 && x.is_finite()));
            prop_assert!(coupling.row_residual < 1e-6);
            prop_assert!(coupling.col_residual < 1e-6);
            prop_assert!((coupling.total_mass - 1.0).abs() < 1e-6);
        }
    }
}
