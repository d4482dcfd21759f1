//! Cross-city alignment losses over a transported coupling.
//!
//! Embeddings are projected to the unit sphere, paired by Euclidean cost
//! `C_ij = ||zs_i - zt_j||`, and coupled with the entropic OT solver. Two
//! losses read off the coupling: the expected transport cost `L_OT` and a
//! coupling-weighted contrastive ratio `L_Con`, combined as
//! `L_align = L_OT + eta * L_Con`.
//!
//! Gradient convention: the coupling `P` is a constant during
//! differentiation (the envelope view of the regularized transport value);
//! gradients flow through the cost, the similarities, and the row
//! normalization only. Nothing differentiates through the Sinkhorn loop.

use crate::sinkhorn::{sinkhorn_solve, Coupling, SinkhornConfig};
use crate::{Result, Scalar, ScotError};
use ndarray::Array2;

/// Weights and solver settings for one alignment evaluation.
#[derive(Debug, Clone)]
pub struct AlignConfig<F> {
    /// Contrastive weight eta, >= 0.
    pub eta: F,
    /// Similarity temperature tau, > 0.
    pub tau: F,
    pub sinkhorn: SinkhornConfig<F>,
}

impl<F: Scalar> Default for AlignConfig<F> {
    fn default() -> Self {
        Self {
            eta: F::from(0.5).unwrap(),
            tau: F::from(0.1).unwrap(),
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl<F: Scalar> AlignConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > F::zero()) || !self.tau.is_finite() {
            return Err(ScotError::Input(format!(
                "tau must be a positive finite temperature, got {}",
                self.tau
            )));
        }
        if self.eta < F::zero() || !self.eta.is_finite() {
            return Err(ScotError::Input(format!(
                "eta must be nonnegative and finite, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// One alignment evaluation: losses, the coupling behind them, and gradients
/// with respect to the raw (unnormalized) embeddings.
#[derive(Debug, Clone)]
pub struct AlignResult<F> {
    pub l_ot: F,
    pub l_con: F,
    /// `l_ot + eta * l_con`, by construction.
    pub l_align: F,
    pub coupling: Coupling<F>,
    pub grad_zs: Array2<F>,
    pub grad_zt: Array2<F>,
    /// Coupling rows with zero mass, skipped by the contrastive term.
    pub skipped_rows: usize,
}

/// Contrastive loss value with gradients taken at the normalized embeddings.
#[derive(Debug, Clone)]
pub struct ContrastiveResult<F> {
    pub loss: F,
    pub grad_zs_norm: Array2<F>,
    pub grad_zt_norm: Array2<F>,
    pub skipped_rows: usize,
}

/// Row-normalizes `z` onto the unit sphere; `side` names the city in errors.
pub(crate) fn normalize_rows<F: Scalar>(z: &Array2<F>, side: &str) -> Result<Array2<F>> {
    let floor = F::from(1e-12).unwrap();
    let mut out = z.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
        if !norm.is_finite() || norm <= floor {
            return Err(ScotError::Input(format!(
                "{side} region {i} has zero or non-finite embedding norm; \
                 cannot project onto the unit sphere"
            )));
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(out)
}

/// Unit-sphere pairwise cost: `C_ij = ||zs_i - zt_j|| = sqrt(2 - 2 cos)`,
/// so every entry lies in `[0, 2]`. Returns the cost along with both
/// row-normalized embeddings.
pub fn cost_matrix<F: Scalar>(
    zs: &Array2<F>,
    zt: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>, Array2<F>)> {
    if zs.nrows() == 0 || zt.nrows() == 0 {
        return Err(ScotError::Input("embeddings must have at least one row".into()));
    }
    if zs.ncols() != zt.ncols() || zs.ncols() == 0 {
        return Err(ScotError::Input(format!(
            "embedding dimensions must match and be nonzero, got {} and {}",
            zs.ncols(),
            zt.ncols()
        )));
    }
    let zs_norm = normalize_rows(zs, "source")?;
    let zt_norm = normalize_rows(zt, "target")?;
    Ok((sphere_cost(&zs_norm, &zt_norm), zs_norm, zt_norm))
}

/// Pairwise Euclidean cost between two unit-row matrices.
pub(crate) fn sphere_cost<F: Scalar>(zs_norm: &Array2<F>, zt_norm: &Array2<F>) -> Array2<F> {
    let two = F::from(2.0).unwrap();
    // max(0, .) absorbs the -1e-16 roundoff of a perfectly aligned pair.
    zs_norm
        .dot(&zt_norm.t())
        .mapv(|cos| (two - two * cos).max(F::zero()).sqrt())
}

/// `L_OT = <P, C> / min(n_s, n_t)`.
pub fn ot_loss<F: Scalar>(coupling: &Coupling<F>, c: &Array2<F>) -> Result<F> {
    let (n_s, n_t) = c.dim();
    if coupling.p.dim() != c.dim() {
        return Err(ScotError::Input(format!(
            "coupling is {:?} but cost is {:?}",
            coupling.p.dim(),
            c.dim()
        )));
    }
    if n_s == 0 || n_t == 0 {
        return Err(ScotError::Input("cost matrix must be nonempty".into()));
    }
    let minf = F::from(n_s.min(n_t)).unwrap();
    Ok((&coupling.p * c).sum() / minf)
}

/// Coupling-weighted contrastive loss
/// `L_Con = -(1/n_s) sum_i log( sum_j P_ij e^{S_ij} / sum_j e^{S_ij} )`
/// with `S_ij = zs_i . zt_j / tau`, evaluated with row-max shifts and a
/// `1e-30` floor inside the log.
///
/// `P` is treated as a constant; the returned gradients are with respect to
/// the (normalized) embeddings through `S` only. Rows of `P` with zero mass
/// contribute nothing and are counted in `skipped_rows`; a coupling whose
/// rows are all empty is reported as a stability failure.
pub fn contrastive_loss<F: Scalar>(
    p: &Array2<F>,
    zs_norm: &Array2<F>,
    zt_norm: &Array2<F>,
    tau: F,
) -> Result<ContrastiveResult<F>> {
    let (n_s, n_t) = p.dim();
    if zs_norm.nrows() != n_s || zt_norm.nrows() != n_t || zs_norm.ncols() != zt_norm.ncols() {
        return Err(ScotError::Input(format!(
            "shape mismatch: coupling {:?}, source {:?}, target {:?}",
            p.dim(),
            zs_norm.dim(),
            zt_norm.dim()
        )));
    }
    if !(tau > F::zero()) {
        return Err(ScotError::Input(format!("tau must be positive, got {tau}")));
    }
    if p.iter().any(|&x| x < F::zero() || !x.is_finite()) {
        return Err(ScotError::Input(
            "coupling must be nonnegative and finite".into(),
        ));
    }

    let s = zs_norm.dot(&zt_norm.t()).mapv(|x| x / tau);
    let floor = F::from(1e-30).unwrap();
    let mut loss = F::zero();
    let mut ds = Array2::<F>::zeros((n_s, n_t));
    let mut skipped = 0usize;
    for i in 0..n_s {
        if p.row(i).sum() <= F::zero() {
            skipped += 1;
            continue;
        }
        let srow = s.row(i);
        let shift = srow.iter().copied().fold(F::neg_infinity(), F::max);
        let mut den = F::zero();
        let mut num = F::zero();
        for j in 0..n_t {
            let e = (srow[j] - shift).exp();
            den += e;
            num += p[[i, j]] * e;
        }
        let rho = num / den;
        loss -= (rho + floor).ln();
        // d(-log(rho + floor))/dS_ij = (rho q_ij - w_ij)/(rho + floor) with
        // q the row softmax and w the P-weighted row softmax.
        let inv = (rho + floor).recip();
        for j in 0..n_t {
            let e = (srow[j] - shift).exp();
            let q = e / den;
            let w = p[[i, j]] * e / den;
            ds[[i, j]] = (rho * q - w) * inv;
        }
    }
    if skipped == n_s {
        return Err(ScotError::Stability(
            "every coupling row has zero mass; contrastive ratio is undefined".into(),
        ));
    }

    let nf = F::from(n_s).unwrap();
    loss /= nf;
    ds.mapv_inplace(|x| x / (nf * tau));
    let grad_zs_norm = ds.dot(zt_norm);
    let grad_zt_norm = ds.t().dot(zs_norm);
    Ok(ContrastiveResult {
        loss,
        grad_zs_norm,
        grad_zt_norm,
        skipped_rows: skipped,
    })
}

/// `d L_OT / d zs_i = sum_j (P_ij / min)(zs_i - zt_j)/C_ij` and its mirror
/// for the target side, at the normalized embeddings with `P` held constant.
/// Coincident pairs (`C ~ 0`) have no direction and contribute nothing.
pub(crate) fn ot_gradient_wrt_normalized<F: Scalar>(
    p: &Array2<F>,
    c: &Array2<F>,
    zs_norm: &Array2<F>,
    zt_norm: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let (n_s, n_t) = c.dim();
    let d = zs_norm.ncols();
    let minf = F::from(n_s.min(n_t)).unwrap();
    let guard = F::from(1e-12).unwrap();
    let mut g_s = Array2::<F>::zeros(zs_norm.dim());
    let mut g_t = Array2::<F>::zeros(zt_norm.dim());
    for i in 0..n_s {
        for j in 0..n_t {
            let cij = c[[i, j]];
            if cij < guard {
                continue;
            }
            let w = p[[i, j]] / (minf * cij);
            for k in 0..d {
                let diff = w * (zs_norm[[i, k]] - zt_norm[[j, k]]);
                g_s[[i, k]] += diff;
                g_t[[j, k]] -= diff;
            }
        }
    }
    (g_s, g_t)
}

/// Pulls a gradient at the unit-sphere embeddings back to the raw ones:
/// `g_raw = (g - (g . zn) zn) / ||z||` per row, the Jacobian of `z / ||z||`.
pub(crate) fn chain_normalization<F: Scalar>(
    raw: &Array2<F>,
    unit: &Array2<F>,
    grad_unit: &Array2<F>,
) -> Array2<F> {
    let mut out = Array2::<F>::zeros(raw.dim());
    for i in 0..raw.nrows() {
        let norm = raw.row(i).iter().map(|&x| x * x).sum::<F>().sqrt();
        let g = grad_unit.row(i);
        let zn = unit.row(i);
        let proj = g.dot(&zn);
        for k in 0..raw.ncols() {
            out[[i, k]] = (g[k] - proj * zn[k]) / norm;
        }
    }
    out
}

/// Complete alignment pass: cost, coupling, both losses, and gradients with
/// respect to the raw embeddings.
pub fn align_step<F: Scalar>(
    zs: &Array2<F>,
    zt: &Array2<F>,
    config: &AlignConfig<F>,
) -> Result<AlignResult<F>> {
    config.validate()?;
    let (c, zs_norm, zt_norm) = cost_matrix(zs, zt)?;
    let coupling = sinkhorn_solve(&c, &config.sinkhorn, None, None)?;
    let l_ot = ot_loss(&coupling, &c)?;
    let con = contrastive_loss(&coupling.p, &zs_norm, &zt_norm, config.tau)?;
    let l_con = con.loss;
    let l_align = l_ot + config.eta * l_con;

    let (g_ot_s, g_ot_t) = ot_gradient_wrt_normalized(&coupling.p, &c, &zs_norm, &zt_norm);
    let gn_s = &g_ot_s + &con.grad_zs_norm.mapv(|x| x * config.eta);
    let gn_t = &g_ot_t + &con.grad_zt_norm.mapv(|x| x * config.eta);
    let grad_zs = chain_normalization(zs, &zs_norm, &gn_s);
    let grad_zt = chain_normalization(zt, &zt_norm, &gn_t);

    Ok(AlignResult {
        l_ot,
        l_con,
        l_align,
        coupling,
        grad_zs,
        grad_zt,
        skipped_rows: con.skipped_rows,
    })
}
