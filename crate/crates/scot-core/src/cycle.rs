//! Cross-attention cycle-reconstruction regularizer.
//!
//! Two attention maps are built from shared query/key projections,
//! `A = rowsoftmax((Zq Wq')(Zk Wk')' / sqrt(d))`, one per direction. Routing
//! source mass to the target and back should come home:
//! `l_cyc = ||A_st A_ts - I||_F^2`, optionally divided by `n^2`. An entropy
//! penalty `r_ent` on the forward map discourages diffuse attention rows,
//! giving `l_rec = l_cyc + beta * r_ent`. The two-sided mode adds the
//! reverse-direction cycle (each term normalized by its own identity size
//! when normalization is on); the entropy term always reads the forward map.
//!
//! All gradients are exact backprop through both softmaxes and every matrix
//! product.

use crate::{Result, Scalar, ScotError};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Which cycle terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleMode {
    /// Source -> target -> source only.
    OneSided,
    /// Both round trips.
    TwoSided,
}

/// Learnable attention projections plus the regularizer's constants.
#[derive(Debug, Clone)]
pub struct CycleParams<F> {
    /// `d x d` query projection.
    pub wq: Array2<F>,
    /// `d x d` key projection.
    pub wk: Array2<F>,
    /// Entropy-penalty weight, >= 0.
    pub beta: F,
    /// Floor inside the entropy log.
    pub delta: F,
    pub mode: CycleMode,
    /// Divide each cycle term by the square of its identity size.
    pub normalize_by_n2: bool,
}

impl<F: Scalar> CycleParams<F> {
    /// Near-identity projections: `I + N(0, 0.01^2)` keeps early attention
    /// close to raw dot-product matching.
    pub fn init<R: Rng>(
        d: usize,
        beta: F,
        mode: CycleMode,
        normalize_by_n2: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d < 2 {
            return Err(ScotError::Input(format!(
                "attention projections need d >= 2, got {d}"
            )));
        }
        if beta < F::zero() || !beta.is_finite() {
            return Err(ScotError::Input(format!(
                "beta must be nonnegative and finite, got {beta}"
            )));
        }
        let std = F::from(0.01).unwrap();
        let mut noisy = || {
            let mut w = Array2::from_shape_fn((d, d), |_| {
                let g: f64 = rng.sample(StandardNormal);
                std * F::from(g).unwrap()
            });
            for i in 0..d {
                w[[i, i]] += F::one();
            }
            w
        };
        Ok(Self {
            wq: noisy(),
            wk: noisy(),
            beta,
            delta: F::from(1e-8).unwrap(),
            mode,
            normalize_by_n2,
        })
    }
}

/// Losses and gradients of one cycle evaluation. Gradients are of `l_rec`.
#[derive(Debug, Clone)]
pub struct CycleResult<F> {
    pub l_cyc: F,
    pub r_ent: F,
    /// `l_cyc + beta * r_ent`.
    pub l_rec: F,
    pub grad_zs: Array2<F>,
    pub grad_zt: Array2<F>,
    pub grad_wq: Array2<F>,
    pub grad_wk: Array2<F>,
}

struct AttentionCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    a: Array2<F>,
}

fn attention_forward<F: Scalar>(
    zq: &Array2<F>,
    zk: &Array2<F>,
    wq: &Array2<F>,
    wk: &Array2<F>,
) -> AttentionCache<F> {
    let d = zq.ncols();
    let sqrt_d = F::from(d).unwrap().sqrt();
    let q = zq.dot(&wq.t());
    let k = zk.dot(&wk.t());
    let logits = q.dot(&k.t()).mapv(|x| x / sqrt_d);
    let mut a = logits;
    for mut row in a.rows_mut() {
        let shift = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|x| (x - shift).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    AttentionCache { q, k, a }
}

/// Backprop of one attention map. Takes `dL/dA` and returns gradients with
/// respect to the query/key inputs and the shared projections.
fn attention_backward<F: Scalar>(
    cache: &AttentionCache<F>,
    zq: &Array2<F>,
    zk: &Array2<F>,
    wq: &Array2<F>,
    wk: &Array2<F>,
    da: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>, Array2<F>) {
    let d = zq.ncols();
    let sqrt_d = F::from(d).unwrap().sqrt();
    // Softmax rows: dlogits_r = a_r (x) (da_r - <da_r, a_r>).
    let mut dlogits = Array2::<F>::zeros(da.dim());
    for r in 0..da.nrows() {
        let a_row = cache.a.row(r);
        let da_row = da.row(r);
        let inner = a_row.dot(&da_row);
        for c in 0..da.ncols() {
            dlogits[[r, c]] = a_row[c] * (da_row[c] - inner);
        }
    }
    let dq = dlogits.dot(&cache.k).mapv(|x| x / sqrt_d);
    let dk = dlogits.t().dot(&cache.q).mapv(|x| x / sqrt_d);
    // q = zq wq', k = zk wk'.
    let dzq = dq.dot(wq);
    let dwq = dq.t().dot(zq);
    let dzk = dk.dot(wk);
    let dwk = dk.t().dot(zk);
    (dzq, dzk, dwq, dwk)
}

/// Row-softmax cross attention `softmax((Zq Wq')(Zk Wk')' / sqrt(d))`.
pub fn cross_attention<F: Scalar>(
    zq: &Array2<F>,
    zk: &Array2<F>,
    params: &CycleParams<F>,
) -> Result<Array2<F>> {
    check_cycle_shapes(zq, zk, params)?;
    Ok(attention_forward(zq, zk, &params.wq, &params.wk).a)
}

fn check_cycle_shapes<F: Scalar>(
    zs: &Array2<F>,
    zt: &Array2<F>,
    params: &CycleParams<F>,
) -> Result<()> {
    let d = zs.ncols();
    if zs.nrows() == 0 || zt.nrows() == 0 {
        return Err(ScotError::Input("embeddings must have at least one row".into()));
    }
    if zt.ncols() != d {
        return Err(ScotError::Input(format!(
            "embedding dimensions must match, got {} and {}",
            d,
            zt.ncols()
        )));
    }
    if params.wq.dim() != (d, d) || params.wk.dim() != (d, d) {
        return Err(ScotError::Input(format!(
            "attention projections must be {d}x{d}, got {:?} and {:?}",
            params.wq.dim(),
            params.wk.dim()
        )));
    }
    Ok(())
}

/// Frobenius distance of `B` from the identity, with its gradient `2(B - I)`
/// (both divided by `n^2` when requested).
fn identity_gap<F: Scalar>(b: &Array2<F>, normalize: bool) -> (F, Array2<F>) {
    let n = b.nrows();
    let scale = if normalize {
        (F::from(n).unwrap() * F::from(n).unwrap()).recip()
    } else {
        F::one()
    };
    let mut residual = b.clone();
    for i in 0..n {
        residual[[i, i]] -= F::one();
    }
    let loss = residual.mapv(|x| x * x).sum() * scale;
    let two = F::from(2.0).unwrap();
    let grad = residual.mapv(|x| two * x * scale);
    (loss, grad)
}

/// Evaluates the cycle regularizer and its exact gradients.
pub fn cycle_loss<F: Scalar>(
    zs: &Array2<F>,
    zt: &Array2<F>,
    params: &CycleParams<F>,
) -> Result<CycleResult<F>> {
    check_cycle_shapes(zs, zt, params)?;
    let fwd = attention_forward(zs, zt, &params.wq, &params.wk);
    let rev = attention_forward(zt, zs, &params.wq, &params.wk);
    let n_s = zs.nrows();
    let nf_s = F::from(n_s).unwrap();

    let b = fwd.a.dot(&rev.a);
    let (mut l_cyc, db) = identity_gap(&b, params.normalize_by_n2);
    let mut da_fwd = db.dot(&rev.a.t());
    let mut da_rev = fwd.a.t().dot(&db);

    if params.mode == CycleMode::TwoSided {
        let b_rev = rev.a.dot(&fwd.a);
        let (l_rev, db_rev) = identity_gap(&b_rev, params.normalize_by_n2);
        l_cyc += l_rev;
        da_rev = da_rev + db_rev.dot(&fwd.a.t());
        da_fwd = da_fwd + rev.a.t().dot(&db_rev);
    }

    // r_ent = -(1/n_s) sum_ij A_ij log(A_ij + delta), on the forward map.
    let delta = params.delta;
    let mut r_ent = F::zero();
    for &a in fwd.a.iter() {
        r_ent -= a * (a + delta).ln();
    }
    r_ent /= nf_s;
    let ent_scale = params.beta / nf_s;
    for (slot, &a) in da_fwd.iter_mut().zip(fwd.a.iter()) {
        *slot -= ent_scale * ((a + delta).ln() + a / (a + delta));
    }

    let (dzs_f, dzt_f, dwq_f, dwk_f) =
        attention_backward(&fwd, zs, zt, &params.wq, &params.wk, &da_fwd);
    let (dzt_r, dzs_r, dwq_r, dwk_r) =
        attention_backward(&rev, zt, zs, &params.wq, &params.wk, &da_rev);

    Ok(CycleResult {
        l_cyc,
        r_ent,
        l_rec: l_cyc + params.beta * r_ent,
        grad_zs: dzs_f + dzs_r,
        grad_zt: dzt_f + dzt_r,
        grad_wq: dwq_f + dwq_r,
        grad_wk: dwk_f + dwk_r,
    })
}
