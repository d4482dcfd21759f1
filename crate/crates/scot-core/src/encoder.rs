//! Region embedding encoder and the intra-city mobility objective.
//!
//! Embeddings come from a learnable table pushed through one symmetric-
//! normalized propagation layer, `z = leakyrelu(Ahat * H0 * W)` with
//! `Ahat = D^{-1/2}(A + I)D^{-1/2}`. The intra-city loss is the mobility-
//! weighted negative log-likelihood of a softmax over embedding dot products.
//! Both the loss and the encoder expose analytic gradients; there is no
//! autodiff anywhere in this crate.

use crate::citydata::CityGraph;
use crate::{Result, Scalar, ScotError};
use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

/// Learnable encoder state for one city.
#[derive(Debug, Clone)]
pub struct EncoderParams<F> {
    /// `n x d` embedding table.
    pub h0: Array2<F>,
    /// `d x d` mixing matrix.
    pub w: Array2<F>,
    /// Negative-side slope of the leaky rectifier.
    pub leak: F,
}

impl<F: Scalar> EncoderParams<F> {
    /// Fresh parameters: `H0 ~ N(0, 0.1^2)` i.i.d. and `W = I + N(0, 0.01^2)`,
    /// so the first forward pass is a near-identity mix of small embeddings.
    pub fn init<R: Rng>(n: usize, d: usize, leak: F, rng: &mut R) -> Result<Self> {
        if n == 0 || d < 2 {
            return Err(ScotError::Input(format!(
                "encoder needs n >= 1 regions and d >= 2 dimensions, got n={n}, d={d}"
            )));
        }
        let h_std = F::from(0.1).unwrap();
        let w_std = F::from(0.01).unwrap();
        let h0 = Array2::from_shape_fn((n, d), |_| {
            let g: f64 = rng.sample(StandardNormal);
            h_std * F::from(g).unwrap()
        });
        let mut w = Array2::from_shape_fn((d, d), |_| {
            let g: f64 = rng.sample(StandardNormal);
            w_std * F::from(g).unwrap()
        });
        for i in 0..d {
            w[[i, i]] += F::one();
        }
        Ok(Self { h0, w, leak })
    }

    pub fn n(&self) -> usize {
        self.h0.nrows()
    }

    pub fn d(&self) -> usize {
        self.h0.ncols()
    }
}

/// Region embeddings for one city; row i belongs to region i.
#[derive(Debug, Clone)]
pub struct Embedding<F> {
    pub z: Array2<F>,
}

/// `D^{-1/2}(A + I)D^{-1/2}`. Self-loops keep every degree >= 1, so the
/// rescaling never divides by zero. Symmetric whenever `A` is.
fn normalized_adjacency<F: Scalar>(a: &Array2<F>) -> Array2<F> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        out[[i, i]] += F::one();
    }
    let inv_sqrt_deg = out.sum_axis(Axis(1)).mapv(|d| d.sqrt().recip());
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    out
}

fn check_shapes<F: Scalar>(params: &EncoderParams<F>, graph: &CityGraph<F>) -> Result<()> {
    let (n, d) = params.h0.dim();
    if n != graph.n || graph.adjacency.dim() != (graph.n, graph.n) {
        return Err(ScotError::Input(format!(
            "encoder holds {} regions but graph '{}' has {}",
            n, graph.city_id, graph.n
        )));
    }
    if params.w.dim() != (d, d) {
        return Err(ScotError::Input(format!(
            "mixing matrix must be {d}x{d} to match the embedding table, got {}x{}",
            params.w.nrows(),
            params.w.ncols()
        )));
    }
    Ok(())
}

/// Forward pass: `z = leakyrelu(Ahat * H0 * W)`.
pub fn encode<F: Scalar>(params: &EncoderParams<F>, graph: &CityGraph<F>) -> Result<Embedding<F>> {
    check_shapes(params, graph)?;
    let a_hat = normalized_adjacency(&graph.adjacency);
    let y = a_hat.dot(&params.h0).dot(&params.w);
    let leak = params.leak;
    let z = y.mapv(|x| if x >= F::zero() { x } else { leak * x });
    Ok(Embedding { z })
}

/// Mobility NLL over the full softmax of embedding dot products:
/// `loss = -sum_ij M_ij log softmax_j(z_i . z_j)`.
///
/// Returns the loss and its exact gradient with respect to `z`. With
/// `S = Z Z'` and `G = rowsoftmax(S) - M`, the gradient is `(G + G')Z`;
/// the transpose term carries the dependence of every row's normalizer on
/// the other embeddings.
pub fn intra_loss<F: Scalar>(emb: &Embedding<F>, m: &Array2<F>) -> Result<(F, Array2<F>)> {
    let n = emb.z.nrows();
    if n == 0 {
        return Err(ScotError::Input("embedding has no rows".into()));
    }
    if m.dim() != (n, n) {
        return Err(ScotError::Input(format!(
            "mobility must be {n}x{n} to match the embedding, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let tol = F::from(1e-6).unwrap();
    for (i, row) in m.rows().into_iter().enumerate() {
        if row.iter().any(|&x| x < F::zero() || !x.is_finite()) {
            return Err(ScotError::Input(format!(
                "mobility row {i} has negative or non-finite entries"
            )));
        }
        if (row.sum() - F::one()).abs() > tol {
            return Err(ScotError::Input(format!(
                "mobility row {i} sums to {}, expected 1",
                row.sum()
            )));
        }
    }

    let s = emb.z.dot(&emb.z.t());
    let mut p_hat = Array2::<F>::zeros((n, n));
    let mut loss = F::zero();
    for i in 0..n {
        let row = s.row(i);
        let shift = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for k in 0..n {
            denom += (row[k] - shift).exp();
        }
        let lse = denom.ln() + shift;
        for j in 0..n {
            // log P_ij = S_ij - lse_i, evaluated without forming P first.
            p_hat[[i, j]] = (row[j] - lse).exp();
            loss -= m[[i, j]] * (row[j] - lse);
        }
    }

    let g = &p_hat - m;
    let grad = (&g + &g.t()).dot(&emb.z);
    Ok((loss, grad))
}

/// Pulls a gradient with respect to `z` back to `(grad H0, grad W)` through
/// the encode computation graph.
pub fn encode_backward<F: Scalar>(
    params: &EncoderParams<F>,
    graph: &CityGraph<F>,
    upstream: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    check_shapes(params, graph)?;
    if upstream.dim() != params.h0.dim() {
        return Err(ScotError::Input(format!(
            "upstream gradient must match the embedding shape {}x{}, got {}x{}",
            params.h0.nrows(),
            params.h0.ncols(),
            upstream.nrows(),
            upstream.ncols()
        )));
    }
    let a_hat = normalized_adjacency(&graph.adjacency);
    let propagated = a_hat.dot(&params.h0);
    let y = propagated.dot(&params.w);
    let leak = params.leak;
    let dy = Zip::from(upstream)
        .and(&y)
        .map_collect(|&u, &yv| if yv >= F::zero() { u } else { leak * u });
    // y = (Ahat H0) W and Ahat is symmetric, so Ahat' = Ahat below.
    let grad_w = propagated.t().dot(&dy);
    let grad_h0 = a_hat.dot(&dy.dot(&params.w.t()));
    Ok((grad_h0, grad_w))
}
