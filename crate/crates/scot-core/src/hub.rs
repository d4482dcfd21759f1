//! Shared-prototype hub for multi-source alignment.
//!
//! Instead of coupling every city pair, each city aligns against one
//! learnable prototype matrix through balanced entropic OT with a fixed row
//! marginal `1/n_m` and a shared column marginal `b` induced by the target
//! city. Because every city transports onto the same prototype capacity
//! profile, no single source can dominate a prototype.
//!
//! Per city this module produces the transport plan, its row-normalized
//! assignments `Q`, the OT and contrastive losses against the prototypes, a
//! KL diagnostic of prototype usage against the uniform profile, and the
//! city-to-prototype cycle regularizer (shared attention projections, each
//! cycle term divided by the square of its identity size).

use crate::align::{
    chain_normalization, contrastive_loss, normalize_rows, ot_gradient_wrt_normalized, ot_loss,
    sphere_cost,
};
use crate::cycle::{cycle_loss, CycleParams};
use crate::sinkhorn::{sinkhorn_solve, Coupling, SinkhornConfig};
use crate::{Result, Scalar, ScotError};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// How the prototype marginal `b` evolves across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// `b = 1/K` forever.
    Uniform,
    /// `b` is uniform until `freeze_epoch`, then computed once from the
    /// target embeddings of that epoch and kept.
    Frozen,
    /// `b` is recomputed from the current target embeddings every epoch.
    Adaptive,
}

/// Learnable prototypes plus the marginal that rations their capacity.
#[derive(Debug, Clone)]
pub struct HubState<F> {
    /// `K x d` prototype matrix.
    pub prototypes: Array2<F>,
    /// Length-K simplex vector; every entry strictly positive.
    pub b: Array1<F>,
    pub prior_mode: PriorMode,
    /// Prior temperature.
    pub tau_b: F,
    /// Prior floor applied before normalization.
    pub eps_b: F,
    /// Stored prior for [`PriorMode::Frozen`] once it has been computed.
    pub frozen_b: Option<Array1<F>>,
}

impl<F: Scalar> HubState<F> {
    /// Fresh hub around the given prototypes with a uniform marginal.
    pub fn new(prototypes: Array2<F>, prior_mode: PriorMode, tau_b: F, eps_b: F) -> Result<Self> {
        let k = prototypes.nrows();
        if k < 2 || prototypes.ncols() < 2 {
            return Err(ScotError::Input(format!(
                "hub needs at least 2 prototypes of dimension >= 2, got {}x{}",
                k,
                prototypes.ncols()
            )));
        }
        let state = Self {
            b: Array1::from_elem(k, F::from(k).unwrap().recip()),
            prototypes,
            prior_mode,
            tau_b,
            eps_b,
            frozen_b: None,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.prototypes.nrows();
        if k < 2 {
            return Err(ScotError::Input(format!("hub needs K >= 2, got {k}")));
        }
        if self.prototypes.iter().any(|x| !x.is_finite()) {
            return Err(ScotError::Input("prototypes have non-finite entries".into()));
        }
        if self.b.len() != k {
            return Err(ScotError::Input(format!(
                "prior has length {} but there are {k} prototypes",
                self.b.len()
            )));
        }
        let tol = F::from(1e-9).unwrap();
        if (self.b.sum() - F::one()).abs() > tol {
            return Err(ScotError::Input(format!(
                "prototype marginal sums to {}, expected 1",
                self.b.sum()
            )));
        }
        if self.b.iter().any(|&x| !(x > F::zero())) {
            return Err(ScotError::Input(
                "prototype marginal must be strictly positive".into(),
            ));
        }
        if !(self.tau_b > F::zero()) || !(self.eps_b > F::zero()) {
            return Err(ScotError::Input(format!(
                "prior temperature and floor must be positive, got tau_b={}, eps_b={}",
                self.tau_b, self.eps_b
            )));
        }
        Ok(())
    }
}

/// Hub-side weights and solver settings.
#[derive(Debug, Clone)]
pub struct HubConfig<F> {
    /// Prototype count K.
    pub k: usize,
    pub tau_b: F,
    pub eps_b: F,
    /// Contrastive weight inside `l_align = l_ot + lambda_c * l_con`.
    pub lambda_c: F,
    /// Weight of the usage KL when folded into the alignment objective.
    pub lambda_hub: F,
    pub prior_mode: PriorMode,
    /// Epoch at which [`PriorMode::Frozen`] captures its prior.
    pub freeze_epoch: usize,
    /// Similarity temperature of the hub contrastive term.
    pub tau: F,
    pub sinkhorn: SinkhornConfig<F>,
}

impl<F: Scalar> Default for HubConfig<F> {
    fn default() -> Self {
        Self {
            k: 32,
            tau_b: F::from(0.5).unwrap(),
            eps_b: F::from(1e-3).unwrap(),
            lambda_c: F::from(0.5).unwrap(),
            lambda_hub: F::from(0.1).unwrap(),
            prior_mode: PriorMode::Adaptive,
            freeze_epoch: 0,
            tau: F::from(0.1).unwrap(),
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl<F: Scalar> HubConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(ScotError::Input(format!(
                "hub needs at least 2 prototypes, got {}",
                self.k
            )));
        }
        if !(self.tau_b > F::zero()) || !(self.eps_b > F::zero()) || !(self.tau > F::zero()) {
            return Err(ScotError::Input(
                "hub temperatures and the prior floor must be positive".into(),
            ));
        }
        if self.lambda_c < F::zero() || self.lambda_hub < F::zero() {
            return Err(ScotError::Input(
                "hub loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One city's hub alignment: losses, transport plan, and gradients split by
/// objective so the trainer can weight the alignment and reconstruction
/// groups independently.
#[derive(Debug, Clone)]
pub struct HubCityResult<F> {
    /// Transport plan against the prototypes.
    pub coupling: Coupling<F>,
    /// Row-normalized assignments; every row sums to 1.
    pub q: Array2<F>,
    pub l_ot: F,
    pub l_con: F,
    /// `l_ot + lambda_c * l_con`.
    pub l_align: F,
    /// `KL(plan' 1 || uniform)`; diagnostic value, never differentiated.
    pub l_hub: F,
    pub l_cyc: F,
    pub r_ent: F,
    /// `l_cyc + beta * r_ent`.
    pub l_rec: F,
    /// d `l_align` / d z_m (raw embedding).
    pub grad_z_align: Array2<F>,
    /// d `l_align` / d prototypes (raw).
    pub grad_protos_align: Array2<F>,
    /// d `l_rec` / d z_m.
    pub grad_z_rec: Array2<F>,
    /// d `l_rec` / d prototypes.
    pub grad_protos_rec: Array2<F>,
    pub grad_wq: Array2<F>,
    pub grad_wk: Array2<F>,
    /// Plan rows skipped by the contrastive term for having zero mass.
    pub skipped_rows: usize,
}

/// Target-induced prototype marginal:
/// `s_k = mean_j zt_j . proto_k`, `b_k` proportional to
/// `max(exp(s_k / tau_b), eps_b)`, normalized onto the simplex. The floor
/// keeps every prototype reachable by transport mass.
pub fn target_prior<F: Scalar>(
    zt_norm: &Array2<F>,
    protos_norm: &Array2<F>,
    tau_b: F,
    eps_b: F,
) -> Result<Array1<F>> {
    if zt_norm.ncols() != protos_norm.ncols() {
        return Err(ScotError::Input(format!(
            "embedding dimensions must match, got {} and {}",
            zt_norm.ncols(),
            protos_norm.ncols()
        )));
    }
    if zt_norm.nrows() == 0 {
        return Err(ScotError::Input("target embedding has no rows".into()));
    }
    if !(tau_b > F::zero()) || !(eps_b > F::zero()) {
        return Err(ScotError::Input(format!(
            "prior needs tau_b > 0 and eps_b > 0, got {tau_b} and {eps_b}"
        )));
    }
    let mean = zt_norm
        .mean_axis(Axis(0))
        .expect("nonempty target embedding");
    let s_bar = protos_norm.dot(&mean);
    let mut b = s_bar.mapv(|s| (s / tau_b).exp().max(eps_b));
    let total = b.sum();
    if !total.is_finite() {
        return Err(ScotError::Stability(format!(
            "prototype prior overflowed at tau_b = {tau_b}"
        )));
    }
    b.mapv_inplace(|x| x / total);
    Ok(b)
}

/// Advances the prior for `epoch` according to the hub's mode. `z_t` is the
/// raw target embedding of the current epoch; the computed prior is data
/// (nothing differentiates through it).
pub fn refresh_prior<F: Scalar>(
    hub: &mut HubState<F>,
    z_t: &Array2<F>,
    epoch: usize,
    freeze_epoch: usize,
) -> Result<()> {
    let k = hub.k();
    match hub.prior_mode {
        PriorMode::Uniform => {
            hub.b = Array1::from_elem(k, F::from(k).unwrap().recip());
        }
        PriorMode::Adaptive => {
            let zt_norm = normalize_rows(z_t, "target")?;
            let protos_norm = normalize_rows(&hub.prototypes, "prototype")?;
            hub.b = target_prior(&zt_norm, &protos_norm, hub.tau_b, hub.eps_b)?;
        }
        PriorMode::Frozen => {
            if let Some(frozen) = &hub.frozen_b {
                hub.b = frozen.clone();
            } else if epoch >= freeze_epoch {
                let zt_norm = normalize_rows(z_t, "target")?;
                let protos_norm = normalize_rows(&hub.prototypes, "prototype")?;
                let b = target_prior(&zt_norm, &protos_norm, hub.tau_b, hub.eps_b)?;
                hub.frozen_b = Some(b.clone());
                hub.b = b;
            } else {
                hub.b = Array1::from_elem(k, F::from(k).unwrap().recip());
            }
        }
    }
    Ok(())
}

/// K-means++-style prototype seeding from pooled unit embeddings: the first
/// prototype is drawn uniformly, each next one with probability proportional
/// to its squared distance from the nearest prototype chosen so far.
pub fn init_prototypes<F: Scalar, R: Rng>(
    pooled_norm: &Array2<F>,
    k: usize,
    rng: &mut R,
) -> Result<Array2<F>> {
    let n = pooled_norm.nrows();
    if k < 2 {
        return Err(ScotError::Input(format!("need at least 2 prototypes, got {k}")));
    }
    if n < k {
        return Err(ScotError::Input(format!(
            "need at least {k} pooled embeddings to seed {k} prototypes, got {n}"
        )));
    }
    let d = pooled_norm.ncols();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut dist2 = Array1::<F>::from_elem(n, F::infinity());
    while chosen.len() < k {
        let last = pooled_norm.row(*chosen.last().unwrap());
        for i in 0..n {
            let mut acc = F::zero();
            for j in 0..d {
                let diff = pooled_norm[[i, j]] - last[j];
                acc += diff * diff;
            }
            if acc < dist2[i] {
                dist2[i] = acc;
            }
        }
        let total = dist2.sum();
        let next = if total > F::zero() {
            let mut draw = F::from(rng.random::<f64>()).unwrap() * total;
            let mut pick = n - 1;
            for i in 0..n {
                draw -= dist2[i];
                if draw <= F::zero() {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every remaining point coincides with a prototype; fall back to
            // a uniform draw so seeding still terminates.
            rng.random_range(0..n)
        };
        chosen.push(next);
    }
    let mut protos = Array2::<F>::zeros((k, d));
    for (row, &idx) in chosen.iter().enumerate() {
        protos.row_mut(row).assign(&pooled_norm.row(idx));
    }
    Ok(protos)
}

/// Aligns one city against the hub. The plan and its row normalization are
/// constants during differentiation, matching the alignment-module
/// convention; the cycle gradients flow through both attention maps.
pub fn hub_align_city<F: Scalar>(
    z_m: &Array2<F>,
    hub: &HubState<F>,
    cycle_params: &CycleParams<F>,
    config: &HubConfig<F>,
) -> Result<HubCityResult<F>> {
    hub.validate()?;
    config.validate()?;
    let n_m = z_m.nrows();
    if n_m == 0 {
        return Err(ScotError::Input("city embedding has no rows".into()));
    }
    let zm_norm = normalize_rows(z_m, "city")?;
    let protos_norm = normalize_rows(&hub.prototypes, "prototype")?;
    if zm_norm.ncols() != protos_norm.ncols() {
        return Err(ScotError::Input(format!(
            "city dimension {} does not match prototype dimension {}",
            zm_norm.ncols(),
            protos_norm.ncols()
        )));
    }
    let c = sphere_cost(&zm_norm, &protos_norm);
    let a = Array1::from_elem(n_m, F::from(n_m).unwrap().recip());
    let coupling = sinkhorn_solve(&c, &config.sinkhorn, Some(&a), Some(&hub.b))?;
    let l_ot = ot_loss(&coupling, &c)?;

    let mut q = coupling.p.clone();
    for (i, mut row) in q.rows_mut().into_iter().enumerate() {
        let total = row.sum();
        if !(total > F::zero()) {
            return Err(ScotError::Stability(format!(
                "transport plan row {i} has no mass; cannot build assignments"
            )));
        }
        row.mapv_inplace(|x| x / total);
    }

    let con = contrastive_loss(&q, &zm_norm, &protos_norm, config.tau)?;
    let l_align = l_ot + config.lambda_c * con.loss;

    // Usage KL against the uniform capacity profile, on the plan's raw
    // column marginal. Zero columns contribute 0 (the x log x limit).
    let col = coupling.p.sum_axis(Axis(0));
    let k_f = F::from(hub.k()).unwrap();
    let mut l_hub = F::zero();
    for &mass in col.iter() {
        if mass > F::zero() {
            l_hub += mass * (mass * k_f).ln();
        }
    }

    let (g_ot_z, g_ot_p) = ot_gradient_wrt_normalized(&coupling.p, &c, &zm_norm, &protos_norm);
    let gn_z = &g_ot_z + &con.grad_zs_norm.mapv(|x| x * config.lambda_c);
    let gn_p = &g_ot_p + &con.grad_zt_norm.mapv(|x| x * config.lambda_c);
    let grad_z_align = chain_normalization(z_m, &zm_norm, &gn_z);
    let grad_protos_align = chain_normalization(&hub.prototypes, &protos_norm, &gn_p);

    // City-to-prototype cycle on the raw matrices; hub cycles always carry
    // the 1/n^2 normalization.
    let mut cp = cycle_params.clone();
    cp.normalize_by_n2 = true;
    let cyc = cycle_loss(z_m, &hub.prototypes, &cp)?;

    Ok(HubCityResult {
        coupling,
        q,
        l_ot,
        l_con: con.loss,
        l_align,
        l_hub,
        l_cyc: cyc.l_cyc,
        r_ent: cyc.r_ent,
        l_rec: cyc.l_rec,
        grad_z_align,
        grad_protos_align,
        grad_z_rec: cyc.grad_zs,
        grad_protos_rec: cyc.grad_zt,
        grad_wq: cyc.grad_wq,
        grad_wk: cyc.grad_wk,
        skipped_rows: con.skipped_rows,
    })
}

/// Prototype usage profile of a transport plan.
#[derive(Debug, Clone)]
pub struct HubUsage<F> {
    /// `p_k`: share of total mass landing on prototype k.
    pub mass_per_prototype: Array1<F>,
    /// Shannon entropy `H(p)`.
    pub entropy: F,
    /// `H(p) / log K`.
    pub normalized_entropy: F,
    /// `exp(H(p))`: how many prototypes are effectively in use.
    pub effective_count: F,
}

/// Summarizes how transport mass spreads over prototypes.
pub fn hub_usage_diagnostics<F: Scalar>(plan: &Array2<F>) -> Result<HubUsage<F>> {
    if plan.iter().any(|&x| x < F::zero() || !x.is_finite()) {
        return Err(ScotError::Input(
            "plan must be nonnegative and finite".into(),
        ));
    }
    let total = plan.sum();
    if !(total > F::zero()) {
        return Err(ScotError::Input("plan has zero total mass".into()));
    }
    let k = plan.ncols();
    let mass = plan.sum_axis(Axis(0)).mapv(|x| x / total);
    let mut entropy = F::zero();
    for &p in mass.iter() {
        if p > F::zero() {
            entropy -= p * p.ln();
        }
    }
    let normalized_entropy = if k > 1 {
        entropy / F::from(k).unwrap().ln()
    } else {
        F::zero()
    };
    Ok(HubUsage {
        mass_per_prototype: mass,
        entropy,
        normalized_entropy,
        effective_count: entropy.exp(),
    })
}
