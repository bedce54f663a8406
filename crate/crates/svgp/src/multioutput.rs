//! Multioutput constructions over sparse GP layers: separate-independent,
//! linear model of coregionalization, and the derivative-GP view of a
//! single-output prior.
//!
//! Flattening convention for dense multioutput Gaussians is output-major
//! (DM-ordering): entry index = output·N + point.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::gauss::Gaussian;
use crate::inducing::InducingSet;
use crate::kernel::{self, kern_cross_hess, KernelSpec, MeanSpec};
use crate::layer::{
    bind_mean_params, layer_predict_diag, prior_kl_graph, HeadNodes, LayerGraph,
    VariationalState, Whitening,
};
use crate::params::{Binding, Role, Transform, ValueSource};
use crate::tape::{Tape, Var};

/// Output coupling of a layer.
#[derive(Debug, Clone)]
pub enum MoKind {
    /// D separate single-output GPs; zero cross-output covariance.
    SeparateIndependent,
    /// Outputs mix a latent separate-independent GP: `f = W·g`.
    Lmc { w: Array2<f64> },
}

/// A multioutput sparse GP layer. `kernels.len()` is either 1 (shared
/// kernel) or one per latent output; inducing points are shared across
/// latent outputs unless `per_output_z` overrides them.
#[derive(Debug, Clone)]
pub struct MoLayer {
    pub kind: MoKind,
    pub mean: MeanSpec,
    pub inducing: InducingSet,
    pub per_output_z: Option<Vec<InducingSet>>,
    pub kernels: Vec<KernelSpec>,
    pub vstate: VariationalState,
}

impl MoLayer {
    /// Number of latent GPs.
    pub fn latent_outputs(&self) -> usize {
        self.vstate.outputs()
    }

    /// Number of exposed outputs after mixing.
    pub fn outputs(&self) -> usize {
        match &self.kind {
            MoKind::SeparateIndependent => self.latent_outputs(),
            MoKind::Lmc { w } => w.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.inducing.validate()?;
        let dg = self.latent_outputs();
        if dg == 0 {
            return Err(Error::shape("layer needs at least one latent output"));
        }
        if self.kernels.is_empty() || (self.kernels.len() != 1 && self.kernels.len() != dg) {
            return Err(Error::shape("kernels must be shared (1) or one per latent output"));
        }
        for k in &self.kernels {
            if k.input_dim() != self.input_dim() {
                return Err(Error::shape("kernel input dim does not match inducing points"));
            }
        }
        self.mean.check_input_dim(self.input_dim())?;
        if self.mean.outputs() != dg {
            return Err(Error::shape("mean outputs must match latent outputs"));
        }
        if self.vstate.m() != self.inducing.count() {
            return Err(Error::shape("variational state rows must match inducing count"));
        }
        if self.vstate.q_sqrt_raw.len() != dg {
            return Err(Error::shape("one q_sqrt factor per latent output"));
        }
        if let Some(per) = &self.per_output_z {
            if per.len() != dg {
                return Err(Error::shape("per-output inducing sets must match latent outputs"));
            }
            for ind in per {
                ind.validate()?;
                if ind.count() != self.vstate.m() || ind.input_dim() != self.input_dim() {
                    return Err(Error::shape("per-output inducing set shape mismatch"));
                }
            }
        }
        if let MoKind::Lmc { w } = &self.kind {
            if w.ncols() != dg {
                return Err(Error::shape("LMC mixing matrix columns must match latent outputs"));
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("LMC mixing matrix".into()));
            }
        }
        Ok(())
    }

    /// Near-identity mixing matrix initialization (identity padded or
    /// truncated to `d×d_g` plus small seeded noise).
    pub fn lmc_init_w(d: usize, d_g: usize, rng: &crate::rng::CounterRng) -> Array2<f64> {
        let mut w = Array2::zeros((d, d_g));
        for i in 0..d.min(d_g) {
            w[[i, i]] = 1.0;
        }
        for i in 0..d {
            for j in 0..d_g {
                w[[i, j]] += 0.01 * rng.normal(crate::rng::Purpose::Init, 2, i as u64, j as u64);
            }
        }
        w
    }
}

/// Bound multioutput layer graph.
pub struct MoLayerGraph {
    pub lg: LayerGraph,
    pub w: Option<Var>,
}

/// Bind a multioutput layer onto the tape in registry order.
pub fn bind_mo_layer(
    t: &mut Tape,
    layer: &MoLayer,
    leaves: bool,
    prefix: &str,
    b: &mut Binding,
) -> Result<MoLayerGraph> {
    layer.validate()?;
    let dg = layer.latent_outputs();
    let shared_kernel = layer.kernels.len() == 1;

    let mut kns = Vec::with_capacity(layer.kernels.len());
    for (i, k) in layer.kernels.iter().enumerate() {
        let label = if shared_kernel { String::new() } else { format!("{i}") };
        let vraw = b.push(
            t,
            leaves,
            format!("{prefix}kernel{label}.variance"),
            Role::Generative,
            Transform::SoftplusEps,
            Array2::from_elem((1, 1), k.variance_raw),
        );
        let lraw = b.push(
            t,
            leaves,
            format!("{prefix}kernel{label}.lengthscales"),
            Role::Generative,
            Transform::SoftplusEps,
            Array2::from_shape_vec((k.input_dim(), 1), k.lengthscales_raw.to_vec()).expect("shape"),
        );
        kns.push(kernel::kernel_nodes(t, vraw, lraw));
    }
    let mean = bind_mean_params(t, &layer.mean, leaves, prefix, b);

    // inducing point leaves: shared or per latent output
    let z_vars: Vec<Var> = match &layer.per_output_z {
        None => {
            let z = b.push(
                t,
                leaves,
                format!("{prefix}inducing.z"),
                Role::Variational,
                Transform::Identity,
                layer.inducing.z().clone(),
            );
            vec![z]
        }
        Some(per) => per
            .iter()
            .enumerate()
            .map(|(d, ind)| {
                b.push(
                    t,
                    leaves,
                    format!("{prefix}inducing.z{d}"),
                    Role::Variational,
                    Transform::Identity,
                    ind.z().clone(),
                )
            })
            .collect(),
    };

    let q_mean = b.push(
        t,
        leaves,
        format!("{prefix}q_mean"),
        Role::Variational,
        Transform::Identity,
        layer.vstate.q_mean.clone(),
    );
    let mut q_sqrts = Vec::with_capacity(dg);
    for d in 0..dg {
        let raw = b.push(
            t,
            leaves,
            format!("{prefix}q_sqrt{d}"),
            Role::Variational,
            Transform::TrilSoftplusDiag,
            layer.vstate.q_sqrt_raw[d].clone(),
        );
        q_sqrts.push(t.tril_softplus_diag(raw, kernel::POSITIVE_EPS));
    }
    let w = match &layer.kind {
        MoKind::SeparateIndependent => None,
        MoKind::Lmc { w } => Some(b.push(
            t,
            leaves,
            format!("{prefix}lmc.w"),
            Role::Generative,
            Transform::Identity,
            w.clone(),
        )),
    };

    // Cholesky per distinct (kernel, inducing) pair
    let needs_mu = layer.vstate.whitening == Whitening::None;
    let mut l_cache: Vec<Option<Var>> = vec![None; kns.len() * z_vars.len()];
    let mut mu_cache: Vec<Option<Var>> = vec![None; z_vars.len()];
    let mut heads = Vec::with_capacity(dg);
    for d in 0..dg {
        let kn_idx = if shared_kernel { 0 } else { d };
        let z_idx = if z_vars.len() == 1 { 0 } else { d };
        let ind = match &layer.per_output_z {
            Some(per) => per[d].clone(),
            None => layer.inducing.clone(),
        };
        let cache_key = kn_idx * z_vars.len() + z_idx;
        let l = match l_cache[cache_key] {
            Some(l) => l,
            None => {
                let kuu = crate::inducing::kuu_var(t, &kns[kn_idx], z_vars[z_idx], &ind);
                let l = t.chol(kuu)?;
                l_cache[cache_key] = Some(l);
                l
            }
        };
        let mu_u = if needs_mu {
            let mu_all = match mu_cache[z_idx] {
                Some(m) => m,
                None => {
                    let m = crate::inducing::prior_mu_u_var(t, &mean, z_vars[z_idx], &ind, dg)?;
                    mu_cache[z_idx] = Some(m);
                    m
                }
            };
            Some(t.slice_cols(mu_all, d, d + 1))
        } else {
            None
        };
        let qm = t.slice_cols(q_mean, d, d + 1);
        heads.push(HeadNodes {
            kn_idx,
            l,
            z: z_vars[z_idx],
            q_mean: qm,
            q_sqrt: q_sqrts[d],
            mu_u,
            ind,
        });
    }
    Ok(MoLayerGraph {
        lg: LayerGraph { whitening: layer.vstate.whitening, kns, mean, heads },
        w,
    })
}

pub(crate) fn apply_mo_layer(layer: &mut MoLayer, src: &mut ValueSource) {
    for k in layer.kernels.iter_mut() {
        k.variance_raw = src.next_scalar();
        k.lengthscales_raw = src.next_arr().column(0).to_owned();
    }
    crate::layer::apply_mean_params(&mut layer.mean, src);
    match &mut layer.per_output_z {
        None => *layer.inducing.z_mut() = src.next_arr().clone(),
        Some(per) => {
            for ind in per.iter_mut() {
                *ind.z_mut() = src.next_arr().clone();
            }
        }
    }
    layer.vstate.q_mean = src.next_arr().clone();
    for d in 0..layer.latent_outputs() {
        layer.vstate.q_sqrt_raw[d] = src.next_arr().clone();
    }
    if let MoKind::Lmc { w } = &mut layer.kind {
        *w = src.next_arr().clone();
    }
}

/// Mix latent diagonal marginals through the layer's output coupling:
/// mean `= G·Wᵀ`, per-point variance `= diag(W diag(g_var) Wᵀ)`.
pub fn mix_outputs_diag(
    t: &mut Tape,
    mg: &MoLayerGraph,
    g_mean: Var,
    g_var: Var,
) -> (Var, Var) {
    match mg.w {
        None => (g_mean, g_var),
        Some(w) => {
            let wt = t.transpose(w);
            let mean = t.matmul(g_mean, wt);
            let wsq = t.sqr(w);
            let wsqt = t.transpose(wsq);
            let var = t.matmul(g_var, wsqt);
            (mean, var)
        }
    }
}

/// Diagonal multioutput prediction graph.
pub fn mo_predict_diag_graph(t: &mut Tape, mg: &MoLayerGraph, x: Var) -> (Var, Var) {
    let (gm, gv) = layer_predict_diag(t, &mg.lg, x);
    mix_outputs_diag(t, mg, gm, gv)
}

/// Per-point prediction with optional dense `D×D` output covariance.
pub struct MoPrediction {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
    /// Per-point output covariance, present when requested.
    pub output_cov: Option<Vec<Array2<f64>>>,
}

/// Multioutput prediction at `xnew`.
pub fn mo_predict(layer: &MoLayer, xnew: &Array2<f64>, full_output_cov: bool) -> Result<MoPrediction> {
    if xnew.ncols() != layer.input_dim() {
        return Err(Error::shape("mo_predict input dim mismatch"));
    }
    let mut t = Tape::new();
    let mut b = Binding::new();
    let mg = bind_mo_layer(&mut t, layer, false, "", &mut b)?;
    let xv = t.constant(xnew.clone());
    let (gm, gv) = layer_predict_diag(&mut t, &mg.lg, xv);
    let (m, v) = mix_outputs_diag(&mut t, &mg, gm, gv);
    let mean = t.value(m).clone();
    let var = t.value(v).clone();
    let output_cov = if full_output_cov {
        let gvar = t.value(gv).clone();
        let n = xnew.nrows();
        let d = layer.outputs();
        let mut covs = Vec::with_capacity(n);
        for i in 0..n {
            let mut c = Array2::zeros((d, d));
            match &layer.kind {
                MoKind::SeparateIndependent => {
                    for k in 0..d {
                        c[[k, k]] = gvar[[i, k]];
                    }
                }
                MoKind::Lmc { w } => {
                    // W diag(g_var_i) Wᵀ
                    for a in 0..d {
                        for bidx in 0..d {
                            let mut s = 0.0;
                            for k in 0..layer.latent_outputs() {
                                s += w[[a, k]] * w[[bidx, k]] * gvar[[i, k]];
                            }
                            c[[a, bidx]] = s;
                        }
                    }
                }
            }
            covs.push(c);
        }
        Some(covs)
    } else {
        None
    };
    Ok(MoPrediction { mean, var, output_cov })
}

/// Prior KL of the bundle: a sum of per-latent-output terms, so the cost is
/// `O(M³·D_g)` rather than cubic in the flattened dimension.
pub fn mo_prior_kl(layer: &MoLayer) -> Result<f64> {
    let mut t = Tape::new();
    let mut b = Binding::new();
    let mg = bind_mo_layer(&mut t, layer, false, "", &mut b)?;
    let kl = prior_kl_graph(&mut t, &mg.lg);
    Ok(t.scalar(kl))
}

/// Prior multioutput GP over the gradient of a single-output GP: means are
/// `∇μ`, covariance blocks are mixed second kernel derivatives. DM-ordering:
/// index = dim·N + point.
pub fn derivative_gp_predict(
    kernel: &KernelSpec,
    mean: &MeanSpec,
    xnew: &Array2<f64>,
) -> Result<Gaussian> {
    let d = kernel.input_dim();
    if xnew.ncols() != d {
        return Err(Error::shape("derivative GP input dim mismatch"));
    }
    if mean.outputs() != 1 {
        return Err(Error::shape("derivative GP expects a single-output base mean"));
    }
    let n = xnew.nrows();
    let mut mu = Array1::zeros(n * d);
    for a in 0..d {
        for i in 0..n {
            let val = match mean {
                MeanSpec::Zero { .. } | MeanSpec::Constant { .. } => 0.0,
                MeanSpec::Linear { weight, .. } => weight[[0, a]],
                MeanSpec::Identity { .. } => {
                    return Err(Error::UnsupportedMean(
                        "identity mean is not single-output for a derivative GP".into(),
                    ))
                }
            };
            mu[a * n + i] = val;
        }
    }
    let mut cov = Array2::zeros((n * d, n * d));
    for a in 0..d {
        for bdim in 0..d {
            for i in 0..n {
                for j in 0..n {
                    let h = kern_cross_hess(
                        kernel,
                        &xnew.row(i).to_owned(),
                        &xnew.row(j).to_owned(),
                        a,
                        bdim,
                    )?;
                    cov[[a * n + i, bdim * n + j]] = h;
                }
            }
        }
    }
    Gaussian::new(mu, crate::gauss::symmetrize(cov))
}

/// Dense block-diagonal assembly of the bundle's inducing prior and
/// posterior, used as a KL oracle in tests.
pub fn assemble_block_joint(layer: &MoLayer) -> Result<(Gaussian, Gaussian)> {
    let dg = layer.latent_outputs();
    let m = layer.vstate.m();
    let dim = dg * m;
    let mut qm = Array1::zeros(dim);
    let mut qc = Array2::zeros((dim, dim));
    let mut pm = Array1::zeros(dim);
    let mut pc = Array2::zeros((dim, dim));
    for dcol in 0..dg {
        let ind = match &layer.per_output_z {
            Some(per) => &per[dcol],
            None => &layer.inducing,
        };
        let kern = &layer.kernels[if layer.kernels.len() == 1 { 0 } else { dcol }];
        let kuu = crate::inducing::kuu(ind, kern)?;
        let mu = crate::inducing::prior_mu_u(ind, &layer.mean)?;
        let (l, _) = crate::linalg::chol_with_jitter(&kuu)?;
        let eff = crate::layer::effective_sqrt(&layer.vstate.q_sqrt_raw[dcol]);
        let qcol = layer.vstate.q_mean.column(dcol).to_owned().insert_axis(Axis(1));
        let mucol = mu.column(dcol).to_owned().insert_axis(Axis(1));
        // canonical unwhitened (q_u, L_q) for this latent output
        let (qu, lq) = match layer.vstate.whitening {
            Whitening::None => (qcol, eff),
            Whitening::MeanOnly => (qcol + &mucol, eff),
            Whitening::Full => (l.dot(&qcol) + &mucol, l.dot(&eff)),
        };
        let qcov = lq.dot(&lq.t());
        for i in 0..m {
            qm[dcol * m + i] = qu[[i, 0]];
            pm[dcol * m + i] = mucol[[i, 0]];
            for j in 0..m {
                qc[[dcol * m + i, dcol * m + j]] = qcov[[i, j]];
                pc[[dcol * m + i, dcol * m + j]] = kuu[[i, j]];
            }
        }
    }
    Ok((
        Gaussian::new(qm, crate::gauss::symmetrize(qc))?,
        Gaussian::new(pm, crate::gauss::symmetrize(pc))?,
    ))
}

/// Diagonal marginals of the bundle, value-level; used by shallow paths.
pub fn mo_predict_values(layer: &MoLayer, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let p = mo_predict(layer, x, false)?;
    Ok((p.mean, p.var))
}
