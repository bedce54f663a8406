//! Shallow sparse variational GP: whitened posterior predictives, prior KL
//! and the i.i.d. ELBO with minibatch scaling.
//!
//! Whitening convention: `u = μ_u + L·w` with `L = chol(K_uu)`, so the prior
//! on `w` is standard normal and the predictive mean is
//! `μ(x) + K_fu L⁻ᵀ q_w`. The mean-only variant uses `v = u − μ_u`.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::gauss::Gaussian;
use crate::inducing::{self, InducingSet};
use crate::kernel::{
    self, kernel_nodes, positive_to_raw, softplus_val, KernelNodes, KernelSpec, MeanNodes,
    MeanSpec, POSITIVE_EPS,
};
use crate::likelihood::{lik_nodes, ve_graph, LikelihoodSpec, QuadratureRule};
use crate::linalg::{chol_with_jitter, solve_lower};
use crate::params::{Binding, Role, Transform, ValueSource};
use crate::tape::{Tape, Var};

/// Parameterization of the inducing-variable posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Whitening {
    /// Plain `q(u)`.
    None,
    /// Mean corrected under the prior: `v = u − μ_u`.
    MeanOnly,
    /// Fully whitened: `w = L⁻¹(u − μ_u)`.
    Full,
}

/// Inducing-variable posterior for all outputs of a layer.
#[derive(Debug, Clone)]
pub struct VariationalState {
    /// `M × D` posterior means in the active parameterization.
    pub q_mean: Array2<f64>,
    /// Raw lower-triangular factors, one `M × M` matrix per output; the
    /// effective factor is the strict lower triangle with
    /// `softplus(diag) + 1e-6` on the diagonal.
    pub q_sqrt_raw: Vec<Array2<f64>>,
    pub whitening: Whitening,
}

/// Effective lower-triangular factor from raw storage.
pub fn effective_sqrt(raw: &Array2<f64>) -> Array2<f64> {
    let m = raw.nrows();
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..i {
            out[[i, j]] = raw[[i, j]];
        }
        out[[i, i]] = softplus_val(raw[[i, i]]) + POSITIVE_EPS;
    }
    out
}

/// Raw storage for a positive-diagonal lower factor.
pub fn sqrt_to_raw(lower: &Array2<f64>) -> Array2<f64> {
    let m = lower.nrows();
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..i {
            out[[i, j]] = lower[[i, j]];
        }
        out[[i, i]] = positive_to_raw(lower[[i, i]]);
    }
    out
}

impl VariationalState {
    /// Prior start: zero mean, identity factor.
    pub fn prior_init(m: usize, outputs: usize, whitening: Whitening) -> Self {
        let raw = sqrt_to_raw(&Array2::eye(m));
        VariationalState {
            q_mean: Array2::zeros((m, outputs)),
            q_sqrt_raw: vec![raw; outputs],
            whitening,
        }
    }

    /// Low-variance start used for non-terminal deep layers.
    pub fn low_variance_init(m: usize, outputs: usize, scale: f64, whitening: Whitening) -> Self {
        let raw = sqrt_to_raw(&(Array2::eye(m) * scale));
        VariationalState {
            q_mean: Array2::zeros((m, outputs)),
            q_sqrt_raw: vec![raw; outputs],
            whitening,
        }
    }

    pub fn outputs(&self) -> usize {
        self.q_mean.ncols()
    }

    pub fn m(&self) -> usize {
        self.q_mean.nrows()
    }
}

/// A single sparse GP layer: one kernel shared across `outputs` columns.
#[derive(Debug, Clone)]
pub struct SvgpLayer {
    pub kernel: KernelSpec,
    pub mean: MeanSpec,
    pub inducing: InducingSet,
    pub vstate: VariationalState,
    pub outputs: usize,
}

impl SvgpLayer {
    pub fn validate(&self) -> Result<()> {
        self.inducing.validate()?;
        if self.kernel.input_dim() != self.inducing.input_dim() {
            return Err(Error::shape("kernel and inducing input dims differ"));
        }
        self.mean.check_input_dim(self.inducing.input_dim())?;
        if self.mean.outputs() != self.outputs {
            return Err(Error::shape("mean outputs do not match layer outputs"));
        }
        if self.vstate.outputs() != self.outputs || self.vstate.m() != self.inducing.count() {
            return Err(Error::shape("variational state shape mismatch"));
        }
        if self.vstate.q_sqrt_raw.len() != self.outputs {
            return Err(Error::shape("one q_sqrt factor required per output"));
        }
        Ok(())
    }
}

/// Graph nodes for one latent output.
pub struct HeadNodes {
    pub kn_idx: usize,
    pub l: Var,
    pub z: Var,
    pub q_mean: Var,
    pub q_sqrt: Var,
    pub mu_u: Option<Var>,
    pub ind: InducingSet,
}

/// Bound layer graph shared by shallow and deep paths.
pub struct LayerGraph {
    pub whitening: Whitening,
    pub kns: Vec<KernelNodes>,
    pub mean: MeanNodes,
    pub heads: Vec<HeadNodes>,
}

/// Bind mean-function parameters.
pub fn bind_mean_params(
    t: &mut Tape,
    mean: &MeanSpec,
    leaves: bool,
    prefix: &str,
    b: &mut Binding,
) -> MeanNodes {
    match mean {
        MeanSpec::Zero { outputs } => MeanNodes::Zero { outputs: *outputs },
        MeanSpec::Identity { .. } => MeanNodes::Identity,
        MeanSpec::Constant { values } => {
            let v = b.push(
                t,
                leaves,
                format!("{prefix}mean.values"),
                Role::Generative,
                Transform::Identity,
                Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("shape"),
            );
            MeanNodes::Constant { values: v }
        }
        MeanSpec::Linear { weight, bias } => {
            let w = b.push(
                t,
                leaves,
                format!("{prefix}mean.weight"),
                Role::Generative,
                Transform::Identity,
                weight.clone(),
            );
            let bv = b.push(
                t,
                leaves,
                format!("{prefix}mean.bias"),
                Role::Generative,
                Transform::Identity,
                Array2::from_shape_vec((1, bias.len()), bias.to_vec()).expect("shape"),
            );
            MeanNodes::Linear { weight: w, bias: bv }
        }
    }
}

pub(crate) fn apply_mean_params(mean: &mut MeanSpec, src: &mut ValueSource) {
    match mean {
        MeanSpec::Zero { .. } | MeanSpec::Identity { .. } => {}
        MeanSpec::Constant { values } => {
            let v = src.next_arr();
            *values = v.row(0).to_owned();
        }
        MeanSpec::Linear { weight, bias } => {
            *weight = src.next_arr().clone();
            let bv = src.next_arr();
            *bias = bv.row(0).to_owned();
        }
    }
}

/// Bind an `SvgpLayer` onto the tape; `leaves = true` registers parameters
/// for gradients, `false` freezes them as constants.
pub fn bind_svgp_layer(
    t: &mut Tape,
    layer: &SvgpLayer,
    leaves: bool,
    prefix: &str,
    b: &mut Binding,
) -> Result<LayerGraph> {
    layer.validate()?;
    let vraw = b.push(
        t,
        leaves,
        format!("{prefix}kernel.variance"),
        Role::Generative,
        Transform::SoftplusEps,
        Array2::from_elem((1, 1), layer.kernel.variance_raw),
    );
    let lraw = b.push(
        t,
        leaves,
        format!("{prefix}kernel.lengthscales"),
        Role::Generative,
        Transform::SoftplusEps,
        Array2::from_shape_vec(
            (layer.kernel.input_dim(), 1),
            layer.kernel.lengthscales_raw.to_vec(),
        )
        .expect("shape"),
    );
    let kn = kernel_nodes(t, vraw, lraw);
    let mean = bind_mean_params(t, &layer.mean, leaves, prefix, b);
    let z = b.push(
        t,
        leaves,
        format!("{prefix}inducing.z"),
        Role::Variational,
        Transform::Identity,
        layer.inducing.z().clone(),
    );
    let q_mean = b.push(
        t,
        leaves,
        format!("{prefix}q_mean"),
        Role::Variational,
        Transform::Identity,
        layer.vstate.q_mean.clone(),
    );
    let mut q_sqrts = Vec::with_capacity(layer.outputs);
    for d in 0..layer.outputs {
        let raw = b.push(
            t,
            leaves,
            format!("{prefix}q_sqrt{d}"),
            Role::Variational,
            Transform::TrilSoftplusDiag,
            layer.vstate.q_sqrt_raw[d].clone(),
        );
        q_sqrts.push(t.tril_softplus_diag(raw, POSITIVE_EPS));
    }

    let kuu = inducing::kuu_var(t, &kn, z, &layer.inducing);
    let l = t.chol(kuu)?;
    let mu_u_all = if layer.vstate.whitening == Whitening::None {
        Some(inducing::prior_mu_u_var(t, &mean, z, &layer.inducing, layer.outputs)?)
    } else {
        None
    };

    let mut heads = Vec::with_capacity(layer.outputs);
    for d in 0..layer.outputs {
        let qm = t.slice_cols(q_mean, d, d + 1);
        let mu_u = mu_u_all.map(|mu| t.slice_cols(mu, d, d + 1));
        heads.push(HeadNodes {
            kn_idx: 0,
            l,
            z,
            q_mean: qm,
            q_sqrt: q_sqrts[d],
            mu_u,
            ind: layer.inducing.clone(),
        });
    }
    Ok(LayerGraph { whitening: layer.vstate.whitening, kns: vec![kn], mean, heads })
}


/// Shared projection for one head at inputs `x`: `ct = (L⁻¹K_uf)ᵀ`,
/// `t1` the posterior-covariance factor rows, and the posterior mean
/// adjustment.
pub struct HeadProject {
    pub ct: Var,
    pub t1: Var,
    pub mean_adj: Var,
}

pub fn head_project(t: &mut Tape, lg: &LayerGraph, head: &HeadNodes, x: Var) -> HeadProject {
    let kn = &lg.kns[head.kn_idx];
    let kfu = inducing::kfu_var(t, kn, x, head.z, &head.ind);
    let kuf = t.transpose(kfu);
    let c = t.solve_lower(head.l, kuf);
    let ct = t.transpose(c);
    let (mean_adj, t1) = match lg.whitening {
        Whitening::Full => {
            let mean_adj = t.matmul(ct, head.q_mean);
            let t1 = t.matmul(ct, head.q_sqrt);
            (mean_adj, t1)
        }
        Whitening::MeanOnly | Whitening::None => {
            let d = t.solve_lower_t(head.l, c);
            let dt = t.transpose(d);
            let qm = match (lg.whitening, head.mu_u) {
                (Whitening::None, Some(mu)) => t.sub(head.q_mean, mu),
                _ => head.q_mean,
            };
            let mean_adj = t.matmul(dt, qm);
            let t1 = t.matmul(dt, head.q_sqrt);
            (mean_adj, t1)
        }
    };
    HeadProject { ct, t1, mean_adj }
}

/// Diagonal predictive for one head at inputs `x`; returns `(mean, var)` as
/// `(n,1)` nodes. The `N×N` covariance is never materialized.
pub fn head_predict_diag(
    t: &mut Tape,
    lg: &LayerGraph,
    head: &HeadNodes,
    x: Var,
    mean_col: Var,
) -> (Var, Var) {
    let kn = &lg.kns[head.kn_idx];
    let n = t.value(x).nrows();
    let proj = head_project(t, lg, head, x);
    let csq = t.sqr(proj.ct);
    let bb = t.sum_rows(csq);
    let t1sq = t.sqr(proj.t1);
    let ss = t.sum_rows(t1sq);
    let kdiag = kernel::rbf_diag(t, kn, n);
    let v0 = t.sub(kdiag, bb);
    let v1 = t.add(v0, ss);
    let var = t.clamp_min(v1, 0.0);
    let mean = t.add(mean_col, proj.mean_adj);
    (mean, var)
}

/// Full-covariance predictive for one head: `(mean (n,1), cov (n,n))`.
pub fn head_predict_full(
    t: &mut Tape,
    lg: &LayerGraph,
    head: &HeadNodes,
    x: Var,
    mean_col: Var,
) -> (Var, Var) {
    let kn = &lg.kns[head.kn_idx];
    let proj = head_project(t, lg, head, x);
    let kff = kernel::rbf_matrix(t, kn, x, x);
    let c = t.transpose(proj.ct);
    let ctc = t.matmul(proj.ct, c);
    let t1t = t.transpose(proj.t1);
    let ss = t.matmul(proj.t1, t1t);
    let c0 = t.sub(kff, ctc);
    let cov = t.add(c0, ss);
    let mean = t.add(mean_col, proj.mean_adj);
    (mean, cov)
}

/// Diagonal predictive for every head; returns `(n,D)` mean and variance.
pub fn layer_predict_diag(t: &mut Tape, lg: &LayerGraph, x: Var) -> (Var, Var) {
    let mean_fn = kernel::mean_apply(t, &lg.mean, x);
    let mut means = Vec::with_capacity(lg.heads.len());
    let mut vars = Vec::with_capacity(lg.heads.len());
    for (d, head) in lg.heads.iter().enumerate() {
        let mc = t.slice_cols(mean_fn, d, d + 1);
        let (m, v) = head_predict_diag(t, lg, head, x, mc);
        means.push(m);
        vars.push(v);
    }
    (t.concat_cols(&means), t.concat_cols(&vars))
}

/// Prior KL summed over heads.
pub fn prior_kl_graph(t: &mut Tape, lg: &LayerGraph) -> Var {
    let mut total: Option<Var> = None;
    for head in &lg.heads {
        let m = head.ind.count() as f64;
        let kl = match lg.whitening {
            Whitening::Full => {
                let s1full = t.sqr(head.q_mean);
                let s1 = t.sum(s1full);
                let lsq = t.sqr(head.q_sqrt);
                let s2 = t.sum(lsq);
                let dg = t.diag(head.q_sqrt);
                let lns = t.ln(dg);
                let ld = t.sum(lns);
                let s12 = t.add(s1, s2);
                let inner = t.add_const(s12, -m);
                let half = t.scale(inner, 0.5);
                t.sub(half, ld)
            }
            Whitening::MeanOnly | Whitening::None => {
                let a = t.solve_lower(head.l, head.q_sqrt);
                let asq = t.sqr(a);
                let tr = t.sum(asq);
                let qv = match (lg.whitening, head.mu_u) {
                    (Whitening::None, Some(mu)) => t.sub(head.q_mean, mu),
                    _ => head.q_mean,
                };
                let w = t.solve_lower(head.l, qv);
                let wsq = t.sqr(w);
                let maha = t.sum(wsq);
                let dl = t.diag(head.l);
                let lnl = t.ln(dl);
                let ldp = t.sum(lnl);
                let dq = t.diag(head.q_sqrt);
                let lnq = t.ln(dq);
                let ldq = t.sum(lnq);
                let s12 = t.add(tr, maha);
                let inner = t.add_const(s12, -m);
                let half = t.scale(inner, 0.5);
                let with_p = t.add(half, ldp);
                t.sub(with_p, ldq)
            }
        };
        total = Some(match total {
            Some(prev) => t.add(prev, kl),
            None => kl,
        });
    }
    total.expect("layer has at least one head")
}

/// ELBO graph: `scale · Σ_n E_q[ln p(y_n | f_n)] − KL`.
pub fn elbo_graph(
    t: &mut Tape,
    lg: &LayerGraph,
    lik: &LikelihoodSpec,
    lik_raw: Option<Var>,
    x: Var,
    y: Var,
    scale: f64,
    quad: &QuadratureRule,
) -> Result<Var> {
    if lik.latent_dim() != lg.heads.len() {
        return Err(Error::Arity(format!(
            "likelihood consumes {} latent outputs, layer provides {}",
            lik.latent_dim(),
            lg.heads.len()
        )));
    }
    let ln = lik_nodes(t, lik, lik_raw);
    let (mean, var) = layer_predict_diag(t, lg, x);
    let d = lg.heads.len();
    let means: Vec<Var> = (0..d).map(|i| t.slice_cols(mean, i, i + 1)).collect();
    let vars: Vec<Var> = (0..d).map(|i| t.slice_cols(var, i, i + 1)).collect();
    let ve = ve_graph(t, &ln, y, &means, &vars, quad);
    let sve = t.sum(ve);
    let scaled = if scale == 1.0 { sve } else { t.scale(sve, scale) };
    let kl = prior_kl_graph(t, lg);
    Ok(t.sub(scaled, kl))
}

impl SvgpLayer {
    /// Posterior marginals at `xnew`: per-output `(mean, var)` columns.
    pub fn predict_f_diag(&self, xnew: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut t = Tape::new();
        let mut b = Binding::new();
        let lg = bind_svgp_layer(&mut t, self, false, "", &mut b)?;
        let xv = t.constant(xnew.clone());
        let (m, v) = layer_predict_diag(&mut t, &lg, xv);
        Ok((t.value(m).clone(), t.value(v).clone()))
    }

    /// Full-covariance posterior at `xnew`, one Gaussian per output.
    pub fn predict_f_full(&self, xnew: &Array2<f64>) -> Result<Vec<Gaussian>> {
        let mut t = Tape::new();
        let mut b = Binding::new();
        let lg = bind_svgp_layer(&mut t, self, false, "", &mut b)?;
        let xv = t.constant(xnew.clone());
        let mean_fn = kernel::mean_apply(&mut t, &lg.mean, xv);
        let mut out = Vec::with_capacity(lg.heads.len());
        for (d, head) in lg.heads.iter().enumerate() {
            let mc = t.slice_cols(mean_fn, d, d + 1);
            let (m, c) = head_predict_full(&mut t, &lg, head, xv, mc);
            let mean = t.value(m).column(0).to_owned();
            let cov = crate::gauss::symmetrize(t.value(c).clone());
            out.push(Gaussian { mean, cov });
        }
        Ok(out)
    }

    /// KL between the variational posterior and the prior over inducing
    /// variables, summed across outputs.
    pub fn prior_kl(&self) -> Result<f64> {
        let mut t = Tape::new();
        let mut b = Binding::new();
        let lg = bind_svgp_layer(&mut t, self, false, "", &mut b)?;
        let kl = prior_kl_graph(&mut t, &lg);
        Ok(t.scalar(kl))
    }

    /// Minibatch ELBO: `(total_n/|batch|)·Σ ve − KL`.
    pub fn elbo(
        &self,
        lik: &LikelihoodSpec,
        x: &Array2<f64>,
        y: &Array1<f64>,
        total_n: usize,
        quad: &QuadratureRule,
    ) -> Result<f64> {
        if x.nrows() == 0 {
            return Err(Error::shape("batch must be nonempty"));
        }
        if total_n < x.nrows() {
            return Err(Error::shape("total_n must be at least the batch size"));
        }
        if y.len() != x.nrows() {
            return Err(Error::shape("x and y row counts differ"));
        }
        let mut t = Tape::new();
        let mut b = Binding::new();
        let lg = bind_svgp_layer(&mut t, self, false, "", &mut b)?;
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone().insert_axis(Axis(1)));
        let scale = total_n as f64 / x.nrows() as f64;
        let e = elbo_graph(&mut t, &lg, lik, None, xv, yv, scale, quad)?;
        Ok(t.scalar(e))
    }

    /// Convert the variational state to a different parameterization while
    /// representing the identical posterior process.
    pub fn convert_whitening(&self, target: Whitening) -> Result<SvgpLayer> {
        if self.vstate.whitening == target {
            return Ok(self.clone());
        }
        let kuu = inducing::kuu(&self.inducing, &self.kernel)?;
        let (l, _) = chol_with_jitter(&kuu)?;
        let mu_u = inducing::prior_mu_u(&self.inducing, &self.mean)?;
        let m = self.inducing.count();
        let mut q_mean = Array2::zeros((m, self.outputs));
        let mut q_sqrt_raw = Vec::with_capacity(self.outputs);
        for d in 0..self.outputs {
            let qm = self.vstate.q_mean.column(d).to_owned().insert_axis(Axis(1));
            let lq = effective_sqrt(&self.vstate.q_sqrt_raw[d]);
            let mu = mu_u.column(d).to_owned().insert_axis(Axis(1));
            // canonical unwhitened representation
            let (qu, lu) = match self.vstate.whitening {
                Whitening::None => (qm, lq),
                Whitening::MeanOnly => (qm + &mu, lq),
                Whitening::Full => (l.dot(&qm) + &mu, l.dot(&lq)),
            };
            let (qt, lt) = match target {
                Whitening::None => (qu, lu),
                Whitening::MeanOnly => (qu - &mu, lu),
                Whitening::Full => (solve_lower(&l, &(qu - &mu)), solve_lower(&l, &lu)),
            };
            q_mean.column_mut(d).assign(&qt.column(0));
            q_sqrt_raw.push(sqrt_to_raw(&lt));
        }
        let mut out = self.clone();
        out.vstate = VariationalState { q_mean, q_sqrt_raw, whitening: target };
        Ok(out)
    }

    pub fn to_whitened(&self) -> Result<SvgpLayer> {
        self.convert_whitening(Whitening::Full)
    }

    pub fn from_whitened(&self) -> Result<SvgpLayer> {
        self.convert_whitening(Whitening::None)
    }
}

/// Exact dense GP regression posterior and log marginal likelihood; the test
/// oracle for the variational paths. Gaussian likelihood only.
pub fn exact_gp_oracle(
    kernel: &KernelSpec,
    mean: &MeanSpec,
    noise_variance: f64,
    x: &Array2<f64>,
    y: &Array1<f64>,
    xnew: &Array2<f64>,
) -> Result<(Gaussian, f64)> {
    if noise_variance <= 0.0 {
        return Err(Error::Config("noise variance must be positive".into()));
    }
    let n = x.nrows();
    let prior_mean_new = kernel::mean_vector(mean, xnew)?.column(0).to_owned();
    let kss = kernel::kern_matrix(kernel, xnew, xnew)?;
    if n == 0 {
        return Ok((Gaussian::new(prior_mean_new, crate::gauss::symmetrize(kss))?, 0.0));
    }
    if y.len() != n {
        return Err(Error::shape("x and y row counts differ"));
    }
    let kxx = kernel::kern_matrix(kernel, x, x)?;
    let mut kn = kxx;
    for i in 0..n {
        kn[[i, i]] += noise_variance;
    }
    let (l, _) = chol_with_jitter(&kn)?;
    let mx = kernel::mean_vector(mean, x)?.column(0).to_owned();
    let resid = (y - &mx).insert_axis(Axis(1));
    let w = solve_lower(&l, &resid);
    let ksx = kernel::kern_matrix(kernel, xnew, x)?;
    let v = solve_lower(&l, &ksx.t().to_owned());
    let mean_post = &prior_mean_new + &v.t().dot(&w).column(0);
    let cov_post = &kss - &v.t().dot(&v);
    let maha: f64 = w.iter().map(|a| a * a).sum();
    let logdet: f64 = l.diag().iter().map(|a| a.ln()).sum::<f64>() * 2.0;
    let logml = -0.5 * (maha + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok((Gaussian::new(mean_post, crate::gauss::symmetrize(cov_post))?, logml))
}
