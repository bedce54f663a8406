//! Deep GP stacks with doubly-stochastic sampling, per-datapoint latent
//! inputs at the first layer, and the four trainable objectives: plain
//! ELBO, deep ELBO, latent-variable ELBO and the importance-weighted
//! latent-variable ELBO.
//!
//! Every objective is a pure function of `(parameters, data, seed, step)`:
//! all noise comes from counter-keyed streams, so repeated evaluation is
//! bit-identical and common-random-number differentiation is well defined.
//!
//! The latent KL contribution is realized through its single-sample
//! estimator `ln q(h) − ln p(h)` at the reparameterized draw, which is
//! unbiased for the analytic KL and makes the importance-weighted bound
//! with `S = 1` coincide with the latent-variable bound exactly at matched
//! noise.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::kernel::{MeanSpec, POSITIVE_EPS};
use crate::layer::{head_predict_full, head_project, prior_kl_graph, HeadProject};
use crate::likelihood::{lik_nodes, predict_y, ve_graph, LikNodes, LikelihoodSpec, Predictive, QuadratureRule};
use crate::multioutput::{bind_mo_layer, mo_predict_diag_graph, MoKind, MoLayer, MoLayerGraph};
use crate::params::{Binding, Role, Transform, ValueSource};
use crate::rng::{CounterRng, Purpose};
use crate::tape::{ensure_finite, Tape, Var};

/// Replicate configuration for importance weighting.
#[derive(Debug, Clone, Copy)]
pub struct IWConfig {
    /// Number of latent replicates per datapoint.
    pub s: usize,
    /// Samples of the outer expectation.
    pub outer_mc: usize,
}

impl IWConfig {
    pub fn new(s: usize, outer_mc: usize) -> Self {
        assert!(s >= 1 && outer_mc >= 1);
        IWConfig { s, outer_mc }
    }
}

/// Objective selector shared by the evaluator and the trainer.
#[derive(Debug, Clone, Copy)]
pub enum ObjectiveKind {
    Elbo,
    Deep { n_mc: usize },
    Lv { n_mc: usize },
    IwLv(IWConfig),
}

/// Per-datapoint latent posterior table `q(h_n) = N(m_n, diag(s_n²))`;
/// the prior is standard normal.
#[derive(Debug, Clone)]
pub struct LatentPosteriorTable {
    pub mean: Array2<f64>,
    /// Raw storage; std = softplus(raw) + 1e-6.
    pub sqrt_raw: Array2<f64>,
}

impl LatentPosteriorTable {
    /// Prior start (std 1) with a small seeded mean jitter to break symmetry.
    pub fn init(n: usize, latent_dim: usize, rng: &CounterRng) -> Self {
        let mut mean = Array2::zeros((n, latent_dim));
        for i in 0..n {
            for c in 0..latent_dim {
                mean[[i, c]] = 0.01 * rng.normal(Purpose::Init, 3, i as u64, c as u64);
            }
        }
        let raw = crate::kernel::positive_to_raw(1.0);
        LatentPosteriorTable { mean, sqrt_raw: Array2::from_elem((n, latent_dim), raw) }
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.ncols()
    }

    /// Analytic `KL(q(h_n) ‖ N(0, I))` for one row.
    pub fn row_kl(&self, n: usize) -> f64 {
        let mut kl = 0.0;
        for c in 0..self.latent_dim() {
            let m = self.mean[[n, c]];
            let s = crate::kernel::raw_to_positive(self.sqrt_raw[[n, c]]);
            kl += 0.5 * (s * s + m * m - 1.0) - s.ln();
        }
        kl
    }
}

/// A stack of multioutput sparse GP layers with an optional latent input at
/// layer 1 and a terminal likelihood.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub layers: Vec<MoLayer>,
    pub latent_dim: usize,
    pub likelihood: LikelihoodSpec,
}

impl ModelGraph {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Input dimension of the observed data (layer-1 input minus latent).
    pub fn data_dim(&self) -> usize {
        self.layers[0].input_dim() - self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        if self.layers[0].input_dim() < self.latent_dim {
            return Err(Error::Config("layer 1 input dim smaller than latent dim".into()));
        }
        for l in 1..self.layers.len() {
            if self.layers[l].input_dim() != self.layers[l - 1].outputs() {
                return Err(Error::Config(format!(
                    "layer {} input dim {} does not match layer {} outputs {}",
                    l,
                    self.layers[l].input_dim(),
                    l - 1,
                    self.layers[l - 1].outputs()
                )));
            }
        }
        let last = self.layers.last().unwrap();
        if last.outputs() != self.likelihood.latent_dim() {
            return Err(Error::Arity(format!(
                "likelihood consumes {} latent outputs, final layer provides {}",
                self.likelihood.latent_dim(),
                last.outputs()
            )));
        }
        if matches!(self.likelihood, LikelihoodSpec::GaussianHetero)
            && matches!(last.kind, MoKind::Lmc { .. })
        {
            return Err(Error::Config(
                "heteroscedastic likelihood requires independent final-layer outputs".into(),
            ));
        }
        Ok(())
    }
}

/// Bound model graph.
pub struct ModelNodes {
    pub layers: Vec<MoLayerGraph>,
    pub lik_raw: Option<Var>,
    /// `(mean, std)` nodes over the full table, std already transformed.
    pub latent: Option<(Var, Var)>,
}

/// Bind the whole model (and optional latent table) in registry order.
pub fn bind_model(
    t: &mut Tape,
    model: &ModelGraph,
    table: Option<&LatentPosteriorTable>,
    leaves: bool,
) -> Result<(ModelNodes, Binding)> {
    model.validate()?;
    let mut b = Binding::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        layers.push(bind_mo_layer(t, layer, leaves, &format!("layer{l}."), &mut b)?);
    }
    let lik_raw = match &model.likelihood {
        LikelihoodSpec::GaussianHomo { variance_raw } => Some(b.push(
            t,
            leaves,
            "lik.variance".into(),
            Role::Generative,
            Transform::SoftplusEps,
            Array2::from_elem((1, 1), *variance_raw),
        )),
        _ => None,
    };
    let latent = match table {
        Some(tab) => {
            if model.latent_dim == 0 {
                return Err(Error::Config("latent table provided but latent_dim is 0".into()));
            }
            if tab.latent_dim() != model.latent_dim {
                return Err(Error::shape("latent table width does not match latent_dim"));
            }
            let mean = b.push(
                t,
                leaves,
                "latent.mean".into(),
                Role::Variational,
                Transform::Identity,
                tab.mean.clone(),
            );
            let raw = b.push(
                t,
                leaves,
                "latent.sqrt".into(),
                Role::Variational,
                Transform::SoftplusEps,
                tab.sqrt_raw.clone(),
            );
            let sp = t.softplus(raw);
            let std = t.add_const(sp, POSITIVE_EPS);
            Some((mean, std))
        }
        None => None,
    };
    Ok((ModelNodes { layers, lik_raw, latent }, b))
}

/// Write back updated raw values in bind order.
pub fn apply_model(
    model: &mut ModelGraph,
    table: Option<&mut LatentPosteriorTable>,
    values: &[Array2<f64>],
) {
    let mut src = ValueSource::new(values);
    for layer in model.layers.iter_mut() {
        crate::multioutput::apply_mo_layer(layer, &mut src);
    }
    if let LikelihoodSpec::GaussianHomo { variance_raw } = &mut model.likelihood {
        *variance_raw = src.next_scalar();
    }
    if let Some(tab) = table {
        tab.mean = src.next_arr().clone();
        tab.sqrt_raw = src.next_arr().clone();
    }
    src.finish();
}

/// Evaluation context: a batch with its global row indices.
pub struct EvalCtx<'a> {
    pub x: &'a Array2<f64>,
    pub y: &'a Array1<f64>,
    pub rows: &'a [usize],
    pub total_n: usize,
    pub seed: u64,
    pub step: u64,
    pub quad: &'a QuadratureRule,
}

impl<'a> EvalCtx<'a> {
    fn check(&self, model: &ModelGraph) -> Result<()> {
        if self.x.nrows() == 0 {
            return Err(Error::shape("batch must be nonempty"));
        }
        if self.total_n < self.x.nrows() {
            return Err(Error::shape("total_n must be at least the batch size"));
        }
        if self.y.len() != self.x.nrows() || self.rows.len() != self.x.nrows() {
            return Err(Error::shape("batch rows/targets inconsistent"));
        }
        if self.x.ncols() != model.data_dim() {
            return Err(Error::shape(format!(
                "data dim {} does not match model data dim {}",
                self.x.ncols(),
                model.data_dim()
            )));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.total_n as f64 / self.x.nrows() as f64
    }
}

fn latent_eps(
    rng: &CounterRng,
    step: u64,
    rows: &[usize],
    dh: usize,
    draw: usize,
    s: usize,
    s_max: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dh));
    let rep = (draw * s_max + s) as u64;
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..dh {
            out[[i, c]] = rng.normal(Purpose::LatentNoise, step, r as u64, rep * dh as u64 + c as u64);
        }
    }
    out
}

fn layer_eps(
    rng: &CounterRng,
    l: usize,
    step: u64,
    rows: &[usize],
    dg: usize,
    draw: usize,
    s: usize,
    s_max: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dg));
    let rep = (draw * s_max + s) as u64;
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..dg {
            out[[i, c]] = rng.normal(
                Purpose::LayerNoise(l as u32),
                step,
                r as u64,
                rep * dg as u64 + c as u64,
            );
        }
    }
    out
}

/// Reparameterized latent draw and its weight term
/// `pen = ln q(h) − ln p(h)` evaluated at the draw.
fn latent_draw_and_penalty(
    t: &mut Tape,
    nodes: &ModelNodes,
    gather_rows: &[usize],
    eps: Array2<f64>,
) -> (Var, Var) {
    let (mean_all, std_all) = nodes.latent.expect("latent table bound");
    let m = t.gather_rows(mean_all, gather_rows);
    let s = t.gather_rows(std_all, gather_rows);
    let epsq = t.constant(eps.mapv(|e| 0.5 * e * e));
    let epsc = t.constant(eps);
    let se = t.mul_elem(s, epsc);
    let h = t.add(m, se);
    // ln q − ln p per row: Σ_c (½h² − ln s − ½ε²)
    let h2 = t.sqr(h);
    let half = t.scale(h2, 0.5);
    let lns = t.ln(s);
    let t1 = t.sub(half, lns);
    let t2 = t.sub(t1, epsq);
    let pen = t.sum_rows(t2);
    (h, pen)
}

/// Sample a layer's outputs from diagonal marginals (reparameterized).
fn sample_layer_diag(
    t: &mut Tape,
    mg: &MoLayerGraph,
    cur: Var,
    eps: Array2<f64>,
) -> (Var, Var, Var) {
    let (gm, gv) = crate::layer::layer_predict_diag(t, &mg.lg, cur);
    let sv = t.sqrt(gv);
    let epsc = t.constant(eps);
    let noise = t.mul_elem(sv, epsc);
    let g_sample = t.add(gm, noise);
    let f_sample = match mg.w {
        None => g_sample,
        Some(w) => {
            let wt = t.transpose(w);
            t.matmul(g_sample, wt)
        }
    };
    (f_sample, gm, gv)
}

/// Jointly sample a layer's outputs over per-datapoint blocks of `s`
/// replicate rows (used by the importance-weighted deep path).
fn sample_layer_blocks(
    t: &mut Tape,
    mg: &MoLayerGraph,
    cur: Var,
    block: usize,
    eps: &Array2<f64>,
) -> Result<Var> {
    let rows = t.value(cur).nrows();
    debug_assert_eq!(rows % block, 0);
    let nblocks = rows / block;
    let mean_fn = crate::kernel::mean_apply(t, &mg.lg.mean, cur);
    let mut g_cols = Vec::with_capacity(mg.lg.heads.len());
    for (d, head) in mg.lg.heads.iter().enumerate() {
        let kn = &mg.lg.kns[head.kn_idx];
        let HeadProject { ct, t1, mean_adj } = head_project(t, &mg.lg, head, cur);
        let mc = t.slice_cols(mean_fn, d, d + 1);
        let mean = t.add(mc, mean_adj);
        let mut parts = Vec::with_capacity(nblocks);
        for bi in 0..nblocks {
            let idx: Vec<usize> = (bi * block..(bi + 1) * block).collect();
            let ct_b = t.gather_rows(ct, &idx);
            let t1_b = t.gather_rows(t1, &idx);
            let x_b = t.gather_rows(cur, &idx);
            let kff = crate::kernel::rbf_matrix(t, kn, x_b, x_b);
            let ct_bt = t.transpose(ct_b);
            let bb = t.matmul(ct_b, ct_bt);
            let t1_bt = t.transpose(t1_b);
            let ss = t.matmul(t1_b, t1_bt);
            let c0 = t.sub(kff, bb);
            let cov = t.add(c0, ss);
            let lcov = t.chol(cov)?;
            let mean_b = t.gather_rows(mean, &idx);
            let mut eb = Array2::zeros((block, 1));
            for r in 0..block {
                eb[[r, 0]] = eps[[bi * block + r, d]];
            }
            let ebc = t.constant(eb);
            let noise = t.matmul(lcov, ebc);
            parts.push(t.add(mean_b, noise));
        }
        g_cols.push(t.concat_rows(&parts));
    }
    let g = t.concat_cols(&g_cols);
    Ok(match mg.w {
        None => g,
        Some(w) => {
            let wt = t.transpose(w);
            t.matmul(g, wt)
        }
    })
}

/// Variational expectation of the final layer at inputs `cur`; `(rows,1)`.
fn final_layer_ve(
    t: &mut Tape,
    nodes: &ModelNodes,
    ln: &LikNodes,
    cur: Var,
    y: Var,
    quad: &QuadratureRule,
) -> Var {
    let mg = nodes.layers.last().expect("model has layers");
    let (fm, fv) = mo_predict_diag_graph(t, mg, cur);
    let d = t.value(fm).ncols();
    let means: Vec<Var> = (0..d).map(|i| t.slice_cols(fm, i, i + 1)).collect();
    let vars: Vec<Var> = (0..d).map(|i| t.slice_cols(fv, i, i + 1)).collect();
    ve_graph(t, ln, y, &means, &vars, quad)
}

/// Propagate replicated inputs through the intermediate layers, sampling
/// each; `s_max` controls the replicate-aware noise keys.
fn propagate_sampling(
    t: &mut Tape,
    nodes: &ModelNodes,
    rng: &CounterRng,
    step: u64,
    rows: &[usize],
    mut cur: Var,
    draw: usize,
    s_block: usize,
) -> Result<Var> {
    let l_count = nodes.layers.len();
    for l in 0..l_count.saturating_sub(1) {
        let mg = &nodes.layers[l];
        let dg = mg.lg.heads.len();
        if s_block <= 1 {
            let eps = layer_eps(rng, l, step, rows, dg, draw, 0, 1);
            let (f, _, _) = sample_layer_diag(t, mg, cur, eps);
            cur = f;
        } else {
            // rows here are repeated per replicate: rows[i*s + k] = point i
            let mut eps = Array2::zeros((rows.len(), dg));
            for (ri, &r) in rows.iter().enumerate() {
                let k = ri % s_block;
                for c in 0..dg {
                    eps[[ri, c]] = rng.normal(
                        Purpose::LayerNoise(l as u32),
                        step,
                        r as u64,
                        ((draw * s_block + k) * dg + c) as u64,
                    );
                }
            }
            cur = sample_layer_blocks(t, mg, cur, s_block, &eps)?;
        }
    }
    Ok(cur)
}

/// Build the requested objective graph; returns the scalar node.
pub fn build_objective(
    t: &mut Tape,
    nodes: &ModelNodes,
    model: &ModelGraph,
    ctx: &EvalCtx,
    kind: ObjectiveKind,
) -> Result<Var> {
    ctx.check(model)?;
    let rng = CounterRng::new(ctx.seed);
    let ln = lik_nodes(t, &model.likelihood, nodes.lik_raw);
    let scale = ctx.scale();
    let bsize = ctx.x.nrows();

    // layer KLs, fixed order
    let mut kl: Option<Var> = None;
    for mg in &nodes.layers {
        let k = prior_kl_graph(t, &mg.lg);
        kl = Some(match kl {
            Some(prev) => t.add(prev, k),
            None => k,
        });
    }
    let kl = kl.expect("at least one layer");

    let data_term = match kind {
        ObjectiveKind::Elbo => {
            if model.depth() != 1 || model.latent_dim != 0 {
                return Err(Error::Config("elbo objective requires a single layer and no latent input".into()));
            }
            let x = t.constant(ctx.x.clone());
            let y = t.constant(ctx.y.clone().insert_axis(Axis(1)));
            let ve = final_layer_ve(t, nodes, &ln, x, y, ctx.quad);
            t.sum(ve)
        }
        ObjectiveKind::Deep { n_mc } => {
            if model.latent_dim != 0 {
                return Err(Error::Config("deep objective requires latent_dim = 0".into()));
            }
            if n_mc == 0 {
                return Err(Error::Config("n_mc must be positive".into()));
            }
            let x = t.constant(ctx.x.clone());
            let y = t.constant(ctx.y.clone().insert_axis(Axis(1)));
            if model.depth() == 1 {
                let ve = final_layer_ve(t, nodes, &ln, x, y, ctx.quad);
                t.sum(ve)
            } else {
                let mut acc: Option<Var> = None;
                for draw in 0..n_mc {
                    let cur = propagate_sampling(t, nodes, &rng, ctx.step, ctx.rows, x, draw, 1)?;
                    let ve = final_layer_ve(t, nodes, &ln, cur, y, ctx.quad);
                    let s = t.sum(ve);
                    acc = Some(match acc {
                        Some(prev) => t.add(prev, s),
                        None => s,
                    });
                }
                let total = acc.unwrap();
                if n_mc == 1 {
                    total
                } else {
                    t.scale(total, 1.0 / n_mc as f64)
                }
            }
        }
        ObjectiveKind::Lv { n_mc } => {
            if model.latent_dim == 0 {
                return Err(Error::Config("lv objective requires latent_dim >= 1".into()));
            }
            if n_mc == 0 {
                return Err(Error::Config("n_mc must be positive".into()));
            }
            let table_len = t.value(nodes.latent.expect("latent bound").0).nrows();
            if let Some(&bad) = ctx.rows.iter().find(|&&r| r >= table_len) {
                return Err(Error::MissingLatentRow(bad));
            }
            let x = t.constant(ctx.x.clone());
            let y = t.constant(ctx.y.clone().insert_axis(Axis(1)));
            let mut acc: Option<Var> = None;
            for draw in 0..n_mc {
                let eps = latent_eps(&rng, ctx.step, ctx.rows, model.latent_dim, draw, 0, 1);
                let (h, pen) = latent_draw_and_penalty(t, nodes, ctx.rows, eps);
                let input0 = if model.data_dim() == 0 { h } else { t.concat_cols(&[x, h]) };
                let cur =
                    propagate_sampling(t, nodes, &rng, ctx.step, ctx.rows, input0, draw, 1)?;
                let ve = final_layer_ve(t, nodes, &ln, cur, y, ctx.quad);
                let diff = t.sub(ve, pen);
                let s = t.sum(diff);
                acc = Some(match acc {
                    Some(prev) => t.add(prev, s),
                    None => s,
                });
            }
            let total = acc.unwrap();
            if n_mc == 1 {
                total
            } else {
                t.scale(total, 1.0 / n_mc as f64)
            }
        }
        ObjectiveKind::IwLv(iw) => {
            if model.latent_dim == 0 {
                return Err(Error::Config("iw_lv objective requires latent_dim >= 1".into()));
            }
            let table_len = t.value(nodes.latent.expect("latent bound").0).nrows();
            if let Some(&bad) = ctx.rows.iter().find(|&&r| r >= table_len) {
                return Err(Error::MissingLatentRow(bad));
            }
            if iw.s == 1 {
                // exact reduction to the latent-variable bound at matched noise
                let body =
                    build_objective_body_lv_as_iw(t, nodes, model, ctx, &rng, &ln, iw.outer_mc)?;
                return finish_objective(t, body, scale, kl);
            }
            let s_count = iw.s;
            let rep_rows: Vec<usize> = ctx
                .rows
                .iter()
                .flat_map(|&r| std::iter::repeat(r).take(s_count))
                .collect();
            let x_rep = {
                let mut xr = Array2::zeros((bsize * s_count, ctx.x.ncols()));
                for i in 0..bsize {
                    for k in 0..s_count {
                        xr.row_mut(i * s_count + k).assign(&ctx.x.row(i));
                    }
                }
                t.constant(xr)
            };
            let y_rep = {
                let mut yr = Array2::zeros((bsize * s_count, 1));
                for i in 0..bsize {
                    for k in 0..s_count {
                        yr[[i * s_count + k, 0]] = ctx.y[i];
                    }
                }
                t.constant(yr)
            };
            let mut acc: Option<Var> = None;
            for draw in 0..iw.outer_mc {
                let mut eps = Array2::zeros((bsize * s_count, model.latent_dim));
                for (i, &r) in ctx.rows.iter().enumerate() {
                    for k in 0..s_count {
                        for c in 0..model.latent_dim {
                            eps[[i * s_count + k, c]] = rng.normal(
                                Purpose::LatentNoise,
                                ctx.step,
                                r as u64,
                                ((draw * s_count + k) * model.latent_dim + c) as u64,
                            );
                        }
                    }
                }
                let (h, pen) = latent_draw_and_penalty(t, nodes, &rep_rows, eps);
                let input0 = if model.data_dim() == 0 {
                    h
                } else {
                    t.concat_cols(&[x_rep, h])
                };
                let cur = propagate_sampling(
                    t, nodes, &rng, ctx.step, &rep_rows, input0, draw, s_count,
                )?;
                let ve = final_layer_ve(t, nodes, &ln, cur, y_rep, ctx.quad);
                let lw = t.sub(ve, pen);
                let lw_mat = t.reshape(lw, bsize, s_count);
                let lse = t.logsumexp_cols(lw_mat);
                let shifted = t.add_const(lse, -(s_count as f64).ln());
                let s = t.sum(shifted);
                acc = Some(match acc {
                    Some(prev) => t.add(prev, s),
                    None => s,
                });
            }
            let total = acc.unwrap();
            if iw.outer_mc == 1 {
                total
            } else {
                t.scale(total, 1.0 / iw.outer_mc as f64)
            }
        }
    };
    finish_objective(t, data_term, scale, kl)
}

/// `S = 1` importance-weighted path: identical graph to the latent-variable
/// bound (single replicate, log-sum-exp is the identity).
fn build_objective_body_lv_as_iw(
    t: &mut Tape,
    nodes: &ModelNodes,
    model: &ModelGraph,
    ctx: &EvalCtx,
    rng: &CounterRng,
    ln: &LikNodes,
    outer_mc: usize,
) -> Result<Var> {
    let x = t.constant(ctx.x.clone());
    let y = t.constant(ctx.y.clone().insert_axis(Axis(1)));
    let mut acc: Option<Var> = None;
    for draw in 0..outer_mc {
        let eps = latent_eps(rng, ctx.step, ctx.rows, model.latent_dim, draw, 0, 1);
        let (h, pen) = latent_draw_and_penalty(t, nodes, ctx.rows, eps);
        let input0 = if model.data_dim() == 0 { h } else { t.concat_cols(&[x, h]) };
        let cur = propagate_sampling(t, nodes, rng, ctx.step, ctx.rows, input0, draw, 1)?;
        let ve = final_layer_ve(t, nodes, ln, cur, y, ctx.quad);
        let diff = t.sub(ve, pen);
        let s = t.sum(diff);
        acc = Some(match acc {
            Some(prev) => t.add(prev, s),
            None => s,
        });
    }
    let total = acc.unwrap();
    Ok(if outer_mc == 1 { total } else { t.scale(total, 1.0 / outer_mc as f64) })
}

fn finish_objective(t: &mut Tape, data_term: Var, scale: f64, kl: Var) -> Result<Var> {
    let scaled = if scale == 1.0 { data_term } else { t.scale(data_term, scale) };
    let obj = t.sub(scaled, kl);
    ensure_finite(t, obj, "objective")?;
    Ok(obj)
}

/// Plain-value objective evaluation; returns the estimate and the number of
/// jitter escalations encountered.
pub fn eval_objective(
    model: &ModelGraph,
    table: Option<&LatentPosteriorTable>,
    ctx: &EvalCtx,
    kind: ObjectiveKind,
) -> Result<(f64, usize)> {
    let mut t = Tape::new();
    let (nodes, _) = bind_model(&mut t, model, table, false)?;
    let obj = build_objective(&mut t, &nodes, model, ctx, kind)?;
    Ok((t.scalar(obj), t.jitter_events))
}

/// Deep ELBO (`latent_dim = 0`): Monte Carlo over intermediate layers, the
/// final expectation closed over the conditional Gaussian.
pub fn deep_elbo(
    model: &ModelGraph,
    x: &Array2<f64>,
    y: &Array1<f64>,
    total_n: usize,
    seed: u64,
    step: u64,
    n_mc: usize,
    quad: &QuadratureRule,
) -> Result<f64> {
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let ctx = EvalCtx { x, y, rows: &rows, total_n, seed, step, quad };
    Ok(eval_objective(model, None, &ctx, ObjectiveKind::Deep { n_mc })?.0)
}

/// Latent-variable ELBO with per-datapoint posteriors.
#[allow(clippy::too_many_arguments)]
pub fn lv_elbo(
    model: &ModelGraph,
    table: &LatentPosteriorTable,
    rows: &[usize],
    x: &Array2<f64>,
    y: &Array1<f64>,
    total_n: usize,
    seed: u64,
    step: u64,
    n_mc: usize,
    quad: &QuadratureRule,
) -> Result<f64> {
    let ctx = EvalCtx { x, y, rows, total_n, seed, step, quad };
    Ok(eval_objective(model, Some(table), &ctx, ObjectiveKind::Lv { n_mc })?.0)
}

/// Importance-weighted latent-variable ELBO.
#[allow(clippy::too_many_arguments)]
pub fn iw_lv_elbo(
    model: &ModelGraph,
    table: &LatentPosteriorTable,
    rows: &[usize],
    x: &Array2<f64>,
    y: &Array1<f64>,
    total_n: usize,
    iw: IWConfig,
    seed: u64,
    step: u64,
    quad: &QuadratureRule,
) -> Result<f64> {
    let ctx = EvalCtx { x, y, rows, total_n, seed, step, quad };
    Ok(eval_objective(model, Some(table), &ctx, ObjectiveKind::IwLv(iw))?.0)
}

/// One stochastic forward pass: per-layer samples plus the final conditional
/// Gaussian (diagonal marginals per output).
pub struct Propagation {
    pub latent_sample: Option<Array2<f64>>,
    pub layer_samples: Vec<Array2<f64>>,
    pub final_mean: Array2<f64>,
    pub final_var: Array2<f64>,
}

/// Propagate a batch through the stack, sampling intermediate layers (and
/// `h ~ q(h_n)` when a table is given).
pub fn propagate(
    model: &ModelGraph,
    table: Option<&LatentPosteriorTable>,
    rows: &[usize],
    x: &Array2<f64>,
    seed: u64,
    step: u64,
    draw: usize,
) -> Result<Propagation> {
    model.validate()?;
    if model.latent_dim > 0 && table.is_none() {
        return Err(Error::Config("latent model requires a posterior table".into()));
    }
    let mut t = Tape::new();
    let (nodes, _) = bind_model(&mut t, model, table, false)?;
    let rng = CounterRng::new(seed);
    let mut latent_sample = None;
    let cur0 = {
        let xv = t.constant(x.clone());
        if model.latent_dim > 0 {
            let eps = latent_eps(&rng, step, rows, model.latent_dim, draw, 0, 1);
            let (h, _pen) = latent_draw_and_penalty(&mut t, &nodes, rows, eps);
            latent_sample = Some(t.value(h).clone());
            if model.data_dim() == 0 {
                h
            } else {
                t.concat_cols(&[xv, h])
            }
        } else {
            xv
        }
    };
    let mut layer_samples = Vec::new();
    let mut cur = cur0;
    for l in 0..model.depth() - 1 {
        let dg = nodes.layers[l].lg.heads.len();
        let eps = layer_eps(&rng, l, step, rows, dg, draw, 0, 1);
        let (f, _, _) = sample_layer_diag(&mut t, &nodes.layers[l], cur, eps);
        layer_samples.push(t.value(f).clone());
        cur = f;
    }
    let mg = nodes.layers.last().unwrap();
    let (fm, fv) = mo_predict_diag_graph(&mut t, mg, cur);
    Ok(Propagation {
        latent_sample,
        layer_samples,
        final_mean: t.value(fm).clone(),
        final_var: t.value(fv).clone(),
    })
}

/// Joint predictive paths: `n_paths` full propagations with latent inputs
/// drawn from the prior, correlated across the evaluation rows.
pub struct DeepPaths {
    /// Per path: final-layer mean, `n × D`.
    pub means: Vec<Array2<f64>>,
    /// Per path: final-layer marginal variance, `n × D`.
    pub vars: Vec<Array2<f64>>,
}

pub fn predict_deep(
    model: &ModelGraph,
    xnew: &Array2<f64>,
    n_paths: usize,
    seed: u64,
) -> Result<DeepPaths> {
    model.validate()?;
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be positive".into()));
    }
    if xnew.ncols() != model.data_dim() {
        return Err(Error::shape("prediction input dim mismatch"));
    }
    let n = xnew.nrows();
    let rng = CounterRng::new(seed);
    // deterministic per path: collect in order
    let results: Vec<Result<(Array2<f64>, Array2<f64>)>> =
        crate::par::map_indexed(n_paths, |p| {
            let mut t = Tape::new();
            let (nodes, _) = bind_model(&mut t, model, None, false)?;
            let xv = t.constant(xnew.clone());
            let mut cur = if model.latent_dim > 0 {
                let mut h = Array2::zeros((n, model.latent_dim));
                for i in 0..n {
                    for c in 0..model.latent_dim {
                        h[[i, c]] =
                            rng.normal(Purpose::PathLatent, p as u64, i as u64, c as u64);
                    }
                }
                let hv = t.constant(h);
                if model.data_dim() == 0 {
                    hv
                } else {
                    t.concat_cols(&[xv, hv])
                }
            } else {
                xv
            };
            for l in 0..model.depth() - 1 {
                let mg = &nodes.layers[l];
                let mean_fn = crate::kernel::mean_apply(&mut t, &mg.lg.mean, cur);
                let mut cols = Vec::with_capacity(mg.lg.heads.len());
                for (d, head) in mg.lg.heads.iter().enumerate() {
                    let mc = t.slice_cols(mean_fn, d, d + 1);
                    let (m, cov) = head_predict_full(&mut t, &mg.lg, head, cur, mc);
                    let lcov = t.chol(cov)?;
                    let mut eps = Array2::zeros((n, 1));
                    for i in 0..n {
                        eps[[i, 0]] = rng.normal(
                            Purpose::PathNoise(l as u32),
                            p as u64,
                            i as u64,
                            d as u64,
                        );
                    }
                    let ec = t.constant(eps);
                    let noise = t.matmul(lcov, ec);
                    cols.push(t.add(m, noise));
                }
                let g = t.concat_cols(&cols);
                cur = match mg.w {
                    None => g,
                    Some(w) => {
                        let wt = t.transpose(w);
                        t.matmul(g, wt)
                    }
                };
            }
            let mg = nodes.layers.last().unwrap();
            let (fm, fv) = mo_predict_diag_graph(&mut t, mg, cur);
            Ok((t.value(fm).clone(), t.value(fv).clone()))
        });
    let mut means = Vec::with_capacity(n_paths);
    let mut vars = Vec::with_capacity(n_paths);
    for r in results {
        let (m, v) = r?;
        means.push(m);
        vars.push(v);
    }
    Ok(DeepPaths { means, vars })
}

impl DeepPaths {
    /// Mixture predictive moments of `y` per row.
    pub fn pooled_y_moments(
        &self,
        lik: &LikelihoodSpec,
        quad: &QuadratureRule,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let n = self.means[0].nrows();
        let p = self.means.len() as f64;
        let mut mean = Array1::zeros(n);
        let mut second = Array1::zeros(n);
        for (ms, vs) in self.means.iter().zip(self.vars.iter()) {
            for i in 0..n {
                let pred = self.predictive(lik, ms, vs, i, quad)?;
                mean[i] += pred.mean / p;
                second[i] += (pred.variance + pred.mean * pred.mean) / p;
            }
        }
        let var = &second - &mean.mapv(|m| m * m);
        Ok((mean, var))
    }

    /// Pooled log predictive density at observed targets, one per row.
    pub fn pooled_log_density(
        &self,
        lik: &LikelihoodSpec,
        y: &Array1<f64>,
        quad: &QuadratureRule,
    ) -> Result<Array1<f64>> {
        let n = self.means[0].nrows();
        if y.len() != n {
            return Err(Error::shape("target length mismatch"));
        }
        let mut out = Array1::zeros(n);
        for i in 0..n {
            let lps: Vec<f64> = self
                .means
                .iter()
                .zip(self.vars.iter())
                .map(|(ms, vs)| {
                    self.predictive(lik, ms, vs, i, quad).map(|p| p.log_density(y[i]))
                })
                .collect::<Result<_>>()?;
            let mx = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = lps.iter().map(|l| (l - mx).exp()).sum();
            out[i] = mx + (s / lps.len() as f64).ln();
        }
        Ok(out)
    }

    fn predictive(
        &self,
        lik: &LikelihoodSpec,
        means: &Array2<f64>,
        vars: &Array2<f64>,
        row: usize,
        quad: &QuadratureRule,
    ) -> Result<Predictive> {
        let m: Vec<f64> = means.row(row).to_vec();
        let v: Vec<f64> = vars.row(row).to_vec();
        predict_y(lik, &m, &v, quad)
    }
}

/// Convenience constructor: a single-layer model around one kernel.
pub fn shallow_model(
    kernel: crate::kernel::KernelSpec,
    mean: MeanSpec,
    inducing: crate::inducing::InducingSet,
    vstate: crate::layer::VariationalState,
    likelihood: LikelihoodSpec,
) -> ModelGraph {
    ModelGraph {
        layers: vec![MoLayer {
            kind: MoKind::SeparateIndependent,
            mean,
            inducing,
            per_output_z: None,
            kernels: vec![kernel],
            vstate,
        }],
        latent_dim: 0,
        likelihood,
    }
}
