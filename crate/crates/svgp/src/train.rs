//! Gradient evaluation, finite-difference auditing, Adam ascent and the
//! minibatched training loop with a generative-parameter freeze phase.

use ndarray::{Array1, Array2};

use crate::deep::{
    apply_model, bind_model, build_objective, EvalCtx, IWConfig, LatentPosteriorTable,
    ModelGraph, ObjectiveKind,
};
use crate::error::{Error, Result};
use crate::likelihood::QuadratureRule;
use crate::params::{ParamDecl, Role};
use crate::rng::{CounterRng, Purpose};
use crate::tape::Tape;

/// Named objective selector for configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveName {
    Elbo,
    Deep,
    Lv,
    IwLv,
}

/// Training configuration. `learning_rate = 0` is allowed so that
/// evaluation-only runs (used by the determinism and partition identities)
/// leave parameters untouched.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub freeze_generative_steps: usize,
    pub seed: u64,
    pub n_mc: usize,
    pub iw: Option<IWConfig>,
    pub objective: ObjectiveName,
}

impl TrainConfig {
    pub fn defaults(objective: ObjectiveName, seed: u64) -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 256,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_generative_steps: 500,
            seed,
            n_mc: 1,
            iw: None,
            objective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be nonnegative".into()));
        }
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be >= 1".into()));
        }
        if self.objective == ObjectiveName::IwLv && self.iw.is_none() {
            return Err(Error::Config("iw_lv objective requires iw settings".into()));
        }
        Ok(())
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self.objective {
            ObjectiveName::Elbo => ObjectiveKind::Elbo,
            ObjectiveName::Deep => ObjectiveKind::Deep { n_mc: self.n_mc },
            ObjectiveName::Lv => ObjectiveKind::Lv { n_mc: self.n_mc },
            ObjectiveName::IwLv => {
                ObjectiveKind::IwLv(self.iw.unwrap_or(IWConfig { s: 1, outer_mc: self.n_mc }))
            }
        }
    }
}

/// Flat registry snapshot of every model parameter.
pub struct ParameterSet {
    pub decls: Vec<ParamDecl>,
    pub values: Vec<Array2<f64>>,
}

impl ParameterSet {
    /// Collect the registry from a model (and optional latent table).
    pub fn collect(model: &ModelGraph, table: Option<&LatentPosteriorTable>) -> Result<Self> {
        let mut t = Tape::new();
        let (_, binding) = bind_model(&mut t, model, table, true)?;
        let values = binding.vars.iter().map(|&v| t.value(v).clone()).collect();
        Ok(ParameterSet { decls: binding.decls, values })
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.decls.iter().position(|d| d.name == name)
    }
}

/// Objective value and named gradients at the current parameters.
pub struct GradResult {
    pub value: f64,
    pub decls: Vec<ParamDecl>,
    pub grads: Vec<Array2<f64>>,
    pub jitter_events: usize,
}

/// Exact reverse-mode gradients of the seeded objective.
pub fn grad_objective(
    model: &ModelGraph,
    table: Option<&LatentPosteriorTable>,
    ctx: &EvalCtx,
    kind: ObjectiveKind,
) -> Result<GradResult> {
    let mut t = Tape::new();
    let (nodes, binding) = bind_model(&mut t, model, table, true)?;
    let obj = build_objective(&mut t, &nodes, model, ctx, kind)?;
    let value = t.scalar(obj);
    let g = t.backward(obj);
    let mut grads = Vec::with_capacity(binding.vars.len());
    for (i, &v) in binding.vars.iter().enumerate() {
        let arr = g.of(v, &t);
        if !arr.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {}",
                binding.decls[i].name
            )));
        }
        grads.push(arr);
    }
    Ok(GradResult { value, decls: binding.decls, grads, jitter_events: t.jitter_events })
}

/// Worst-offender report from the central-difference audit.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_entry: (usize, usize),
    pub checked: usize,
}

impl AuditReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Central differences with common random numbers against the reverse-mode
/// gradient. Entries where both gradients are below `1e-7` in magnitude are
/// counted as checked but contribute no error.
pub fn fd_audit(
    model: &ModelGraph,
    table: Option<&LatentPosteriorTable>,
    ctx: &EvalCtx,
    kind: ObjectiveKind,
    h: f64,
) -> Result<AuditReport> {
    let gr = grad_objective(model, table, ctx, kind)?;
    let params = ParameterSet::collect(model, table)?;

    // flatten (param, row, col) work items
    let mut items = Vec::new();
    for (p, arr) in params.values.iter().enumerate() {
        for r in 0..arr.nrows() {
            for c in 0..arr.ncols() {
                items.push((p, r, c));
            }
        }
    }
    let eval_at = |values: &[Array2<f64>]| -> Result<f64> {
        let mut m = model.clone();
        let mut tab = table.cloned();
        apply_model(&mut m, tab.as_mut(), values);
        Ok(crate::deep::eval_objective(&m, tab.as_ref(), ctx, kind)?.0)
    };
    let rels: Vec<Result<f64>> = crate::par::map_indexed(items.len(), |i| {
        let (p, r, c) = items[i];
        let mut vp = params.values.clone();
        vp[p][[r, c]] += h;
        let fplus = eval_at(&vp)?;
        vp[p][[r, c]] -= 2.0 * h;
        let fminus = eval_at(&vp)?;
        let fd = (fplus - fminus) / (2.0 * h);
        let ad = gr.grads[p][[r, c]];
        let mag = fd.abs().max(ad.abs());
        Ok(if mag < 1e-7 { 0.0 } else { (fd - ad).abs() / mag })
    });
    let mut report = AuditReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_entry: (0, 0),
        checked: items.len(),
    };
    for (i, r) in rels.into_iter().enumerate() {
        let rel = r?;
        if rel > report.max_rel_err {
            let (p, row, col) = items[i];
            report.max_rel_err = rel;
            report.worst_param = params.decls[p].name.clone();
            report.worst_entry = (row, col);
        }
    }
    Ok(report)
}

/// Adam moment state.
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: usize,
}

impl AdamState {
    pub fn new(values: &[Array2<f64>]) -> Self {
        AdamState {
            m: values.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            v: values.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam ascent step (the objective is maximized).
pub fn adam_step(
    values: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as f64;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    for (i, val) in values.iter_mut().enumerate() {
        let g = &grads[i];
        state.m[i] = &state.m[i] * b1 + &(g * (1.0 - b1));
        state.v[i] = &state.v[i] * b2 + &g.mapv(|x| x * x) * (1.0 - b2);
        let mhat = &state.m[i] / (1.0 - b1.powf(t));
        let vhat = &state.v[i] / (1.0 - b2.powf(t));
        let update = mhat / (vhat.mapv(f64::sqrt) + cfg.eps);
        *val += &(update * cfg.learning_rate);
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub elbo: f64,
    pub jitter_events: usize,
    pub wall_ms: f64,
}

pub struct FitResult {
    pub model: ModelGraph,
    pub table: Option<LatentPosteriorTable>,
    pub trace: Vec<TraceRow>,
}

/// Minibatched Adam ascent with seeded epoch shuffling and a frozen phase in
/// which generative-role gradients are zeroed.
pub fn fit(
    mut model: ModelGraph,
    mut table: Option<LatentPosteriorTable>,
    x: &Array2<f64>,
    y: &Array1<f64>,
    config: &TrainConfig,
    quad: &QuadratureRule,
) -> Result<FitResult> {
    config.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::shape("training data must be nonempty"));
    }
    if y.len() != n {
        return Err(Error::shape("x and y row counts differ"));
    }
    let bsize = config.batch_size.min(n);
    let nbatches = n.div_ceil(bsize);
    let rng = CounterRng::new(config.seed);
    let kind = config.kind();

    let params = ParameterSet::collect(&model, table.as_ref())?;
    let mut values = params.values;
    let decls = params.decls;
    let mut adam = AdamState::new(&values);
    let mut trace = Vec::with_capacity(config.steps);
    let mut nonfinite_streak = 0usize;
    let mut perm: Vec<usize> = (0..n).collect();

    let start = std::time::Instant::now();
    for step in 0..config.steps {
        let bidx = step % nbatches;
        if bidx == 0 {
            let epoch = (step / nbatches) as u64;
            perm = rng.permutation(Purpose::Shuffle, epoch, n);
        }
        let lo = bidx * bsize;
        let hi = (lo + bsize).min(n);
        let rows: Vec<usize> = perm[lo..hi].to_vec();
        let xb = {
            let mut b = Array2::zeros((rows.len(), x.ncols()));
            for (i, &r) in rows.iter().enumerate() {
                b.row_mut(i).assign(&x.row(r));
            }
            b
        };
        let yb: Array1<f64> = rows.iter().map(|&r| y[r]).collect();
        let ctx = EvalCtx {
            x: &xb,
            y: &yb,
            rows: &rows,
            total_n: n,
            seed: config.seed,
            step: step as u64,
            quad,
        };
        let gr = match grad_objective(&model, table.as_ref(), &ctx, kind) {
            Ok(gr) if gr.value.is_finite() => {
                nonfinite_streak = 0;
                gr
            }
            Ok(_) | Err(Error::NonFinite(_)) => {
                nonfinite_streak += 1;
                log::warn!("non-finite objective at step {step} ({nonfinite_streak} consecutive)");
                if nonfinite_streak >= 10 {
                    return Err(Error::Divergence(nonfinite_streak));
                }
                trace.push(TraceRow {
                    step,
                    elbo: f64::NAN,
                    jitter_events: 0,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut grads = gr.grads;
        if step < config.freeze_generative_steps {
            for (i, d) in decls.iter().enumerate() {
                if d.role == Role::Generative {
                    grads[i].fill(0.0);
                }
            }
        }
        adam_step(&mut values, &grads, &mut adam, config);
        apply_model(&mut model, table.as_mut(), &values);
        if step % 100 == 0 {
            log::info!("step {step}: objective {:.6}", gr.value);
        }
        trace.push(TraceRow {
            step,
            elbo: gr.value,
            jitter_events: gr.jitter_events,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(FitResult { model, table, trace })
}

/// Evaluate the configured objective on held-out data without updating
/// parameters; returns mean and standard error over `reps` seeded
/// repetitions of the stochastic estimator.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective_repeated(
    model: &ModelGraph,
    table: Option<&LatentPosteriorTable>,
    x: &Array2<f64>,
    y: &Array1<f64>,
    kind: ObjectiveKind,
    seed: u64,
    reps: usize,
    quad: &QuadratureRule,
) -> Result<(f64, f64)> {
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let vals: Vec<Result<f64>> = crate::par::map_indexed(reps, |r| {
        let ctx = EvalCtx {
            x,
            y,
            rows: &rows,
            total_n: x.nrows(),
            seed,
            step: r as u64,
            quad,
        };
        Ok(crate::deep::eval_objective(model, table, &ctx, kind)?.0)
    });
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let se = if reps > 1 {
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
        (var / reps as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient_through_tape() {
        // ½(θ−3)² at θ=0 has gradient −3
        let mut t = Tape::new();
        let theta = t.scalar_leaf(0.0);
        let c = t.add_const(theta, -3.0);
        let sq = t.sqr(c);
        let obj = t.scale(sq, 0.5);
        let g = t.backward(obj).of(theta, &t);
        assert!((g[[0, 0]] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let cfg = TrainConfig::defaults(ObjectiveName::Elbo, 0);
        let mut values = vec![array![[1.0, -2.0]]];
        let grads = vec![array![[0.0, 0.0]]];
        let mut st = AdamState::new(&values);
        adam_step(&mut values, &grads, &mut st, &cfg);
        assert_eq!(values[0], array![[1.0, -2.0]]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut cfg = TrainConfig::defaults(ObjectiveName::Elbo, 0);
        cfg.learning_rate = 0.05;
        let mut values = vec![array![[0.0, 0.0]]];
        let grads = vec![array![[2.5, -0.3]]];
        let mut st = AdamState::new(&values);
        adam_step(&mut values, &grads, &mut st, &cfg);
        assert!((values[0][[0, 0]] - 0.05).abs() < 1e-6);
        assert!((values[0][[0, 1]] + 0.05).abs() < 1e-6);
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = TrainConfig::defaults(ObjectiveName::Elbo, 0);
        let run = || {
            let mut values = vec![array![[0.4], [1.2]]];
            let grads = vec![array![[0.3], [-0.8]]];
            let mut st = AdamState::new(&values);
            for _ in 0..5 {
                adam_step(&mut values, &grads, &mut st, &cfg);
            }
            values
        };
        assert_eq!(run(), run());
    }
}
