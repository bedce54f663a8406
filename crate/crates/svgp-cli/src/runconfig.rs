//! Run configuration: schema-validated JSON mirroring the training options
//! plus the model topology and data paths.

use serde::{Deserialize, Serialize};
use svgp::deep::{IWConfig, LatentPosteriorTable, ModelGraph};
use svgp::inducing::{init_inducing_points, InducingSet};
use svgp::kernel::{KernelSpec, MeanSpec};
use svgp::layer::{VariationalState, Whitening};
use svgp::likelihood::LikelihoodSpec;
use svgp::multioutput::{MoKind, MoLayer};
use svgp::rng::CounterRng;
use svgp::train::{ObjectiveName, TrainConfig};
use ndarray::Array2;

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: String,
    pub model: ModelConfig,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub latent_dim: usize,
    pub likelihood: LikelihoodConfig,
    pub layers: Vec<LayerConfig>,
    #[serde(default = "default_whitening")]
    pub whitening: String,
}

fn default_whitening() -> String {
    "full".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "type")]
pub enum LikelihoodConfig {
    Gaussian { variance: f64 },
    Bernoulli,
    Hetero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub outputs: usize,
    /// Latent GP count for a coregionalized layer; absent means separate
    /// independent outputs.
    #[serde(default)]
    pub lmc_latents: Option<usize>,
    pub inducing: usize,
    pub kernel: KernelConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub variance: f64,
    /// One lengthscale broadcast across input dims, or one per dim.
    pub lengthscales: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub objective: String,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_freeze")]
    pub freeze_generative_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_nmc")]
    pub n_mc: usize,
    #[serde(default)]
    pub s: Option<usize>,
    #[serde(default)]
    pub outer_mc: Option<usize>,
}

fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_freeze() -> usize {
    500
}
fn default_nmc() -> usize {
    1
}

pub fn load_config(path: &std::path::Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::config(format!(
            "unsupported config version {} (expected {CONFIG_VERSION})",
            cfg.version
        )));
    }
    validate(&cfg)?;
    Ok(cfg)
}

pub fn objective_from_name(name: &str) -> CliResult<ObjectiveName> {
    match name {
        "elbo" => Ok(ObjectiveName::Elbo),
        "deep" => Ok(ObjectiveName::Deep),
        "lv" => Ok(ObjectiveName::Lv),
        "iw_lv" => Ok(ObjectiveName::IwLv),
        other => Err(CliError::config(format!(
            "train.objective: unknown objective {other:?} (expected elbo|deep|lv|iw_lv)"
        ))),
    }
}

pub fn whitening_from_name(name: &str) -> CliResult<Whitening> {
    match name {
        "full" => Ok(Whitening::Full),
        "mean_only" => Ok(Whitening::MeanOnly),
        "none" => Ok(Whitening::None),
        other => Err(CliError::config(format!(
            "model.whitening: unknown mode {other:?} (expected full|mean_only|none)"
        ))),
    }
}

fn validate(cfg: &RunConfig) -> CliResult<()> {
    if cfg.model.layers.is_empty() {
        return Err(CliError::config("model.layers: at least one layer required"));
    }
    for (i, l) in cfg.model.layers.iter().enumerate() {
        if l.outputs == 0 {
            return Err(CliError::config(format!("model.layers[{i}].outputs must be >= 1")));
        }
        if l.inducing == 0 {
            return Err(CliError::config(format!("model.layers[{i}].inducing must be >= 1")));
        }
        if l.kernel.variance <= 0.0 {
            return Err(CliError::config(format!(
                "model.layers[{i}].kernel.variance must be positive"
            )));
        }
        if l.kernel.lengthscales.is_empty() || l.kernel.lengthscales.iter().any(|&v| v <= 0.0) {
            return Err(CliError::config(format!(
                "model.layers[{i}].kernel.lengthscales must be positive"
            )));
        }
        if let Some(dg) = l.lmc_latents {
            if dg == 0 {
                return Err(CliError::config(format!(
                    "model.layers[{i}].lmc_latents must be >= 1"
                )));
            }
        }
    }
    if let LikelihoodConfig::Gaussian { variance } = cfg.model.likelihood {
        if variance <= 0.0 {
            return Err(CliError::config("model.likelihood.variance must be positive"));
        }
    }
    objective_from_name(&cfg.train.objective)?;
    whitening_from_name(&cfg.model.whitening)?;
    if cfg.train.steps == 0 {
        return Err(CliError::config("train.steps must be >= 1"));
    }
    if cfg.train.batch_size == 0 {
        return Err(CliError::config("train.batch_size must be >= 1"));
    }
    if cfg.train.objective == "iw_lv" && cfg.train.s.is_none() {
        return Err(CliError::config("train.s required for the iw_lv objective"));
    }
    let wants_latent = cfg.train.objective == "lv" || cfg.train.objective == "iw_lv";
    if wants_latent && cfg.model.latent_dim == 0 {
        return Err(CliError::config(
            "latent objectives require model.latent_dim >= 1",
        ));
    }
    Ok(())
}

pub fn likelihood_from_config(cfg: &LikelihoodConfig) -> LikelihoodSpec {
    match cfg {
        LikelihoodConfig::Gaussian { variance } => LikelihoodSpec::gaussian(*variance),
        LikelihoodConfig::Bernoulli => LikelihoodSpec::Bernoulli,
        LikelihoodConfig::Hetero => LikelihoodSpec::GaussianHetero,
    }
}

pub fn train_config(cfg: &RunConfig) -> CliResult<TrainConfig> {
    let objective = objective_from_name(&cfg.train.objective)?;
    Ok(TrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        freeze_generative_steps: cfg.train.freeze_generative_steps,
        seed: cfg.train.seed,
        n_mc: cfg.train.n_mc,
        iw: cfg
            .train
            .s
            .map(|s| IWConfig::new(s, cfg.train.outer_mc.unwrap_or(cfg.train.n_mc))),
        objective,
    })
}

/// Instantiate the model for a dataset: inner-layer prior means follow the
/// identity-when-possible rule, inducing points start on (a carrier of) the
/// training inputs, and non-terminal layers get low-variance states.
pub fn build_model(
    cfg: &RunConfig,
    x: &Array2<f64>,
    n: usize,
) -> CliResult<(ModelGraph, Option<LatentPosteriorTable>)> {
    let rng = CounterRng::new(cfg.train.seed);
    let whitening = whitening_from_name(&cfg.model.whitening)?;
    let data_dim = x.ncols();
    let depth = cfg.model.layers.len();
    let mut layers = Vec::with_capacity(depth);
    let mut din = data_dim + cfg.model.latent_dim;
    if din == 0 {
        return Err(CliError::config(
            "model has zero input dimension; unsupervised runs need latent_dim >= 1",
        ));
    }
    for (i, lc) in cfg.model.layers.iter().enumerate() {
        let dout = lc.outputs;
        let d_g = lc.lmc_latents.unwrap_or(dout);
        let kind = match lc.lmc_latents {
            None => MoKind::SeparateIndependent,
            Some(dg) => MoKind::Lmc { w: MoLayer::lmc_init_w(dout, dg, &rng) },
        };
        let lengths: Vec<f64> = if lc.kernel.lengthscales.len() == 1 {
            vec![lc.kernel.lengthscales[0]; din]
        } else if lc.kernel.lengthscales.len() == din {
            lc.kernel.lengthscales.clone()
        } else {
            return Err(CliError::config(format!(
                "model.layers[{i}].kernel.lengthscales: expected 1 or {din} values"
            )));
        };
        let kernels: Vec<KernelSpec> =
            (0..d_g).map(|_| KernelSpec::rbf(lc.kernel.variance, &lengths)).collect();
        let terminal = i + 1 == depth;
        let mean = if terminal {
            MeanSpec::Zero { outputs: d_g }
        } else if din == d_g {
            MeanSpec::Identity { dim: din }
        } else {
            let mut w = Array2::zeros((d_g, din));
            for k in 0..d_g.min(din) {
                w[[k, k]] = 1.0;
            }
            MeanSpec::Linear { weight: w, bias: ndarray::Array1::zeros(d_g) }
        };
        // carrier for inducing init: data columns padded with unit normals
        let carrier = {
            let mut c = Array2::zeros((x.nrows().max(1), din));
            for r in 0..x.nrows() {
                for j in 0..din {
                    c[[r, j]] = if j < data_dim {
                        x[[r, j]]
                    } else {
                        rng.normal(svgp::rng::Purpose::Init, 10 + i as u64, r as u64, j as u64)
                    };
                }
            }
            c
        };
        let z = init_inducing_points(&carrier, lc.inducing, &rng);
        let vstate = if terminal {
            VariationalState::prior_init(lc.inducing, d_g, whitening)
        } else {
            VariationalState::low_variance_init(lc.inducing, d_g, 1e-5, whitening)
        };
        layers.push(MoLayer {
            kind,
            mean,
            inducing: InducingSet::Dirac { z },
            per_output_z: None,
            kernels,
            vstate,
        });
        din = dout;
    }
    let model = ModelGraph {
        layers,
        latent_dim: cfg.model.latent_dim,
        likelihood: likelihood_from_config(&cfg.model.likelihood),
    };
    model.validate().map_err(CliError::from)?;
    let table = if cfg.model.latent_dim > 0 {
        Some(LatentPosteriorTable::init(n, cfg.model.latent_dim, &rng))
    } else {
        None
    };
    Ok((model, table))
}
