//! Model checkpoints: a single human-readable JSON document holding the
//! topology, every raw parameter tensor, the whitening mode and the rng
//! lineage. The f64 encoding round-trips bit-exactly; unknown fields and
//! foreign versions are rejected.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use svgp::deep::{LatentPosteriorTable, ModelGraph};
use svgp::inducing::InducingSet;
use svgp::kernel::{KernelSpec, MeanSpec};
use svgp::layer::{VariationalState, Whitening};
use svgp::likelihood::LikelihoodSpec;
use svgp::multioutput::{MoKind, MoLayer};

use crate::error::{CliError, CliResult};

pub const CHECKPOINT_VERSION: u32 = 1;

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_mat(m: &Mat, what: &str) -> CliResult<Array2<f64>> {
    let rows = m.len();
    let cols = m.first().map(|r| r.len()).unwrap_or(0);
    if m.iter().any(|r| r.len() != cols) {
        return Err(CliError::config(format!("{what}: ragged matrix")));
    }
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| CliError::config(format!("{what}: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub step: usize,
    pub latent_dim: usize,
    pub likelihood: LikDto,
    pub layers: Vec<LayerDto>,
    pub latent_table: Option<LatentDto>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "type")]
pub enum LikDto {
    Gaussian { variance_raw: f64 },
    Bernoulli,
    Hetero,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "type")]
pub enum KindDto {
    Separate,
    Lmc { w: Mat },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "type")]
pub enum MeanDto {
    Zero { outputs: usize },
    Constant { values: Vec<f64> },
    Linear { weight: Mat, bias: Vec<f64> },
    Identity { dim: usize },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "type")]
pub enum InducingDto {
    Dirac { z: Mat },
    Derivative { z: Mat, dims: Vec<usize> },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDto {
    pub variance_raw: f64,
    pub lengthscales_raw: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDto {
    pub kind: KindDto,
    pub mean: MeanDto,
    pub inducing: InducingDto,
    pub per_output_z: Option<Vec<InducingDto>>,
    pub kernels: Vec<KernelDto>,
    pub whitening: String,
    pub q_mean: Mat,
    pub q_sqrt_raw: Vec<Mat>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDto {
    pub mean: Mat,
    pub sqrt_raw: Mat,
}

fn whitening_name(w: Whitening) -> &'static str {
    match w {
        Whitening::Full => "full",
        Whitening::MeanOnly => "mean_only",
        Whitening::None => "none",
    }
}

fn inducing_dto(ind: &InducingSet) -> InducingDto {
    match ind {
        InducingSet::Dirac { z } => InducingDto::Dirac { z: to_mat(z) },
        InducingSet::Derivative { z, dims } => {
            InducingDto::Derivative { z: to_mat(z), dims: dims.clone() }
        }
    }
}

fn inducing_from(dto: &InducingDto) -> CliResult<InducingSet> {
    Ok(match dto {
        InducingDto::Dirac { z } => InducingSet::Dirac { z: from_mat(z, "inducing.z")? },
        InducingDto::Derivative { z, dims } => {
            InducingSet::Derivative { z: from_mat(z, "inducing.z")?, dims: dims.clone() }
        }
    })
}

pub fn checkpoint_from_model(
    model: &ModelGraph,
    table: Option<&LatentPosteriorTable>,
    seed: u64,
    step: usize,
) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        seed,
        step,
        latent_dim: model.latent_dim,
        likelihood: match &model.likelihood {
            LikelihoodSpec::GaussianHomo { variance_raw } => {
                LikDto::Gaussian { variance_raw: *variance_raw }
            }
            LikelihoodSpec::Bernoulli => LikDto::Bernoulli,
            LikelihoodSpec::GaussianHetero => LikDto::Hetero,
        },
        layers: model
            .layers
            .iter()
            .map(|l| LayerDto {
                kind: match &l.kind {
                    MoKind::SeparateIndependent => KindDto::Separate,
                    MoKind::Lmc { w } => KindDto::Lmc { w: to_mat(w) },
                },
                mean: match &l.mean {
                    MeanSpec::Zero { outputs } => MeanDto::Zero { outputs: *outputs },
                    MeanSpec::Constant { values } => {
                        MeanDto::Constant { values: values.to_vec() }
                    }
                    MeanSpec::Linear { weight, bias } => {
                        MeanDto::Linear { weight: to_mat(weight), bias: bias.to_vec() }
                    }
                    MeanSpec::Identity { dim } => MeanDto::Identity { dim: *dim },
                },
                inducing: inducing_dto(&l.inducing),
                per_output_z: l
                    .per_output_z
                    .as_ref()
                    .map(|per| per.iter().map(inducing_dto).collect()),
                kernels: l
                    .kernels
                    .iter()
                    .map(|k| KernelDto {
                        variance_raw: k.variance_raw,
                        lengthscales_raw: k.lengthscales_raw.to_vec(),
                    })
                    .collect(),
                whitening: whitening_name(l.vstate.whitening).to_string(),
                q_mean: to_mat(&l.vstate.q_mean),
                q_sqrt_raw: l.vstate.q_sqrt_raw.iter().map(to_mat).collect(),
            })
            .collect(),
        latent_table: table.map(|t| LatentDto {
            mean: to_mat(&t.mean),
            sqrt_raw: to_mat(&t.sqrt_raw),
        }),
    }
}

pub fn model_from_checkpoint(
    ck: &Checkpoint,
) -> CliResult<(ModelGraph, Option<LatentPosteriorTable>)> {
    let likelihood = match &ck.likelihood {
        LikDto::Gaussian { variance_raw } => {
            LikelihoodSpec::GaussianHomo { variance_raw: *variance_raw }
        }
        LikDto::Bernoulli => LikelihoodSpec::Bernoulli,
        LikDto::Hetero => LikelihoodSpec::GaussianHetero,
    };
    let mut layers = Vec::with_capacity(ck.layers.len());
    for (i, l) in ck.layers.iter().enumerate() {
        let whitening = crate::runconfig::whitening_from_name(&l.whitening)?;
        let kind = match &l.kind {
            KindDto::Separate => MoKind::SeparateIndependent,
            KindDto::Lmc { w } => MoKind::Lmc { w: from_mat(w, "lmc.w")? },
        };
        let mean = match &l.mean {
            MeanDto::Zero { outputs } => MeanSpec::Zero { outputs: *outputs },
            MeanDto::Constant { values } => {
                MeanSpec::Constant { values: Array1::from_vec(values.clone()) }
            }
            MeanDto::Linear { weight, bias } => MeanSpec::Linear {
                weight: from_mat(weight, "mean.weight")?,
                bias: Array1::from_vec(bias.clone()),
            },
            MeanDto::Identity { dim } => MeanSpec::Identity { dim: *dim },
        };
        let q_mean = from_mat(&l.q_mean, "q_mean")?;
        let q_sqrt_raw = l
            .q_sqrt_raw
            .iter()
            .map(|m| from_mat(m, "q_sqrt_raw"))
            .collect::<CliResult<Vec<_>>>()?;
        let kernels = l
            .kernels
            .iter()
            .map(|k| KernelSpec {
                variance_raw: k.variance_raw,
                lengthscales_raw: Array1::from_vec(k.lengthscales_raw.clone()),
            })
            .collect();
        let layer = MoLayer {
            kind,
            mean,
            inducing: inducing_from(&l.inducing)?,
            per_output_z: match &l.per_output_z {
                None => None,
                Some(per) => {
                    Some(per.iter().map(inducing_from).collect::<CliResult<Vec<_>>>()?)
                }
            },
            kernels,
            vstate: VariationalState { q_mean, q_sqrt_raw, whitening },
        };
        layer
            .validate()
            .map_err(|e| CliError::config(format!("layers[{i}]: {e}")))?;
        layers.push(layer);
    }
    let model = ModelGraph { layers, latent_dim: ck.latent_dim, likelihood };
    model.validate().map_err(CliError::from)?;
    let table = match &ck.latent_table {
        None => None,
        Some(t) => Some(LatentPosteriorTable {
            mean: from_mat(&t.mean, "latent.mean")?,
            sqrt_raw: from_mat(&t.sqrt_raw, "latent.sqrt_raw")?,
        }),
    };
    Ok((model, table))
}

pub fn save(path: &std::path::Path, ck: &Checkpoint) -> CliResult<()> {
    let text = serde_json::to_string_pretty(ck)
        .map_err(|e| CliError::config(format!("checkpoint encode: {e}")))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> CliResult<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    // surface a versioned error before strict field checks
    if let Ok(head) = serde_json::from_str::<serde_json::Value>(&text) {
        match head.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v as u32 == CHECKPOINT_VERSION => {}
            Some(v) => {
                return Err(CliError::config(format!(
                    "checkpoint version {v} not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(CliError::config("checkpoint missing version field")),
        }
    }
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}
