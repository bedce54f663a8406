//! Command implementations behind the CLI surface.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use svgp::deep::{predict_deep, ObjectiveKind};
use svgp::likelihood::{LikelihoodSpec, QuadratureRule};
use svgp::rng::CounterRng;
use svgp::train::{evaluate_objective_repeated, fit};

use crate::checkpoint::{self, checkpoint_from_model, model_from_checkpoint};
use crate::dataset::{check_binary_targets, read_dataset, write_dataset};
use crate::error::{CliError, CliResult};
use crate::generate;
use crate::runconfig::{build_model, load_config, objective_from_name, train_config};

pub fn trace_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    out.with_file_name(format!("{stem}.trace.csv"))
}

pub fn cmd_fit(config_path: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = load_config(config_path)?;
    let data_path = if Path::new(&cfg.data).is_absolute() {
        PathBuf::from(&cfg.data)
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(&cfg.data)
    };
    let ds = read_dataset(&data_path)?;
    let y = ds.y_single()?;
    if matches!(cfg.model.likelihood, crate::runconfig::LikelihoodConfig::Bernoulli) {
        check_binary_targets(&y)?;
    }
    let (model, table) = build_model(&cfg, &ds.x, ds.n())?;
    let tc = train_config(&cfg)?;
    let quad = QuadratureRule::default();
    log::info!("fitting {} layer(s) on {} rows", model.depth(), ds.n());
    let result = fit(model, table, &ds.x, &y, &tc, &quad)?;

    let out_path = out.unwrap_or_else(|| PathBuf::from("model.json"));
    let ck = checkpoint_from_model(&result.model, result.table.as_ref(), tc.seed, tc.steps);
    checkpoint::save(&out_path, &ck)?;

    let tp = trace_path(&out_path);
    let mut w = csv::Writer::from_path(&tp)
        .map_err(|e| CliError::data(format!("{}: {e}", tp.display())))?;
    w.write_record(["step", "elbo", "wall_ms"])
        .map_err(|e| CliError::data(e.to_string()))?;
    for row in &result.trace {
        w.write_record([
            row.step.to_string(),
            format!("{}", row.elbo),
            format!("{}", row.wall_ms),
        ])
        .map_err(|e| CliError::data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "wrote {} and {} (final objective {:.6})",
        out_path.display(),
        tp.display(),
        result.trace.last().map(|t| t.elbo).unwrap_or(f64::NAN)
    );
    Ok(())
}

pub struct PredictArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub paths: usize,
    pub seed: u64,
    pub density_at: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<()> {
    let ck = checkpoint::load(&args.model)?;
    let (model, _table) = model_from_checkpoint(&ck)?;
    let ds = read_dataset(&args.data)?;
    if ds.x.ncols() != model.data_dim() {
        return Err(CliError::data(format!(
            "data has {} input columns, model expects {}",
            ds.x.ncols(),
            model.data_dim()
        )));
    }
    let quad = QuadratureRule::default();
    let paths = predict_deep(&model, &ds.x, args.paths, args.seed)?;
    let (mean, var) = paths.pooled_y_moments(&model.likelihood, &quad)?;
    let density = match &args.density_at {
        None => None,
        Some(p) => {
            let dens_ds = read_dataset(p)?;
            let ytarget = dens_ds.y_single()?;
            if ytarget.len() != ds.n() {
                return Err(CliError::data(format!(
                    "density targets have {} rows, data has {}",
                    ytarget.len(),
                    ds.n()
                )));
            }
            Some(paths.pooled_log_density(&model.likelihood, &ytarget, &quad)?)
        }
    };

    let mut header = vec!["mean".to_string(), "var".to_string()];
    if density.is_some() {
        header.push("log_density".to_string());
    }
    let write_to = |w: &mut dyn std::io::Write| -> CliResult<()> {
        writeln!(w, "{}", header.join(",")).map_err(CliError::from)?;
        for i in 0..ds.n() {
            let mut row = format!("{},{}", mean[i], var[i]);
            if let Some(d) = &density {
                row.push_str(&format!(",{}", d[i]));
            }
            writeln!(w, "{row}").map_err(CliError::from)?;
        }
        Ok(())
    };
    match &args.out {
        None => write_to(&mut std::io::stdout().lock()),
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            write_to(&mut f)
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub struct GenArgs {
    pub kind: String,
    pub out: PathBuf,
    pub seed: u64,
    pub n: usize,
    pub noise: f64,
    pub gap: f64,
    pub segments: usize,
    pub text: String,
    pub scale: f64,
    pub depth: usize,
    pub grid_n: usize,
    pub lo: f64,
    pub hi: f64,
    pub draws: usize,
    pub variance: f64,
    pub lengthscale: f64,
}

pub fn cmd_gen_data(a: &GenArgs) -> CliResult<()> {
    let rng = CounterRng::new(a.seed);
    let (x, y) = match a.kind.as_str() {
        "steps" => generate::steps(
            &generate::StepsParams { n: a.n, segments: a.segments, noise: a.noise },
            &rng,
        )?,
        "mixture" => generate::mixture(
            &generate::MixtureParams { n: a.n, gap: a.gap, noise: a.noise },
            &rng,
        )?,
        "letters" => generate::letters(
            &generate::LettersParams { text: a.text.clone(), scale: a.scale, noise: a.noise },
            &rng,
        )?,
        "prior-draw" => generate::prior_draw(
            &generate::PriorDrawParams {
                depth: a.depth,
                grid_n: a.grid_n,
                lo: a.lo,
                hi: a.hi,
                draws: a.draws,
                variance: a.variance,
                lengthscale: a.lengthscale,
            },
            &rng,
        )?,
        other => {
            return Err(CliError::config(format!(
                "unknown kind {other:?} (expected steps|mixture|letters|prior-draw)"
            )))
        }
    };
    write_dataset(&a.out, &x, &y)?;
    println!("wrote {} ({} rows)", a.out.display(), x.nrows());
    Ok(())
}

pub struct ElboArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub objective: String,
    pub s: usize,
    pub mc: usize,
    pub seed: u64,
}

pub fn cmd_elbo(args: &ElboArgs) -> CliResult<()> {
    let ck = checkpoint::load(&args.model)?;
    let (model, table) = model_from_checkpoint(&ck)?;
    let ds = read_dataset(&args.data)?;
    let y = ds.y_single()?;
    if matches!(model.likelihood, LikelihoodSpec::Bernoulli) {
        check_binary_targets(&y)?;
    }
    let name = objective_from_name(&args.objective)?;
    let kind = match name {
        svgp::train::ObjectiveName::Elbo => ObjectiveKind::Elbo,
        svgp::train::ObjectiveName::Deep => ObjectiveKind::Deep { n_mc: 1 },
        svgp::train::ObjectiveName::Lv => ObjectiveKind::Lv { n_mc: 1 },
        svgp::train::ObjectiveName::IwLv => {
            ObjectiveKind::IwLv(svgp::deep::IWConfig::new(args.s, 1))
        }
    };
    let quad = QuadratureRule::default();
    let (mean, se) = evaluate_objective_repeated(
        &model,
        table.as_ref(),
        &ds.x,
        &y,
        kind,
        args.seed,
        args.mc,
        &quad,
    )?;
    println!("mean={mean} se={se}");
    Ok(())
}

/// Closed-form expected log likelihood of a prior-state Gaussian model; kept
/// here for hand checks against `cmd_elbo`.
pub fn prior_gaussian_expected_loglik(
    prior_var: &Array1<f64>,
    y: &Array1<f64>,
    noise: f64,
) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    y.iter()
        .zip(prior_var.iter())
        .map(|(&yi, &v)| -0.5 * (ln2pi + noise.ln()) - (yi * yi + v) / (2.0 * noise))
        .sum()
}
