//! Synthetic dataset generators: piecewise-constant steps, a two-branch
//! mixture, rasterized letters, and joint prior-cascade draws.

use ndarray::{Array1, Array2};
use svgp::gauss::{self, Gaussian};
use svgp::kernel::{kern_matrix, KernelSpec};
use svgp::rng::{CounterRng, Purpose};

use crate::error::{CliError, CliResult};
use crate::font;

pub struct StepsParams {
    pub n: usize,
    pub segments: usize,
    pub noise: f64,
}

pub fn steps(p: &StepsParams, rng: &CounterRng) -> CliResult<(Array2<f64>, Array2<f64>)> {
    if p.n < 2 || p.segments == 0 {
        return Err(CliError::config("steps: need n >= 2 and segments >= 1"));
    }
    let levels: Vec<f64> =
        (0..p.segments).map(|k| rng.normal(Purpose::Synth, 1, k as u64, 0)).collect();
    let mut x = Array2::zeros((p.n, 1));
    let mut y = Array2::zeros((p.n, 1));
    for i in 0..p.n {
        let xi = i as f64 / (p.n - 1) as f64;
        let seg = ((xi * p.segments as f64) as usize).min(p.segments - 1);
        x[[i, 0]] = xi;
        y[[i, 0]] = levels[seg] + p.noise * rng.normal(Purpose::Synth, 2, i as u64, 0);
    }
    Ok((x, y))
}

pub struct MixtureParams {
    pub n: usize,
    pub gap: f64,
    pub noise: f64,
}

/// Two smooth branches around a common trend, branch picked per point with
/// probability one half; `gap = 0` collapses to a unimodal dataset.
pub fn mixture(p: &MixtureParams, rng: &CounterRng) -> CliResult<(Array2<f64>, Array2<f64>)> {
    if p.n == 0 {
        return Err(CliError::config("mixture: need n >= 1"));
    }
    let mut x = Array2::zeros((p.n, 1));
    let mut y = Array2::zeros((p.n, 1));
    for i in 0..p.n {
        let xi = rng.uniform(Purpose::Synth, 3, i as u64, 0);
        let branch = if rng.uniform(Purpose::Synth, 4, i as u64, 0) > 0.5 { 0.5 } else { -0.5 };
        let base = 0.3 * (2.0 * std::f64::consts::PI * xi).sin();
        x[[i, 0]] = xi;
        y[[i, 0]] = base + branch * p.gap + p.noise * rng.normal(Purpose::Synth, 5, i as u64, 0);
    }
    Ok((x, y))
}

pub struct LettersParams {
    pub text: String,
    pub scale: f64,
    pub noise: f64,
}

/// `(x, y)` pairs at the dark pixels of the rasterized text.
pub fn letters(p: &LettersParams, rng: &CounterRng) -> CliResult<(Array2<f64>, Array2<f64>)> {
    if p.text.is_empty() {
        return Err(CliError::config("letters: text must be nonempty"));
    }
    if p.scale <= 0.0 {
        return Err(CliError::config("letters: scale must be positive"));
    }
    let pts = font::render(&p.text, p.scale)
        .map_err(|c| CliError::config(format!("letters: unsupported character {c:?}")))?;
    let mut x = Array2::zeros((pts.len(), 1));
    let mut y = Array2::zeros((pts.len(), 1));
    for (i, (px, py)) in pts.iter().enumerate() {
        x[[i, 0]] = px + p.noise * rng.normal(Purpose::Synth, 6, i as u64, 0);
        y[[i, 0]] = py + p.noise * rng.normal(Purpose::Synth, 7, i as u64, 0);
    }
    Ok((x, y))
}

pub struct PriorDrawParams {
    pub depth: usize,
    pub grid_n: usize,
    pub lo: f64,
    pub hi: f64,
    pub draws: usize,
    pub variance: f64,
    pub lengthscale: f64,
}

/// Joint draws from a zero-mean RBF prior cascade: the grid is propagated
/// depth times, each level sampling jointly from the kernel evaluated at the
/// previous level's values.
pub fn prior_draw(p: &PriorDrawParams, rng: &CounterRng) -> CliResult<(Array2<f64>, Array2<f64>)> {
    if p.depth == 0 || p.grid_n < 2 || p.draws == 0 {
        return Err(CliError::config("prior-draw: need depth >= 1, grid_n >= 2, draws >= 1"));
    }
    if !(p.hi > p.lo) || p.variance <= 0.0 || p.lengthscale <= 0.0 {
        return Err(CliError::config("prior-draw: invalid grid or kernel parameters"));
    }
    let g = p.grid_n;
    let mut x = Array2::zeros((g, 1));
    for i in 0..g {
        x[[i, 0]] = p.lo + (p.hi - p.lo) * i as f64 / (g - 1) as f64;
    }
    let kernel = KernelSpec::rbf(p.variance, &[p.lengthscale]);
    let samples: Vec<Array1<f64>> = svgp::par::map_indexed(p.draws, |d| {
        let mut cur = x.clone();
        for level in 0..p.depth {
            let kxx = kern_matrix(&kernel, &cur, &cur).expect("kernel eval");
            let gauss = Gaussian::new(Array1::zeros(g), gauss::symmetrize(kxx))
                .expect("prior covariance");
            let mut noise = Array2::zeros((g, 1));
            for i in 0..g {
                noise[[i, 0]] = rng.normal(
                    Purpose::PathNoise(level as u32),
                    d as u64,
                    i as u64,
                    0,
                );
            }
            let s = gauss::sample(&gauss, &noise).expect("prior sample");
            cur = s;
        }
        cur.column(0).to_owned()
    });
    let mut y = Array2::zeros((g, p.draws));
    for (d, s) in samples.iter().enumerate() {
        for i in 0..g {
            y[[i, d]] = s[i];
        }
    }
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_gap_zero_is_unimodal() {
        let rng = CounterRng::new(1);
        let (x, y) =
            mixture(&MixtureParams { n: 200, gap: 0.0, noise: 0.0 }, &rng).unwrap();
        for i in 0..200 {
            let base = 0.3 * (2.0 * std::f64::consts::PI * x[[i, 0]]).sin();
            assert!((y[[i, 0]] - base).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_are_piecewise_constant() {
        let rng = CounterRng::new(2);
        let (x, y) = steps(&StepsParams { n: 40, segments: 4, noise: 0.0 }, &rng).unwrap();
        // points in the same quarter share a level
        for i in 1..10 {
            let seg0 = (x[[0, 0]] * 4.0) as usize;
            let segi = (x[[i, 0]] * 4.0) as usize;
            if seg0 == segi {
                assert_eq!(y[[i, 0]], y[[0, 0]]);
            }
        }
    }

    #[test]
    fn prior_draw_depth_one_marginals() {
        let rng = CounterRng::new(3);
        let p = PriorDrawParams {
            depth: 1,
            grid_n: 5,
            lo: 0.0,
            hi: 10.0,
            draws: 20_000,
            variance: 1.0,
            lengthscale: 0.7,
        };
        let (_x, y) = prior_draw(&p, &rng).unwrap();
        for i in 0..5 {
            let row = y.row(i);
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 3.0 / n.sqrt(), "point {i}: mean {mean}");
            assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "point {i}: var {var}");
        }
    }

    #[test]
    fn prior_draw_deterministic_per_seed() {
        let rng = CounterRng::new(4);
        let p = PriorDrawParams {
            depth: 4,
            grid_n: 8,
            lo: 0.0,
            hi: 10.0,
            draws: 3,
            variance: 1.0,
            lengthscale: 0.7,
        };
        let (_x1, y1) = prior_draw(&p, &rng).unwrap();
        let (_x2, y2) = prior_draw(&p, &rng).unwrap();
        assert_eq!(y1, y2);
        assert!(y1.iter().all(|v| v.is_finite()));
    }
}
