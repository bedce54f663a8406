//! Dense multivariate-Gaussian algebra: conditioning, marginal mixing,
//! linear transforms, KL divergence and reparameterized sampling.
//!
//! These are pure-value routines. They double as the independent dense
//! oracle for the solver-based sparse paths elsewhere in the crate.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{check_finite, chol_with_jitter, solve_lower, solve_lower_t};

/// Finite-dimensional Gaussian with dense covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl Gaussian {
    /// Validates dimensions and symmetry (1e-12 relative tolerance).
    pub fn new(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::shape(format!(
                "covariance {}x{} does not match mean length {}",
                cov.nrows(),
                cov.ncols(),
                n
            )));
        }
        let scale = cov.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-12 * scale {
                    return Err(Error::shape(format!(
                        "covariance not symmetric at ({i},{j}): {} vs {}",
                        cov[[i, j]],
                        cov[[j, i]]
                    )));
                }
            }
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn chol(&self) -> Result<CholFactor> {
        let (lower, jitter_used) = chol_with_jitter(&self.cov)?;
        Ok(CholFactor { lower, jitter_used })
    }
}

/// Lower-triangular factor together with the jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub lower: Array2<f64>,
    pub jitter_used: f64,
}

/// Dense linear map `u = Φ·f`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub matrix: Array2<f64>,
}

impl LinearMap {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        check_finite(&matrix, "LinearMap")?;
        Ok(LinearMap { matrix })
    }
}

/// Joint Gaussian over a partition `(f, u)`.
#[derive(Debug, Clone)]
pub struct PartitionedGaussian {
    pub mean_f: Array1<f64>,
    pub mean_u: Array1<f64>,
    pub cov_ff: Array2<f64>,
    pub cov_fu: Array2<f64>,
    pub cov_uu: Array2<f64>,
}

impl PartitionedGaussian {
    pub fn new(
        mean_f: Array1<f64>,
        mean_u: Array1<f64>,
        cov_ff: Array2<f64>,
        cov_fu: Array2<f64>,
        cov_uu: Array2<f64>,
    ) -> Result<Self> {
        let (nf, nu) = (mean_f.len(), mean_u.len());
        if cov_ff.nrows() != nf || cov_ff.ncols() != nf {
            return Err(Error::shape("cov_ff size"));
        }
        if cov_uu.nrows() != nu || cov_uu.ncols() != nu {
            return Err(Error::shape("cov_uu size"));
        }
        if cov_fu.nrows() != nf || cov_fu.ncols() != nu {
            return Err(Error::shape("cov_fu size"));
        }
        Ok(PartitionedGaussian { mean_f, mean_u, cov_ff, cov_fu, cov_uu })
    }
}

/// Conditional `f | u = u_obs`; all solves go through the Cholesky factor of
/// the `u` block.
pub fn condition(joint: &PartitionedGaussian, u_obs: &Array1<f64>) -> Result<Gaussian> {
    if u_obs.len() != joint.mean_u.len() {
        return Err(Error::shape(format!(
            "u_obs length {} does not match u block {}",
            u_obs.len(),
            joint.mean_u.len()
        )));
    }
    let (l, _) = chol_with_jitter(&joint.cov_uu)?;
    // C = L⁻¹ Σ_uf, rhs = L⁻¹ (u_obs − μ_u)
    let c = solve_lower(&l, &joint.cov_fu.t().to_owned());
    let delta = (u_obs - &joint.mean_u).insert_axis(ndarray::Axis(1));
    let rhs = solve_lower(&l, &delta);
    let mean = &joint.mean_f + &c.t().dot(&rhs).column(0);
    let cov = &joint.cov_ff - &c.t().dot(&c);
    Gaussian::new(mean, symmetrize(cov))
}

/// Marginal of `f` after replacing the `u` marginal with `q_u`.
pub fn mix_marginal(joint: &PartitionedGaussian, q_u: &Gaussian) -> Result<Gaussian> {
    if q_u.dim() != joint.mean_u.len() {
        return Err(Error::shape(format!(
            "q_u dimension {} does not match u block {}",
            q_u.dim(),
            joint.mean_u.len()
        )));
    }
    let (l, _) = chol_with_jitter(&joint.cov_uu)?;
    let c = solve_lower(&l, &joint.cov_fu.t().to_owned()); // L⁻¹ Σ_uf
    let d = solve_lower_t(&l, &c); // Σ_uu⁻¹ Σ_uf
    let delta = (&q_u.mean - &joint.mean_u).insert_axis(ndarray::Axis(1));
    let mean = &joint.mean_f + &d.t().dot(&delta).column(0);
    // Σ_ff − Σ_fu Σ_uu⁻¹ Σ_uf + (Σ_uu⁻¹ Σ_uf)ᵀ Q (Σ_uu⁻¹ Σ_uf)
    let cov = &joint.cov_ff - &c.t().dot(&c) + d.t().dot(&q_u.cov).dot(&d);
    Gaussian::new(mean, symmetrize(cov))
}

/// Joint over `(f, u = Φ·f)`. The joint covariance is degenerate by
/// construction; callers conditioning on it rely on the jitter ladder.
pub fn linear_push(p_f: &Gaussian, phi: &LinearMap) -> Result<PartitionedGaussian> {
    if phi.matrix.ncols() != p_f.dim() {
        return Err(Error::shape(format!(
            "map expects input {}, Gaussian has dimension {}",
            phi.matrix.ncols(),
            p_f.dim()
        )));
    }
    let mean_u = phi.matrix.dot(&p_f.mean);
    let cov_fu = p_f.cov.dot(&phi.matrix.t());
    let cov_uu = phi.matrix.dot(&p_f.cov).dot(&phi.matrix.t());
    PartitionedGaussian::new(
        p_f.mean.clone(),
        mean_u,
        p_f.cov.clone(),
        cov_fu,
        symmetrize(cov_uu),
    )
}

/// Closed-form `KL(q ‖ p)` in nats, clamped to zero within `-1e-10` slack.
pub fn kl(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    let n = q.dim();
    if p.dim() != n {
        return Err(Error::shape("KL requires equal dimensions"));
    }
    let (lq, _) = chol_with_jitter(&q.cov)?;
    let (lp, _) = chol_with_jitter(&p.cov)?;
    // tr(Σp⁻¹ Σq) = |Lp⁻¹ Lq|_F²
    let a = solve_lower(&lp, &lq);
    let trace: f64 = a.iter().map(|x| x * x).sum();
    let delta = (&p.mean - &q.mean).insert_axis(ndarray::Axis(1));
    let w = solve_lower(&lp, &delta);
    let maha: f64 = w.iter().map(|x| x * x).sum();
    let logdet_p: f64 = lp.diag().iter().map(|x| x.ln()).sum::<f64>() * 2.0;
    let logdet_q: f64 = lq.diag().iter().map(|x| x.ln()).sum::<f64>() * 2.0;
    let kl = 0.5 * (trace + maha - n as f64 + logdet_p - logdet_q);
    if kl < -1e-10 {
        return Err(Error::NonFinite(format!("KL evaluated to {kl}")));
    }
    Ok(kl.max(0.0))
}

/// Reparameterized samples `mean + L·ε` for each standard-normal column of
/// `noise` (dim × batch).
pub fn sample(p: &Gaussian, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if noise.nrows() != p.dim() {
        return Err(Error::shape(format!(
            "noise rows {} do not match dimension {}",
            noise.nrows(),
            p.dim()
        )));
    }
    let CholFactor { lower, .. } = p.chol()?;
    let mut out = lower.dot(noise);
    for mut col in out.columns_mut() {
        col += &p.mean;
    }
    Ok(out)
}

pub fn symmetrize(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}
