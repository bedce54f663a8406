//! Observation models: log densities, variational expectations and
//! predictive summaries.
//!
//! The homoscedastic Gaussian expectation is closed-form; Bernoulli and
//! heteroscedastic Gaussian expectations integrate with Gauss-Hermite
//! quadrature (tensor product over the two latent dimensions in the
//! heteroscedastic case).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernel::{positive_to_raw, raw_to_positive, softplus_val, POSITIVE_EPS};
use crate::quad::GaussHermite;
use crate::tape::{Tape, Var};

const LN_2PI: f64 = 1.8378770664093453;
const LOG_PROB_FLOOR: f64 = -1e12;

/// Observation model. The heteroscedastic Gaussian consumes two latent
/// outputs (mean and pre-transform variance); the others consume one.
#[derive(Debug, Clone)]
pub enum LikelihoodSpec {
    GaussianHomo { variance_raw: f64 },
    GaussianHetero,
    Bernoulli,
}

impl LikelihoodSpec {
    pub fn gaussian(variance: f64) -> Self {
        LikelihoodSpec::GaussianHomo { variance_raw: positive_to_raw(variance) }
    }

    /// Number of latent outputs consumed.
    pub fn latent_dim(&self) -> usize {
        match self {
            LikelihoodSpec::GaussianHetero => 2,
            _ => 1,
        }
    }

    pub fn variance(&self) -> Option<f64> {
        match self {
            LikelihoodSpec::GaussianHomo { variance_raw } => Some(raw_to_positive(*variance_raw)),
            _ => None,
        }
    }
}

/// Positivity transform for the heteroscedastic variance head.
pub fn hetero_variance(f2: f64) -> f64 {
    softplus_val(f2) + POSITIVE_EPS
}

/// Quadrature configuration: Gauss-Hermite orders per latent dimensionality,
/// with a Monte Carlo sample count available as fallback for families
/// without a quadrature path (none of the built-in ones need it).
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub order: usize,
    pub order_2d: usize,
    pub mc_samples: usize,
    gh1: GaussHermite,
    gh2: GaussHermite,
}

impl QuadratureRule {
    pub fn new(order: usize, order_2d: usize, mc_samples: usize) -> Self {
        assert!(order >= 1 && order_2d >= 1 && mc_samples >= 1);
        QuadratureRule {
            order,
            order_2d,
            mc_samples,
            gh1: GaussHermite::new(order),
            gh2: GaussHermite::new(order_2d),
        }
    }

    pub fn gh1(&self) -> &GaussHermite {
        &self.gh1
    }

    pub fn gh2(&self) -> &GaussHermite {
        &self.gh2
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule::new(20, 10, 1000)
    }
}

fn check_arity(lik: &LikelihoodSpec, got: usize) -> Result<()> {
    if got != lik.latent_dim() {
        return Err(Error::Arity(format!(
            "likelihood consumes {} latent outputs, got {}",
            lik.latent_dim(),
            got
        )));
    }
    Ok(())
}

/// Pointwise log density/mass of `y` given latent output values `f`.
pub fn log_prob(lik: &LikelihoodSpec, y: f64, f: &[f64]) -> Result<f64> {
    check_arity(lik, f.len())?;
    let lp = match lik {
        LikelihoodSpec::GaussianHomo { .. } => {
            let s2 = lik.variance().unwrap();
            -0.5 * (LN_2PI + s2.ln()) - (y - f[0]).powi(2) / (2.0 * s2)
        }
        LikelihoodSpec::GaussianHetero => {
            let s2 = hetero_variance(f[1]);
            -0.5 * (LN_2PI + s2.ln()) - (y - f[0]).powi(2) / (2.0 * s2)
        }
        LikelihoodSpec::Bernoulli => {
            // ln σ(f) = −softplus(−f); ln(1−σ(f)) = −softplus(f)
            if y > 0.5 {
                -softplus_val(-f[0])
            } else {
                -softplus_val(f[0])
            }
        }
    };
    Ok(lp.max(LOG_PROB_FLOOR))
}

/// `E_{f ~ N(mean, var)}[ln p(y | f)]` with diagonal `fmar`.
pub fn variational_expectation(
    lik: &LikelihoodSpec,
    y: f64,
    mean: &[f64],
    var: &[f64],
    quad: &QuadratureRule,
) -> Result<f64> {
    check_arity(lik, mean.len())?;
    if var.len() != mean.len() {
        return Err(Error::Arity("fmar mean/var length mismatch".into()));
    }
    if !y.is_finite()
        || mean.iter().any(|v| !v.is_finite())
        || var.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("variational expectation inputs".into()));
    }
    match lik {
        LikelihoodSpec::GaussianHomo { .. } => {
            let s2 = lik.variance().unwrap();
            Ok(-0.5 * (LN_2PI + s2.ln()) - ((y - mean[0]).powi(2) + var[0]) / (2.0 * s2))
        }
        LikelihoodSpec::Bernoulli => {
            let mut acc = 0.0;
            for (f, w) in quad.gh1.for_gaussian(mean[0], var[0]) {
                acc += w * log_prob(lik, y, &[f])?;
            }
            Ok(acc)
        }
        LikelihoodSpec::GaussianHetero => {
            let mut acc = 0.0;
            for (f2, w2) in quad.gh2.for_gaussian(mean[1], var[1]) {
                for (f1, w1) in quad.gh2.for_gaussian(mean[0], var[0]) {
                    acc += w1 * w2 * log_prob(lik, y, &[f1, f2])?;
                }
            }
            Ok(acc)
        }
    }
}

/// Predictive summary after integrating the likelihood against a diagonal
/// latent Gaussian.
#[derive(Debug, Clone)]
pub struct Predictive {
    pub mean: f64,
    pub variance: f64,
    lik: LikelihoodSpec,
    fmean: Vec<f64>,
    fvar: Vec<f64>,
    order: usize,
}

impl Predictive {
    /// Log predictive density (or mass) at `y`.
    pub fn log_density(&self, y: f64) -> f64 {
        match &self.lik {
            LikelihoodSpec::GaussianHomo { .. } => {
                let s2 = self.lik.variance().unwrap() + self.fvar[0];
                -0.5 * (LN_2PI + s2.ln()) - (y - self.fmean[0]).powi(2) / (2.0 * s2)
            }
            LikelihoodSpec::Bernoulli => {
                let p1 = self.mean;
                let p = if y > 0.5 { p1 } else { 1.0 - p1 };
                p.ln().max(LOG_PROB_FLOOR)
            }
            LikelihoodSpec::GaussianHetero => {
                // inner f1 integral is analytic: ∫N(y; f1, g)N(f1; m1, v1) df1 = N(y; m1, v1+g)
                let gh = GaussHermite::new(self.order);
                let mut acc = 0.0;
                for (f2, w) in gh.for_gaussian(self.fmean[1], self.fvar[1]) {
                    let s2 = hetero_variance(f2) + self.fvar[0];
                    acc += w * ((-0.5 * (LN_2PI + s2.ln())
                        - (y - self.fmean[0]).powi(2) / (2.0 * s2))
                        .exp());
                }
                acc.ln().max(LOG_PROB_FLOOR)
            }
        }
    }
}

/// Moments and density evaluator of `p(y) = ∫ p(y|f) q(f) df`.
pub fn predict_y(
    lik: &LikelihoodSpec,
    mean: &[f64],
    var: &[f64],
    quad: &QuadratureRule,
) -> Result<Predictive> {
    check_arity(lik, mean.len())?;
    let (m, v) = match lik {
        LikelihoodSpec::GaussianHomo { .. } => {
            (mean[0], var[0] + lik.variance().unwrap())
        }
        LikelihoodSpec::Bernoulli => {
            let mut p1 = 0.0;
            for (f, w) in quad.gh1.for_gaussian(mean[0], var[0]) {
                p1 += w * sigmoid_val(f);
            }
            p1 = p1.clamp(0.0, 1.0);
            (p1, p1 * (1.0 - p1))
        }
        LikelihoodSpec::GaussianHetero => {
            // Var(y) = E[g(f2)] + v1 by total variance
            let mut eg = 0.0;
            for (f2, w) in quad.gh2.for_gaussian(mean[1], var[1]) {
                eg += w * hetero_variance(f2);
            }
            (mean[0], eg + var[0])
        }
    };
    Ok(Predictive {
        mean: m,
        variance: v,
        lik: lik.clone(),
        fmean: mean.to_vec(),
        fvar: var.to_vec(),
        order: quad.order.max(quad.order_2d),
    })
}

fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Likelihood parameter nodes on the tape.
pub enum LikNodes {
    Homo { variance: Var },
    Hetero,
    Bernoulli,
}

/// Bind likelihood parameters; `raw` must be the `1×1` leaf for the
/// homoscedastic variance when present.
pub fn lik_nodes(t: &mut Tape, lik: &LikelihoodSpec, raw: Option<Var>) -> LikNodes {
    match lik {
        LikelihoodSpec::GaussianHomo { variance_raw } => {
            let r = raw.unwrap_or_else(|| t.scalar_constant(*variance_raw));
            let sp = t.softplus(r);
            let variance = t.add_const(sp, POSITIVE_EPS);
            LikNodes::Homo { variance }
        }
        LikelihoodSpec::GaussianHetero => LikNodes::Hetero,
        LikelihoodSpec::Bernoulli => LikNodes::Bernoulli,
    }
}

/// Batched variational expectation graph: `y`, `means[k]`, `vars[k]` are
/// `(n,1)` nodes; the result is `(n,1)`.
pub fn ve_graph(
    t: &mut Tape,
    ln: &LikNodes,
    y: Var,
    means: &[Var],
    vars: &[Var],
    quad: &QuadratureRule,
) -> Var {
    match ln {
        LikNodes::Homo { variance } => {
            debug_assert_eq!(means.len(), 1);
            let resid = t.sub(y, means[0]);
            let sq = t.sqr(resid);
            let num = t.add(sq, vars[0]);
            let two_s2 = t.scale(*variance, 2.0);
            let inv = t.recip(two_s2);
            let quad_term = t.mul_scalar(num, inv);
            let lns2 = t.ln(*variance);
            let half = t.scale(lns2, 0.5);
            let c = t.add_const(half, 0.5 * LN_2PI);
            let tot = t.add_scalar(quad_term, c);
            t.neg(tot)
        }
        LikNodes::Bernoulli => {
            debug_assert_eq!(means.len(), 1);
            let yv = t.value(y).clone();
            let sgn = t.constant(yv.mapv(|v| 1.0 - 2.0 * v));
            let vpos = t.clamp_min(vars[0], 0.0);
            let sv = t.sqrt(vpos);
            let s2v = t.scale(sv, std::f64::consts::SQRT_2);
            let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
            let mut acc: Option<Var> = None;
            for (node, w) in quad.gh1().nodes.iter().zip(quad.gh1().weights.iter()) {
                let off = t.scale(s2v, *node);
                let f = t.add(means[0], off);
                let arg = t.mul_elem(sgn, f);
                let sp = t.softplus(arg);
                let term = t.scale(sp, w * inv_sqrt_pi);
                acc = Some(match acc {
                    Some(prev) => t.add(prev, term),
                    None => term,
                });
            }
            let total = acc.expect("quadrature order >= 1");
            t.neg(total)
        }
        LikNodes::Hetero => {
            debug_assert_eq!(means.len(), 2);
            let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
            let v1p = t.clamp_min(vars[0], 0.0);
            let s1 = t.sqrt(v1p);
            let s1 = t.scale(s1, std::f64::consts::SQRT_2);
            let v2p = t.clamp_min(vars[1], 0.0);
            let s2 = t.sqrt(v2p);
            let s2 = t.scale(s2, std::f64::consts::SQRT_2);
            let mut acc: Option<Var> = None;
            for (n2, w2) in quad.gh2().nodes.iter().zip(quad.gh2().weights.iter()) {
                let off2 = t.scale(s2, *n2);
                let f2 = t.add(means[1], off2);
                let sp = t.softplus(f2);
                let gvar = t.add_const(sp, POSITIVE_EPS);
                let lng = t.ln(gvar);
                let half_lng = t.scale(lng, 0.5);
                let c = t.add_const(half_lng, 0.5 * LN_2PI);
                let ginv = t.recip(gvar);
                let half_inv = t.scale(ginv, 0.5);
                for (n1, w1) in quad.gh2().nodes.iter().zip(quad.gh2().weights.iter()) {
                    let off1 = t.scale(s1, *n1);
                    let f1 = t.add(means[0], off1);
                    let resid = t.sub(y, f1);
                    let rsq = t.sqr(resid);
                    let q = t.mul_elem(rsq, half_inv);
                    let term = t.add(c, q);
                    let nterm = t.neg(term);
                    let w = w1 * w2 * inv_sqrt_pi * inv_sqrt_pi;
                    let wterm = t.scale(nterm, w);
                    acc = Some(match acc {
                        Some(prev) => t.add(prev, wterm),
                        None => wterm,
                    });
                }
            }
            acc.expect("quadrature order >= 1")
        }
    }
}


/// Plain-value wrapper used by tests and prediction paths.
pub fn ve_value(
    lik: &LikelihoodSpec,
    y: f64,
    mean: &[f64],
    var: &[f64],
    quad: &QuadratureRule,
) -> Result<f64> {
    check_arity(lik, mean.len())?;
    let mut t = Tape::new();
    let ln = lik_nodes(&mut t, lik, None);
    let yv = t.constant(Array2::from_elem((1, 1), y));
    let ms: Vec<Var> = mean.iter().map(|&m| t.constant(Array2::from_elem((1, 1), m))).collect();
    let vs: Vec<Var> = var.iter().map(|&v| t.constant(Array2::from_elem((1, 1), v))).collect();
    let out = ve_graph(&mut t, &ln, yv, &ms, &vs, quad);
    Ok(t.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_ve_closed_form_values() {
        let lik = LikelihoodSpec::gaussian(1.0);
        let quad = QuadratureRule::default();
        let v0 = variational_expectation(&lik, 0.0, &[0.0], &[0.0], &quad).unwrap();
        assert!((v0 - (-0.5 * LN_2PI)).abs() < 1e-10);
        let v1 = variational_expectation(&lik, 0.0, &[0.0], &[1.0], &quad).unwrap();
        assert!((v1 - (-0.5 * LN_2PI - 0.5)).abs() < 1e-10);
    }

    #[test]
    fn gaussian_ve_matches_quadrature() {
        // closed form vs an explicit GH-20 integration of ln N(y; f, σ²)
        let gh = GaussHermite::new(20);
        let quad = QuadratureRule::default();
        for (i, &(y, m, v, s2)) in [
            (0.3, -0.5, 0.7, 0.4),
            (1.0, 1.0, 0.01, 2.0),
            (-2.0, 0.2, 3.0, 0.9),
        ]
        .iter()
        .enumerate()
        {
            let lik = LikelihoodSpec::gaussian(s2);
            let closed = variational_expectation(&lik, y, &[m], &[v], &quad).unwrap();
            let mut acc = 0.0;
            for (f, w) in gh.for_gaussian(m, v) {
                acc += w * log_prob(&lik, y, &[f]).unwrap();
            }
            assert!((closed - acc).abs() < 1e-10, "case {i}: {closed} vs {acc}");
        }
    }

    #[test]
    fn gaussian_ve_small_variance_limit() {
        let lik = LikelihoodSpec::gaussian(0.7);
        let quad = QuadratureRule::default();
        let ve = variational_expectation(&lik, 0.4, &[0.9], &[1e-12], &quad).unwrap();
        let lp = log_prob(&lik, 0.4, &[0.9]).unwrap();
        assert!((ve - lp).abs() < 1e-6);
    }

    #[test]
    fn bernoulli_values() {
        let lik = LikelihoodSpec::Bernoulli;
        let quad = QuadratureRule::default();
        let ve = variational_expectation(&lik, 1.0, &[0.0], &[0.0], &quad).unwrap();
        assert!((ve + std::f64::consts::LN_2).abs() < 1e-10);
        let lp = log_prob(&lik, 1.0, &[1e10]).unwrap();
        assert!(lp.abs() < 1e-9);
        assert_eq!(log_prob(&lik, 1.0, &[-1e15]).unwrap(), LOG_PROB_FLOOR);
    }

    #[test]
    fn hetero_log_prob_at_unit_variance() {
        let lik = LikelihoodSpec::GaussianHetero;
        // g(f2) = softplus(f2) + eps = 1 → f2 = softplus⁻¹(1 − eps)
        let f2 = positive_to_raw(1.0);
        let lp = log_prob(&lik, 0.0, &[0.0, f2]).unwrap();
        assert!((lp + 0.5 * LN_2PI).abs() < 1e-10);
    }

    #[test]
    fn predictive_summaries() {
        let quad = QuadratureRule::default();
        let lik = LikelihoodSpec::gaussian(0.1);
        let p = predict_y(&lik, &[2.0], &[0.4], &quad).unwrap();
        assert!((p.mean - 2.0).abs() < 1e-12);
        assert!((p.variance - 0.5).abs() < 1e-12);

        let b = LikelihoodSpec::Bernoulli;
        let p = predict_y(&b, &[0.0], &[0.0], &quad).unwrap();
        assert!((p.mean - 0.5).abs() < 1e-10);
        for v in [0.1, 1.0, 5.0] {
            let p = predict_y(&b, &[0.0], &[v], &quad).unwrap();
            assert!((p.mean - 0.5).abs() < 1e-8, "v={v}: {}", p.mean);
            // mass sums to one exactly
            let m1 = p.log_density(1.0).exp();
            let m0 = p.log_density(0.0).exp();
            assert!((m1 + m0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn arity_enforced() {
        let quad = QuadratureRule::default();
        assert!(matches!(
            variational_expectation(&LikelihoodSpec::Bernoulli, 1.0, &[0.0, 0.0], &[1.0, 1.0], &quad),
            Err(Error::Arity(_))
        ));
        assert!(matches!(
            variational_expectation(
                &LikelihoodSpec::gaussian(1.0),
                f64::NAN,
                &[0.0],
                &[1.0],
                &quad
            ),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn ve_graph_gradients_match_fd() {
        // d ve / d (m, v, σ²_raw) by tape vs central differences
        let quad = QuadratureRule::default();
        for lik in [LikelihoodSpec::gaussian(0.6), LikelihoodSpec::Bernoulli] {
            let (y, m0, v0) = (1.0, 0.3, 0.5);
            let eval = |m: f64, v: f64, s2raw: f64| {
                let l = match &lik {
                    LikelihoodSpec::GaussianHomo { .. } => {
                        LikelihoodSpec::GaussianHomo { variance_raw: s2raw }
                    }
                    other => other.clone(),
                };
                let mut t = Tape::new();
                let ln = lik_nodes(&mut t, &l, None);
                let yv = t.constant(Array2::from_elem((1, 1), y));
                let mv = t.constant(Array2::from_elem((1, 1), m));
                let vv = t.constant(Array2::from_elem((1, 1), v));
                let out = ve_graph(&mut t, &ln, yv, &[mv], &[vv], &quad);
                t.scalar(out)
            };
            let s2raw = match &lik {
                LikelihoodSpec::GaussianHomo { variance_raw } => *variance_raw,
                _ => 0.0,
            };

            let mut t = Tape::new();
            let raw_leaf = t.scalar_leaf(s2raw);
            let ln = lik_nodes(&mut t, &lik, Some(raw_leaf));
            let yv = t.constant(Array2::from_elem((1, 1), y));
            let mleaf = t.leaf(Array2::from_elem((1, 1), m0));
            let vleaf = t.leaf(Array2::from_elem((1, 1), v0));
            let out = ve_graph(&mut t, &ln, yv, &[mleaf], &[vleaf], &quad);
            let g = t.backward(out);
            let (gm, gv, gs) = (
                g.of(mleaf, &t)[[0, 0]],
                g.of(vleaf, &t)[[0, 0]],
                g.of(raw_leaf, &t)[[0, 0]],
            );

            let h = 1e-6;
            let fdm = (eval(m0 + h, v0, s2raw) - eval(m0 - h, v0, s2raw)) / (2.0 * h);
            let fdv = (eval(m0, v0 + h, s2raw) - eval(m0, v0 - h, s2raw)) / (2.0 * h);
            assert!((fdm - gm).abs() / fdm.abs().max(1e-6) < 1e-4, "mean grad");
            assert!((fdv - gv).abs() / fdv.abs().max(1e-6) < 1e-4, "var grad");
            if matches!(lik, LikelihoodSpec::GaussianHomo { .. }) {
                let fds = (eval(m0, v0, s2raw + h) - eval(m0, v0, s2raw - h)) / (2.0 * h);
                assert!((fds - gs).abs() / fds.abs().max(1e-6) < 1e-4, "variance raw grad");
            }
        }
    }

    #[test]
    fn hetero_ve_graph_matches_plain_and_gradients() {
        let quad = QuadratureRule::default();
        let lik = LikelihoodSpec::GaussianHetero;
        let (y, m1, v1, m2, v2) = (0.7, 0.2, 0.4, -0.3, 0.25);
        let plain = variational_expectation(&lik, y, &[m1, m2], &[v1, v2], &quad).unwrap();
        let graph = ve_value(&lik, y, &[m1, m2], &[v1, v2], &quad).unwrap();
        assert!((plain - graph).abs() < 1e-12);

        // exactness of the f1 quadrature: quadratic integrand, so closed form holds
        let closed = {
            let gh = GaussHermite::new(10);
            let mut acc = 0.0;
            for (f2, w) in gh.for_gaussian(m2, v2) {
                let g = hetero_variance(f2);
                acc += w * (-0.5 * (LN_2PI + g.ln()) - ((y - m1).powi(2) + v1) / (2.0 * g));
            }
            acc
        };
        assert!((plain - closed).abs() < 1e-10, "{plain} vs {closed}");
    }
}
