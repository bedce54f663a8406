//! Gauss-Hermite quadrature tables.
//!
//! Nodes and weights satisfy `∫ e^{-x²} f(x) dx ≈ Σ w_i f(x_i)` with
//! `Σ w_i = √π`. Expectations under `N(m, v)` use the substitution
//! `f = m + √(2v)·x`, dividing the weights by `√π`.

/// Physicists' Gauss-Hermite rule of a given order.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the Hermite recurrence; accurate for order ≤ 64.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be >= 1");
        let n = order;
        let mut x = vec![0.0f64; n];
        let mut w = vec![0.0f64; n];
        let pim4 = 0.7511255444649425_f64; // pi^(-1/4)
        let m = (n + 1) / 2;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 3e-14 {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        GaussHermite { nodes: x, weights: w }
    }

    /// Pairs `(m + √(2v)·x_i, w_i/√π)` for expectations under `N(m, v)`.
    pub fn for_gaussian(&self, mean: f64, var: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let s = (2.0 * var.max(0.0)).sqrt();
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(move |(&x, &w)| (mean + s * x, w * inv_sqrt_pi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_sqrt_pi() {
        for order in [1, 2, 5, 10, 20, 40] {
            let gh = GaussHermite::new(order);
            let s: f64 = gh.weights.iter().sum();
            assert!((s - std::f64::consts::PI.sqrt()).abs() < 1e-12, "order {order}: {s}");
        }
    }

    #[test]
    fn integrates_even_moments_exactly() {
        // ∫ x^2 e^{-x²} = √π/2, ∫ x^4 e^{-x²} = 3√π/4
        let gh = GaussHermite::new(20);
        let m2: f64 = gh.nodes.iter().zip(&gh.weights).map(|(x, w)| w * x * x).sum();
        let m4: f64 = gh.nodes.iter().zip(&gh.weights).map(|(x, w)| w * x.powi(4)).sum();
        let sp = std::f64::consts::PI.sqrt();
        assert!((m2 - sp / 2.0).abs() < 1e-12);
        assert!((m4 - 3.0 * sp / 4.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_expectation_of_quadratic() {
        // E[f²] under N(1, 4) = 1 + 4 = 5
        let gh = GaussHermite::new(20);
        let e: f64 = gh.for_gaussian(1.0, 4.0).map(|(f, w)| w * f * f).sum();
        assert!((e - 5.0).abs() < 1e-10, "{e}");
    }
}
