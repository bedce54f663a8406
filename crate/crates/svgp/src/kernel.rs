//! Covariance and mean functions with unconstrained hyperparameter storage.
//!
//! Only the RBF family ships; the graph builders accept any input that is a
//! tape node, so kernels evaluate identically whether inputs are data,
//! inducing points or sampled layer outputs.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Offset added after softplus so transformed values stay strictly positive.
pub const POSITIVE_EPS: f64 = 1e-6;

pub fn softplus_val(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus(raw) + POSITIVE_EPS`.
pub fn positive_to_raw(value: f64) -> f64 {
    let y = value - POSITIVE_EPS;
    assert!(y > 0.0, "positive parameter must exceed {POSITIVE_EPS}");
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

pub fn raw_to_positive(raw: f64) -> f64 {
    softplus_val(raw) + POSITIVE_EPS
}

/// RBF kernel with ARD lengthscales, stored as unconstrained raw values.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub variance_raw: f64,
    pub lengthscales_raw: Array1<f64>,
}

impl KernelSpec {
    /// Construct from positive hyperparameter values.
    pub fn rbf(variance: f64, lengthscales: &[f64]) -> Self {
        KernelSpec {
            variance_raw: positive_to_raw(variance),
            lengthscales_raw: lengthscales.iter().map(|&l| positive_to_raw(l)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales_raw.len()
    }

    pub fn variance(&self) -> f64 {
        raw_to_positive(self.variance_raw)
    }

    pub fn lengthscales(&self) -> Array1<f64> {
        self.lengthscales_raw.mapv(raw_to_positive)
    }
}

/// Mean function families.
#[derive(Debug, Clone)]
pub enum MeanSpec {
    Zero { outputs: usize },
    Constant { values: Array1<f64> },
    Linear { weight: Array2<f64>, bias: Array1<f64> },
    Identity { dim: usize },
}

impl MeanSpec {
    pub fn outputs(&self) -> usize {
        match self {
            MeanSpec::Zero { outputs } => *outputs,
            MeanSpec::Constant { values } => values.len(),
            MeanSpec::Linear { weight, .. } => weight.nrows(),
            MeanSpec::Identity { dim } => *dim,
        }
    }

    pub fn check_input_dim(&self, din: usize) -> Result<()> {
        match self {
            MeanSpec::Linear { weight, .. } if weight.ncols() != din => Err(Error::shape(format!(
                "linear mean expects input dim {}, got {}",
                weight.ncols(),
                din
            ))),
            MeanSpec::Identity { dim } if *dim != din => Err(Error::shape(format!(
                "identity mean valid only when input dim equals output dim ({} vs {})",
                din, dim
            ))),
            _ => Ok(()),
        }
    }
}

/// Transformed kernel hyperparameter nodes.
pub struct KernelNodes {
    pub variance: Var,
    pub inv_len2: Vec<Var>,
}

/// Build transformed nodes from raw leaves (`variance_raw` is `1×1`,
/// `lengths_raw` is `d×1`).
pub fn kernel_nodes(t: &mut Tape, variance_raw: Var, lengths_raw: Var) -> KernelNodes {
    let d = t.value(lengths_raw).nrows();
    let sp = t.softplus(variance_raw);
    let variance = t.add_const(sp, POSITIVE_EPS);
    let mut inv_len2 = Vec::with_capacity(d);
    for i in 0..d {
        let raw = t.gather_rows(lengths_raw, &[i]);
        let sp = t.softplus(raw);
        let len = t.add_const(sp, POSITIVE_EPS);
        let len2 = t.sqr(len);
        inv_len2.push(t.recip(len2));
    }
    KernelNodes { variance, inv_len2 }
}

fn scaled_sq_dist(t: &mut Tape, kn: &KernelNodes, a: Var, b: Var) -> Var {
    let d = kn.inv_len2.len();
    let mut acc: Option<Var> = None;
    for dim in 0..d {
        let ad = t.slice_cols(a, dim, dim + 1);
        let bd = t.slice_cols(b, dim, dim + 1);
        let od = t.outer_diff(ad, bd);
        let sq = t.sqr(od);
        let term = t.mul_scalar(sq, kn.inv_len2[dim]);
        acc = Some(match acc {
            Some(prev) => t.add(prev, term),
            None => term,
        });
    }
    acc.expect("kernel input dim must be >= 1")
}

/// `K[i,j] = σ²·exp(-½ Σ_d (a_id - b_jd)²/ℓ_d²)`.
pub fn rbf_matrix(t: &mut Tape, kn: &KernelNodes, a: Var, b: Var) -> Var {
    let sq = scaled_sq_dist(t, kn, a, b);
    let e = t.scale(sq, -0.5);
    let k = t.exp(e);
    t.mul_scalar(k, kn.variance)
}

/// Diagonal of `rbf_matrix(a, a)`: constant `σ²` per row.
pub fn rbf_diag(t: &mut Tape, kn: &KernelNodes, n_rows: usize) -> Var {
    let ones = t.constant(Array2::from_elem((n_rows, 1), 1.0));
    t.mul_scalar(ones, kn.variance)
}

/// Cross matrix between plain evaluations at `x` and derivative features at
/// `z`: entry `(n,m) = ∂k(x_n, x')/∂x'_{dims[m]} |_{x'=z_m}`.
pub fn rbf_grad_matrix(t: &mut Tape, kn: &KernelNodes, x: Var, z: Var, dims: &[usize]) -> Var {
    let n = t.value(x).nrows();
    let m = t.value(z).nrows();
    debug_assert_eq!(dims.len(), m);
    let base = rbf_matrix(t, kn, x, z);
    let mut acc: Option<Var> = None;
    for a in unique_dims(dims) {
        let mut mask = Array2::zeros((n, m));
        for (col, &dm) in dims.iter().enumerate() {
            if dm == a {
                for row in 0..n {
                    mask[[row, col]] = 1.0;
                }
            }
        }
        let xa = t.slice_cols(x, a, a + 1);
        let za = t.slice_cols(z, a, a + 1);
        let r = t.outer_diff(xa, za);
        let scaled = t.mul_scalar(r, kn.inv_len2[a]);
        let maskv = t.constant(mask);
        let term = t.mul_elem(scaled, maskv);
        acc = Some(match acc {
            Some(prev) => t.add(prev, term),
            None => term,
        });
    }
    let factor = acc.expect("derivative feature set is nonempty");
    t.mul_elem(base, factor)
}

/// Mixed second derivatives: entry `(i,j) = ∂²k/∂x_{dx[i]} ∂x'_{dz[j]}`
/// evaluated at `(x_i, z_j)`.
pub fn rbf_hess_matrix(
    t: &mut Tape,
    kn: &KernelNodes,
    x: Var,
    dims_x: &[usize],
    z: Var,
    dims_z: &[usize],
) -> Var {
    let n = t.value(x).nrows();
    let m = t.value(z).nrows();
    debug_assert_eq!(dims_x.len(), n);
    debug_assert_eq!(dims_z.len(), m);
    let base = rbf_matrix(t, kn, x, z);
    let mut acc: Option<Var> = None;
    for a in unique_dims(dims_x) {
        for b in unique_dims(dims_z) {
            let mut mask = Array2::zeros((n, m));
            let mut any = false;
            for (i, &da) in dims_x.iter().enumerate() {
                if da != a {
                    continue;
                }
                for (j, &db) in dims_z.iter().enumerate() {
                    if db == b {
                        mask[[i, j]] = 1.0;
                        any = true;
                    }
                }
            }
            if !any {
                continue;
            }
            let maskv = t.constant(mask);
            // δ_ab/ℓ_b² − r_a r_b/(ℓ_a² ℓ_b²)
            let xa = t.slice_cols(x, a, a + 1);
            let zb = t.slice_cols(z, b, b + 1);
            let ra = {
                let za = t.slice_cols(z, a, a + 1);
                t.outer_diff(xa, za)
            };
            let rb = {
                let xb = t.slice_cols(x, b, b + 1);
                t.outer_diff(xb, zb)
            };
            let rr = t.mul_elem(ra, rb);
            let rr = t.mul_scalar(rr, kn.inv_len2[a]);
            let rr = t.mul_scalar(rr, kn.inv_len2[b]);
            let inner = if a == b {
                let ones = t.constant(Array2::from_elem((n, m), 1.0));
                let delta = t.mul_scalar(ones, kn.inv_len2[b]);
                t.sub(delta, rr)
            } else {
                t.neg(rr)
            };
            let masked = t.mul_elem(inner, maskv);
            let term = t.mul_elem(masked, base);
            acc = Some(match acc {
                Some(prev) => t.add(prev, term),
                None => term,
            });
        }
    }
    acc.expect("derivative feature set is nonempty")
}

fn unique_dims(dims: &[usize]) -> Vec<usize> {
    let mut u: Vec<usize> = dims.to_vec();
    u.sort_unstable();
    u.dedup();
    u
}

/// Mean-function parameter nodes.
pub enum MeanNodes {
    Zero { outputs: usize },
    Constant { values: Var },
    Linear { weight: Var, bias: Var },
    Identity,
}

/// Apply the mean function to a batch of inputs; result is `n × outputs`.
pub fn mean_apply(t: &mut Tape, mn: &MeanNodes, x: Var) -> Var {
    let n = t.value(x).nrows();
    match mn {
        MeanNodes::Zero { outputs } => t.constant(Array2::zeros((n, *outputs))),
        MeanNodes::Constant { values } => {
            let ones = t.constant(Array2::from_elem((n, 1), 1.0));
            t.matmul(ones, *values)
        }
        MeanNodes::Linear { weight, bias } => {
            let wt = t.transpose(*weight);
            let xw = t.matmul(x, wt);
            t.add_rowvec(xw, *bias)
        }
        MeanNodes::Identity => x,
    }
}

fn with_scratch<R>(f: impl FnOnce(&mut Tape) -> Result<R>) -> Result<R> {
    let mut t = Tape::new();
    f(&mut t)
}

fn check_inputs(k: &KernelSpec, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.ncols() != k.input_dim() || b.ncols() != k.input_dim() {
        return Err(Error::shape(format!(
            "kernel expects input dim {}, got {} and {}",
            k.input_dim(),
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

fn bind_kernel(t: &mut Tape, k: &KernelSpec) -> KernelNodes {
    let v = t.constant(Array2::from_elem((1, 1), k.variance_raw));
    let l = t.constant(
        Array2::from_shape_vec((k.input_dim(), 1), k.lengthscales_raw.to_vec()).expect("shape"),
    );
    kernel_nodes(t, v, l)
}

/// Kernel matrix between two input batches (rows are points).
pub fn kern_matrix(k: &KernelSpec, a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    check_inputs(k, a, b)?;
    with_scratch(|t| {
        let kn = bind_kernel(t, k);
        let av = t.constant(a.clone());
        let bv = t.constant(b.clone());
        let m = rbf_matrix(t, &kn, av, bv);
        Ok(t.value(m).clone())
    })
}

/// `∂k(x, x')/∂x'_d`.
pub fn kern_grad(k: &KernelSpec, x: &Array1<f64>, xp: &Array1<f64>, d: usize) -> Result<f64> {
    let xr = x.clone().insert_axis(ndarray::Axis(0));
    let xpr = xp.clone().insert_axis(ndarray::Axis(0));
    check_inputs(k, &xr, &xpr)?;
    if d >= k.input_dim() {
        return Err(Error::shape(format!("derivative dim {d} out of range")));
    }
    with_scratch(|t| {
        let kn = bind_kernel(t, k);
        let xv = t.constant(xr.clone());
        let zv = t.constant(xpr.clone());
        let g = rbf_grad_matrix(t, &kn, xv, zv, &[d]);
        Ok(t.scalar(g))
    })
}

/// `∂²k(x, x')/∂x_d ∂x'_{d'}`.
pub fn kern_cross_hess(
    k: &KernelSpec,
    x: &Array1<f64>,
    xp: &Array1<f64>,
    d: usize,
    dp: usize,
) -> Result<f64> {
    let xr = x.clone().insert_axis(ndarray::Axis(0));
    let xpr = xp.clone().insert_axis(ndarray::Axis(0));
    check_inputs(k, &xr, &xpr)?;
    if d >= k.input_dim() || dp >= k.input_dim() {
        return Err(Error::shape("derivative dim out of range"));
    }
    with_scratch(|t| {
        let kn = bind_kernel(t, k);
        let xv = t.constant(xr.clone());
        let zv = t.constant(xpr.clone());
        let h = rbf_hess_matrix(t, &kn, xv, &[d], zv, &[dp]);
        Ok(t.scalar(h))
    })
}

/// Evaluate the mean function on a batch; result is `n × outputs`.
pub fn mean_vector(m: &MeanSpec, a: &Array2<f64>) -> Result<Array2<f64>> {
    m.check_input_dim(a.ncols())?;
    with_scratch(|t| {
        let mn = bind_mean(t, m);
        let av = t.constant(a.clone());
        let out = mean_apply(t, &mn, av);
        Ok(t.value(out).clone())
    })
}

pub(crate) fn bind_mean(t: &mut Tape, m: &MeanSpec) -> MeanNodes {
    match m {
        MeanSpec::Zero { outputs } => MeanNodes::Zero { outputs: *outputs },
        MeanSpec::Constant { values } => {
            let v = t.constant(
                Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("shape"),
            );
            MeanNodes::Constant { values: v }
        }
        MeanSpec::Linear { weight, bias } => {
            let w = t.constant(weight.clone());
            let b = t.constant(
                Array2::from_shape_vec((1, bias.len()), bias.to_vec()).expect("shape"),
            );
            MeanNodes::Linear { weight: w, bias: b }
        }
        MeanSpec::Identity { .. } => MeanNodes::Identity,
    }
}
