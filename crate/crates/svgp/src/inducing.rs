//! Inducing-variable constructions: ordinary inducing points (Dirac
//! features) and derivative features.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelNodes, KernelSpec, MeanNodes, MeanSpec};
use crate::rng::{CounterRng, Purpose};
use crate::tape::{Tape, Var};

/// Inducing feature set. Dirac features recover ordinary inducing points;
/// derivative features observe `∂f/∂x_{dims[m]}` at `z_m`.
#[derive(Debug, Clone)]
pub enum InducingSet {
    Dirac { z: Array2<f64> },
    Derivative { z: Array2<f64>, dims: Vec<usize> },
}

impl InducingSet {
    pub fn count(&self) -> usize {
        self.z().nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.z().ncols()
    }

    pub fn z(&self) -> &Array2<f64> {
        match self {
            InducingSet::Dirac { z } | InducingSet::Derivative { z, .. } => z,
        }
    }

    pub fn z_mut(&mut self) -> &mut Array2<f64> {
        match self {
            InducingSet::Dirac { z } | InducingSet::Derivative { z, .. } => z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::shape("inducing set must contain at least one feature"));
        }
        if !self.z().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("inducing points".into()));
        }
        if let InducingSet::Derivative { z, dims } = self {
            if dims.len() != z.nrows() {
                return Err(Error::shape("one derivative dim required per inducing point"));
            }
            if dims.iter().any(|&d| d >= z.ncols()) {
                return Err(Error::shape("derivative dim out of input range"));
            }
        }
        Ok(())
    }
}

/// Interface hook for feature families whose `K_uu` is diagonal. No concrete
/// implementation ships; the trait pins the contract for external feature
/// families.
pub trait DiagKuuFeature {
    fn count(&self) -> usize;
    /// Diagonal of `K_uu`; entries must be strictly positive.
    fn kuu_diag(&self, kernel: &KernelSpec) -> Result<Array1<f64>>;
    /// Cross covariance between evaluations at `x` and the features.
    fn kfu(&self, kernel: &KernelSpec, x: &Array2<f64>) -> Result<Array2<f64>>;
}

/// Graph builder for `K_uu` (`M×M`).
pub fn kuu_var(t: &mut Tape, kn: &KernelNodes, z: Var, ind: &InducingSet) -> Var {
    match ind {
        InducingSet::Dirac { .. } => kernel::rbf_matrix(t, kn, z, z),
        InducingSet::Derivative { dims, .. } => kernel::rbf_hess_matrix(t, kn, z, dims, z, dims),
    }
}

/// Graph builder for `K_fu` (`N×M`).
pub fn kfu_var(t: &mut Tape, kn: &KernelNodes, x: Var, z: Var, ind: &InducingSet) -> Var {
    match ind {
        InducingSet::Dirac { .. } => kernel::rbf_matrix(t, kn, x, z),
        InducingSet::Derivative { dims, .. } => kernel::rbf_grad_matrix(t, kn, x, z, dims),
    }
}

/// Graph builder for the prior inducing mean (`M×outputs`).
pub fn prior_mu_u_var(
    t: &mut Tape,
    mn: &MeanNodes,
    z: Var,
    ind: &InducingSet,
    outputs: usize,
) -> Result<Var> {
    match ind {
        InducingSet::Dirac { .. } => Ok(kernel::mean_apply(t, mn, z)),
        InducingSet::Derivative { dims, z: zv } => {
            let m = zv.nrows();
            let din = zv.ncols();
            match mn {
                MeanNodes::Zero { .. } | MeanNodes::Constant { .. } => {
                    Ok(t.constant(Array2::zeros((m, outputs))))
                }
                MeanNodes::Linear { weight, .. } => {
                    // row m of ∂(Wx+b)/∂x_{dims[m]} = W[:, dims[m]]
                    let mut mask = Array2::zeros((m, din));
                    for (i, &d) in dims.iter().enumerate() {
                        mask[[i, d]] = 1.0;
                    }
                    let maskv = t.constant(mask);
                    let wt = t.transpose(*weight);
                    Ok(t.matmul(maskv, wt))
                }
                MeanNodes::Identity => {
                    let mut ind_mat = Array2::zeros((m, outputs));
                    for (i, &d) in dims.iter().enumerate() {
                        if d < outputs {
                            ind_mat[[i, d]] = 1.0;
                        }
                    }
                    Ok(t.constant(ind_mat))
                }
            }
        }
    }
}

fn bind(t: &mut Tape, k: &KernelSpec, ind: &InducingSet) -> (KernelNodes, Var) {
    let v = t.constant(Array2::from_elem((1, 1), k.variance_raw));
    let l = t.constant(
        Array2::from_shape_vec((k.input_dim(), 1), k.lengthscales_raw.to_vec()).expect("shape"),
    );
    let kn = kernel::kernel_nodes(t, v, l);
    let z = t.constant(ind.z().clone());
    (kn, z)
}

/// `K_uu` for an inducing set.
pub fn kuu(ind: &InducingSet, k: &KernelSpec) -> Result<Array2<f64>> {
    ind.validate()?;
    if ind.input_dim() != k.input_dim() {
        return Err(Error::shape("inducing points do not match kernel input dim"));
    }
    let mut t = Tape::new();
    let (kn, z) = bind(&mut t, k, ind);
    let m = kuu_var(&mut t, &kn, z, ind);
    Ok(t.value(m).clone())
}

/// `K_fu` between a batch and an inducing set.
pub fn kfu(x: &Array2<f64>, ind: &InducingSet, k: &KernelSpec) -> Result<Array2<f64>> {
    ind.validate()?;
    if ind.input_dim() != k.input_dim() || x.ncols() != k.input_dim() {
        return Err(Error::shape("kfu input dims inconsistent"));
    }
    let mut t = Tape::new();
    let (kn, z) = bind(&mut t, k, ind);
    let xv = t.constant(x.clone());
    let m = kfu_var(&mut t, &kn, xv, z, ind);
    Ok(t.value(m).clone())
}

/// Prior mean of the inducing variables (`M×outputs`).
pub fn prior_mu_u(ind: &InducingSet, mean: &MeanSpec) -> Result<Array2<f64>> {
    ind.validate()?;
    mean.check_input_dim(ind.input_dim())?;
    let mut t = Tape::new();
    let z = t.constant(ind.z().clone());
    let mn = kernel::bind_mean(&mut t, mean);
    let out = prior_mu_u_var(&mut t, &mn, z, ind, mean.outputs())?;
    Ok(t.value(out).clone())
}

/// Seeded inducing-point initialization: a uniform subset of the training
/// inputs without replacement; if `m > n`, the remainder is drawn from a
/// normal fit to the input moments.
pub fn init_inducing_points(x: &Array2<f64>, m: usize, rng: &CounterRng) -> Array2<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mut z = Array2::zeros((m, d));
    let perm = rng.permutation(Purpose::Init, 0, n);
    for i in 0..m.min(n) {
        z.row_mut(i).assign(&x.row(perm[i]));
    }
    if m > n {
        // moment-matched normal for the overflow
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for c in 0..d {
            let col = x.column(c);
            let mu = col.sum() / n as f64;
            let v = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            mean[c] = mu;
            var[c] = v.max(1e-12);
        }
        for i in n..m {
            for c in 0..d {
                let e = rng.normal(Purpose::Init, 1, i as u64, c as u64);
                z[[i, c]] = mean[c] + var[c].sqrt() * e;
            }
        }
    }
    z
}
