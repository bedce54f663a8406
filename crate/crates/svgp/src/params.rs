//! Parameter registry shared by models, graph builders and the trainer.
//!
//! Every model struct binds its raw tensors onto the tape in a fixed visit
//! order; the same order drives optimizer updates, so a parameter is
//! registered exactly once and names stay stable across a run.

use ndarray::Array2;

use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Variational,
    Generative,
}

/// How the raw storage maps to the constrained value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    SoftplusEps,
    TrilSoftplusDiag,
}

#[derive(Debug, Clone)]
pub struct ParamDecl {
    pub name: String,
    pub role: Role,
    pub transform: Transform,
}

/// Ordered registry of raw-parameter leaves created during a bind pass.
#[derive(Default)]
pub struct Binding {
    pub decls: Vec<ParamDecl>,
    pub vars: Vec<Var>,
}

impl Binding {
    pub fn new() -> Self {
        Binding::default()
    }

    /// Register `value` as a leaf (trainable) or constant (frozen graph).
    pub fn push(
        &mut self,
        t: &mut Tape,
        leaves: bool,
        name: String,
        role: Role,
        transform: Transform,
        value: Array2<f64>,
    ) -> Var {
        let var = if leaves { t.leaf(value) } else { t.constant(value) };
        self.decls.push(ParamDecl { name, role, transform });
        self.vars.push(var);
        var
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }
}

/// Sequential consumer for write-back after an optimizer step; values must
/// arrive in bind order.
pub struct ValueSource<'a> {
    values: std::slice::Iter<'a, Array2<f64>>,
}

impl<'a> ValueSource<'a> {
    pub fn new(values: &'a [Array2<f64>]) -> Self {
        ValueSource { values: values.iter() }
    }

    pub fn next_arr(&mut self) -> &'a Array2<f64> {
        self.values.next().expect("parameter count mismatch on write-back")
    }

    pub fn next_scalar(&mut self) -> f64 {
        self.next_arr()[[0, 0]]
    }

    pub fn finish(mut self) {
        assert!(self.values.next().is_none(), "unconsumed parameters on write-back");
    }
}
