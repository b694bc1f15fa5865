use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::ParameterSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" | "adaptive" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}' (sgd|adam)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient anywhere aborts the step
    /// before any parameter is touched.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::usage(format!(
                    "gradient for '{name}' has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient for '{name}'")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above").data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for i in 0..p.len() {
                        let gv = g.data()[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
