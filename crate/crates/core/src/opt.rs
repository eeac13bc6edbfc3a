//! First-order optimizers over flat parameter vectors, shared by the
//! contrastive baseline and the GP trainers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradient update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[serde(rename = "plain-gradient")]
    Sgd,
    /// Heavy-ball momentum (beta = 0.9).
    #[serde(rename = "momentum")]
    Momentum,
    /// Adaptive moments (beta1 = 0.9, beta2 = 0.999).
    #[serde(rename = "adaptive-moment")]
    Adam,
}

/// Shared training knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Sub-sample size per step; full batch when unset.
    pub batch_items: Option<usize>,
    pub seed: u64,
    /// Record/check cadence for full-objective evaluations.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_items: None,
            seed: 0,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Some(0) = self.batch_items {
            return Err(Error::Config("batch_items must be at least 1".into()));
        }
        Ok(())
    }
}

const MOMENTUM_BETA: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state over a flat parameter vector. Indices marked frozen in
/// the mask are skipped entirely: neither the parameter nor its optimizer
/// state moves.
#[derive(Debug, Clone)]
pub struct FlatOptimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    s: Vec<f64>,
    t: u64,
}

impl FlatOptimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; len],
            s: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, mask: Option<&[bool]>) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let frozen = |i: usize| mask.is_some_and(|m| m[i]);
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    if frozen(i) {
                        continue;
                    }
                    params[i] -= lr * grads[i];
                }
            }
            OptimizerKind::Momentum => {
                for i in 0..params.len() {
                    if frozen(i) {
                        continue;
                    }
                    self.m[i] = MOMENTUM_BETA * self.m[i] + grads[i];
                    params[i] -= lr * self.m[i];
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    if frozen(i) {
                        continue;
                    }
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
                    self.s[i] = ADAM_BETA2 * self.s[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
                    let m_hat = self.m[i] / c1;
                    let s_hat = self.s[i] / c2;
                    params[i] -= lr * m_hat / (s_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// One recorded training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub nll: f64,
    pub grad_norm: f64,
    pub sigma2: f64,
}

/// Iteration trace behind the `step,nll,grad_norm,sigma2` CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn push(&mut self, step: usize, nll: f64, grad_norm: f64, sigma2: f64) {
        self.records.push(TraceRecord {
            step,
            nll,
            grad_norm,
            sigma2,
        });
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "step,nll,grad_norm,sigma2")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.step, r.nll, r.grad_norm, r.sigma2)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut opt = FlatOptimizer::new(OptimizerKind::Sgd, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -0.25], 0.1, None);
        assert_eq!(p, vec![0.95, -0.975]);
    }

    #[test]
    fn mask_freezes_params_and_state() {
        let mut opt = FlatOptimizer::new(OptimizerKind::Adam, 2);
        let mut p = vec![1.0, 1.0];
        let mask = vec![true, false];
        opt.step(&mut p, &[1.0, 1.0], 0.1, Some(&mask));
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
        assert_eq!(opt.m[0], 0.0, "frozen Adam state untouched");
        assert!(opt.m[1] != 0.0);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut opt = FlatOptimizer::new(OptimizerKind::Adam, 1);
        let mut p = vec![3.0];
        for _ in 0..300 {
            let g = vec![2.0 * p[0]];
            opt.step(&mut p, &g, 0.05, None);
        }
        assert!(p[0].abs() < 0.05);
    }

    #[test]
    fn trace_csv_schema() {
        let mut trace = TrainTrace::default();
        trace.push(0, 1.5, 0.2, 0.01);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("step,nll,grad_norm,sigma2\n"));
        assert!(s.contains("0,1.5,0.2,0.01"));
    }
}
