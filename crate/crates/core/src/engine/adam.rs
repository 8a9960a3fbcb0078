use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::{Matrix, Real};
use crate::error::{Error, Result};

/// Parameter groups with their own learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Network,
    Latent,
    Rigid,
    Condition,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Network => "network",
            Group::Latent => "latent",
            Group::Rigid => "rigid",
            Group::Condition => "condition",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn for_param(p: &Matrix<T>) -> Self {
        Self::new(p.len())
    }
}

/// One tensor scheduled for an update.
pub struct Update<'a, T> {
    pub param: &'a mut Matrix<T>,
    pub grad: &'a Matrix<T>,
    pub state: &'a mut AdamState<T>,
}

/// Tensors of one group sharing a learning rate.
pub struct ParamGroup<'a, T> {
    pub group: Group,
    pub lr: f64,
    pub updates: Vec<Update<'a, T>>,
}

/// Bias-corrected Adam update of every tensor in every group.
///
/// All gradients are checked before any parameter moves, so a non-finite
/// gradient leaves the model untouched.
pub fn adam_step<T: Real>(groups: &mut [ParamGroup<'_, T>], cfg: &AdamConfig) -> Result<()> {
    for g in groups.iter() {
        for u in &g.updates {
            if u.grad.len() != u.param.len() || u.state.m.len() != u.param.len() {
                return Err(Error::Shape(format!(
                    "{} gradient/state length disagrees with parameter",
                    g.group
                )));
            }
            if !u.grad.all_finite() {
                return Err(Error::numeric(format!("{} gradient", g.group)));
            }
        }
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let eps = T::of(cfg.eps);
    for g in groups.iter_mut() {
        for u in g.updates.iter_mut() {
            let st = &mut *u.state;
            st.step += 1;
            let t = st.step as i32;
            let c1 = 1.0 / (1.0 - cfg.beta1.powi(t));
            let c2 = 1.0 / (1.0 - cfg.beta2.powi(t));
            let (c1, c2, lr) = (T::of(c1), T::of(c2), T::of(g.lr));
            for i in 0..u.param.data.len() {
                let grad = u.grad.data[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * grad;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * grad * grad;
                let mhat = st.m[i] * c1;
                let vhat = st.v[i] * c2;
                u.param.data[i] = u.param.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
