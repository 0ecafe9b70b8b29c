//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, ModelWeights, Scalar};

/// Elements per parallel task in the update loop.
const CHUNK: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: ModelWeights<T>,
    pub v: ModelWeights<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(weights: &ModelWeights<T>, config: AdamConfig) -> Result<Self> {
        let arch = weights.architecture();
        Ok(Self {
            config,
            t: 0,
            m: ModelWeights::zeros(arch)?,
            v: ModelWeights::zeros(arch)?,
        })
    }
}

/// Applies one update in place. Non-finite gradients are rejected before any
/// parameter or moment changes.
pub fn adam_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let arch = weights.architecture();
    if grads.architecture() != arch || state.m.architecture() != arch {
        return Err(Error::Shape(format!(
            "optimizer buffers {:?} / {:?} do not match weights {arch:?}",
            grads.architecture(),
            state.m.architecture()
        )));
    }
    for block in grads.blocks() {
        if let Some(pos) = block.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Optimizer {
                block: block.name,
                message: format!("non-finite gradient at element {pos}"),
            });
        }
    }

    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let bias1 = T::of(1.0 - c.beta1.powi(t));
    let bias2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, b1, b2, eps) = (T::of(c.lr), T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
    let one = T::one();

    let update = |w: &mut [T], m: &mut [T], v: &mut [T], g: &[T]| {
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    let grad_blocks = grads.blocks();
    let blocks = weights
        .blocks_mut()
        .into_iter()
        .zip(state.m.blocks_mut())
        .zip(state.v.blocks_mut());
    for (((w, m), v), g) in blocks.zip(grad_blocks.iter().map(|b| b.values)) {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            w.par_chunks_mut(CHUNK)
                .zip(m.par_chunks_mut(CHUNK))
                .zip(v.par_chunks_mut(CHUNK))
                .zip(g.par_chunks(CHUNK))
                .for_each(|(((w, m), v), g)| update(w, m, v, g));
        }
        #[cfg(not(feature = "parallel"))]
        {
            for (((w, m), v), g) in w
                .chunks_mut(CHUNK)
                .zip(m.chunks_mut(CHUNK))
                .zip(v.chunks_mut(CHUNK))
                .zip(g.chunks(CHUNK))
            {
                update(w, m, v, g);
            }
        }
    }
    Ok(())
}
