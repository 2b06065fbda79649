//! Per-modality CNN backbone: three conv/batchnorm/relu/maxpool blocks,
//! spatial global max pooling per timestep, and an optional affine embedding.

use rand_chacha::ChaCha8Rng;

use crate::autograd::conv::BN_MOMENTUM;
use crate::autograd::{ParamId, ParamStore, Result, Tape, TensorRef};

use super::{glorot_uniform, BackboneConfig};

struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
}

/// CNN stack applied per timestep (the time axis is the batch axis, so
/// weights are shared across time).
pub struct Backbone {
    blocks: Vec<ConvBlock>,
    embed: Option<(ParamId, ParamId)>,
    filters: usize,
    embed_dim: usize,
}

impl Backbone {
    /// `with_embed = false` skips the affine embedding so the raw pooled
    /// filter responses feed the head directly (max-over-time variant).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        with_embed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = cfg.kernel;
        let f = cfg.filters;
        let mut blocks = Vec::with_capacity(cfg.conv_layers);
        for layer in 0..cfg.conv_layers {
            let ci = if layer == 0 { 1 } else { f };
            let name = |part: &str| format!("{prefix}.conv{layer}.{part}");
            blocks.push(ConvBlock {
                weight: store.add_param(
                    &name("w"),
                    vec![k, k, ci, f],
                    glorot_uniform(rng, k * k * ci, k * k * f, k * k * ci * f),
                ),
                bias: store.add_param(&name("b"), vec![f], vec![0.0; f]),
                gamma: store.add_param(&name("gamma"), vec![f], vec![1.0; f]),
                beta: store.add_param(&name("beta"), vec![f], vec![0.0; f]),
                run_mean: store.add_state(&name("run_mean"), vec![f], vec![0.0; f]),
                run_var: store.add_state(&name("run_var"), vec![f], vec![1.0; f]),
            });
        }
        let embed = with_embed.then(|| {
            (
                store.add_param(
                    &format!("{prefix}.embed.w"),
                    vec![f, cfg.embed_dim],
                    glorot_uniform(rng, f, cfg.embed_dim, f * cfg.embed_dim),
                ),
                store.add_param(&format!("{prefix}.embed.b"), vec![cfg.embed_dim], vec![0.0; cfg.embed_dim]),
            )
        });
        Self { blocks, embed, filters: f, embed_dim: cfg.embed_dim }
    }

    /// Dimension of the per-timestep vectors this backbone emits.
    pub fn output_dim(&self) -> usize {
        if self.embed.is_some() {
            self.embed_dim
        } else {
            self.filters
        }
    }

    /// `x: t x h x w x 1` -> `t x output_dim`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: TensorRef,
        train: bool,
    ) -> Result<TensorRef> {
        let mut cur = x;
        for block in &self.blocks {
            let w = tape.param(store, block.weight);
            let b = tape.param(store, block.bias);
            let gamma = tape.param(store, block.gamma);
            let beta = tape.param(store, block.beta);
            let conv = tape.conv2d(cur, w, b)?;
            let normed = if train {
                let (out, mean, var) = tape.batchnorm_train(conv, gamma, beta)?;
                store.blend_state(block.run_mean, &mean, BN_MOMENTUM);
                store.blend_state(block.run_var, &var, BN_MOMENTUM);
                out
            } else {
                let mean = store.values(block.run_mean).to_vec();
                let var = store.values(block.run_var).to_vec();
                tape.batchnorm_eval(conv, gamma, beta, &mean, &var)?
            };
            let act = tape.relu(normed)?;
            cur = tape.maxpool2d(act)?;
        }
        // Spatial global max per timestep: t x h x w x f -> t x f.
        let pooled_w = tape.max_over_axis(cur, 1)?;
        let pooled = tape.max_over_axis(pooled_w, 1)?;
        match self.embed {
            Some((w, b)) => {
                let we = tape.param(store, w);
                let be = tape.param(store, b);
                tape.linear(pooled, we, be)
            }
            None => Ok(pooled),
        }
    }
}
