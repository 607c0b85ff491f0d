//! Plain supervised training written without the pipeline's forward pass,
//! used to check that the pipeline with every component disabled reduces to
//! it.

use super::data::Dataset;
use super::model::{ModelArch, TinyModel};
use super::transfer::epoch_order;
use crate::io::config::{Flags, RunConfig};
use crate::tensor::{Graph, Sgd};
use crate::{rng, Result};

/// Trains the bare backbone with cross-entropy only and returns the task
/// loss of every iteration. `model_seed` and `seed` play the roles they have
/// in the pipeline.
pub fn train_plain_supervised(
    cfg: &RunConfig,
    data: &Dataset,
    model_seed: u64,
    seed: u64,
) -> Result<Vec<f32>> {
    let arch = ModelArch {
        flags: Flags::default(),
        ..ModelArch::from_config(cfg)
    };
    let mut m = TinyModel::new(arch, model_seed)?;
    m.set_freeze_early(cfg.train.freeze_early);
    let mut opt = Sgd::new(cfg.train.optim);
    let mut order_rng = rng::derive(seed, "transfer-shuffle");
    let mut losses = Vec::new();
    for _ in 0..cfg.train.epochs {
        for chunk in epoch_order(&mut order_rng, data.len()).chunks(cfg.train.batch) {
            let (images, labels) = data.gather(chunk)?;
            let mut g = Graph::new();
            let p = m.store.bind(&mut g);
            let mut h = g.constant(images);
            for (i, layer) in [&m.layer1, &m.layer2, &m.layer3, &m.layer4]
                .into_iter()
                .enumerate()
            {
                if i > 0 {
                    h = g.relu(h);
                }
                h = layer.forward(&mut g, &p, h)?;
            }
            let h = g.relu(h);
            let pooled = g.global_avg_pool(h)?;
            let logits = m.head.forward(&mut g, &p, pooled)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            opt.step(&mut m.store, &p, &grads)?;
            losses.push(g.value(loss).item());
        }
    }
    Ok(losses)
}
