use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::evolution::TextSetup;
use super::model::{AuxInputs, TinyModel};
use crate::io::config::RunConfig;
use crate::style::StyleBank;
use crate::tensor::{Graph, Sgd, Tensor};
use crate::{rng, Error, Result};

/// Mean losses of one epoch. Auxiliary entries are absent when the matching
/// component is disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task: f64,
    pub loss_d: Option<f64>,
    pub loss_sc: Option<f64>,
    pub loss_gc: Option<f64>,
    pub total: f64,
    /// Fraction of iterations that used a sampled style.
    pub styled_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
    /// Task loss of every iteration, in order.
    pub step_task: Vec<f32>,
    /// Structure hash of the first iteration's graph.
    pub graph_signature: u64,
}

/// Plain-loop shuffling shared with the supervised reference: one permutation
/// per epoch from the `transfer-shuffle` stream.
pub(crate) fn epoch_order(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Transfer-stage training of `model` on `data`.
///
/// Per iteration: when a style source is enabled, with probability
/// `train.style_prob` one bank entry is drawn and applied to the style stream;
/// the forward pass adds the enabled auxiliary losses to the task
/// cross-entropy with weights `disentangle.loss_weights`; one SGD step
/// follows. The bank is only read.
pub fn run_transfer_training(
    cfg: &RunConfig,
    model: &mut TinyModel,
    bank: Option<&StyleBank>,
    text: &TextSetup,
    data: &Dataset,
    seed: u64,
) -> Result<MetricsLog> {
    let flags = model.arch.flags;
    if flags.uses_bank() && bank.is_none_or(StyleBank::is_empty) {
        return Err(Error::config(
            "the enabled style source needs a non-empty style bank",
        ));
    }
    if data.is_empty() || cfg.train.batch == 0 {
        return Err(Error::config(
            "transfer training needs data and a positive batch size",
        ));
    }
    model.set_freeze_early(cfg.train.freeze_early);
    let mut opt = Sgd::new(cfg.train.optim);
    let mut order_rng = rng::derive(seed, "transfer-shuffle");
    let mut style_rng = rng::derive(seed, "transfer-style");
    let [wd, wsc, wgc] = cfg.disentangle.loss_weights;
    let source_text = Tensor::new(&[text.source_text.dim()], text.source_text.0.clone())?;
    let mut log = MetricsLog {
        epochs: Vec::new(),
        step_task: Vec::new(),
        graph_signature: 0,
    };
    for epoch in 1..=cfg.train.epochs {
        let order = epoch_order(&mut order_rng, data.len());
        let mut sums = [0.0f64; 5];
        let mut styled = 0usize;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.train.batch) {
            let (images, labels) = data.gather(chunk)?;
            let style = match bank {
                Some(b) if flags.uses_bank() && style_rng.random_bool(cfg.train.style_prob) => {
                    Some(b.sample_with(&mut style_rng)?.clone())
                }
                _ => None,
            };
            styled += style.is_some() as usize;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let x = g.constant(images);
            let aux = AuxInputs {
                source_text: g.constant(source_text.clone()),
                proj: g.constant(text.projection.matrix.clone()),
                tau: cfg.disentangle.tau,
            };
            let out = model.forward(&mut g, &p, x, style.as_ref(), Some(&aux))?;
            let task = g.cross_entropy(out.logits, &labels)?;
            let mut terms = vec![(task, 1.0f32)];
            for (l, w) in [(out.loss_d, wd), (out.loss_sc, wsc), (out.loss_gc, wgc)] {
                if let Some(l) = l {
                    terms.push((l, w as f32));
                }
            }
            let total = if terms.len() == 1 {
                task
            } else {
                g.weighted_sum(&terms)?
            };
            if log.step_task.is_empty() {
                log.graph_signature = g.structure_signature();
            }
            let grads = g.backward(total)?;
            opt.step(&mut model.store, &p, &grads)?;
            let vals = [
                Some(task),
                out.loss_d,
                out.loss_sc,
                out.loss_gc,
                Some(total),
            ];
            for (s, v) in sums.iter_mut().zip(vals) {
                if let Some(v) = v {
                    *s += g.value(v).item() as f64;
                }
            }
            log.step_task.push(g.value(task).item());
            steps += 1;
        }
        let mean = |s: f64| s / steps as f64;
        let m = EpochMetrics {
            epoch,
            task: mean(sums[0]),
            loss_d: flags.sdm.then(|| mean(sums[1])),
            loss_sc: flags.sdm.then(|| mean(sums[2])),
            loss_gc: flags.cpcm.then(|| mean(sums[3])),
            total: mean(sums[4]),
            styled_fraction: styled as f64 / steps as f64,
        };
        if !m.total.is_finite() {
            return Err(Error::state(format!("training diverged in epoch {epoch}")));
        }
        log::info!("epoch {epoch}: task {:.4} total {:.4}", m.task, m.total);
        log.epochs.push(m);
    }
    Ok(log)
}
