use super::data::{gen_synthetic, SyntheticDomain};
use super::model::TinyModel;
use crate::io::report::AccuracyTable;
use crate::{Error, Result};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 50;

/// Accuracy of `model` on `n` fresh samples of every domain. All domains
/// share the content seed, so they differ only in style.
pub fn evaluate_shift(
    model: &TinyModel,
    domains: &[SyntheticDomain],
    n: usize,
    image_size: usize,
    seed: u64,
) -> Result<AccuracyTable> {
    if domains.is_empty() {
        return Err(Error::config("evaluation needs at least one domain"));
    }
    let mut table = AccuracyTable {
        domains: Vec::with_capacity(domains.len()),
        accuracy: Vec::with_capacity(domains.len()),
    };
    for d in domains {
        let data = gen_synthetic(d, n, image_size, seed)?;
        let preds = model.predict(&data.images, EVAL_CHUNK)?;
        let correct = preds
            .iter()
            .zip(&data.labels)
            .filter(|(p, l)| p == l)
            .count();
        table.domains.push(d.name.clone());
        table.accuracy.push(correct as f64 / n as f64);
    }
    Ok(table)
}
