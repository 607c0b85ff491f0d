use super::data::{gen_synthetic, Dataset, SyntheticDomain};
use super::eval::evaluate_shift;
use super::evolution::{
    chain_seed, run_style_evolution, Evolution, StyleSource, TextSetup, STYLE_SOURCE_MAPS,
};
use super::model::{ModelArch, TinyModel};
use super::transfer::{run_transfer_training, MetricsLog};
use crate::io::config::{Flags, RunConfig, Variant};
use crate::io::report::{AblationCell, AblationReport, AblationRow, AccuracyTable, TrendCheck};
use crate::prompt::ChainLevel;
use crate::tensor::Tensor;
use crate::{rng, Error, Result};

/// Everything one seeded run produced.
pub struct PipelineRun {
    pub model: TinyModel,
    pub log: MetricsLog,
    pub evolution: Option<Evolution>,
    pub table: AccuracyTable,
    /// Style bank checksum before and after transfer training.
    pub bank_checksums: Option<([u8; 32], [u8; 32])>,
}

/// Seed-dependent inputs shared by every variant of one seed.
struct Prepared {
    text: TextSetup,
    train: Dataset,
    source_feats: Vec<Tensor<f32>>,
    model_seed: u64,
}

fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let text = TextSetup::from_config(cfg, seed)?;
    let source = SyntheticDomain::source(cfg.data.classes)?;
    let train = gen_synthetic(
        &source,
        cfg.data.train_samples,
        cfg.data.image_size,
        rng::derive_seed(seed, "train-data"),
    )?;
    let model_seed = rng::derive_seed(seed, "model");
    // Layer 1 is initialised identically whatever the flags.
    let probe = TinyModel::new(
        ModelArch {
            flags: Flags::default(),
            ..ModelArch::from_config(cfg)
        },
        model_seed,
    )?;
    let n = STYLE_SOURCE_MAPS.min(train.len());
    let f1 = probe.layer1_features(&train.images.slice_batch(0..n)?)?;
    let source_feats = (0..n)
        .map(|i| f1.slice_batch(i..i + 1))
        .collect::<Result<_, _>>()?;
    Ok(Prepared {
        text,
        train,
        source_feats,
        model_seed,
    })
}

fn style_source(cfg: &RunConfig, flags: Flags) -> Result<Option<StyleSource>> {
    Ok(if flags.one_step {
        Some(StyleSource::OneStep)
    } else if flags.cgse {
        Some(StyleSource::Chain(ChainLevel::from_number(
            cfg.prompt.level,
        )?))
    } else {
        None
    })
}

fn evolve(cfg: &RunConfig, prep: &Prepared, source: StyleSource, seed: u64) -> Result<Evolution> {
    run_style_evolution(
        cfg,
        &prep.text,
        source,
        &prep.source_feats,
        evolution_seed(seed),
    )
}

fn evolution_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "evolution")
}

/// The style evolution phase alone, exactly as `run_pipeline` runs it for `seed`.
pub fn run_evolution(cfg: &RunConfig, source: StyleSource, seed: u64) -> Result<Evolution> {
    cfg.validate()?;
    evolve(cfg, &prepare(cfg, seed)?, source, seed)
}

/// Seeds of the prompt chains the evolution phase of run `seed` samples.
pub fn evolution_chain_seeds(cfg: &RunConfig, seed: u64) -> Vec<u64> {
    (0..cfg.style.bank_size)
        .map(|i| chain_seed(evolution_seed(seed), i))
        .collect()
}

fn train_and_eval(
    cfg: &RunConfig,
    prep: &Prepared,
    evolution: Option<Evolution>,
    seed: u64,
) -> Result<PipelineRun> {
    let mut model = TinyModel::new(ModelArch::from_config(cfg), prep.model_seed)?;
    let bank = evolution.as_ref().map(|e| &e.bank);
    let before = bank.map(|b| b.checksum());
    let log = run_transfer_training(
        cfg,
        &mut model,
        bank,
        &prep.text,
        &prep.train,
        rng::derive_seed(seed, "transfer"),
    )?;
    let bank_checksums = before.zip(bank.map(|b| b.checksum()));
    let table = evaluate_shift(
        &model,
        &SyntheticDomain::benchmark(cfg.data.classes)?,
        cfg.data.eval_samples,
        cfg.data.image_size,
        rng::derive_seed(seed, "eval-data"),
    )?;
    Ok(PipelineRun {
        model,
        log,
        evolution,
        table,
        bank_checksums,
    })
}

/// Style evolution (when a style source is enabled), transfer training and
/// evaluation on the source and the four shifted domains, all from `seed`.
pub fn run_pipeline(cfg: &RunConfig, seed: u64) -> Result<PipelineRun> {
    cfg.validate()?;
    let prep = prepare(cfg, seed)?;
    let evolution = match style_source(cfg, cfg.flags())? {
        Some(s) => Some(evolve(cfg, &prep, s, seed)?),
        None => None,
    };
    train_and_eval(cfg, &prep, evolution, seed)
}

/// Seeds out of `n` on which the full pipeline must match or beat the
/// baseline: four out of five, scaled.
pub fn trend_required(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

/// Runs the five ablation rows for every seed in `cfg.ablation.seeds`.
/// Banks are shared between rows with the same style source.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let seeds = &cfg.ablation.seeds;
    let mut raw = Vec::new();
    let mut domains = Vec::new();
    for &seed in seeds {
        let base = RunConfig {
            seed,
            ..cfg.clone()
        };
        let prep = prepare(&base, seed)?;
        let mut cache: Vec<(StyleSource, Evolution)> = Vec::new();
        for variant in Variant::ROWS {
            let mut vc = base.clone();
            vc.train.variant = variant;
            let evolution = match style_source(&vc, variant.flags())? {
                Some(s) => Some(match cache.iter().find(|(k, _)| *k == s) {
                    Some((_, e)) => e.clone(),
                    None => {
                        let e = evolve(&vc, &prep, s, seed)?;
                        cache.push((s, e.clone()));
                        e
                    }
                }),
                None => None,
            };
            let run = train_and_eval(&vc, &prep, evolution, seed)?;
            log::info!(
                "seed {seed} {}: shifted mean {:.4}",
                variant.name(),
                run.table.shifted_mean()
            );
            domains.clone_from(&run.table.domains);
            raw.push(AblationCell {
                variant: variant.name().into(),
                seed,
                shifted_mean: run.table.shifted_mean(),
                accuracy: run.table.accuracy,
            });
        }
    }
    let rows = Variant::ROWS
        .iter()
        .map(|v| {
            let cells: Vec<_> = raw.iter().filter(|c| c.variant == v.name()).collect();
            let n = cells.len() as f64;
            let mean = (0..domains.len())
                .map(|d| cells.iter().map(|c| c.accuracy[d]).sum::<f64>() / n)
                .collect();
            AblationRow {
                variant: v.name().into(),
                mean,
                shifted_mean: cells.iter().map(|c| c.shifted_mean).sum::<f64>() / n,
            }
        })
        .collect();
    let cell = |variant: &str, seed: u64| {
        raw.iter()
            .find(|c| c.variant == variant && c.seed == seed)
            .map(|c| c.shifted_mean)
            .ok_or_else(|| Error::state(format!("missing ablation cell {variant}/{seed}")))
    };
    let mut trend = Vec::new();
    for &seed in seeds {
        let (baseline, full) = (cell("baseline", seed)?, cell("full", seed)?);
        let holds = full >= baseline;
        if !holds {
            log::warn!("seed {seed}: full pipeline {full:.4} below baseline {baseline:.4} on shifted domains");
        }
        trend.push(TrendCheck {
            seed,
            baseline,
            full,
            holds,
        });
    }
    Ok(AblationReport {
        domains,
        rows,
        raw,
        trend,
        required: trend_required(seeds.len()),
    })
}
