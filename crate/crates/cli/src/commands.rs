use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde_json::json;
use style_evo::harness::{
    evaluate_shift, evolution_chain_seeds, run_ablation, run_evolution, run_pipeline, ModelArch,
    StyleSource, SyntheticDomain, TextSetup, TinyModel,
};
use style_evo::io::report::write_report;
use style_evo::io::{parse_config, Checkpoint, EmbeddingFile, EmbeddingRecord, RunConfig};
use style_evo::prompt::{
    default_vocab, ChainLevel, FakeEncoder, PromptChain, TextEncoder, VocabularySet,
};
use style_evo::{rng, Error};

use crate::{ChainAction, Cli, Command, Global, StyleAction, VocabAction};

pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<style_evo::io::FormatError> for Failure {
    fn from(e: style_evo::io::FormatError) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    let g = &cli.global;
    match &cli.command {
        Command::Vocab {
            action: VocabAction::List,
        } => vocab_list(g),
        Command::Chain {
            action: ChainAction::Sample,
        } => chain_sample(g),
        Command::Style {
            action: StyleAction::Train,
        } => style_train(g),
        Command::Train => train(g),
        Command::Eval { checkpoint } => eval(g, checkpoint),
        Command::Ablate => ablate(g),
        Command::ExportFakeEmbeddings => export_fake_embeddings(g),
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

/// Configuration with the command-line overrides applied, and the run seed.
fn load(g: &Global) -> Result<(RunConfig, u64), Failure> {
    let mut cfg = match &g.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(l) = g.level {
        cfg.prompt.level = l;
    }
    cfg.validate()?;
    let seed = cfg.seed;
    Ok((cfg, seed))
}

fn out_path<'a>(g: &'a Global, command: &str) -> Result<&'a Path, Failure> {
    g.out
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("{command} needs --out <PATH>")))
}

fn vocab_list(g: &Global) -> Outcome {
    let (cfg, _) = load(g)?;
    let (vocab, templates) = match &cfg.prompt.vocab_file {
        Some(p) => VocabularySet::load(p)?,
        None => default_vocab(),
    };
    let mut s = String::new();
    for v in vocab.as_slice() {
        let _ = writeln!(s, "[{}] {}", v.name, v.words.join(", "));
    }
    for t in &templates.phrase {
        let _ = writeln!(s, "phrase template: {t}");
    }
    for t in &templates.sentence {
        let _ = writeln!(s, "sentence template: {t}");
    }
    emit(&s);
    Ok(())
}

fn chain_sample(g: &Global) -> Outcome {
    let (cfg, seed) = load(g)?;
    let text = TextSetup::from_config(&cfg, seed)?;
    let level = ChainLevel::from_number(cfg.prompt.level)?;
    let chain = PromptChain::compose(
        &text.vocab,
        &text.templates,
        text.encoder.as_ref(),
        seed,
        level,
    )?;
    let mut s = String::new();
    let _ = writeln!(s, "seed: {seed}");
    let _ = writeln!(s, "level: {}", level.number());
    let _ = writeln!(s, "encoder: {}", text.encoder.identifier());
    let _ = writeln!(s, "words: {}", chain.words.join(" | "));
    if level >= ChainLevel::Phrase {
        let _ = writeln!(s, "phrase: {}", chain.phrase);
    }
    if level >= ChainLevel::Sentence {
        let _ = writeln!(s, "sentence: {}", chain.sentence);
    }
    for (i, l) in [ChainLevel::Words, ChainLevel::Phrase, ChainLevel::Sentence]
        .into_iter()
        .enumerate()
    {
        if let Some(f) = chain.feature(l) {
            let _ = writeln!(s, "|f_t{}|: {:.6}", i + 1, f.norm());
        }
    }
    emit(&s);
    Ok(())
}

fn style_train(g: &Global) -> Outcome {
    let out = out_path(g, "style train")?;
    let (cfg, seed) = load(g)?;
    let source = if cfg.flags().one_step {
        StyleSource::OneStep
    } else {
        StyleSource::Chain(ChainLevel::from_number(cfg.prompt.level)?)
    };
    let evolution = run_evolution(&cfg, source, seed)?;
    evolution.bank.to_file()?.write(out)?;
    let mut s = String::new();
    for (p, loss) in evolution.bank.entries().iter().zip(&evolution.final_losses) {
        let _ = writeln!(s, "{}\tL_tc {loss:.4}", p.provenance);
    }
    let _ = writeln!(
        s,
        "wrote {} style entries to {}",
        evolution.bank.len(),
        out.display()
    );
    emit(&s);
    Ok(())
}

fn checkpoint_meta(cfg: &RunConfig, seed: u64) -> Result<String, Failure> {
    serde_json::to_string(&json!({ "seed": seed, "config": cfg }))
        .map_err(|e| Error::state(format!("serializing checkpoint metadata: {e}")).into())
}

fn train(g: &Global) -> Outcome {
    let out = out_path(g, "train")?;
    let report = out.with_extension("tsv");
    if report == out {
        return Err(Failure::Usage(
            "train writes its report to <out>.tsv, so --out cannot end in .tsv".into(),
        ));
    }
    let (cfg, seed) = load(g)?;
    let run = run_pipeline(&cfg, seed)?;
    Checkpoint::from_store(&run.model.store, checkpoint_meta(&cfg, seed)?).write(out)?;
    if let Some(e) = &run.evolution {
        e.bank.to_file()?.write(&out.with_extension("sevp"))?;
    }

    let mut tsv = run.table.to_tsv();
    tsv.push_str("\nepoch\ttask\tloss_d\tloss_sc\tloss_gc\ttotal\tstyled_fraction\n");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for e in &run.log.epochs {
        let _ = writeln!(
            tsv,
            "{}\t{:.4}\t{}\t{}\t{}\t{:.4}\t{:.4}",
            e.epoch,
            e.task,
            opt(e.loss_d),
            opt(e.loss_sc),
            opt(e.loss_gc),
            e.total,
            e.styled_fraction
        );
    }
    let side = json!({
        "seed": seed,
        "variant": cfg.train.variant.name(),
        "accuracy": run.table,
        "epochs": run.log.epochs,
    });
    write_report(&report, &tsv, &side)?;
    emit(&tsv);
    Ok(())
}

/// Configuration and seed recorded in a checkpoint written by `train`.
fn meta_config(ckpt: &Checkpoint) -> Result<(RunConfig, u64), Failure> {
    let bad = |e: serde_json::Error| {
        Error::state(format!("checkpoint metadata is not a run record: {e}"))
    };
    let v: serde_json::Value = serde_json::from_str(&ckpt.meta).map_err(bad)?;
    let cfg: RunConfig = serde_json::from_value(v["config"].clone()).map_err(bad)?;
    let seed = v["seed"]
        .as_u64()
        .ok_or_else(|| Error::state("checkpoint metadata has no seed"))?;
    Ok((cfg, seed))
}

fn eval(g: &Global, path: &Path) -> Outcome {
    let ckpt = Checkpoint::read(path)?;
    let (stored, stored_seed) = meta_config(&ckpt)?;
    let (cfg, seed) = if g.config.is_some() {
        load(g)?
    } else {
        (stored, g.seed.unwrap_or(stored_seed))
    };
    let mut model = TinyModel::new(ModelArch::from_config(&cfg), 0)?;
    ckpt.load_into(&mut model.store)?;
    let table = evaluate_shift(
        &model,
        &SyntheticDomain::benchmark(cfg.data.classes)?,
        cfg.data.eval_samples,
        cfg.data.image_size,
        rng::derive_seed(seed, "eval-data"),
    )?;
    let tsv = table.to_tsv();
    if let Some(out) = &g.out {
        write_report(out, &tsv, &table)?;
    }
    emit(&tsv);
    Ok(())
}

fn ablate(g: &Global) -> Outcome {
    let (cfg, _) = load(g)?;
    let report = run_ablation(&cfg)?;
    let tsv = report.to_tsv();
    if let Some(out) = &g.out {
        write_report(out, &tsv, &report)?;
    }
    emit(&tsv);
    if !report.trend_holds() {
        eprintln!(
            "warning: full pipeline below baseline on seeds {:?}",
            report.violations()
        );
    }
    Ok(())
}

fn export_fake_embeddings(g: &Global) -> Outcome {
    let out = out_path(g, "export-fake-embeddings")?;
    let (cfg, seed) = load(g)?;
    let enc = FakeEncoder::new(cfg.fake_dim(), cfg.prompt.encoder_seed)?;
    let (vocab, templates) = match &cfg.prompt.vocab_file {
        Some(p) => VocabularySet::load(p)?,
        None => default_vocab(),
    };

    // everything `chain sample` and the evolution phase of this seed encode
    let mut texts: Vec<String> = vocab
        .as_slice()
        .iter()
        .flat_map(|v| v.words.clone())
        .collect();
    texts.extend(cfg.prompt.source_words.iter().cloned());
    let seeds = std::iter::once(seed).chain(evolution_chain_seeds(&cfg, seed));
    for s in seeds {
        texts.extend(
            PromptChain::compose(&vocab, &templates, &enc, s, ChainLevel::Sentence)?.texts(),
        );
    }
    let mut seen = HashSet::new();
    texts.retain(|t| seen.insert(t.clone()));

    let records = texts
        .into_iter()
        .map(|name| {
            let values = enc.encode(&name)?.0;
            Ok(EmbeddingRecord { name, values })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let file = EmbeddingFile::new(enc.dim(), records)?;
    file.write(out)?;
    emit(&format!(
        "wrote {} embeddings of dimension {} to {}\n",
        file.records.len(),
        file.dim,
        out.display()
    ));
    Ok(())
}
