use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use style_evo::io::{EmbeddingFile, StyleBankFile};
use style_evo::prompt::{default_vocab, FakeEncoder, TextEncoder};

const SMALL: &str = "\
# a run small enough for tests
data.train_samples = 32
data.eval_samples = 40
style.bank_size = 2
style.steps = 40
train.epochs = 1
ablation.seeds = 0, 1
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_style-evo"));
    c.env_remove("STYLE_EVO_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(name),
    )
    .unwrap()
}

fn field<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
}

/// Norm of the running sum, recomputed in f64 from the encoder alone.
fn accumulated_norms(texts: &[&str]) -> Vec<f64> {
    let enc = FakeEncoder::new(16, 0).unwrap();
    let mut acc = [0.0f64; 16];
    texts
        .iter()
        .map(|t| {
            for (a, v) in acc.iter_mut().zip(&enc.encode(t).unwrap().0) {
                *a += *v as f64;
            }
            acc.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect()
}

#[test]
fn chain_sample_matches_an_independent_recomputation_and_the_golden_file() {
    let out = stdout(&run(&["chain", "sample", "--seed", "42", "--level", "3"]));
    let words: Vec<&str> = field(&out, "words").split(" | ").collect();
    let (vocab, _) = default_vocab();
    assert_eq!(words.len(), 5);
    for (w, v) in words.iter().zip(vocab.as_slice()) {
        assert!(v.words.iter().any(|x| x == w), "{w} not in [{}]", v.name);
    }
    let (phrase, sentence) = (field(&out, "phrase"), field(&out, "sentence"));
    assert!(sentence.contains(phrase));

    // f_t1 is the word sum; each later level adds one more encoding
    let word_sum = accumulated_norms(&words);
    let mut texts = words.clone();
    texts.push(phrase);
    let f2 = accumulated_norms(&texts)[5];
    texts.push(sentence);
    let f3 = accumulated_norms(&texts)[6];
    for (key, want) in [("|f_t1|", word_sum[4]), ("|f_t2|", f2), ("|f_t3|", f3)] {
        let got: f64 = field(&out, key).parse().unwrap();
        assert!((got - want).abs() < 2e-6, "{key}: {got} vs {want}");
    }

    assert_eq!(out, golden("chain_sample_seed42_level3.txt"));
    assert_eq!(
        stdout(&run(&["chain", "sample", "--seed", "7", "--level", "1"])),
        golden("chain_sample_seed7_level1.txt")
    );
}

#[test]
fn seed_comes_from_the_flag_then_the_environment() {
    let flag = stdout(&run(&["chain", "sample", "--seed", "42"]));
    let env = stdout(
        &bin()
            .args(["chain", "sample"])
            .env("STYLE_EVO_SEED", "42")
            .output()
            .unwrap(),
    );
    assert_eq!(flag, env);
    let both = bin()
        .args(["chain", "sample", "--seed", "7", "--level", "1"])
        .env("STYLE_EVO_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(stdout(&both), golden("chain_sample_seed7_level1.txt"));
    let default = stdout(&run(&["chain", "sample"]));
    assert_eq!(field(&default, "seed"), "0");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(code(run(&["--help"])), 0);
    assert_eq!(code(run(&["frobnicate"])), 1);
    assert_eq!(code(run(&[])), 1);
    assert_eq!(code(run(&["chain", "sample", "--level", "4"])), 1);
    assert_eq!(code(run(&["chain", "sample", "--seed", "minus-one"])), 1);
    assert_eq!(code(run(&["train"])), 1);
    assert_eq!(code(run(&["style", "train"])), 1);

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "style.lr = banana\n").unwrap();
    let o = run(&["vocab", "list", "--config", s(&bad)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    assert_eq!(code(o), 2);
    assert_eq!(code(run(&["eval", s(&dir.path().join("missing.sevm"))])), 2);
    let junk = dir.path().join("junk.sevm");
    std::fs::write(&junk, b"SEVBxxxx").unwrap();
    assert_eq!(code(run(&["eval", s(&junk)])), 2);
}

#[test]
fn vocab_list_prints_every_vocabulary() {
    let out = stdout(&run(&["vocab", "list"]));
    let heads: Vec<_> = out
        .lines()
        .take(5)
        .map(|l| l.split(']').next().unwrap())
        .collect();
    assert_eq!(heads, ["[weather", "[time", "[style", "[action", "[detail"]);
    assert!(out.lines().any(|l| l.starts_with("phrase template: ")));

    let dir = tempfile::tempdir().unwrap();
    let vocab = "[weather]\nhail\n[time]\nnoon\n[style]\nink\n[action]\nwaiting\n[detail]\nkites\n\
                 [phrase]\n{action} at {time}\n[sentence]\n{phrase} in {weather} {style}\n";
    std::fs::write(dir.path().join("v.txt"), vocab).unwrap();
    let cfg = write_config(dir.path(), "prompt.vocab_file = v.txt\n");
    let out = stdout(&run(&["vocab", "list", "--config", s(&cfg)]));
    assert!(out.starts_with("[weather] hail\n"), "{out}");
    let chain = stdout(&run(&["chain", "sample", "--config", s(&cfg)]));
    assert_eq!(field(&chain, "sentence"), "waiting at noon in hail ink");
}

#[test]
fn style_train_writes_a_readable_reproducible_bank() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a.sevp"), dir.path().join("b.sevp"));
    for p in [&a, &b] {
        let out = stdout(&run(&[
            "style",
            "train",
            "--config",
            s(&cfg),
            "--seed",
            "3",
            "--out",
            s(p),
        ]));
        assert_eq!(out.lines().filter(|l| l.starts_with("chain:")).count(), 2);
    }
    let bank = StyleBankFile::read(&a).unwrap();
    assert_eq!(bank.channels, 16);
    assert_eq!(bank.entries.len(), 2);
    assert!(bank.entries.iter().all(|e| e.provenance.ends_with(":L3")));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.path().join("c.sevp");
    stdout(&run(&[
        "style",
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "3",
        "--level",
        "1",
        "--out",
        s(&c),
    ]));
    assert!(StyleBankFile::read(&c)
        .unwrap()
        .entries
        .iter()
        .all(|e| e.provenance.ends_with(":L1")));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    // enough training to move off chance, so the accuracies say something
    let cfg = write_config(dir.path(), "data.train_samples = 96\ntrain.epochs = 3\n");
    let train = |name: &str| {
        let ckpt = dir.path().join(format!("{name}.sevm"));
        let out = stdout(&run(&[
            "train",
            "--config",
            s(&cfg),
            "--seed",
            "5",
            "--out",
            s(&ckpt),
        ]));
        let files: Vec<Vec<u8>> = ["sevm", "tsv", "json", "sevp"]
            .iter()
            .map(|e| std::fs::read(ckpt.with_extension(e)).unwrap())
            .collect();
        (ckpt, out, files)
    };
    let (ckpt, report, a) = train("a");
    let (_, _, b) = train("b");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a[1].clone()).unwrap(), report);
    let json: serde_json::Value = serde_json::from_slice(&a[2]).unwrap();
    assert_eq!(json["seed"], 5);
    assert_eq!(json["variant"], "full");

    // evaluating the checkpoint redraws the same evaluation data
    let table: String = report.split("\n\n").next().unwrap().to_string() + "\n";
    assert_eq!(table.lines().count(), 7);
    assert_eq!(stdout(&run(&["eval", s(&ckpt)])), table);
    let evaluated = dir.path().join("eval.tsv");
    stdout(&run(&["eval", s(&ckpt), "--out", s(&evaluated)]));
    assert_eq!(std::fs::read_to_string(&evaluated).unwrap(), table);
    assert!(evaluated.with_extension("json").exists());
    assert_ne!(stdout(&run(&["eval", s(&ckpt), "--seed", "6"])), table);

    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("x.tsv"))
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn ablate_writes_a_five_row_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let paths: Vec<PathBuf> = ["a", "b"]
        .iter()
        .map(|n| dir.path().join(format!("{n}.tsv")))
        .collect();
    for p in &paths {
        stdout(&run(&["ablate", "--config", s(&cfg), "--out", s(p)]));
    }
    let tsv = std::fs::read_to_string(&paths[0]).unwrap();
    let rows: Vec<&str> = tsv
        .split("\n\n")
        .next()
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(rows, ["baseline", "one_step", "cgse", "cgse_sdm", "full"]);
    assert_eq!(tsv, std::fs::read_to_string(&paths[1]).unwrap());
    let (ja, jb) = (
        paths[0].with_extension("json"),
        paths[1].with_extension("json"),
    );
    assert_eq!(std::fs::read(&ja).unwrap(), std::fs::read(&jb).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(ja).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 5);
    assert_eq!(json["raw"].as_array().unwrap().len(), 10);
}

#[test]
fn exported_embeddings_stand_in_for_the_fake_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let fake = write_config(dir.path(), "");
    let emb = dir.path().join("emb.sevb");
    let out = stdout(&run(&[
        "export-fake-embeddings",
        "--config",
        s(&fake),
        "--seed",
        "9",
        "--out",
        s(&emb),
    ]));
    assert!(out.starts_with("wrote "));
    let file = EmbeddingFile::read(&emb).unwrap();
    assert_eq!(file.dim, 16);
    for r in &file.records {
        let n = r
            .values
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((n - 1.0).abs() < 1e-4, "{}: {n}", r.name);
    }

    let from_file = dir.path().join("file.cfg");
    std::fs::write(
        &from_file,
        format!("{SMALL}prompt.encoder = file\nprompt.embeddings = emb.sevb\n"),
    )
    .unwrap();
    let banks: Vec<Vec<u8>> = [&fake, &from_file]
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = dir.path().join(format!("{i}.sevp"));
            stdout(&run(&[
                "style",
                "train",
                "--config",
                s(c),
                "--seed",
                "9",
                "--out",
                s(&p),
            ]));
            std::fs::read(p).unwrap()
        })
        .collect();
    assert_eq!(banks[0], banks[1]);

    let a = stdout(&run(&[
        "chain",
        "sample",
        "--config",
        s(&fake),
        "--seed",
        "9",
    ]));
    let b = stdout(&run(&[
        "chain",
        "sample",
        "--config",
        s(&from_file),
        "--seed",
        "9",
    ]));
    let strip = |t: &str| {
        t.lines()
            .filter(|l| !l.starts_with("encoder:"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&a), strip(&b));

    // strings the export did not cover are a runtime error
    let o = run(&["chain", "sample", "--config", s(&from_file), "--seed", "10"]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}
