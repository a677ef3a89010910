use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchbert::adaptive::{qp_oracle, solve_weights, TaskSignals};
use patchbert::checkpoint;
use patchbert::data::{generate_dataset, read_corpus, write_corpus, Split};
use patchbert::dataset::{PairDataset, PairedExample};
use patchbert::eval::{evaluate, report_csv, report_text};
use patchbert::model::{Model, ModelConfig};
use patchbert::text::{build_vocab, Vocabulary};
use patchbert::train::{log_csv, run_training, stream_seed, SnapshotPolicy, Weighting};
use patchbert::vsl::{bench_csv, bench_latency, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::settings::{parse_key_values, Profile, Settings};
use crate::{Cli, Command};

const EVAL_STREAM: u64 = 3;

pub fn run(cli: Cli) -> Result<()> {
    let settings = resolve(&cli)?;
    settings.validate()?;
    match &cli.command {
        Command::GenData { .. } => gen_data(&settings, &cli.out),
        Command::BuildVocab { .. } => build_vocabulary(&settings, &cli.out),
        Command::Pretrain { .. } => pretrain(&settings, &cli.out),
        Command::Eval { .. } => eval(&settings, &cli.out),
        Command::BenchVsl { .. } => bench(&settings, &cli.out),
        Command::SolveWeights { signals, verify } => solve(signals, *verify),
    }
}

/// Profile defaults, then the config file, then flags.
fn resolve(cli: &Cli) -> Result<Settings> {
    let file_profile = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("--config: reading {}", path.display()))?;
            parse_key_values(&text)
                .with_context(|| format!("--config {}", path.display()))?
                .into_iter()
                .find(|(k, _)| k == "profile")
                .map(|(_, v)| v.parse::<Profile>())
                .transpose()?
        }
        None => None,
    };
    let mut s = Settings::defaults(cli.profile.or(file_profile).unwrap_or(Profile::Desk));
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
        s.train.seed = seed;
    }
    fn inputs(s: &mut Settings, i: &crate::CorpusInputs) {
        if let Some(c) = &i.corpus {
            s.corpus = Some(c.clone());
        }
        if let Some(v) = &i.vocab {
            s.vocab = Some(v.clone());
        }
    }
    match &cli.command {
        Command::GenData { count, image_size } => {
            s.product_count = count.unwrap_or(s.product_count);
            s.image_size = image_size.unwrap_or(s.image_size);
        }
        Command::BuildVocab { corpus, max_size } => {
            if let Some(c) = corpus {
                s.corpus = Some(c.clone());
            }
            s.vocab_max_size = max_size.unwrap_or(s.vocab_max_size);
        }
        Command::Pretrain { inputs: i, weighting, steps } => {
            inputs(&mut s, i);
            if let Some(w) = weighting {
                s.train.weighting = w.parse::<Weighting>()?;
            }
            if let Some(n) = steps {
                s.train.total_steps = *n;
                s.train.warmup_steps = s.train.warmup_steps.min(*n);
            }
        }
        Command::Eval { inputs: i, checkpoint, queries, distractors } => {
            inputs(&mut s, i);
            if let Some(c) = checkpoint {
                s.checkpoint = Some(c.clone());
            }
            s.retrieval.queries = queries.unwrap_or(s.retrieval.queries);
            s.retrieval.distractors = distractors.unwrap_or(s.retrieval.distractors);
        }
        Command::BenchVsl { inputs: i, checkpoint, repetitions, batch_size, threads } => {
            inputs(&mut s, i);
            if let Some(c) = checkpoint {
                s.checkpoint = Some(c.clone());
            }
            s.bench.repetitions = repetitions.unwrap_or(s.bench.repetitions);
            s.bench_batch_size = batch_size.unwrap_or(s.bench_batch_size);
            s.bench.threads = threads.unwrap_or(s.bench.threads);
        }
        Command::SolveWeights { .. } => {}
    }
    Ok(s)
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let Some(p) = path else {
        bail!("missing --{flag} (or `{flag}` in --config)");
    };
    if !p.exists() {
        bail!("--{flag}: {} does not exist", p.display());
    }
    Ok(p)
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("--out: creating {}", out.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes `<command>.manifest`: the fully resolved settings as a config file
/// that reproduces the run via `--config`.
fn write_manifest(out: &Path, command: &str, settings: &Settings, outputs: &[&str]) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# command = {command}");
    let _ = writeln!(text, "# version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(text, "# outputs = {}", outputs.join(" "));
    for (k, v) in settings.entries() {
        let _ = writeln!(text, "{k} = {v}");
    }
    write(&out.join(format!("{command}.manifest")), text)
}

fn gen_data(s: &Settings, out: &Path) -> Result<()> {
    let records = generate_dataset(s.product_count, s.image_size, s.seed)?;
    prepare_out(out)?;
    write_corpus(out, &records)?;
    write_manifest(out, "gen-data", s, &["products.txt", "images/", "train.txt", "val.txt", "test.txt"])?;
    println!("wrote {} products to {}", records.len(), out.display());
    Ok(())
}

fn build_vocabulary(s: &Settings, out: &Path) -> Result<()> {
    let corpus = require(&s.corpus, "corpus")?;
    let records = read_corpus(corpus)?;
    let vocab = build_vocab(
        records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.description.as_str()),
        s.vocab_max_size,
    )?;
    prepare_out(out)?;
    vocab.save(&out.join("vocab.txt"))?;
    write_manifest(out, "build-vocab", s, &["vocab.txt"])?;
    println!("vocabulary of {} pieces", vocab.len());
    Ok(())
}

struct Loaded {
    records: Vec<patchbert::data::ProductRecord>,
    vocab: Vocabulary,
    config: ModelConfig,
}

fn load_inputs(s: &Settings) -> Result<Loaded> {
    let corpus = require(&s.corpus, "corpus")?;
    let vocab_path = require(&s.vocab, "vocab")?;
    let vocab = Vocabulary::load(vocab_path)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..s.model.clone()
    };
    config.validate()?;
    Ok(Loaded {
        records: read_corpus(corpus)?,
        vocab,
        config,
    })
}

fn load_model(s: &Settings, expected: &ModelConfig) -> Result<Model> {
    let path = require(&s.checkpoint, "checkpoint")?;
    let model = checkpoint::load(path)?;
    if model.config.vocab_size != expected.vocab_size {
        bail!(
            "--checkpoint: model vocabulary {} does not match --vocab size {}",
            model.config.vocab_size,
            expected.vocab_size
        );
    }
    Ok(model)
}

fn pretrain(s: &Settings, out: &Path) -> Result<()> {
    let l = load_inputs(s)?;
    let train = PairDataset::from_records(&l.records, Split::Train, &l.vocab, &l.config)?;
    let validation = PairDataset::from_records(&l.records, Split::Validation, &l.vocab, &l.config)?;
    let model = Model::with_init_std(l.config.clone(), s.init_std, &mut ChaCha8Rng::seed_from_u64(s.seed))?;
    prepare_out(out)?;
    let snapshots = SnapshotPolicy {
        dir: Some(out.to_path_buf()),
    };
    let outcome = run_training(model, &train, &validation, &s.train, &snapshots, &mut |p| {
        eprintln!(
            "step {} validation accuracy {:.2}{}",
            p.step,
            p.accuracy,
            if p.improved { " *" } else { "" }
        );
    })?;
    checkpoint::save(&outcome.model, &out.join("model.ckpt"))?;
    write(&out.join("train_log.csv"), log_csv(&outcome.log))?;
    let mut val = String::from("step,accuracy,improved\n");
    for p in &outcome.evaluations {
        let _ = writeln!(val, "{},{},{}", p.step, p.accuracy, p.improved);
    }
    write(&out.join("validation.csv"), val)?;
    write_manifest(out, "pretrain", s, &["model.ckpt", "train_log.csv", "validation.csv"])?;
    let best = outcome
        .evaluations
        .iter()
        .map(|p| p.accuracy)
        .fold(f64::NAN, f64::max);
    println!(
        "weighting={} steps={} stopped_early={} best_validation_accuracy={:.2}",
        s.train.weighting,
        outcome.steps(),
        outcome.stopped_early,
        best
    );
    Ok(())
}

fn eval(s: &Settings, out: &Path) -> Result<()> {
    let l = load_inputs(s)?;
    let model = load_model(s, &l.config)?;
    let dataset = PairDataset::from_records(&l.records, s.eval_split, &l.vocab, &model.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(s.seed, EVAL_STREAM));
    let reports = evaluate(&model, &dataset, s.retrieval, &mut rng)?;
    prepare_out(out)?;
    let text = report_text(&reports);
    write(&out.join("report.txt"), &text)?;
    write(&out.join("report.csv"), report_csv(&reports))?;
    write_manifest(out, "eval", s, &["report.txt", "report.csv"])?;
    print!("{text}");
    Ok(())
}

fn bench(s: &Settings, out: &Path) -> Result<()> {
    let l = load_inputs(s)?;
    let model = load_model(s, &l.config)?;
    let dataset = PairDataset::from_records(&l.records, s.eval_split, &l.vocab, &model.config)?;
    if dataset.is_empty() {
        bail!("--corpus: no products in the {:?} split", s.eval_split);
    }
    let n = dataset.len();
    let workload = (0..s.bench_batches)
        .map(|b| {
            (0..s.bench_batch_size)
                .map(|j| {
                    let i = (b * s.bench_batch_size + j) % n;
                    dataset.inference_input(&PairedExample { text: i, image: i, label: true }, &model.config)
                })
                .collect::<patchbert::Result<Vec<_>>>()
        })
        .collect::<patchbert::Result<Vec<_>>>()?;
    let stats = Mode::BOTH
        .iter()
        .map(|&m| bench_latency(&model, &workload, m, s.bench))
        .collect::<patchbert::Result<Vec<_>>>()?;
    prepare_out(out)?;
    let csv = bench_csv(&stats);
    write(&out.join("bench.csv"), &csv)?;
    write_manifest(out, "bench-vsl", s, &["bench.csv"])?;
    print!("{csv}");
    println!("speedup={:.3}", stats[0].mean_ms / stats[1].mean_ms);
    Ok(())
}

fn solve(signals: &[f64], verify: bool) -> Result<()> {
    let signals = TaskSignals::new(signals.to_vec()).context("signals")?;
    let weights = solve_weights(&signals);
    let line: Vec<String> = weights.as_slice().iter().map(|w| format!("{w:.6}")).collect();
    println!("{}", line.join(" "));
    if verify {
        let oracle = qp_oracle(&signals)?;
        let gap = weights
            .as_slice()
            .iter()
            .zip(oracle.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let line: Vec<String> = oracle.as_slice().iter().map(|w| format!("{w:.6}")).collect();
        println!("oracle {} max_abs_diff {gap:.3e}", line.join(" "));
        if gap > 1e-6 {
            bail!("closed form and oracle disagree by {gap:.3e}");
        }
    }
    Ok(())
}
