//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use patchbert::adaptive::{qp_oracle, solve_weights, stationarity_residual, TaskSignals};
use patchbert::checkpoint;
use patchbert::data::{read_corpus, Split};
use patchbert::dataset::PairDataset;
use patchbert::image::{apply_patch_mask, PatchGrid};
use patchbert::model::{assemble_input, Model, ModelConfig};
use patchbert::tensor::functional::{cross_entropy, kl_divergence};
use patchbert::tensor::{grad_check, Graph};
use patchbert::text::{apply_wwm_mask, TokenSequence, Vocabulary, MSK_ID};
use patchbert::vsl::{padded_assemble, vsl_assemble, vsl_score};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_patchbert");

/// Training settings for the learnability run. The model is the desk
/// default; the batch is raised from the desk schedule default so that
/// alignment emerges reliably within the 2,000-step budget.
const LEARN_CONFIG: &str = "\
batch_size = 64
learning_rate = 0.001
total_steps = 2000
warmup_steps = 100
eval_interval = 250
patience = 5
";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .map_err(|e| format!("spawning {BIN}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`patchbert {}` exited {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

// ---------------------------------------------------------------- 1 and 2

fn random_signals(rng: &mut ChaCha8Rng, tasks: usize) -> TaskSignals {
    TaskSignals::new((0..tasks).map(|_| rng.random_range(0.0..=0.999)).collect()).unwrap()
}

fn solver_vs_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut gap, mut sum_err, mut min_w) = (0.0f64, 0.0f64, f64::INFINITY);
    for tasks in 2..=6 {
        for _ in 0..1_000 {
            let g = random_signals(&mut rng, tasks);
            let w = solve_weights(&g);
            let o = match qp_oracle(&g) {
                Ok(o) => o,
                Err(e) => return outcome(false, format!("oracle failed on {:?}: {e}", g.as_slice())),
            };
            for (a, b) in w.as_slice().iter().zip(o.as_slice()) {
                gap = gap.max((a - b).abs());
            }
            sum_err = sum_err.max((w.as_slice().iter().sum::<f64>() - 1.0).abs());
            min_w = min_w.min(w.as_slice().iter().copied().fold(f64::INFINITY, f64::min));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        gap <= 1e-6 && sum_err <= 1e-12 && min_w >= 0.0 && elapsed < Duration::from_secs(10),
        format!(
            "5,000 vectors, max |closed form - oracle| = {gap:.2e}, max |sum - 1| = {sum_err:.2e}, min weight = {min_w:.4}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn stationarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let tasks = rng.random_range(2..=6);
        let g = random_signals(&mut rng, tasks);
        worst = worst.max(stationarity_residual(&g, &solve_weights(&g)));
    }
    outcome(worst <= 1e-10, format!("100 vectors, max multiplier spread = {worst:.2e}"))
}

// ---------------------------------------------------------------------- 3

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 2,
        feed_forward: 64,
        vocab_size: 50,
        max_text_len: 12,
        patches: 4,
        patch_dim: 6,
        segments: 2,
        max_seq_len: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut model = Model::new(config.clone(), &mut rng).unwrap();
    // Weights well above init scale so every nonlinearity is exercised.
    for v in model.params.values_mut() {
        if v.nrows() > 1 {
            v.mapv_inplace(|x| x * 10.0);
        }
    }
    let batch: Vec<_> = [true, false, true]
        .iter()
        .map(|&label| {
            let n = rng.random_range(2..=config.max_text_len - 2);
            let seq = TokenSequence {
                ids: (0..n).map(|_| rng.random_range(5..config.vocab_size)).collect(),
                groups: (0..n).map(|i| i..i + 1).collect(),
            };
            let grid = PatchGrid {
                grid: 2,
                features: Array2::from_shape_fn((4, 6), |_| rng.random()),
            };
            let text = apply_wwm_mask(&seq, 0.3, &mut rng);
            let patches = apply_patch_mask(&grid, 0.3, &mut rng);
            assemble_input(&text, &patches, label, &config).unwrap()
        })
        .collect();
    let weights = [0.45, 0.25, 0.30];
    let total = |m: &Model| {
        let mut g = Graph::new();
        let l = m.losses(&mut g, &batch)?;
        let t = g.weighted_sum(&[(l.mlm, weights[0]), (l.mpm, weights[1]), (l.tia, weights[2])])?;
        Ok::<_, patchbert::Error>((g, t))
    };
    let (g, t) = total(&model).unwrap();
    let analytic = g.param_grads(&g.backward(t), &model.params);
    let report = grad_check(
        |p| {
            let m = Model {
                config: config.clone(),
                params: p.clone(),
            };
            let (g, t) = total(&m)?;
            Ok(g.scalar(t))
        },
        &model.params,
        &analytic,
        1e-5,
    )
    .unwrap();
    let worst = report.worst().expect("blocks");
    let elapsed = start.elapsed();
    outcome(
        report.max_rel_error < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "{} blocks, max relative error {:.2e} ({}), {:.1}s",
            report.blocks.len(),
            report.max_rel_error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------- 4

fn masking_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut groups, mut masked_groups, mut violations) = (0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        // 40 words of 1–3 pieces: long enough that the forced-mask rule
        // contributes < 1e-4 to the rate.
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        for _ in 0..40 {
            let start = ids.len();
            for _ in 0..rng.random_range(1..=3) {
                ids.push(rng.random_range(5..1000));
            }
            spans.push(start..ids.len());
        }
        let seq = TokenSequence { ids, groups: spans };
        let m = apply_wwm_mask(&seq, 0.15, &mut rng);
        for g in &seq.groups {
            let hits = g.clone().filter(|&i| m.ids[i] == MSK_ID).count();
            groups += 1;
            if hits == g.len() {
                masked_groups += 1;
            } else if hits > 0 {
                violations += 1;
            }
        }
    }
    let (mut patches, mut masked_patches, mut nonzero) = (0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let grid = PatchGrid {
            grid: 8,
            features: Array2::from_shape_fn((64, 54), |_| rng.random_range(0.01..1.0)),
        };
        let m = apply_patch_mask(&grid, 0.10, &mut rng);
        patches += 64;
        masked_patches += m.masked_positions.len();
        nonzero += m
            .masked_positions
            .iter()
            .filter(|&&p| m.features.row(p).iter().any(|&x| x != 0.0))
            .count();
    }
    let text_rate = masked_groups as f64 / groups as f64;
    let patch_rate = masked_patches as f64 / patches as f64;
    outcome(
        (0.14..=0.16).contains(&text_rate) && (0.09..=0.11).contains(&patch_rate) && violations == 0 && nonzero == 0,
        format!(
            "word-group rate {text_rate:.4} (40-word sequences), patch rate {patch_rate:.4} (8x8 grids), atomicity violations {violations}, nonzero masked patches {nonzero}"
        ),
    )
}

// ---------------------------------------------------------------------- 5

fn loss_definitions() -> Outcome {
    let mut worst_ce = 0.0f64;
    for v in [2usize, 7, 50, 1000, 30_522] {
        for logit in [0.0, -3.5, 12.0] {
            let ce = cross_entropy(&vec![logit; v], v / 2).unwrap();
            worst_ce = worst_ce.max((ce - (v as f64).ln()).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut self_kl, mut min_kl) = (0.0f64, f64::INFINITY);
    for _ in 0..1_000 {
        let n = rng.random_range(2..=64);
        let simplex = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect::<Vec<_>>()
        };
        let (p, q) = (simplex(&mut rng), simplex(&mut rng));
        self_kl = self_kl.max(kl_divergence(&p, &p).unwrap().abs());
        min_kl = min_kl.min(kl_divergence(&p, &q).unwrap());
    }
    outcome(
        worst_ce <= 1e-9 && self_kl == 0.0 && min_kl >= 0.0,
        format!("max |CE(uniform) - ln V| = {worst_ce:.2e}, max |KL(p,p)| = {self_kl:.1e}, min KL(p,q) = {min_kl:.3e} over 1,000 pairs"),
    )
}

// ------------------------------------------------------------- 6, 7 and 8

struct Report {
    direction: String,
    accuracy: f64,
    rank1: f64,
    rank5: f64,
    rank10: f64,
}

fn read_reports(path: &Path) -> Result<Vec<Report>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("direction,accuracy,rank1,rank5,rank10,queries") {
        return Err(format!("{}: unexpected header", path.display()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or(format!("bad row {l:?}"));
            Ok(Report {
                direction: f[0].to_string(),
                accuracy: num(1)?,
                rank1: num(2)?,
                rank5: num(3)?,
                rank10: num(4)?,
            })
        })
        .collect()
}

fn summarize(reports: &[Report]) -> String {
    reports
        .iter()
        .map(|r| {
            format!(
                "{}: acc {:.2} R@1 {:.2} R@5 {:.2} R@10 {:.2}",
                r.direction, r.accuracy, r.rank1, r.rank5, r.rank10
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

struct Pipeline {
    corpus: PathBuf,
    vocab: PathBuf,
    root: PathBuf,
}

impl Pipeline {
    fn prepare(root: &Path) -> Result<Self, String> {
        let corpus = root.join("corpus");
        let vocab_dir = root.join("vocab");
        cli(&["gen-data", "--seed", "7", "--out", s(&corpus)])?;
        cli(&["build-vocab", "--corpus", s(&corpus), "--out", s(&vocab_dir)])?;
        std::fs::write(root.join("learn.cfg"), LEARN_CONFIG).map_err(|e| e.to_string())?;
        Ok(Self {
            corpus,
            vocab: vocab_dir.join("vocab.txt"),
            root: root.to_path_buf(),
        })
    }

    /// Trains with `weighting` and evaluates; returns (train time, reports).
    fn train_and_eval(&self, weighting: &str) -> Result<(Duration, Vec<Report>), String> {
        let out = self.root.join(weighting);
        let cfg = self.root.join("learn.cfg");
        let start = Instant::now();
        cli(&[
            "pretrain",
            "--config",
            s(&cfg),
            "--seed",
            "7",
            "--corpus",
            s(&self.corpus),
            "--vocab",
            s(&self.vocab),
            "--weighting",
            weighting,
            "--out",
            s(&out),
        ])?;
        let elapsed = start.elapsed();
        cli(&[
            "eval",
            "--seed",
            "7",
            "--corpus",
            s(&self.corpus),
            "--vocab",
            s(&self.vocab),
            "--checkpoint",
            s(&out.join("model.ckpt")),
            "--out",
            s(&out.join("eval")),
        ])?;
        Ok((elapsed, read_reports(&out.join("eval").join("report.csv"))?))
    }
}

fn learnability(p: &Pipeline) -> (Outcome, Option<Vec<Report>>) {
    let (elapsed, reports) = match p.train_and_eval("adaptive") {
        Ok(r) => r,
        Err(e) => return (outcome(false, e), None),
    };
    let log = std::fs::read_to_string(p.root.join("adaptive/train_log.csv")).unwrap_or_default();
    let steps = log.lines().count().saturating_sub(1);
    let ok = reports.len() == 2
        && reports.iter().all(|r| {
            r.accuracy >= 90.0 && r.rank1 >= 10.0 && r.rank10 >= 50.0 && r.rank1 <= r.rank5 && r.rank5 <= r.rank10 && r.rank10 <= 100.0
        })
        && steps <= 2_000
        && elapsed <= Duration::from_secs(15 * 60);
    let detail = format!(
        "{steps} steps in {:.0}s; {}",
        elapsed.as_secs_f64(),
        summarize(&reports)
    );
    (outcome(ok, detail), Some(reports))
}

fn weights_of(path: &Path) -> Result<Vec<[f64; 3]>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("step,l_mlm,l_mpm,l_tia,w_mlm,w_mpm,w_tia,lr") {
        return Err(format!("{}: unexpected header", path.display()));
    }
    lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().map_err(|_| format!("bad row {l:?}"))).collect::<Result<_, _>>()?;
            Ok([f[4], f[5], f[6]])
        })
        .collect()
}

fn adaptive_vs_fixed(p: &Pipeline, adaptive: Option<&[Report]>) -> Outcome {
    let fixed = match p.train_and_eval("fixed") {
        Ok((_, r)) => r,
        Err(e) => return outcome(false, e),
    };
    let (a, f) = match (weights_of(&p.root.join("adaptive/train_log.csv")), weights_of(&p.root.join("fixed/train_log.csv"))) {
        (Ok(a), Ok(f)) => (a, f),
        (Err(e), _) | (_, Err(e)) => return outcome(false, e),
    };
    let worst_sum = a
        .iter()
        .map(|w| (w.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let fixed_exact = f.iter().all(|w| w.iter().all(|&x| x == 1.0 / 3.0));
    let mean = |rows: &[[f64; 3]], i: usize| rows.iter().map(|w| w[i]).sum::<f64>() / rows.len().max(1) as f64;
    let gap = adaptive
        .map(|a| {
            a.iter()
                .zip(&fixed)
                .map(|(x, y)| format!("{} acc {:+.2} R@1 {:+.2}", x.direction, x.accuracy - y.accuracy, x.rank1 - y.rank1))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .unwrap_or_else(|| "adaptive run unavailable".into());
    outcome(
        !a.is_empty() && !f.is_empty() && worst_sum <= 1e-9 && fixed_exact,
        format!(
            "{} adaptive rows (max |sum - 1| {worst_sum:.1e}, mean w = {:.4}/{:.4}/{:.4}), {} fixed rows exactly 1/3: {fixed_exact}; adaptive minus fixed: {gap}",
            a.len(),
            mean(&a, 0),
            mean(&a, 1),
            mean(&a, 2),
            f.len()
        ),
    )
}

fn vsl_equivalence(p: &Pipeline) -> Outcome {
    let model = match checkpoint::load(&p.root.join("adaptive/model.ckpt")) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("trained checkpoint unavailable: {e}")),
    };
    let vocab = Vocabulary::load(&p.vocab).unwrap();
    let records = read_corpus(&p.corpus).unwrap();
    let data = PairDataset::from_records(&records, Split::Test, &vocab, &model.config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut worst = 0.0f64;
    for _ in 0..1_000 / 25 {
        let texts: Vec<TokenSequence> = (0..25)
            .map(|_| {
                let n = rng.random_range(3..=40);
                TokenSequence {
                    ids: (0..n).map(|_| rng.random_range(5..vocab.len())).collect(),
                    groups: (0..n).map(|i| i..i + 1).collect(),
                }
            })
            .collect();
        let grids: Vec<PatchGrid> = (0..25)
            .map(|_| data.products[rng.random_range(0..data.len())].patches.clone())
            .collect();
        let v = vsl_score(&model, &vsl_assemble(&texts, &grids, &model.config).unwrap()).unwrap();
        let padded = vsl_score(&model, &padded_assemble(&texts, &grids, &model.config).unwrap()).unwrap();
        for (a, b) in v.iter().zip(&padded) {
            worst = worst.max((a - b).abs());
        }
    }
    let bench = cli(&[
        "bench-vsl",
        "--corpus",
        s(&p.corpus),
        "--vocab",
        s(&p.vocab),
        "--checkpoint",
        s(&p.root.join("adaptive/model.ckpt")),
        "--out",
        s(&p.root.join("bench")),
    ]);
    let advisory = match bench {
        Ok(out) => {
            let speedup = out
                .lines()
                .find_map(|l| l.strip_prefix("speedup="))
                .and_then(|v| v.parse::<f64>().ok())
                .unwrap_or(f64::NAN);
            format!(
                "advisory latency speedup {speedup:.2}x ({} the 1.3x target)",
                if speedup >= 1.3 { "meets" } else { "misses" }
            )
        }
        Err(e) => format!("advisory benchmark failed: {e}"),
    };
    outcome(
        worst <= 1e-5,
        format!("1,000 pairs, text lengths 3-40, max |vsl - padded| = {worst:.2e}; {advisory}"),
    )
}

// ---------------------------------------------------------------------- 9

fn run_small_pipeline(root: &Path, manifests: Option<&Path>) -> Result<(), String> {
    let corpus = root.join("corpus");
    let vocab_dir = root.join("vocab");
    let train = root.join("train");
    let eval = root.join("eval");
    let vocab = vocab_dir.join("vocab.txt");
    let ckpt = train.join("model.ckpt");
    // The first run uses flags; the second replays the first run's
    // manifests, with paths redirected into its own directory.
    let cfg = |name: &str, flags: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        match manifests {
            Some(m) => v.extend(["--config".into(), s(&m.join(name)).to_string()]),
            None => v.extend(flags.iter().map(|f| f.to_string())),
        }
        v
    };
    let run = |cmd: &str, manifest: &str, flags: &[&str], paths: Vec<String>| -> Result<(), String> {
        let mut args = vec![cmd.to_string()];
        args.extend(cfg(manifest, flags));
        args.extend(paths);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        cli(&refs).map(|_| ())
    };
    run(
        "gen-data",
        "corpus/gen-data.manifest",
        &["--seed", "9", "--count", "1200"],
        vec!["--out".into(), s(&corpus).into()],
    )?;
    run(
        "build-vocab",
        "vocab/build-vocab.manifest",
        &["--seed", "9"],
        vec!["--corpus".into(), s(&corpus).into(), "--out".into(), s(&vocab_dir).into()],
    )?;
    run(
        "pretrain",
        "train/pretrain.manifest",
        &["--seed", "9", "--steps", "60"],
        vec![
            "--corpus".into(),
            s(&corpus).into(),
            "--vocab".into(),
            s(&vocab).into(),
            "--out".into(),
            s(&train).into(),
        ],
    )?;
    run(
        "eval",
        "eval/eval.manifest",
        &["--seed", "9", "--queries", "40"],
        vec![
            "--corpus".into(),
            s(&corpus).into(),
            "--vocab".into(),
            s(&vocab).into(),
            "--checkpoint".into(),
            s(&ckpt).into(),
            "--out".into(),
            s(&eval).into(),
        ],
    )
}

fn determinism(root: &Path) -> Outcome {
    let (a, b) = (root.join("first"), root.join("second"));
    if let Err(e) = run_small_pipeline(&a, None).and_then(|_| run_small_pipeline(&b, Some(&a))) {
        return outcome(false, e);
    }
    let artifacts = [
        "corpus/products.txt",
        "corpus/images/0.ppm",
        "corpus/images/1199.ppm",
        "corpus/test.txt",
        "vocab/vocab.txt",
        "train/model.ckpt",
        "train/train_log.csv",
        "train/validation.csv",
        "eval/report.txt",
        "eval/report.csv",
    ];
    let mut differing = Vec::new();
    for name in artifacts {
        match (std::fs::read(a.join(name)), std::fs::read(b.join(name))) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => differing.push(name),
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across manifest replay", artifacts.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a filter that
    // does not mention this target skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "adaptive solver vs oracle", solver_vs_oracle());
    record(2, "stationarity", stationarity());
    record(3, "gradient correctness", gradient_check());
    record(4, "masking statistics", masking_statistics());
    record(5, "loss definitions", loss_definitions());
    match Pipeline::prepare(dir.path()) {
        Ok(p) => {
            let (o, reports) = learnability(&p);
            record(6, "learnability", o);
            record(7, "adaptive vs fixed harness", adaptive_vs_fixed(&p, reports.as_deref()));
            record(8, "variable-length equivalence", vsl_equivalence(&p));
        }
        Err(e) => {
            for (n, name) in [(6, "learnability"), (7, "adaptive vs fixed harness"), (8, "variable-length equivalence")] {
                record(n, name, outcome(false, format!("corpus preparation failed: {e}")));
            }
        }
    }
    record(9, "determinism", determinism(&dir.path().join("determinism")));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
