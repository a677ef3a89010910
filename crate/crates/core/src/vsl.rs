//! Variable-sequence-length scoring: pad each batch only to its own longest
//! example instead of the model's full budget.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::PatchGrid;
use crate::model::{inference_input, Model, ModelConfig, MultimodalInput};
use crate::text::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Every example padded to the model's full text + patch budget.
    Padded,
    /// Padding only to the batch maximum.
    Vsl,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::Padded, Mode::Vsl];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Padded => "padded",
            Mode::Vsl => "vsl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "padded" => Ok(Mode::Padded),
            "vsl" => Ok(Mode::Vsl),
            other => Err(Error::arg(format!("mode must be padded or vsl, got {other:?}"))),
        }
    }
}

/// Unmasked `[CLS] text [SEP] patches` sequences sharing one pad width.
#[derive(Clone, Debug, PartialEq)]
pub struct VslBatch {
    pub inputs: Vec<MultimodalInput>,
    pub width: usize,
}

impl VslBatch {
    /// True sequence length of each example.
    pub fn lengths(&self) -> Vec<usize> {
        self.inputs.iter().map(MultimodalInput::seq_len).collect()
    }

    pub fn attention_masks(&self) -> Vec<Vec<u8>> {
        self.inputs.iter().map(|x| x.attention_mask(self.width)).collect()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Attention score entries per head across the batch.
    pub fn score_elements(&self) -> usize {
        self.inputs.len() * self.width * self.width
    }
}

fn inputs(texts: &[TokenSequence], grids: &[PatchGrid], config: &ModelConfig) -> Result<Vec<MultimodalInput>> {
    if texts.len() != grids.len() {
        return Err(Error::arg(format!("{} texts but {} patch grids", texts.len(), grids.len())));
    }
    if texts.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    texts
        .iter()
        .zip(grids)
        .map(|(t, g)| inference_input(t, g, config))
        .collect()
}

/// Pads to the longest example in the batch.
pub fn vsl_assemble(texts: &[TokenSequence], grids: &[PatchGrid], config: &ModelConfig) -> Result<VslBatch> {
    let inputs = inputs(texts, grids, config)?;
    let width = inputs.iter().map(MultimodalInput::seq_len).max().unwrap_or(0);
    Ok(VslBatch { inputs, width })
}

/// Pads to the model's full budget.
pub fn padded_assemble(texts: &[TokenSequence], grids: &[PatchGrid], config: &ModelConfig) -> Result<VslBatch> {
    Ok(VslBatch {
        inputs: inputs(texts, grids, config)?,
        width: config.padded_width(),
    })
}

/// Re-pads an existing set of inputs for `mode`.
pub fn assemble_mode(inputs: Vec<MultimodalInput>, mode: Mode, config: &ModelConfig) -> VslBatch {
    let width = match mode {
        Mode::Padded => config.padded_width(),
        Mode::Vsl => inputs.iter().map(MultimodalInput::seq_len).max().unwrap_or(0),
    };
    VslBatch { inputs, width }
}

pub fn vsl_score(model: &Model, batch: &VslBatch) -> Result<Vec<f64>> {
    model.match_scores(&batch.inputs, batch.width)
}

/// Splits the batch into `threads` contiguous parts scored concurrently on
/// the current rayon pool. Each part keeps the batch's pad width, so scores
/// are identical to [`vsl_score`].
pub fn vsl_score_parallel(model: &Model, batch: &VslBatch, threads: usize) -> Result<Vec<f64>> {
    if threads <= 1 || batch.len() < 2 {
        return vsl_score(model, batch);
    }
    let chunk = batch.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = batch
        .inputs
        .par_chunks(chunk)
        .map(|c| model.match_scores(c, batch.width))
        .collect();
    let mut out = Vec::with_capacity(batch.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub mode: Mode,
    pub batch_size: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSettings {
    pub repetitions: usize,
    /// Untimed passes over the workload before measuring.
    pub warmup: usize,
    /// 1 scores on the calling thread.
    pub threads: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            repetitions: 10,
            warmup: 3,
            threads: 1,
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Per-batch wall-clock latency of scoring `workload` in `mode`.
pub fn bench_latency(model: &Model, workload: &[Vec<MultimodalInput>], mode: Mode, settings: BenchSettings) -> Result<LatencyStats> {
    if settings.repetitions == 0 {
        return Err(Error::arg("repetitions must be at least 1"));
    }
    if workload.is_empty() || workload.iter().any(Vec::is_empty) {
        return Err(Error::arg("benchmark workload needs at least one nonempty batch"));
    }
    let batches: Vec<VslBatch> = workload
        .iter()
        .map(|b| assemble_mode(b.clone(), mode, &model.config))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads.max(1))
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    let run = |b: &VslBatch| pool.install(|| vsl_score_parallel(model, b, settings.threads));
    for _ in 0..settings.warmup {
        for b in &batches {
            run(b)?;
        }
    }
    let mut times = Vec::with_capacity(settings.repetitions * batches.len());
    for _ in 0..settings.repetitions {
        for b in &batches {
            let start = Instant::now();
            let scores = run(b)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(scores);
        }
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mode,
        batch_size: workload[0].len(),
        mean_ms,
        p50_ms: percentile(&times, 50.0),
        p95_ms: percentile(&times, 95.0),
        samples: times.len(),
    })
}

pub const BENCH_HEADER: &str = "mode,batch_size,mean_ms,p50_ms,p95_ms";

pub fn bench_csv(stats: &[LatencyStats]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4}",
            s.mode, s.batch_size, s.mean_ms, s.p50_ms, s.p95_ms
        );
    }
    out
}
