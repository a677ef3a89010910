//! Matching accuracy and cross-modal retrieval ranking.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::dataset::{PairDataset, PairedExample};
use crate::error::{Error, Result};
use crate::model::{Model, MultimodalInput};

/// Pairs scored per forward pass.
const SCORE_CHUNK: usize = 128;

/// Balanced labeled pairs: for every product, its own text–image pair and
/// its text against the image of a uniformly drawn other product.
pub fn labeled_pairs<R: Rng + ?Sized>(dataset: &PairDataset, rng: &mut R) -> Result<Vec<PairedExample>> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::arg(format!("need at least 2 products for labeled pairs, have {n}")));
    }
    let mut pairs = Vec::with_capacity(2 * n);
    for i in 0..n {
        pairs.push(PairedExample { text: i, image: i, label: true });
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        pairs.push(PairedExample { text: i, image: j, label: false });
    }
    Ok(pairs)
}

/// Match probabilities, batched and padded only to each chunk's longest
/// example.
pub fn score_pairs(model: &Model, dataset: &PairDataset, pairs: &[PairedExample]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SCORE_CHUNK) {
        let inputs = chunk
            .iter()
            .map(|p| dataset.inference_input(p, &model.config))
            .collect::<Result<Vec<_>>>()?;
        scores.extend(score_inputs(model, &inputs)?);
    }
    Ok(scores)
}

fn score_inputs(model: &Model, inputs: &[MultimodalInput]) -> Result<Vec<f64>> {
    let width = inputs.iter().map(MultimodalInput::seq_len).max().unwrap_or(0);
    model.match_scores(inputs, width)
}

/// Percentage of pairs where `score ≥ 0.5` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::arg("accuracy of an empty pair set"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "accuracy",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &y)| (s >= 0.5) == y).count();
    Ok(100.0 * correct as f64 / scores.len() as f64)
}

pub fn matching_accuracy(model: &Model, dataset: &PairDataset, pairs: &[PairedExample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::arg("accuracy of an empty pair set"));
    }
    let scores = score_pairs(model, dataset, pairs)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label).collect();
    accuracy(&scores, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// An image query ranked against candidate texts.
    ImageToText,
    /// A text query ranked against candidate images.
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "image-to-text",
            Direction::TextToImage => "text-to-image",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image-to-text" => Ok(Direction::ImageToText),
            "text-to-image" => Ok(Direction::TextToImage),
            other => Err(Error::arg(format!("unknown direction {other:?}"))),
        }
    }
}

/// One query with its candidate list; `candidates[truth]` is the query's own
/// product, every other candidate a distinct different product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankSet {
    pub direction: Direction,
    pub query: usize,
    pub candidates: Vec<usize>,
    pub truth: usize,
}

impl RankSet {
    /// The text/image pair scored for candidate `c`.
    pub fn pair(&self, c: usize) -> PairedExample {
        let cand = self.candidates[c];
        let (text, image) = match self.direction {
            Direction::ImageToText => (cand, self.query),
            Direction::TextToImage => (self.query, cand),
        };
        PairedExample {
            text,
            image,
            label: cand == self.query,
        }
    }
}

/// `query_count` distinct queries, each with `distractor_count` distinct
/// distractors. The ground truth lands at a uniformly random slot so that
/// stable tie-breaking does not favor it.
pub fn build_rank_sets<R: Rng + ?Sized>(
    dataset: &PairDataset,
    direction: Direction,
    query_count: usize,
    distractor_count: usize,
    rng: &mut R,
) -> Result<Vec<RankSet>> {
    let n = dataset.len();
    if n <= distractor_count {
        return Err(Error::arg(format!(
            "{distractor_count} distractors need more than {distractor_count} products, have {n}"
        )));
    }
    if query_count > n {
        return Err(Error::arg(format!("{query_count} unique queries from only {n} products")));
    }
    let queries = sample(rng, n, query_count).into_vec();
    Ok(queries
        .into_iter()
        .map(|q| {
            let mut candidates: Vec<usize> = sample(rng, n - 1, distractor_count)
                .into_iter()
                .map(|j| if j >= q { j + 1 } else { j })
                .collect();
            let truth = rng.random_range(0..=distractor_count);
            candidates.insert(truth, q);
            RankSet {
                direction,
                query: q,
                candidates,
                truth,
            }
        })
        .collect())
}

/// 1-based rank of `scores[truth]` under a stable descending sort.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    let above = scores.iter().filter(|&&s| s > t).count();
    let tied_before = scores[..truth].iter().filter(|&&s| s == t).count();
    1 + above + tied_before
}

/// Scores every candidate of a rank set.
pub trait Scorer {
    fn score(&self, set: &RankSet) -> Result<Vec<f64>>;
}

impl<F> Scorer for F
where
    F: Fn(&RankSet) -> Vec<f64>,
{
    fn score(&self, set: &RankSet) -> Result<Vec<f64>> {
        Ok(self(set))
    }
}

/// Scores candidates with a model's match probability.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub dataset: &'a PairDataset,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, set: &RankSet) -> Result<Vec<f64>> {
        let pairs: Vec<PairedExample> = (0..set.candidates.len()).map(|c| set.pair(c)).collect();
        score_pairs(self.model, self.dataset, &pairs)
    }
}

/// Ground-truth rank of every set.
pub fn ranks(sets: &[RankSet], scorer: &dyn Scorer) -> Result<Vec<usize>> {
    sets.iter()
        .map(|s| {
            let scores = scorer.score(s)?;
            if scores.len() != s.candidates.len() {
                return Err(Error::Shape {
                    op: "rank",
                    left: vec![s.candidates.len()],
                    right: vec![scores.len()],
                });
            }
            Ok(rank_of(&scores, s.truth))
        })
        .collect()
}

/// Percentage of ranks at most `k`.
pub fn percent_within(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Percentage of sets whose ground truth ranks in the top `k`.
pub fn rank_at_k(sets: &[RankSet], scorer: &dyn Scorer, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    Ok(percent_within(&ranks(sets, scorer)?, k))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// Matching accuracy on the labeled pair set, percent.
    pub accuracy: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub queries: usize,
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "direction={} accuracy={:.2} rank1={:.2} rank5={:.2} rank10={:.2} queries={}",
            self.direction, self.accuracy, self.rank1, self.rank5, self.rank10, self.queries
        )
    }
}

pub const REPORT_HEADER: &str = "direction,accuracy,rank1,rank5,rank10,queries";

pub fn report_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.direction, r.accuracy, r.rank1, r.rank5, r.rank10, r.queries
        );
    }
    out
}

pub fn report_text(reports: &[RetrievalReport]) -> String {
    reports.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalSettings {
    pub queries: usize,
    pub distractors: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            queries: 200,
            distractors: 100,
        }
    }
}

/// Accuracy on balanced labeled pairs plus Rank@{1,5,10} in both
/// directions.
pub fn evaluate<R: Rng + ?Sized>(
    model: &Model,
    dataset: &PairDataset,
    settings: RetrievalSettings,
    rng: &mut R,
) -> Result<Vec<RetrievalReport>> {
    let pairs = labeled_pairs(dataset, rng)?;
    let accuracy = matching_accuracy(model, dataset, &pairs)?;
    let scorer = ModelScorer { model, dataset };
    Direction::BOTH
        .iter()
        .map(|&direction| {
            let sets = build_rank_sets(dataset, direction, settings.queries, settings.distractors, rng)?;
            let r = ranks(&sets, &scorer)?;
            Ok(RetrievalReport {
                direction,
                accuracy,
                rank1: percent_within(&r, 1),
                rank5: percent_within(&r, 5),
                rank10: percent_within(&r, 10),
                queries: sets.len(),
            })
        })
        .collect()
}
