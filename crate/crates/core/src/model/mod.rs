//! Multimodal transformer encoder with masked-token, masked-patch and
//! text–image alignment heads.

mod input;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use input::{assemble_input, inference_input, MultimodalInput, IMAGE_SEGMENT, TEXT_SEGMENT};

use crate::error::{Error, Result};
use crate::image::{feature_dim, PatchGrid, THUMBNAIL};
use crate::tensor::functional::{sigmoid, softmax_rows};
use crate::tensor::{AttentionLayout, Graph, Matrix, ParamStore, Var};
use crate::text::TokenSequence;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub feed_forward: usize,
    pub vocab_size: usize,
    /// Text budget including `[CLS]` and `[SEP]`.
    pub max_text_len: usize,
    /// Patch budget `m`.
    pub patches: usize,
    pub patch_dim: usize,
    pub segments: usize,
    /// Total sequence budget.
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// CPU-sized defaults: 2 layers, hidden 64, 4 heads, 16 patches.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            feed_forward: 256,
            vocab_size,
            max_text_len: 48,
            patches: 16,
            patch_dim: feature_dim(THUMBNAIL),
            segments: 2,
            max_seq_len: 64,
        }
    }

    /// BERT-base sized encoder over 8×8 patches.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            feed_forward: 3072,
            vocab_size,
            max_text_len: 448,
            patches: 64,
            patch_dim: feature_dim(THUMBNAIL),
            segments: 2,
            max_seq_len: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::arg(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_text_len < 3 {
            return Err(Error::arg("text budget must admit [CLS], [SEP] and one token"));
        }
        if self.max_text_len + self.patches > self.max_seq_len {
            return Err(Error::arg(format!(
                "text budget {} + {} patches exceeds the sequence budget {}",
                self.max_text_len, self.patches, self.max_seq_len
            )));
        }
        if self.segments != 2 {
            return Err(Error::arg("exactly two segments (text, image) are supported"));
        }
        if [self.layers, self.feed_forward, self.vocab_size, self.patches, self.patch_dim].contains(&0) {
            return Err(Error::arg("model dimensions must be positive"));
        }
        Ok(())
    }

    /// Widest example: full text budget plus every patch.
    pub fn padded_width(&self) -> usize {
        self.max_text_len + self.patches
    }
}

/// Scalar loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub mlm: Var,
    pub mpm: Var,
    pub tia: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskLosses {
    pub mlm: f64,
    pub mpm: f64,
    pub tia: f64,
}

impl TaskLosses {
    pub fn as_array(&self) -> [f64; 3] {
        [self.mlm, self.mpm, self.tia]
    }
}

/// Encoder output for a stacked batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[batch * width, hidden]`.
    pub hidden: Var,
    pub width: usize,
}

impl Encoded {
    pub fn row(&self, example: usize, position: usize) -> usize {
        example * self.width + position
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub const INIT_STD: f64 = 0.02;

impl Model {
    /// Weights drawn from N(0, 0.02²); biases zero; norm gains one.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::with_init_std(config, INIT_STD, rng)
    }

    /// As [`Model::new`] with weights drawn from N(0, std²).
    pub fn with_init_std<R: Rng + ?Sized>(config: ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|_| Error::arg(format!("invalid init std {std}")))?;
        let mut params = ParamStore::new();
        let mut weight = |p: &mut ParamStore, name: String, rows: usize, cols: usize| {
            let m = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
            p.insert(name, m)
        };
        let c = &config;
        let d = c.hidden;
        weight(&mut params, "embeddings.word".into(), c.vocab_size, d)?;
        weight(&mut params, "embeddings.text_position".into(), c.max_text_len, d)?;
        weight(&mut params, "embeddings.patch_position".into(), c.patches, d)?;
        weight(&mut params, "embeddings.segment".into(), c.segments, d)?;
        weight(&mut params, "embeddings.patch_projection.weight".into(), c.patch_dim, d)?;
        params.insert("embeddings.patch_projection.bias", Array2::zeros((1, d)))?;
        insert_norm(&mut params, "embeddings.norm", d)?;
        for l in 0..c.layers {
            for part in ["query", "key", "value", "output"] {
                weight(&mut params, format!("layer{l}.attention.{part}.weight"), d, d)?;
                params.insert(format!("layer{l}.attention.{part}.bias"), Array2::zeros((1, d)))?;
            }
            insert_norm(&mut params, &format!("layer{l}.attention_norm"), d)?;
            weight(&mut params, format!("layer{l}.ffn.inner.weight"), d, c.feed_forward)?;
            params.insert(format!("layer{l}.ffn.inner.bias"), Array2::zeros((1, c.feed_forward)))?;
            weight(&mut params, format!("layer{l}.ffn.outer.weight"), c.feed_forward, d)?;
            params.insert(format!("layer{l}.ffn.outer.bias"), Array2::zeros((1, d)))?;
            insert_norm(&mut params, &format!("layer{l}.ffn_norm"), d)?;
        }
        weight(&mut params, "mlm.transform.weight".into(), d, d)?;
        params.insert("mlm.transform.bias", Array2::zeros((1, d)))?;
        insert_norm(&mut params, "mlm.norm", d)?;
        weight(&mut params, "mlm.decoder.weight".into(), d, c.vocab_size)?;
        params.insert("mlm.decoder.bias", Array2::zeros((1, c.vocab_size)))?;
        weight(&mut params, "mpm.head.weight".into(), d, c.patch_dim)?;
        params.insert("mpm.head.bias", Array2::zeros((1, c.patch_dim)))?;
        weight(&mut params, "tia.pooler.weight".into(), d, d)?;
        params.insert("tia.pooler.bias", Array2::zeros((1, d)))?;
        weight(&mut params, "tia.classifier.weight".into(), d, 1)?;
        params.insert("tia.classifier.bias", Array2::zeros((1, 1)))?;
        Ok(Self { config, params })
    }

    /// Rebuilds a model around an existing parameter set, checking that
    /// every expected block is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Model::new(config.clone(), &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::Format {
                what: "parameter set",
                detail: format!("expected {} blocks, found {}", template.params.len(), params.len()),
            });
        }
        for ((name, expected), (got_name, got)) in template.params.iter().zip(params.iter()) {
            if name != got_name || expected.shape() != got.shape() {
                return Err(Error::Format {
                    what: "parameter set",
                    detail: format!(
                        "expected {name} {:?}, found {got_name} {:?}",
                        expected.shape(),
                        got.shape()
                    ),
                });
            }
        }
        Ok(Self { config, params })
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from model"));
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.weight"));
        let b = self.p(g, &format!("{prefix}.bias"));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(g, &format!("{prefix}.gain"));
        let bias = self.p(g, &format!("{prefix}.bias"));
        g.layer_norm(x, gain, bias)
    }

    /// Embeds and encodes a batch, each example padded to `width` rows
    /// (at least the longest example).
    pub fn encode(&self, g: &mut Graph, batch: &[MultimodalInput], width: usize) -> Result<Encoded> {
        if batch.is_empty() {
            return Err(Error::arg("cannot encode an empty batch"));
        }
        let longest = batch.iter().map(MultimodalInput::seq_len).max().unwrap_or(0);
        if width < longest {
            return Err(Error::arg(format!("pad width {width} shorter than example length {longest}")));
        }
        for x in batch {
            if x.text_span() > self.config.max_text_len || x.patch_count() > self.config.patches {
                return Err(Error::arg("example exceeds the model's sequence budget"));
            }
        }
        let d = self.config.hidden;

        // Text rows for the whole batch, then patch rows, then one zero row
        // that every padding slot points at.
        let token_ids: Vec<usize> = batch.iter().flat_map(|x| x.token_ids.iter().copied()).collect();
        let text_positions: Vec<usize> = batch.iter().flat_map(|x| 0..x.text_span()).collect();
        let patch_positions: Vec<usize> = batch.iter().flat_map(|x| 0..x.patch_count()).collect();
        let features: Vec<_> = batch.iter().map(|x| x.patch_features.view()).collect();
        let features = ndarray::concatenate(ndarray::Axis(0), &features).map_err(|_| Error::Shape {
            op: "encode",
            left: vec![self.config.patch_dim],
            right: batch.iter().map(|x| x.patch_features.ncols()).collect(),
        })?;

        let word = self.p(g, "embeddings.word");
        let text_pos = self.p(g, "embeddings.text_position");
        let patch_pos = self.p(g, "embeddings.patch_position");
        let segment = self.p(g, "embeddings.segment");

        let w = g.embedding(word, &token_ids)?;
        let tp = g.embedding(text_pos, &text_positions)?;
        let ts = g.embedding(segment, &vec![TEXT_SEGMENT; token_ids.len()])?;
        let text = g.add(w, tp)?;
        let text = g.add(text, ts)?;

        let feats = g.leaf(features);
        let projected = self.linear(g, feats, "embeddings.patch_projection")?;
        let pp = g.embedding(patch_pos, &patch_positions)?;
        let ps = g.embedding(segment, &vec![IMAGE_SEGMENT; patch_positions.len()])?;
        let patches = g.add(projected, pp)?;
        let patches = g.add(patches, ps)?;

        let pad = g.leaf(Matrix::zeros((1, d)));
        let pool = g.concat_rows(&[text, patches, pad])?;
        let pad_row = token_ids.len() + patch_positions.len();
        let mut layout = Vec::with_capacity(batch.len() * width);
        let (mut text_off, mut patch_off) = (0, token_ids.len());
        for x in batch {
            layout.extend(text_off..text_off + x.text_span());
            layout.extend(patch_off..patch_off + x.patch_count());
            layout.extend(std::iter::repeat_n(pad_row, width - x.seq_len()));
            text_off += x.text_span();
            patch_off += x.patch_count();
        }
        let stacked = g.gather_rows(pool, &layout)?;
        let mut h = self.norm(g, stacked, "embeddings.norm")?;

        let attention = AttentionLayout {
            seq: width,
            heads: self.config.heads,
            lengths: batch.iter().map(MultimodalInput::seq_len).collect(),
        };
        for l in 0..self.config.layers {
            let q = self.linear(g, h, &format!("layer{l}.attention.query"))?;
            let k = self.linear(g, h, &format!("layer{l}.attention.key"))?;
            let v = self.linear(g, h, &format!("layer{l}.attention.value"))?;
            let a = g.attention(q, k, v, attention.clone())?;
            let o = self.linear(g, a, &format!("layer{l}.attention.output"))?;
            let r = g.add(h, o)?;
            h = self.norm(g, r, &format!("layer{l}.attention_norm"))?;
            let f = self.linear(g, h, &format!("layer{l}.ffn.inner"))?;
            let f = g.gelu(f);
            let f = self.linear(g, f, &format!("layer{l}.ffn.outer"))?;
            let r = g.add(h, f)?;
            h = self.norm(g, r, &format!("layer{l}.ffn_norm"))?;
        }
        Ok(Encoded { hidden: h, width })
    }

    /// Mean cross-entropy of vocabulary predictions at masked text positions
    /// of positive examples.
    pub fn mlm_loss(&self, g: &mut Graph, enc: &Encoded, batch: &[MultimodalInput]) -> Result<Var> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, x) in batch.iter().enumerate().filter(|(_, x)| x.is_positive()) {
            rows.extend(x.masked_text_positions.iter().map(|&p| enc.row(b, p)));
            targets.extend_from_slice(&x.masked_text_originals);
        }
        if rows.is_empty() {
            return Err(Error::arg("masked-token loss needs a positive example with a masked token"));
        }
        let h = g.gather_rows(enc.hidden, &rows)?;
        let t = self.linear(g, h, "mlm.transform")?;
        let t = g.gelu(t);
        let t = self.norm(g, t, "mlm.norm")?;
        let logits = self.linear(g, t, "mlm.decoder")?;
        g.cross_entropy(logits, &targets)
    }

    /// Mean `KL(softmax(original) ‖ softmax(head))` at masked patches of
    /// positive examples.
    pub fn mpm_loss(&self, g: &mut Graph, enc: &Encoded, batch: &[MultimodalInput]) -> Result<Var> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, x) in batch.iter().enumerate().filter(|(_, x)| x.is_positive()) {
            rows.extend(x.masked_patches.iter().map(|&p| enc.row(b, x.text_span() + p)));
            targets.push(x.patch_targets.view());
        }
        if rows.is_empty() {
            return Err(Error::arg("masked-patch loss needs a positive example with a masked patch"));
        }
        let targets = ndarray::concatenate(ndarray::Axis(0), &targets).expect("equal feature widths");
        let h = g.gather_rows(enc.hidden, &rows)?;
        let out = self.linear(g, h, "mpm.head")?;
        let predicted = g.softmax_rows(out);
        g.kl_divergence(softmax_rows(&targets), predicted)
    }

    /// Alignment logits (`batch × 1`) from the `[CLS]` state.
    pub fn tia_logits(&self, g: &mut Graph, enc: &Encoded, batch_len: usize) -> Result<Var> {
        let rows: Vec<usize> = (0..batch_len).map(|b| enc.row(b, 0)).collect();
        let cls = g.gather_rows(enc.hidden, &rows)?;
        let pooled = self.linear(g, cls, "tia.pooler")?;
        let pooled = g.tanh(pooled);
        self.linear(g, pooled, "tia.classifier")
    }

    /// Mean binary cross-entropy of the match probability against the labels.
    pub fn tia_loss(&self, g: &mut Graph, enc: &Encoded, batch: &[MultimodalInput]) -> Result<Var> {
        let logits = self.tia_logits(g, enc, batch.len())?;
        let labels: Vec<f64> = batch.iter().map(|x| x.label).collect();
        g.bce_with_logits(logits, &labels)
    }

    /// All three task losses for a training batch.
    pub fn losses(&self, g: &mut Graph, batch: &[MultimodalInput]) -> Result<LossNodes> {
        let width = batch.iter().map(MultimodalInput::seq_len).max().unwrap_or(0);
        let enc = self.encode(g, batch, width)?;
        Ok(LossNodes {
            mlm: self.mlm_loss(g, &enc, batch)?,
            mpm: self.mpm_loss(g, &enc, batch)?,
            tia: self.tia_loss(g, &enc, batch)?,
        })
    }

    /// Match probabilities for unmasked inputs, each padded to `width`.
    pub fn match_scores(&self, batch: &[MultimodalInput], width: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, batch, width)?;
        let logits = self.tia_logits(&mut g, &enc, batch.len())?;
        Ok(g.value(logits).column(0).iter().map(|&z| sigmoid(z)).collect())
    }

    /// Match probability of one text–image pair on the padded path.
    pub fn match_score(&self, text: &TokenSequence, image: &PatchGrid) -> Result<f64> {
        let input = inference_input(text, image, &self.config)?;
        Ok(self.match_scores(&[input], self.config.padded_width())?[0])
    }
}

fn insert_norm(params: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    params.insert(format!("{prefix}.gain"), Array2::ones((1, width)))?;
    params.insert(format!("{prefix}.bias"), Array2::zeros((1, width)))?;
    Ok(())
}
