use ndarray::Array2;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::image::{MaskedPatchGrid, PatchGrid};
use crate::text::{MaskedSequence, TokenSequence, CLS_ID, SEP_ID};

pub const TEXT_SEGMENT: usize = 0;
pub const IMAGE_SEGMENT: usize = 1;

/// One `[CLS] text [SEP] patches` example.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalInput {
    /// `[CLS]`, text ids (with `[MSK]` substitutions), `[SEP]`.
    pub token_ids: Vec<usize>,
    /// `m × d_patch`, masked rows zeroed.
    pub patch_features: Array2<f64>,
    /// 1.0 when text and image come from the same product.
    pub label: f64,
    /// Sequence positions (counting `[CLS]` as 0) of masked text tokens.
    pub masked_text_positions: Vec<usize>,
    pub masked_text_originals: Vec<usize>,
    /// Patch indices of masked patches.
    pub masked_patches: Vec<usize>,
    /// Pre-mask features of `masked_patches`.
    pub patch_targets: Array2<f64>,
}

impl MultimodalInput {
    /// Length of the text span including `[CLS]` and `[SEP]`.
    pub fn text_span(&self) -> usize {
        self.token_ids.len()
    }

    pub fn patch_count(&self) -> usize {
        self.patch_features.nrows()
    }

    /// Number of real (non-padding) positions.
    pub fn seq_len(&self) -> usize {
        self.text_span() + self.patch_count()
    }

    pub fn is_positive(&self) -> bool {
        self.label > 0.5
    }

    /// Segment label per real position: text (incl. specials), then image.
    pub fn segments(&self) -> Vec<usize> {
        let mut s = vec![TEXT_SEGMENT; self.text_span()];
        s.resize(self.seq_len(), IMAGE_SEGMENT);
        s
    }

    /// Position index per real position: text positions count from 0, patch
    /// positions are their row-major grid index.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.text_span()).chain(0..self.patch_count()).collect()
    }

    /// 1 on real positions, 0 on padding up to `width`.
    pub fn attention_mask(&self, width: usize) -> Vec<u8> {
        (0..width).map(|i| u8::from(i < self.seq_len())).collect()
    }
}

/// Lays out `[CLS] text [SEP] patches` and carries the masking targets.
pub fn assemble_input(
    text: &MaskedSequence,
    patches: &MaskedPatchGrid,
    label: bool,
    config: &ModelConfig,
) -> Result<MultimodalInput> {
    if text.ids.is_empty() {
        return Err(Error::arg("text must contain at least one token"));
    }
    if text.ids.len() + 2 > config.max_text_len {
        return Err(Error::arg(format!(
            "{} text tokens plus [CLS]/[SEP] exceed the text budget of {}",
            text.ids.len(),
            config.max_text_len
        )));
    }
    if patches.is_empty() || patches.len() > config.patches {
        return Err(Error::arg(format!(
            "{} patches outside 1..={}",
            patches.len(),
            config.patches
        )));
    }
    if patches.features.ncols() != config.patch_dim {
        return Err(Error::Shape {
            op: "assemble_input",
            left: vec![config.patches, config.patch_dim],
            right: patches.features.shape().to_vec(),
        });
    }
    if let Some(&bad) = text.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::arg(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let mut token_ids = Vec::with_capacity(text.ids.len() + 2);
    token_ids.push(CLS_ID);
    token_ids.extend_from_slice(&text.ids);
    token_ids.push(SEP_ID);
    Ok(MultimodalInput {
        token_ids,
        patch_features: patches.features.clone(),
        label: if label { 1.0 } else { 0.0 },
        masked_text_positions: text.masked_positions.iter().map(|p| p + 1).collect(),
        masked_text_originals: text.originals.clone(),
        masked_patches: patches.masked_positions.clone(),
        patch_targets: patches.targets.clone(),
    })
}

/// Unmasked input for scoring.
pub fn inference_input(
    text: &TokenSequence,
    patches: &PatchGrid,
    config: &ModelConfig,
) -> Result<MultimodalInput> {
    assemble_input(
        &MaskedSequence::unmasked(text),
        &MaskedPatchGrid::unmasked(patches),
        false,
        config,
    )
}
