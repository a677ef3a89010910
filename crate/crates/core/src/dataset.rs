//! Tokenized, featurized view of a product corpus split.

use crate::data::{ProductRecord, Split};
use crate::error::{Error, Result};
use crate::image::{PatchGrid, THUMBNAIL};
use crate::model::{inference_input, ModelConfig, MultimodalInput};
use crate::text::{tokenize, TokenSequence, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct Product {
    pub id: usize,
    pub text: TokenSequence,
    pub patches: PatchGrid,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDataset {
    pub products: Vec<Product>,
}

/// A text from one product paired with an image from one product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairedExample {
    /// Index into [`PairDataset::products`] supplying the text.
    pub text: usize,
    /// Index into [`PairDataset::products`] supplying the image.
    pub image: usize,
    pub label: bool,
}

impl PairDataset {
    /// Tokenizes and featurizes every record of `split`. Text is truncated
    /// to leave room for `[CLS]` and `[SEP]`.
    pub fn from_records(
        records: &[ProductRecord],
        split: Split,
        vocab: &Vocabulary,
        config: &ModelConfig,
    ) -> Result<Self> {
        let grid = (config.patches as f64).sqrt().round() as usize;
        if grid * grid != config.patches {
            return Err(Error::arg(format!(
                "patch count {} is not a square grid",
                config.patches
            )));
        }
        let products = records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| {
                let patches = PatchGrid::from_image(&r.image, grid, THUMBNAIL)?;
                if patches.dim() != config.patch_dim {
                    return Err(Error::arg(format!(
                        "patch features have {} dims, model expects {}",
                        patches.dim(),
                        config.patch_dim
                    )));
                }
                Ok(Product {
                    id: r.id,
                    text: tokenize(&r.description, vocab, config.max_text_len - 2),
                    patches,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { products })
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Unmasked model input for a pair.
    pub fn inference_input(&self, pair: &PairedExample, config: &ModelConfig) -> Result<MultimodalInput> {
        let mut x = inference_input(&self.products[pair.text].text, &self.products[pair.image].patches, config)?;
        x.label = if pair.label { 1.0 } else { 0.0 };
        Ok(x)
    }

    /// True when both sides of `pair` come from the same product id.
    pub fn same_product(&self, pair: &PairedExample) -> bool {
        self.products[pair.text].id == self.products[pair.image].id
    }
}
