//! Fixed-grid patch tokenization of images, per-patch statistical features
//! and patch masking.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
/// Default thumbnail side; features are `3 + 3 + 3·s²` long.
pub const THUMBNAIL: usize = 4;

/// RGB image, row-major `height × width × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("image dimensions must be positive"));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Shape {
                op: "image",
                left: vec![height, width, CHANNELS],
                right: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.pixels[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Binary P6 PPM with maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "PPM image",
            detail: detail.to_string(),
        };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("missing P6 magic"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = &bytes[pos + 1..];
        let expected = width * height * CHANNELS;
        if data.len() < expected {
            return Err(bad("raster shorter than header dimensions"));
        }
        let pixels = data[..expected]
            .iter()
            .map(|&b| b as f64 / maxval as f64)
            .collect();
        Image::new(height, width, pixels)
    }

    /// `RF32` magic, then height, width, channels as little-endian u32, then
    /// little-endian f32 samples.
    pub fn to_raster(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len() * 4);
        out.extend_from_slice(b"RF32");
        for dim in [self.height, self.width, CHANNELS] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &self.pixels {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raster(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "float raster",
            detail: detail.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != b"RF32" {
            return Err(bad("missing RF32 header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        if channels != CHANNELS {
            return Err(bad("only 3-channel rasters are supported"));
        }
        let body = &bytes[16..];
        if body.len() != height * width * channels * 4 {
            return Err(bad("raster length does not match header"));
        }
        let pixels = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Image::new(height, width, pixels)
    }

    /// Reads a `.ppm` or float raster file, chosen by its magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"RF32") {
            Self::from_raster(&bytes)
        } else {
            Self::from_ppm(&bytes)
        }
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Cuts `image` into `grid × grid` equal blocks in row-major order.
pub fn split_patches(image: &Image, grid: usize) -> Result<Vec<Image>> {
    if grid == 0 || image.height % grid != 0 || image.width % grid != 0 {
        return Err(Error::arg(format!(
            "{}x{} image is not divisible into a {grid}x{grid} grid",
            image.height, image.width
        )));
    }
    let (ph, pw) = (image.height / grid, image.width / grid);
    let mut patches = Vec::with_capacity(grid * grid);
    for gr in 0..grid {
        for gc in 0..grid {
            let mut pixels = Vec::with_capacity(ph * pw * CHANNELS);
            for r in gr * ph..(gr + 1) * ph {
                let start = (r * image.width + gc * pw) * CHANNELS;
                pixels.extend_from_slice(&image.pixels[start..start + pw * CHANNELS]);
            }
            patches.push(Image {
                height: ph,
                width: pw,
                pixels,
            });
        }
    }
    Ok(patches)
}

/// Inverse of [`split_patches`].
pub fn assemble_patches(patches: &[Image], grid: usize) -> Result<Image> {
    if grid == 0 || patches.len() != grid * grid {
        return Err(Error::arg(format!(
            "{} patches do not form a {grid}x{grid} grid",
            patches.len()
        )));
    }
    let (ph, pw) = (patches[0].height, patches[0].width);
    if patches.iter().any(|p| p.height != ph || p.width != pw) {
        return Err(Error::arg("patches differ in size"));
    }
    let mut image = Image::filled(ph * grid, pw * grid, [0.0; 3]);
    for (i, patch) in patches.iter().enumerate() {
        let (gr, gc) = (i / grid, i % grid);
        for r in 0..ph {
            let dst = ((gr * ph + r) * image.width + gc * pw) * CHANNELS;
            let src = r * pw * CHANNELS;
            image.pixels[dst..dst + pw * CHANNELS]
                .copy_from_slice(&patch.pixels[src..src + pw * CHANNELS]);
        }
    }
    Ok(image)
}

pub fn feature_dim(thumbnail: usize) -> usize {
    2 * CHANNELS + CHANNELS * thumbnail * thumbnail
}

/// Per-channel mean, per-channel population standard deviation, then an
/// `s × s` average-pooled thumbnail (row-major, channels interleaved).
pub fn extract_patch_features(patch: &Image, thumbnail: usize) -> Vec<f64> {
    let n = (patch.height * patch.width) as f64;
    let mut mean = [0.0; CHANNELS];
    for px in patch.pixels.chunks_exact(CHANNELS) {
        for c in 0..CHANNELS {
            mean[c] += px[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; CHANNELS];
    for px in patch.pixels.chunks_exact(CHANNELS) {
        for c in 0..CHANNELS {
            var[c] += (px[c] - mean[c]).powi(2);
        }
    }
    let mut features = Vec::with_capacity(feature_dim(thumbnail));
    features.extend_from_slice(&mean);
    features.extend(var.iter().map(|v| (v / n).sqrt()));
    for tr in 0..thumbnail {
        let rows = tr * patch.height / thumbnail..(tr + 1) * patch.height / thumbnail;
        for tc in 0..thumbnail {
            let cols = tc * patch.width / thumbnail..(tc + 1) * patch.width / thumbnail;
            let mut sum = [0.0; CHANNELS];
            let mut count = 0.0;
            for r in rows.clone() {
                for c in cols.clone() {
                    let px = patch.get(r, c);
                    for k in 0..CHANNELS {
                        sum[k] += px[k];
                    }
                    count += 1.0;
                }
            }
            features.extend(sum.iter().map(|s| if count > 0.0 { s / count } else { 0.0 }));
        }
    }
    features
}

/// Row-major patch feature vectors of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid: usize,
    /// `grid² × d_patch`.
    pub features: Array2<f64>,
}

impl PatchGrid {
    pub fn from_image(image: &Image, grid: usize, thumbnail: usize) -> Result<Self> {
        let patches = split_patches(image, grid)?;
        let dim = feature_dim(thumbnail);
        let mut features = Array2::zeros((patches.len(), dim));
        for (mut row, patch) in features.rows_mut().into_iter().zip(&patches) {
            row.assign(&ndarray::Array1::from(extract_patch_features(patch, thumbnail)));
        }
        Ok(Self { grid, features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPatchGrid {
    pub grid: usize,
    /// Features with masked rows zeroed.
    pub features: Array2<f64>,
    /// Ascending patch indices that were masked.
    pub masked_positions: Vec<usize>,
    /// Pre-mask features of the masked patches, one row per position.
    pub targets: Array2<f64>,
}

impl MaskedPatchGrid {
    pub fn unmasked(grid: &PatchGrid) -> Self {
        Self {
            grid: grid.grid,
            features: grid.features.clone(),
            masked_positions: Vec::new(),
            targets: Array2::zeros((0, grid.dim())),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Zeroes each patch with probability `prob`; at least one patch is always
/// masked.
pub fn apply_patch_mask<R: Rng + ?Sized>(grid: &PatchGrid, prob: f64, rng: &mut R) -> MaskedPatchGrid {
    let m = grid.len();
    let mut selected: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < prob).collect();
    if m > 0 && !selected.iter().any(|&s| s) {
        let forced = rng.random_range(0..m);
        selected[forced] = true;
    }
    let masked_positions: Vec<usize> = (0..m).filter(|&i| selected[i]).collect();
    let targets = grid.features.select(ndarray::Axis(0), &masked_positions);
    let mut features = grid.features.clone();
    for &p in &masked_positions {
        features.row_mut(p).fill(0.0);
    }
    MaskedPatchGrid {
        grid: grid.grid,
        features,
        masked_positions,
        targets,
    }
}
