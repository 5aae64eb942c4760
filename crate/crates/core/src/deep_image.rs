//! Per-pixel embedding fields and their pseudo-RGB rendering.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus_io::checkpoint::Reader;
use crate::corpus_io::{save_rgb_png, ImageRecord};
use crate::embedding_net::{forward, ParameterSet};
use crate::error::{Error, Result};
use crate::{CHANNELS, PATCH_LEN, PATCH_SIZE};

/// Offset of the pixel a patch is attributed to, from its top-left corner.
pub const PATCH_CENTER: usize = 7;

pub const DEEP_MAGIC: &[u8; 8] = b"PEMBDEEP";
const DTYPE_F32: u8 = 0;

/// Embeddings sampled every `stride` pixels over a `width × height` image.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepImage {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub dim: usize,
    /// `grid_height × grid_width × dim`, row-major.
    pub embeddings: Vec<f32>,
}

impl DeepImage {
    pub fn grid_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    pub fn grid_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn len(&self) -> usize {
        self.grid_width() * self.grid_height()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding at grid position `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let i = row * self.grid_width() + col;
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.embeddings.chunks(self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.image_id.len() + 4 * self.embeddings.len());
        out.extend_from_slice(DEEP_MAGIC);
        for v in [self.width, self.height, self.stride, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        out.extend_from_slice(&(self.image_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.image_id.as_bytes());
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("deep image: {m}"));
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != DEEP_MAGIC {
            return Err(bad("bad magic"));
        }
        let width = r.u32("width")? as usize;
        let height = r.u32("height")? as usize;
        let stride = r.u32("stride")? as usize;
        let dim = r.u32("dim")? as usize;
        if r.u8("dtype")? != DTYPE_F32 {
            return Err(bad("unsupported dtype"));
        }
        let image_id = r.string("image id")?;
        if width == 0 || height == 0 || stride == 0 || dim == 0 {
            return Err(bad("zero dimension"));
        }
        let count = width.div_ceil(stride) * height.div_ceil(stride) * dim;
        if r.remaining() != 4 * count {
            return Err(bad(&format!(
                "expected {} body bytes, found {}",
                4 * count,
                r.remaining()
            )));
        }
        let embeddings = r
            .take(4 * count, "body")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            image_id,
            width,
            height,
            stride,
            dim,
            embeddings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// The 16×16 patch whose cell (7, 7) lies on `(row, col)`, reflecting at
/// the borders.
pub fn centered_patch(image: &ImageRecord, row: usize, col: usize, out: &mut [f32]) {
    let top = row as isize - PATCH_CENTER as isize;
    let left = col as isize - PATCH_CENTER as isize;
    let inside = top >= 0
        && left >= 0
        && top as usize + PATCH_SIZE <= image.height
        && left as usize + PATCH_SIZE <= image.width;
    if inside {
        image.copy_patch(top as usize, left as usize, out);
        return;
    }
    for r in 0..PATCH_SIZE {
        let sr = reflect(top + r as isize, image.height);
        for c in 0..PATCH_SIZE {
            let sc = reflect(left + c as isize, image.width);
            let src = (sr * image.width + sc) * CHANNELS;
            let dst = (r * PATCH_SIZE + c) * CHANNELS;
            out[dst..dst + CHANNELS].copy_from_slice(&image.pixels[src..src + CHANNELS]);
        }
    }
}

const ROWS_PER_BATCH: usize = 8;

/// Embed the patch centred on every `stride`-th pixel.
pub fn embed_image(
    params: &ParameterSet<f32>,
    image: &ImageRecord,
    stride: usize,
) -> Result<DeepImage> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be ≥ 1".into()));
    }
    if image.width == 0 || image.height == 0 {
        return Err(Error::InvalidInput(format!(
            "image `{}` is empty",
            image.image_id
        )));
    }
    if let Some(v) = image.pixels.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "pixel {v} in image `{}`",
            image.image_id
        )));
    }
    let dim = params.arch.embedding_dim;
    let gw = image.width.div_ceil(stride);
    let gh = image.height.div_ceil(stride);
    let mut embeddings = Vec::with_capacity(gw * gh * dim);
    let mut batch = Vec::new();
    for start in (0..gh).step_by(ROWS_PER_BATCH) {
        let end = (start + ROWS_PER_BATCH).min(gh);
        batch.clear();
        batch.resize((end - start) * gw * PATCH_LEN, 0.0);
        let mut slots = batch.chunks_mut(PATCH_LEN);
        for gr in start..end {
            for gc in 0..gw {
                centered_patch(image, gr * stride, gc * stride, slots.next().unwrap());
            }
        }
        embeddings.extend(forward(params, &batch)?.data);
    }
    Ok(DeepImage {
        image_id: image.image_id.clone(),
        width: image.width,
        height: image.height,
        stride,
        dim,
        embeddings,
    })
}

/// A three-component principal basis with fixed per-channel display ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Three orthonormal rows of length `dim`, by descending variance.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: [f64; 3],
    /// Share of total variance carried by the three components.
    pub explained_variance: f64,
    /// Per-channel `(min, max)` of the projections over the fitted data.
    pub ranges: [(f64, f64); 3],
}

/// Three display channels per grid pixel, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub basis: PcaBasis,
}

impl PseudoRgb {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgb_png(path, self.width, self.height, &self.pixels)
    }
}

/// Channels whose projected range is below this map to mid-gray.
const FLAT_RANGE: f64 = 1e-9;

/// Fit one basis over the pixels of all given deep images.
pub fn fit_pca(deeps: &[&DeepImage]) -> Result<PcaBasis> {
    let n: usize = deeps.iter().map(|d| d.len()).sum();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "PCA needs at least 3 pixels, got {n}"
        )));
    }
    let dim = deeps[0].dim;
    if dim < 3 || deeps.iter().any(|d| d.dim != dim) {
        return Err(Error::Shape(
            "deep images must share a dimension ≥ 3".into(),
        ));
    }
    let mut mean = vec![0.0f64; dim];
    for row in deeps.iter().flat_map(|d| d.rows()) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0f64; dim];
    for row in deeps.iter().flat_map(|d| d.rows()) {
        for ((c, &v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v as f64 - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(3);
    let mut eigenvalues = [0.0; 3];
    for (slot, &k) in order.iter().take(3).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().enumerate().fold(
            0,
            |best, (i, x)| if x.abs() > v[best].abs() { i } else { best },
        );
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        eigenvalues[slot] = eig.eigenvalues[k].max(0.0);
        components.push(v);
    }
    let explained_variance = if total > 0.0 {
        (eigenvalues.iter().sum::<f64>() / total).min(1.0)
    } else {
        1.0
    };

    let mut basis = PcaBasis {
        mean,
        components,
        eigenvalues,
        explained_variance,
        ranges: [(f64::INFINITY, f64::NEG_INFINITY); 3],
    };
    for row in deeps.iter().flat_map(|d| d.rows()) {
        let p = basis.project_one(row);
        for (r, v) in basis.ranges.iter_mut().zip(p) {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    Ok(basis)
}

impl PcaBasis {
    fn project_one(&self, row: &[f32]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, comp) in out.iter_mut().zip(&self.components) {
            *o = row
                .iter()
                .zip(&self.mean)
                .zip(comp)
                .map(|((&v, m), c)| (v as f64 - m) * c)
                .sum();
        }
        out
    }

    /// Project and rescale each channel by the fitted range.
    pub fn project(&self, deep: &DeepImage) -> PseudoRgb {
        let mut pixels = Vec::with_capacity(deep.len() * 3);
        for row in deep.rows() {
            let p = self.project_one(row);
            for (&v, &(lo, hi)) in p.iter().zip(&self.ranges) {
                let span = hi - lo;
                let c = if span <= FLAT_RANGE {
                    0.5
                } else {
                    ((v - lo) / span).clamp(0.0, 1.0)
                };
                pixels.push(c as f32);
            }
        }
        PseudoRgb {
            width: deep.grid_width(),
            height: deep.grid_height(),
            pixels,
            basis: self.clone(),
        }
    }
}

/// Per-image pseudo-RGB rendering.
pub fn pca_pseudo_rgb(deep: &DeepImage) -> Result<PseudoRgb> {
    Ok(fit_pca(&[deep])?.project(deep))
}
