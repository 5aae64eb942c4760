//! Spatial-proximity triplets.
//!
//! Each image hosts a few pairwise-disjoint 48×48 swatches, each a 3×3 grid
//! of abutting 16×16 patches. A triplet takes its current and near patches
//! from two different cells of one swatch and its far patch from another
//! swatch of the same image.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use crate::corpus_io::ImageRecord;
use crate::error::{Error, Result};
use crate::seed::{self, tag};
use crate::{PATCH_LEN, PATCH_SIZE};

/// Side of a swatch in pixels.
pub const SWATCH_SIZE: usize = 3 * PATCH_SIZE;
/// Anchor draws per swatch before placement gives up.
pub const PLACEMENT_BUDGET: usize = 1000;

/// Top-left corner of a 16×16 patch inside its image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRef {
    pub row: usize,
    pub col: usize,
}

impl PatchRef {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Whether the two 16×16 footprints share a pixel.
    pub fn overlaps(&self, other: &PatchRef) -> bool {
        self.row.abs_diff(other.row) < PATCH_SIZE && self.col.abs_diff(other.col) < PATCH_SIZE
    }
}

/// A patch with its pixels copied out of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image_id: String,
    pub top_left: PatchRef,
    pub pixels: Vec<f32>,
}

impl Patch {
    pub fn extract(image: &ImageRecord, at: PatchRef) -> Self {
        Self {
            image_id: image.image_id.clone(),
            top_left: at,
            pixels: image.patch(at.row, at.col),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Swatch {
    pub image_id: String,
    pub anchor: PatchRef,
}

impl Swatch {
    /// Grid cell `index` in row-major order, 0..9.
    pub fn cell(&self, index: usize) -> PatchRef {
        assert!(index < 9);
        PatchRef::new(
            self.anchor.row + (index / 3) * PATCH_SIZE,
            self.anchor.col + (index % 3) * PATCH_SIZE,
        )
    }

    pub fn cells(&self) -> [PatchRef; 9] {
        std::array::from_fn(|i| self.cell(i))
    }

    pub fn patches(&self, image: &ImageRecord) -> Vec<Patch> {
        self.cells()
            .iter()
            .map(|&c| Patch::extract(image, c))
            .collect()
    }

    pub fn overlaps(&self, other: &Swatch) -> bool {
        self.anchor.row.abs_diff(other.anchor.row) < SWATCH_SIZE
            && self.anchor.col.abs_diff(other.anchor.col) < SWATCH_SIZE
    }
}

/// Where a swatch triplet's patches came from, kept for audit dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwatchOrigin {
    pub near_swatch: PatchRef,
    pub far_swatch: PatchRef,
    /// Grid cells of the current, near and far patches.
    pub cells: [u8; 3],
}

/// Current, near and far patches within one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub current: PatchRef,
    pub near: PatchRef,
    pub far: PatchRef,
    pub origin: Option<SwatchOrigin>,
}

/// A triplet tagged with the index of its image in the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageTriplet {
    pub image: usize,
    pub triplet: Triplet,
}

/// Place `count` pairwise-disjoint swatches by uniform rejection sampling.
pub fn sample_swatches(image: &ImageRecord, count: usize, rng_seed: u64) -> Result<Vec<Swatch>> {
    if image.width < SWATCH_SIZE || image.height < SWATCH_SIZE {
        return Err(Error::InvalidInput(format!(
            "image `{}` is {}x{}, smaller than one {SWATCH_SIZE}x{SWATCH_SIZE} swatch",
            image.image_id, image.width, image.height
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let mut placed: Vec<Swatch> = Vec::with_capacity(count);
    for _ in 0..count {
        let found = (0..PLACEMENT_BUDGET).find_map(|_| {
            let candidate = Swatch {
                image_id: image.image_id.clone(),
                anchor: PatchRef::new(
                    rng.random_range(0..=image.height - SWATCH_SIZE),
                    rng.random_range(0..=image.width - SWATCH_SIZE),
                ),
            };
            (!placed.iter().any(|s| s.overlaps(&candidate))).then_some(candidate)
        });
        match found {
            Some(s) => placed.push(s),
            None => {
                return Err(Error::SamplingFailed {
                    image_id: image.image_id.clone(),
                    requested: count,
                    placed: placed.len(),
                })
            }
        }
    }
    Ok(placed)
}

/// Draw `per_image` triplets: two distinct cells of one swatch, one cell of
/// another swatch.
pub fn make_triplets(swatches: &[Swatch], per_image: usize, rng_seed: u64) -> Result<Vec<Triplet>> {
    if swatches.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 swatches to form triplets, got {}",
            swatches.len()
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let cells: Vec<usize> = (0..9).collect();
    Ok((0..per_image)
        .map(|_| {
            let s = rng.random_range(0..swatches.len());
            let mut pair = cells.choose_multiple(&mut rng, 2);
            let (c, n) = (*pair.next().unwrap(), *pair.next().unwrap());
            let mut other = rng.random_range(0..swatches.len() - 1);
            if other >= s {
                other += 1;
            }
            let f = rng.random_range(0..9);
            Triplet {
                current: swatches[s].cell(c),
                near: swatches[s].cell(n),
                far: swatches[other].cell(f),
                origin: Some(SwatchOrigin {
                    near_swatch: swatches[s].anchor,
                    far_swatch: swatches[other].anchor,
                    cells: [c as u8, n as u8, f as u8],
                }),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub swatches_per_image: usize,
    pub triplets_per_image: usize,
    pub batch_size: usize,
    /// Fresh placement seeds tried when a placement budget runs out.
    pub placement_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            swatches_per_image: 6,
            triplets_per_image: 90,
            batch_size: 128,
            placement_retries: 8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.swatches_per_image < 2 {
            errs.push("sampler.swatches must be ≥ 2".into());
        }
        if self.triplets_per_image == 0 {
            errs.push("sampler.per_image must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be ≥ 1".into());
        }
        errs
    }
}

/// Ordered triplet batches for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletEpoch {
    pub epoch: usize,
    pub batches: Vec<Vec<ImageTriplet>>,
}

impl TripletEpoch {
    pub fn len(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triplets(&self) -> impl DoubleEndedIterator<Item = &ImageTriplet> {
        self.batches.iter().flatten()
    }
}

/// Swatch triplets for one image, retrying placement with derived seeds.
pub fn image_triplets(
    image: &ImageRecord,
    config: &SamplerConfig,
    image_seed: u64,
) -> Result<Vec<Triplet>> {
    let mut last = None;
    for attempt in 0..=config.placement_retries {
        match sample_swatches(
            image,
            config.swatches_per_image,
            seed::derive(image_seed, &[tag::SWATCH, attempt as u64]),
        ) {
            Ok(swatches) => {
                return make_triplets(
                    &swatches,
                    config.triplets_per_image,
                    seed::derive(image_seed, &[tag::TRIPLET]),
                )
            }
            Err(e) if e.is_retryable() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Proposes triplets for one image from a per-image seed.
pub trait TripletSource: Sync {
    fn image_triplets(&self, image: &ImageRecord, image_seed: u64) -> Result<Vec<Triplet>>;
}

impl TripletSource for SamplerConfig {
    fn image_triplets(&self, image: &ImageRecord, image_seed: u64) -> Result<Vec<Triplet>> {
        image_triplets(image, self, image_seed)
    }
}

/// Triplets for every image, drawn from `seed` alone, then shuffled by an
/// epoch-specific stream and cut into batches (the last may be short).
pub fn plan_epoch(
    corpus: &[ImageRecord],
    config: &SamplerConfig,
    seed: u64,
    epoch: usize,
) -> Result<TripletEpoch> {
    plan_epoch_from(config, corpus, config.batch_size, seed, epoch)
}

pub fn plan_epoch_from(
    source: &dyn TripletSource,
    corpus: &[ImageRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<TripletEpoch> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput(
            "cannot plan an epoch over an empty corpus".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be ≥ 1".into()));
    }
    let per_image: Vec<Vec<Triplet>> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, image)| source.image_triplets(image, seed::derive(seed, &[i as u64])))
        .collect::<Result<_>>()?;
    let mut all: Vec<ImageTriplet> = per_image
        .into_iter()
        .enumerate()
        .flat_map(|(image, ts)| {
            ts.into_iter()
                .map(move |triplet| ImageTriplet { image, triplet })
        })
        .collect();
    if all.is_empty() {
        return Err(Error::InvalidInput("no image yielded any triplet".into()));
    }
    all.shuffle(&mut seed::rng_for(seed, &[tag::SHUFFLE, epoch as u64]));
    Ok(TripletEpoch {
        epoch,
        batches: all.chunks(batch_size).map(<[_]>::to_vec).collect(),
    })
}

/// Pixels of `triplets` as consecutive patches in current, near, far order.
pub fn extract_batch(corpus: &[ImageRecord], triplets: &[ImageTriplet]) -> Vec<f32> {
    let mut out = vec![0.0; triplets.len() * 3 * PATCH_LEN];
    for (t, chunk) in triplets.iter().zip(out.chunks_mut(3 * PATCH_LEN)) {
        let image = &corpus[t.image];
        let refs = [t.triplet.current, t.triplet.near, t.triplet.far];
        for (r, dst) in refs.iter().zip(chunk.chunks_mut(PATCH_LEN)) {
            image.copy_patch(r.row, r.col, dst);
        }
    }
    out
}

/// Tab-separated audit listing of a plan.
pub fn dump_plan(corpus: &[ImageRecord], plan: &TripletEpoch) -> String {
    let mut out = String::from(
        "# batch\timage_id\tnear_swatch\tfar_swatch\tcells(c,n,f)\tcurrent\tnear\tfar\n",
    );
    for (b, batch) in plan.batches.iter().enumerate() {
        for t in batch {
            let tr = &t.triplet;
            let (ns, fs, cells) = match tr.origin {
                Some(o) => (
                    format!("{},{}", o.near_swatch.row, o.near_swatch.col),
                    format!("{},{}", o.far_swatch.row, o.far_swatch.col),
                    format!("{},{},{}", o.cells[0], o.cells[1], o.cells[2]),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{b}\t{}\t{ns}\t{fs}\t{cells}\t{},{}\t{},{}\t{},{}",
                corpus[t.image].image_id,
                tr.current.row,
                tr.current.col,
                tr.near.row,
                tr.near.col,
                tr.far.row,
                tr.far.col
            );
        }
    }
    out
}
