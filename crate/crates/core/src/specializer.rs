//! Self-supervised fine-tuning on a new domain: segment with the current
//! encoder, pick the common foreground, and train on triplets drawn from
//! those segments.

use log::{info, warn};
use rand::Rng;

use crate::corpus_io::{ImageRecord, LabelMap};
use crate::deep_image::embed_image;
use crate::embedding_net::ParameterSet;
use crate::error::{Error, Result};
use crate::patch_sampler::{PatchRef, Triplet, TripletSource};
use crate::seed::{self, tag};
use crate::segmenter::{segment, upsample_labels, DEFAULT_K};
use crate::trainer::{train_with, LossTrace, TrainingConfig};

/// Labels touching more than this share of the image border count as
/// background.
pub const MAX_BORDER_CONTACT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStats {
    pub label: u32,
    pub pixels: usize,
    /// Share of the image's border pixels that carry this label.
    pub border_contact: f64,
    /// Mean distance of the segment's pixels to the image center.
    pub centrality: f64,
}

pub fn segment_stats(map: &LabelMap) -> Vec<SegmentStats> {
    let (w, h) = (map.width, map.height);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let border_total = if w == 1 || h == 1 {
        w * h
    } else {
        2 * (w + h) - 4
    };
    map.distinct()
        .into_iter()
        .map(|label| {
            let (mut pixels, mut border, mut dist) = (0usize, 0usize, 0.0f64);
            for r in 0..h {
                for c in 0..w {
                    if map.get(r, c) != label {
                        continue;
                    }
                    pixels += 1;
                    if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                        border += 1;
                    }
                    dist += ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                }
            }
            SegmentStats {
                label,
                pixels,
                border_contact: border as f64 / border_total as f64,
                centrality: dist / pixels as f64,
            }
        })
        .collect()
}

/// The most central label among those touching at most half the border;
/// the most central label overall when none qualifies. Ties go to the
/// lowest id.
pub fn select_foreground(map: &LabelMap) -> Result<u32> {
    let stats = segment_stats(map);
    if stats.len() < 2 {
        return Err(Error::InvalidInput(
            "foreground selection needs at least two labels".into(),
        ));
    }
    let most_central = |candidates: Vec<&SegmentStats>| {
        candidates
            .into_iter()
            .fold(None::<&SegmentStats>, |best, s| match best {
                Some(b) if b.centrality <= s.centrality => Some(b),
                _ => Some(s),
            })
            .map(|s| s.label)
    };
    let qualifying: Vec<&SegmentStats> = stats
        .iter()
        .filter(|s| s.border_contact <= MAX_BORDER_CONTACT)
        .collect();
    Ok(most_central(qualifying)
        .or_else(|| most_central(stats.iter().collect()))
        .expect("non-empty"))
}

/// Triplets whose current and near footprints lie inside the foreground
/// segment and whose far footprint lies inside another segment.
pub fn make_pseudo_triplets(
    labels: &LabelMap,
    foreground: u32,
    per_image: usize,
    rng_seed: u64,
) -> Result<Vec<Triplet>> {
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (r, c, l) in labels.uniform_patch_positions() {
        if l == foreground {
            inside.push(PatchRef::new(r, c));
        } else {
            outside.push(PatchRef::new(r, c));
        }
    }
    if inside.len() < 2 || outside.is_empty() {
        return Err(Error::InvalidInput(format!(
            "foreground admits {} patch positions and the rest {}; need ≥ 2 and ≥ 1",
            inside.len(),
            outside.len()
        )));
    }
    let mut rng = seed::rng_for(rng_seed, &[tag::PSEUDO]);
    Ok((0..per_image)
        .map(|_| {
            let i = rng.random_range(0..inside.len());
            let mut j = rng.random_range(0..inside.len() - 1);
            if j >= i {
                j += 1;
            }
            Triplet {
                current: inside[i],
                near: inside[j],
                far: outside[rng.random_range(0..outside.len())],
                origin: None,
            }
        })
        .collect())
}

/// Triplets drawn from each image's attached pseudo-label map.
#[derive(Debug, Clone, Copy)]
pub struct PseudoTriplets {
    pub per_image: usize,
}

impl TripletSource for PseudoTriplets {
    fn image_triplets(&self, image: &ImageRecord, image_seed: u64) -> Result<Vec<Triplet>> {
        let labels = image
            .label_map
            .as_ref()
            .ok_or_else(|| Error::MissingLabelMap(image.image_id.clone()))?;
        let fg = labels.foreground_label.ok_or_else(|| {
            Error::InvalidInput(format!(
                "image `{}` has no foreground label",
                image.image_id
            ))
        })?;
        make_pseudo_triplets(labels, fg, self.per_image, image_seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledImage {
    pub image_id: String,
    /// Full-resolution segment map with the chosen foreground marked.
    pub labels: LabelMap,
    pub foreground_label: u32,
    pub segments: Vec<SegmentStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecializeConfig {
    pub k: usize,
    /// Smoothness weight; `None` derives one per image.
    pub lambda: Option<f64>,
    pub stride: usize,
    pub epochs: usize,
    /// Fine-tuning learning rate relative to the base run.
    pub lr_scale: f64,
    /// Base training settings; epochs and learning rate are overridden.
    pub train: TrainingConfig,
}

impl Default for SpecializeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            lambda: None,
            stride: 1,
            epochs: 400,
            lr_scale: 0.25,
            train: TrainingConfig::default(),
        }
    }
}

impl SpecializeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.k < 2 {
            errs.push(format!("specialize.k must be ≥ 2, got {}", self.k));
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                errs.push(format!("specialize.lambda must be ≥ 0, got {l}"));
            }
        }
        if self.stride == 0 {
            errs.push("specialize.stride must be ≥ 1".into());
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            errs.push(format!(
                "specialize.lr_scale must be > 0, got {}",
                self.lr_scale
            ));
        }
        let mut base = self.train.clone();
        base.epochs = base.epochs.max(1);
        errs.extend(base.validate());
        errs
    }

    /// Settings of the fine-tuning run.
    pub fn fine_tune(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            learning_rate: self.train.learning_rate * self.lr_scale,
            checkpoint_every: 0,
            checkpoint_dir: None,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Specialization {
    pub params: ParameterSet<f32>,
    pub trace: LossTrace,
    pub images: Vec<PseudoLabeledImage>,
    /// Images left out of fine-tuning, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Pseudo-label one image with the frozen encoder.
pub fn pseudo_label(
    params: &ParameterSet<f32>,
    image: &ImageRecord,
    config: &SpecializeConfig,
    image_seed: u64,
) -> Result<PseudoLabeledImage> {
    let deep = embed_image(params, image, config.stride)?;
    let seg = segment(&deep, config.k, config.lambda, image_seed)?;
    let grid = if config.stride > 1 {
        upsample_labels(&seg.labels, config.stride, image.width, image.height)?
    } else {
        seg.labels
    };
    let segments = segment_stats(&grid);
    let fg = if segments.len() < 2 {
        segments[0].label
    } else {
        select_foreground(&grid)?
    };
    Ok(PseudoLabeledImage {
        image_id: image.image_id.clone(),
        labels: grid.with_foreground(fg)?,
        foreground_label: fg,
        segments,
    })
}

/// Segment every image with the base encoder, then fine-tune on
/// foreground pseudo-triplets. Ground-truth label maps are never read.
pub fn specialize(
    corpus: &[ImageRecord],
    base: &ParameterSet<f32>,
    config: &SpecializeConfig,
) -> Result<Specialization> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidInput("specialization corpus is empty".into()));
    }
    let per_image = config.train.sampler.triplets_per_image;
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    let mut pseudo_corpus = Vec::new();
    for (i, image) in corpus.iter().enumerate() {
        let image_seed = seed::derive(config.train.seed, &[tag::PSEUDO, i as u64]);
        let labeled = pseudo_label(base, image, config, image_seed)?;
        let feasible = make_pseudo_triplets(&labeled.labels, labeled.foreground_label, 1, 0);
        match feasible {
            Ok(_) => {
                let mut copy = image.clone();
                copy.label_map_ref = None;
                copy.label_map = Some(labeled.labels.clone());
                pseudo_corpus.push(copy);
            }
            Err(e) => {
                warn!("skipping `{}`: {e}", image.image_id);
                skipped.push((image.image_id.clone(), e.to_string()));
            }
        }
        images.push(labeled);
    }
    if pseudo_corpus.is_empty() {
        return Err(Error::InvalidInput(
            "every image was skipped during pseudo-labeling".into(),
        ));
    }
    info!(
        "pseudo-labeled {} images, {} skipped",
        pseudo_corpus.len(),
        skipped.len()
    );
    if config.epochs == 0 {
        return Ok(Specialization {
            params: base.clone(),
            trace: LossTrace::default(),
            images,
            skipped,
        });
    }
    let (params, trace) = train_with(
        &pseudo_corpus,
        &config.fine_tune(),
        base.clone(),
        &PseudoTriplets { per_image },
    )?;
    Ok(Specialization {
        params,
        trace,
        images,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_net::{init_parameters, ArchitectureConfig};
    use crate::patch_sampler::SamplerConfig;
    use crate::synth;

    fn map_from(w: usize, h: usize, f: impl Fn(usize, usize) -> u32) -> LabelMap {
        let labels = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        LabelMap::new(w, h, labels).unwrap()
    }

    fn inside(labels: &LabelMap, p: PatchRef) -> Option<u32> {
        labels.uniform_patch_label(p.row, p.col)
    }

    #[test]
    fn centered_disk_is_foreground() {
        let m = map_from(40, 30, |r, c| {
            let (dy, dx) = (r as f64 - 14.5, c as f64 - 19.5);
            u32::from(dy * dy + dx * dx < 64.0)
        });
        assert_eq!(select_foreground(&m).unwrap(), 1);
    }

    #[test]
    fn frame_loses_to_interior_blob() {
        // label 5 frames the image, label 2 sits off-center inside it
        let m = map_from(30, 30, |r, c| {
            if r < 3 || c < 3 || r >= 27 || c >= 27 {
                5
            } else if r < 12 && c < 12 {
                2
            } else {
                7
            }
        });
        let stats = segment_stats(&m);
        assert_eq!(
            stats.iter().find(|s| s.label == 5).unwrap().border_contact,
            1.0
        );
        assert_eq!(select_foreground(&m).unwrap(), 7);
    }

    #[test]
    fn most_central_qualifying_label_wins() {
        // quadrants 0..3 each touch a quarter of the border; label 9 is a
        // small square straddling the center
        let (w, h) = (20, 20);
        let m = map_from(w, h, |r, c| {
            if (8..12).contains(&r) && (8..12).contains(&c) {
                9
            } else {
                (u32::from(r >= 10) << 1) | u32::from(c >= 10)
            }
        });
        let mut best = (f64::INFINITY, u32::MAX);
        for label in m.distinct() {
            let (mut n, mut d) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    if m.get(r, c) == label {
                        n += 1.0;
                        d += ((r as f64 - 9.5).powi(2) + (c as f64 - 9.5).powi(2)).sqrt();
                    }
                }
            }
            if d / n < best.0 {
                best = (d / n, label);
            }
        }
        assert_eq!(best.1, 9);
        assert_eq!(select_foreground(&m).unwrap(), best.1);
    }

    #[test]
    fn single_label_map_rejected() {
        assert!(select_foreground(&map_from(8, 8, |_, _| 3)).is_err());
    }

    #[test]
    fn pseudo_triplets_respect_footprints() {
        let m = map_from(64, 40, |_, c| u32::from(c >= 32));
        let ts = make_pseudo_triplets(&m, 1, 100, 4).unwrap();
        assert_eq!(ts.len(), 100);
        for t in &ts {
            assert_eq!(inside(&m, t.current), Some(1));
            assert_eq!(inside(&m, t.near), Some(1));
            assert_ne!(t.current, t.near);
            assert_eq!(inside(&m, t.far), Some(0));
        }
        assert_eq!(ts, make_pseudo_triplets(&m, 1, 100, 4).unwrap());
    }

    #[test]
    fn thin_foreground_is_infeasible() {
        let m = map_from(64, 40, |r, _| u32::from((10..25).contains(&r)));
        assert!(make_pseudo_triplets(&m, 1, 10, 0).is_err());
    }

    fn small_config(epochs: usize) -> SpecializeConfig {
        SpecializeConfig {
            stride: 4,
            epochs,
            train: TrainingConfig {
                heldout_fraction: 0.0,
                sampler: SamplerConfig {
                    triplets_per_image: 8,
                    batch_size: 16,
                    ..SamplerConfig::default()
                },
                ..TrainingConfig::default()
            },
            ..SpecializeConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_the_identity() {
        let corpus = synth::object_corpus(3, 64, 64, 2);
        let base = init_parameters::<f32>(&ArchitectureConfig::tiny(), 1).unwrap();
        let out = specialize(&corpus, &base, &small_config(0)).unwrap();
        assert_eq!(out.params, base);
        assert_eq!(out.images.len(), 3);
        for img in &out.images {
            assert!(img.labels.distinct().len() <= 4);
            assert_eq!(img.labels.foreground_label, Some(img.foreground_label));
        }
    }

    #[test]
    fn fine_tuning_changes_parameters() {
        let corpus = synth::object_corpus(3, 64, 64, 3);
        let base = init_parameters::<f32>(&ArchitectureConfig::default(), 1).unwrap();
        let cfg = small_config(1);
        match specialize(&corpus, &base, &cfg) {
            Ok(out) => {
                assert_ne!(out.params, base);
                assert_eq!(out.trace.entries.len(), 2);
            }
            Err(Error::InvalidInput(msg)) => panic!("all images skipped: {msg}"),
            Err(e) => panic!("{e}"),
        }
    }
}
