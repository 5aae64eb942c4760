//! Same/different-segment pair sampling and ROC-AUC scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus_io::{ImageRecord, LabelMap};
use crate::embedding_net::{forward, ParameterSet};
use crate::error::{Error, Result};
use crate::patch_sampler::PatchRef;
use crate::seed::{self, tag};
use crate::PATCH_LEN;

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub image_id: String,
    pub a: PatchRef,
    pub b: PatchRef,
    pub same_segment: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub pairs: Vec<PairSample>,
    pub diagnostics: Vec<String>,
}

impl PairSet {
    pub fn n_same(&self) -> usize {
        self.pairs.iter().filter(|p| p.same_segment).count()
    }

    pub fn n_diff(&self) -> usize {
        self.pairs.len() - self.n_same()
    }
}

/// Positions whose footprint is label-uniform, grouped by label.
fn footprint_groups(labels: &LabelMap) -> BTreeMap<u32, Vec<PatchRef>> {
    let mut groups: BTreeMap<u32, Vec<PatchRef>> = BTreeMap::new();
    for (r, c, l) in labels.uniform_patch_positions() {
        groups.entry(l).or_default().push(PatchRef::new(r, c));
    }
    groups
}

fn pick_weighted<'a, R: Rng>(
    groups: &[(u32, &'a [PatchRef])],
    rng: &mut R,
) -> (u32, &'a [PatchRef], usize) {
    let total: usize = groups.iter().map(|g| g.1.len()).sum();
    let mut i = rng.random_range(0..total);
    for &(l, g) in groups {
        if i < g.len() {
            return (l, g, i);
        }
        i -= g.len();
    }
    unreachable!("index below total")
}

/// Draw up to `n_per_class` pairs of each class. Every patch footprint lies
/// inside one segment. With `foreground_only`, same-segment pairs come only
/// from the map's foreground label.
pub fn sample_pairs(
    image: &ImageRecord,
    labels: &LabelMap,
    n_per_class: usize,
    seed: u64,
    foreground_only: bool,
) -> Result<PairSet> {
    if labels.width != image.width || labels.height != image.height {
        return Err(Error::DimensionMismatch {
            image_id: image.image_id.clone(),
            width: image.width,
            height: image.height,
            label_width: labels.width,
            label_height: labels.height,
        });
    }
    let foreground = if foreground_only {
        Some(labels.foreground_label.ok_or_else(|| {
            Error::InvalidInput(format!(
                "image `{}` has no designated foreground label",
                image.image_id
            ))
        })?)
    } else {
        None
    };
    let groups = footprint_groups(labels);
    let all: Vec<(u32, &[PatchRef])> = groups.iter().map(|(&l, g)| (l, g.as_slice())).collect();
    let same_groups: Vec<(u32, &[PatchRef])> = all
        .iter()
        .copied()
        .filter(|(l, g)| g.len() >= 2 && foreground.is_none_or(|f| f == *l))
        .collect();

    let mut rng = seed::rng_for(seed, &[tag::PAIRS]);
    let mut set = PairSet::default();
    let make = |a: PatchRef, b: PatchRef, same: bool| PairSample {
        image_id: image.image_id.clone(),
        a,
        b,
        same_segment: same,
    };

    if same_groups.is_empty() {
        let msg = format!("image `{}`: no feasible same-segment pair", image.image_id);
        warn!("{msg}");
        set.diagnostics.push(msg);
    } else {
        for _ in 0..n_per_class {
            let (_, g, i) = pick_weighted(&same_groups, &mut rng);
            let mut j = rng.random_range(0..g.len() - 1);
            if j >= i {
                j += 1;
            }
            set.pairs.push(make(g[i], g[j], true));
        }
    }

    if all.len() < 2 {
        let msg = format!(
            "image `{}`: no feasible different-segment pair",
            image.image_id
        );
        warn!("{msg}");
        set.diagnostics.push(msg);
    } else {
        for _ in 0..n_per_class {
            let (la, ga, i) = pick_weighted(&all, &mut rng);
            let others: Vec<(u32, &[PatchRef])> =
                all.iter().copied().filter(|(l, _)| *l != la).collect();
            let (_, gb, j) = pick_weighted(&others, &mut rng);
            set.pairs.push(make(ga[i], gb[j], false));
        }
    }
    Ok(set)
}

/// Mann–Whitney statistic: the share of (same, diff) comparisons where the
/// different-segment distance is larger, ties counted one half.
pub fn auc(same: &[f64], diff: &[f64]) -> Result<f64> {
    if same.is_empty() || diff.is_empty() {
        return Err(Error::InvalidInput(format!(
            "AUC needs both classes, got {} same and {} different",
            same.len(),
            diff.len()
        )));
    }
    if same.iter().chain(diff).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distance".into()));
    }
    let mut d = diff.to_vec();
    d.sort_by(f64::total_cmp);
    // twice the number of wins plus ties, kept in integers
    let mut half_counts: u128 = 0;
    for &s in same {
        let below_or_eq = d.partition_point(|&x| x <= s);
        let below = d.partition_point(|&x| x < s);
        let above = d.len() - below_or_eq;
        half_counts += 2 * above as u128 + (below_or_eq - below) as u128;
    }
    Ok(half_counts as f64 / (2 * same.len() as u128 * d.len() as u128) as f64)
}

/// ROC points `(false positive rate, true positive rate)` for the rule
/// "same segment when distance ≤ threshold", over every distinct threshold.
pub fn roc_points(same: &[f64], diff: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = same
        .iter()
        .map(|&v| (v, true))
        .chain(diff.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (ns, nd) = (same.len() as f64, diff.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / nd, tp as f64 / ns));
    }
    points
}

/// Trapezoidal area under a ROC curve.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn format_roc(points: &[(f64, f64)]) -> String {
    let mut out = String::from("# fpr\ttpr\n");
    for (f, t) in points {
        writeln!(out, "{f:.6}\t{t:.6}").unwrap();
    }
    out
}

/// A way to map patches to vectors compared by Euclidean distance.
#[derive(Debug, Clone, Copy)]
pub enum Embedder<'a> {
    Encoder {
        name: &'a str,
        params: &'a ParameterSet<f32>,
    },
    RawPixels,
}

impl Embedder<'_> {
    pub fn id(&self) -> &str {
        match self {
            Embedder::Encoder { name, .. } => name,
            Embedder::RawPixels => "raw_pixels",
        }
    }

    /// Vectors for a batch of patches, `dim` values each.
    pub fn embed(&self, batch: &[f32]) -> Result<(usize, Vec<f32>)> {
        match self {
            Embedder::Encoder { params, .. } => {
                let e = forward(params, batch)?;
                Ok((e.dim, e.data))
            }
            Embedder::RawPixels => Ok((PATCH_LEN, batch.to_vec())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_per_class: usize,
    pub foreground_only: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            foreground_only: false,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_per_class == 0 {
            errs.push("eval.pairs_per_class must be ≥ 1".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub embedder_id: String,
    pub auc: f64,
    pub n_same: usize,
    pub n_diff: usize,
    pub same_distances: Vec<f64>,
    pub diff_distances: Vec<f64>,
}

impl RocResult {
    pub fn roc(&self) -> Vec<(f64, f64)> {
        roc_points(&self.same_distances, &self.diff_distances)
    }
}

/// Pairs for every image of an annotated corpus, each image on its own
/// derived stream.
pub fn corpus_pairs(corpus: &[ImageRecord], config: &EvalConfig) -> Result<Vec<PairSet>> {
    if let Some(img) = corpus.iter().find(|i| i.label_map.is_none()) {
        return Err(Error::MissingLabelMap(img.image_id.clone()));
    }
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            sample_pairs(
                img,
                img.label_map.as_ref().expect("checked"),
                config.n_per_class,
                seed::derive(config.seed, &[i as u64]),
                config.foreground_only,
            )
        })
        .collect()
}

fn pair_distances(
    image: &ImageRecord,
    pairs: &[PairSample],
    embedder: &Embedder,
) -> Result<Vec<f64>> {
    let mut batch = vec![0.0f32; 2 * pairs.len() * PATCH_LEN];
    for (p, slots) in pairs.iter().zip(batch.chunks_mut(2 * PATCH_LEN)) {
        let (a, b) = slots.split_at_mut(PATCH_LEN);
        image.copy_patch(p.a.row, p.a.col, a);
        image.copy_patch(p.b.row, p.b.col, b);
    }
    let (dim, vecs) = embedder.embed(&batch)?;
    Ok(vecs
        .chunks(2 * dim)
        .map(|ab| {
            ab[..dim]
                .iter()
                .zip(&ab[dim..])
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Score each embedder on one shared pair set pooled over the corpus.
pub fn evaluate(
    corpus: &[ImageRecord],
    embedders: &[Embedder],
    config: &EvalConfig,
) -> Result<Vec<RocResult>> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let sets = corpus_pairs(corpus, config)?;
    embedders
        .iter()
        .map(|embedder| {
            let (mut same, mut diff) = (Vec::new(), Vec::new());
            for (img, set) in corpus.iter().zip(&sets) {
                if set.pairs.is_empty() {
                    continue;
                }
                let d = pair_distances(img, &set.pairs, embedder)?;
                for (p, v) in set.pairs.iter().zip(d) {
                    if p.same_segment {
                        same.push(v);
                    } else {
                        diff.push(v);
                    }
                }
            }
            same.sort_by(f64::total_cmp);
            diff.sort_by(f64::total_cmp);
            Ok(RocResult {
                embedder_id: embedder.id().to_string(),
                auc: auc(&same, &diff)?,
                n_same: same.len(),
                n_diff: diff.len(),
                same_distances: same,
                diff_distances: diff,
            })
        })
        .collect()
}

/// Plain-text table with one row per embedder.
pub fn format_report(title: &str, results: &[RocResult]) -> String {
    let mut out = format!("# {title}\nmethod\tauc\tn_same\tn_diff\n");
    for r in results {
        writeln!(
            out,
            "{}\t{:.4}\t{}\t{}",
            r.embedder_id, r.auc, r.n_same, r.n_diff
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_net::{init_parameters, ArchitectureConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn brute(same: &[f64], diff: &[f64]) -> f64 {
        let mut score = 0.0;
        for s in same {
            for d in diff {
                score += if d > s {
                    1.0
                } else if d == s {
                    0.5
                } else {
                    0.0
                };
            }
        }
        score / (same.len() * diff.len()) as f64
    }

    fn halves(w: usize, h: usize) -> (ImageRecord, LabelMap) {
        let mut px = Vec::new();
        let mut lab = Vec::new();
        for _ in 0..h {
            for c in 0..w {
                let left = c < w / 2;
                px.extend_from_slice(if left {
                    &[0.9, 0.2, 0.1]
                } else {
                    &[0.1, 0.3, 0.8]
                });
                lab.push(if left { 0 } else { 1 });
            }
        }
        (
            ImageRecord::new("halves", w, h, px).unwrap(),
            LabelMap::new(w, h, lab).unwrap(),
        )
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2], &[0.5, 0.6]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.1, 0.3], &[0.1, 0.3, 0.3]).unwrap(), 0.5);
        assert_eq!(auc(&[0.3], &[0.1, 0.5]).unwrap(), 0.5);
        assert!(auc(&[], &[0.1]).is_err());
        assert!(auc(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn pairs_respect_footprints() {
        let (img, labels) = halves(64, 40);
        let set = sample_pairs(&img, &labels, 50, 3, false).unwrap();
        assert_eq!((set.n_same(), set.n_diff()), (50, 50));
        for p in &set.pairs {
            let la = labels.uniform_patch_label(p.a.row, p.a.col).unwrap();
            let lb = labels.uniform_patch_label(p.b.row, p.b.col).unwrap();
            assert_eq!(la == lb, p.same_segment);
            assert_ne!(p.a, p.b);
        }
        assert_eq!(set, sample_pairs(&img, &labels, 50, 3, false).unwrap());
    }

    #[test]
    fn single_segment_has_no_different_pairs() {
        let img = ImageRecord::new("flat", 32, 32, vec![0.5; 32 * 32 * 3]).unwrap();
        let labels = LabelMap::new(32, 32, vec![4; 32 * 32]).unwrap();
        let set = sample_pairs(&img, &labels, 10, 0, false).unwrap();
        assert_eq!((set.n_same(), set.n_diff()), (10, 0));
        assert_eq!(set.diagnostics.len(), 1);
    }

    #[test]
    fn foreground_only_draws_same_pairs_inside_the_foreground() {
        let (img, labels) = halves(64, 40);
        let labels = labels.with_foreground(1).unwrap();
        let set = sample_pairs(&img, &labels, 40, 1, true).unwrap();
        for p in set.pairs.iter().filter(|p| p.same_segment) {
            assert_eq!(labels.uniform_patch_label(p.a.row, p.a.col), Some(1));
            assert_eq!(labels.uniform_patch_label(p.b.row, p.b.col), Some(1));
        }
        let unmarked = LabelMap::new(64, 40, labels.labels.clone()).unwrap();
        assert!(sample_pairs(&img, &unmarked, 5, 1, true).is_err());
    }

    #[test]
    fn color_coded_segments_give_perfect_raw_auc() {
        let (img, labels) = halves(64, 48);
        let img = img.with_label_map(labels).unwrap();
        let res = evaluate(&[img], &[Embedder::RawPixels], &EvalConfig::default()).unwrap();
        assert_eq!(res[0].auc, 1.0);
        assert_eq!(brute(&res[0].same_distances, &res[0].diff_distances), 1.0);
    }

    #[test]
    fn constant_encoder_scores_one_half() {
        let (img, labels) = halves(64, 48);
        let img = img.with_label_map(labels).unwrap();
        let mut params: ParameterSet<f32> =
            init_parameters(&ArchitectureConfig::tiny(), 1).unwrap();
        // zero every weight so only the final bias reaches the output
        for b in &mut params.blocks {
            if !b.name.ends_with(".bias") {
                b.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let enc = Embedder::Encoder {
            name: "const",
            params: &params,
        };
        let res = evaluate(&[img], &[enc, Embedder::RawPixels], &EvalConfig::default()).unwrap();
        assert_eq!(res[0].auc, 0.5);
        assert_eq!(
            (res[0].n_same, res[0].n_diff),
            (res[1].n_same, res[1].n_diff)
        );
    }

    #[test]
    fn missing_label_map_names_the_image() {
        let (img, _) = halves(32, 32);
        match evaluate(&[img], &[Embedder::RawPixels], &EvalConfig::default()) {
            Err(Error::MissingLabelMap(id)) => assert_eq!(id, "halves"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn roc_dump_has_header_and_endpoints() {
        let pts = roc_points(&[0.1, 0.4], &[0.2, 0.4, 0.9]);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert!(format_roc(&pts).starts_with("# fpr\ttpr\n"));
    }

    proptest! {
        #[test]
        fn auc_matches_counting_and_trapezoids(
            seed in any::<u64>(),
            ns in 1usize..60,
            nd in 1usize..60,
            levels in 2u32..12,
        ) {
            let mut rng = seed::rng(seed);
            // coarse levels force plenty of ties
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect()
            };
            let same = draw(ns);
            let diff = draw(nd);
            let a = auc(&same, &diff).unwrap();
            prop_assert!((a - brute(&same, &diff)).abs() < 1e-12);
            prop_assert!((a - trapezoid_area(&roc_points(&same, &diff))).abs() < 1e-12);
            prop_assert!((auc(&diff, &same).unwrap() - (1.0 - a)).abs() < 1e-12);
            let warped = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() + 1.0).collect::<Vec<_>>();
            prop_assert_eq!(auc(&warped(&same), &warped(&diff)).unwrap(), a);
        }
    }
}
