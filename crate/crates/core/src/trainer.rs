//! Triplet-loss training with hard-example filtering.

use std::fmt::Write as _;
use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus_io::{save_checkpoint, Checkpoint, ImageRecord, TrainingMeta};
use crate::embedding_net::{
    backward_cached, forward, forward_cached, Embeddings, Gradients, ParameterSet, Real,
};
use crate::error::{Error, Result};
use crate::patch_sampler::{
    extract_batch, plan_epoch_from, ImageTriplet, SamplerConfig, TripletSource,
};
use crate::seed::{self, tag};

/// Triplets per parallel work unit.
const TRIPLET_CHUNK: usize = 32;

/// `max(0, ‖c − n‖² − ‖c − f‖² + margin)`.
pub fn triplet_loss<T: Real>(current: &[T], near: &[T], far: &[T], margin: T) -> Result<T> {
    if current.len() != near.len() || current.len() != far.len() {
        return Err(Error::Shape("triplet embeddings differ in length".into()));
    }
    let (mut dn, mut df) = (T::zero(), T::zero());
    for ((&c, &n), &f) in current.iter().zip(near).zip(far) {
        if !(c.is_finite() && n.is_finite() && f.is_finite()) {
            return Err(Error::NonFinite("triplet embedding".into()));
        }
        dn = dn + (c - n) * (c - n);
        df = df + (c - f) * (c - f);
    }
    Ok((dn - df + margin).max(T::zero()))
}

/// Loss of one triplet and, when positive, its gradient with respect to the
/// three embeddings, written into `grad` as `[d/dc | d/dn | d/df]`.
fn triplet_loss_grad<T: Real>(c: &[T], n: &[T], f: &[T], margin: T, grad: &mut [T]) -> Result<T> {
    let loss = triplet_loss(c, n, f, margin)?;
    let d = c.len();
    if loss > T::zero() {
        let two = T::of(2.0);
        for i in 0..d {
            grad[i] = two * (f[i] - n[i]);
            grad[d + i] = two * (n[i] - c[i]);
            grad[2 * d + i] = two * (c[i] - f[i]);
        }
    } else {
        grad.iter_mut().for_each(|g| *g = T::zero());
    }
    Ok(loss)
}

/// Per-triplet losses for embeddings laid out as consecutive
/// (current, near, far) rows.
pub fn triplet_losses<T: Real>(embeddings: &Embeddings<T>, margin: T) -> Result<Vec<T>> {
    if embeddings.len() % 3 != 0 {
        return Err(Error::Shape(format!(
            "{} embeddings do not form whole triplets",
            embeddings.len()
        )));
    }
    (0..embeddings.len() / 3)
        .map(|t| {
            triplet_loss(
                embeddings.row(3 * t),
                embeddings.row(3 * t + 1),
                embeddings.row(3 * t + 2),
                margin,
            )
        })
        .collect()
}

/// The triplets that still violate the margin, in their original order.
pub fn hard_negative_filter<I: Clone, T: Real>(
    triplets: &[I],
    embeddings: &Embeddings<T>,
    margin: T,
) -> Result<Vec<I>> {
    let losses = triplet_losses(embeddings, margin)?;
    if losses.len() != triplets.len() {
        return Err(Error::Shape(format!(
            "{} triplets but {} embedded triplets",
            triplets.len(),
            losses.len()
        )));
    }
    Ok(triplets
        .iter()
        .zip(losses)
        .filter(|(_, l)| *l > T::zero())
        .map(|(t, _)| t.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub heldout: Option<f64>,
}

/// Mean loss per epoch. Entry 0 is measured before the first update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub entries: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn initial(&self) -> Option<&EpochLoss> {
        self.entries.first()
    }

    pub fn last(&self) -> Option<&EpochLoss> {
        self.entries.last()
    }

    /// Tab-separated `epoch train_loss heldout_loss`, `NA` when there is no
    /// held-out split.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# epoch\ttrain_loss\theldout_loss\n");
        for e in &self.entries {
            let held = e
                .heldout
                .map_or_else(|| "NA".to_string(), |h| h.to_string());
            let _ = writeln!(out, "{}\t{}\t{}", e.epoch, e.train, held);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = || Error::InvalidInput(format!("loss trace line {}: `{line}`", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            entries.push(EpochLoss {
                epoch: f[0].parse().map_err(|_| bad())?,
                train: f[1].parse().map_err(|_| bad())?,
                heldout: match f[2] {
                    "NA" => None,
                    v => Some(v.parse().map_err(|_| bad())?),
                },
            });
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub margin: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub hard_mining: bool,
    /// Fraction of images kept out of training for the held-out curve.
    pub heldout_fraction: f64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub sampler: SamplerConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            epochs: 1600,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            hard_mining: true,
            heldout_fraction: 0.05,
            checkpoint_every: 0,
            checkpoint_dir: None,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Field-level diagnostics; empty when valid.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.sampler.validate();
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            errs.push(format!("train.margin must be > 0, got {}", self.margin));
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            errs.push("train.epsilon must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            errs.push(format!(
                "train.heldout_fraction must be in [0, 1), got {}",
                self.heldout_fraction
            ));
        }
        errs
    }

    fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Adaptive-moment gradient descent on `f32` parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParameterSet<f32>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .blocks
            .iter()
            .map(|b| vec![0.0; b.data.len()])
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((block, g), m), v) in params
            .blocks
            .iter_mut()
            .zip(&grads.blocks)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in block.data.iter_mut().zip(g).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Per-triplet losses and the gradient of their sum for patches laid out as
/// consecutive (current, near, far) blocks. Runs on the calling thread.
pub fn triplet_objective<T: Real>(
    params: &ParameterSet<T>,
    patches: &[f32],
    margin: T,
) -> Result<(Gradients<T>, Vec<T>)> {
    let dim = params.arch.embedding_dim;
    let (emb, cache) = forward_cached(params, patches)?;
    if emb.len() % 3 != 0 {
        return Err(Error::Shape(format!(
            "{} patches do not form whole triplets",
            emb.len()
        )));
    }
    let mut upstream = vec![T::zero(); emb.data.len()];
    let losses = upstream
        .chunks_mut(3 * dim)
        .enumerate()
        .map(|(t, up)| {
            triplet_loss_grad(
                emb.row(3 * t),
                emb.row(3 * t + 1),
                emb.row(3 * t + 2),
                margin,
                up,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let grads = backward_cached(params, &cache, &upstream)?;
    Ok((grads, losses))
}

/// Summed loss gradient and per-triplet losses over a batch, evaluated in
/// fixed-size chunks and reduced in order.
pub fn batch_gradient(
    params: &ParameterSet<f32>,
    corpus: &[ImageRecord],
    triplets: &[ImageTriplet],
    margin: f32,
) -> Result<(Gradients<f32>, Vec<f32>)> {
    let parts: Vec<Result<(Gradients<f32>, Vec<f32>)>> = triplets
        .par_chunks(TRIPLET_CHUNK)
        .map(|chunk| triplet_objective(params, &extract_batch(corpus, chunk), margin))
        .collect();
    let mut total = params.zero_gradients();
    let mut losses = Vec::with_capacity(triplets.len());
    for part in parts {
        let (g, l) = part?;
        total.add_assign(&g);
        losses.extend(l);
    }
    Ok((total, losses))
}

/// Mean triplet loss under `params` without computing gradients.
pub fn mean_loss(
    params: &ParameterSet<f32>,
    corpus: &[ImageRecord],
    triplets: &[ImageTriplet],
    margin: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::InvalidInput("no triplets to evaluate".into()));
    }
    let mut sum = 0.0f64;
    for chunk in triplets.chunks(512) {
        let emb = forward(params, &extract_batch(corpus, chunk))?;
        sum += triplet_losses(&emb, margin as f32)?
            .iter()
            .map(|&l| l as f64)
            .sum::<f64>();
    }
    Ok(sum / triplets.len() as f64)
}

/// Deterministic train / held-out partition of `n` images.
pub fn split_corpus(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let held = if fraction > 0.0 && n >= 2 {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng_for(seed, &[tag::SPLIT]));
    let mut heldout = idx[..held].to_vec();
    let mut train = idx[held..].to_vec();
    heldout.sort_unstable();
    train.sort_unstable();
    (train, heldout)
}

/// Source of fresh random triplets used to top batches back up after hard
/// filtering.
struct Replacements<'a> {
    corpus: &'a [ImageRecord],
    source: &'a dyn TripletSource,
    batch_size: usize,
    seed: u64,
    round: u64,
    pool: Vec<ImageTriplet>,
}

impl Replacements<'_> {
    fn take(&mut self, count: usize) -> Result<Vec<ImageTriplet>> {
        while self.pool.len() < count {
            let plan = plan_epoch_from(
                self.source,
                self.corpus,
                self.batch_size,
                seed::derive(self.seed, &[tag::REPLACEMENT, self.round]),
                0,
            )?;
            self.round += 1;
            self.pool.extend(plan.triplets().rev().copied());
        }
        Ok(self.pool.split_off(self.pool.len() - count))
    }
}

/// Optimize the triplet objective. Returns the final parameters and a trace
/// whose entry 0 holds the losses before any update.
pub fn train(
    corpus: &[ImageRecord],
    config: &TrainingConfig,
    initial: ParameterSet<f32>,
) -> Result<(ParameterSet<f32>, LossTrace)> {
    train_with(corpus, config, initial, &config.sampler)
}

/// [`train`] on triplets from an arbitrary source.
pub fn train_with(
    corpus: &[ImageRecord],
    config: &TrainingConfig,
    initial: ParameterSet<f32>,
    source: &dyn TripletSource,
) -> Result<(ParameterSet<f32>, LossTrace)> {
    config.check()?;
    let epochs = config.epochs;
    let batch_size = config.sampler.batch_size;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let (train_idx, held_idx) = split_corpus(corpus.len(), config.heldout_fraction, config.seed);
    let train_set: Vec<ImageRecord> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
    let held_set: Vec<ImageRecord> = held_idx.iter().map(|&i| corpus[i].clone()).collect();
    info!(
        "training on {} images, {} held out, {} epochs",
        train_set.len(),
        held_set.len(),
        epochs
    );

    let margin = config.margin;
    let held_plan: Vec<ImageTriplet> = if held_set.is_empty() {
        Vec::new()
    } else {
        plan_epoch_from(
            source,
            &held_set,
            batch_size,
            seed::derive(config.seed, &[tag::HELDOUT]),
            0,
        )?
        .triplets()
        .copied()
        .collect()
    };
    let heldout_loss = |p: &ParameterSet<f32>| -> Result<Option<f64>> {
        if held_plan.is_empty() {
            Ok(None)
        } else {
            mean_loss(p, &held_set, &held_plan, margin).map(Some)
        }
    };

    let mut params = initial;
    let mut trace = LossTrace::default();
    let first: Vec<ImageTriplet> = plan_epoch_from(source, &train_set, batch_size, config.seed, 0)?
        .triplets()
        .copied()
        .collect();
    trace.entries.push(EpochLoss {
        epoch: 0,
        train: mean_loss(&params, &train_set, &first, margin)?,
        heldout: heldout_loss(&params)?,
    });

    let mut adam = Adam::new(
        &params,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );
    for epoch in 1..=epochs {
        let plan = plan_epoch_from(source, &train_set, batch_size, config.seed, epoch)?;
        let mut replacements = Replacements {
            corpus: &train_set,
            source,
            batch_size,
            seed: seed::derive(config.seed, &[epoch as u64]),
            round: 0,
            pool: Vec::new(),
        };
        let (mut sum, mut count, mut retained) = (0.0f64, 0usize, 0usize);
        for batch in &plan.batches {
            let (mut grads, losses) = batch_gradient(&params, &train_set, batch, margin as f32)?;
            let hard = losses.iter().filter(|&&l| l > 0.0).count();
            retained += hard;
            sum += losses.iter().map(|&l| l as f64).sum::<f64>();
            count += losses.len();
            if config.hard_mining && hard < batch.len() {
                // easy triplets carry zero gradient; refill the batch
                let extra = replacements.take(batch.len() - hard)?;
                let (g, _) = batch_gradient(&params, &train_set, &extra, margin as f32)?;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f32);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
            adam.step(&mut params, &grads);
        }
        let train_loss = sum / count as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
            });
        }
        let entry = EpochLoss {
            epoch,
            train: train_loss,
            heldout: heldout_loss(&params)?,
        };
        info!(
            "epoch {epoch}: train {:.5} heldout {} hard {:.3}",
            entry.train,
            entry.heldout.map_or("NA".into(), |h| format!("{h:.5}")),
            retained as f64 / count as f64
        );
        trace.entries.push(entry);

        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                let ckpt = Checkpoint::new(
                    params.clone(),
                    TrainingMeta {
                        epochs: epoch as u32,
                        seed: config.seed,
                        loss_history: trace.clone(),
                    },
                );
                save_checkpoint(&ckpt, &dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::embedding_net::{init_parameters, ArchitectureConfig};
    use crate::patch_sampler::plan_epoch;
    use crate::synth;

    fn unit(d: usize, axis: usize, sign: f64) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[axis] = sign;
        v
    }

    #[test]
    fn loss_examples() {
        let e = unit(128, 0, 1.0);
        assert_eq!(triplet_loss(&e, &e, &e, 0.2).unwrap(), 0.2);
        let orth = unit(128, 1, 1.0);
        assert_eq!(triplet_loss(&e, &e, &orth, 0.2).unwrap(), 0.0);
        let opposite = unit(128, 0, -1.0);
        assert_eq!(triplet_loss(&e, &orth, &opposite, 0.2).unwrap(), 0.0);
        let orth2 = unit(128, 2, 1.0);
        assert!((triplet_loss(&e, &orth, &orth2, 0.2).unwrap() - 0.2).abs() < 1e-15);
        assert!(triplet_loss(&[f64::NAN], &[0.0], &[0.0], 0.2).is_err());
    }

    #[test]
    fn filter_keeps_exactly_positive_losses() {
        // losses {0, 0.2, 0, 0.05} with margin 0.2 on 2D unit vectors
        let m = 0.2f64;
        let c = [1.0, 0.0];
        let far_for = |target: f64| -> [f64; 2] {
            // d_f² = m − target with near = current
            let df2 = m - target;
            let cos = 1.0 - df2 / 2.0;
            [cos, (1.0 - cos * cos).sqrt()]
        };
        let rows = [
            (c, c, [-1.0, 0.0]),
            (c, c, c),
            (c, c, [0.0, 1.0]),
            (c, c, far_for(0.05)),
        ];
        let mut data = Vec::new();
        for (a, b, f) in rows {
            data.extend(a);
            data.extend(b);
            data.extend(f);
        }
        let emb = Embeddings { dim: 2, data };
        let losses = triplet_losses(&emb, m).unwrap();
        assert_eq!(losses[0], 0.0);
        assert!((losses[1] - 0.2).abs() < 1e-12);
        assert_eq!(losses[2], 0.0);
        assert!((losses[3] - 0.05).abs() < 1e-12);
        let kept = hard_negative_filter(&[1, 2, 3, 4], &emb, m).unwrap();
        assert_eq!(kept, [2, 4]);

        let easy = Embeddings {
            dim: 2,
            data: vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0],
        };
        assert!(hard_negative_filter(&["t"], &easy, m).unwrap().is_empty());
    }

    #[test]
    fn fresh_encoder_keeps_most_triplets() {
        let corpus = synth::natural_corpus(4, 160, 160, 5);
        let params = init_parameters::<f32>(&ArchitectureConfig::default(), 5).unwrap();
        let plan = plan_epoch(&corpus, &SamplerConfig::default(), 5, 0).unwrap();
        let ts: Vec<_> = plan.triplets().copied().collect();
        let emb = forward(&params, &extract_batch(&corpus, &ts)).unwrap();
        let kept = hard_negative_filter(&ts, &emb, 0.2).unwrap();
        let frac = kept.len() as f64 / ts.len() as f64;
        assert!(frac >= 0.9, "retained fraction {frac}");
    }

    #[test]
    fn one_step_reduces_a_positive_loss() {
        let corpus = synth::natural_corpus(1, 200, 200, 1);
        let mut params = init_parameters::<f32>(&ArchitectureConfig::tiny(), 3).unwrap();
        let plan = plan_epoch(&corpus, &SamplerConfig::default(), 2, 0).unwrap();
        let t = *plan
            .triplets()
            .find(|t| mean_loss(&params, &corpus, &[**t], 0.2).unwrap() > 0.0)
            .expect("a triplet with positive loss");
        let before = mean_loss(&params, &corpus, &[t], 0.2).unwrap();
        let (grads, _) = batch_gradient(&params, &corpus, &[t], 0.2).unwrap();
        let mut adam = Adam::new(&params, 1e-3, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &grads);
        let after = mean_loss(&params, &corpus, &[t], 0.2).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn config_validation() {
        let bad = TrainingConfig {
            epochs: 0,
            margin: 0.0,
            learning_rate: -1.0,
            ..TrainingConfig::default()
        };
        let errs = bad.validate();
        assert!(errs.iter().any(|e| e.contains("train.epochs")));
        assert!(errs.iter().any(|e| e.contains("train.margin")));
        assert!(errs.iter().any(|e| e.contains("train.learning_rate")));
        assert!(TrainingConfig::default().validate().is_empty());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (t, h) = split_corpus(53, 0.05, 9);
        assert_eq!((t.len(), h.len()), (50, 3));
        assert!(h.iter().all(|i| !t.contains(i)));
        assert_eq!(split_corpus(53, 0.05, 9), (t, h));
        assert_eq!(split_corpus(1, 0.05, 9).1.len(), 0);
        assert_eq!(split_corpus(10, 0.0, 9).1.len(), 0);
    }

    #[test]
    fn trace_text_round_trip() {
        let trace = LossTrace {
            entries: vec![
                EpochLoss {
                    epoch: 0,
                    train: 0.2,
                    heldout: Some(0.1999999),
                },
                EpochLoss {
                    epoch: 1,
                    train: 0.123456789012345,
                    heldout: None,
                },
            ],
        };
        assert_eq!(LossTrace::from_text(&trace.to_text()).unwrap(), trace);
    }

    #[test]
    fn short_training_run_is_reproducible() {
        let corpus = synth::natural_corpus(4, 200, 200, 2);
        let config = TrainingConfig {
            epochs: 2,
            seed: 4,
            sampler: SamplerConfig {
                triplets_per_image: 12,
                batch_size: 16,
                ..SamplerConfig::default()
            },
            ..TrainingConfig::default()
        };
        let init = init_parameters(&ArchitectureConfig::tiny(), 1).unwrap();
        let (p1, t1) = train(&corpus, &config, init.clone()).unwrap();
        let (p2, t2) = train(&corpus, &config, init.clone()).unwrap();
        assert_eq!(t1.to_text(), t2.to_text());
        assert_eq!(p1, p2);
        assert_eq!(t1.entries.len(), 3);
        assert!(t1
            .entries
            .iter()
            .all(|e| e.train >= 0.0 && e.heldout.unwrap() >= 0.0));
        assert_ne!(p1, init);
    }

    proptest! {
        #[test]
        fn loss_depends_only_on_distances(seed in any::<u64>()) {
            let mut rng = seed::rng(seed);
            let mut unit_vec = |d: usize| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect::<Vec<_>>()
            };
            let (c, n, f) = (unit_vec(16), unit_vec(16), unit_vec(16));
            let l = triplet_loss(&c, &n, &f, 0.2).unwrap();
            prop_assert!((0.0..=4.2).contains(&l));
            let dn: f64 = c.iter().zip(&n).map(|(a, b)| (a - b).powi(2)).sum();
            let df: f64 = c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum();
            if df >= dn + 0.2 { prop_assert_eq!(l, 0.0) } else { prop_assert!(l > 0.0) }
            // sign flip of one coordinate is an orthogonal map
            let flip = |v: &Vec<f64>| { let mut w = v.clone(); w[3] = -w[3]; w };
            let l2 = triplet_loss(&flip(&c), &flip(&n), &flip(&f), 0.2).unwrap();
            prop_assert!((l - l2).abs() < 1e-12);
        }
    }
}
