//! Procedural test corpora with exact ground-truth segments.
//!
//! "Natural" images are Voronoi mosaics of textured regions (flat colour,
//! oriented stripes, checkers, fine grain). Object images place one elliptical
//! object, drawn from a shared texture family, in the middle of a textured
//! background. Labels are exact, so evaluation needs no annotation.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus_io::{
    save_label_map, save_rgb_png, write_manifest, ImageRecord, LabelMap, ManifestEntry,
};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

/// Label of the object in [`object_corpus`] images.
pub const OBJECT_LABEL: u32 = 1;

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Flat,
    Stripes { fx: f32, fy: f32, phase: f32 },
    Checker { period: f32, ox: f32, oy: f32 },
    Grain,
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    base: [f32; 3],
    accent: [f32; 3],
    pattern: Pattern,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = [0; 3].map(|_| rng.random_range(0.15..0.85f32));
        let amp = rng.random_range(0.12..0.3f32);
        let accent = [0; 3].map(|_| amp * rng.random_range(-1.0..1.0f32));
        let pattern = match rng.random_range(0..4) {
            0 => Pattern::Flat,
            1 => {
                let angle = rng.random_range(0.0..PI);
                let freq = 2.0 * PI / rng.random_range(4.0..12.0f32);
                Pattern::Stripes {
                    fx: freq * angle.cos(),
                    fy: freq * angle.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            }
            2 => Pattern::Checker {
                period: rng.random_range(3.0..9.0f32),
                ox: rng.random_range(0.0..10.0),
                oy: rng.random_range(0.0..10.0),
            },
            _ => Pattern::Grain,
        };
        Self {
            base,
            accent,
            pattern,
        }
    }

    /// Shared family for object images: warm hues with stripes near one
    /// orientation.
    fn object(rng: &mut ChaCha8Rng) -> Self {
        let base = [
            rng.random_range(0.45..0.65f32),
            rng.random_range(0.25..0.4f32),
            rng.random_range(0.1..0.22f32),
        ];
        let angle = rng.random_range(0.35..0.65f32) * PI;
        let freq = 2.0 * PI / rng.random_range(5.0..7.0f32);
        Self {
            base,
            accent: [0.2, 0.12, 0.05],
            pattern: Pattern::Stripes {
                fx: freq * angle.cos(),
                fy: freq * angle.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
            },
        }
    }

    fn sample(&self, r: usize, c: usize, rng: &mut ChaCha8Rng) -> [f32; 3] {
        let (y, x) = (r as f32, c as f32);
        let s = match self.pattern {
            Pattern::Flat => 0.0,
            Pattern::Stripes { fx, fy, phase } => (fx * x + fy * y + phase).sin(),
            Pattern::Checker { period, ox, oy } => {
                let a = ((x + ox) / period).floor() as i64 + ((y + oy) / period).floor() as i64;
                if a.rem_euclid(2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Pattern::Grain => rng.random_range(-1.0..1.0f32),
        };
        std::array::from_fn(|k| self.base[k] + self.accent[k] * s)
    }
}

fn render(
    width: usize,
    height: usize,
    labels: &[u32],
    textures: &[Texture],
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let mut pixels = Vec::with_capacity(width * height * 3);
    for r in 0..height {
        for c in 0..width {
            let px = textures[labels[r * width + c] as usize].sample(r, c, rng);
            for v in px {
                pixels.push((v + rng.random_range(-0.02..0.02f32)).clamp(0.0, 1.0));
            }
        }
    }
    pixels
}

/// Voronoi mosaic of 3 to 6 textured regions with wavy borders; the label map holds the
/// region index.
pub fn natural_image(id: &str, width: usize, height: usize, image_seed: u64) -> ImageRecord {
    let mut rng = seed::rng(image_seed);
    let k = rng.random_range(3..=6);
    let sites: Vec<(f32, f32)> = (0..k)
        .map(|_| {
            (
                rng.random_range(0.0..height as f32),
                rng.random_range(0.0..width as f32),
            )
        })
        .collect();
    let wobble = rng.random_range(2.0..8.0f32);
    let wave = 2.0 * PI / rng.random_range(30.0..70.0f32);
    let mut labels: Vec<u32> = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let y = r as f32 + wobble * (c as f32 * wave).sin();
            let x = c as f32 + wobble * (r as f32 * wave).cos();
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (sy - y).powi(2) + (sx - x).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            labels.push(nearest as u32);
        }
    }
    let textures: Vec<Texture> = (0..k).map(|_| Texture::random(&mut rng)).collect();
    let pixels = render(width, height, &labels, &textures, &mut rng);
    let lm = compact(LabelMap::new(width, height, labels).expect("sized"));
    ImageRecord::new(id, width, height, pixels)
        .and_then(|r| r.with_label_map(lm))
        .expect("consistent synthetic image")
}

/// One object (label 1) on a background of one or two regions (labels 0
/// and 2).
pub fn object_image(id: &str, width: usize, height: usize, image_seed: u64) -> ImageRecord {
    let mut rng = seed::rng(image_seed);
    let (h, w) = (height as f32, width as f32);
    let cy = h / 2.0 + rng.random_range(-0.08..0.08) * h;
    let cx = w / 2.0 + rng.random_range(-0.08..0.08) * w;
    let ry = rng.random_range(0.24..0.34) * h;
    let rx = rng.random_range(0.28..0.38) * w;
    let split_angle = rng.random_range(0.0..PI);
    let two_part = rng.random_bool(0.5);
    let (sn, cs) = split_angle.sin_cos();
    let mut labels = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let (dy, dx) = (r as f32 - cy, c as f32 - cx);
            let label = if (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0 {
                OBJECT_LABEL
            } else if two_part && dx * cs + dy * sn > 0.0 {
                2
            } else {
                0
            };
            labels.push(label);
        }
    }
    let textures = [
        Texture::random(&mut rng),
        Texture::object(&mut rng),
        Texture::random(&mut rng),
    ];
    let pixels = render(width, height, &labels, &textures, &mut rng);
    let lm = LabelMap::new(width, height, labels)
        .and_then(|l| l.with_foreground(OBJECT_LABEL))
        .expect("object present");
    ImageRecord::new(id, width, height, pixels)
        .and_then(|r| r.with_label_map(lm))
        .expect("consistent synthetic image")
}

/// Renumber labels to 0..n in order of first appearance.
fn compact(mut lm: LabelMap) -> LabelMap {
    let mut map = std::collections::HashMap::new();
    for l in &mut lm.labels {
        let next = map.len() as u32;
        *l = *map.entry(*l).or_insert(next);
    }
    lm
}

pub fn natural_corpus(n: usize, width: usize, height: usize, corpus_seed: u64) -> Vec<ImageRecord> {
    (0..n)
        .map(|i| {
            natural_image(
                &format!("nat{i:04}"),
                width,
                height,
                seed::derive(corpus_seed, &[tag::SYNTH, i as u64]),
            )
        })
        .collect()
}

pub fn object_corpus(n: usize, width: usize, height: usize, corpus_seed: u64) -> Vec<ImageRecord> {
    (0..n)
        .map(|i| {
            object_image(
                &format!("obj{i:04}"),
                width,
                height,
                seed::derive(corpus_seed, &[tag::SYNTH, 1 << 32, i as u64]),
            )
        })
        .collect()
}

/// Write images (and label maps when `with_labels`) under `dir` and return
/// the manifest path.
pub fn write_corpus(dir: &Path, records: &[ImageRecord], with_labels: bool) -> Result<PathBuf> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    if with_labels {
        fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    }
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        let image_path = images.join(format!("{}.png", rec.image_id));
        save_rgb_png(&image_path, rec.width, rec.height, &rec.pixels)?;
        let (label_map_path, foreground_label) = match (&rec.label_map, with_labels) {
            (Some(lm), true) => {
                let p = labels.join(format!("{}.png", rec.image_id));
                save_label_map(&p, lm)?;
                (Some(p), lm.foreground_label)
            }
            _ => (None, None),
        };
        entries.push(ManifestEntry {
            image_path,
            label_map_path,
            foreground_label,
        });
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::load_manifest;

    #[test]
    fn deterministic_and_labelled() {
        let a = natural_corpus(3, 64, 48, 1);
        let b = natural_corpus(3, 64, 48, 1);
        assert_eq!(a, b);
        for r in &a {
            let lm = r.label_map.as_ref().unwrap();
            assert!(lm.distinct().len() >= 2);
            assert!(r.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let o = object_corpus(2, 96, 96, 3);
        for r in &o {
            let lm = r.label_map.as_ref().unwrap();
            assert_eq!(lm.foreground_label, Some(OBJECT_LABEL));
            assert!(lm.labels[48 * 96 + 48] == OBJECT_LABEL);
        }
    }

    #[test]
    fn written_corpus_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let recs = object_corpus(2, 64, 64, 4);
        let manifest = write_corpus(dir.path(), &recs, true).unwrap();
        let back = load_manifest(&manifest).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(
                a.label_map.as_ref().unwrap().labels,
                b.label_map.as_ref().unwrap().labels
            );
            assert_eq!(
                a.label_map.as_ref().unwrap().foreground_label,
                Some(OBJECT_LABEL)
            );
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
