//! Image corpora, label maps and encoder checkpoints on disk.
//!
//! A manifest lists one image per line:
//!
//! ```text
//! # comment
//! images/a.png
//! images/b.png<TAB>labels/b.png
//! images/c.png<TAB>labels/c.png<TAB>foreground=1
//! ```
//!
//! Paths are relative to the manifest's directory. Label maps are
//! single-channel 8- or 16-bit PNGs whose pixel value is the segment id.

pub(crate) mod checkpoint;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TrainingMeta,
    CHECKPOINT_MAGIC, FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::{CHANNELS, PATCH_LEN, PATCH_SIZE};

/// An RGB image with values in `[0, 1]`, stored row-major as `H·W·3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub label_map_ref: Option<PathBuf>,
    pub label_map: Option<LabelMap>,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("image `{image_id}` is empty")));
        }
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::Shape(format!(
                "image `{image_id}`: {} values for {width}x{height}x{CHANNELS}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "image `{image_id}` has pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            image_id,
            width,
            height,
            pixels,
            label_map_ref: None,
            label_map: None,
        })
    }

    /// Attach a label map, checking that its size matches.
    pub fn with_label_map(mut self, labels: LabelMap) -> Result<Self> {
        if labels.width != self.width || labels.height != self.height {
            return Err(Error::DimensionMismatch {
                image_id: self.image_id,
                width: self.width,
                height: self.height,
                label_width: labels.width,
                label_height: labels.height,
            });
        }
        self.label_map = Some(labels);
        Ok(self)
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Copy the 16×16 window with top-left corner `(row, col)` into `out`.
    pub fn copy_patch(&self, row: usize, col: usize, out: &mut [f32]) {
        assert!(row + PATCH_SIZE <= self.height && col + PATCH_SIZE <= self.width);
        assert_eq!(out.len(), PATCH_LEN);
        let line = PATCH_SIZE * CHANNELS;
        for r in 0..PATCH_SIZE {
            let src = ((row + r) * self.width + col) * CHANNELS;
            out[r * line..(r + 1) * line].copy_from_slice(&self.pixels[src..src + line]);
        }
    }

    pub fn patch(&self, row: usize, col: usize) -> Vec<f32> {
        let mut out = vec![0.0; PATCH_LEN];
        self.copy_patch(row, col, &mut out);
        out
    }
}

/// Per-pixel segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub foreground_label: Option<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Shape(format!(
                "label map of {} values for {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
            foreground_label: None,
        })
    }

    pub fn with_foreground(mut self, label: u32) -> Result<Self> {
        if !self.labels.contains(&label) {
            return Err(Error::InvalidInput(format!(
                "foreground label {label} does not occur in the label map"
            )));
        }
        self.foreground_label = Some(label);
        Ok(self)
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Sorted distinct ids.
    pub fn distinct(&self) -> Vec<u32> {
        let mut ids = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Label of the 16×16 window at `(row, col)` if every pixel in it shares
    /// one label.
    pub fn uniform_patch_label(&self, row: usize, col: usize) -> Option<u32> {
        if row + PATCH_SIZE > self.height || col + PATCH_SIZE > self.width {
            return None;
        }
        let first = self.get(row, col);
        (row..row + PATCH_SIZE)
            .all(|r| {
                self.labels[r * self.width + col..r * self.width + col + PATCH_SIZE]
                    .iter()
                    .all(|&l| l == first)
            })
            .then_some(first)
    }

    /// Every top-left position whose 16×16 footprint lies inside a single
    /// segment, with that segment's id. Row-major order.
    pub fn uniform_patch_positions(&self) -> Vec<(usize, usize, u32)> {
        if self.height < PATCH_SIZE || self.width < PATCH_SIZE {
            return Vec::new();
        }
        // run[r][c]: length of the run of equal labels starting at (r, c) going right
        let mut run = vec![0usize; self.labels.len()];
        for r in 0..self.height {
            let row = &self.labels[r * self.width..(r + 1) * self.width];
            let mut len = 0;
            for c in (0..self.width).rev() {
                len = if c + 1 < self.width && row[c] == row[c + 1] {
                    len + 1
                } else {
                    1
                };
                run[r * self.width + c] = len;
            }
        }
        let mut out = Vec::new();
        for r in 0..=self.height - PATCH_SIZE {
            for c in 0..=self.width - PATCH_SIZE {
                let label = self.get(r, c);
                let ok = (r..r + PATCH_SIZE).all(|rr| {
                    let i = rr * self.width + c;
                    self.labels[i] == label && run[i] >= PATCH_SIZE
                });
                if ok {
                    out.push((r, c, label));
                }
            }
        }
        out
    }
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub label_map_path: Option<PathBuf>,
    pub foreground_label: Option<u32>,
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let malformed = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() > 3 {
            return Err(malformed(format!(
                "expected at most 3 fields, found {}",
                fields.len()
            )));
        }
        let image = fields[0].trim();
        if image.is_empty() {
            return Err(malformed("empty image path".into()));
        }
        let label = fields.get(1).map(|s| s.trim()).filter(|s| !s.is_empty());
        let foreground = match fields.get(2).map(|s| s.trim()).filter(|s| !s.is_empty()) {
            None => None,
            Some(spec) => {
                if label.is_none() {
                    return Err(malformed("foreground given without a label map".into()));
                }
                let id = spec
                    .strip_prefix("foreground=")
                    .and_then(|v| v.parse::<u32>().ok())
                    .ok_or_else(|| malformed(format!("expected foreground=<id>, got `{spec}`")))?;
                Some(id)
            }
        };
        entries.push(ManifestEntry {
            image_path: base.join(image),
            label_map_path: label.map(|l| base.join(l)),
            foreground_label: foreground,
        });
    }
    Ok(entries)
}

/// Load every image listed in a manifest, in file order. Label maps are
/// loaded and checked against their image.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let entries = parse_manifest(path)?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut record = load_image(&entry.image_path)?;
        if !seen.insert(record.image_id.clone()) {
            return Err(Error::InvalidInput(format!(
                "{}: duplicate image_id `{}`",
                path.display(),
                record.image_id
            )));
        }
        if let Some(label_path) = &entry.label_map_path {
            let mut labels = load_label_map(label_path)?;
            if let Some(fg) = entry.foreground_label {
                labels = labels.with_foreground(fg).map_err(|_| {
                    Error::InvalidInput(format!(
                        "image `{}`: foreground label {fg} does not occur in {}",
                        record.image_id,
                        label_path.display()
                    ))
                })?;
            }
            record = record.with_label_map(labels)?;
            record.label_map_ref = Some(label_path.clone());
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut text = String::from("# image_path\tlabel_map_path\tforeground=<id>\n");
    for e in entries {
        text.push_str(&rel(&e.image_path));
        if let Some(l) = &e.label_map_path {
            text.push('\t');
            text.push_str(&rel(l));
            if let Some(fg) = e.foreground_label {
                text.push_str(&format!("\tforeground={fg}"));
            }
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Decode a PNG or JPEG; grayscale is replicated to three channels.
pub fn load_image(path: &Path) -> Result<ImageRecord> {
    let img = decode(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    let pixels: Vec<f32> = img
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    ImageRecord::new(id, w as usize, h as usize, pixels)
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels: Vec<u32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("label map must be single-channel, got {:?}", other.color()),
            })
        }
    };
    LabelMap::new(w, h, labels)
}

/// Write a label map as a 16-bit grayscale PNG.
pub fn save_label_map(path: &Path, labels: &LabelMap) -> Result<()> {
    if let Some(max) = labels.labels.iter().max().filter(|&&m| m > u16::MAX as u32) {
        return Err(Error::InvalidInput(format!(
            "label {max} does not fit in 16 bits"
        )));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        labels.width as u32,
        labels.height as u32,
        labels.labels.iter().map(|&l| l as u16).collect(),
    )
    .expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write `H·W·3` values in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        width as u32,
        height as u32,
        rgb.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    )
    .expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Vec<f32> {
        (0..w * h * 3).map(|i| (i % 256) as f32 / 255.0).collect()
    }

    fn write_png(dir: &Path, name: &str, w: usize, h: usize) -> PathBuf {
        let p = dir.join(name);
        save_rgb_png(&p, w, h, &gradient_image(w, h)).unwrap();
        p
    }

    #[test]
    fn manifest_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_png(dir.path(), "a.png", 20, 18);
        let b = write_png(dir.path(), "b.png", 17, 16);
        let c = write_png(dir.path(), "c.png", 30, 30);
        let labels = LabelMap::new(17, 16, (0..17 * 16).map(|i| (i % 3) as u32).collect()).unwrap();
        let lpath = dir.path().join("b_labels.png");
        save_label_map(&lpath, &labels).unwrap();
        let manifest = dir.path().join("m.txt");
        write_manifest(
            &manifest,
            &[
                ManifestEntry {
                    image_path: a,
                    label_map_path: None,
                    foreground_label: None,
                },
                ManifestEntry {
                    image_path: b,
                    label_map_path: Some(lpath.clone()),
                    foreground_label: Some(2),
                },
                ManifestEntry {
                    image_path: c,
                    label_map_path: None,
                    foreground_label: None,
                },
            ],
        )
        .unwrap();
        let records = load_manifest(&manifest).unwrap();
        let ids: Vec<_> = records.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(records[1].label_map_ref.as_deref(), Some(lpath.as_path()));
        let lm = records[1].label_map.as_ref().unwrap();
        assert_eq!(lm.labels, labels.labels);
        assert_eq!(lm.foreground_label, Some(2));
        assert_eq!((records[0].width, records[0].height), (20, 18));
    }

    #[test]
    fn label_map_dimension_mismatch_names_image() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "img7.png", 20, 20);
        let labels = LabelMap::new(19, 20, vec![0; 380]).unwrap();
        save_label_map(&dir.path().join("l.png"), &labels).unwrap();
        let manifest = dir.path().join("m.txt");
        fs::write(&manifest, "img7.png\tl.png\n").unwrap();
        match load_manifest(&manifest) {
            Err(Error::DimensionMismatch { image_id, .. }) => assert_eq!(image_id, "img7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.txt");
        fs::write(&manifest, "# header\n\na.png\tb.png\tforeground=x\n").unwrap();
        match parse_manifest(&manifest) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&manifest, "a\tb\tc\td\n").unwrap();
        assert!(matches!(
            parse_manifest(&manifest),
            Err(Error::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(&dir.path().join("nope.txt")),
            Err(Error::Io { .. })
        ));
        let manifest = dir.path().join("m.txt");
        fs::write(&manifest, "missing.png\n").unwrap();
        assert!(matches!(load_manifest(&manifest), Err(Error::Io { .. })));
        fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        fs::write(&manifest, "junk.png\n").unwrap();
        assert!(matches!(load_manifest(&manifest), Err(Error::Image { .. })));
    }

    #[test]
    fn grayscale_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_fn(4, 3, |x, y| Luma([(x * 40 + y) as u8]));
        buf.save(&p).unwrap();
        let rec = load_image(&p).unwrap();
        let px = rec.pixel(2, 3);
        assert_eq!(px[0], px[1]);
        assert_eq!(px[1], px[2]);
        assert!((px[0] - 122.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn sixteen_bit_label_ids_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let lm = LabelMap::new(3, 1, vec![0, 300, 65535]).unwrap();
        save_label_map(&p, &lm).unwrap();
        assert_eq!(load_label_map(&p).unwrap(), lm);
    }

    #[test]
    fn uniform_positions_match_brute_force() {
        let (w, h) = (40, 35);
        let labels: Vec<u32> = (0..w * h)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                u32::from(c > 20) + 2 * u32::from(r > 25 && c < 10)
            })
            .collect();
        let lm = LabelMap::new(w, h, labels).unwrap();
        let fast = lm.uniform_patch_positions();
        let mut slow = Vec::new();
        for r in 0..=h - 16 {
            for c in 0..=w - 16 {
                if let Some(l) = lm.uniform_patch_label(r, c) {
                    slow.push((r, c, l));
                }
            }
        }
        assert_eq!(fast, slow);
        assert!(!fast.is_empty());
    }

    #[test]
    fn record_invariants() {
        assert!(ImageRecord::new("x", 0, 3, vec![]).is_err());
        assert!(ImageRecord::new("x", 1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageRecord::new("x", 1, 1, vec![0.0, 1.0]).is_err());
        let lm = LabelMap::new(2, 1, vec![0, 1]).unwrap();
        assert!(lm.clone().with_foreground(3).is_err());
        assert_eq!(lm.with_foreground(1).unwrap().foreground_label, Some(1));
    }
}
