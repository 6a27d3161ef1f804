//! Synthetic ordinal image data, the DOLD binary dataset format, splits,
//! and flip augmentation.
//!
//! Synthetic images encode their grade as a spatial frequency: grade g
//! draws pixel (p, q) from 0.5 + 0.4 sin(2π g (p+q)/S + φ) plus Gaussian
//! noise, so higher grades oscillate faster and the classes carry a
//! genuine ordinal structure.

use crate::error::{Error, Result};
use crate::pairing::OrdinalLabel;
use crate::rng::{substream, substream_indexed};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const DOLD_MAGIC: &[u8; 4] = b"DOLD";
pub const DOLD_VERSION: u16 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Per sample: channel-major, then row-major pixel values in [0, 1].
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<OrdinalLabel>,
    pub n_classes: u8,
    pub channels: u8,
    pub height: u16,
    pub width: u16,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: u8,
    pub per_class: usize,
    pub image_size: u16,
    pub channels: u8,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 4,
            per_class: 250,
            image_size: 32,
            channels: 1,
            noise_sigma: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Deterministic frequency-coded dataset; a pure function of the config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let s = cfg.image_size as usize;
    let c = cfg.channels as usize;
    let n = cfg.n_classes as usize * cfg.per_class;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut index = 0u64;
    for grade in 1..=cfg.n_classes {
        for _ in 0..cfg.per_class {
            let mut rng = substream_indexed(cfg.seed, "synth", index);
            let phase: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            let mut img = Vec::with_capacity(c * s * s);
            for _ch in 0..c {
                for p in 0..s {
                    for q in 0..s {
                        let wave = (std::f64::consts::TAU * grade as f64 * (p + q) as f64
                            / s as f64
                            + phase)
                            .sin();
                        let eta = if cfg.noise_sigma > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        img.push((0.5 + 0.4 * wave + eta).clamp(0.0, 1.0) as f32);
                    }
                }
            }
            images.push(img);
            labels.push(grade);
            index += 1;
        }
    }
    Ok(Dataset {
        images,
        labels,
        n_classes: cfg.n_classes,
        channels: cfg.channels,
        height: cfg.image_size,
        width: cfg.image_size,
    })
}

/// Serialize to the DOLD format (little-endian throughout).
pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    w.write_all(DOLD_MAGIC)?;
    w.write_all(&DOLD_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.len() as u32).to_le_bytes())?;
    w.write_all(&[dataset.n_classes, dataset.channels])?;
    w.write_all(&dataset.height.to_le_bytes())?;
    w.write_all(&dataset.width.to_le_bytes())?;
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        w.write_all(&[label])?;
        for &v in img {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_dataset_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

fn format_err(offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

/// Parse a DOLD buffer. Rejects bad magic, truncation, trailing bytes,
/// and out-of-range labels, reporting the byte offset of the defect.
pub fn read_dataset_bytes(data: &[u8]) -> Result<Dataset> {
    if data.len() < HEADER_LEN as usize {
        return Err(format_err(data.len() as u64, "file shorter than header"));
    }
    if &data[0..4] != DOLD_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u16::from_le_bytes([data[4], data[5]]);
    if version != DOLD_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n_samples = u32::from_le_bytes([data[6], data[7], data[8], data[9]]) as u64;
    let n_classes = data[10];
    let channels = data[11];
    let height = u16::from_le_bytes([data[12], data[13]]);
    let width = u16::from_le_bytes([data[14], data[15]]);
    if n_classes == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(format_err(10, "zero dimension in header"));
    }
    let pixels = channels as u64 * height as u64 * width as u64;
    let sample_len = 1 + 4 * pixels;
    let expected = HEADER_LEN + n_samples * sample_len;
    if (data.len() as u64) < expected {
        return Err(format_err(data.len() as u64, "truncated sample data"));
    }
    if data.len() as u64 > expected {
        return Err(format_err(expected, "trailing bytes after last sample"));
    }
    let mut images = Vec::with_capacity(n_samples as usize);
    let mut labels = Vec::with_capacity(n_samples as usize);
    for i in 0..n_samples {
        let base = (HEADER_LEN + i * sample_len) as usize;
        let label = data[base];
        if label < 1 || label > n_classes {
            return Err(format_err(
                base as u64,
                format!("label {label} outside 1..{n_classes}"),
            ));
        }
        let mut img = Vec::with_capacity(pixels as usize);
        for p in 0..pixels as usize {
            let o = base + 1 + 4 * p;
            img.push(f32::from_le_bytes([
                data[o],
                data[o + 1],
                data[o + 2],
                data[o + 3],
            ]));
        }
        images.push(img);
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        n_classes,
        channels,
        height,
        width,
    })
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    read_dataset_bytes(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipMode {
    None,
    HFlip,
    VFlip,
}

/// Deterministic flip; the sample label is unaffected by contract.
pub fn augment(image: &[f32], channels: u8, height: u16, width: u16, mode: FlipMode) -> Vec<f32> {
    let (c, h, w) = (channels as usize, height as usize, width as usize);
    debug_assert_eq!(image.len(), c * h * w);
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                let (sr, sc) = match mode {
                    FlipMode::None => (row, col),
                    FlipMode::HFlip => (row, w - 1 - col),
                    FlipMode::VFlip => (h - 1 - row, col),
                };
                out.push(image[ch * h * w + sr * w + sc]);
            }
        }
    }
    out
}

/// Stratified, seed-deterministic, disjoint, exhaustive three-way split.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f < 0.0) {
        return Err(Error::Config("split fractions must be nonnegative".into()));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must sum to 1".into()));
    }
    let positive = fr.iter().filter(|&&f| f > 0.0).count();
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in 1..=dataset.n_classes {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if idx.len() < positive {
            return Err(Error::Config(format!(
                "class {class} has {} samples, fewer than the {positive} requested splits",
                idx.len()
            )));
        }
        let mut rng = substream(seed, "split");
        idx.shuffle(&mut rng);
        // largest-remainder apportionment keeps every split within one
        // sample of its requested fraction
        let n = idx.len();
        let mut counts = [0usize; 3];
        let mut rema: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0;
        for (k, &f) in fr.iter().enumerate() {
            let exact = f * n as f64;
            counts[k] = exact.floor() as usize;
            assigned += counts[k];
            rema.push((k, exact - exact.floor()));
        }
        rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for i in 0..n - assigned {
            counts[rema[i % 3].0] += 1;
        }
        let mut cursor = 0;
        for (k, &count) in counts.iter().enumerate() {
            parts[k].extend_from_slice(&idx[cursor..cursor + count]);
            cursor += count;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok((
        dataset.subset(&parts[0]),
        dataset.subset(&parts[1]),
        dataset.subset(&parts[2]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_classes: 4,
            per_class: 5,
            image_size: 8,
            channels: 1,
            noise_sigma: 0.08,
            seed: 7,
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_class_counts() {
        let d = generate_synthetic(&small_cfg()).unwrap();
        for class in 1..=4u8 {
            assert_eq!(d.labels.iter().filter(|&&y| y == class).count(), 5);
        }
    }

    #[test]
    fn generator_zero_noise_wave_range() {
        // sigma = 0: values are exactly 0.5 + 0.4 sin(...), inside [0.1, 0.9]
        let mut cfg = small_cfg();
        cfg.noise_sigma = 0.0;
        let d = generate_synthetic(&cfg).unwrap();
        for img in &d.images {
            for &v in img {
                assert!((0.1 - 1e-6..=0.9 + 1e-6).contains(&(v as f64)));
            }
        }
    }

    #[test]
    fn generator_rejects_bad_config() {
        let mut cfg = small_cfg();
        cfg.per_class = 0;
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn round_trip_bitwise() {
        let d = generate_synthetic(&small_cfg()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset_bytes(&buf).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn file_size_arithmetic() {
        // 2 samples of 1x4x4: 16 header + 2 * (1 + 64)
        let d = Dataset {
            images: vec![vec![0.0; 16], vec![1.0; 16]],
            labels: vec![1, 2],
            n_classes: 2,
            channels: 1,
            height: 4,
            width: 4,
        };
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 2 * (1 + 64));
    }

    #[test]
    fn format_errors_carry_offsets() {
        assert!(matches!(
            read_dataset_bytes(b"DOLD"),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(matches!(
            read_dataset_bytes(b"XXXX000000000000"),
            Err(Error::Format { offset: 0, .. })
        ));

        let d = generate_synthetic(&small_cfg()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let cut = buf.len() - 3;
        buf.truncate(cut);
        match read_dataset_bytes(&buf) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut as u64),
            other => panic!("expected format error, got {other:?}"),
        }

        // out-of-range label
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        buf[16] = 9;
        match read_dataset_bytes(&buf) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset, 16);
                assert!(detail.contains("label"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn flips_are_involutions() {
        let d = generate_synthetic(&small_cfg()).unwrap();
        let img = &d.images[0];
        for mode in [FlipMode::HFlip, FlipMode::VFlip] {
            let once = augment(img, 1, 8, 8, mode);
            let twice = augment(&once, 1, 8, 8, mode);
            assert_eq!(&twice, img);
        }
        assert_eq!(&augment(img, 1, 8, 8, FlipMode::None), img);

        // symmetric image is an hflip fixed point
        let sym: Vec<f32> = (0..64)
            .map(|i| {
                let col = i % 8;
                (col.min(7 - col)) as f32
            })
            .collect();
        assert_eq!(augment(&sym, 1, 8, 8, FlipMode::HFlip), sym);
    }

    #[test]
    fn split_properties() {
        let mut cfg = small_cfg();
        cfg.per_class = 20;
        let d = generate_synthetic(&cfg).unwrap();
        let (train, val, test) = split(&d, (0.7, 0.15, 0.15), 3).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), d.len());
        // stratification: 20 per class -> 14/3/3
        for class in 1..=4u8 {
            assert_eq!(train.labels.iter().filter(|&&y| y == class).count(), 14);
            assert_eq!(val.labels.iter().filter(|&&y| y == class).count(), 3);
            assert_eq!(test.labels.iter().filter(|&&y| y == class).count(), 3);
        }
        // disjoint and exhaustive: images partition the multiset
        let mut all: Vec<&Vec<f32>> = train
            .images
            .iter()
            .chain(val.images.iter())
            .chain(test.images.iter())
            .collect();
        let mut orig: Vec<&Vec<f32>> = d.images.iter().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, orig);

        let (train, val, test) = split(&d, (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(train.len(), d.len());
        assert!(val.is_empty() && test.is_empty());

        assert!(split(&d, (0.5, 0.4, 0.2), 3).is_err());
    }
}
