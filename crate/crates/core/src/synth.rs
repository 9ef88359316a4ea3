//! Synthetic fundus-like dataset generator.
//!
//! Each image carries a bright elliptical "disc" with a brighter inner "cup"
//! on a noisy background; the binary label is the vertical cup-to-disc ratio
//! (vCDR) thresholded against the configured cutoff, recomputed from the
//! rasterized ground-truth masks so the label is a deterministic function of
//! the mask. Two presets with different background texture and intensity
//! statistics stand in for homologous vs heterologous data sources.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{seed_stream, Arr};
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};

/// Rendering preset; `B` differs from `A` in background level, texture and
/// foreground intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthPreset {
    SyntheticA,
    SyntheticB,
}

impl SynthPreset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic-a" => Some(SynthPreset::SyntheticA),
            "synthetic-b" => Some(SynthPreset::SyntheticB),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SynthPreset::SyntheticA => "synthetic-a",
            SynthPreset::SyntheticB => "synthetic-b",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub preset: SynthPreset,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Disc vertical semi-axis range as a fraction of the image half-size.
    pub disc_radius: (f64, f64),
    /// Vertical cup/disc ratio range; the decision threshold must fall
    /// strictly inside it so both classes occur.
    pub cup_ratio: (f64, f64),
    pub vcdr_threshold: f64,
    /// Pixel noise multiplier (1.0 = preset default).
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn preset(preset: SynthPreset, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Self {
        SyntheticConfig {
            preset,
            n_train,
            n_val,
            n_test,
            image_size: 32,
            disc_radius: (0.45, 0.8),
            cup_ratio: (0.35, 0.95),
            vcdr_threshold: 0.7,
            noise: 1.0,
            seed,
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_total() == 0 {
            return Err(Error::Config("synthetic dataset would be empty".into()));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of 16 (>= 16)",
                self.image_size
            )));
        }
        let (lo, hi) = self.cup_ratio;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "cup ratio range ({lo}, {hi}) must sit inside (0, 1)"
            )));
        }
        if !(lo < self.vcdr_threshold && self.vcdr_threshold < hi) {
            return Err(Error::Config(format!(
                "vCDR threshold {} must fall inside the cup-ratio range ({lo}, {hi}) \
                 so both classes occur",
                self.vcdr_threshold
            )));
        }
        let (rlo, rhi) = self.disc_radius;
        if !(0.1 <= rlo && rlo < rhi && rhi <= 0.82) {
            return Err(Error::Config(format!(
                "disc radius range ({rlo}, {rhi}) must sit inside [0.1, 0.82]"
            )));
        }
        Ok(())
    }
}

/// Label rule: positive when the vertical cup diameter exceeds the threshold
/// fraction of the vertical disc diameter.
pub fn vcdr_label(vcdr: f64, threshold: f64) -> u8 {
    (vcdr > threshold) as u8
}

/// Recompute vCDR from a two-channel mask (channel 0 disc, channel 1 cup)
/// via vertical pixel extents. `None` when the disc is empty.
pub fn vcdr_from_mask(mask: &Arr) -> Option<f64> {
    let extent = |c: usize| -> Option<usize> {
        let shape = mask.shape();
        let (mut lo, mut hi) = (usize::MAX, 0usize);
        for y in 0..shape[0] {
            for x in 0..shape[1] {
                if mask[[y, x, c]] >= 0.5 {
                    lo = lo.min(y);
                    hi = hi.max(y);
                }
            }
        }
        (lo != usize::MAX).then(|| hi - lo + 1)
    };
    let disc = extent(0)?;
    let cup = extent(1).unwrap_or(0);
    Some(cup as f64 / disc as f64)
}

struct Geometry {
    cy: f64,
    cx: f64,
    ry_disc: f64,
    rx_disc: f64,
    ry_cup: f64,
    rx_cup: f64,
}

fn draw_geometry(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Geometry {
    let s = cfg.image_size as f64;
    let half = s / 2.0;
    let cy = half + rng.gen_range(-0.08..0.08) * s;
    let cx = half + rng.gen_range(-0.08..0.08) * s;
    let ry_disc = half * rng.gen_range(cfg.disc_radius.0..cfg.disc_radius.1);
    let rx_disc = ry_disc * rng.gen_range(0.75..1.0);
    let ratio = rng.gen_range(cfg.cup_ratio.0..cfg.cup_ratio.1);
    // keep the cup rasterizable even at small sizes
    let ry_cup = (ratio * ry_disc).max(0.8);
    let rx_cup = rx_disc * rng.gen_range(0.55..0.95) * ratio.max(0.4);
    Geometry {
        cy,
        cx,
        ry_disc,
        rx_disc,
        ry_cup,
        rx_cup,
    }
}

fn rasterize_mask(geo: &Geometry, size: usize) -> Arr {
    let mut mask = Arr::zeros(IxDyn(&[size, size, 2]));
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - geo.cy;
            let dx = x as f64 - geo.cx;
            if (dy / geo.ry_disc).powi(2) + (dx / geo.rx_disc).powi(2) <= 1.0 {
                mask[[y, x, 0]] = 1.0;
            }
            if (dy / geo.ry_cup).powi(2) + (dx / geo.rx_cup).powi(2) <= 1.0 {
                mask[[y, x, 1]] = 1.0;
            }
        }
    }
    mask
}

struct Palette {
    background: [f64; 3],
    stripe_amp: f64,
    stripe_period: f64,
    disc: [f64; 3],
    cup: [f64; 3],
    distractors: usize,
    distractor_gain: f64,
    noise_sigma: f64,
}

fn palette(preset: SynthPreset, noise: f64) -> Palette {
    match preset {
        SynthPreset::SyntheticA => Palette {
            background: [0.14, 0.11, 0.10],
            stripe_amp: 0.0,
            stripe_period: 8.0,
            disc: [0.55, 0.36, 0.26],
            cup: [0.88, 0.68, 0.45],
            distractors: 2,
            distractor_gain: 0.16,
            noise_sigma: 0.05 * noise,
        },
        SynthPreset::SyntheticB => Palette {
            background: [0.46, 0.44, 0.40],
            stripe_amp: 0.08,
            stripe_period: 6.0,
            disc: [0.72, 0.62, 0.55],
            cup: [0.94, 0.90, 0.82],
            distractors: 3,
            distractor_gain: 0.12,
            noise_sigma: 0.06 * noise,
        },
    }
}

fn render(rng: &mut ChaCha8Rng, geo: &Geometry, mask: &Arr, cfg: &SyntheticConfig) -> Arr {
    let size = cfg.image_size;
    let pal = palette(cfg.preset, cfg.noise);
    let normal = Normal::new(0.0, pal.noise_sigma).expect("sigma >= 0");
    let tint: f64 = rng.gen_range(-0.04..0.04);
    let mut image = Arr::zeros(IxDyn(&[size, size, 3]));

    // distractor blobs behind the disc
    let mut blobs = Vec::new();
    for _ in 0..pal.distractors {
        let by = rng.gen_range(0.0..size as f64);
        let bx = rng.gen_range(0.0..size as f64);
        let br = rng.gen_range(0.06..0.18) * size as f64;
        let gain = pal.distractor_gain * rng.gen_range(0.5..1.0);
        blobs.push((by, bx, br, gain));
    }

    for y in 0..size {
        for x in 0..size {
            let stripe = if pal.stripe_amp > 0.0 {
                pal.stripe_amp * (2.0 * std::f64::consts::PI * y as f64 / pal.stripe_period).sin()
            } else {
                0.0
            };
            let mut px = [0.0f64; 3];
            for c in 0..3 {
                px[c] = pal.background[c] + stripe + tint;
            }
            for &(by, bx, br, gain) in &blobs {
                let d2 = ((y as f64 - by) / br).powi(2) + ((x as f64 - bx) / br).powi(2);
                if d2 <= 1.0 {
                    for p in px.iter_mut() {
                        *p += gain * (1.0 - d2);
                    }
                }
            }
            if mask[[y, x, 0]] >= 0.5 {
                for c in 0..3 {
                    px[c] = pal.disc[c] + tint;
                }
            }
            if mask[[y, x, 1]] >= 0.5 {
                for c in 0..3 {
                    px[c] = pal.cup[c] + tint;
                }
            }
            // light radial shading inside the disc so edges are not flat
            if mask[[y, x, 0]] >= 0.5 {
                let d = ((y as f64 - geo.cy) / geo.ry_disc).powi(2)
                    + ((x as f64 - geo.cx) / geo.rx_disc).powi(2);
                for p in px.iter_mut() {
                    *p -= 0.05 * d;
                }
            }
            for (c, p) in px.iter().enumerate() {
                image[[y, x, c]] = (p + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Generate the dataset. Deterministic per configuration; geometry is
/// resampled wholesale until the positive fraction lands in [0.3, 0.7].
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_total();

    let mut geo_rng = seed_stream(cfg.seed, "geometry");
    let mut masks: Vec<(Geometry, Arr, u8)> = Vec::new();
    let mut balanced = false;
    for _attempt in 0..200 {
        masks.clear();
        for _ in 0..n {
            let geo = draw_geometry(&mut geo_rng, cfg);
            let mask = rasterize_mask(&geo, cfg.image_size);
            let vcdr = vcdr_from_mask(&mask).expect("disc is never empty");
            let label = vcdr_label(vcdr, cfg.vcdr_threshold);
            masks.push((geo, mask, label));
        }
        let positives = masks.iter().filter(|(_, _, l)| *l == 1).count();
        let frac = positives as f64 / n as f64;
        if (0.3..=0.7).contains(&frac) {
            balanced = true;
            break;
        }
    }
    if !balanced {
        return Err(Error::Config(
            "could not reach class balance in [0.3, 0.7]; widen the cup-ratio range".into(),
        ));
    }

    let mut render_rng = seed_stream(cfg.seed, "render");
    let mut samples = Vec::with_capacity(n);
    for (i, (geo, mask, label)) in masks.into_iter().enumerate() {
        let image = render(&mut render_rng, &geo, &mask, cfg);
        let split = if i < cfg.n_train {
            Split::Train
        } else if i < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        samples.push(Sample {
            image,
            mask: Some(mask),
            label,
            split,
        });
    }
    Ok(Dataset {
        samples,
        image_size: cfg.image_size,
        seg_classes: 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig::preset(SynthPreset::SyntheticA, 24, 8, 8, 9)
    }

    #[test]
    fn label_rule() {
        assert_eq!(vcdr_label(0.9, 0.7), 1);
        assert_eq!(vcdr_label(0.5, 0.7), 0);
        assert_eq!(vcdr_label(0.7, 0.7), 0); // strict inequality
    }

    #[test]
    fn labels_match_mask_recomputation() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        for s in &ds.samples {
            let mask = s.mask.as_ref().unwrap();
            let vcdr = vcdr_from_mask(mask).unwrap();
            assert_eq!(s.label, vcdr_label(vcdr, 0.7));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn class_balance_in_band() {
        for seed in [1u64, 2, 3, 4, 5] {
            let mut cfg = small_cfg();
            cfg.seed = seed;
            let ds = generate_synthetic(&cfg).unwrap();
            let pos = ds.samples.iter().filter(|s| s.label == 1).count();
            let frac = pos as f64 / ds.samples.len() as f64;
            assert!((0.3..=0.7).contains(&frac), "seed {seed}: frac {frac}");
        }
    }

    #[test]
    fn infeasible_threshold_rejected() {
        let mut cfg = small_cfg();
        cfg.vcdr_threshold = 0.99; // outside cup-ratio range
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn presets_differ_in_intensity_statistics() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let mut cfg_b = small_cfg();
        cfg_b.preset = SynthPreset::SyntheticB;
        let b = generate_synthetic(&cfg_b).unwrap();
        let mean = |ds: &Dataset| {
            ds.samples
                .iter()
                .map(|s| s.image.mean().unwrap())
                .sum::<f64>()
                / ds.samples.len() as f64
        };
        assert!(mean(&b) > mean(&a) + 0.1, "preset B should be brighter");
    }

    #[test]
    fn splits_follow_counts() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let (tr, va, te) = ds.split_counts();
        assert_eq!((tr, va, te), (24, 8, 8));
    }

    #[test]
    fn cup_never_exceeds_disc_extent() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        for s in &ds.samples {
            let vcdr = vcdr_from_mask(s.mask.as_ref().unwrap()).unwrap();
            assert!(vcdr <= 1.0 + 1e-9);
        }
    }
}
