//! Seeded image distortions applied to marked images.
//!
//! Every kernel takes an H×W×C image in [0, 1] and returns an image of the
//! same shape clipped to [0, 1]. Randomized kernels draw from a ChaCha8
//! stream seeded from `AttackSpec::seed`, so output is a pure function of the
//! image and the [`AttackSpec`].

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Identity,
    HistogramEq,
    GaussianBlur,
    SaltPepper,
    CropRetain,
    Jpeg,
    GaussianNoise,
    RandomNoise,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::Identity,
        AttackKind::HistogramEq,
        AttackKind::GaussianBlur,
        AttackKind::SaltPepper,
        AttackKind::CropRetain,
        AttackKind::Jpeg,
        AttackKind::GaussianNoise,
        AttackKind::RandomNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Identity => "identity",
            AttackKind::HistogramEq => "histogram_eq",
            AttackKind::GaussianBlur => "gaussian_blur",
            AttackKind::SaltPepper => "salt_pepper",
            AttackKind::CropRetain => "crop_retain",
            AttackKind::Jpeg => "jpeg",
            AttackKind::GaussianNoise => "gaussian_noise",
            AttackKind::RandomNoise => "random_noise",
        }
    }

    /// Meaning and valid range of `strength` for this kind.
    pub fn strength_doc(self) -> &'static str {
        match self {
            AttackKind::Identity | AttackKind::HistogramEq => "ignored",
            AttackKind::GaussianBlur => "sigma in (0, 64]",
            AttackKind::SaltPepper | AttackKind::RandomNoise => "pixel density in [0, 1]",
            AttackKind::CropRetain => "retained area fraction in (0, 1]",
            AttackKind::Jpeg => "quality in [1, 100], rounded to an integer",
            AttackKind::GaussianNoise => "variance in [0, 1]",
        }
    }

    fn check_strength(self, s: f64) -> Result<()> {
        let ok = match self {
            AttackKind::Identity | AttackKind::HistogramEq => true,
            AttackKind::GaussianBlur => s > 0.0 && s <= 64.0,
            AttackKind::SaltPepper | AttackKind::RandomNoise => (0.0..=1.0).contains(&s),
            AttackKind::CropRetain => s > 0.0 && s <= 1.0,
            AttackKind::Jpeg => (1.0..=100.0).contains(&s),
            AttackKind::GaussianNoise => (0.0..=1.0).contains(&s),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{} strength {s} out of range ({})",
                self.name(),
                self.strength_doc()
            )))
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default)]
    pub strength: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, strength: f64, seed: u64) -> Self {
        AttackSpec { kind, strength, seed }
    }

    pub fn identity() -> Self {
        Self::new(AttackKind::Identity, 0.0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.strength.is_finite() {
            return Err(Error::invalid(format!("{} strength must be finite", self.kind)));
        }
        self.kind.check_strength(self.strength)
    }
}

pub fn apply_attack(m: &Tensor, spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    m.hwc()?;
    let s = spec.strength;
    let out = match spec.kind {
        AttackKind::Identity => m.clone(),
        AttackKind::HistogramEq => histogram_eq(m)?,
        AttackKind::GaussianBlur => gaussian_blur(m, s)?,
        AttackKind::SaltPepper => salt_pepper(m, s, spec.seed)?,
        AttackKind::CropRetain => crop_retain(m, s, spec.seed)?,
        AttackKind::Jpeg => jpeg(m, s.round() as u8)?,
        AttackKind::GaussianNoise => gaussian_noise(m, s, spec.seed)?,
        AttackKind::RandomNoise => random_noise(m, s, spec.seed)?,
    };
    Ok(clip(out))
}

fn clip(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    t
}

fn pixel_count(m: &Tensor, density: f64) -> Result<(usize, usize)> {
    let (h, w, _) = m.hwc()?;
    let total = h * w;
    Ok((total, ((density * total as f64).floor() as usize).min(total)))
}

/// ⌊p·H·W⌋ distinct pixels set to black or white (fair coin, all channels).
pub fn salt_pepper(m: &Tensor, density: f64, seed: u64) -> Result<Tensor> {
    AttackKind::SaltPepper.check_strength(density)?;
    let (total, count) = pixel_count(m, density)?;
    let c = m.shape()[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = m.clone();
    for p in index::sample(&mut rng, total, count) {
        let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        out.data_mut()[p * c..(p + 1) * c].fill(v);
    }
    Ok(out)
}

/// ⌊p·H·W⌋ distinct pixels replaced by uniform random colors.
pub fn random_noise(m: &Tensor, density: f64, seed: u64) -> Result<Tensor> {
    AttackKind::RandomNoise.check_strength(density)?;
    let (total, count) = pixel_count(m, density)?;
    let c = m.shape()[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = m.clone();
    for p in index::sample(&mut rng, total, count) {
        for v in &mut out.data_mut()[p * c..(p + 1) * c] {
            *v = rng.random::<f32>();
        }
    }
    Ok(out)
}

/// Axis-aligned rectangle kept by [`crop_retain`]: (top, left, height, width).
pub fn crop_rect(h: usize, w: usize, retain: f64, seed: u64) -> Result<(usize, usize, usize, usize)> {
    AttackKind::CropRetain.check_strength(retain)?;
    let target = ((retain * (h * w) as f64).floor() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aspect: f64 = rng.random_range(0.5..=2.0);
    // Width is bounded below so the rectangle fits in height, then the
    // height is the largest one that keeps the area within the target.
    let min_w = target.div_ceil(h).max(1);
    let rw = ((target as f64 * aspect).sqrt().round() as usize).clamp(min_w, w);
    let rh = (target / rw).clamp(1, h);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    Ok((top, left, rh, rw))
}

/// Keeps a seeded rectangle of about `retain`·H·W pixels and zeroes the rest.
pub fn crop_retain(m: &Tensor, retain: f64, seed: u64) -> Result<Tensor> {
    let (h, w, c) = m.hwc()?;
    let (top, left, rh, rw) = crop_rect(h, w, retain, seed)?;
    let mut out = Tensor::zeros(m.shape());
    for y in top..top + rh {
        let row = (y * w + left) * c..(y * w + left + rw) * c;
        out.data_mut()[row.clone()].copy_from_slice(&m.data()[row]);
    }
    Ok(out)
}

pub fn gaussian_noise(m: &Tensor, variance: f64, seed: u64) -> Result<Tensor> {
    AttackKind::GaussianNoise.check_strength(variance)?;
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)) as f32;
    }
    Ok(clip(out))
}

/// Normalized samples of exp(−x²/2σ²) for x in −r..=r, r = ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Mirror index without repeating the edge sample (…2 1 | 0 1 2 … n−1 | n−2 …).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let k = i.rem_euclid(period);
    (if k < n as i64 { k } else { period - k }) as usize
}

/// Separable Gaussian blur with reflect padding, per channel.
pub fn gaussian_blur(m: &Tensor, sigma: f64) -> Result<Tensor> {
    AttackKind::GaussianBlur.check_strength(sigma)?;
    let (h, w, c) = m.hwc()?;
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let src: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + k as i64 - r, w);
                    acc += kv * src[(y * w + sx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - r, h);
                    acc += kv * tmp[(sy * w + x) * c + ch];
                }
                out.push(acc as f32);
            }
        }
    }
    Tensor::new(m.shape(), out)
}

/// Per-channel 256-level equalization. Channels holding a single level are
/// returned unchanged.
pub fn histogram_eq(m: &Tensor) -> Result<Tensor> {
    let (h, w, c) = m.hwc()?;
    let n = h * w;
    let level = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    let mut out = m.clone();
    for ch in 0..c {
        let mut hist = [0usize; 256];
        for p in 0..n {
            hist[level(m.data()[p * c + ch])] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &count) in hist.iter().enumerate() {
            acc += count;
            cdf[i] = acc;
        }
        let cdf_min = hist.iter().position(|&v| v > 0).map_or(0, |i| cdf[i]);
        if n == cdf_min {
            continue;
        }
        let denom = (n - cdf_min) as f64;
        for p in 0..n {
            let v = &mut out.data_mut()[p * c + ch];
            let l = level(*v);
            *v = ((cdf[l] - cdf_min) as f64 / denom) as f32;
        }
    }
    Ok(out)
}

/// ITU T.81 Annex K.1 luminance table, row-major.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// ITU T.81 Annex K.2 chrominance table, row-major.
pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality scaling of a base table, clamped to baseline range 1..=255.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

struct Dct {
    /// basis[u][x] = C(u)/2 · cos((2x+1)uπ/16)
    basis: [[f64; 8]; 8],
}

impl Dct {
    fn new() -> Self {
        let mut basis = [[0.0; 8]; 8];
        for (u, row) in basis.iter_mut().enumerate() {
            let cu = if u == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        Dct { basis }
    }

    fn forward(&self, block: &[f64; 64]) -> [f64; 64] {
        let mut tmp = [0.0; 64];
        for y in 0..8 {
            for u in 0..8 {
                tmp[y * 8 + u] = (0..8).map(|x| self.basis[u][x] * block[y * 8 + x]).sum();
            }
        }
        let mut out = [0.0; 64];
        for v in 0..8 {
            for u in 0..8 {
                out[v * 8 + u] = (0..8).map(|y| self.basis[v][y] * tmp[y * 8 + u]).sum();
            }
        }
        out
    }

    fn inverse(&self, coef: &[f64; 64]) -> [f64; 64] {
        let mut tmp = [0.0; 64];
        for v in 0..8 {
            for x in 0..8 {
                tmp[v * 8 + x] = (0..8).map(|u| self.basis[u][x] * coef[v * 8 + u]).sum();
            }
        }
        let mut out = [0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                out[y * 8 + x] = (0..8).map(|v| self.basis[v][y] * tmp[v * 8 + x]).sum();
            }
        }
        out
    }
}

fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0,
    ]
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let (cb, cr) = (cb - 128.0, cr - 128.0);
    [y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb]
}

/// Quantization round trip of baseline JPEG with 4:4:4 sampling. Planes are
/// edge-extended to whole 8×8 blocks; decoded samples are rounded to 8 bits.
pub fn jpeg(m: &Tensor, quality: u8) -> Result<Tensor> {
    AttackKind::Jpeg.check_strength(f64::from(quality))?;
    let (h, w, c) = m.hwc()?;
    if c != 3 {
        return Err(Error::shape("jpeg", m.shape(), &[h, w, 3]));
    }
    let tables = [
        scaled_table(&LUMA_TABLE, quality),
        scaled_table(&CHROMA_TABLE, quality),
        scaled_table(&CHROMA_TABLE, quality),
    ];
    let (bh, bw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mut planes = vec![vec![0.0f64; bh * bw]; 3];
    for y in 0..bh {
        for x in 0..bw {
            let p = (y.min(h - 1) * w + x.min(w - 1)) * 3;
            let px = |i: usize| f64::from(m.data()[p + i]) * 255.0;
            let ycc = rgb_to_ycbcr(px(0), px(1), px(2));
            for (plane, v) in planes.iter_mut().zip(ycc) {
                plane[y * bw + x] = v - 128.0;
            }
        }
    }
    let dct = Dct::new();
    for (plane, table) in planes.iter_mut().zip(&tables) {
        for by in (0..bh).step_by(8) {
            for bx in (0..bw).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    block[y * 8..y * 8 + 8].copy_from_slice(&plane[(by + y) * bw + bx..][..8]);
                }
                let mut coef = dct.forward(&block);
                for (v, &q) in coef.iter_mut().zip(table) {
                    let q = f64::from(q);
                    *v = (*v / q).round() * q;
                }
                let back = dct.inverse(&coef);
                for y in 0..8 {
                    plane[(by + y) * bw + bx..][..8].copy_from_slice(&back[y * 8..y * 8 + 8]);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let i = y * bw + x;
            let rgb = ycbcr_to_rgb(planes[0][i] + 128.0, planes[1][i] + 128.0, planes[2][i] + 128.0);
            for v in rgb {
                out.push((v.round().clamp(0.0, 255.0) / 255.0) as f32);
            }
        }
    }
    Tensor::new(m.shape(), out)
}
