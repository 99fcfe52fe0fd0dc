//! Simulated screen-to-camera capture and bird's-eye rectification.
//!
//! Points are `[x, y]` in pixel coordinates with pixel centers on integers.
//! Quads list their corners top-left, top-right, bottom-right, bottom-left.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{gaussian_noise, jpeg};
use crate::ecc::{watermark_pack, watermark_unpack, Unpacked};
use crate::error::{Error, Result};
use crate::metrics::{ber, binarize};
use crate::net::WatermarkingModel;
use crate::tensor::Tensor;

pub type Point = [f64; 2];
pub type Quad = [Point; 4];

/// Projective map of the plane, stored with element (2, 2) = 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Twice the signed area of triangle abc.
fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Rejects quads with three (nearly) collinear corners.
fn check_quad(q: &Quad, what: &str) -> Result<()> {
    if q.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} quad has non-finite corners")));
    }
    let scale = q
        .iter()
        .flat_map(|a| q.iter().map(move |b| (a[0] - b[0]).hypot(a[1] - b[1])))
        .fold(0.0, f64::max);
    for skip in 0..4 {
        let t: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| q[i]).collect();
        if cross(t[0], t[1], t[2]).abs() <= 1e-9 * scale * scale.max(1.0) {
            return Err(Error::invalid(format!("{what} quad is degenerate: three corners are collinear")));
        }
    }
    Ok(())
}

/// Whether the quad is strictly convex, in either orientation.
pub fn is_convex(q: &Quad) -> bool {
    let s: Vec<f64> = (0..4).map(|i| cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4])).collect();
    s.iter().all(|&v| v > 0.0) || s.iter().all(|&v| v < 0.0)
}

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (v, p) in a[row].iter_mut().zip(pivot_row).skip(col) {
                *v -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes a raw matrix so that element (2, 2) is 1 when it is nonzero.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography has non-finite entries"));
        }
        let mut m = m;
        let s = m[2][2];
        if s != 0.0 {
            for v in m.iter_mut().flatten() {
                *v /= s;
            }
        }
        if det3(&m).abs() <= 1e-9 {
            return Err(Error::invalid("homography is singular"));
        }
        Ok(Homography { m })
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    /// The map taking `src[i]` to `dst[i]` for all four corners, from the
    /// 8×8 direct linear system with h₂₂ = 1.
    pub fn from_corners(src: &Quad, dst: &Quad) -> Result<Self> {
        check_quad(src, "source")?;
        check_quad(dst, "target")?;
        let mut a = [[0.0; 8]; 8];
        let mut b = [0.0; 8];
        for i in 0..4 {
            let [x, y] = src[i];
            let [u, v] = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u];
            b[2 * i] = u;
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v];
            b[2 * i + 1] = v;
        }
        let h = solve(a, b).ok_or_else(|| Error::invalid("corner correspondence has no unique homography"))?;
        Self::from_matrix([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        [
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let d = det3(m);
        if d.abs() <= 1e-9 {
            return Err(Error::invalid("homography is singular"));
        }
        let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
            [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
            [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
        ];
        Self::from_matrix(adj.map(|row| row.map(|v| v / d)))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self::from_matrix(out)
    }
}

/// Inverse-mapping warp: output pixel (x, y) takes the bilinear sample of
/// `image` at `h.apply([x, y])`, so `h` maps output coordinates to input
/// coordinates. Samples outside the input's pixel-center extent are 0.
pub fn warp(image: &Tensor, h: &Homography, out_w: usize, out_h: usize) -> Result<Tensor> {
    let (ih, iw, c) = image.hwc()?;
    let src = image.data();
    let mut out = vec![0.0f32; out_h * out_w * c];
    const EDGE: f64 = 1e-9;
    for y in 0..out_h {
        for x in 0..out_w {
            let [sx, sy] = h.apply([x as f64, y as f64]);
            if !(sx >= -EDGE && sy >= -EDGE && sx <= (iw - 1) as f64 + EDGE && sy <= (ih - 1) as f64 + EDGE) {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, (iw - 1) as f64), sy.clamp(0.0, (ih - 1) as f64));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(iw - 1), (y0 + 1).min(ih - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let dst = &mut out[(y * out_w + x) * c..(y * out_w + x + 1) * c];
            for (ch, o) in dst.iter_mut().enumerate() {
                let at = |yy: usize, xx: usize| f64::from(src[(yy * iw + xx) * c + ch]);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                *o = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

/// Corners of a `w`×`h` image at its outermost pixel centers.
pub fn image_corners(w: usize, h: usize) -> Quad {
    let (r, b) = ((w - 1) as f64, (h - 1) as f64);
    [[0.0, 0.0], [r, 0.0], [r, b], [0.0, b]]
}

fn default_canvas() -> usize {
    192
}
fn default_quality() -> Option<u8> {
    Some(100)
}
fn default_gain() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureSpec {
    /// Each corner coordinate moves by a uniform draw in [−d, d] pixels.
    #[serde(default)]
    pub displacement: f64,
    /// Side of the square photo; the marked image sits centered on it.
    #[serde(default = "default_canvas")]
    pub canvas: usize,
    #[serde(default)]
    pub noise_variance: f64,
    /// JPEG quality of the saved photo, or `null` for no recompression.
    #[serde(default = "default_quality")]
    pub jpeg_quality: Option<u8>,
    /// Per-channel illumination gain and bias, applied as v·gain + bias.
    #[serde(default = "default_gain")]
    pub gain: [f64; 3],
    #[serde(default)]
    pub bias: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl Default for CaptureSpec {
    fn default() -> Self {
        CaptureSpec {
            displacement: 0.0,
            canvas: default_canvas(),
            noise_variance: 0.0,
            jpeg_quality: default_quality(),
            gain: default_gain(),
            bias: [0.0; 3],
            seed: 0,
        }
    }
}

impl CaptureSpec {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let spec: CaptureSpec = serde_json::from_str(text).map_err(|e| Error::json(context, &e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.displacement.is_finite() && self.displacement >= 0.0) {
            return Err(Error::invalid("displacement must be a nonnegative number of pixels"));
        }
        if !(0.0..=1.0).contains(&self.noise_variance) {
            return Err(Error::invalid("noise_variance must be in [0, 1]"));
        }
        if let Some(q) = self.jpeg_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::invalid("jpeg_quality must be in 1..=100"));
            }
        }
        if self.gain.iter().chain(&self.bias).any(|v| !v.is_finite()) || self.gain.iter().any(|&g| g <= 0.0) {
            return Err(Error::invalid("gain must be positive and bias finite"));
        }
        if self.canvas < 2 {
            return Err(Error::invalid("canvas must be at least 2 pixels"));
        }
        Ok(())
    }
}

/// Photo of a displayed image together with the exact corners of the image
/// inside the photo.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub photo: Tensor,
    pub corners: Quad,
}

/// Places `m` centered on a `spec.canvas`² black canvas, moves its corners by
/// seeded displacements, warps it there, then applies illumination,
/// Gaussian sensor noise and JPEG recompression.
pub fn simulate_capture(m: &Tensor, spec: &CaptureSpec) -> Result<Capture> {
    spec.validate()?;
    let (h, w, c) = m.hwc()?;
    if c != 3 {
        return Err(Error::shape("simulate_capture", m.shape(), &[h, w, 3]));
    }
    if spec.canvas < w.max(h) {
        return Err(Error::invalid(format!("canvas {} is smaller than the {w}×{h} image", spec.canvas)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (ox, oy) = ((spec.canvas - w) as f64 / 2.0, (spec.canvas - h) as f64 / 2.0);
    let src = image_corners(w, h);
    let d = spec.displacement;
    let corners: Quad = src.map(|[x, y]| {
        let (dx, dy) = if d > 0.0 {
            (rng.random_range(-d..=d), rng.random_range(-d..=d))
        } else {
            (0.0, 0.0)
        };
        [x + ox + dx, y + oy + dy]
    });
    if !is_convex(&corners) {
        return Err(Error::invalid("corner displacement collapsed the quad"));
    }
    let to_image = Homography::from_corners(&corners, &src)?;
    let mut photo = warp(m, &to_image, spec.canvas, spec.canvas)?;
    for px in photo.data_mut().chunks_exact_mut(3) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (f64::from(*v) * spec.gain[ch] + spec.bias[ch]).clamp(0.0, 1.0) as f32;
        }
    }
    if spec.noise_variance > 0.0 {
        photo = gaussian_noise(&photo, spec.noise_variance, spec.seed.wrapping_add(1))?;
    }
    if let Some(q) = spec.jpeg_quality {
        photo = jpeg(&photo, q)?;
    }
    Ok(Capture { photo, corners })
}

/// Bird's-eye view: the quad `corners` of `photo` resampled to `size`².
pub fn rectify(photo: &Tensor, corners: &Quad, size: usize) -> Result<Tensor> {
    let h = Homography::from_corners(&image_corners(size, size), corners)?;
    warp(photo, &h, size, size)
}

#[derive(Debug)]
pub struct PhotoExtraction {
    pub rectified: Tensor,
    /// Binarized watermark estimate.
    pub bits: Tensor,
    /// Bit error rate before error correction. Measured against the
    /// reference watermark when given, else against the re-encoded decoded
    /// payload; `None` when neither exists.
    pub raw_ber: Option<f64>,
    pub decoded: std::result::Result<Unpacked, Error>,
}

pub fn extract_from_photo(
    photo: &Tensor,
    corners: &Quad,
    model: &WatermarkingModel,
    reference: Option<&Tensor>,
) -> Result<PhotoExtraction> {
    let size = model.config().cover_size();
    let rectified = rectify(photo, corners, size)?;
    let bits = binarize(&model.extract_image(&rectified)?);
    let decoded = watermark_unpack(&bits);
    let raw_ber = match (reference, &decoded) {
        (Some(r), _) => Some(ber(r, &bits)?),
        (None, Ok(u)) => Some(ber(&watermark_pack(&u.payload)?, &bits)?),
        (None, Err(_)) => None,
    };
    Ok(PhotoExtraction {
        rectified,
        bits,
        raw_ber,
        decoded,
    })
}

/// The JSON summary written by `deepmark camera-sim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureReport {
    pub raw_ber: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrected: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrected_per_block: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_hex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_block: Option<usize>,
    pub corners: Quad,
}

impl CaptureReport {
    pub fn new(ex: &PhotoExtraction, corners: &Quad) -> Self {
        let mut r = CaptureReport {
            raw_ber: ex.raw_ber,
            corrected: None,
            corrected_per_block: None,
            payload_hex: None,
            failure: None,
            failed_block: None,
            corners: *corners,
        };
        match &ex.decoded {
            Ok(u) => {
                r.corrected = Some(u.corrected);
                r.corrected_per_block = Some(u.per_block.to_vec());
                r.payload_hex = Some(u.payload.iter().map(|b| format!("{b:02x}")).collect());
            }
            Err(e) => {
                r.failure = Some(e.to_string());
                if let Error::Uncorrectable { block } = e {
                    r.failed_block = Some(*block);
                }
            }
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synthetic_cover;
    use crate::metrics::psnr;
    use proptest::prelude::*;

    fn close(a: Point, b: Point, tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn identical_quads_give_identity() {
        let q = [[3.0, 4.0], [50.0, 7.0], [47.0, 60.0], [1.0, 55.0]];
        let h = Homography::from_corners(&q, &q).unwrap();
        for (a, b) in h.matrix().iter().flatten().zip(Homography::identity().matrix().iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn doubled_square_is_diagonal() {
        let unit = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let big = unit.map(|[x, y]| [2.0 * x, 2.0 * y]);
        let m = Homography::from_corners(&unit, &big).unwrap().matrix();
        let expect = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        for (a, b) in m.iter().flatten().zip(expect.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_quads_are_rejected() {
        let good = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        let line = [[0.0, 0.0], [5.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        assert!(Homography::from_corners(&line, &good).is_err());
        assert!(Homography::from_corners(&good, &line).is_err());
        let dup = [[0.0, 0.0], [0.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        assert!(Homography::from_corners(&good, &dup).is_err());
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let img = synthetic_cover(3, 16);
        assert_eq!(warp(&img, &Homography::identity(), 16, 16).unwrap(), img);
    }

    #[test]
    fn unit_translation_shifts_columns() {
        let img = synthetic_cover(4, 8);
        let out = warp(&img, &Homography::translation(1.0, 0.0), 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let expect = if x == 7 { 0.0 } else { img.get3(y, x + 1, c) };
                    assert_eq!(out.get3(y, x, c), expect);
                }
            }
        }
    }

    #[test]
    fn mild_warp_round_trip() {
        let img = synthetic_cover(5, 64);
        let src = image_corners(64, 64);
        let dst = [[2.0, 1.0], [61.5, 3.0], [62.0, 60.5], [1.0, 62.0]];
        let h = Homography::from_corners(&src, &dst).unwrap();
        let back = warp(&warp(&img, &h, 64, 64).unwrap(), &h.inverse().unwrap(), 64, 64).unwrap();
        let crop = |t: &Tensor| Tensor::from_fn(&[48, 48, 3], |i| t.get3(8 + i / 144, 8 + (i / 3) % 48, i % 3));
        assert!(psnr(&crop(&img), &crop(&back)).unwrap() > 30.0);
    }

    #[test]
    fn clean_capture_rectifies_back() {
        let m = synthetic_cover(6, 128);
        let spec = CaptureSpec::default();
        let cap = simulate_capture(&m, &spec).unwrap();
        assert_eq!(cap.photo.shape(), [192, 192, 3]);
        assert_eq!(cap.corners[0], [32.0, 32.0]);
        let r = rectify(&cap.photo, &cap.corners, 128).unwrap();
        assert!(psnr(&m, &r).unwrap() > 35.0);
    }

    #[test]
    fn capture_is_seeded_and_reports_used_corners() {
        let m = synthetic_cover(7, 128);
        let spec = CaptureSpec {
            displacement: 4.0,
            noise_variance: 1e-4,
            jpeg_quality: Some(90),
            gain: [1.1, 1.0, 0.9],
            bias: [0.02, 0.0, -0.02],
            seed: 3,
            ..CaptureSpec::default()
        };
        let a = simulate_capture(&m, &spec).unwrap();
        assert_eq!(a, simulate_capture(&m, &spec).unwrap());
        let b = simulate_capture(&m, &CaptureSpec { seed: 4, ..spec.clone() }).unwrap();
        assert_ne!(a.corners, b.corners);
        // The used corners are where the image's corner pixels landed.
        let noiseless = simulate_capture(
            &m,
            &CaptureSpec {
                noise_variance: 0.0,
                jpeg_quality: None,
                gain: [1.0; 3],
                bias: [0.0; 3],
                ..spec
            },
        )
        .unwrap();
        assert_eq!(noiseless.corners, a.corners);
        let back = Homography::from_corners(&noiseless.corners, &image_corners(128, 128)).unwrap();
        for (p, q) in a.corners.iter().zip(image_corners(128, 128)) {
            assert!(close(back.apply(*p), q, 1e-6));
        }
    }

    #[test]
    fn spec_json() {
        let s = CaptureSpec::from_json(r#"{"displacement": 2, "noise_variance": 1e-4, "jpeg_quality": 90, "seed": 1}"#, "c").unwrap();
        assert_eq!(s.canvas, 192);
        assert_eq!(s.gain, [1.0; 3]);
        assert!(CaptureSpec::from_json(r#"{"jpeg_quality": 0}"#, "c").is_err());
        assert!(CaptureSpec::from_json(r#"{"typo": 0}"#, "c").is_err());
        let none = CaptureSpec::from_json(r#"{"jpeg_quality": null}"#, "c").unwrap();
        assert_eq!(none.jpeg_quality, None);
    }

    fn quad_strategy() -> impl Strategy<Value = Quad> {
        // Perturbed rectangle corners stay convex for jitter below a quarter side.
        (10.0..200.0f64, 10.0..200.0f64, prop::array::uniform8(-2.4..2.4f64)).prop_map(|(w, h, j)| {
            [[j[0], j[1]], [w + j[2], j[3]], [w + j[4], h + j[5]], [j[6], h + j[7]]]
        })
    }

    proptest! {
        #[test]
        fn corners_map_exactly(src in quad_strategy(), dst in quad_strategy()) {
            // Direct substitution: H·srcᵢ must land on dstᵢ.
            let h = Homography::from_corners(&src, &dst).unwrap();
            for (s, d) in src.iter().zip(&dst) {
                prop_assert!(close(h.apply(*s), *d, 1e-6));
            }
            prop_assert_eq!(h.matrix()[2][2], 1.0);
        }

        #[test]
        fn inverse_composes_to_identity(src in quad_strategy(), dst in quad_strategy()) {
            let h = Homography::from_corners(&src, &dst).unwrap();
            let id = h.compose(&h.inverse().unwrap()).unwrap().matrix();
            let eye = Homography::identity().matrix();
            for (a, b) in id.iter().flatten().zip(eye.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
