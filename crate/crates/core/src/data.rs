//! Cover and watermark ingestion.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{read_gray, read_rgb};
use crate::tensor::Tensor;

pub const COVER_SIZE: usize = 128;
pub const WATERMARK_SIZE: usize = 32;
const EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pbm", "pnm"];

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("cannot resize an empty image"));
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src_len - 1), s - i0 as f64)
    };
    let src = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, w, out_w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| f64::from(src[(yy * w + xx) * c + ch]);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

/// Image files of `dir` with a supported extension, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", dir.display())));
    }
    Ok(paths)
}

/// 128×128 RGB covers in [0, 1].
pub fn load_covers(dir: &Path) -> Result<Vec<Tensor>> {
    list_images(dir)?
        .iter()
        .map(|p| resize_bilinear(&read_rgb(p)?, COVER_SIZE, COVER_SIZE))
        .collect()
}

/// Grayscale → 32×32 → threshold at 0.5 (ties to 1).
pub fn to_watermark(gray: &Tensor) -> Result<Tensor> {
    Ok(resize_bilinear(gray, WATERMARK_SIZE, WATERMARK_SIZE)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// 32×32 binary watermarks.
pub fn load_watermarks(dir: &Path) -> Result<Vec<Tensor>> {
    list_images(dir)?.iter().map(|p| to_watermark(&read_gray(p)?)).collect()
}

/// 1024 fair bits from a ChaCha8 stream seeded with `seed`.
pub fn generate_random_watermark(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[WATERMARK_SIZE, WATERMARK_SIZE, 1], |_| {
        if rng.random::<bool>() {
            1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::{to_u8, write_png};

    #[test]
    fn same_size_resize_is_exact() {
        let t = Tensor::from_fn(&[128, 128, 3], |i| ((i * 13) % 256) as f32 / 255.0);
        assert_eq!(resize_bilinear(&t, 128, 128).unwrap(), t);
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::full(&[256, 256, 3], 0.4);
        let r = resize_bilinear(&t, 128, 128).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn ramp_matches_analytic_resample() {
        // A horizontal ramp is linear in x, so the resampled value is the
        // ramp evaluated at the clamped source coordinate.
        let (h, w) = (100usize, 200usize);
        let t = Tensor::from_fn(&[h, w, 3], |i| ((i / 3) % w) as f32 / (w - 1) as f32);
        let r = resize_bilinear(&t, 128, 128).unwrap();
        for x in 0..128 {
            let sx = ((x as f64 + 0.5) * w as f64 / 128.0 - 0.5).clamp(0.0, (w - 1) as f64);
            let expect = sx / (w - 1) as f64;
            for y in [0, 77, 127] {
                assert!((r.get3(y, x, 2) as f64 - expect).abs() < 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn loaders_handle_files() {
        let dir = tempfile::tempdir().unwrap();
        let covers = dir.path().join("covers");
        let marks = dir.path().join("marks");
        let img = Tensor::from_fn(&[128, 128, 3], |i| ((i * 7) % 256) as f32 / 255.0);
        write_png(&covers.join("a.png"), &img).unwrap();
        write_png(&covers.join("b.png"), &Tensor::full(&[256, 256, 1], 0.5)).unwrap();
        std::fs::write(covers.join("notes.txt"), "skip me").unwrap();
        let loaded = load_covers(&covers).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(to_u8(&loaded[0]), to_u8(&img));
        assert_eq!(loaded[1].shape(), [128, 128, 3]);
        assert!(loaded[1].data().iter().all(|&v| (v - 0.5).abs() < 1e-5));

        let checker = Tensor::from_fn(&[32, 32, 1], |i| ((i / 32 + i % 32) % 2) as f32);
        write_png(&marks.join("c.png"), &checker).unwrap();
        write_png(&marks.join("d.png"), &Tensor::zeros(&[64, 64, 1])).unwrap();
        let wm = load_watermarks(&marks).unwrap();
        assert_eq!(wm[0], checker);
        assert!(wm[1].data().iter().all(|&v| v == 0.0));

        let empty = dir.path().join("empty");
        std::fs::create_dir(&empty).unwrap();
        assert!(matches!(load_covers(&empty), Err(Error::EmptyDataset(_))));
        assert!(matches!(load_covers(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn random_gray_watermark_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Tensor::from_fn(&[50, 70, 1], |_| rng.random::<f32>());
        let w = to_watermark(&g).unwrap();
        let oracle = resize_bilinear(&g, 32, 32).unwrap();
        for (a, b) in w.data().iter().zip(oracle.data()) {
            assert_eq!(*a, if *b >= 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn random_watermark_is_seeded() {
        let a = generate_random_watermark(42);
        assert_eq!(a, generate_random_watermark(42));
        assert_eq!(a.len(), 1024);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let hex: String = crate::ecc::bits_to_bytes(&a).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, SEED_42_FIXTURE);
    }

    // Frozen from the first build; guards the watermark stream against rand upgrades.
    const SEED_42_FIXTURE: &str = "59a1edfcc0a605fe258579f9f122fc9eb20851d6ae42d059da0acc4e241fd8aa5ec87fd5264bb1b8a11968486fbc3db9c536d49719e0e6aac01a8f7bec52a5be3d84d1381646f1a6af6c2c26b5918b95656037fcdf85bc83b849c3253f365668725b1f65c462c7187303cc7cc4610ae528cf1bcc61063c6489fc31c61355ca62";
}
