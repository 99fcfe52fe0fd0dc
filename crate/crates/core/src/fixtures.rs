//! Deterministic synthetic images for tests, demos and the acceptance runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ecc::{watermark_pack, PAYLOAD_LEN};
use crate::tensor::Tensor;

/// Smooth natural-looking RGB image: a few oriented gratings and soft blobs
/// per channel plus fine texture, squashed into (0.05, 0.95) with tanh so
/// there are no flat clipped regions.
pub fn synthetic_cover(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut layers = Vec::with_capacity(3);
    for _ in 0..3 {
        let gratings: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                let freq = rng.random_range(1.0..9.0) * std::f64::consts::TAU / s;
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.1..0.35))
            })
            .collect();
        let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.0..s),
                    rng.random_range(0.0..s),
                    rng.random_range(0.08..0.3) * s,
                    rng.random_range(-0.8..0.8),
                )
            })
            .collect();
        layers.push((gratings, blobs, rng.random_range(-0.3..0.3)));
    }
    let texture: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-0.06..0.06)).collect();
    Tensor::from_fn(&[size, size, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let (gratings, blobs, offset) = &layers[c];
        let mut v = *offset + texture[i];
        for &(fx, fy, phase, amp) in gratings {
            v += amp * (fx * x + fy * y + phase).sin();
        }
        for &(cy, cx, r, amp) in blobs {
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            v += amp * (-d2 / (2.0 * r * r)).exp();
        }
        (0.5 + 0.45 * v.tanh()) as f32
    })
}

pub const OVERFIT_PAIRS: usize = 8;
pub const OVERFIT_COVER_SEED: u64 = 100;
pub const OVERFIT_PAYLOAD_SEED: u64 = 200;

/// Seeded 64-byte payload `i` of the overfit corpus.
pub fn overfit_payload(i: usize) -> [u8; PAYLOAD_LEN] {
    let mut rng = ChaCha8Rng::seed_from_u64(OVERFIT_PAYLOAD_SEED + i as u64);
    let mut p = [0u8; PAYLOAD_LEN];
    rng.fill(&mut p[..]);
    p
}

/// The fixed (watermark, cover) pairs of the overfit runs: cover i uses seed
/// 100+i; watermark i is the Reed–Solomon packing of [`overfit_payload`]`(i)`,
/// so photos of the marked images can be decoded end to end.
pub fn overfit_pairs() -> Vec<(Tensor, Tensor)> {
    (0..OVERFIT_PAIRS)
        .map(|i| {
            (
                watermark_pack(&overfit_payload(i)).expect("64-byte payload"),
                synthetic_cover(OVERFIT_COVER_SEED + i as u64, 128),
            )
        })
        .collect()
}
