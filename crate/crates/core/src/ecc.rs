//! Reed–Solomon RS(32,16) over GF(256) and the 512-bit payload layout of
//! the 32×32 watermark.
//!
//! Codeword byte 0 is the highest-degree coefficient. The generator has
//! roots α¹…α¹⁶ with α = 0x02 under the field polynomial 0x11D, so up to 8
//! corrupted bytes per codeword are corrected.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FIELD_POLY: u16 = 0x11D;
/// Codeword length n.
pub const CODE_LEN: usize = 32;
/// Message length k.
pub const DATA_LEN: usize = 16;
pub const PARITY_LEN: usize = CODE_LEN - DATA_LEN;
/// Correctable symbol errors per codeword.
pub const MAX_ERRORS: usize = PARITY_LEN / 2;
pub const PAYLOAD_LEN: usize = 64;
pub const BLOCKS: usize = PAYLOAD_LEN / DATA_LEN;
pub const WATERMARK_SIDE: usize = 32;

struct Tables {
    exp: [u8; 512],
    log: [u8; 256],
}

const fn build_tables() -> Tables {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= FIELD_POLY;
        }
        i += 1;
    }
    while i < 512 {
        exp[i] = exp[i - 255];
        i += 1;
    }
    Tables { exp, log }
}

static TABLES: Tables = build_tables();

pub fn gf_mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        return 0;
    }
    TABLES.exp[TABLES.log[a as usize] as usize + TABLES.log[b as usize] as usize]
}

pub fn gf_inv(a: u8) -> Result<u8> {
    if a == 0 {
        return Err(Error::invalid("zero has no inverse in GF(256)"));
    }
    Ok(TABLES.exp[255 - TABLES.log[a as usize] as usize])
}

/// α^e for any integer exponent.
pub fn gf_alpha_pow(e: i64) -> u8 {
    TABLES.exp[e.rem_euclid(255) as usize]
}

fn gf_div(a: u8, b: u8) -> u8 {
    debug_assert!(b != 0);
    if a == 0 {
        return 0;
    }
    TABLES.exp[TABLES.log[a as usize] as usize + 255 - TABLES.log[b as usize] as usize]
}

/// Horner evaluation of a highest-degree-first polynomial.
fn eval_high_first(poly: &[u8], x: u8) -> u8 {
    poly.iter().fold(0, |acc, &c| gf_mul(acc, x) ^ c)
}

/// Horner evaluation of a lowest-degree-first polynomial.
fn eval_low_first(poly: &[u8], x: u8) -> u8 {
    poly.iter().rev().fold(0, |acc, &c| gf_mul(acc, x) ^ c)
}

/// Π_{i=1..16} (x − αⁱ), highest degree first, monic.
pub fn generator() -> [u8; PARITY_LEN + 1] {
    let mut g = [0u8; PARITY_LEN + 1];
    g[0] = 1;
    for i in 1..=PARITY_LEN {
        let root = gf_alpha_pow(i as i64);
        for j in (1..=i).rev() {
            g[j] ^= gf_mul(g[j - 1], root);
        }
    }
    g
}

/// Systematic encoding: the payload followed by payload·x¹⁶ mod g(x).
pub fn rs_encode(payload: &[u8]) -> Result<[u8; CODE_LEN]> {
    if payload.len() != DATA_LEN {
        return Err(Error::invalid(format!(
            "rs_encode expects {DATA_LEN} bytes, got {}",
            payload.len()
        )));
    }
    let mut out = [0u8; CODE_LEN];
    out[..DATA_LEN].copy_from_slice(payload);
    out[DATA_LEN..].copy_from_slice(&parity(payload));
    Ok(out)
}

fn parity(message: &[u8]) -> [u8; PARITY_LEN] {
    let g = generator();
    let mut rem = [0u8; PARITY_LEN];
    for &m in message {
        let coef = m ^ rem[0];
        rem.copy_within(1.., 0);
        rem[PARITY_LEN - 1] = 0;
        if coef != 0 {
            for (r, &gi) in rem.iter_mut().zip(&g[1..]) {
                *r ^= gf_mul(gi, coef);
            }
        }
    }
    rem
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RsDecoded {
    pub payload: [u8; DATA_LEN],
    /// Number of symbols that were corrected.
    pub corrected: usize,
}

/// Decodes one codeword; failure is reported as block 0.
pub fn rs_decode(received: &[u8]) -> Result<RsDecoded> {
    decode_block(received, 0)
}

fn decode_block(received: &[u8], block: usize) -> Result<RsDecoded> {
    if received.len() != CODE_LEN {
        return Err(Error::invalid(format!(
            "rs_decode expects {CODE_LEN} bytes, got {}",
            received.len()
        )));
    }
    let mut word = received.to_vec();
    let corrected = correct_in_place(&mut word).ok_or(Error::Uncorrectable { block })?;
    let mut payload = [0u8; DATA_LEN];
    payload.copy_from_slice(&word[..DATA_LEN]);
    Ok(RsDecoded { payload, corrected })
}

fn syndromes(word: &[u8]) -> [u8; PARITY_LEN] {
    let mut s = [0u8; PARITY_LEN];
    for (i, si) in s.iter_mut().enumerate() {
        *si = eval_high_first(word, gf_alpha_pow(i as i64 + 1));
    }
    s
}

/// Berlekamp–Massey; returns the error locator Λ lowest degree first.
fn berlekamp_massey(s: &[u8; PARITY_LEN]) -> Vec<u8> {
    let mut c = vec![1u8];
    let mut b = vec![1u8];
    let mut len = 0usize;
    let mut shift = 1usize;
    let mut last = 1u8;
    for n in 0..PARITY_LEN {
        let mut d = s[n];
        for i in 1..=len.min(c.len() - 1) {
            d ^= gf_mul(c[i], s[n - i]);
        }
        if d == 0 {
            shift += 1;
            continue;
        }
        let coef = gf_div(d, last);
        let prev = c.clone();
        if c.len() < b.len() + shift {
            c.resize(b.len() + shift, 0);
        }
        for (i, &bi) in b.iter().enumerate() {
            c[i + shift] ^= gf_mul(coef, bi);
        }
        if 2 * len <= n {
            len = n + 1 - len;
            b = prev;
            last = d;
            shift = 1;
        } else {
            shift += 1;
        }
    }
    c.truncate(len + 1);
    c
}

/// Corrects up to 8 symbol errors in a codeword of any length ≤ 255 with
/// 16 parity symbols. Returns the number of corrections, or `None` when the
/// error pattern is beyond the correction radius.
fn correct_in_place(word: &mut [u8]) -> Option<usize> {
    let n = word.len();
    let s = syndromes(word);
    if s.iter().all(|&v| v == 0) {
        return Some(0);
    }
    let lambda = berlekamp_massey(&s);
    let degree = lambda.len() - 1;
    if degree == 0 || degree > MAX_ERRORS {
        return None;
    }
    // Chien search over the positions that exist in this (possibly shortened) code.
    let mut positions = Vec::with_capacity(degree);
    for j in 0..n {
        let power = (n - 1 - j) as i64;
        if eval_low_first(&lambda, gf_alpha_pow(-power)) == 0 {
            positions.push(j);
        }
    }
    if positions.len() != degree {
        return None;
    }
    // Ω(x) = S(x)·Λ(x) mod x¹⁶, and Λ'(x) keeps the odd terms in characteristic 2.
    let mut omega = [0u8; PARITY_LEN];
    for (i, &li) in lambda.iter().enumerate() {
        for (k, &sk) in s.iter().enumerate() {
            if i + k < PARITY_LEN {
                omega[i + k] ^= gf_mul(li, sk);
            }
        }
    }
    let derivative: Vec<u8> = lambda
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &c)| if i % 2 == 1 { c } else { 0 })
        .collect();
    for &j in &positions {
        let power = (n - 1 - j) as i64;
        let x_inv = gf_alpha_pow(-power);
        let denom = eval_low_first(&derivative, x_inv);
        if denom == 0 {
            return None;
        }
        word[j] ^= gf_div(eval_low_first(&omega, x_inv), denom);
    }
    if syndromes(word).iter().any(|&v| v != 0) {
        return None;
    }
    Some(degree)
}

/// 64-byte payload → 32×32 binary watermark. Each 16-byte block becomes a
/// 32-byte codeword filling 8 rows, bits MSB first, row-major.
pub fn watermark_pack(payload: &[u8]) -> Result<Tensor> {
    if payload.len() != PAYLOAD_LEN {
        return Err(Error::invalid(format!(
            "watermark_pack expects {PAYLOAD_LEN} bytes, got {}",
            payload.len()
        )));
    }
    let mut bits = Vec::with_capacity(WATERMARK_SIDE * WATERMARK_SIDE);
    for block in payload.chunks_exact(DATA_LEN) {
        for byte in rs_encode(block)? {
            for bit in (0..8).rev() {
                bits.push(f32::from((byte >> bit) & 1));
            }
        }
    }
    Tensor::new(&[WATERMARK_SIDE, WATERMARK_SIDE, 1], bits)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unpacked {
    pub payload: [u8; PAYLOAD_LEN],
    /// Corrected symbols over all blocks.
    pub corrected: usize,
    pub per_block: [usize; BLOCKS],
}

/// Inverse of [`watermark_pack`]. Values are binarized at 0.5, ties to 1.
pub fn watermark_unpack(w: &Tensor) -> Result<Unpacked> {
    let side = WATERMARK_SIDE;
    if w.shape() != [side, side, 1] {
        return Err(Error::shape("watermark_unpack", w.shape(), &[side, side, 1]));
    }
    let bytes = bits_to_bytes(w);
    let mut payload = [0u8; PAYLOAD_LEN];
    let mut per_block = [0usize; BLOCKS];
    for (b, code) in bytes.chunks_exact(CODE_LEN).enumerate() {
        let d = decode_block(code, b)?;
        payload[b * DATA_LEN..(b + 1) * DATA_LEN].copy_from_slice(&d.payload);
        per_block[b] = d.corrected;
    }
    Ok(Unpacked {
        payload,
        corrected: per_block.iter().sum(),
        per_block,
    })
}

/// The 128 coded bytes read back from a watermark image.
pub fn bits_to_bytes(w: &Tensor) -> Vec<u8> {
    w.data()
        .chunks_exact(8)
        .map(|bits| bits.iter().fold(0u8, |acc, &v| (acc << 1) | u8::from(v >= 0.5)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Carry-less multiply reduced bit by bit, independent of the tables.
    fn slow_mul(a: u8, b: u8) -> u8 {
        let mut acc: u16 = 0;
        let mut x = a as u16;
        for bit in 0..8 {
            if b >> bit & 1 == 1 {
                acc ^= x;
            }
            x <<= 1;
            if x & 0x100 != 0 {
                x ^= FIELD_POLY;
            }
        }
        acc as u8
    }

    fn slow_pow(a: u8, e: usize) -> u8 {
        (0..e).fold(1, |acc, _| slow_mul(acc, a))
    }

    #[test]
    fn mul_matches_bitwise_reduction() {
        assert_eq!(gf_mul(0x02, 0x80), 0x1D);
        for a in 0..=255u8 {
            assert_eq!(gf_mul(a, 1), a);
            for b in 0..=255u8 {
                assert_eq!(gf_mul(a, b), slow_mul(a, b), "{a} * {b}");
            }
        }
    }

    #[test]
    fn inverse() {
        assert!(gf_inv(0).is_err());
        for a in 1..=255u8 {
            assert_eq!(gf_mul(a, gf_inv(a).unwrap()), 1);
        }
    }

    #[test]
    fn zero_payload_is_zero_codeword() {
        assert_eq!(rs_encode(&[0; 16]).unwrap(), [0; 32]);
        assert!(rs_encode(&[0; 15]).is_err());
    }

    #[test]
    fn codewords_vanish_at_generator_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let payload: Vec<u8> = (0..16).map(|_| rng.random()).collect();
            let code = rs_encode(&payload).unwrap();
            assert_eq!(&code[..16], &payload[..]);
            for i in 1..=16 {
                let root = slow_pow(2, i);
                let v = code.iter().fold(0, |acc, &c| slow_mul(acc, root) ^ c);
                assert_eq!(v, 0, "root α^{i}");
            }
        }
    }

    #[test]
    fn golden_codeword() {
        // Parity produced by the `reedsolo` Python package (fcr=1, prim=0x11d).
        let payload: Vec<u8> = (0..16).collect();
        let expected = [
            0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 251, 157, 11, 234, 111, 218, 136, 51, 74, 208,
            173, 140, 67, 46, 188, 10,
        ];
        assert_eq!(rs_encode(&payload).unwrap(), expected);
    }

    #[test]
    fn clean_and_single_byte_errors() {
        let payload: Vec<u8> = (100..116).collect();
        let code = rs_encode(&payload).unwrap();
        let d = rs_decode(&code).unwrap();
        assert_eq!((d.payload.to_vec(), d.corrected), (payload.clone(), 0));
        for pos in 0..32 {
            for bit in 0..8 {
                let mut r = code;
                r[pos] ^= 1 << bit;
                let d = rs_decode(&r).unwrap();
                assert_eq!(d.payload.to_vec(), payload);
                assert_eq!(d.corrected, 1);
            }
        }
    }

    #[test]
    fn eight_random_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let payload: Vec<u8> = (0..16).map(|_| rng.random()).collect();
            let mut r = rs_encode(&payload).unwrap();
            let positions = rand::seq::index::sample(&mut rng, 32, 8);
            for p in positions {
                r[p] ^= rng.random_range(1..=255u8);
            }
            let d = rs_decode(&r).unwrap();
            assert_eq!(d.payload.to_vec(), payload);
            assert_eq!(d.corrected, 8);
        }
    }

    #[test]
    fn nine_errors_can_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let payload = [7u8; 16];
        let code = rs_encode(&payload).unwrap();
        let mut seen_failure = false;
        for _ in 0..200 {
            let mut r = code;
            for p in rand::seq::index::sample(&mut rng, 32, 9) {
                r[p] ^= rng.random_range(1..=255u8);
            }
            match rs_decode(&r) {
                Ok(d) => assert_ne!(d.payload, payload, "9 errors cannot decode to the original"),
                Err(Error::Uncorrectable { block: 0 }) => seen_failure = true,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(seen_failure);
    }

    #[test]
    fn shortened_code_matches_zero_prefixed_full_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for errors in 0..=8 {
            let payload: Vec<u8> = (0..16).map(|_| rng.random()).collect();
            let mut r = rs_encode(&payload).unwrap().to_vec();
            for p in rand::seq::index::sample(&mut rng, 32, errors) {
                r[p] ^= rng.random_range(1..=255u8);
            }
            let mut full = vec![0u8; 223];
            full.extend_from_slice(&r);
            let mut short = r.clone();
            assert_eq!(correct_in_place(&mut full), Some(errors));
            assert_eq!(correct_in_place(&mut short), Some(errors));
            assert!(full[..223].iter().all(|&v| v == 0));
            assert_eq!(&full[223..], &short[..]);
            assert_eq!(&short[..16], &payload[..]);
        }
    }

    #[test]
    fn pack_layout_and_golden() {
        let payload = b"DEEPMARK".repeat(8);
        let w = watermark_pack(&payload).unwrap();
        // First row holds the first 4 codeword bytes: "DEEP" MSB first.
        let row0: String = w.data()[..32].iter().map(|&v| if v == 1.0 { '1' } else { '0' }).collect();
        assert_eq!(row0, "01000100010001010100010101010000");
        // Rows 4..8 carry the parity of block 0, identical for every block.
        let parity = [116u8, 238, 221, 94, 123, 169, 228, 184, 158, 18, 62, 11, 221, 251, 194, 47];
        let bytes = bits_to_bytes(&w);
        for b in 0..4 {
            assert_eq!(&bytes[b * 32..b * 32 + 16], &payload[b * 16..(b + 1) * 16]);
            assert_eq!(&bytes[b * 32 + 16..(b + 1) * 32], &parity);
        }
        let u = watermark_unpack(&w).unwrap();
        assert_eq!((u.payload.to_vec(), u.corrected), (payload, 0));
    }

    #[test]
    fn twelve_bit_flips_in_one_band() {
        let payload: Vec<u8> = (0..64).map(|i| (i * 37 % 251) as u8).collect();
        let mut w = watermark_pack(&payload).unwrap();
        // 12 flips in block 2 touching 6 bytes (two bits each).
        for byte in [64usize, 70, 75, 81, 88, 95] {
            for bit in [0, 5] {
                let idx = byte * 8 + bit;
                let v = &mut w.data_mut()[idx];
                *v = 1.0 - *v;
            }
        }
        let u = watermark_unpack(&w).unwrap();
        assert_eq!(u.payload.to_vec(), payload);
        assert_eq!(u.per_block, [0, 0, 6, 0]);
    }

    #[test]
    fn unpack_names_failing_block() {
        let payload = [0u8; 64];
        let mut w = watermark_pack(&payload).unwrap();
        for byte in 96..96 + 12 {
            w.data_mut()[byte * 8] = 1.0;
        }
        match watermark_unpack(&w) {
            Err(Error::Uncorrectable { block }) => assert_eq!(block, 3),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn pack_roundtrip(payload in proptest::collection::vec(any::<u8>(), 64)) {
            let u = watermark_unpack(&watermark_pack(&payload).unwrap()).unwrap();
            prop_assert_eq!(u.payload.to_vec(), payload);
            prop_assert_eq!(u.corrected, 0);
        }
    }
}
