//! PSNR, bit error rate, robustness sweeps and the invariance-layer ablation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack, AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::net::WatermarkingModel;
use crate::tensor::Tensor;

/// 10·log₁₀(max(c)² / MSE(c, m)) with the peak taken from the cover.
/// Identical images give `f64::INFINITY`.
pub fn psnr(c: &Tensor, m: &Tensor) -> Result<f64> {
    if c.shape() != m.shape() {
        return Err(Error::shape("psnr", c.shape(), m.shape()));
    }
    let peak = c.data().iter().fold(0.0f64, |acc, &v| acc.max(v as f64));
    if peak <= 0.0 {
        return Err(Error::invalid("psnr is undefined for an all-zero cover"));
    }
    let mse = c
        .data()
        .iter()
        .zip(m.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / c.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Formats a PSNR value, writing the identical-image sentinel as "inf".
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Thresholds at 0.5; exactly 0.5 maps to 1.
pub fn binarize(w: &Tensor) -> Tensor {
    w.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Percentage of mismatched bits after binarizing both watermarks.
pub fn ber(w: &Tensor, extracted: &Tensor) -> Result<f64> {
    if w.shape() != extracted.shape() {
        return Err(Error::shape("ber", w.shape(), extracted.shape()));
    }
    if w.is_empty() {
        return Ok(0.0);
    }
    let errors = w
        .data()
        .iter()
        .zip(extracted.data())
        .filter(|(&a, &b)| (a >= 0.5) != (b >= 0.5))
        .count();
    Ok(errors as f64 * 100.0 / w.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub strength: f64,
    pub mean_ber: f64,
    pub mean_psnr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: AttackKind,
    pub points: Vec<SweepPoint>,
}

/// One attack kind and its strictly increasing strength grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub kind: AttackKind,
    pub strengths: Vec<f64>,
}

/// JSON grid accepted by the `sweep` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub seed: u64,
    pub attacks: Vec<SweepAxis>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        for axis in &self.attacks {
            if axis.strengths.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "{} strengths must be strictly increasing",
                    axis.kind
                )));
            }
            for &s in &axis.strengths {
                AttackSpec::new(axis.kind, s, 0).validate()?;
            }
        }
        Ok(())
    }
}

/// Per-pair attack seed: the run seed offset by the pair index.
fn pair_seed(seed: u64, pair: usize) -> u64 {
    seed.wrapping_add(pair as u64)
}

fn embed_all(model: &WatermarkingModel, pairs: &[(Tensor, Tensor)]) -> Result<Vec<Tensor>> {
    pairs.par_iter().map(|(w, c)| model.embed_image(w, c)).collect()
}

/// Embed → attack → extract → BER for every (kind, strength, pair),
/// averaged over pairs in pair order.
pub fn robustness_sweep(
    model: &WatermarkingModel,
    pairs: &[(Tensor, Tensor)],
    grid: &SweepGrid,
) -> Result<Vec<SweepResult>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("robustness sweep needs at least one pair".into()));
    }
    grid.validate()?;
    let marked = embed_all(model, pairs)?;
    let mut results = Vec::with_capacity(grid.attacks.len());
    for axis in &grid.attacks {
        let mut points = Vec::with_capacity(axis.strengths.len());
        for &strength in &axis.strengths {
            let per_pair: Vec<Result<(f64, f64)>> = (0..pairs.len())
                .into_par_iter()
                .map(|i| {
                    let spec = AttackSpec::new(axis.kind, strength, pair_seed(grid.seed, i));
                    let attacked = apply_attack(&marked[i], &spec)?;
                    let extracted = model.extract_image(&attacked)?;
                    Ok((ber(&pairs[i].0, &extracted)?, psnr(&pairs[i].1, &attacked)?))
                })
                .collect();
            let mut sum_ber = 0.0;
            let mut sum_psnr = 0.0;
            for item in per_pair {
                let (b, p) = item?;
                sum_ber += b;
                sum_psnr += p;
            }
            let n = pairs.len();
            points.push(SweepPoint {
                strength,
                mean_ber: sum_ber / n as f64,
                mean_psnr: sum_psnr / n as f64,
                n,
            });
        }
        results.push(SweepResult { kind: axis.kind, points });
    }
    Ok(results)
}

pub fn sweep_csv(results: &[SweepResult]) -> String {
    let mut out = String::from("kind,strength,mean_ber,mean_psnr,n\n");
    for r in results {
        for p in &r.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.kind,
                p.strength,
                p.mean_ber,
                format_psnr(p.mean_psnr),
                p.n
            );
        }
    }
    out
}

/// Line chart of mean BER against strength for one attack kind.
pub fn sweep_svg(result: &SweepResult) -> String {
    let (w, h, margin) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = result.points.iter().map(|p| p.strength).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |v: f64| margin + (v - x0) / span * (w - 2.0 * margin);
    let py = |ber: f64| h - margin - ber / 100.0 * (h - 2.0 * margin);
    let points: Vec<String> = result
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", px(p.strength), py(p.mean_ber)))
        .collect();
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{margin}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{margin}" y1="{margin}" x2="{margin}" y2="{b}" stroke="black"/>"#,
        b = h - margin,
        r = w - margin
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{} strength</text>"#,
        w / 2.0,
        h - 12.0,
        result.kind
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">mean BER (%)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (label, v) in [("0", 0.0), ("50", 50.0), ("100", 100.0)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="10">{label}</text>"#,
            margin - 4.0,
            py(v) + 3.0
        );
    }
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-size="10">{v}</text>"#,
            px(v),
            h - margin + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes one `<kind>.svg` per sweep result into `dir`.
pub fn write_sweep_svgs(results: &[SweepResult], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in results {
        let path = dir.join(format!("{}.svg", r.kind));
        std::fs::write(&path, sweep_svg(r)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub attack: AttackSpec,
    pub with_tau: f64,
    pub without_tau: f64,
    pub n: usize,
}

impl AblationResult {
    pub fn csv(&self) -> String {
        let mut out = String::from("variant,kind,strength,mean_ber,n\n");
        for (name, v) in [("with_tau", self.with_tau), ("without_tau", self.without_tau)] {
            let _ = writeln!(out, "{name},{},{},{v},{}", self.attack.kind, self.attack.strength, self.n);
        }
        out
    }
}

/// Mean BER of both variants on the same pairs under the same attack. Each
/// model embeds with its own embedder; the attack seed per pair is shared.
pub fn ablation_tau(
    with_tau: &WatermarkingModel,
    without_tau: &WatermarkingModel,
    pairs: &[(Tensor, Tensor)],
    attack: &AttackSpec,
) -> Result<AblationResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("ablation needs at least one pair".into()));
    }
    if !with_tau.config().invariance || without_tau.config().invariance {
        return Err(Error::invalid(
            "ablation expects a model with the invariance layer and one without it",
        ));
    }
    if with_tau.config().watermark_size != without_tau.config().watermark_size {
        return Err(Error::invalid("ablation models disagree on watermark size"));
    }
    attack.validate()?;
    let mean_ber = |model: &WatermarkingModel| -> Result<f64> {
        let bers: Vec<Result<f64>> = (0..pairs.len())
            .into_par_iter()
            .map(|i| {
                let (w, c) = &pairs[i];
                let marked = model.embed_image(w, c)?;
                let spec = AttackSpec { seed: pair_seed(attack.seed, i), ..*attack };
                let attacked = apply_attack(&marked, &spec)?;
                ber(w, &model.extract_image(&attacked)?)
            })
            .collect();
        let mut sum = 0.0;
        for b in bers {
            sum += b?;
        }
        Ok(sum / pairs.len() as f64)
    };
    Ok(AblationResult {
        attack: *attack,
        with_tau: mean_ber(with_tau)?,
        without_tau: mean_ber(without_tau)?,
        n: pairs.len(),
    })
}
