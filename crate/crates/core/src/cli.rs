//! Command-line front end of the `deepmark` executable.
//!
//! Exit codes: 0 on success, 1 on a domain error (missing file, bad
//! checkpoint, uncorrectable payload, failing gradient check), 2 on a usage
//! error (bad flags, malformed JSON).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::attacks::{apply_attack, AttackKind, AttackSpec};
use crate::camera::{extract_from_photo, simulate_capture, CaptureReport, CaptureSpec};
use crate::checkpoint::Checkpoint;
use crate::data::{load_covers, load_watermarks, resize_bilinear, to_watermark};
use crate::ecc::{watermark_pack, watermark_unpack, PAYLOAD_LEN};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::imageio::{read_bits, read_gray, read_rgb, write_pbm, write_png};
use crate::metrics::{ablation_tau, ber, binarize, psnr, robustness_sweep, sweep_csv, write_sweep_svgs, SweepGrid};
use crate::net::WatermarkingModel;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};

pub const THREADS_ENV: &str = "DEEPMARK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "deepmark", about = "Blind, robust image watermarking", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON config; writes the checkpoint and the loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Embed a watermark into a cover image.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cover: PathBuf,
        #[arg(long)]
        watermark: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the watermark from a marked (possibly attacked) image.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        marked: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Watermark to report the bit error rate against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Apply one attack to an image.
    Attack {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        spec: AttackArgs,
    },
    /// Embed, attack and extract over a strength grid; writes a CSV.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        covers: PathBuf,
        #[arg(long)]
        watermarks: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for one SVG chart per attack kind.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Mean BER of a model with and one without the invariance layer under one attack.
    Ablation {
        #[arg(long)]
        with_tau: PathBuf,
        #[arg(long)]
        without_tau: PathBuf,
        #[arg(long)]
        covers: PathBuf,
        #[arg(long)]
        watermarks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        spec: AttackArgs,
    },
    /// Encode a 64-byte payload file into a 32×32 watermark image.
    EccEncode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a watermark image back to its 64-byte payload.
    EccDecode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate photographing a displayed marked image, then rectify and extract.
    CameraSim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        marked: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the version.
    Version,
}

/// An attack given either as a JSON file or as flags.
#[derive(Debug, Args)]
struct AttackArgs {
    /// JSON attack spec: {"kind": …, "strength": …, "seed": …}.
    #[arg(long, conflicts_with_all = ["kind", "strength", "seed"], required_unless_present = "kind")]
    spec: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<AttackKind>,
    #[arg(long, default_value_t = 0.0)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AttackArgs {
    fn resolve(&self) -> Result<AttackSpec> {
        let spec = match (&self.spec, self.kind) {
            (Some(path), _) => read_json::<AttackSpec>(path)?,
            (None, Some(kind)) => AttackSpec::new(kind, self.strength, self.seed),
            (None, None) => return Err(Error::invalid("an attack needs --spec or --kind")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_kind(s: &str) -> std::result::Result<AttackKind, String> {
    AttackKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
        let names: Vec<&str> = AttackKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown attack kind {s:?}; expected one of {}", names.join(", "))
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<WatermarkingModel> {
    Ok(Checkpoint::load(path)?.model)
}

/// An RGB image resampled to the model's cover size when it differs.
fn read_image_for(model: &WatermarkingModel, path: &Path) -> Result<Tensor> {
    let img = read_rgb(path)?;
    let s = model.config().cover_size();
    if img.shape() == [s, s, 3] {
        Ok(img)
    } else {
        resize_bilinear(&img, s, s)
    }
}

fn paired_dataset(model: &WatermarkingModel, covers: &Path, watermarks: &Path) -> Result<Vec<(Tensor, Tensor)>> {
    let covers = load_covers(covers)?;
    let marks = load_watermarks(watermarks)?;
    if covers.len() != marks.len() {
        return Err(Error::invalid(format!(
            "{} covers but {} watermarks; pairs are formed by sorted file name",
            covers.len(),
            marks.len()
        )));
    }
    let s = model.config().cover_size();
    if covers.first().is_some_and(|c| c.shape() != [s, s, 3]) {
        return Err(Error::invalid(format!("model expects {s}×{s} covers")));
    }
    Ok(marks.into_iter().zip(covers).collect())
}

/// Caps rayon's global pool at `DEEPMARK_THREADS` when set.
fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    // A pool that already exists (a second call in the same process) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        let _ = writeln!(err, "error: {msg}");
        return 2;
    }
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    let mut say = |line: &str| {
        let _ = writeln!(out, "{line}");
    };
    match command {
        Command::Version => say(&format!("deepmark {}", env!("CARGO_PKG_VERSION"))),
        Command::Train { config } => {
            let cfg = TrainConfig::from_json(&read_text(&config)?, &config.display().to_string())?;
            let outcome = train(&cfg, &mut say)?;
            say(&format!(
                "trained {} steps; checkpoint {}; log {}",
                outcome.steps,
                cfg.checkpoint_path.display(),
                cfg.log_path.display()
            ));
        }
        Command::Embed {
            model,
            cover,
            watermark,
            out: dest,
        } => {
            let model = load_model(&model)?;
            let c = read_image_for(&model, &cover)?;
            let w = to_watermark(&read_gray(&watermark)?)?;
            let m = model.embed_image(&w, &c)?;
            write_png(&dest, &m)?;
            say(&format!("psnr {:.4} dB", psnr(&c, &m)?));
        }
        Command::Extract {
            model,
            marked,
            out: dest,
            reference,
        } => {
            let model = load_model(&model)?;
            let m = read_image_for(&model, &marked)?;
            let bits = binarize(&model.extract_image(&m)?);
            write_pbm(&dest, &bits)?;
            if let Some(r) = reference {
                say(&format!("ber {:.4}%", ber(&to_watermark(&read_gray(&r)?)?, &bits)?));
            }
        }
        Command::Attack { input, out: dest, spec } => {
            let spec = spec.resolve()?;
            let m = read_rgb(&input)?;
            write_png(&dest, &apply_attack(&m, &spec)?)?;
        }
        Command::Sweep {
            model,
            covers,
            watermarks,
            grid,
            out: dest,
            svg,
        } => {
            let grid: SweepGrid = read_json(&grid)?;
            let model = load_model(&model)?;
            let pairs = paired_dataset(&model, &covers, &watermarks)?;
            let results = robustness_sweep(&model, &pairs, &grid)?;
            write_bytes(&dest, sweep_csv(&results).as_bytes())?;
            if let Some(dir) = svg {
                write_sweep_svgs(&results, &dir)?;
            }
            say(&format!("{} sweep rows written to {}", results.iter().map(|r| r.points.len()).sum::<usize>(), dest.display()));
        }
        Command::Ablation {
            with_tau,
            without_tau,
            covers,
            watermarks,
            out: dest,
            spec,
        } => {
            let spec = spec.resolve()?;
            let with = load_model(&with_tau)?;
            let without = load_model(&without_tau)?;
            let pairs = paired_dataset(&with, &covers, &watermarks)?;
            let r = ablation_tau(&with, &without, &pairs, &spec)?;
            write_bytes(&dest, r.csv().as_bytes())?;
            say(&format!("with_tau {:.4}% without_tau {:.4}% over {} pairs", r.with_tau, r.without_tau, r.n));
        }
        Command::EccEncode { input, out: dest } => {
            let payload = std::fs::read(&input).map_err(|e| Error::io(&input, e))?;
            if payload.len() != PAYLOAD_LEN {
                return Err(Error::invalid(format!(
                    "{}: payload must be exactly {PAYLOAD_LEN} bytes, got {}",
                    input.display(),
                    payload.len()
                )));
            }
            let w = watermark_pack(&payload)?;
            if dest.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                write_png(&dest, &w)?;
            } else {
                write_pbm(&dest, &w)?;
            }
        }
        Command::EccDecode { input, out: dest } => {
            let u = watermark_unpack(&read_bits(&input)?)?;
            write_bytes(&dest, &u.payload)?;
            say(&format!("corrected {} symbols (per block {:?})", u.corrected, u.per_block));
        }
        Command::CameraSim {
            model,
            marked,
            spec,
            out_dir,
            reference,
        } => {
            let spec = CaptureSpec::from_json(&read_text(&spec)?, &spec.display().to_string())?;
            let model = load_model(&model)?;
            let m = read_image_for(&model, &marked)?;
            let reference = reference.map(|r| read_gray(&r).and_then(|g| to_watermark(&g))).transpose()?;
            let capture = simulate_capture(&m, &spec)?;
            let ex = extract_from_photo(&capture.photo, &capture.corners, &model, reference.as_ref())?;
            write_png(&out_dir.join("photo.png"), &capture.photo)?;
            write_png(&out_dir.join("rectified.png"), &ex.rectified)?;
            write_pbm(&out_dir.join("extracted.pbm"), &ex.bits)?;
            let report = CaptureReport::new(&ex, &capture.corners);
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_bytes(&out_dir.join("result.json"), format!("{json}\n").as_bytes())?;
            match (&report.payload_hex, &report.failure) {
                (Some(p), _) => say(&format!("payload {p}")),
                (None, Some(f)) => say(&format!("ecc failure: {f}")),
                _ => {}
            }
        }
        Command::Gradcheck { seed } => {
            let report = run_suite(seed)?;
            for op in &report.ops {
                say(&op.to_string());
            }
            say(&report.penalty.to_string());
            let passed = report.passed();
            say(if passed { "gradcheck PASS" } else { "gradcheck FAIL" });
            return Ok(if passed { 0 } else { 1 });
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("deepmark").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn version() {
        let (code, out, _) = run_args(&["version"]);
        assert_eq!(code, 0);
        assert_eq!(out.trim(), format!("deepmark {}", env!("CARGO_PKG_VERSION")));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&["embed", "--bogus", "x"]).0, 2);
        assert_eq!(run_args(&["frobnicate"]).0, 2);
        assert_eq!(run_args(&[]).0, 2);
        assert_eq!(run_args(&["attack", "--in", "a.png", "--out", "b.png", "--kind", "shear"]).0, 2);
    }

    #[test]
    fn malformed_json_exits_2_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("spec.json");
        std::fs::write(&spec, "{\"kind\": \"jpeg\",\n \"strength\": }").unwrap();
        let img = dir.path().join("m.png");
        write_png(&img, &Tensor::full(&[8, 8, 3], 0.5)).unwrap();
        let (code, _, err) = run_args(&[
            "attack",
            "--in",
            img.to_str().unwrap(),
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            dir.path().join("o.png").to_str().unwrap(),
        ]);
        assert_eq!(code, 2, "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn missing_file_exits_1_with_path() {
        let (code, _, err) = run_args(&["ecc-decode", "--in", "/nonexistent/w.pbm", "--out", "/tmp/x.bin"]);
        assert_eq!(code, 1);
        assert!(err.contains("/nonexistent/w.pbm"), "{err}");
    }

    #[test]
    fn ecc_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..64u8).map(|i| i.wrapping_mul(37)).collect();
        let p = dir.path().join("p.bin");
        std::fs::write(&p, &payload).unwrap();
        for ext in ["pbm", "png"] {
            let w = dir.path().join(format!("w.{ext}"));
            let back = dir.path().join(format!("back-{ext}.bin"));
            assert_eq!(run_args(&["ecc-encode", "--in", p.to_str().unwrap(), "--out", w.to_str().unwrap()]).0, 0);
            let (code, out, _) = run_args(&["ecc-decode", "--in", w.to_str().unwrap(), "--out", back.to_str().unwrap()]);
            assert_eq!(code, 0);
            assert!(out.contains("corrected 0"));
            assert_eq!(std::fs::read(&back).unwrap(), payload);
        }
        std::fs::write(&p, [1u8; 10]).unwrap();
        assert_eq!(run_args(&["ecc-encode", "--in", p.to_str().unwrap(), "--out", "/tmp/unused.pbm"]).0, 1);
    }

    #[test]
    fn attack_flags_mirror_the_json_spec() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("m.png");
        write_png(&img, &crate::fixtures::synthetic_cover(1, 32)).unwrap();
        let spec = dir.path().join("s.json");
        std::fs::write(&spec, r#"{"kind": "salt_pepper", "strength": 0.1, "seed": 4}"#).unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let ip = img.to_str().unwrap();
        assert_eq!(run_args(&["attack", "--in", ip, "--spec", spec.to_str().unwrap(), "--out", a.to_str().unwrap()]).0, 0);
        let flags = ["attack", "--in", ip, "--kind", "salt_pepper", "--strength", "0.1", "--seed", "4", "--out", b.to_str().unwrap()];
        assert_eq!(run_args(&flags).0, 0);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        // Out-of-range strength is a domain error.
        let bad = ["attack", "--in", ip, "--kind", "jpeg", "--strength", "0", "--out", b.to_str().unwrap()];
        assert_eq!(run_args(&bad).0, 1);
    }
}
