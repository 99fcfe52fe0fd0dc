//! Reading and writing images: PNG for color images, PBM for binary
//! watermarks. Tensors hold values in [0, 1]. PNGs are written with 16-bit
//! samples; 8- and 16-bit files are read.

use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| image_error(path, e))
}

/// Any supported image as H×W×3 RGB in [0, 1]; grayscale is replicated.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_rgb16();
    let (w, h) = img.dimensions();
    Tensor::new(
        &[h as usize, w as usize, 3],
        img.into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect(),
    )
}

/// Any supported image as H×W×1 luminance in [0, 1].
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Tensor::new(
        &[h as usize, w as usize, 1],
        img.into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect(),
    )
}

/// Rounds [0, 1] values to 8-bit samples.
pub fn to_u8(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Rounds [0, 1] values to 16-bit samples, as native-endian bytes.
pub fn to_u16_bytes(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_ne_bytes())
        .collect()
}

/// Writes an H×W×3 (RGB) or H×W×1 (gray) tensor as a 16-bit PNG with fixed
/// encoder settings, so equal tensors give equal files.
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = t.hwc()?;
    let color = match c {
        1 => ExtendedColorType::L16,
        3 => ExtendedColorType::Rgb16,
        _ => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    let enc = PngEncoder::new_with_quality(create(path)?, CompressionType::Default, FilterType::Adaptive);
    enc.write_image(&to_u16_bytes(t), w as u32, h as u32, color)
        .map_err(|e| image_error(path, e))
}

/// Writes a binary watermark as a raw (P4) PBM. Values ≥ 0.5 are white,
/// which PBM stores as a clear bit.
pub fn write_pbm(path: &Path, w: &Tensor) -> Result<()> {
    let (h, wd, c) = w.hwc()?;
    if c != 1 {
        return Err(Error::shape("write_pbm", w.shape(), &[h, wd, 1]));
    }
    let mut out = format!("P4\n{wd} {h}\n").into_bytes();
    for row in w.data().chunks(wd) {
        let mut packed = vec![0u8; wd.div_ceil(8)];
        for (x, &v) in row.iter().enumerate() {
            if v < 0.5 {
                packed[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    let mut file = create(path)?;
    file.write_all(&out).and_then(|_| file.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a watermark image (any format) as H×W×1 bits, thresholding at 0.5.
pub fn read_bits(path: &Path) -> Result<Tensor> {
    Ok(read_gray(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}
