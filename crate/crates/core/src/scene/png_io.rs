//! PNG readers/writers for the handful of image kinds the pipeline moves
//! around: 8-bit linear RGB, 16-bit RGB normal maps, 8/16-bit grayscale.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::math::{vec3, Vec3};
use crate::scene::SceneError;

/// Raw decoded PNG: per-channel samples scaled to [0,1].
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<f64>,
}

pub fn read_png(path: &Path) -> Result<DecodedPng, SceneError> {
    let file = File::open(path).map_err(|e| SceneError::MissingImage {
        path: path.to_path_buf(),
        source: e,
    })?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| SceneError::BadImage(path.to_path_buf(), e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| SceneError::BadImage(path.to_path_buf(), e.to_string()))?;
    let width = info.width as usize;
    let height = info.height as usize;
    let channels = info.color_type.samples();
    let n = width * height * channels;
    let samples = match info.bit_depth {
        png::BitDepth::Eight => buf[..n].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => {
            return Err(SceneError::BadImage(
                path.to_path_buf(),
                format!("unsupported bit depth {other:?}"),
            ))
        }
    };
    Ok(DecodedPng {
        width,
        height,
        channels,
        samples,
    })
}

impl DecodedPng {
    /// Collapse to RGB rows, ignoring alpha; grayscale replicates.
    pub fn to_rgb(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for px in self.samples.chunks_exact(self.channels) {
            let rgb = match self.channels {
                1 | 2 => [px[0], px[0], px[0]],
                _ => [px[0], px[1], px[2]],
            };
            out.push(rgb);
        }
        out
    }

    /// First channel only.
    pub fn to_gray(&self) -> Vec<f64> {
        self.samples
            .chunks_exact(self.channels)
            .map(|px| px[0])
            .collect()
    }
}

fn create_writer(
    path: &Path,
    width: usize,
    height: usize,
) -> Result<png::Encoder<'static, BufWriter<File>>, SceneError> {
    let file = File::create(path).map_err(|e| SceneError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(png::Encoder::new(
        BufWriter::new(file),
        width as u32,
        height as u32,
    ))
}

fn finish_write<W: std::io::Write>(
    mut enc: png::Encoder<'static, W>,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
    path: &Path,
) -> Result<(), SceneError> {
    enc.set_color(color);
    enc.set_depth(depth);
    let io_err = |e: png::EncodingError| SceneError::BadImage(path.to_path_buf(), e.to_string());
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(bytes).map_err(io_err)?;
    Ok(())
}

/// 8-bit RGB with [0,1] channels clamped and rounded.
pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<(), SceneError> {
    assert_eq!(rgb.len(), width * height);
    let mut bytes = Vec::with_capacity(rgb.len() * 3);
    for px in rgb {
        for c in px {
            bytes.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let enc = create_writer(path, width, height)?;
    finish_write(enc, png::ColorType::Rgb, png::BitDepth::Eight, &bytes, path)
}

/// 16-bit RGB with [0,1] channels (used for normal maps, encoded (n+1)/2).
pub fn write_rgb16(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<(), SceneError> {
    assert_eq!(rgb.len(), width * height);
    let mut bytes = Vec::with_capacity(rgb.len() * 6);
    for px in rgb {
        for c in px {
            let v = (c.clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&v.to_be_bytes());
        }
    }
    let enc = create_writer(path, width, height)?;
    finish_write(enc, png::ColorType::Rgb, png::BitDepth::Sixteen, &bytes, path)
}

/// 8-bit single-channel mask: true -> 255, false -> 0.
pub fn write_mask8(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<(), SceneError> {
    assert_eq!(mask.len(), width * height);
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let enc = create_writer(path, width, height)?;
    finish_write(enc, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes, path)
}

/// 16-bit grayscale with values in [0,1].
pub fn write_gray16(path: &Path, width: usize, height: usize, gray: &[f64]) -> Result<(), SceneError> {
    assert_eq!(gray.len(), width * height);
    let mut bytes = Vec::with_capacity(gray.len() * 2);
    for g in gray {
        let v = (g.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let enc = create_writer(path, width, height)?;
    finish_write(enc, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes, path)
}

/// Decode a normal map: n = 2c - 1 per channel, renormalized. Pixels whose
/// decoded norm is below 0.1 (background fill) come back as the zero vector.
pub fn decode_normal_map(png: &DecodedPng) -> Vec<Vec3> {
    png.to_rgb()
        .iter()
        .map(|px| {
            let n = vec3(2.0 * px[0] - 1.0, 2.0 * px[1] - 1.0, 2.0 * px[2] - 1.0);
            match n.try_normalized(0.1) {
                Some(u) => u,
                None => Vec3::ZERO,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_roundtrip() {
        let dir = std::env::temp_dir().join("refneus_png_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt8.png");
        let pixels = vec![[0.0, 0.5, 1.0], [1.0, 0.25, 0.75], [0.1, 0.2, 0.3], [0.9, 0.8, 0.7]];
        write_rgb8(&path, 2, 2, &pixels).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!((back.width, back.height, back.channels), (2, 2, 3));
        for (a, b) in back.to_rgb().iter().zip(pixels.iter()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }

    #[test]
    fn gray16_roundtrip() {
        let dir = std::env::temp_dir().join("refneus_png_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt16.png");
        let gray = vec![0.0, 0.123456, 0.5, 1.0];
        write_gray16(&path, 2, 2, &gray).unwrap();
        let back = read_png(&path).unwrap();
        for (a, b) in back.to_gray().iter().zip(gray.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-9);
        }
    }

    #[test]
    fn normal_map_16bit_stays_unit_within_1e4() {
        let dir = std::env::temp_dir().join("refneus_png_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("nm16.png");
        let n = vec3(0.3, -0.5, 0.81).normalized();
        let enc = [[(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0]];
        write_rgb16(&path, 1, 1, &enc).unwrap();
        let decoded = decode_normal_map(&read_png(&path).unwrap());
        assert!((decoded[0].norm() - 1.0).abs() < 1e-4);
        assert!((decoded[0] - n).norm() < 1e-3);
    }
}
