//! PNG storage for images (16-bit grayscale) and masks (8-bit raw class ids).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image plane with intensities in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width, data.len());
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(height * width, data.len());
        Self {
            height,
            width,
            data,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes.max(self.data.iter().map(|&v| v as usize + 1).max().unwrap_or(0))];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

pub fn intensity_to_u16(v: f32) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

pub fn u16_to_intensity(v: u16) -> f32 {
    v as f32 / 65535.0 * 2.0 - 1.0
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn encode_err(path: &Path, e: png::EncodingError) -> Error {
    Error::Data(format!("PNG encode {}: {e}", path.display()))
}

pub fn write_image(path: &Path, plane: &Plane) -> Result<()> {
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, plane.width as u32, plane.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| encode_err(path, e))?;
    let bytes: Vec<u8> = plane
        .data
        .iter()
        .flat_map(|&v| intensity_to_u16(v).to_be_bytes())
        .collect();
    writer.write_image_data(&bytes).map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))
}

pub fn write_mask(path: &Path, mask: &SegMask) -> Result<()> {
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| encode_err(path, e))?;
    writer.write_image_data(&mask.data).map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("PNG decode {}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("PNG {} too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("PNG decode {}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads a grayscale PNG (8- or 16-bit) into [-1, 1].
pub fn read_image(path: &Path) -> Result<Plane> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Data(format!(
            "{}: expected grayscale PNG, got {:?}",
            path.display(),
            info.color_type
        )));
    }
    let data = match info.bit_depth {
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|b| u16_to_intensity(u16::from_be_bytes([b[0], b[1]])))
            .collect(),
        png::BitDepth::Eight => buf.iter().map(|&b| b as f32 / 255.0 * 2.0 - 1.0).collect(),
        d => {
            return Err(Error::Data(format!(
                "{}: unsupported bit depth {d:?}",
                path.display()
            )))
        }
    };
    Ok(Plane::new(info.height as usize, info.width as usize, data))
}

pub fn read_mask(path: &Path) -> Result<SegMask> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: masks must be 8-bit grayscale PNG",
            path.display()
        )));
    }
    Ok(SegMask::new(info.height as usize, info.width as usize, buf))
}
