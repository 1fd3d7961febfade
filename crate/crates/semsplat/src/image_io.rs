//! Float image planes plus the on-disk rasters: binary PPM for RGB, raw
//! headered rasters for masks and label maps, optional PNG export.

use crate::error::{Error, Result};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Pixel label value reserved for background in label rasters.
pub const BACKGROUND_LABEL: u8 = 255;

const LABEL_MAGIC: [u8; 4] = *b"SLB1";
const MASK_MAGIC: [u8; 4] = *b"SMK1";

/// Row-major float image with `channels` interleaved values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Quantizes `[0,1]` floats to bytes, clamping out-of-range values.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Binary foreground mask; values are 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl MaskImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        MaskImage {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }
}

/// Where a label image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelProvenance {
    /// Z-buffered projection of the labeled template.
    ProjectedTemplate,
    /// Labels transferred onto a foreground mask.
    TransferredMask,
}

/// Per-pixel part labels; [`BACKGROUND_LABEL`] marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    pub provenance: LabelProvenance,
}

impl LabelImage {
    pub fn background(height: usize, width: usize, provenance: LabelProvenance) -> Self {
        LabelImage {
            height,
            width,
            data: vec![BACKGROUND_LABEL; height * width],
            provenance,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|v| **v != BACKGROUND_LABEL).count()
    }
}

/// Writes a 3-channel image as binary PPM (P6), bit-exact quantization.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Usage(format!(
            "PPM needs 3 channels, image has {}",
            img.channels
        )));
    }
    let mut out = Vec::with_capacity(img.height * img.width * 3 + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend_from_slice(&img.to_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let err = |msg: &str| Error::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    // Header: "P6" then width, height, maxval as whitespace-separated tokens.
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| err("bad header"))?
                .to_string(),
        );
    }
    if tokens.len() != 4 || tokens[0] != "P6" || tokens[3] != "255" {
        return Err(err("expected binary P6 with maxval 255"));
    }
    let width: usize = tokens[1].parse().map_err(|_| err("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| err("bad height"))?;
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(err("truncated pixel data"));
    }
    let mut img = Image::zeros(height, width, 3);
    for (i, b) in bytes[pos..pos + need].iter().enumerate() {
        img.data[i] = *b as f64 / 255.0;
    }
    Ok(img)
}

fn write_raster(path: &Path, magic: [u8; 4], h: usize, w: usize, data: &[u8]) -> Result<()> {
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Usage("raster dimensions exceed u16".into()));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&magic)?;
    f.write_all(&(h as u16).to_le_bytes())?;
    f.write_all(&(w as u16).to_le_bytes())?;
    f.write_all(data)?;
    Ok(())
}

fn read_raster(path: &Path, magic: [u8; 4]) -> Result<(usize, usize, Vec<u8>)> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 8];
    f.read_exact(&mut header)?;
    if header[0..4] != magic {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: "bad magic".into(),
        });
    }
    let h = u16::from_le_bytes([header[4], header[5]]) as usize;
    let w = u16::from_le_bytes([header[6], header[7]]) as usize;
    let mut data = vec![0u8; h * w];
    f.read_exact(&mut data)?;
    Ok((h, w, data))
}

/// Writes a label image as a raw raster with an 8-byte header.
pub fn write_labels(path: &Path, labels: &LabelImage) -> Result<()> {
    write_raster(path, LABEL_MAGIC, labels.height, labels.width, &labels.data)
}

pub fn read_labels(path: &Path, provenance: LabelProvenance) -> Result<LabelImage> {
    let (height, width, data) = read_raster(path, LABEL_MAGIC)?;
    Ok(LabelImage {
        height,
        width,
        data,
        provenance,
    })
}

pub fn write_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    write_raster(path, MASK_MAGIC, mask.height, mask.width, &mask.data)
}

pub fn read_mask(path: &Path) -> Result<MaskImage> {
    let (height, width, data) = read_raster(path, MASK_MAGIC)?;
    if data.iter().any(|v| *v > 1) {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: "mask values must be 0 or 1".into(),
        });
    }
    Ok(MaskImage {
        height,
        width,
        data,
    })
}

/// Optional PNG export of a 3-channel image.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Usage("PNG export needs 3 channels".into()));
    }
    let buf = img.to_bytes();
    let out: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, buf)
            .expect("buffer size matches dimensions");
    out.save(path)
        .map_err(|e| Error::Usage(format!("png write failed: {e}")))?;
    Ok(())
}

/// Renders a label image to RGB for inspection: fixed palette per part,
/// black background.
pub fn labels_to_rgb(labels: &LabelImage) -> Image {
    const PALETTE: [[f64; 3]; 8] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.70, 0.20],
        [0.15, 0.30, 0.90],
        [0.95, 0.80, 0.10],
        [0.70, 0.20, 0.80],
        [0.10, 0.80, 0.80],
        [0.95, 0.50, 0.10],
        [0.60, 0.60, 0.60],
    ];
    let mut img = Image::zeros(labels.height, labels.width, 3);
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.get(y, x);
            if l != BACKGROUND_LABEL {
                let c = PALETTE[l as usize % PALETTE.len()];
                for (k, v) in c.iter().enumerate() {
                    img.set(y, x, k, *v);
                }
            }
        }
    }
    img
}
