//! 8-bit grayscale images and their PGM/PNG persistence.

use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, Luma};

use crate::error::{Error, Result};

/// Row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels do not fill a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                pixels.push(f(row, col));
            }
        }
        Self::new(width, height, pixels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Copies the `size`x`size` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<GrayImage> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Bounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut pixels = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[start..start + w]);
        }
        GrayImage::new(w, h, pixels)
    }

    /// Horizontal mirror (columns reversed).
    pub fn flip_horizontal(&self) -> GrayImage {
        let mut pixels = self.pixels.clone();
        for row in pixels.chunks_mut(self.width) {
            row.reverse();
        }
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub fn transpose(&self) -> GrayImage {
        let mut pixels = vec![0u8; self.pixels.len()];
        for row in 0..self.height {
            for col in 0..self.width {
                pixels[col * self.height + row] = self.pixels[row * self.width + col];
            }
        }
        GrayImage {
            width: self.height,
            height: self.width,
            pixels,
        }
    }
}

/// Decodes a PGM or PNG file. Only 8-bit single-channel images are accepted.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = match decoded {
        image::DynamicImage::ImageLuma8(buf) => buf,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    GrayImage::new(w as usize, h as usize, gray.into_raw())
}

/// Writes PNG when the extension says so, binary PGM (P5) otherwise.
pub fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    let buf: image::ImageBuffer<Luma<u8>, Vec<u8>> =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
            .expect("pixel buffer length checked at construction");
    let format = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => ImageFormat::Png,
        _ => ImageFormat::Pnm,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let to_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match format {
        ImageFormat::Png => buf.save_with_format(path, format).map_err(to_err),
        _ => {
            let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
            PnmEncoder::new(&mut out)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(&buf, buf.width(), buf.height(), ExtendedColorType::L8)
                .map_err(to_err)?;
            out.flush()?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(GrayImage::new(4, 4, vec![0; 15]).is_err());
        assert!(GrayImage::new(0, 4, vec![]).is_err());
    }

    #[test]
    fn crop_copies_window() {
        let img = GrayImage::from_fn(5, 4, |r, c| (r * 10 + c) as u8).unwrap();
        let c = img.crop(1, 2, 3, 2).unwrap();
        assert_eq!(c.pixels(), &[21, 22, 23, 31, 32, 33]);
        assert!(img.crop(3, 0, 3, 1).is_err());
    }

    #[test]
    fn pgm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(7, 3, |r, c| (r * 40 + c * 3) as u8).unwrap();
        for name in ["a.pgm", "b.png"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
        let raw = std::fs::read(dir.path().join("a.pgm")).unwrap();
        assert!(raw.starts_with(b"P5"));
    }
}
