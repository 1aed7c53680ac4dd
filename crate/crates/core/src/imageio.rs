//! 8-bit grayscale images on disk (PGM or PNG, chosen by extension).

use std::path::Path;

use crate::autodiff::Array;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Codec { path: String, source: image::ImageError },
    #[error("pixel buffer of {len} bytes does not match {width}x{height}")]
    Size { len: usize, width: usize, height: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::Size {
                len: pixels.len(),
                width,
                height,
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// `(1, H, W)` array scaled to `[0, 1]`.
    pub fn to_array(&self) -> Array {
        Array::from_fn(&[1, self.height, self.width], |i| self.pixels[i] as f64 / 255.0)
    }

    /// Copy of the window at `(x0, y0)`, truncated at the image border.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> GrayImage {
        let w = width.min(self.width.saturating_sub(x0));
        let h = height.min(self.height.saturating_sub(y0));
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        GrayImage { width: w, height: h, pixels }
    }

    pub fn read(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        Ok(GrayImage {
            width: w as usize,
            height: h as usize,
            pixels: luma.into_raw(),
        })
    }

    /// Writes binary PGM for `.pgm` paths and PNG otherwise.
    pub fn write(&self, path: &Path) -> Result<(), ImageError> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone()).ok_or(
            ImageError::Size {
                len: self.pixels.len(),
                width: self.width,
                height: self.height,
            },
        )?;
        let codec = |source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        };
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            let file = std::fs::File::create(path).map_err(|e| codec(image::ImageError::IoError(e)))?;
            let encoder = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file))
                .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
            buf.write_with_encoder(encoder).map_err(codec)
        } else {
            buf.save(path).map_err(codec)
        }
    }
}
