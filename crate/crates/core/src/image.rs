//! Floating-point three-channel image buffer and PNG I/O.

use std::io::Cursor;
use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};

use crate::colorspace::ColorSpace;
use crate::error::{Error, Result};

/// `width * height` pixels of three channels, tagged with the color space the
/// channel values are expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    space: ColorSpace,
    pixels: Vec<[f64; 3]>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, space: ColorSpace, pixels: Vec<[f64; 3]>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(Error::Input(format!(
                "{width}x{height} image needs {expected} pixels, got {}",
                pixels.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            space,
            pixels,
        })
    }

    pub fn uniform(width: u32, height: u32, space: ColorSpace, pixel: [f64; 3]) -> Self {
        ImageBuffer {
            width,
            height,
            space,
            pixels: vec![pixel; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<[f64; 3]> {
        self.pixels
    }

    /// Same dimensions and tag, new pixel data.
    pub fn with_pixels(&self, space: ColorSpace, pixels: Vec<[f64; 3]>) -> Result<Self> {
        ImageBuffer::new(self.width, self.height, space, pixels)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let pixels = img
            .pixels()
            .map(|p| p.0.map(|c| c as f64 / 255.0))
            .collect();
        ImageBuffer {
            width: img.width(),
            height: img.height(),
            space: ColorSpace::Srgb,
            pixels,
        }
    }

    /// Quantizes to 8 bits per channel, clamping to `[0, 1]` first.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.space != ColorSpace::Srgb {
            return Err(Error::Config(format!(
                "only sRGB images can be quantized, this one is tagged {}",
                self.space
            )));
        }
        let mut out = RgbImage::new(self.width, self.height);
        for (dst, src) in out.pixels_mut().zip(&self.pixels) {
            dst.0 = src.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8], origin: &Path) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|source| {
            Error::Image {
                path: origin.to_path_buf(),
                source,
            }
        })?;
        match img.color() {
            ColorType::Rgb8 => Ok(Self::from_rgb8(img.as_rgb8().expect("rgb8"))),
            ColorType::L8 => Ok(Self::from_rgb8(&img.to_rgb8())),
            ct if ct.has_alpha() => Err(Error::Input(format!(
                "{}: PNG has an alpha channel ({ct:?}); only opaque 8-bit RGB is supported",
                origin.display()
            ))),
            ct => Err(Error::Input(format!(
                "{}: unsupported PNG pixel format {ct:?}; expected 8-bit RGB",
                origin.display()
            ))),
        }
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes, path)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let rgb = self.to_rgb8()?;
        let mut buf = Cursor::new(Vec::new());
        rgb.write_to(&mut buf, ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: "<memory>".into(),
                source,
            })?;
        Ok(buf.into_inner())
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgba, RgbaImage};

    #[test]
    fn rejects_wrong_pixel_count() {
        assert!(ImageBuffer::new(2, 2, ColorSpace::Srgb, vec![[0.0; 3]; 3]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let pixels = (0..12)
            .map(|i| [i as f64 / 255.0, (255 - i) as f64 / 255.0, (i * 7) as f64 / 255.0])
            .collect();
        let img = ImageBuffer::new(4, 3, ColorSpace::Srgb, pixels).unwrap();
        let bytes = img.encode_png().unwrap();
        let back = ImageBuffer::decode_png(&bytes, Path::new("mem.png")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn alpha_png_is_rejected() {
        let rgba = RgbaImage::from_pixel(2, 2, Rgba([10, 20, 30, 128]));
        let mut buf = Cursor::new(Vec::new());
        rgba.write_to(&mut buf, ImageFormat::Png).unwrap();
        let err = ImageBuffer::decode_png(buf.get_ref(), Path::new("a.png")).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }

    #[test]
    fn only_srgb_quantizes() {
        let img = ImageBuffer::uniform(1, 1, ColorSpace::Lab, [50.0, 0.0, 0.0]);
        assert!(img.to_rgb8().is_err());
    }
}
