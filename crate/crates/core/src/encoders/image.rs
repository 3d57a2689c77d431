use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};

/// Row-major `height × width × channels` 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("image has a zero dimension ({height}x{width})")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "image buffer holds {} bytes, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn black(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    /// Decodes a PNG or PNM file into RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(h as usize, w as usize, 3, rgb.into_raw())
    }

    fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.data.clone()).unwrap())
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.data.clone()).unwrap())
        }
    }

    fn from_dynamic(img: DynamicImage, channels: usize) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = if channels == 1 {
            img.to_luma8().into_raw()
        } else {
            img.to_rgb8().into_raw()
        };
        Self {
            height: h,
            width: w,
            channels,
            data,
        }
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let img = self
            .to_dynamic()
            .resize_exact(width as u32, height as u32, FilterType::Triangle);
        Self::from_dynamic(img, self.channels)
    }

    fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w * self.channels);
        for row in y..y + h {
            let start = (row * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Self {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    fn flip_horizontal(&self) -> Self {
        let img = imageops::flip_horizontal(&self.to_dynamic());
        Self::from_dynamic(DynamicImage::from(img), self.channels)
    }
}

/// Pads with black on the right/bottom to a square of side `max(H, W)`,
/// then resizes to `side × side`.
pub fn pad_to_square(image: &RawImage, side: usize) -> Result<RawImage> {
    let square = pad_square(image)?;
    Ok(square.resize(side, side))
}

/// The unresized square: original pixels at the top-left, zeros elsewhere.
pub fn pad_square(image: &RawImage) -> Result<RawImage> {
    if image.height == 0 || image.width == 0 {
        return Err(Error::Invalid("cannot pad an image with a zero dimension".into()));
    }
    let n = image.height.max(image.width);
    let c = image.channels;
    let mut out = RawImage::black(n, n, c);
    for y in 0..image.height {
        let src = &image.data[y * image.width * c..(y + 1) * image.width * c];
        out.data[y * n * c..y * n * c + image.width * c].copy_from_slice(src);
    }
    Ok(out)
}

/// Seeded training-time augmentation: a random crop covering at least
/// `min_scale` of each side, resized back, then a coin-flip horizontal flip.
pub fn augment<R: Rng>(image: &RawImage, min_scale: f64, flip: bool, rng: &mut R) -> RawImage {
    let scale = rng.gen_range(min_scale.clamp(0.1, 1.0)..=1.0);
    let h = ((image.height as f64 * scale).round() as usize).clamp(1, image.height);
    let w = ((image.width as f64 * scale).round() as usize).clamp(1, image.width);
    let y = rng.gen_range(0..=image.height - h);
    let x = rng.gen_range(0..=image.width - w);
    let mut out = image.crop(y, x, h, w).resize(image.height, image.width);
    if flip && rng.gen_bool(0.5) {
        out = out.flip_horizontal();
    }
    out
}
