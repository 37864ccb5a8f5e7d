use std::path::Path;

use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};

/// An RGB image with channel-last `f64` samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, rgb: [f64; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set(y, x, rgb);
            }
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, self.width - 1 - x, self.get(y, x));
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    /// Loads an image file, resizing to `height×width` when it differs.
    pub fn load(path: &Path, height: usize, width: usize) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .to_rgb8();
        let img = if img.height() as usize != height || img.width() as usize != width {
            image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
        } else {
            img
        };
        Ok(Image::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })
    }
}
