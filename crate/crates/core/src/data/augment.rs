//! Training-time augmentation: horizontal flip, padded random crop, random erasing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use crate::config::AugmentConfig;

/// Shifts the image by up to `padding` pixels in each axis, filling with zeros.
pub fn pad_crop(img: &Image, padding: usize, rng: &mut ChaCha8Rng) -> Image {
    if padding == 0 {
        return img.clone();
    }
    let p = padding as i64;
    let dy = rng.random_range(-p..=p) as isize;
    let dx = rng.random_range(-p..=p) as isize;
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let (sy, sx) = (y + dy, x + dx);
            if sy >= 0 && sx >= 0 && (sy as usize) < img.height && (sx as usize) < img.width {
                out.set(y as usize, x as usize, img.get(sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Replaces a random rectangle (2–40% of the area, aspect 0.3–3.3) with noise.
pub fn random_erase(img: &mut Image, rng: &mut ChaCha8Rng) {
    let area = (img.height * img.width) as f64;
    for _ in 0..100 {
        let target = rng.random_range(0.02..0.4) * area;
        let aspect = (rng.random_range(0.3f64.ln()..(1.0f64 / 0.3).ln())).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= img.height || w >= img.width {
            continue;
        }
        let y0 = rng.random_range(0..img.height - h);
        let x0 = rng.random_range(0..img.width - w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.set(y, x, [rng.random(), rng.random(), rng.random()]);
            }
        }
        return;
    }
}

pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    let mut out = if cfg.flip && rng.random_bool(0.5) {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    out = pad_crop(&out, cfg.crop_padding, rng);
    if cfg.random_erasing > 0.0 && rng.random_bool(cfg.random_erasing) {
        random_erase(&mut out, rng);
    }
    out
}
