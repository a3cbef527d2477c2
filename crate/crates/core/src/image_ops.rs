//! Image plumbing: float RGB buffers, file I/O, and the resampling, rotation
//! and cropping used to cut network tiles.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, Rgb32FImage};

use crate::geometry::QuarterTurn;
use crate::tensorcore::Tensor;

pub type RgbImage = Rgb32FImage;

pub fn load_image(path: &Path) -> image::ImageResult<RgbImage> {
    Ok(image::open(path)?.to_rgb32f())
}

/// Saves as 8-bit RGB; the format follows the file extension.
pub fn save_image(img: &RgbImage, path: &Path) -> image::ImageResult<()> {
    to_rgb8(img).save(path)
}

pub fn to_rgb8(img: &RgbImage) -> image::RgbImage {
    ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        Rgb(p.0.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Grayscale debug rendering of a 2-D map, linearly mapping `[lo, hi]` to
/// black..white.
pub fn save_gray_map(values: &[f32], width: usize, height: usize, lo: f32, hi: f32, path: &Path) -> image::ImageResult<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        image::Luma([(((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)
}

/// Resizes by `scale` (output sides rounded, at least 1 px).
pub fn scale_image(img: &RgbImage, scale: f64) -> RgbImage {
    if scale == 1.0 {
        return img.clone();
    }
    let w = ((img.width() as f64 * scale).round() as u32).max(1);
    let h = ((img.height() as f64 * scale).round() as u32).max(1);
    imageops::resize(img, w, h, FilterType::Triangle)
}

pub fn rotate_image(img: &RgbImage, turn: QuarterTurn) -> RgbImage {
    match turn {
        QuarterTurn::R0 => img.clone(),
        QuarterTurn::R90 => imageops::rotate90(img),
        QuarterTurn::R180 => imageops::rotate180(img),
        QuarterTurn::R270 => imageops::rotate270(img),
    }
}

/// `size × size` window at `(x0, y0)`; pixels beyond the image are zero.
pub fn crop_padded(img: &RgbImage, x0: u32, y0: u32, size: u32) -> RgbImage {
    let mut out = RgbImage::new(size, size);
    let w = img.width().saturating_sub(x0).min(size);
    let h = img.height().saturating_sub(y0).min(size);
    if w > 0 && h > 0 {
        let view = imageops::crop_imm(img, x0, y0, w, h).to_image();
        imageops::replace(&mut out, &view, 0, 0);
    }
    out
}

/// `[3, H, W]` tensor of the image, centred around zero.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + i] = p.0[c] - 0.5;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_pads_with_zero() {
        let img = RgbImage::from_pixel(10, 6, Rgb([1.0, 1.0, 1.0]));
        let c = crop_padded(&img, 4, 0, 8);
        assert_eq!(c.get_pixel(5, 5).0, [1.0; 3]);
        assert_eq!(c.get_pixel(6, 0).0, [0.0; 3]);
        assert_eq!(c.get_pixel(0, 6).0, [0.0; 3]);
    }

    #[test]
    fn rotation_matches_point_map() {
        let mut img = RgbImage::new(4, 2);
        img.put_pixel(0, 0, Rgb([1.0, 0.0, 0.0]));
        let r = rotate_image(&img, QuarterTurn::R90);
        assert_eq!((r.width(), r.height()), (2, 4));
        // pixel centre (0.5, 0.5) -> (H - y, x) = (1.5, 0.5)
        assert_eq!(r.get_pixel(1, 0).0, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn tensor_layout() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(1, 0, Rgb([1.0, 0.5, 0.0]));
        let t = image_to_tensor(&img);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[-0.5, 0.5, -0.5, 0.0, -0.5, -0.5]);
    }
}
