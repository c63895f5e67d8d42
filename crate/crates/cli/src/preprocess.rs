//! Image decoding and resizing to the network input.

use anyhow::{Context, Result};
use rtdetr::kernels::resize_bilinear;
use rtdetr::Tensor;

#[derive(Debug, Clone)]
pub struct PreparedImage {
    /// `(1, 3, target, target)` RGB in `[0, 1]`.
    pub tensor: Tensor<f32>,
    pub width: usize,
    pub height: usize,
}

/// Decodes a PNG or PPM image and resizes it (bilinear, half-pixel centres)
/// to a `target × target` RGB tensor scaled to `[0, 1]`.
pub fn preprocess_image(bytes: &[u8], target: usize) -> Result<PreparedImage> {
    let rgb = image::load_from_memory(bytes)
        .context("decoding image")?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    anyhow::ensure!(w > 0 && h > 0, "image has no pixels");
    let raw = rgb.as_raw();
    let plane = w * h;
    let tensor = Tensor::from_fn(vec![1, 3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        f32::from(raw[p * 3 + c]) / 255.0
    });
    Ok(PreparedImage {
        tensor: resize_bilinear(&tensor, target, target)?,
        width: w,
        height: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageFormat, Rgb, RgbImage};
    use std::io::Cursor;

    fn encode(img: &RgbImage, format: ImageFormat) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, format).unwrap();
        buf.into_inner()
    }

    #[test]
    fn solid_gray_scales_to_128_over_255() {
        let img = RgbImage::from_pixel(50, 30, Rgb([128, 128, 128]));
        let p = preprocess_image(&encode(&img, ImageFormat::Png), 64).unwrap();
        assert_eq!(p.tensor.shape(), [1, 3, 64, 64]);
        assert_eq!((p.width, p.height), (50, 30));
        for v in p.tensor.data() {
            assert!((v - 0.50196).abs() < 1e-5);
        }
    }

    #[test]
    fn reads_ppm_and_keeps_channel_order() {
        let img = RgbImage::from_pixel(4, 4, Rgb([255, 0, 51]));
        let p = preprocess_image(&encode(&img, ImageFormat::Pnm), 4).unwrap();
        assert_eq!(p.tensor.at(&[0, 0, 1, 1]), 1.0);
        assert_eq!(p.tensor.at(&[0, 1, 2, 3]), 0.0);
        assert!((p.tensor.at(&[0, 2, 0, 0]) - 0.2).abs() < 1e-7);
    }

    #[test]
    fn undecodable_bytes_are_an_error() {
        assert!(preprocess_image(b"not an image", 640).is_err());
    }
}
