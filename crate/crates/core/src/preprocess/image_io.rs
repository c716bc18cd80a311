use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::preprocess::ImageTensor;

pub fn load_png_rgb(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

/// Writes an 8-bit RGB PNG, rounding to the nearest level.
pub fn save_png_rgb(path: &Path, image: &ImageTensor) -> Result<()> {
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf: RgbImage =
        ImageBuffer::<Rgb<u8>, _>::from_raw(image.width() as u32, image.height() as u32, raw)
            .expect("buffer sized from image dims");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 * 15.0 / 255.0).collect();
        let img = ImageTensor::new(2, 3, data).unwrap();
        save_png_rgb(&path, &img).unwrap();
        let back = load_png_rgb(&path).unwrap();
        assert_eq!(back.height(), 2);
        assert_eq!(back.width(), 3);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
