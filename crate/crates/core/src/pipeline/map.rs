use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::preprocess::BinaryMask;

/// Index value for pixels without a class.
pub const UNLABELED: u8 = 255;

/// Largest vocabulary a map can index.
pub const MAX_CLASSES: usize = UNLABELED as usize;

/// Per-pixel class indices, stored as an 8-bit index image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "map data has {} entries for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![UNLABELED; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        match self.data[row * self.width + col] {
            UNLABELED => None,
            k => Some(k as usize),
        }
    }

    pub fn set(&mut self, row: usize, col: usize, class: Option<usize>) {
        self.data[row * self.width + col] = class.map_or(UNLABELED, |k| k as u8);
    }

    pub fn class_mask(&self, class: usize) -> BinaryMask {
        let k = class as u8;
        BinaryMask::from_fn(self.height, self.width, |r, c| self.data[r * self.width + c] == k)
    }

    /// Sorted distinct class indices present.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..MAX_CLASSES).filter(|&k| seen[k]).collect()
    }

    /// Fails if any index is at or above `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != UNLABELED && v as usize >= num_classes) {
            Some(v) => Err(Error::InvalidArgument(format!(
                "class index {v} outside vocabulary of {num_classes}"
            ))),
            None => Ok(()),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: GrayImage =
            ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer sized from map dims");
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_keeps_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let map = SegmentationMap::new(2, 3, vec![0, 1, 2, UNLABELED, 7, 0]).unwrap();
        map.save_png(&path).unwrap();
        assert_eq!(SegmentationMap::load_png(&path).unwrap(), map);
        assert_eq!(map.get(1, 0), None);
        assert_eq!(map.classes_present(), vec![0, 1, 2, 7]);
        assert_eq!(map.class_mask(0).count(), 2);
        assert!(map.check_classes(8).is_ok());
        assert!(map.check_classes(7).is_err());
    }
}
