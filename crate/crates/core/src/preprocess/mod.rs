//! Turns an image plus a binary mask proposal into the masked, resized crop
//! and patch-level keep mask that the image encoder consumes.

pub mod image_io;
pub mod rle;

pub use image_io::{load_png_rgb, save_png_rgb};

use crate::error::{Error, Result};

/// RGB image, row-major `H×W×3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image, clipping values into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image must be at least 1x1".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }
}

/// `H×W` grid of foreground flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let u = self.union_count(other);
        if u == 0 {
            0.0
        } else {
            self.intersection_count(other) as f64 / u as f64
        }
    }

    /// Grows the foreground by `radius` pixels (square neighbourhood).
    pub fn dilate(&self, radius: usize) -> Self {
        self.morph(radius, true)
    }

    /// Shrinks the foreground by `radius` pixels. Outside the image counts
    /// as foreground, so regions touching the border keep it.
    pub fn erode(&self, radius: usize) -> Self {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, grow: bool) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let r = radius as isize;
        Self::from_fn(self.height, self.width, |row, col| {
            let mut any = false;
            let mut all = true;
            for dr in -r..=r {
                for dc in -r..=r {
                    let (rr, cc) = (row as isize + dr, col as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        continue;
                    }
                    let v = self.data[(rr * w + cc) as usize];
                    any |= v;
                    all &= v;
                }
            }
            if grow {
                any
            } else {
                all
            }
        })
    }

    /// Moves the foreground by `(dr, dc)`; pixels leaving the image are lost.
    pub fn shift(&self, dr: isize, dc: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        Self::from_fn(self.height, self.width, |row, col| {
            let (sr, sc) = (row as isize - dr, col as isize - dc);
            sr >= 0 && sc >= 0 && sr < h && sc < w && self.data[(sr * w + sc) as usize]
        })
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }
}

/// Encoder-ready crop of one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCrop {
    pub pixels: ImageTensor,
    /// Row-major over the patch grid; `true` keeps the patch token.
    pub patch_mask: Vec<bool>,
    pub resized_mask: BinaryMask,
    pub bbox: BBox,
}

impl MaskedCrop {
    pub fn side(&self) -> usize {
        self.pixels.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropOptions {
    pub side: usize,
    pub patch_size: usize,
    pub keep_background: bool,
}

impl CropOptions {
    pub fn new(side: usize, patch_size: usize) -> Self {
        Self {
            side,
            patch_size,
            keep_background: false,
        }
    }

    pub fn keep_background(mut self, keep: bool) -> Self {
        self.keep_background = keep;
        self
    }
}

/// Minimal axis-aligned box containing every foreground pixel.
pub fn tight_bbox(mask: &BinaryMask) -> Result<BBox> {
    let mut bbox: Option<BBox> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if !mask.get(r, c) {
                continue;
            }
            bbox = Some(match bbox {
                None => BBox {
                    row0: r,
                    col0: c,
                    row1: r,
                    col1: c,
                },
                Some(b) => BBox {
                    row0: b.row0.min(r),
                    col0: b.col0.min(c),
                    row1: b.row1.max(r),
                    col1: b.col1.max(c),
                },
            });
        }
    }
    bbox.ok_or(Error::EmptyMask)
}

/// Source coordinate and interpolation weight for corner-aligned resampling
/// of `src_len` samples onto `dst_len` samples.
fn sample_positions(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f32)> {
    (0..dst_len)
        .map(|i| {
            if src_len == 1 || dst_len == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a `h×w×channels` buffer, corner-aligned.
fn resize_bilinear(
    src: &[f32],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let ys = sample_positions(h, out_h);
    let xs = sample_positions(w, out_w);
    let mut out = vec![0.0; out_h * out_w * channels];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..channels {
                let at = |y: usize, x: usize| src[(y * w + x) * channels + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_w + ox) * channels + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Crops the tight box around `mask`, optionally zeroes the background, and
/// resizes to `side × side`.
pub fn crop_resize_mask(
    image: &ImageTensor,
    mask: &BinaryMask,
    opts: CropOptions,
) -> Result<MaskedCrop> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    if opts.patch_size == 0 || opts.side == 0 || opts.side % opts.patch_size != 0 {
        return Err(Error::Config(format!(
            "side {} not divisible by patch size {}",
            opts.side, opts.patch_size
        )));
    }
    let bbox = tight_bbox(mask)?;
    let (h, w) = (bbox.height(), bbox.width());
    let mut crop = Vec::with_capacity(h * w * 3);
    let mut crop_mask = Vec::with_capacity(h * w);
    for r in bbox.row0..=bbox.row1 {
        for c in bbox.col0..=bbox.col1 {
            let fg = mask.get(r, c);
            let px = image.pixel(r, c);
            let keep = opts.keep_background || fg;
            crop.extend(px.iter().map(|&v| if keep { v } else { 0.0 }));
            crop_mask.push(if fg { 1.0 } else { 0.0 });
        }
    }
    let s = opts.side;
    let mut pixels = resize_bilinear(&crop, h, w, 3, s, s);
    let resized = resize_bilinear(&crop_mask, h, w, 1, s, s);
    let resized_mask = BinaryMask {
        height: s,
        width: s,
        data: resized.iter().map(|&v| v >= 0.5).collect(),
    };
    let patch_mask = if opts.keep_background {
        vec![true; (s / opts.patch_size).pow(2)]
    } else {
        for (i, &fg) in resized_mask.data.iter().enumerate() {
            if !fg {
                pixels[i * 3..i * 3 + 3].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        condense_mask(&resized_mask, opts.patch_size)?
    };
    Ok(MaskedCrop {
        pixels: ImageTensor::new(s, s, pixels)?,
        patch_mask,
        resized_mask,
        bbox,
    })
}

/// A patch is kept iff it contains at least one foreground pixel.
pub fn condense_mask(mask: &BinaryMask, patch_size: usize) -> Result<Vec<bool>> {
    if patch_size == 0
        || mask.height % patch_size != 0
        || mask.width % patch_size != 0
    {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not divide {}x{}",
            mask.height, mask.width
        )));
    }
    let gh = mask.height / patch_size;
    let gw = mask.width / patch_size;
    let mut out = vec![false; gh * gw];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                out[(r / patch_size) * gw + c / patch_size] = true;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = seeded(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn morphology() {
        let dot = BinaryMask::from_fn(5, 5, |r, c| r == 2 && c == 2);
        assert_eq!(dot.dilate(1).count(), 9);
        assert_eq!(dot.dilate(1).erode(1), dot);
        assert_eq!(dot.dilate(0), dot);
        assert!(dot.erode(1).is_empty());
        let moved = dot.shift(-2, 2);
        assert!(moved.get(0, 4));
        assert_eq!(moved.count(), 1);
        assert!(dot.shift(3, 0).is_empty());
        // Border pixels survive erosion.
        assert_eq!(BinaryMask::full(3, 3).erode(1).count(), 9);
    }

    #[test]
    fn bbox_examples() {
        let full = BinaryMask::full(8, 8);
        assert_eq!(
            tight_bbox(&full).unwrap(),
            BBox { row0: 0, col0: 0, row1: 7, col1: 7 }
        );
        let mut one = BinaryMask::empty(8, 8);
        one.set(2, 3, true);
        assert_eq!(
            tight_bbox(&one).unwrap(),
            BBox { row0: 2, col0: 3, row1: 2, col1: 3 }
        );
        assert!(matches!(tight_bbox(&BinaryMask::empty(4, 4)), Err(Error::EmptyMask)));
    }

    #[test]
    fn bbox_two_pixels_matches_scan() {
        let mut m = BinaryMask::empty(8, 8);
        m.set(1, 1, true);
        m.set(4, 6, true);
        // brute-force min/max over foreground coordinates
        let fg: Vec<(usize, usize)> = (0..8)
            .flat_map(|r| (0..8).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c))
            .collect();
        let expect = BBox {
            row0: fg.iter().map(|p| p.0).min().unwrap(),
            col0: fg.iter().map(|p| p.1).min().unwrap(),
            row1: fg.iter().map(|p| p.0).max().unwrap(),
            col1: fg.iter().map(|p| p.1).max().unwrap(),
        };
        assert_eq!(expect, BBox { row0: 1, col0: 1, row1: 4, col1: 6 });
        assert_eq!(tight_bbox(&m).unwrap(), expect);
    }

    #[test]
    fn full_foreground_is_unmasked() {
        let img = random_image(10, 6, 1);
        let mask = BinaryMask::full(10, 6);
        let a = crop_resize_mask(&img, &mask, CropOptions::new(8, 4)).unwrap();
        assert!(a.patch_mask.iter().all(|&k| k));
        let b = crop_resize_mask(&img, &mask, CropOptions::new(8, 4).keep_background(true)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn keep_background_is_plain_crop_resize() {
        let img = random_image(12, 12, 2);
        let mask = BinaryMask::from_fn(12, 12, |r, c| (2..9).contains(&r) && (3..7).contains(&c) && (r + c) % 3 != 0);
        let crop = crop_resize_mask(&img, &mask, CropOptions::new(8, 4).keep_background(true)).unwrap();
        let full = BinaryMask::from_fn(12, 12, |r, c| (2..9).contains(&r) && (3..7).contains(&c));
        let plain = crop_resize_mask(&img, &full, CropOptions::new(8, 4)).unwrap();
        assert_eq!(crop.pixels, plain.pixels);
    }

    /// Per-pixel reference for the half-left square case.
    #[test]
    fn half_left_square_masks_right_patches() {
        let img = ImageTensor::new(8, 8, vec![0.5; 8 * 8 * 3]).unwrap();
        let mut mask = BinaryMask::from_fn(8, 8, |_, c| c < 4);
        // A tight box always touches every border, so one pixel in the top-right
        // corner makes the crop the whole image.
        mask.set(0, 7, true);
        let crop = crop_resize_mask(&img, &mask, CropOptions::new(8, 4)).unwrap();
        // Identity resize: reference is "pixel kept iff mask pixel set".
        for r in 0..8 {
            for c in 0..8 {
                let expect = if mask.get(r, c) { 0.5 } else { 0.0 };
                assert_eq!(crop.pixels.pixel(r, c), [expect; 3]);
            }
        }
        // Patches: top-left kept, top-right kept (pixel (0,7)), bottom-left kept, bottom-right masked.
        assert_eq!(crop.patch_mask, vec![true, true, true, false]);
    }

    #[test]
    fn condense_examples() {
        assert_eq!(condense_mask(&BinaryMask::full(8, 8), 4).unwrap(), vec![true; 4]);
        assert_eq!(condense_mask(&BinaryMask::empty(8, 8), 4).unwrap(), vec![false; 4]);
        let mut m = BinaryMask::empty(8, 8);
        m.set(5, 2, true);
        assert_eq!(condense_mask(&m, 4).unwrap(), vec![false, false, true, false]);
        assert!(condense_mask(&m, 3).is_err());
    }

    #[test]
    fn mismatched_dims_and_bad_patch_rejected() {
        let img = random_image(4, 4, 3);
        assert!(crop_resize_mask(&img, &BinaryMask::full(4, 5), CropOptions::new(8, 4)).is_err());
        assert!(crop_resize_mask(&img, &BinaryMask::full(4, 4), CropOptions::new(8, 3)).is_err());
        assert!(matches!(
            crop_resize_mask(&img, &BinaryMask::empty(4, 4), CropOptions::new(8, 4)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn idempotent_on_square_masked_input() {
        let img = random_image(16, 16, 4);
        let mask = BinaryMask::from_fn(16, 16, |r, c| {
            let (dr, dc) = (r as f64 - 7.5, c as f64 - 7.5);
            dr * dr + dc * dc <= 64.0
        });
        let once = crop_resize_mask(&img, &mask, CropOptions::new(16, 4)).unwrap();
        let twice = crop_resize_mask(&once.pixels, &once.resized_mask, CropOptions::new(16, 4)).unwrap();
        assert_eq!(once.pixels, twice.pixels);
        assert_eq!(once.patch_mask, twice.patch_mask);
    }

    proptest! {
        #[test]
        fn masked_patches_are_all_zero(seed in 0u64..10_000, h in 2usize..20, w in 2usize..20) {
            let mut rng = seeded(seed);
            let img = random_image(h, w, seed);
            let density: f64 = rng.random_range(0.05..0.9);
            let mut mask = BinaryMask::from_fn(h, w, |_, _| false);
            for r in 0..h { for c in 0..w { if rng.random_bool(density) { mask.set(r, c, true); } } }
            prop_assume!(!mask.is_empty());
            let crop = crop_resize_mask(&img, &mask, CropOptions::new(16, 4)).unwrap();
            for (j, &keep) in crop.patch_mask.iter().enumerate() {
                if keep { continue; }
                let (pr, pc) = (j / 4, j % 4);
                for r in pr * 4..pr * 4 + 4 {
                    for c in pc * 4..pc * 4 + 4 {
                        prop_assert_eq!(crop.pixels.pixel(r, c), [0.0; 3]);
                    }
                }
            }
            for r in 0..16 { for c in 0..16 {
                if !crop.resized_mask.get(r, c) { prop_assert_eq!(crop.pixels.pixel(r, c), [0.0; 3]); }
            }}
        }
    }
}
