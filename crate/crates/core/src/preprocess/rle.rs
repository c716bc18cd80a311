//! Run-length encoding of binary masks.
//!
//! A mask is written as row-major alternating run counts, always starting
//! with a background run (possibly zero): an all-foreground 2×2 mask is
//! `"0 4"`. A mask file holds a `"H W"` header line followed by one encoded
//! mask per line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::BinaryMask;

pub fn encode(mask: &BinaryMask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for &px in mask.data() {
        if px == current {
            count += 1;
        } else {
            runs.push(count);
            current = px;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn decode(runs: &[u32], height: usize, width: usize) -> Result<BinaryMask> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (height * width) as u64 {
        return Err(Error::Rle(format!(
            "runs cover {total} pixels, mask has {}",
            height * width
        )));
    }
    let mut data = Vec::with_capacity(height * width);
    for (i, &run) in runs.iter().enumerate() {
        let fg = i % 2 == 1;
        data.extend(std::iter::repeat_n(fg, run as usize));
    }
    BinaryMask::new(height, width, data)
}

pub fn to_string(mask: &BinaryMask) -> String {
    encode(mask)
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse(text: &str, height: usize, width: usize) -> Result<BinaryMask> {
    let runs = text
        .split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Error::Rle(format!("bad run count {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if runs.is_empty() {
        return Err(Error::Rle("empty run list".into()));
    }
    decode(&runs, height, width)
}

/// Serializes a list of same-sized masks into the mask-file format.
pub fn write_masks(path: &Path, height: usize, width: usize, masks: &[BinaryMask]) -> Result<()> {
    let mut out = format!("{height} {width}\n");
    for m in masks {
        if m.height() != height || m.width() != width {
            return Err(Error::Shape(format!(
                "mask {}x{} in a {height}x{width} file",
                m.height(),
                m.width()
            )));
        }
        out.push_str(&to_string(m));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_masks(path: &Path) -> Result<Vec<BinaryMask>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_masks(&text)
}

pub fn parse_masks(text: &str) -> Result<Vec<BinaryMask>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Rle("missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Rle(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [h, w] = dims[..] else {
        return Err(Error::Rle(format!("header must be \"H W\", got {header:?}")));
    };
    lines.map(|l| parse(l, h, w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_foreground_starts_with_zero_background_run() {
        assert_eq!(to_string(&BinaryMask::full(2, 2)), "0 4");
        assert_eq!(to_string(&BinaryMask::empty(2, 2)), "4");
        let m = BinaryMask::new(1, 4, vec![false, true, true, false]).unwrap();
        assert_eq!(to_string(&m), "1 2 1");
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(parse("1 2", 2, 2).is_err());
        assert!(parse("a b", 2, 2).is_err());
        assert!(parse("", 2, 2).is_err());
        assert!(parse_masks("2\n0 4\n").is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.rle");
        let masks = vec![
            BinaryMask::full(3, 2),
            BinaryMask::from_fn(3, 2, |r, c| r == c),
        ];
        write_masks(&path, 3, 2, &masks).unwrap();
        assert_eq!(read_masks(&path).unwrap(), masks);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
            let n = bits.len();
            let m = BinaryMask::new(1, n, bits).unwrap();
            let text = to_string(&m);
            prop_assert_eq!(parse(&text, 1, n).unwrap(), m);
        }
    }
}
