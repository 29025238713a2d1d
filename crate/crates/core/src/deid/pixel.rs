use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::{tags, DataSet, Value};

/// Pixel rectangle, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Rect { x, y, width, height }
    }

    /// Intersection with a `cols` x `rows` image as half-open ranges, if non-empty.
    fn clip(&self, cols: u32, rows: u32) -> Option<(std::ops::Range<u32>, std::ops::Range<u32>)> {
        let x1 = self.x.saturating_add(self.width).min(cols);
        let y1 = self.y.saturating_add(self.height).min(rows);
        (self.x < x1 && self.y < y1).then_some((self.x..x1, self.y..y1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PixelError {
    #[error("pixel data missing or not a byte payload")]
    MissingPixelData,
    #[error("pixel module attribute {0} missing")]
    MissingAttribute(&'static str),
    #[error("pixel payload is {actual} bytes, geometry implies {expected}")]
    GeometryMismatch { expected: usize, actual: usize },
}

/// Zeroes every pixel covered by `regions`. Returns whether any pixel was inside one.
pub fn mask_burn_in(ds: &DataSet, regions: &[Rect]) -> Result<(DataSet, bool), PixelError> {
    let rows = ds.u16(tags::ROWS).ok_or(PixelError::MissingAttribute("Rows"))? as u32;
    let cols = ds.u16(tags::COLUMNS).ok_or(PixelError::MissingAttribute("Columns"))? as u32;
    let bits = ds
        .u16(tags::BITS_ALLOCATED)
        .ok_or(PixelError::MissingAttribute("BitsAllocated"))?;
    let samples = ds.u16(tags::SAMPLES_PER_PIXEL).unwrap_or(1) as usize;
    let bytes_per_sample = usize::from(bits).div_ceil(8);
    let pixel_bytes = bytes_per_sample * samples;

    let mut out = ds.clone();
    let el = out.get_mut(tags::PIXEL_DATA).ok_or(PixelError::MissingPixelData)?;
    let Value::Bytes(data) = &mut el.value else {
        return Err(PixelError::MissingPixelData);
    };
    let expected = rows as usize * cols as usize * pixel_bytes;
    if data.len() != expected {
        return Err(PixelError::GeometryMismatch {
            expected,
            actual: data.len(),
        });
    }

    let mut masked = false;
    for rect in regions {
        let Some((xs, ys)) = rect.clip(cols, rows) else {
            continue;
        };
        masked = true;
        for y in ys {
            let row_start = y as usize * cols as usize * pixel_bytes;
            let a = row_start + xs.start as usize * pixel_bytes;
            let b = row_start + xs.end as usize * pixel_bytes;
            data[a..b].fill(0);
        }
    }
    Ok((out, masked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::{DataElement, Vr};

    fn image(rows: u16, cols: u16, bits: u16, fill: u8) -> DataSet {
        let bps = usize::from(bits / 8);
        DataSet::new()
            .with(DataElement::u16(tags::ROWS, rows))
            .with(DataElement::u16(tags::COLUMNS, cols))
            .with(DataElement::u16(tags::BITS_ALLOCATED, bits))
            .with(DataElement::u16(tags::SAMPLES_PER_PIXEL, 1))
            .with(DataElement::bytes(
                tags::PIXEL_DATA,
                Vr::OW,
                vec![fill; rows as usize * cols as usize * bps],
            ))
    }

    fn pixels(ds: &DataSet) -> &[u8] {
        match &ds.get(tags::PIXEL_DATA).unwrap().value {
            Value::Bytes(b) => b,
            _ => unreachable!(),
        }
    }

    #[test]
    fn masks_exactly_the_rectangle_16bit() {
        let ds = image(4, 5, 16, 0xAB);
        let (out, masked) = mask_burn_in(&ds, &[Rect::new(1, 2, 2, 1)]).unwrap();
        assert!(masked);
        let p = pixels(&out);
        for y in 0..4usize {
            for x in 0..5usize {
                let i = (y * 5 + x) * 2;
                let inside = y == 2 && (1..3).contains(&x);
                let want = if inside { 0 } else { 0xAB };
                assert_eq!((p[i], p[i + 1]), (want, want), "pixel {x},{y}");
            }
        }
    }

    #[test]
    fn rect_clipped_and_outside_rect_ignored() {
        let ds = image(3, 3, 8, 9);
        let (out, masked) = mask_burn_in(&ds, &[Rect::new(2, 2, 100, 100)]).unwrap();
        assert!(masked);
        assert_eq!(pixels(&out).iter().filter(|b| **b == 0).count(), 1);
        let (_, masked) = mask_burn_in(&ds, &[Rect::new(3, 0, 5, 5)]).unwrap();
        assert!(!masked);
        let (_, masked) = mask_burn_in(&ds, &[]).unwrap();
        assert!(!masked);
    }

    #[test]
    fn geometry_mismatch() {
        let mut ds = image(3, 3, 8, 9);
        ds.insert(DataElement::u16(tags::ROWS, 4));
        assert_eq!(
            mask_burn_in(&ds, &[]).unwrap_err(),
            PixelError::GeometryMismatch { expected: 12, actual: 9 }
        );
    }
}
