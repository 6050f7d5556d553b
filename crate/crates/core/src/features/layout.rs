use serde::{Deserialize, Serialize};

use crate::Error;

/// AnyRes crop bookkeeping. Crop 0 is always the resized original image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropLayout {
    /// Crop count including the resized original.
    pub n_crops: usize,
    /// Tokens per side of each crop grid.
    pub g: usize,
}

impl CropLayout {
    pub fn tokens_per_crop(&self) -> usize {
        self.g * self.g
    }

    pub fn total_tokens(&self) -> usize {
        self.n_crops * self.tokens_per_crop()
    }
}

/// Crop layout for an image split into `base`-sized crops plus the resized
/// original. Images no larger than `base` still yield one crop.
pub fn anyres_layout(image_w: usize, image_h: usize, base: usize, g: usize) -> Result<CropLayout, Error> {
    if image_w == 0 || image_h == 0 || base == 0 || g == 0 {
        return Err(Error::Config("anyres_layout arguments must be positive".into()));
    }
    let n_crops = image_w.div_ceil(base) * image_h.div_ceil(base) + 1;
    Ok(CropLayout { n_crops, g })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn high_resolution_image_yields_7290_tokens() {
        let l = anyres_layout(1152, 1152, 384, 27).unwrap();
        assert_eq!(l.n_crops, 10);
        assert_eq!(l.total_tokens(), 7290);
    }

    #[test]
    fn base_sized_image_keeps_one_crop_plus_original() {
        let l = anyres_layout(384, 384, 384, 27).unwrap();
        assert_eq!((l.n_crops, l.total_tokens()), (2, 1458));
        let small = anyres_layout(100, 50, 384, 27).unwrap();
        assert_eq!(small.n_crops, 2);
    }

    #[test]
    fn wide_image() {
        let l = anyres_layout(768, 384, 384, 8).unwrap();
        assert_eq!((l.n_crops, l.total_tokens()), (3, 192));
    }

    #[test]
    fn doubling_sides_quadruples_crops() {
        for (w, h, base) in [(384, 384, 384), (500, 700, 128), (1000, 30, 64)] {
            let a = anyres_layout(w, h, base, 4).unwrap();
            let b = anyres_layout(2 * w, 2 * h, base, 4).unwrap();
            if w % base == 0 && h % base == 0 {
                assert_eq!(b.n_crops - 1, 4 * (a.n_crops - 1));
            } else {
                assert!(b.n_crops - 1 <= 4 * (a.n_crops - 1));
            }
        }
    }

    #[test]
    fn zero_arguments_rejected() {
        assert!(anyres_layout(0, 10, 10, 2).is_err());
        assert!(anyres_layout(10, 10, 0, 2).is_err());
    }
}
