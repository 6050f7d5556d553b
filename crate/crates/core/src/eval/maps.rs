//! Significance maps as 8-bit binary PGM images.

use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::ltfm::SignificanceMap;
use crate::Error;

/// `floor(255·m + 0.5)`, saturating to `[0, 255]`.
pub fn to_pixel(m: f64) -> u8 {
    (255.0 * m + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// P5 bytes of one `[g²]` map laid out row-major on a `g×g` grid.
pub fn map_pgm_bytes<F: Real>(map: &Tensor<F>, g: usize) -> Result<Vec<u8>, Error> {
    if map.numel() != g * g {
        return Err(Error::Data(format!("map of {} values is not a {g}x{g} grid", map.numel())));
    }
    let mut out = format!("P5\n{g} {g}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|m| to_pixel(m.as_f64())));
    Ok(out)
}

/// Writes the level-averaged map of `crop`.
pub fn export_map<F: Real>(sig: &SignificanceMap<F>, crop: usize, g: usize, path: impl AsRef<Path>) -> Result<(), Error> {
    let path = path.as_ref();
    let map = sig
        .averaged
        .get(crop)
        .ok_or_else(|| Error::Data(format!("crop {crop} out of range ({} crops)", sig.averaged.len())))?;
    std::fs::write(path, map_pgm_bytes(map, g)?).map_err(|e| Error::io(path, e))
}
