//! Training targets for the boundary network.

use crate::error::{bail, Result};
use crate::post::{BinaryMask, LabelMap};

/// Square (8-connected) dilation by `radius` pixels.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    // separable: rows then columns
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            rows[y * w + x] = (x0..=x1).any(|xx| mask.bits[y * w + xx]);
        }
    }
    BinaryMask::from_fn(h, w, |y, x| {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        (y0..=y1).any(|yy| rows[yy * w + x])
    })
}

/// Pixels of an instance that have an 8-neighbour outside that instance,
/// thickened to `thickness` and kept within one pixel of the instances.
pub fn derive_boundary_target(instances: &LabelMap, thickness: usize) -> Result<BinaryMask> {
    if thickness == 0 {
        bail!(Parameter, "boundary thickness must be at least 1");
    }
    let (h, w) = (instances.height, instances.width);
    let edge = BinaryMask::from_fn(h, w, |y, x| {
        let v = instances.get(y, x);
        v != 0
            && crate::post::maps::NEIGHBOURS_8.iter().any(|(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && instances.get(yy as usize, xx as usize) != v
            })
    });
    let thick = dilate(&edge, thickness - 1);
    let halo = dilate(&instances.foreground(), 1);
    Ok(BinaryMask { bits: thick.bits.iter().zip(&halo.bits).map(|(a, b)| *a && *b).collect(), ..thick })
}
