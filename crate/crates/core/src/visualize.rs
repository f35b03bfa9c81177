//! Merge maps: every source patch is painted with the color of the final
//! token that absorbed it.

use crate::error::{Error, Result};
use crate::imageio::Pixmap;
use crate::model::{ModelConfig, TokenState};
use crate::tensor::Tensor;

/// Color of patches no token covers (dropped in drop mode).
pub const DROPPED: [u8; 3] = [0, 0, 0];

const BORDER_SCALE: u32 = 96;

/// For every source patch, the smallest patch id of the group it ended up
/// in, or `None` if no final token covers it.
pub fn patch_groups(state: &TokenState) -> Result<Vec<Option<u32>>> {
    let mut out = vec![None; state.num_patches];
    for m in &state.members {
        let Some(&key) = m.iter().min() else { continue };
        for &p in m {
            let slot = out
                .get_mut(p as usize)
                .ok_or_else(|| Error::Contract(format!("member {p} outside {} patches", state.num_patches)))?;
            if slot.is_some() {
                return Err(Error::Contract(format!("patch {p} covered by two tokens")));
            }
            *slot = Some(key);
        }
    }
    Ok(out)
}

/// Injective on `0..2^24`: an odd multiplier followed by an xorshift, both
/// invertible modulo `2^24`. Distinct groups therefore never share a tint.
pub fn group_color(key: u32) -> [u8; 3] {
    const MASK: u32 = 0x00ff_ffff;
    let mut x = (key.wrapping_add(1)).wrapping_mul(0x9e_3779) & MASK;
    x ^= x >> 12;
    x = x.wrapping_mul(0x2c_1b3d) & MASK;
    x ^= x >> 11;
    [(x >> 16) as u8, (x >> 8) as u8, x as u8]
}

/// Shade of a tint on group borders.
pub fn darken(c: [u8; 3]) -> [u8; 3] {
    c.map(|v| ((v as u32 * BORDER_SCALE) / 255) as u8)
}

fn blend(c: [u8; 3], img: [u8; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| ((c[i] as u16 + img[i] as u16) / 2) as u8)
}

/// Renders a merge map at the input resolution. Pixels on the right or
/// bottom edge of a patch whose neighbor belongs to another group are
/// darkened. With `image`, the tint is averaged with the input.
pub fn render_merge_map(config: &ModelConfig, state: &TokenState, image: Option<&Tensor>) -> Result<Pixmap> {
    let groups = patch_groups(state)?;
    let g = config.grid_side();
    let p = config.patch_size;
    let s = config.image_size;
    if groups.len() != g * g {
        return Err(Error::Contract(format!("{} patches for a {g}x{g} grid", groups.len())));
    }
    if let Some(img) = image {
        if img.shape() != [3, s, s] {
            return Err(Error::Image(format!("overlay image has shape {:?}, expected [3, {s}, {s}]", img.shape())));
        }
    }
    let mut pm = Pixmap::new(s, s);
    for y in 0..s {
        for x in 0..s {
            let (py, px) = (y / p, x / p);
            let here = groups[py * g + px];
            let mut c = here.map(group_color).unwrap_or(DROPPED);
            let right_edge = x % p == p - 1 && px + 1 < g && groups[py * g + px + 1] != here;
            let bottom_edge = y % p == p - 1 && py + 1 < g && groups[(py + 1) * g + px] != here;
            if right_edge || bottom_edge {
                c = darken(c);
            }
            if let Some(img) = image {
                let px_val = |ch: usize| (img.data()[(ch * s + y) * s + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                c = blend(c, [px_val(0), px_val(1), px_val(2)]);
            }
            pm.set(x, y, c);
        }
    }
    Ok(pm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn colors_are_distinct_over_a_large_range() {
        let seen: HashSet<[u8; 3]> = (0..200_000).map(group_color).collect();
        assert_eq!(seen.len(), 200_000);
    }

    #[test]
    fn unmerged_state_gives_every_patch_its_own_tint() {
        let c = ModelConfig::tiny(1, 8, 2, 3, 2);
        let state = TokenState::from_patches(Tensor::zeros([9, 8]), Some((3, 3)));
        let pm = render_merge_map(&c, &state, None).unwrap();
        let interior: HashSet<[u8; 3]> = (0..3).flat_map(|py| (0..3).map(move |px| (px, py))).map(|(px, py)| pm.pixel(px * 2, py * 2)).collect();
        assert_eq!(interior.len(), 9);
    }

    #[test]
    fn merged_group_shares_a_tint() {
        let c = ModelConfig::tiny(1, 8, 2, 2, 2);
        let mut state = TokenState::from_patches(Tensor::zeros([3, 8]), Some((2, 2)));
        state.num_patches = 4;
        state.members = vec![vec![0, 3], vec![1], vec![2]];
        let pm = render_merge_map(&c, &state, None).unwrap();
        assert_eq!(pm.pixel(0, 0), group_color(0));
        assert_eq!(pm.pixel(2, 2), pm.pixel(0, 0));
        assert_ne!(pm.pixel(2, 0), pm.pixel(0, 0));
        // (1, 1) borders patch 1 on the right.
        assert_eq!(pm.pixel(1, 0), darken(group_color(0)));
    }
}
