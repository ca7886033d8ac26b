//! Deep-zoom tile pyramid over a rendered field.
//!
//! Zoom 0 is native resolution. A tile at zoom `z` is the 2x box
//! downsample of the four zoom `z - 1` tiles beneath it, so every level is an
//! exact function of the one below. Pixels beyond the image are black.

use tilegan_core::imageio::to_u8;
use tilegan_core::tensor::Tensor;

/// Interleaved RGB bytes of a square tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileBytes {
    pub size: usize,
    pub rgb: Vec<u8>,
}

/// Smallest zoom at which a single tile covers a `width x height` image.
pub fn max_zoom(width: usize, height: usize, tile: usize) -> u32 {
    let mut z = 0;
    while (tile << z) < width.max(height) {
        z += 1;
    }
    z
}

/// Whether tile (`z`, `tx`, `ty`) overlaps the image.
pub fn tile_exists(width: usize, height: usize, tile: usize, z: u32, tx: usize, ty: usize) -> bool {
    if z > max_zoom(width, height, tile) {
        return false;
    }
    let span = tile << z;
    tx * span < width && ty * span < height
}

/// Native pixels a tile depends on: `(x, y, w, h)` clipped to the image.
pub fn native_window(
    width: usize,
    height: usize,
    tile: usize,
    z: u32,
    tx: usize,
    ty: usize,
) -> (usize, usize, usize, usize) {
    let span = tile << z;
    let (x, y) = (tx * span, ty * span);
    (x, y, span.min(width.saturating_sub(x)), span.min(height.saturating_sub(y)))
}

/// Quantised native pixels of a window, row-major interleaved RGB.
pub fn quantise_window(image: &Tensor, x: usize, y: usize, w: usize, h: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(w * h * 3);
    for yy in y..y + h {
        for xx in x..x + w {
            for c in 0..3 {
                out.push(to_u8(image.get(c, yy, xx)));
            }
        }
    }
    out
}

/// Builds a tile from the quantised window returned by [`native_window`] /
/// [`quantise_window`].
pub fn build_tile(window: &[u8], win_w: usize, win_h: usize, tile: usize, z: u32) -> TileBytes {
    let px = |x: usize, y: usize| -> [u8; 3] {
        if x < win_w && y < win_h {
            let i = (y * win_w + x) * 3;
            [window[i], window[i + 1], window[i + 2]]
        } else {
            [0; 3]
        }
    };
    TileBytes { size: tile, rgb: level(&px, 0, 0, tile, z) }
}

fn level(px: &impl Fn(usize, usize) -> [u8; 3], x0: usize, y0: usize, tile: usize, z: u32) -> Vec<u8> {
    if z == 0 {
        let mut out = Vec::with_capacity(tile * tile * 3);
        for y in 0..tile {
            for x in 0..tile {
                out.extend_from_slice(&px(x0 + x, y0 + y));
            }
        }
        return out;
    }
    let span = tile << (z - 1);
    let children = [
        level(px, x0, y0, tile, z - 1),
        level(px, x0 + span, y0, tile, z - 1),
        level(px, x0, y0 + span, tile, z - 1),
        level(px, x0 + span, y0 + span, tile, z - 1),
    ];
    downsample_quad(&children, tile)
}

/// 2x box downsample of four `tile x tile` children (NW, NE, SW, SE) into one
/// tile, rounding half up.
pub fn downsample_quad(children: &[Vec<u8>; 4], tile: usize) -> Vec<u8> {
    let mut out = vec![0u8; tile * tile * 3];
    let half = tile / 2;
    for y in 0..tile {
        for x in 0..tile {
            let child = &children[(y / half) * 2 + x / half];
            let (cx, cy) = ((x % half) * 2, (y % half) * 2);
            for c in 0..3 {
                let at = |dx: usize, dy: usize| child[((cy + dy) * tile + cx + dx) * 3 + c] as u32;
                let sum = at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1);
                out[(y * tile + x) * 3 + c] = ((sum + 2) / 4) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tilegan_core::tensor::Rng;

    fn tile_of(image: &Tensor, size: usize, z: u32, tx: usize, ty: usize) -> TileBytes {
        let (x, y, w, h) = native_window(image.width(), image.height(), size, z, tx, ty);
        build_tile(&quantise_window(image, x, y, w, h), w, h, size, z)
    }

    #[test]
    fn zoom_levels() {
        assert_eq!(max_zoom(256, 256, 256), 0);
        assert_eq!(max_zoom(257, 10, 256), 1);
        assert_eq!(max_zoom(2048, 1024, 256), 3);
        assert!(tile_exists(300, 100, 256, 0, 1, 0));
        assert!(!tile_exists(300, 100, 256, 0, 2, 0));
        assert!(!tile_exists(300, 100, 256, 0, 0, 1));
        assert!(!tile_exists(300, 100, 256, 2, 0, 0));
    }

    #[test]
    fn parent_is_downsample_of_children() {
        let mut rng = Rng::new(3);
        let img = Tensor::from_fn(3, 50, 70, |_, _, _| rng.normal());
        for z in 1..=3u32 {
            for (tx, ty) in [(0, 0), (1, 0), (0, 1)] {
                let parent = tile_of(&img, 8, z, tx, ty);
                let kids = [
                    tile_of(&img, 8, z - 1, 2 * tx, 2 * ty).rgb,
                    tile_of(&img, 8, z - 1, 2 * tx + 1, 2 * ty).rgb,
                    tile_of(&img, 8, z - 1, 2 * tx, 2 * ty + 1).rgb,
                    tile_of(&img, 8, z - 1, 2 * tx + 1, 2 * ty + 1).rgb,
                ];
                assert_eq!(parent.rgb, downsample_quad(&kids, 8), "z={z} ({tx}, {ty})");
            }
        }
    }

    #[test]
    fn native_tile_matches_quantised_pixels_and_pads_black() {
        let mut rng = Rng::new(1);
        let img = Tensor::from_fn(3, 10, 12, |_, _, _| rng.normal());
        let t = tile_of(&img, 8, 0, 1, 1);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let expected = if 8 + x < 12 && 8 + y < 10 { to_u8(img.get(c, 8 + y, 8 + x)) } else { 0 };
                    assert_eq!(t.rgb[(y * 8 + x) * 3 + c], expected);
                }
            }
        }
    }

    #[test]
    fn box_filter_rounds_half_up() {
        let tile = 2;
        let kid = |v: u8| vec![v; tile * tile * 3];
        let out = downsample_quad(&[kid(1), kid(2), kid(3), kid(4)], tile);
        assert_eq!(&out[..3], &[1, 1, 1]);
        let mut a = kid(0);
        a[3] = 1;
        a[6] = 1;
        let out = downsample_quad(&[a, kid(0), kid(0), kid(0)], tile);
        assert_eq!(out[0], 1);
    }
}
