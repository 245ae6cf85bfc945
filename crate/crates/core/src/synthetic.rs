//! Deterministic synthetic pairs with a known local misalignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{AlignedPair, Image, Rect, ValidityMask};

/// Smooth random field in `[0, 1]`: bilinear interpolation of uniform noise
/// on a grid with `cell`-pixel spacing.
pub fn smooth_noise(width: usize, height: usize, cell: usize, seed: u64) -> Vec<f64> {
    let cell = cell.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen()).collect();
    let g = |i: usize, j: usize| grid[j * gw + i];
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (gx, ax) = (x / cell, (x % cell) as f64 / cell as f64);
            let (gy, ay) = (y / cell, (y % cell) as f64 / cell as f64);
            out.push(
                (1.0 - ax) * (1.0 - ay) * g(gx, gy)
                    + ax * (1.0 - ay) * g(gx + 1, gy)
                    + (1.0 - ax) * ay * g(gx, gy + 1)
                    + ax * ay * g(gx + 1, gy + 1),
            );
        }
    }
    out
}

/// Smooth RGB texture, one noise field per channel.
pub fn smooth_texture(width: usize, height: usize, cell: usize, seed: u64) -> Image {
    let fields: Vec<Vec<f64>> = (0..3).map(|c| smooth_noise(width, height, cell, seed * 3 + c)).collect();
    Image::from_fn(width, height, 3, |x, y| {
        let i = y * width + x;
        [fields[0][i], fields[1][i], fields[2][i]]
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftedBlockSpec {
    pub width: usize,
    pub height: usize,
    /// Target covers `x < target_end`, reference covers `x >= reference_start`.
    pub target_end: usize,
    pub reference_start: usize,
    pub block: Rect,
    /// Horizontal displacement of the block content in the reference.
    pub shift: usize,
    pub cell: usize,
}

impl Default for ShiftedBlockSpec {
    fn default() -> Self {
        Self {
            width: 400,
            height: 300,
            target_end: 220,
            reference_start: 180,
            block: Rect::new(170, 120, 230, 180),
            shift: 5,
            cell: 8,
        }
    }
}

/// Two views of one texture that agree everywhere except inside `block`,
/// where the reference shows content from `shift` pixels further right. The
/// overlap is a narrow vertical corridor that the block spans, so every seam
/// has to cross the misaligned rows.
pub fn shifted_block_pair(spec: &ShiftedBlockSpec, seed: u64) -> AlignedPair {
    let (w, h) = (spec.width, spec.height);
    let base = smooth_texture(w + spec.shift, h, spec.cell, seed);
    let target = Image::from_fn(w, h, 3, |x, y| base.color(x, y));
    let reference = Image::from_fn(w, h, 3, |x, y| {
        if spec.block.contains(x, y) {
            base.color(x + spec.shift, y)
        } else {
            base.color(x, y)
        }
    });
    let tmask = ValidityMask::from_fn(w, h, |x, _| x < spec.target_end);
    let rmask = ValidityMask::from_fn(w, h, |x, _| x >= spec.reference_start);
    AlignedPair::new(target, tmask, reference, rmask).expect("consistent fixture dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_seeded_and_bounded() {
        let a = smooth_noise(30, 20, 4, 1);
        assert_eq!(a, smooth_noise(30, 20, 4, 1));
        assert_ne!(a, smooth_noise(30, 20, 4, 2));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn block_is_the_only_difference() {
        let spec = ShiftedBlockSpec::default();
        let pair = shifted_block_pair(&spec, 0);
        for y in 0..spec.height {
            for x in 180..220 {
                let same = pair.target.color(x, y) == pair.reference.color(x, y);
                assert_eq!(same, !spec.block.contains(x, y), "({x}, {y})");
                if spec.block.contains(x, y) && x + 5 < spec.target_end {
                    assert_eq!(pair.reference.color(x, y), pair.target.color(x + 5, y));
                }
            }
        }
    }
}
