//! Seam-cutting composition of an aligned pair.
//!
//! Overlap pixels are labeled 0 (show the target) or 1 (show the
//! reference). Overlap pixels touching target-only canvas are pinned to 0,
//! those touching reference-only canvas to 1, and the remaining labels come
//! from a min-cut over a pluggable smoothness term.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{self, AlignedPair, Image, Rect, ValidityMask};
use crate::mincut::{solve_mincut, GridGraph};
use crate::parallel::{map_indices, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Target = 0,
    Reference = 1,
    Outside = 2,
}

impl Label {
    pub fn from_bit(bit: u8) -> Label {
        if bit == 0 {
            Label::Target
        } else {
            Label::Reference
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Down, Direction::Up];

    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::Right => (1, 0),
            Direction::Left => (-1, 0),
            Direction::Down => (0, 1),
            Direction::Up => (0, -1),
        }
    }
}

#[inline]
fn step(x: usize, y: usize, dx: isize, dy: isize, w: usize, h: usize) -> Option<(usize, usize)> {
    let nx = x.checked_add_signed(dx)?;
    let ny = y.checked_add_signed(dy)?;
    (nx < w && ny < h).then_some((nx, ny))
}

/// Per-pixel source choice over the canvas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl LabelMask {
    /// Every overlap pixel set to `label`, everything else outside.
    pub fn uniform(pair: &AlignedPair, label: Label) -> Self {
        let (w, h) = pair.dims();
        let labels = (0..w * h)
            .map(|i| {
                if pair.in_overlap(i % w, i / w) {
                    label
                } else {
                    Label::Outside
                }
            })
            .collect();
        Self {
            width: w,
            height: h,
            labels,
        }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> Label>(width: usize, height: usize, mut f: F) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self { width, height, labels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Label 0 with a 4-neighbor of label 1.
    pub fn is_boundary(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == Label::Target && self.reference_side(x, y).is_some()
    }

    fn reference_side(&self, x: usize, y: usize) -> Option<Direction> {
        Direction::ALL.into_iter().find(|d| {
            let (dx, dy) = d.offset();
            step(x, y, dx, dy, self.width, self.height)
                .is_some_and(|(nx, ny)| self.get(nx, ny) == Label::Reference)
        })
    }

    /// 8-bit interchange form: 0 for label 0, 255 for label 1. Outside the
    /// overlap, pixels read 255 where only the reference is valid.
    pub fn to_bytes(&self, pair: &AlignedPair) -> Vec<u8> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Label::Target => 0,
                Label::Reference => 255,
                Label::Outside => {
                    let (x, y) = (i % self.width, i / self.width);
                    if !pair.target_mask.get(x, y) && pair.reference_mask.get(x, y) {
                        255
                    } else {
                        0
                    }
                }
            })
            .collect()
    }

    /// Inverse of [`LabelMask::to_bytes`]; values above 127 mean label 1.
    pub fn from_bytes(pair: &AlignedPair, width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let (w, h) = pair.dims();
        if (width, height) != (w, h) || bytes.len() != w * h {
            return Err(Error::DimensionMismatch(w, h, width, height));
        }
        Ok(Self::from_fn(w, h, |x, y| {
            if !pair.in_overlap(x, y) {
                Label::Outside
            } else if bytes[y * w + x] > 127 {
                Label::Reference
            } else {
                Label::Target
            }
        }))
    }

    pub fn write_png(&self, pair: &AlignedPair, path: &Path) -> Result<()> {
        imaging::write_gray_png(self.width, self.height, &self.to_bytes(pair), path)
    }

    pub fn read_png(pair: &AlignedPair, path: &Path) -> Result<Self> {
        let (w, h, bytes) = imaging::read_gray_png(path)?;
        Self::from_bytes(pair, w, h, &bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeamPixel {
    pub x: usize,
    pub y: usize,
    /// A neighbor that carries label 1.
    pub normal: Direction,
}

/// Ordered seam path. Disconnected boundary chains are concatenated; the
/// start index of each chain is kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seam {
    pixels: Vec<SeamPixel>,
    chain_starts: Vec<usize>,
}

impl Seam {
    pub fn from_parts(pixels: Vec<SeamPixel>, chain_starts: Vec<usize>) -> Self {
        Self { pixels, chain_starts }
    }

    pub fn pixels(&self) -> &[SeamPixel] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn chain_starts(&self) -> &[usize] {
        &self.chain_starts
    }

    /// Set when the cut boundary did not form a single 8-connected chain.
    pub fn is_multi_chain(&self) -> bool {
        self.chain_starts.len() > 1
    }

    /// Index of the chain holding seam element `i`.
    pub fn chain_of(&self, i: usize) -> usize {
        self.chain_starts.partition_point(|&s| s <= i) - 1
    }
}

/// Pairwise cost of two neighbors receiving different labels.
pub trait Smoothness: Sync {
    fn edge_cost(&self, pair: &AlignedPair, p: (usize, usize), q: (usize, usize)) -> f64;
}

/// `|I0(p) - I1(p)| + |I0(q) - I1(q)|` with RGB Euclidean norms.
#[derive(Clone, Copy, Debug, Default)]
pub struct EuclideanSmoothness;

impl EuclideanSmoothness {
    #[inline]
    pub fn pixel_difference(pair: &AlignedPair, x: usize, y: usize) -> f64 {
        pair.target
            .pixel(x, y)
            .iter()
            .zip(pair.reference.pixel(x, y))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Smoothness for EuclideanSmoothness {
    fn edge_cost(&self, pair: &AlignedPair, p: (usize, usize), q: (usize, usize)) -> f64 {
        Self::pixel_difference(pair, p.0, p.1) + Self::pixel_difference(pair, q.0, q.1)
    }
}

/// Caller-imposed labels, one optional entry per canvas pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardConstraints {
    width: usize,
    labels: Vec<Option<u8>>,
}

impl HardConstraints {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            labels: vec![None; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = Some(label);
    }

    pub fn get(&self, x: usize, y: usize) -> Option<u8> {
        self.labels[y * self.width + x]
    }
}

/// Label forced at `(x, y)` by adjacency to single-image canvas.
fn anchor_label(pair: &AlignedPair, x: usize, y: usize) -> Result<Option<u8>> {
    let (w, h) = pair.dims();
    let mut near_target_only = false;
    let mut near_reference_only = false;
    for d in Direction::ALL {
        let (dx, dy) = d.offset();
        if let Some((nx, ny)) = step(x, y, dx, dy, w, h) {
            match (pair.target_mask.get(nx, ny), pair.reference_mask.get(nx, ny)) {
                (true, false) => near_target_only = true,
                (false, true) => near_reference_only = true,
                _ => {}
            }
        }
    }
    match (near_target_only, near_reference_only) {
        (true, true) => Err(Error::ConstraintConflict { x, y }),
        (true, false) => Ok(Some(0)),
        (false, true) => Ok(Some(1)),
        (false, false) => Ok(None),
    }
}

/// Builds the seam energy with the Euclidean smoothness term.
pub fn build_energy(pair: &AlignedPair, constraints: Option<&HardConstraints>) -> Result<GridGraph> {
    build_energy_with(pair, constraints, &EuclideanSmoothness, Execution::default())
}

pub fn build_energy_with(
    pair: &AlignedPair,
    constraints: Option<&HardConstraints>,
    smoothness: &dyn Smoothness,
    exec: Execution,
) -> Result<GridGraph> {
    let (w, h) = pair.dims();
    let mut graph = GridGraph::new(w, h);
    let mut any_overlap = false;
    let mut anchored = [false; 2];
    let mut caller = false;

    for y in 0..h {
        for x in 0..w {
            if !pair.in_overlap(x, y) {
                graph.set_active(x, y, false);
                continue;
            }
            any_overlap = true;
            let anchor = anchor_label(pair, x, y)?;
            let imposed = constraints.and_then(|c| c.get(x, y));
            let forced = match (anchor, imposed) {
                (Some(a), Some(b)) if a != b => return Err(Error::ConstraintConflict { x, y }),
                (a, b) => b.or(a),
            };
            if let Some(a) = anchor {
                anchored[a as usize] = true;
            }
            if imposed.is_some() {
                caller = true;
            }
            if let Some(l) = forced {
                graph.force_label(x, y, l);
            }
        }
    }
    if !any_overlap {
        return Err(Error::EmptyOverlap);
    }
    if !caller {
        if !anchored[0] {
            return Err(Error::Unanchored("label-0"));
        }
        if !anchored[1] {
            return Err(Error::Unanchored("label-1"));
        }
    }

    let rows = map_indices(exec, h, |y| {
        let mut right = vec![0.0; w];
        let mut down = vec![0.0; w];
        for x in 0..w {
            if !pair.in_overlap(x, y) {
                continue;
            }
            if x + 1 < w && pair.in_overlap(x + 1, y) {
                right[x] = smoothness.edge_cost(pair, (x, y), (x + 1, y));
            }
            if y + 1 < h && pair.in_overlap(x, y + 1) {
                down[x] = smoothness.edge_cost(pair, (x, y), (x, y + 1));
            }
        }
        (right, down)
    });
    for (y, (right, down)) in rows.into_iter().enumerate() {
        for x in 0..w {
            graph.set_right(x, y, right[x]);
            graph.set_down(x, y, down[x]);
        }
    }
    Ok(graph)
}

/// Label mask, its seam, and the optimal energy.
#[derive(Clone, Debug)]
pub struct SeamEstimate {
    pub mask: LabelMask,
    pub seam: Seam,
    pub cut_cost: f64,
}

pub fn estimate_seam(pair: &AlignedPair) -> Result<SeamEstimate> {
    estimate_seam_with(pair, &EuclideanSmoothness, Execution::default())
}

pub fn estimate_seam_with(pair: &AlignedPair, smoothness: &dyn Smoothness, exec: Execution) -> Result<SeamEstimate> {
    let graph = build_energy_with(pair, None, smoothness, exec)?;
    let cut = solve_mincut(&graph)?;
    let (w, h) = pair.dims();
    let mask = LabelMask::from_fn(w, h, |x, y| {
        if graph.is_active(x, y) {
            Label::from_bit(cut.label(x, y))
        } else {
            Label::Outside
        }
    });
    let seam = extract_seam_path(&mask)?;
    Ok(SeamEstimate {
        mask,
        seam,
        cut_cost: cut.cut_cost,
    })
}

/// Neighbor preference for the greedy walk: 4-neighbors, then diagonals.
const WALK: [(isize, isize); 8] = [(0, 1), (1, 0), (-1, 0), (0, -1), (1, 1), (-1, 1), (1, -1), (-1, -1)];

/// Orders the boundary pixels into a path by greedy nearest-neighbor walks.
pub fn extract_seam_path(mask: &LabelMask) -> Result<Seam> {
    let (w, h) = mask.dims();
    let mut pending: Vec<bool> = (0..w * h).map(|i| mask.is_boundary(i % w, i / w)).collect();
    let total = pending.iter().filter(|&&b| b).count();
    if total == 0 {
        return Err(Error::EmptySeam);
    }

    let mut pixels = Vec::with_capacity(total);
    let mut chain_starts = Vec::new();
    let mut cursor = 0;
    while pixels.len() < total {
        while !pending[cursor] {
            cursor += 1;
        }
        chain_starts.push(pixels.len());
        let (mut x, mut y) = (cursor % w, cursor / w);
        loop {
            pending[y * w + x] = false;
            pixels.push(SeamPixel {
                x,
                y,
                normal: mask.reference_side(x, y).expect("boundary pixel"),
            });
            let next = WALK
                .iter()
                .filter_map(|&(dx, dy)| step(x, y, dx, dy, w, h))
                .find(|&(nx, ny)| pending[ny * w + nx]);
            match next {
                Some((nx, ny)) => (x, y) = (nx, ny),
                None => break,
            }
        }
    }
    Ok(Seam { pixels, chain_starts })
}

/// Composited canvas and the pixels that received content.
#[derive(Clone, Debug, PartialEq)]
pub struct Mosaic {
    pub image: Image,
    pub coverage: ValidityMask,
}

pub fn composite(pair: &AlignedPair, mask: &LabelMask) -> Mosaic {
    let (w, h) = pair.dims();
    let mut image = Image::new(w, h, pair.target.channels());
    let mut coverage = ValidityMask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let t = pair.target_mask.get(x, y);
            let r = pair.reference_mask.get(x, y);
            let src = match (t, r) {
                (true, true) => match mask.get(x, y) {
                    Label::Reference => &pair.reference,
                    _ => &pair.target,
                },
                (true, false) => &pair.target,
                (false, true) => &pair.reference,
                (false, false) => continue,
            };
            image.set(x, y, src.pixel(x, y));
            coverage.set(x, y, true);
        }
    }
    Mosaic { image, coverage }
}

/// Smoothness part of the energy for `mask`.
pub fn seam_cost(pair: &AlignedPair, mask: &LabelMask, smoothness: &dyn Smoothness) -> f64 {
    let (w, h) = pair.dims();
    let mut cost = 0.0;
    for y in 0..h {
        for x in 0..w {
            let l = mask.get(x, y);
            if l == Label::Outside {
                continue;
            }
            if x + 1 < w && !matches!(mask.get(x + 1, y), Label::Outside) && mask.get(x + 1, y) != l {
                cost += smoothness.edge_cost(pair, (x, y), (x + 1, y));
            }
            if y + 1 < h && !matches!(mask.get(x, y + 1), Label::Outside) && mask.get(x, y + 1) != l {
                cost += smoothness.edge_cost(pair, (x, y), (x, y + 1));
            }
        }
    }
    cost
}

/// Bounding box of the seam pixels.
pub fn seam_bounds(pixels: &[SeamPixel]) -> Option<Rect> {
    let first = pixels.first()?;
    let mut r = Rect {
        x0: first.x,
        y0: first.y,
        x1: first.x + 1,
        y1: first.y + 1,
    };
    for p in pixels {
        r.x0 = r.x0.min(p.x);
        r.y0 = r.y0.min(p.y);
        r.x1 = r.x1.max(p.x + 1);
        r.y1 = r.y1.max(p.y + 1);
    }
    Some(r)
}
