//! Seam quality assessment.
//!
//! Each seam pixel is scored by comparing the two grayscale windows centred
//! on it, `Q = 1 - SSIM`. High-Q runs along the seam are split off with an
//! Otsu threshold and boxed into patches for realignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{luminance, AlignedPair, Image, Rect, ValidityMask};
use crate::parallel::{map_indices, Execution};
use crate::seam::{seam_bounds, Label, LabelMask, Seam};

pub const DEFAULT_WINDOW: usize = 21;
pub const DEFAULT_K: f64 = 1.5;
pub const DEFAULT_MARGIN: usize = 21;

/// Windows with fewer valid pixels borrow the nearest scored neighbor's value.
pub const MIN_WINDOW_PIXELS: usize = 9;
pub const PSNR_CAP: f64 = 100.0;
/// Runs this close (in seam pixels) are merged.
pub const MERGE_GAP: usize = 5;
pub const MIN_RUN: usize = 3;
pub const OTSU_BINS: usize = 256;

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean, variances and covariance with population normalization.
fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (da, db) = (x - mu_a, y - mu_b);
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    (mu_a, mu_b, va / n, vb / n, cov / n)
}

/// Single-window SSIM with uniform weights over the whole patch.
pub fn ssim_patch(p0: &[f64], p1: &[f64]) -> Result<f64> {
    if p0.len() != p1.len() {
        return Err(Error::DimensionMismatch(p0.len(), 1, p1.len(), 1));
    }
    if p0.len() < 2 {
        return Err(Error::InvalidParameter("SSIM needs at least two pixels".into()));
    }
    let (m0, m1, v0, v1, cov) = moments(p0, p1);
    Ok(((2.0 * m0 * m1 + C1) * (2.0 * cov + C2)) / ((m0 * m0 + m1 * m1 + C1) * (v0 + v1 + C2)))
}

fn mse(p0: &[f64], p1: &[f64]) -> f64 {
    p0.iter().zip(p1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p0.len() as f64
}

pub fn rmse_patch(p0: &[f64], p1: &[f64]) -> f64 {
    mse(p0, p1).sqrt()
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`] for near-identical patches.
pub fn psnr_patch(p0: &[f64], p1: &[f64]) -> f64 {
    let m = mse(p0, p1);
    if m < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

/// Zero-mean normalized cross-correlation. Constant patches score 1 when
/// equal to within 1e-6 per pixel and 0 otherwise.
pub fn zncc_patch(p0: &[f64], p1: &[f64]) -> f64 {
    let (_, _, v0, v1, cov) = moments(p0, p1);
    let denom = (v0 * v1).sqrt();
    if denom <= 0.0 {
        let equal = p0.iter().zip(p1).all(|(a, b)| (a - b).abs() <= 1e-6);
        return if equal { 1.0 } else { 0.0 };
    }
    (cov / denom).clamp(-1.0, 1.0)
}

/// Grayscale view of a pair, the input of every window statistic.
#[derive(Clone, Debug)]
pub struct GrayPair {
    pub target: Image,
    pub reference: Image,
    pub overlap: ValidityMask,
}

impl GrayPair {
    pub fn new(pair: &AlignedPair) -> Self {
        Self {
            target: luminance(&pair.target),
            reference: luminance(&pair.reference),
            overlap: crate::imaging::compute_overlap(pair),
        }
    }

    /// Overlap pixels of the window centred at `(x, y)`. The half-size is
    /// shrunk per axis so the window stays centred inside the canvas.
    pub fn window(&self, x: usize, y: usize, window: usize) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = self.target.dims();
        let half = window / 2;
        let hx = half.min(x).min(w - 1 - x);
        let hy = half.min(y).min(h - 1 - y);
        let cap = (2 * hx + 1) * (2 * hy + 1);
        let mut a = Vec::with_capacity(cap);
        let mut b = Vec::with_capacity(cap);
        for yy in y - hy..=y + hy {
            for xx in x - hx..=x + hx {
                if self.overlap.get(xx, yy) {
                    a.push(self.target.value(xx, yy));
                    b.push(self.reference.value(xx, yy));
                }
            }
        }
        (a, b)
    }
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "window must be odd and >= 3, got {window}"
        )));
    }
    Ok(())
}

/// Scores every seam pixel with `score`; pixels whose window is too small
/// take the value of the nearest scored seam index (lower index on ties).
fn score_seam<T, F>(gray: &GrayPair, seam: &Seam, window: usize, exec: Execution, score: F) -> Result<Vec<T>>
where
    T: Clone + Send,
    F: Fn(&[f64], &[f64]) -> T + Sync + Send,
{
    if seam.is_empty() {
        return Err(Error::EmptySeam);
    }
    check_window(window)?;
    let px = seam.pixels();
    let raw: Vec<Option<T>> = map_indices(exec, px.len(), |i| {
        let (a, b) = gray.window(px[i].x, px[i].y, window);
        (a.len() >= MIN_WINDOW_PIXELS).then(|| score(&a, &b))
    });
    let scored: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].is_some()).collect();
    if scored.is_empty() {
        return Err(Error::UnscorableSeam);
    }
    Ok((0..raw.len())
        .map(|i| {
            raw[i].clone().unwrap_or_else(|| {
                let pos = scored.partition_point(|&s| s < i);
                let nearest = match (pos.checked_sub(1).map(|p| scored[p]), scored.get(pos)) {
                    (Some(lo), Some(&hi)) if hi - i < i - lo => hi,
                    (Some(lo), _) => lo,
                    (None, Some(&hi)) => hi,
                    (None, None) => unreachable!(),
                };
                raw[nearest].clone().unwrap()
            })
        })
        .collect())
}

/// Per-seam-pixel error `Q = 1 - SSIM`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityProfile {
    pub values: Vec<f64>,
    pub window: usize,
}

impl QualityProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate_seam(pair: &AlignedPair, seam: &Seam, window: usize) -> Result<QualityProfile> {
    evaluate_seam_with(&GrayPair::new(pair), seam, window, Execution::default())
}

pub fn evaluate_seam_with(gray: &GrayPair, seam: &Seam, window: usize, exec: Execution) -> Result<QualityProfile> {
    let values = score_seam(gray, seam, window, exec, |a, b| {
        1.0 - ssim_patch(a, b).expect("window has at least nine pixels")
    })?;
    Ok(QualityProfile { values, window })
}

/// Histogram bin of `v` among [`OTSU_BINS`] uniform bins over `[lo, hi]`.
#[inline]
fn bin_of(v: f64, lo: f64, hi: f64) -> usize {
    let b = ((v - lo) / (hi - lo) * OTSU_BINS as f64).floor();
    (b.max(0.0) as usize).min(OTSU_BINS - 1)
}

/// Otsu threshold over a 256-bin histogram of `values`.
///
/// Returns the bin edge that maximizes between-class variance, preferring
/// the lowest edge on ties, or `None` for fewer than two distinct values.
/// Class statistics use bin indices, so candidate variances are compared
/// as exact rationals.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let k = otsu_bin_edge(values)?;
    let (lo, hi) = min_max(values)?;
    Some(lo + (hi - lo) * k as f64 / OTSU_BINS as f64)
}

fn min_max(values: &[f64]) -> Option<(f64, f64)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (values.len() >= 2 && lo.is_finite() && hi.is_finite() && hi > lo).then_some((lo, hi))
}

/// Index `k` in `1..256` of the winning edge; class 0 holds bins `< k`.
pub fn otsu_bin_edge(values: &[f64]) -> Option<usize> {
    let (lo, hi) = min_max(values)?;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[bin_of(v, lo, hi)] += 1;
    }
    let n: u64 = values.len() as u64;
    let total: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    // sigma_B^2 * N^2 = (S0 n1 - S1 n0)^2 / (n0 n1); compare numerator and
    // denominator by cross-multiplication.
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total - s0;
        let diff = (i128::from(s0) * i128::from(n1) - i128::from(s1) * i128::from(n0)).unsigned_abs();
        let num = diff * diff;
        let den = u128::from(n0) * u128::from(n1);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => greater(num, den, bn, bd),
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

/// `a/b > c/d` for positive denominators, exact while products fit.
fn greater(a: u128, b: u128, c: u128, d: u128) -> bool {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        _ => (a as f64 / b as f64) > (c as f64 / d as f64),
    }
}

/// A maximal high-error run of the seam.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisalignedComponent {
    /// Inclusive seam index range.
    pub start: usize,
    pub end: usize,
    /// Seam indices with `Q >= tau`.
    pub members: Vec<usize>,
}

impl MisalignedComponent {
    pub fn pixels<'a>(&'a self, seam: &'a Seam) -> impl Iterator<Item = (usize, usize)> + 'a {
        self.members.iter().map(|&i| (seam.pixels()[i].x, seam.pixels()[i].y))
    }
}

/// Result of the plausibility test on a profile.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub plausible: bool,
    pub threshold: Option<f64>,
    pub components: Vec<MisalignedComponent>,
}

/// Applies the `max(Q) <= k mean(Q)` plausibility rule and, failing it,
/// extracts Otsu-thresholded runs. Runs never cross seam chain boundaries.
pub fn detect_misaligned(profile: &QualityProfile, k: f64, seam: &Seam) -> Detection {
    let q = &profile.values;
    let plausible = Detection {
        plausible: true,
        threshold: None,
        components: Vec::new(),
    };
    if q.is_empty() || profile.max() <= k * profile.mean() {
        return plausible;
    }
    let Some(tau) = otsu_threshold(q) else {
        return plausible;
    };

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < q.len() {
        if q[i] < tau {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < q.len() && q[i + 1] >= tau && seam.chain_of(i + 1) == seam.chain_of(start) {
            i += 1;
        }
        runs.push((start, i));
        i += 1;
    }

    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in runs {
        if let Some(last) = merged.last_mut() {
            let gap = s - last.1 - 1;
            if gap <= MERGE_GAP && seam.chain_of(s) == seam.chain_of(last.0) {
                last.1 = e;
                continue;
            }
        }
        merged.push((s, e));
    }

    let components = merged
        .into_iter()
        .filter(|&(s, e)| e - s + 1 >= MIN_RUN)
        .map(|(start, end)| MisalignedComponent {
            start,
            end,
            members: (start..=end).filter(|&j| q[j] >= tau).collect(),
        })
        .collect();
    Detection {
        plausible: false,
        threshold: Some(tau),
        components,
    }
}

/// Direction along which the flow is ramped in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// `t` follows x.
    Horizontal,
    /// `t` follows y.
    Vertical,
}

/// Which end of the axis carries `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampOrigin {
    /// Left (horizontal) or top (vertical) side.
    Low,
    /// Right or bottom side.
    High,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRegion {
    pub rect: Rect,
    pub axis: Axis,
    pub origin: RampOrigin,
    /// Indices into the component list this region covers.
    pub components: Vec<usize>,
}

/// Boxes components with `margin` pixels of context, merging boxes that
/// intersect, and picks each box's ramp axis and origin.
pub fn enclosing_patches(
    components: &[MisalignedComponent],
    seam: &Seam,
    mask: &LabelMask,
    margin: usize,
) -> Vec<PatchRegion> {
    let (w, h) = mask.dims();
    let mut boxes: Vec<(Rect, Rect, Vec<usize>)> = components
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let members: Vec<_> = c.members.iter().map(|&j| seam.pixels()[j]).collect();
            let tight = seam_bounds(&members)?;
            Some((tight.expand(margin, w, h), tight, vec![i]))
        })
        .collect();

    // merge until no two boxes intersect
    loop {
        let mut merged_any = false;
        'outer: for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes[i].0.intersects(&boxes[j].0) {
                    let (rj, tj, cj) = boxes.remove(j);
                    let (ri, ti, ci) = &mut boxes[i];
                    *ri = ri.union(&rj);
                    *ti = ti.union(&tj);
                    ci.extend(cj);
                    ci.sort_unstable();
                    merged_any = true;
                    break 'outer;
                }
            }
        }
        if !merged_any {
            break;
        }
    }

    boxes
        .into_iter()
        .map(|(rect, tight, components)| {
            let axis = if tight.height() > tight.width() {
                Axis::Horizontal
            } else {
                Axis::Vertical
            };
            let origin = ramp_origin(mask, rect, axis);
            PatchRegion {
                rect,
                axis,
                origin,
                components,
            }
        })
        .collect()
}

/// The side (across the axis) whose pixels are more often label 0.
fn ramp_origin(mask: &LabelMask, rect: Rect, axis: Axis) -> RampOrigin {
    // each line across the axis contributes the first labeled pixel met
    // when walking inward from either side
    let first = |cells: &mut dyn Iterator<Item = (usize, usize)>| {
        cells.map(|(x, y)| mask.get(x, y)).find(|&l| l != Label::Outside)
    };
    let (mut low, mut high) = ([0usize; 2], [0usize; 2]);
    let tally = |side: &mut [usize; 2], label: Option<Label>| match label {
        Some(Label::Target) => side[0] += 1,
        Some(Label::Reference) => side[1] += 1,
        _ => {}
    };
    match axis {
        Axis::Horizontal => {
            for y in rect.y0..rect.y1 {
                tally(&mut low, first(&mut (rect.x0..rect.x1).map(|x| (x, y))));
                tally(&mut high, first(&mut (rect.x0..rect.x1).rev().map(|x| (x, y))));
            }
        }
        Axis::Vertical => {
            for x in rect.x0..rect.x1 {
                tally(&mut low, first(&mut (rect.y0..rect.y1).map(|y| (x, y))));
                tally(&mut high, first(&mut (rect.y0..rect.y1).rev().map(|y| (x, y))));
            }
        }
    }
    let share = |side: [usize; 2]| {
        let n = side[0] + side[1];
        if n == 0 {
            0.5
        } else {
            side[0] as f64 / n as f64
        }
    };
    if share(high) > share(low) {
        RampOrigin::High
    } else {
        RampOrigin::Low
    }
}

/// Seam-averaged window metrics; `zncc` holds the `(1 - ZNCC) / 2` error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamMetrics {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub zncc: f64,
    pub seam_length: usize,
    pub window: usize,
}

pub fn seam_metrics(pair: &AlignedPair, seam: &Seam, window: usize) -> Result<SeamMetrics> {
    seam_metrics_with(&GrayPair::new(pair), seam, window, Execution::default())
}

pub fn seam_metrics_with(gray: &GrayPair, seam: &Seam, window: usize, exec: Execution) -> Result<SeamMetrics> {
    let per_pixel = score_seam(gray, seam, window, exec, |a, b| {
        [
            rmse_patch(a, b),
            psnr_patch(a, b),
            ssim_patch(a, b).expect("window has at least nine pixels"),
            (1.0 - zncc_patch(a, b)) / 2.0,
        ]
    })?;
    let n = per_pixel.len() as f64;
    let mut sums = [0.0; 4];
    for m in &per_pixel {
        for (s, v) in sums.iter_mut().zip(m) {
            *s += v;
        }
    }
    Ok(SeamMetrics {
        rmse: sums[0] / n,
        psnr: sums[1] / n,
        ssim: sums[2] / n,
        zncc: sums[3] / n,
        seam_length: seam.len(),
        window,
    })
}
