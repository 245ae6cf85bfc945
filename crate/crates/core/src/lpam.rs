//! Local patch alignment: repairs poorly scored seam segments.
//!
//! For each patch around a misaligned run the target is realigned to the
//! reference with dense flow, the flow is faded in along the patch with a
//! sigmoid ramp so the patch border stays consistent with its surroundings,
//! and the seam is re-cut inside the patch with the patch border pinned to
//! the labels it already had.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{dense_descriptors_with, estimate_flow, FlowField, FlowParams};
use crate::imaging::{bilinear_sample, luminance, AlignedPair, Image, Rect, ValidityMask};
use crate::mincut::solve_mincut;
use crate::parallel::Execution;
use crate::quality::{
    detect_misaligned, enclosing_patches, evaluate_seam_with, Axis, GrayPair, PatchRegion, QualityProfile, RampOrigin,
    DEFAULT_K, DEFAULT_MARGIN, DEFAULT_WINDOW,
};
use crate::seam::{build_energy_with, extract_seam_path, EuclideanSmoothness, HardConstraints, Label, LabelMask, Seam};

pub const DEFAULT_BETA: f64 = 8.0;
/// Share of warped target pixels allowed to land on invalid content.
pub const MAX_INVALID_FRACTION: f64 = 0.2;

/// `1 / (1 + exp(-beta (t - 0.5)))`.
pub fn sigmoid_weight(t: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-beta * (t - 0.5)).exp())
}

/// Flow attenuation across a patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmoidRamp {
    pub beta: f64,
    pub axis: Axis,
    pub origin: RampOrigin,
}

impl SigmoidRamp {
    pub fn new(beta: f64, axis: Axis, origin: RampOrigin) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter("beta must be > 0".into()));
        }
        Ok(Self { beta, axis, origin })
    }

    /// Normalized position of patch pixel `(x, y)` along the axis, 0 at the
    /// origin side.
    pub fn position(&self, rect: Rect, x: usize, y: usize) -> f64 {
        let (coord, extent) = match self.axis {
            Axis::Horizontal => (x, rect.width()),
            Axis::Vertical => (y, rect.height()),
        };
        if extent <= 1 {
            return 0.5;
        }
        let t = coord as f64 / (extent - 1) as f64;
        match self.origin {
            RampOrigin::Low => t,
            RampOrigin::High => 1.0 - t,
        }
    }

    pub fn weight(&self, rect: Rect, x: usize, y: usize) -> f64 {
        sigmoid_weight(self.position(rect, x, y), self.beta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpamConfig {
    pub window: usize,
    pub k: f64,
    pub beta: f64,
    pub margin: usize,
    pub flow: FlowParams,
    pub exec: Execution,
}

impl Default for LpamConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            k: DEFAULT_K,
            beta: DEFAULT_BETA,
            margin: DEFAULT_MARGIN,
            flow: FlowParams::default(),
            exec: Execution::default(),
        }
    }
}

impl LpamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidParameter("window must be odd and >= 3".into()));
        }
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter("beta must be > 0".into()));
        }
        self.flow.validate()
    }

    fn flow_params(&self) -> FlowParams {
        FlowParams {
            exec: self.exec,
            ..self.flow.clone()
        }
    }
}

/// Running state of the repair loop.
#[derive(Clone, Debug)]
pub struct StitchState {
    pub pair: AlignedPair,
    pub mask: LabelMask,
    pub seam: Seam,
    pub profile: QualityProfile,
    pub iteration: usize,
}

impl StitchState {
    pub fn new(pair: AlignedPair, mask: LabelMask, seam: Seam, window: usize, exec: Execution) -> Result<Self> {
        let profile = evaluate_seam_with(&GrayPair::new(&pair), &seam, window, exec)?;
        Ok(Self {
            pair,
            mask,
            seam,
            profile,
            iteration: 0,
        })
    }
}

/// Realigned target and untouched reference over a patch.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedPatch {
    pub rect: Rect,
    pub target: Image,
    pub reference: Image,
    /// Target pixels whose displaced sample hit invalid content.
    pub flagged: usize,
    /// Valid target pixels in the patch.
    pub total: usize,
}

/// Samples the full current target at `p + f(t) V(p)` for every valid target
/// pixel of the patch.
pub fn warp_patch(pair: &AlignedPair, region: &PatchRegion, flow: &FlowField, beta: f64) -> Result<WarpedPatch> {
    let rect = region.rect;
    if (flow.width, flow.height) != (rect.width(), rect.height()) {
        return Err(Error::DimensionMismatch(
            flow.width,
            flow.height,
            rect.width(),
            rect.height(),
        ));
    }
    let ramp = SigmoidRamp::new(beta, region.axis, region.origin)?;
    let mut target = pair.target.crop(rect);
    let reference = pair.reference.crop(rect);
    let channels = target.channels();
    let (mut flagged, mut total) = (0, 0);
    for ly in 0..rect.height() {
        for lx in 0..rect.width() {
            let (x, y) = (rect.x0 + lx, rect.y0 + ly);
            if !pair.target_mask.get(x, y) {
                continue;
            }
            total += 1;
            let f = ramp.weight(rect, lx, ly);
            let (u, v) = flow.at(lx, ly);
            let sx = x as f64 + f * u;
            let sy = y as f64 + f * v;
            let inside = sx >= 0.0 && sy >= 0.0 && sx <= (pair.width() - 1) as f64 && sy <= (pair.height() - 1) as f64;
            match bilinear_sample(&pair.target, &pair.target_mask, sx, sy).filter(|_| inside) {
                Some(c) => target.set(lx, ly, &c[..channels]),
                None => flagged += 1,
            }
        }
    }
    if flagged as f64 > MAX_INVALID_FRACTION * total as f64 {
        return Err(Error::WarpOutOfBounds { flagged, total });
    }
    Ok(WarpedPatch {
        rect,
        target,
        reference,
        flagged,
        total,
    })
}

/// Re-cut result over a patch, in patch coordinates.
#[derive(Clone, Debug)]
pub struct LocalCut {
    pub mask: LabelMask,
    /// `None` when the pinned border carries a single label.
    pub seam: Option<Seam>,
    pub cost: f64,
}

/// Patch pixels pinned to their current label: overlap pixels on the patch
/// border or next to non-overlap pixels.
pub fn region_boundary(pair: &AlignedPair, rect: Rect) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            if !pair.in_overlap(x, y) {
                continue;
            }
            let on_border = x == rect.x0 || y == rect.y0 || x + 1 == rect.x1 || y + 1 == rect.y1;
            let near_hole = (x > rect.x0 && !pair.in_overlap(x - 1, y))
                || (x + 1 < rect.x1 && !pair.in_overlap(x + 1, y))
                || (y > rect.y0 && !pair.in_overlap(x, y - 1))
                || (y + 1 < rect.y1 && !pair.in_overlap(x, y + 1));
            if on_border || near_hole {
                out.push((x, y));
            }
        }
    }
    out
}

/// Minimum-cost labeling of the patch under the warped colors, with the
/// patch boundary pinned to `mask`.
pub fn local_seam(pair: &AlignedPair, mask: &LabelMask, warped: &WarpedPatch, exec: Execution) -> Result<LocalCut> {
    let rect = warped.rect;
    let local = AlignedPair::new(
        warped.target.clone(),
        pair.target_mask.crop(rect),
        warped.reference.clone(),
        pair.reference_mask.crop(rect),
    )?;
    let current = LabelMask::from_fn(rect.width(), rect.height(), |x, y| mask.get(rect.x0 + x, rect.y0 + y));

    let boundary = region_boundary(pair, rect);
    let mut seen = [false; 2];
    let mut constraints = HardConstraints::new(rect.width(), rect.height());
    for &(x, y) in &boundary {
        let bit = match mask.get(x, y) {
            Label::Target => 0,
            Label::Reference => 1,
            Label::Outside => continue,
        };
        seen[bit as usize] = true;
        constraints.set(x - rect.x0, y - rect.y0, bit);
    }
    if !(seen[0] && seen[1]) {
        let fill = if seen[1] { Label::Reference } else { Label::Target };
        let mask = LabelMask::from_fn(rect.width(), rect.height(), |x, y| {
            if local.in_overlap(x, y) {
                if seen[0] || seen[1] {
                    fill
                } else {
                    current.get(x, y)
                }
            } else {
                Label::Outside
            }
        });
        return Ok(LocalCut {
            mask,
            seam: None,
            cost: 0.0,
        });
    }

    let graph = build_energy_with(&local, Some(&constraints), &EuclideanSmoothness, exec)?;
    let cut = solve_mincut(&graph)?;
    let mask = LabelMask::from_fn(rect.width(), rect.height(), |x, y| {
        if graph.is_active(x, y) {
            Label::from_bit(cut.label(x, y))
        } else {
            Label::Outside
        }
    });
    let seam = match extract_seam_path(&mask) {
        Ok(s) => Some(s),
        Err(Error::EmptySeam) => None,
        Err(e) => return Err(e),
    };
    Ok(LocalCut {
        mask,
        seam,
        cost: cut.cut_cost,
    })
}

/// Pastes the warped target and the local labels into the state and
/// re-derives the seam and its quality profile.
pub fn merge_step(state: &mut StitchState, warped: &WarpedPatch, cut: &LocalCut, exec: Execution) -> Result<()> {
    let rect = warped.rect;
    let mut mask = state.mask.clone();
    for y in 0..rect.height() {
        for x in 0..rect.width() {
            let l = cut.mask.get(x, y);
            if l != Label::Outside {
                mask.set(rect.x0 + x, rect.y0 + y, l);
            }
        }
    }
    let seam = extract_seam_path(&mask)?;

    let mut pair = state.pair.clone();
    for y in 0..rect.height() {
        for x in 0..rect.width() {
            let (cx, cy) = (rect.x0 + x, rect.y0 + y);
            if pair.target_mask.get(cx, cy) {
                pair.target.set(cx, cy, warped.target.pixel(x, y));
            }
            if pair.reference_mask.get(cx, cy) {
                pair.reference.set(cx, cy, warped.reference.pixel(x, y));
            }
        }
    }
    let profile = evaluate_seam_with(&GrayPair::new(&pair), &seam, state.profile.window, exec)?;
    state.pair = pair;
    state.mask = mask;
    state.seam = seam;
    state.profile = profile;
    state.iteration += 1;
    Ok(())
}

/// Wall-clock milliseconds spent per stage, summed over patches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect: f64,
    pub descriptors: f64,
    pub flow: f64,
    pub warp: f64,
    pub cut: f64,
    pub merge: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    /// Inclusive seam index range of the run.
    pub range: [usize; 2],
    pub region: Rect,
    pub pre_mean_q: f64,
    pub post_mean_q: f64,
    pub skipped: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpamReport {
    pub plausible: bool,
    pub threshold: Option<f64>,
    pub components: Vec<ComponentReport>,
    pub elapsed_ms: StageTimings,
}

#[derive(Clone, Debug)]
pub struct LpamOutcome {
    pub pair: AlignedPair,
    pub mask: LabelMask,
    pub seam: Seam,
    pub profile: QualityProfile,
    pub initial_profile: QualityProfile,
    pub regions: Vec<PatchRegion>,
    pub report: LpamReport,
}

fn mean_q_in(rect: Rect, seam: &Seam, profile: &QualityProfile) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, q) in seam.pixels().iter().zip(&profile.values) {
        if rect.contains(p.x, p.y) {
            sum += q;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// One pass of the repair loop over every detected component.
pub fn run_lpam(pair: &AlignedPair, mask: &LabelMask, seam: &Seam, config: &LpamConfig) -> Result<LpamOutcome> {
    config.validate()?;
    if mask.dims() != pair.dims() {
        let (w, h) = mask.dims();
        return Err(Error::DimensionMismatch(pair.width(), pair.height(), w, h));
    }
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let exec = config.exec;

    let mut state = StitchState::new(pair.clone(), mask.clone(), seam.clone(), config.window, exec)?;
    let initial_profile = state.profile.clone();
    let detection = detect_misaligned(&state.profile, config.k, &state.seam);
    let mut regions = enclosing_patches(&detection.components, &state.seam, &state.mask, config.margin);
    regions.sort_by_key(|r| r.components.iter().map(|&c| detection.components[c].start).min());
    timings.detect = ms(start);

    let mut outcomes: Vec<Option<String>> = Vec::with_capacity(regions.len());
    for region in &regions {
        let result = process_region(&mut state, region, config, &mut timings);
        outcomes.push(result.err().map(|e| e.to_string()));
    }

    let mut components = Vec::new();
    for (region, reason) in regions.iter().zip(&outcomes) {
        for &c in &region.components {
            let comp = &detection.components[c];
            components.push(ComponentReport {
                range: [comp.start, comp.end],
                region: region.rect,
                pre_mean_q: mean_q_in(region.rect, seam, &initial_profile),
                post_mean_q: mean_q_in(region.rect, &state.seam, &state.profile),
                skipped: reason.is_some(),
                reason: reason.clone(),
            });
        }
    }
    components.sort_by_key(|c| c.range[0]);
    timings.total = ms(start);

    Ok(LpamOutcome {
        pair: state.pair,
        mask: state.mask,
        seam: state.seam,
        profile: state.profile,
        initial_profile,
        regions,
        report: LpamReport {
            plausible: detection.plausible,
            threshold: detection.threshold,
            components,
            elapsed_ms: timings,
        },
    })
}

/// Replaces masked-out pixels with the nearest valid pixel of the same row
/// (left on ties), or of the nearest row with any valid pixel. Keeps the
/// artificial edge at the coverage border out of the descriptors.
pub fn fill_invalid(image: &Image, mask: &ValidityMask) -> Image {
    let (w, h) = image.dims();
    let rows: Vec<Option<usize>> = (0..h).map(|y| (0..w).position(|x| mask.get(x, y)).map(|_| y)).collect();
    let nearest_row = |y: usize| {
        (0..h)
            .filter_map(|r| rows[r])
            .min_by_key(|&r| (r.abs_diff(y), r))
    };
    let mut out = image.clone();
    for y in 0..h {
        let Some(src_y) = nearest_row(y) else {
            return out;
        };
        for x in 0..w {
            if mask.get(x, y) {
                continue;
            }
            let src_x = (0..w)
                .filter(|&c| mask.get(c, src_y))
                .min_by_key(|&c| (c.abs_diff(x), c))
                .expect("row has a valid pixel");
            out.set(x, y, image.pixel(src_x, src_y));
        }
    }
    out
}

fn process_region(state: &mut StitchState, region: &PatchRegion, config: &LpamConfig, timings: &mut StageTimings) -> Result<()> {
    let rect = region.rect;
    let exec = config.exec;

    let t = Instant::now();
    let target = fill_invalid(&luminance(&state.pair.target.crop(rect)), &state.pair.target_mask.crop(rect));
    let reference = fill_invalid(&luminance(&state.pair.reference.crop(rect)), &state.pair.reference_mask.crop(rect));
    let dt = dense_descriptors_with(&target, exec)?;
    let dr = dense_descriptors_with(&reference, exec)?;
    timings.descriptors += ms(t);

    let t = Instant::now();
    let mut flow = estimate_flow(&dt, &dr, &config.flow_params())?;
    // no reference content to align to: leave the target in place
    for y in 0..rect.height() {
        for x in 0..rect.width() {
            if !state.pair.reference_mask.get(rect.x0 + x, rect.y0 + y) {
                flow.u[y * rect.width() + x] = 0.0;
                flow.v[y * rect.width() + x] = 0.0;
            }
        }
    }
    timings.flow += ms(t);

    let t = Instant::now();
    let warped = warp_patch(&state.pair, region, &flow, config.beta)?;
    timings.warp += ms(t);

    let t = Instant::now();
    let cut = local_seam(&state.pair, &state.mask, &warped, exec)?;
    timings.cut += ms(t);
    if cut.seam.is_none() {
        return Err(Error::SeamMissesPatch);
    }

    let t = Instant::now();
    merge_step(state, &warped, &cut, exec)?;
    timings.merge += ms(t);
    Ok(())
}
