//! Dense descriptor flow between two patches.
//!
//! Every pixel gets a 128-d gradient-orientation descriptor (4x4 cells of
//! 4x4 pixels, 8 orientation bins). Integer flow is then found by min-sum
//! belief propagation over a truncated-L1 matching energy
//!
//! ```text
//! E(V) = sum_p min(|s0(p + V(p)) - s1(p)|_1, t)
//!      + sum_p eta (|u_p| + |v_p|)
//!      + sum_{p~q} min(alpha |u_p - u_q|, d) + min(alpha |v_p - v_q|, d)
//! ```
//!
//! with the horizontal and vertical components held in two coupled layers,
//! so every message is one-dimensional. The solve runs coarse to fine with a
//! fixed search window around the upsampled coarser flow.
//!
//! Sign convention: sampling the target at `p + V(p)` matches the reference
//! at `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Color, Image};
use crate::parallel::{for_each_row_mut, map_indices, Execution};

pub const DESCRIPTOR_LEN: usize = 128;
pub const MIN_PATCH: usize = 16;

const CELLS: usize = 4;
const CELL_SIZE: usize = 4;
const BINS: usize = 8;
/// Offset from a pixel to the first row/column of its 16x16 neighborhood.
const HALF_SPAN: usize = CELLS * CELL_SIZE / 2;
const CLIP: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DescriptorField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn descriptor(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * DESCRIPTOR_LEN;
        &self.data[i..i + DESCRIPTOR_LEN]
    }

    /// 2x2 box-averaged field, rounding the size up.
    fn downsample(&self) -> DescriptorField {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut data = vec![0.0f32; w * h * DESCRIPTOR_LEN];
        for y in 0..h {
            for x in 0..w {
                let out = &mut data[(y * w + x) * DESCRIPTOR_LEN..][..DESCRIPTOR_LEN];
                let xs = [2 * x, (2 * x + 1).min(self.width - 1)];
                let ys = [2 * y, (2 * y + 1).min(self.height - 1)];
                for &sy in &ys {
                    for &sx in &xs {
                        for (o, &v) in out.iter_mut().zip(self.descriptor(sx, sy)) {
                            *o += 0.25 * v;
                        }
                    }
                }
            }
        }
        DescriptorField {
            width: w,
            height: h,
            data,
        }
    }
}

pub fn dense_descriptors(gray: &Image) -> Result<DescriptorField> {
    dense_descriptors_with(gray, Execution::default())
}

pub fn dense_descriptors_with(gray: &Image, exec: Execution) -> Result<DescriptorField> {
    let (w, h) = gray.dims();
    if w < MIN_PATCH || h < MIN_PATCH {
        return Err(Error::PatchTooSmall {
            width: w,
            height: h,
            min: MIN_PATCH,
        });
    }
    let val = |x: isize, y: isize| {
        gray.value(
            x.clamp(0, w as isize - 1) as usize,
            y.clamp(0, h as isize - 1) as usize,
        )
    };

    // Orientation-binned gradient magnitude on a canvas padded by HALF_SPAN
    // with edge replication, stored as per-bin summed-area tables.
    let pw = w + 2 * HALF_SPAN;
    let ph = h + 2 * HALF_SPAN;
    let mut energy = vec![0.0f64; pw * ph * BINS];
    let sector = std::f64::consts::TAU / BINS as f64;
    for py in 0..ph {
        for px in 0..pw {
            let x = px as isize - HALF_SPAN as isize;
            let y = py as isize - HALF_SPAN as isize;
            let x = x.clamp(0, w as isize - 1);
            let y = y.clamp(0, h as isize - 1);
            let gx = 0.5 * (val(x + 1, y) - val(x - 1, y));
            let gy = 0.5 * (val(x, y + 1) - val(x, y - 1));
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let pos = gy.atan2(gx).rem_euclid(std::f64::consts::TAU) / sector;
            let b0 = (pos.floor() as usize) % BINS;
            let frac = pos - pos.floor();
            let cell = &mut energy[(py * pw + px) * BINS..][..BINS];
            cell[b0] += mag * (1.0 - frac);
            cell[(b0 + 1) % BINS] += mag * frac;
        }
    }
    let sw = pw + 1;
    let mut sat = vec![0.0f64; sw * (ph + 1) * BINS];
    for py in 0..ph {
        let mut row = [0.0f64; BINS];
        for px in 0..pw {
            for b in 0..BINS {
                row[b] += energy[(py * pw + px) * BINS + b];
                sat[((py + 1) * sw + px + 1) * BINS + b] = sat[(py * sw + px + 1) * BINS + b] + row[b];
            }
        }
    }
    let box_sum = |x0: usize, y0: usize, b: usize| {
        let (x1, y1) = (x0 + CELL_SIZE, y0 + CELL_SIZE);
        sat[(y1 * sw + x1) * BINS + b] - sat[(y0 * sw + x1) * BINS + b] - sat[(y1 * sw + x0) * BINS + b]
            + sat[(y0 * sw + x0) * BINS + b]
    };

    let mut data = vec![0.0f32; w * h * DESCRIPTOR_LEN];
    for_each_row_mut(exec, &mut data, w * DESCRIPTOR_LEN, |y, row| {
        let mut d = [0.0f64; DESCRIPTOR_LEN];
        for x in 0..w {
            // neighborhood spans x - 8 ..= x + 7, i.e. padded x ..= x + 15
            for cy in 0..CELLS {
                for cx in 0..CELLS {
                    for b in 0..BINS {
                        d[(cy * CELLS + cx) * BINS + b] = box_sum(x + cx * CELL_SIZE, y + cy * CELL_SIZE, b).max(0.0);
                    }
                }
            }
            normalize(&mut d);
            for (o, &v) in row[x * DESCRIPTOR_LEN..][..DESCRIPTOR_LEN].iter_mut().zip(&d) {
                *o = v as f32;
            }
        }
    });
    Ok(DescriptorField {
        width: w,
        height: h,
        data,
    })
}

/// Unit L2 norm, clip at 0.2, renormalize. Near-zero vectors become zero.
fn normalize(d: &mut [f64; DESCRIPTOR_LEN]) {
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        d.fill(0.0);
        return;
    }
    for v in d.iter_mut() {
        *v = (*v / norm).min(f64::from(CLIP));
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in d.iter_mut() {
        *v /= norm;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Pyramid depth; `None` picks the deepest pyramid whose coarsest level
    /// keeps both sides >= 16.
    pub levels: Option<usize>,
    pub search_radius: usize,
    /// Data term truncation `t`.
    pub truncation: f64,
    /// Small-displacement weight `eta`.
    pub eta: f64,
    /// Smoothness weight `alpha`.
    pub alpha: f64,
    /// Smoothness truncation `d`.
    pub smooth_truncation: f64,
    pub iterations: usize,
    pub exec: Execution,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: None,
            search_radius: 5,
            truncation: 10.0,
            eta: 0.1,
            alpha: 4.0,
            smooth_truncation: 40.0,
            iterations: 60,
            exec: Execution::default(),
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.truncation, self.eta, self.alpha, self.smooth_truncation];
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::InvalidParameter("flow weights must be >= 0".into()));
        }
        if self.search_radius < 1 {
            return Err(Error::InvalidParameter("search radius must be >= 1".into()));
        }
        if self.levels == Some(0) {
            return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
        }
        Ok(())
    }

    fn level_count(&self, width: usize, height: usize) -> usize {
        self.levels.unwrap_or_else(|| {
            let (mut w, mut h, mut n) = (width, height, 1);
            while w.div_ceil(2) >= MIN_PATCH && h.div_ceil(2) >= MIN_PATCH {
                w = w.div_ceil(2);
                h = h.div_ceil(2);
                n += 1;
            }
            n
        })
    }

    /// Largest shift magnitude reachable through the pyramid.
    pub fn max_displacement(&self, width: usize, height: usize) -> usize {
        self.search_radius * ((1 << self.level_count(width, height)) - 1)
    }
}

/// Per-pixel displacement `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0f64, |m, &c| m.max(c.abs()))
    }
}

/// Estimates integer flow so that `target(p + V) ~ reference(p)`.
pub fn estimate_flow(target: &DescriptorField, reference: &DescriptorField, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if (target.width, target.height) != (reference.width, reference.height) {
        return Err(Error::DimensionMismatch(
            target.width,
            target.height,
            reference.width,
            reference.height,
        ));
    }
    let levels = params.level_count(target.width, target.height);
    let mut pyramid = vec![(target.clone(), reference.clone())];
    for _ in 1..levels {
        let (t, r) = pyramid.last().unwrap();
        let next = (t.downsample(), r.downsample());
        pyramid.push(next);
    }

    let mut init: Option<(Vec<i32>, Vec<i32>, usize, usize)> = None;
    let mut result = (Vec::new(), Vec::new());
    for (t, r) in pyramid.iter().rev() {
        let (w, h) = (t.width, t.height);
        let (iu, iv) = match &init {
            None => (vec![0; w * h], vec![0; w * h]),
            Some((cu, cv, cw, ch)) => upsample(cu, cv, *cw, *ch, w, h),
        };
        let (u, v) = solve_level(t, r, &iu, &iv, params);
        init = Some((u.clone(), v.clone(), w, h));
        result = (u, v);
    }
    Ok(FlowField {
        width: target.width,
        height: target.height,
        u: result.0.into_iter().map(f64::from).collect(),
        v: result.1.into_iter().map(f64::from).collect(),
    })
}

fn upsample(cu: &[i32], cv: &[i32], cw: usize, ch: usize, w: usize, h: usize) -> (Vec<i32>, Vec<i32>) {
    let mut u = vec![0; w * h];
    let mut v = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = (y / 2).min(ch - 1) * cw + (x / 2).min(cw - 1);
            u[y * w + x] = 2 * cu[c];
            v[y * w + x] = 2 * cv[c];
        }
    }
    (u, v)
}

#[inline]
fn l1(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Matching cost of `V` at `(x, y)`; shifts leaving the patch cost `t`.
#[inline]
fn match_cost(t: &DescriptorField, r: &DescriptorField, x: usize, y: usize, u: i32, v: i32, trunc: f32) -> f32 {
    let tx = x as i64 + i64::from(u);
    let ty = y as i64 + i64::from(v);
    if tx < 0 || ty < 0 || tx >= t.width as i64 || ty >= t.height as i64 {
        return trunc;
    }
    l1(t.descriptor(tx as usize, ty as usize), r.descriptor(x, y)).min(trunc)
}

/// Total energy of an integer flow field.
pub fn flow_energy(target: &DescriptorField, reference: &DescriptorField, flow: &FlowField, params: &FlowParams) -> f64 {
    let (w, h) = (flow.width, flow.height);
    let trunc = params.truncation as f32;
    let mut e = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            e += f64::from(match_cost(target, reference, x, y, u.round() as i32, v.round() as i32, trunc));
            e += params.eta * (u.abs() + v.abs());
            let pair = |a: f64, b: f64| (params.alpha * (a - b).abs()).min(params.smooth_truncation);
            if x + 1 < w {
                let (u2, v2) = flow.at(x + 1, y);
                e += pair(u, u2) + pair(v, v2);
            }
            if y + 1 < h {
                let (u2, v2) = flow.at(x, y + 1);
                e += pair(u, u2) + pair(v, v2);
            }
        }
    }
    e
}

const DIRS: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

#[inline]
fn opposite(d: usize) -> usize {
    d ^ 1
}

/// Min-sum BP on one pyramid level over offsets in `[-R, R]^2` around
/// `(iu, iv)`. Pixels are updated on a checkerboard: each half-step
/// rewrites the outgoing messages of one color from the other's.
fn solve_level(t: &DescriptorField, r: &DescriptorField, iu: &[i32], iv: &[i32], params: &FlowParams) -> (Vec<i32>, Vec<i32>) {
    let (w, h) = (t.width, t.height);
    let n = w * h;
    let rad = params.search_radius as i32;
    let nl = 2 * params.search_radius + 1;
    let trunc = params.truncation as f32;
    let eta = params.eta as f32;
    let alpha = params.alpha as f32;
    let dtrunc = params.smooth_truncation as f32;
    let exec = params.exec;

    // data[p][a * nl + b] for offsets (a - R, b - R)
    let data: Vec<f32> = {
        let rows = map_indices(exec, h, |y| {
            let mut row = vec![0.0f32; w * nl * nl];
            for x in 0..w {
                let p = y * w + x;
                for a in 0..nl {
                    for b in 0..nl {
                        let u = iu[p] + a as i32 - rad;
                        let v = iv[p] + b as i32 - rad;
                        row[(x * nl + a) * nl + b] = match_cost(t, r, x, y, u, v, trunc);
                    }
                }
            }
            row
        });
        rows.concat()
    };

    // unary eta |flow| per layer
    let unary_u: Vec<f32> = (0..n * nl)
        .map(|i| eta * (iu[i / nl] + (i % nl) as i32 - rad).abs() as f32)
        .collect();
    let unary_v: Vec<f32> = (0..n * nl)
        .map(|i| eta * (iv[i / nl] + (i % nl) as i32 - rad).abs() as f32)
        .collect();

    // out[color][p][layer][dir][label]
    let stride = 2 * 4 * nl;
    let mut out = [vec![0.0f32; n * stride], vec![0.0f32; n * stride]];
    let neighbor = |x: usize, y: usize, d: usize| -> Option<usize> {
        let (dx, dy) = DIRS[d];
        let nx = x.checked_add_signed(dx)?;
        let ny = y.checked_add_signed(dy)?;
        (nx < w && ny < h).then_some(ny * w + nx)
    };

    // Sums of incoming smoothness messages plus unary, per layer.
    let gather = |src: &[f32], x: usize, y: usize, layer: usize, hsum: &mut [f32], skip: Option<usize>| {
        let p = y * w + x;
        let unary = if layer == 0 { &unary_u } else { &unary_v };
        hsum.copy_from_slice(&unary[p * nl..(p + 1) * nl]);
        for d in 0..4 {
            if Some(d) == skip {
                continue;
            }
            if let Some(q) = neighbor(x, y, d) {
                let m = &src[q * stride + (layer * 4 + opposite(d)) * nl..][..nl];
                for (hv, &mv) in hsum.iter_mut().zip(m) {
                    *hv += mv;
                }
            }
        }
    };

    for it in 0..params.iterations * 2 {
        let color = it % 2;
        let (lo, hi) = out.split_at_mut(1);
        let (dst, src): (&mut [f32], &[f32]) = if color == 0 {
            (&mut lo[0], &hi[0])
        } else {
            (&mut hi[0], &lo[0])
        };
        for_each_row_mut(exec, dst, w * stride, |y, row| {
            let mut hu = vec![0.0f32; nl];
            let mut hv = vec![0.0f32; nl];
            let mut mu = vec![0.0f32; nl];
            let mut mv = vec![0.0f32; nl];
            let mut h = vec![0.0f32; nl];
            let mut scratch = Vec::new();
            for x in 0..w {
                if (x + y) % 2 != color {
                    continue;
                }
                let p = y * w + x;
                let dp = &data[p * nl * nl..(p + 1) * nl * nl];
                gather(src, x, y, 0, &mut hu, None);
                gather(src, x, y, 1, &mut hv, None);
                // messages from the data factor into each layer
                for a in 0..nl {
                    let mut best = f32::INFINITY;
                    for b in 0..nl {
                        best = best.min(dp[a * nl + b] + hv[b]);
                    }
                    mu[a] = best;
                }
                for b in 0..nl {
                    let mut best = f32::INFINITY;
                    for a in 0..nl {
                        best = best.min(dp[a * nl + b] + hu[a]);
                    }
                    mv[b] = best;
                }
                let cell = &mut row[x * stride..(x + 1) * stride];
                for layer in 0..2 {
                    let (init, data_msg) = if layer == 0 { (iu, &mu) } else { (iv, &mv) };
                    for d in 0..4 {
                        let Some(q) = neighbor(x, y, d) else { continue };
                        gather(src, x, y, layer, &mut h, Some(d));
                        for (hh, &m) in h.iter_mut().zip(data_msg.iter()) {
                            *hh += m;
                        }
                        let msg = &mut cell[(layer * 4 + d) * nl..][..nl];
                        truncated_l1_message(&h, init[p] - init[q], alpha, dtrunc, msg, &mut scratch);
                    }
                }
            }
        });
    }

    // beliefs from the final messages of both colors
    let labels = map_indices(exec, n, |p| {
        let (x, y) = (p % w, p / w);
        let src = &out[1 - (x + y) % 2];
        let mut hu = vec![0.0f32; nl];
        let mut hv = vec![0.0f32; nl];
        gather(src, x, y, 0, &mut hu, None);
        gather(src, x, y, 1, &mut hv, None);
        let dp = &data[p * nl * nl..(p + 1) * nl * nl];
        let mut best = (f32::INFINITY, i32::MAX, 0usize, 0usize);
        for a in 0..nl {
            for b in 0..nl {
                let e = dp[a * nl + b] + hu[a] + hv[b];
                let mag = (iu[p] + a as i32 - rad).abs() + (iv[p] + b as i32 - rad).abs();
                if e < best.0 || (e == best.0 && mag < best.1) {
                    best = (e, mag, a, b);
                }
            }
        }
        (iu[p] + best.2 as i32 - rad, iv[p] + best.3 as i32 - rad)
    });
    labels.into_iter().unzip()
}

/// `msg[j] = min_i h[i] + min(alpha |i + shift - j|, d)`, normalized to a
/// zero minimum. Lower-envelope passes over the union of both label ranges.
fn truncated_l1_message(h: &[f32], shift: i32, alpha: f32, d: f32, msg: &mut [f32], scratch: &mut Vec<f32>) {
    let nl = h.len() as i32;
    let hmin = h.iter().copied().fold(f32::INFINITY, f32::min);
    let far = if alpha > 0.0 { (d / alpha).ceil() as i32 + nl } else { i32::MAX };
    if shift.abs() >= far {
        msg.fill(0.0);
        return;
    }
    let lo = shift.min(0);
    let hi = (nl - 1).max(nl - 1 + shift);
    let span = (hi - lo + 1) as usize;
    scratch.clear();
    scratch.resize(span, f32::INFINITY);
    for (i, &hv) in h.iter().enumerate() {
        scratch[(i as i32 + shift - lo) as usize] = hv;
    }
    for c in 1..span {
        scratch[c] = scratch[c].min(scratch[c - 1] + alpha);
    }
    for c in (0..span - 1).rev() {
        scratch[c] = scratch[c].min(scratch[c + 1] + alpha);
    }
    let cap = hmin + d;
    let mut mmin = f32::INFINITY;
    for (j, m) in msg.iter_mut().enumerate() {
        *m = scratch[(j as i32 - lo) as usize].min(cap);
        mmin = mmin.min(*m);
    }
    for m in msg.iter_mut() {
        *m -= mmin;
    }
}

/// Color-wheel rendering of a flow field (hue = direction, saturation =
/// magnitude relative to the largest vector).
pub fn flow_to_color(flow: &FlowField) -> Image {
    let max = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(u, v)| u.hypot(*v))
        .fold(0.0f64, f64::max);
    Image::from_fn(flow.width, flow.height, 3, |x, y| {
        let (u, v) = flow.at(x, y);
        if max == 0.0 {
            return [1.0; 3];
        }
        let hue = v.atan2(u).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * 6.0;
        hsv_to_rgb(hue, u.hypot(v) / max)
    })
}

fn hsv_to_rgb(hue6: f64, sat: f64) -> Color {
    let i = (hue6.floor() as usize) % 6;
    let f = hue6 - hue6.floor();
    let (p, q, t) = (1.0 - sat, 1.0 - sat * f, 1.0 - sat * (1.0 - f));
    match i {
        0 => [1.0, t, p],
        1 => [q, 1.0, p],
        2 => [p, 1.0, t],
        3 => [p, q, 1.0],
        4 => [t, p, 1.0],
        _ => [1.0, p, q],
    }
}
