//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seamweld::flow::{dense_descriptors, estimate_flow, FlowParams};
use seamweld::imaging::{write_aligned_pair, write_image, AlignedPair, Image, Rect, ValidityMask};
use seamweld::lpam::{local_seam, region_boundary, sigmoid_weight, warp_patch, LpamConfig, WarpedPatch};
use seamweld::mincut::{energy_of, solve_mincut, GridGraph};
use seamweld::pipeline::{stitch, to_json, StitchConfig, StitchOutput};
use seamweld::quality::{
    otsu_bin_edge, otsu_threshold, psnr_patch, rmse_patch, ssim_patch, zncc_patch, Axis, PatchRegion, RampOrigin,
    PSNR_CAP,
};
use seamweld::seam::estimate_seam;
use seamweld::synthetic::{shifted_block_pair, smooth_noise, ShiftedBlockSpec};
use seamweld::{run_batch, Execution, FlowField, ManifestEntry};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn mincut_exactness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let w = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=4);
        let mut g = GridGraph::new(w, h);
        for y in 0..h {
            for x in 0..w {
                g.set_active(x, y, rng.gen_bool(0.85));
                g.set_data(x, y, rng.gen_range(0..=9) as f64, rng.gen_range(0..=9) as f64);
                if x + 1 < w {
                    g.set_right(x, y, rng.gen_range(0..=9) as f64);
                }
                if y + 1 < h {
                    g.set_down(x, y, rng.gen_range(0..=9) as f64);
                }
            }
        }
        if g.active_count() == 0 {
            g.set_active(0, 0, true);
        }
        let active: Vec<usize> = (0..w * h).filter(|&i| g.is_active(i % w, i / w)).collect();
        let mut best = f64::INFINITY;
        for bits in 0u32..1 << active.len() {
            let mut labels = vec![0u8; w * h];
            for (j, &i) in active.iter().enumerate() {
                labels[i] = ((bits >> j) & 1) as u8;
            }
            best = best.min(energy_of(&g, &labels));
        }
        let cut = solve_mincut(&g).map_err(|e| format!("case {case}: {e}"))?;
        ensure(cut.cut_cost == best, || format!("case {case}: cost {} vs optimum {best}", cut.cut_cost))?;
        let e = energy_of(&g, &cut.labels);
        ensure((e - cut.cut_cost).abs() <= 1e-9 * cut.cut_cost.abs().max(1.0), || {
            format!("case {case}: labeling energy {e} vs cut cost {}", cut.cut_cost)
        })?;
    }
    let el = start.elapsed();
    ensure(el < Duration::from_secs(5), || format!("took {}", secs(el)))?;
    Ok(format!("200 graphs optimal, {}", secs(el)))
}

fn metric_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p: Vec<f64> = (0..21 * 21).map(|_| rng.gen()).collect();
    let ssim = ssim_patch(&p, &p).map_err(|e| e.to_string())?;
    ensure(ssim == 1.0, || format!("identical SSIM {ssim}"))?;
    ensure(rmse_patch(&p, &p) == 0.0, || "identical RMSE".into())?;
    ensure(psnr_patch(&p, &p) == PSNR_CAP, || "identical PSNR".into())?;
    let zerr = 1.0 - zncc_patch(&p, &p);
    ensure(zerr.abs() < 1e-12, || format!("identical ZNCC error {zerr}"))?;

    let zeros = vec![0.0; 21 * 21];
    let ones = vec![1.0; 21 * 21];
    let ssim = ssim_patch(&zeros, &ones).map_err(|e| e.to_string())?;
    ensure((ssim - 1e-4).abs() <= 1e-6, || format!("0 vs 1 SSIM {ssim}"))?;
    ensure(rmse_patch(&zeros, &ones) == 1.0, || "0 vs 1 RMSE".into())?;
    ensure(psnr_patch(&zeros, &ones) == 0.0, || "0 vs 1 PSNR".into())?;
    Ok(format!("0 vs 1 SSIM = {ssim:.3e}"))
}

fn otsu_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let n = rng.gen_range(2..400);
        // coarse quantization in some lists forces tied variances
        let levels: u32 = if case % 3 == 0 { rng.gen_range(2..6) } else { 1 << 20 };
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = if case % 2 == 0 { rng.gen() } else { rng.gen::<f64>().powi(3) };
                (v * levels as f64).floor() / levels as f64
            })
            .collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let k = otsu_bin_edge(&values);
        if hi <= lo {
            ensure(k.is_none(), || format!("case {case}: constant list got a threshold"))?;
            continue;
        }
        let k = k.ok_or_else(|| format!("case {case}: no threshold"))?;
        let mut hist = [0u128; 256];
        for &v in &values {
            let b = ((v - lo) / (hi - lo) * 256.0).floor().clamp(0.0, 255.0) as usize;
            hist[b] += 1;
        }
        // between-class variance times n^2 as an exact fraction
        let score = |edge: usize| -> Option<(u128, u128)> {
            let (mut n0, mut s0, mut n1, mut s1) = (0u128, 0u128, 0u128, 0u128);
            for (i, &c) in hist.iter().enumerate() {
                if i < edge {
                    n0 += c;
                    s0 += i as u128 * c;
                } else {
                    n1 += c;
                    s1 += i as u128 * c;
                }
            }
            if n0 == 0 || n1 == 0 {
                return None;
            }
            let d = (s0 * n1).abs_diff(s1 * n0);
            Some((d * d, n0 * n1))
        };
        let (num, den) = score(k).ok_or_else(|| format!("case {case}: edge {k} leaves a class empty"))?;
        for edge in 1..256 {
            if let Some((a, b)) = score(edge) {
                ensure(a * den <= num * b, || format!("case {case}: edge {edge} beats returned edge {k}"))?;
            }
        }
        let tau = otsu_threshold(&values).unwrap();
        let expected = lo + (hi - lo) * k as f64 / 256.0;
        ensure(tau == expected, || format!("case {case}: tau {tau} vs edge value {expected}"))?;
    }
    Ok("100 lists attain the maximum".into())
}

fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Image {
    Image::from_fn(w, h, 1, |x, y| [f(x, y), 0.0, 0.0])
}

fn flow_recovery() -> Check {
    let (w, h, pad) = (64, 64, 10);
    let tex = smooth_noise(w + 2 * pad, h + 2 * pad, 6, 4);
    let at = |x: isize, y: isize| tex[(y + pad as isize) as usize * (w + 2 * pad) + (x + pad as isize) as usize];
    let target = gray(w, h, |x, y| at(x as isize, y as isize));
    let dt = dense_descriptors(&target).map_err(|e| e.to_string())?;
    let mut worst = (f64::INFINITY, 0isize, 0isize);
    let mut slowest = Duration::ZERO;
    for dy in -4isize..=4 {
        for dx in -4isize..=4 {
            let start = Instant::now();
            // sampling the target at p + (dx, dy) matches the reference at p
            let reference = gray(w, h, |x, y| at(x as isize + dx, y as isize + dy));
            let dr = dense_descriptors(&reference).map_err(|e| e.to_string())?;
            let f = estimate_flow(&dt, &dr, &FlowParams::default()).map_err(|e| e.to_string())?;
            let el = start.elapsed();
            slowest = slowest.max(el);
            ensure(el < Duration::from_secs(10), || format!("({dx}, {dy}) took {}", secs(el)))?;
            let (mut good, mut total) = (0usize, 0usize);
            for y in 8..h - 8 {
                for x in 8..w - 8 {
                    total += 1;
                    good += usize::from(f.at(x, y) == (dx as f64, dy as f64));
                }
            }
            let share = good as f64 / total as f64;
            if share < worst.0 {
                worst = (share, dx, dy);
            }
            ensure(share >= 0.9, || format!("({dx}, {dy}): {good}/{total} exact"))?;
        }
    }
    Ok(format!(
        "81 shifts, worst {:.3} at ({}, {}), slowest {}",
        worst.0,
        worst.1,
        worst.2,
        secs(slowest)
    ))
}

fn sigmoid_contract() -> Check {
    for beta in [0.5, 1.0, 4.0, 8.0, 20.0] {
        ensure((sigmoid_weight(0.5, beta) - 0.5).abs() <= 1e-12, || format!("f(0.5) at beta {beta}"))?;
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let s = sigmoid_weight(t, beta) + sigmoid_weight(1.0 - t, beta);
            ensure((s - 1.0).abs() <= 1e-12, || format!("f({t}) + f(1 - t) = {s} at beta {beta}"))?;
        }
    }
    // the gray value of each warped sample encodes the x it was taken from
    let w = 300;
    let img = Image::from_fn(w, 12, 3, |x, _| {
        let v = x as f64 / (w - 1) as f64;
        [v, v, v]
    });
    let pair = AlignedPair::full(img.clone(), img).map_err(|e| e.to_string())?;
    let rect = Rect::new(100, 0, 161, 12);
    let f0 = 1.0 / (1.0 + 4f64.exp());
    for m in [1.0, 2.5, 5.0, 7.0] {
        for origin in [RampOrigin::Low, RampOrigin::High] {
            let region = PatchRegion {
                rect,
                axis: Axis::Horizontal,
                origin,
                components: vec![0],
            };
            let flow = FlowField::uniform(rect.width(), rect.height(), m, 0.0);
            let warped = warp_patch(&pair, &region, &flow, 8.0).map_err(|e| e.to_string())?;
            let border = match origin {
                RampOrigin::Low => 0,
                RampOrigin::High => rect.width() - 1,
            };
            let moved = warped.target.value(border, 6) * (w - 1) as f64 - (rect.x0 + border) as f64;
            ensure((moved - m * f0).abs() <= 1e-9, || format!("m {m}: border moved {moved}, want {}", m * f0))?;
        }
    }
    Ok(format!("border displacement m * {f0:.6}"))
}

fn random_pair(rng: &mut ChaCha8Rng) -> AlignedPair {
    let w = rng.gen_range(12..28);
    let h = rng.gen_range(10..24);
    let t_end = rng.gen_range(w / 2 + 2..w);
    let r_start = rng.gen_range(1..t_end - 2);
    let seed = rng.gen();
    let t = smooth_noise(w, h, 3, seed);
    let r = smooth_noise(w, h, 3, seed + 1);
    let blend = rng.gen_range(0.0..1.0);
    let target = gray(w, h, |x, y| t[y * w + x]);
    let reference = gray(w, h, |x, y| blend * t[y * w + x] + (1.0 - blend) * r[y * w + x]);
    let to_rgb = |g: Image| Image::from_fn(w, h, 3, |x, y| [g.value(x, y); 3]);
    AlignedPair::new(
        to_rgb(target),
        ValidityMask::from_fn(w, h, |x, _| x < t_end),
        to_rgb(reference),
        ValidityMask::from_fn(w, h, |x, _| x >= r_start),
    )
    .expect("consistent dimensions")
}

fn boundary_preservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut checked, mut split) = (0usize, 0usize);
    for case in 0..50 {
        let pair = random_pair(&mut rng);
        let est = estimate_seam(&pair).map_err(|e| format!("case {case}: {e}"))?;
        let (w, h) = pair.dims();
        let x0 = rng.gen_range(0..w - 4);
        let y0 = rng.gen_range(0..h - 4);
        let rect = Rect::new(x0, y0, rng.gen_range(x0 + 4..=w), rng.gen_range(y0 + 4..=h));
        let mut target = pair.target.crop(rect);
        for y in 0..rect.height() {
            for x in 0..rect.width() {
                let v = (target.value(x, y) + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0);
                target.set(x, y, &[v, v, v]);
            }
        }
        let warped = WarpedPatch {
            rect,
            target,
            reference: pair.reference.crop(rect),
            flagged: 0,
            total: rect.area(),
        };
        let cut = local_seam(&pair, &est.mask, &warped, Execution::Sequential).map_err(|e| format!("case {case}: {e}"))?;
        split += usize::from(cut.seam.is_some());
        for (x, y) in region_boundary(&pair, rect) {
            checked += 1;
            let want = est.mask.get(x, y);
            let got = cut.mask.get(x - rect.x0, y - rect.y0);
            ensure(want == got, || format!("case {case}: ({x}, {y}) pinned {want:?}, got {got:?}"))?;
        }
    }
    Ok(format!("50 instances ({split} crossed by the seam), {checked} pinned pixels, 0 violations"))
}

fn sequential_config() -> StitchConfig {
    let mut cfg = StitchConfig::default();
    cfg.lpam.exec = Execution::Sequential;
    cfg.lpam.flow.exec = Execution::Sequential;
    cfg
}

struct FixtureRun {
    pair: AlignedPair,
    with: StitchOutput,
    without: StitchOutput,
    elapsed: Duration,
}

fn fixture_run() -> Result<FixtureRun, String> {
    let pair = shifted_block_pair(&ShiftedBlockSpec::default(), 0);
    let start = Instant::now();
    let with = stitch(&pair, &sequential_config()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let without = stitch(
        &pair,
        &StitchConfig {
            lpam_enabled: false,
            ..sequential_config()
        },
    )
    .map_err(|e| e.to_string())?;
    Ok(FixtureRun {
        pair,
        with,
        without,
        elapsed,
    })
}

fn synthetic_repair(run: &FixtureRun) -> Check {
    let lpam = run.with.lpam.as_ref().ok_or("repair did not run")?;
    let comps = &lpam.report.components;
    ensure(!comps.is_empty(), || "no misaligned component flagged".into())?;
    let mut worst = f64::INFINITY;
    for c in comps {
        ensure(!c.skipped, || format!("component {:?} skipped: {:?}", c.range, c.reason))?;
        let ratio = (c.pre_mean_q - c.post_mean_q) / c.pre_mean_q;
        worst = worst.min(ratio);
    }
    ensure(worst >= 0.5, || format!("mean Q reduced by only {:.3}", worst))?;
    let pre = run.without.metrics.pre.rmse;
    let post = run.with.metrics.post.ok_or("no post metrics")?.rmse;
    ensure(post < pre, || format!("RMSE {pre:.5} -> {post:.5}"))?;
    ensure(run.elapsed < Duration::from_secs(30), || format!("took {}", secs(run.elapsed)))?;
    Ok(format!(
        "{} component(s), Q reduced by {:.3}, RMSE {pre:.5} -> {post:.5}, {}",
        comps.len(),
        worst,
        secs(run.elapsed)
    ))
}

fn locality(run: &FixtureRun) -> Check {
    let lpam = run.with.lpam.as_ref().ok_or("repair did not run")?;
    let rects: Vec<Rect> = lpam.regions.iter().map(|r| r.rect).collect();
    let a = run.with.mosaic(&run.pair);
    let b = run.without.mosaic(&run.pair);
    let (ma, mb) = (run.with.final_mask(), run.without.final_mask());
    let (w, h) = run.pair.dims();
    let mut compared = 0usize;
    for y in 0..h {
        for x in 0..w {
            if rects.iter().any(|r| r.contains(x, y)) {
                continue;
            }
            ensure(ma.get(x, y) == mb.get(x, y), || format!("labels differ at ({x}, {y})"))?;
            let (pa, pb) = (a.image.pixel(x, y), b.image.pixel(x, y));
            ensure(pa.iter().zip(pb).all(|(u, v)| u.to_bits() == v.to_bits()), || {
                format!("mosaic differs at ({x}, {y})")
            })?;
            compared += 1;
        }
    }
    Ok(format!("{compared} pixels outside {} region(s) identical", rects.len()))
}

fn artifacts(run: &StitchOutput, pair: &AlignedPair, dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let mosaic = dir.join("mosaic.png");
    let labels = dir.join("labels.png");
    write_image(&run.mosaic(pair).image, &mosaic).map_err(|e| e.to_string())?;
    run.final_mask().write_png(run.final_pair(pair), &labels).map_err(|e| e.to_string())?;
    let mut report = run.lpam.as_ref().ok_or("repair did not run")?.report.clone();
    report.elapsed_ms = Default::default();
    Ok(vec![
        std::fs::read(&mosaic).map_err(|e| e.to_string())?,
        std::fs::read(&labels).map_err(|e| e.to_string())?,
        to_json(&run.metrics),
        to_json(&report),
    ])
}

fn determinism(first: &FixtureRun, tmp: &Path) -> Check {
    let second = fixture_run()?;
    let a = artifacts(&first.with, &first.pair, &tmp.join("run1"))?;
    let b = artifacts(&second.with, &second.pair, &tmp.join("run2"))?;
    let names = ["mosaic", "labels", "metrics", "report"];
    for ((x, y), name) in a.iter().zip(&b).zip(names) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok("mosaic, labels, metrics and report (timings zeroed) byte-identical".into())
}

fn batch_table(tmp: &Path) -> Check {
    let data = tmp.join("pairs");
    std::fs::create_dir_all(&data).map_err(|e| e.to_string())?;
    let mut entries = Vec::new();
    for seed in 0..10u64 {
        let pair = shifted_block_pair(&ShiftedBlockSpec::default(), seed);
        let (t, r) = (data.join(format!("t{seed}.png")), data.join(format!("r{seed}.png")));
        write_aligned_pair(&pair, &t, &r).map_err(|e| e.to_string())?;
        entries.push(ManifestEntry {
            name: format!("seed{seed}"),
            target: t,
            reference: r,
        });
    }
    let summary = run_batch(&entries, &tmp.join("batch"), &LpamConfig::default()).map_err(|e| e.to_string())?;
    ensure(summary.failed == 0, || format!("{} pairs failed", summary.failed))?;
    for p in &summary.pairs {
        let (pre, post) = (p.baseline.unwrap(), p.lpam.unwrap());
        ensure(post.rmse <= pre.rmse, || format!("{}: RMSE {} -> {}", p.name, pre.rmse, post.rmse))?;
        ensure(post.zncc <= pre.zncc, || format!("{}: ZNCC {} -> {}", p.name, pre.zncc, post.zncc))?;
        ensure(post.ssim >= pre.ssim, || format!("{}: SSIM {} -> {}", p.name, pre.ssim, post.ssim))?;
    }
    let methods: Vec<&str> = summary.rows.iter().map(|r| r.method.as_str()).collect();
    ensure(methods == ["Baseline", "+LPAM"], || format!("rows {methods:?}"))?;
    let table = summary.table();
    let header: Vec<&str> = table.lines().next().unwrap_or("").split_whitespace().collect();
    ensure(header == ["Method", "RMSE↓", "PSNR↑", "SSIM↑", "ZNCC↓"], || format!("header {header:?}"))?;
    let (b, l) = (&summary.rows[0], &summary.rows[1]);
    Ok(format!(
        "10/10 pairs improved; mean RMSE {:.4} -> {:.4}, SSIM {:.4} -> {:.4}, ZNCC {:.4} -> {:.4}",
        b.rmse.unwrap(),
        l.rmse.unwrap(),
        b.ssim.unwrap(),
        l.ssim.unwrap(),
        b.zncc.unwrap(),
        l.zncc.unwrap()
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, &str, Check)> = vec![
        ("C1", "min-cut exactness", mincut_exactness()),
        ("C2", "metric identities", metric_identities()),
        ("C3", "Otsu oracle", otsu_oracle()),
        ("C4", "flow recovery", flow_recovery()),
        ("C5", "sigmoid and warp contract", sigmoid_contract()),
        ("C6", "boundary-label preservation", boundary_preservation()),
    ];
    match fixture_run() {
        Ok(run) => {
            results.push(("C7", "end-to-end synthetic repair", synthetic_repair(&run)));
            results.push(("C8", "locality", locality(&run)));
            results.push(("C9", "results table on the fixture family", batch_table(tmp.path())));
            results.push(("C10", "determinism", determinism(&run, tmp.path())));
        }
        Err(e) => {
            for (id, name) in [
                ("C7", "end-to-end synthetic repair"),
                ("C8", "locality"),
                ("C10", "determinism"),
            ] {
                results.push((id, name, Err(format!("fixture run failed: {e}"))));
            }
            results.push(("C9", "results table on the fixture family", batch_table(tmp.path())));
        }
    }

    let mut failed = 0;
    for (id, name, result) in &results {
        match result {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id} {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
