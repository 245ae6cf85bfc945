//! Manifest-driven evaluation of many pairs with and without repair.
//!
//! Manifest: a JSON list of `{"name", "target", "reference"}`; relative
//! image paths resolve against the manifest's directory. Each entry gets a
//! directory `<out>/<name>/` holding `baseline.png`, `lpam.png`,
//! `labels_baseline.png`, `labels_lpam.png`, `metrics.json` and
//! `report.json`. `<out>/summary.json` holds the dataset means.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_aligned_pair, write_atomic, write_image};
use crate::lpam::LpamConfig;
use crate::parallel::map_indices;
use crate::pipeline::{stitch, to_json, StitchConfig};
use crate::quality::SeamMetrics;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub target: PathBuf,
    pub reference: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for e in &mut entries {
        e.target = base.join(&e.target);
        e.reference = base.join(&e.reference);
    }
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub name: String,
    pub ok: bool,
    pub error: Option<String>,
    pub baseline: Option<SeamMetrics>,
    pub lpam: Option<SeamMetrics>,
}

/// One row of the results table: dataset means over successful pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub rmse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub zncc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    /// Baseline row, then the +LPAM row.
    pub rows: Vec<MethodRow>,
    pub processed: usize,
    pub failed: usize,
    pub pairs: Vec<PairRecord>,
}

impl BatchSummary {
    /// Fixed-width table with one line per method.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>8} {:>8} {:>8}\n", "Method", "RMSE↓", "PSNR↑", "SSIM↑", "ZNCC↓");
        let cell = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>8} {:>8} {:>8}",
                r.method,
                cell(r.rmse, 4),
                cell(r.psnr, 2),
                cell(r.ssim, 4),
                cell(r.zncc, 4)
            );
        }
        s
    }
}

fn mean_row(method: &str, metrics: &[SeamMetrics]) -> MethodRow {
    let mean = |f: fn(&SeamMetrics) -> f64| {
        (!metrics.is_empty()).then(|| metrics.iter().map(f).sum::<f64>() / metrics.len() as f64)
    };
    MethodRow {
        method: method.to_string(),
        rmse: mean(|m| m.rmse),
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        zncc: mean(|m| m.zncc),
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\\'])
}

fn process_entry(entry: &ManifestEntry, out_dir: &Path, config: &StitchConfig) -> Result<(SeamMetrics, SeamMetrics)> {
    let pair = load_aligned_pair(&entry.target, &entry.reference)?;
    let output = stitch(&pair, config)?;
    let dir = out_dir.join(&entry.name);
    std::fs::create_dir_all(&dir).map_err(|source| Error::Write {
        path: dir.clone(),
        source,
    })?;
    let lpam = output.lpam.as_ref().expect("repair enabled for batch runs");
    write_image(&output.baseline_mosaic(&pair).image, &dir.join("baseline.png"))?;
    write_image(&output.mosaic(&pair).image, &dir.join("lpam.png"))?;
    output.baseline.mask.write_png(&pair, &dir.join("labels_baseline.png"))?;
    lpam.mask.write_png(&lpam.pair, &dir.join("labels_lpam.png"))?;
    write_atomic(&dir.join("metrics.json"), &to_json(&output.metrics))?;
    write_atomic(&dir.join("report.json"), &to_json(&lpam.report))?;
    let post = output.metrics.post.expect("repair enabled for batch runs");
    Ok((output.metrics.pre, post))
}

/// Runs every entry, isolating per-entry failures, and writes the summary.
pub fn run_batch(entries: &[ManifestEntry], out_dir: &Path, config: &LpamConfig) -> Result<BatchSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let stitch_config = StitchConfig {
        lpam: config.clone(),
        lpam_enabled: true,
    };
    let results = map_indices(config.exec, entries.len(), |i| {
        let entry = &entries[i];
        if !valid_name(&entry.name) {
            return Err(format!("invalid entry name {:?}", entry.name));
        }
        if entries[..i].iter().any(|e| e.name == entry.name) {
            return Err(format!("duplicate entry name {:?}", entry.name));
        }
        process_entry(entry, out_dir, &stitch_config).map_err(|e| e.to_string())
    });

    let mut pairs = Vec::with_capacity(entries.len());
    let (mut base, mut repaired) = (Vec::new(), Vec::new());
    for (entry, result) in entries.iter().zip(results) {
        pairs.push(match result {
            Ok((pre, post)) => {
                base.push(pre);
                repaired.push(post);
                PairRecord {
                    name: entry.name.clone(),
                    ok: true,
                    error: None,
                    baseline: Some(pre),
                    lpam: Some(post),
                }
            }
            Err(e) => PairRecord {
                name: entry.name.clone(),
                ok: false,
                error: Some(e),
                baseline: None,
                lpam: None,
            },
        });
    }
    let summary = BatchSummary {
        rows: vec![mean_row("Baseline", &base), mean_row("+LPAM", &repaired)],
        processed: base.len(),
        failed: entries.len() - base.len(),
        pairs,
    };
    write_atomic(&out_dir.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}
