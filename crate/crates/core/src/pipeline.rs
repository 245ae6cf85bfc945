//! Whole-pair stitching: baseline seam, optional repair, metrics, artifacts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{write_atomic, write_image, write_seam_visualization, AlignedPair};
use crate::lpam::{run_lpam, LpamConfig, LpamOutcome};
use crate::quality::{evaluate_seam_with, seam_metrics_with, GrayPair, QualityProfile, SeamMetrics};
use crate::seam::{composite, estimate_seam_with, EuclideanSmoothness, LabelMask, Mosaic, Seam, SeamEstimate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub lpam: LpamConfig,
    pub lpam_enabled: bool,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            lpam: LpamConfig::default(),
            lpam_enabled: true,
        }
    }
}

/// Seam metrics before and, when the repair ran, after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub pre: SeamMetrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub post: Option<SeamMetrics>,
}

#[derive(Clone, Debug)]
pub struct StitchOutput {
    pub baseline: SeamEstimate,
    pub baseline_profile: QualityProfile,
    pub lpam: Option<LpamOutcome>,
    pub metrics: MetricsRecord,
}

impl StitchOutput {
    /// Images the final labels refer to: the repaired canvases when the
    /// repair ran, otherwise the inputs.
    pub fn final_pair<'a>(&'a self, input: &'a AlignedPair) -> &'a AlignedPair {
        self.lpam.as_ref().map_or(input, |o| &o.pair)
    }

    pub fn final_mask(&self) -> &LabelMask {
        self.lpam.as_ref().map_or(&self.baseline.mask, |o| &o.mask)
    }

    pub fn final_seam(&self) -> &Seam {
        self.lpam.as_ref().map_or(&self.baseline.seam, |o| &o.seam)
    }

    pub fn final_profile(&self) -> &QualityProfile {
        self.lpam.as_ref().map_or(&self.baseline_profile, |o| &o.profile)
    }

    pub fn mosaic(&self, input: &AlignedPair) -> Mosaic {
        composite(self.final_pair(input), self.final_mask())
    }

    pub fn baseline_mosaic(&self, input: &AlignedPair) -> Mosaic {
        composite(input, &self.baseline.mask)
    }
}

pub fn stitch(pair: &AlignedPair, config: &StitchConfig) -> Result<StitchOutput> {
    let cfg = &config.lpam;
    cfg.validate()?;
    let baseline = estimate_seam_with(pair, &EuclideanSmoothness, cfg.exec)?;
    let gray = GrayPair::new(pair);
    let baseline_profile = evaluate_seam_with(&gray, &baseline.seam, cfg.window, cfg.exec)?;
    let pre = seam_metrics_with(&gray, &baseline.seam, cfg.window, cfg.exec)?;
    let (lpam, post) = if config.lpam_enabled {
        let outcome = run_lpam(pair, &baseline.mask, &baseline.seam, cfg)?;
        let post = seam_metrics_with(&GrayPair::new(&outcome.pair), &outcome.seam, cfg.window, cfg.exec)?;
        (Some(outcome), Some(post))
    } else {
        (None, None)
    };
    Ok(StitchOutput {
        baseline,
        baseline_profile,
        lpam,
        metrics: MetricsRecord { pre, post },
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report types serialize");
    bytes.push(b'\n');
    bytes
}

/// Output locations; `None` skips the artifact.
#[derive(Clone, Debug, Default)]
pub struct ArtifactPaths {
    pub mosaic: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub seam_vis: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Writes every requested artifact atomically. The report is only written
/// when the repair ran.
pub fn write_artifacts(output: &StitchOutput, input: &AlignedPair, paths: &ArtifactPaths) -> Result<()> {
    let pair = output.final_pair(input);
    if let Some(p) = &paths.mosaic {
        write_image(&output.mosaic(input).image, p)?;
    }
    if let Some(p) = &paths.labels {
        output.final_mask().write_png(pair, p)?;
    }
    if let Some(p) = &paths.seam_vis {
        write_seam_visualization(pair, output.final_seam(), &output.final_profile().values, p)?;
    }
    if let Some(p) = &paths.metrics {
        write_atomic(p, &to_json(&output.metrics))?;
    }
    if let (Some(p), Some(lpam)) = (&paths.report, &output.lpam) {
        write_atomic(p, &to_json(&lpam.report))?;
    }
    Ok(())
}
