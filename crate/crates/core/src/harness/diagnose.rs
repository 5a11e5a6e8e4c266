use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{calibration_capture, CalibrationCapture, Prompt};
use crate::error::{GiftError, Result};
use crate::model::Model;
use crate::saliency::{choose_saliency_layer, SaliencyOptions};
use crate::steering::{fusion_diagnostic, select_fusion_layers, FusionDiagnostic};

/// Default visual-proportion threshold for the fusion band.
pub const FUSION_THRESHOLD: f64 = 0.2;

/// Output of `diagnose layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub saliency_layer: usize,
    pub mean_shift_sums: Vec<f64>,
    pub threshold: f64,
    pub fusion_band: Vec<usize>,
    pub r_v: Vec<f64>,
    pub r_t: Vec<f64>,
    pub examples: usize,
    /// Examples whose first output sentence has an info-rich token.
    pub examples_with_output: usize,
    pub diagnostic: FusionDiagnostic,
}

/// Captures in prompt order; prompts are decoded in parallel.
pub fn capture_batch(model: &Model, prompts: &[Prompt], max_new_tokens: usize) -> Result<Vec<CalibrationCapture>> {
    prompts.par_iter().map(|p| calibration_capture(model, p, max_new_tokens)).collect()
}

/// Saliency layer and fusion band from already captured examples.
pub fn diagnose_captures(caps: &[CalibrationCapture], opts: &SaliencyOptions, threshold: f64) -> Result<LayerReport> {
    if caps.is_empty() {
        return Err(GiftError::EmptyInput("calibration batch"));
    }
    let query_batch: Vec<_> = caps.iter().map(|c| (&c.attention, &c.query_mask)).collect();
    let choice = choose_saliency_layer(&query_batch, opts)?;
    let output_batch: Vec<_> = caps.iter().filter(|c| c.output_mask.any()).map(|c| (&c.attention, &c.output_mask)).collect();
    let diagnostic = fusion_diagnostic(&output_batch, opts.head_fraction)?;
    let fusion_band = select_fusion_layers(&diagnostic, threshold)?;
    Ok(LayerReport {
        saliency_layer: choice.layer,
        mean_shift_sums: choice.mean_sums,
        threshold,
        fusion_band,
        r_v: diagnostic.r_v(),
        r_t: diagnostic.r_t(),
        examples: caps.len(),
        examples_with_output: output_batch.len(),
        diagnostic,
    })
}

/// Decode each prompt greedily, capture prompt plus first sentence, and
/// run both layer diagnostics on the batch.
pub fn diagnose_layers(
    model: &Model,
    prompts: &[Prompt],
    opts: &SaliencyOptions,
    max_new_tokens: usize,
    threshold: f64,
) -> Result<LayerReport> {
    diagnose_captures(&capture_batch(model, prompts, max_new_tokens)?, opts, threshold)
}
