//! Saliency-guided attention steering on the current decoding row.
//!
//! For each fusion layer the hook multiplies the attention that the most
//! visually engaged heads pay to visual token `j` by `exp(alpha * S_j)`,
//! measures how much that raised total visual attention (`r`), scales the
//! query attention of the most query-engaged heads by `beta * r`, and
//! renormalizes the touched rows. The multiplicative form followed by
//! renormalization is the same as adding `alpha * S_j` to the pre-softmax
//! logits.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GiftError, Result};
use crate::model::{AttentionTensor, HeadRows, SegmentLayout, SteeringHook};
use crate::saliency::{head_count, SaliencyMap};
use crate::tensors::top_k_indices;
use crate::tokenizer::InfoRichMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    /// No steering.
    Off,
    /// Visual amplification plus balanced query scaling.
    Gift,
    /// Visual amplification only.
    IncV,
    /// Visual amplification rescaled so each head keeps its visual mass.
    CalV,
    /// Full pipeline, driven by a static (average-attention) map.
    StaticMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    /// Rank heads by the current row's modality mass at every step.
    PerStep,
    /// Use head sets frozen by a fusion diagnostic.
    Calibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioKind {
    /// Amplified visual mass over original visual mass.
    Mass,
    /// Sum of elementwise ratios, 0/0 counted as 1.
    LiteralSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub alpha: f64,
    pub beta: f64,
    pub saliency_layer: usize,
    pub fusion_layers: Vec<usize>,
    pub head_fraction: f64,
    pub clip_k: f64,
    pub mode: SteeringMode,
    pub head_selection: HeadSelection,
    pub ratio_kind: RatioKind,
    pub literal_predecessor: bool,
}

/// Published layer choices for full-size models, kept for reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPreset {
    pub name: &'static str,
    pub alpha: f64,
    pub saliency_layer: usize,
    pub fusion_layers: RangeInclusive<usize>,
}

pub const PRESETS: [ModelPreset; 3] = [
    ModelPreset { name: "llava-1.5-7b", alpha: 5.0, saliency_layer: 11, fusion_layers: 12..=22 },
    ModelPreset { name: "llava-1.5-13b", alpha: 5.0, saliency_layer: 10, fusion_layers: 14..=20 },
    ModelPreset { name: "qwen2-vl-7b", alpha: 4.0, saliency_layer: 14, fusion_layers: 5..=18 },
];

impl Default for SteeringConfig {
    /// Tuned for the default toy model: `diagnose layers` on 50 default
    /// fixtures (seed 0) picks saliency layer 2. Every layer clears the 0.2
    /// visual-proportion threshold there, so the fusion layers are the part
    /// of that band after the saliency layer.
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 1.0,
            saliency_layer: 2,
            fusion_layers: (3..=7).collect(),
            head_fraction: 0.5,
            clip_k: 3.0,
            mode: SteeringMode::Gift,
            head_selection: HeadSelection::PerStep,
            ratio_kind: RatioKind::Mass,
            literal_predecessor: false,
        }
    }
}

impl SteeringConfig {
    pub fn preset(name: &str) -> Option<Self> {
        PRESETS.iter().find(|p| p.name == name).map(|p| Self {
            alpha: p.alpha,
            saliency_layer: p.saliency_layer,
            fusion_layers: p.fusion_layers.clone().collect(),
            ..Self::default()
        })
    }

    pub fn validate(&self, model_layers: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(GiftError::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(GiftError::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.head_fraction > 0.0 && self.head_fraction <= 1.0) {
            return Err(GiftError::Config(format!("head_fraction must lie in (0, 1], got {}", self.head_fraction)));
        }
        if !(self.clip_k > 0.0 && self.clip_k.is_finite()) {
            return Err(GiftError::Config(format!("clip_k must be positive, got {}", self.clip_k)));
        }
        if self.saliency_layer >= model_layers {
            return Err(GiftError::LayerOutOfRange { layer: self.saliency_layer, available: model_layers });
        }
        if let Some(&l) = self.fusion_layers.iter().find(|&&l| l >= model_layers) {
            return Err(GiftError::LayerOutOfRange { layer: l, available: model_layers });
        }
        Ok(())
    }
}

/// Parse `a..b` (inclusive) or a comma list such as `2,3,5`.
pub fn parse_layer_set(text: &str) -> Result<Vec<usize>> {
    let bad = || GiftError::Config(format!("cannot parse layer set {text:?}; use a..b or a,b,c"));
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let set: BTreeSet<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    Ok(set.into_iter().collect())
}

/// Per-layer fusion proportions and the head sets behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFusion {
    pub layer: usize,
    pub r_v: f64,
    pub r_t: f64,
    pub heads_ov: Vec<usize>,
    pub heads_ot: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionDiagnostic {
    pub layers: Vec<LayerFusion>,
}

impl FusionDiagnostic {
    pub fn r_v(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.r_v).collect()
    }

    pub fn r_t(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.r_t).collect()
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerFusion> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// Pool the info-rich output rows of every example and, per layer, keep the
/// heads with the largest mean visual (resp. query) mass.
///
/// Each mask flags the generated tokens of its capture; callers cut the
/// output at the first sentence terminator beforehand.
pub fn fusion_diagnostic(batch: &[(&AttentionTensor, &InfoRichMask)], head_fraction: f64) -> Result<FusionDiagnostic> {
    let first = batch.first().ok_or(GiftError::EmptyInput("fusion batch"))?;
    let (layers, heads) = (first.0.layers(), first.0.heads());
    if batch.iter().any(|(a, _)| a.layers() != layers || a.heads() != heads) {
        return Err(GiftError::Shape("fusion captures differ in shape".into()));
    }
    for (attn, mask) in batch {
        if mask.len() != attn.layout().generated.len {
            return Err(GiftError::Shape(format!(
                "output mask has {} flags for {} generated tokens",
                mask.len(),
                attn.layout().generated.len
            )));
        }
    }
    let rows: usize = batch.iter().map(|(_, m)| m.count()).sum();
    if rows == 0 {
        return Err(GiftError::NoInfoRichTokens);
    }
    let k = head_count(heads, head_fraction)?;

    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut vis = vec![0.0f64; heads];
        let mut txt = vec![0.0f64; heads];
        for (attn, mask) in batch {
            let layout = attn.layout();
            for (k_out, _) in mask.flags.iter().enumerate().filter(|(_, &f)| f) {
                let i = layout.generated.start + k_out;
                for h in 0..heads {
                    let row = attn.row(l, h, i);
                    vis[h] += row[layout.visual.range()].iter().map(|&a| a as f64).sum::<f64>();
                    txt[h] += row[layout.query.range()].iter().map(|&a| a as f64).sum::<f64>();
                }
            }
        }
        let heads_ov = top_k_indices(&vis, k);
        let heads_ot = top_k_indices(&txt, k);
        let denom = (k * rows) as f64;
        out.push(LayerFusion {
            layer: l,
            r_v: heads_ov.iter().map(|&h| vis[h]).sum::<f64>() / denom,
            r_t: heads_ot.iter().map(|&h| txt[h]).sum::<f64>() / denom,
            heads_ov,
            heads_ot,
        });
    }
    Ok(FusionDiagnostic { layers: out })
}

/// Contiguous band from the first to the last layer whose visual
/// proportion reaches `threshold`.
pub fn select_fusion_layers(diag: &FusionDiagnostic, threshold: f64) -> Result<Vec<usize>> {
    band_from_proportions(&diag.r_v(), threshold)
}

pub fn band_from_proportions(r_v: &[f64], threshold: f64) -> Result<Vec<usize>> {
    let first = r_v.iter().position(|&r| r >= threshold);
    let last = r_v.iter().rposition(|&r| r >= threshold);
    match (first, last) {
        (Some(a), Some(b)) => Ok((a..=b).collect()),
        _ => Err(GiftError::NoFusionBand { threshold }),
    }
}

fn check_heads(rows: &HeadRows, heads: &[usize]) -> Result<()> {
    if let Some(&h) = heads.iter().find(|&&h| h >= rows.heads()) {
        return Err(GiftError::Shape(format!("head {h} out of range for {} heads", rows.heads())));
    }
    Ok(())
}

fn check_span(rows: &HeadRows, layout: &SegmentLayout) -> Result<()> {
    if layout.query.end() > rows.len() || layout.visual.end() > rows.len() {
        return Err(GiftError::Shape(format!(
            "row of width {} does not cover the visual and query spans",
            rows.len()
        )));
    }
    Ok(())
}

/// Multiply visual attention of `heads` by `exp(alpha * S_j)`. Nothing is
/// renormalized here.
pub fn amplify_visual(
    rows: &HeadRows,
    layout: &SegmentLayout,
    map: &SaliencyMap,
    alpha: f64,
    heads: &[usize],
) -> Result<HeadRows> {
    if map.scores.len() != layout.visual.len {
        return Err(GiftError::Shape(format!(
            "saliency map has {} scores for {} visual tokens",
            map.scores.len(),
            layout.visual.len
        )));
    }
    check_heads(rows, heads)?;
    check_span(rows, layout)?;
    let gains: Vec<f64> = map.scores.iter().map(|&s| (alpha * s as f64).exp()).collect();
    let mut out = rows.clone();
    for &h in heads {
        let row = out.row_mut(h);
        for (a, g) in row[layout.visual.range()].iter_mut().zip(&gains) {
            *a = (*a as f64 * g) as f32;
        }
    }
    Ok(out)
}

/// Relative increase of visual attention over `heads`.
pub fn compute_ratio(
    original: &HeadRows,
    amplified: &HeadRows,
    layout: &SegmentLayout,
    heads: &[usize],
    kind: RatioKind,
) -> Result<f64> {
    if original.heads() != amplified.heads() || original.len() != amplified.len() {
        return Err(GiftError::Shape("ratio inputs differ in shape".into()));
    }
    check_heads(original, heads)?;
    check_span(original, layout)?;
    let vis = layout.visual.range();
    match kind {
        RatioKind::Mass => {
            let before: f64 = heads.iter().map(|&h| original.mass(h, vis.clone())).sum();
            let after: f64 = heads.iter().map(|&h| amplified.mass(h, vis.clone())).sum();
            if before <= 0.0 {
                return Err(GiftError::DegenerateSaliency("zero original visual mass"));
            }
            Ok(after / before)
        }
        RatioKind::LiteralSum => {
            let mut r = 0.0;
            for &h in heads {
                for (&a, &b) in original.row(h)[vis.clone()].iter().zip(&amplified.row(h)[vis.clone()]) {
                    r += if a == 0.0 && b == 0.0 { 1.0 } else { b as f64 / a as f64 };
                }
            }
            Ok(r)
        }
    }
}

/// Multiply query attention of `heads` by `beta * r`.
pub fn scale_query(rows: &HeadRows, layout: &SegmentLayout, r: f64, beta: f64, heads: &[usize]) -> Result<HeadRows> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(GiftError::InvalidInput(format!("ratio must be positive, got {r}")));
    }
    check_heads(rows, heads)?;
    check_span(rows, layout)?;
    let factor = beta * r;
    let mut out = rows.clone();
    for &h in heads {
        for a in out.row_mut(h)[layout.query.range()].iter_mut() {
            *a = (*a as f64 * factor) as f32;
        }
    }
    Ok(out)
}

/// Scale a non-negative row to sum to one.
pub fn renormalize(row: &[f32]) -> Result<Vec<f32>> {
    if row.iter().any(|&a| !a.is_finite() || a < 0.0) {
        return Err(GiftError::InvalidInput("renormalize needs finite non-negative weights".into()));
    }
    let sum: f64 = row.iter().map(|&a| a as f64).sum();
    if sum <= 0.0 {
        return Err(GiftError::EmptyAttentionRow);
    }
    Ok(row.iter().map(|&a| (a as f64 / sum) as f32).collect())
}

fn renormalize_heads(rows: &mut HeadRows, heads: impl IntoIterator<Item = usize>) -> Result<()> {
    for h in heads {
        let normed = renormalize(rows.row(h))?;
        rows.row_mut(h).copy_from_slice(&normed);
    }
    Ok(())
}

/// Stateless steering policy: config, map and optional frozen head sets.
#[derive(Debug, Clone)]
pub struct Steerer {
    cfg: SteeringConfig,
    map: SaliencyMap,
    calibrated: Option<FusionDiagnostic>,
}

impl Steerer {
    pub fn new(cfg: SteeringConfig, map: SaliencyMap, calibration: Option<&FusionDiagnostic>) -> Result<Self> {
        let calibrated = match cfg.head_selection {
            HeadSelection::PerStep => None,
            HeadSelection::Calibrated => {
                let diag = calibration.ok_or_else(|| {
                    GiftError::Config("calibrated head selection needs a fusion diagnostic".into())
                })?;
                if let Some(&l) = cfg.fusion_layers.iter().find(|&&l| diag.layer(l).is_none()) {
                    return Err(GiftError::Config(format!("fusion diagnostic lacks layer {l}")));
                }
                Some(diag.clone())
            }
        };
        Ok(Self { cfg, map, calibrated })
    }

    pub fn config(&self) -> &SteeringConfig {
        &self.cfg
    }

    pub fn map(&self) -> &SaliencyMap {
        &self.map
    }

    /// `(H_OV, H_OT)` for this layer and row.
    pub fn head_sets(&self, layer: usize, layout: &SegmentLayout, rows: &HeadRows) -> Result<(Vec<usize>, Vec<usize>)> {
        if let Some(diag) = &self.calibrated {
            let lf = diag
                .layer(layer)
                .ok_or_else(|| GiftError::Config(format!("fusion diagnostic lacks layer {layer}")))?;
            return Ok((lf.heads_ov.clone(), lf.heads_ot.clone()));
        }
        check_span(rows, layout)?;
        let k = head_count(rows.heads(), self.cfg.head_fraction)?;
        let vis: Vec<f64> = (0..rows.heads()).map(|h| rows.mass(h, layout.visual.range())).collect();
        let txt: Vec<f64> = (0..rows.heads()).map(|h| rows.mass(h, layout.query.range())).collect();
        Ok((top_k_indices(&vis, k), top_k_indices(&txt, k)))
    }

    /// Steer one layer's current-position rows.
    pub fn apply(&self, layer: usize, layout: &SegmentLayout, rows: &HeadRows) -> Result<HeadRows> {
        if self.cfg.mode == SteeringMode::Off {
            return Ok(rows.clone());
        }
        let (ov, ot) = self.head_sets(layer, layout, rows)?;
        let amplified = amplify_visual(rows, layout, &self.map, self.cfg.alpha, &ov)?;
        match self.cfg.mode {
            SteeringMode::Off => unreachable!(),
            SteeringMode::Gift | SteeringMode::StaticMap => {
                let r = compute_ratio(rows, &amplified, layout, &ov, self.cfg.ratio_kind)?;
                let mut out = scale_query(&amplified, layout, r, self.cfg.beta, &ot)?;
                let touched: BTreeSet<usize> = ov.iter().chain(&ot).copied().collect();
                renormalize_heads(&mut out, touched)?;
                Ok(out)
            }
            SteeringMode::IncV => {
                let mut out = amplified;
                renormalize_heads(&mut out, ov.iter().copied())?;
                Ok(out)
            }
            SteeringMode::CalV => {
                let mut out = amplified;
                let vis = layout.visual.range();
                for &h in &ov {
                    let before = rows.mass(h, vis.clone());
                    let after = out.mass(h, vis.clone());
                    if before <= 0.0 {
                        out.row_mut(h).copy_from_slice(rows.row(h));
                        continue;
                    }
                    let r = after / before;
                    for a in out.row_mut(h)[vis.clone()].iter_mut() {
                        *a = (*a as f64 / r) as f32;
                    }
                }
                renormalize_heads(&mut out, ov.iter().copied())?;
                Ok(out)
            }
        }
    }
}

/// Wrap a steering policy into a model hook active on the fusion layers.
pub fn make_hook(
    cfg: &SteeringConfig,
    map: Option<&SaliencyMap>,
    calibration: Option<&FusionDiagnostic>,
) -> Result<SteeringHook> {
    if cfg.mode == SteeringMode::Off {
        return Ok(SteeringHook::disabled());
    }
    let map = map.ok_or_else(|| GiftError::Config(format!("steering mode {:?} needs a saliency map", cfg.mode)))?;
    let steerer = Arc::new(Steerer::new(cfg.clone(), map.clone(), calibration)?);
    Ok(SteeringHook::new(cfg.fusion_layers.iter().copied(), move |layer, layout, rows| {
        steerer.apply(layer, layout, rows)
    }))
}
