//! Visual saliency from captured attention.
//!
//! Two maps are available. The static map averages attention to each visual
//! token over the heads that look at the image most and over every query
//! token. The shift map instead averages only the *positive* change in a
//! head's visual attention from one query token to the next, over
//! information-rich query tokens. Sink tokens that soak up a constant share
//! of attention on every row contribute no change and drop out of the shift
//! map entirely.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atn1;
use crate::error::{GiftError, Result};
use crate::model::{AttentionTensor, SegmentLayout};
use crate::tensors::{self, DenseTensor};
use crate::tokenizer::InfoRichMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Minmax,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMethod {
    Static,
    Shift,
}

/// One score per visual token.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub layer: usize,
    pub scores: Vec<f32>,
    pub normalization: Normalization,
    pub method: SaliencyMethod,
}

/// JSON sidecar written next to a serialized map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub layer: usize,
    pub method: SaliencyMethod,
    pub normalization: Normalization,
}

impl SaliencyMap {
    pub fn is_all_zero(&self) -> bool {
        self.scores.iter().all(|&s| s == 0.0)
    }

    pub fn sidecar(&self) -> MapSidecar {
        MapSidecar { layer: self.layer, method: self.method, normalization: self.normalization }
    }

    pub fn sidecar_path(atn1_path: &Path) -> PathBuf {
        atn1_path.with_extension("json")
    }

    /// Write the scores as 1-D ATN1 plus the `.json` sidecar beside it.
    pub fn save(&self, atn1_path: &Path) -> Result<()> {
        atn1::write_file(atn1_path, &DenseTensor::from_vec1(self.scores.clone())?)?;
        let sidecar = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(Self::sidecar_path(atn1_path), sidecar + "\n")?;
        Ok(())
    }

    pub fn load(atn1_path: &Path) -> Result<Self> {
        let tensor = atn1::read_file(atn1_path)?;
        if tensor.dims().len() != 1 {
            return Err(GiftError::Shape(format!("saliency map must be 1-D, got {:?}", tensor.dims())));
        }
        let side: MapSidecar = serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(atn1_path))?)?;
        Ok(Self {
            layer: side.layer,
            scores: tensor.into_parts().1,
            normalization: side.normalization,
            method: side.method,
        })
    }

    /// Binary grayscale PPM (P6) with one pixel per grid cell; the map is
    /// rescaled to its own min-max range first.
    pub fn heatmap_ppm(&self, rows: usize, cols: usize) -> Result<Vec<u8>> {
        if rows * cols != self.scores.len() {
            return Err(GiftError::Shape(format!(
                "{} scores do not fill a {rows}x{cols} grid",
                self.scores.len()
            )));
        }
        let shade = tensors::minmax_normalize(&self.scores)?;
        let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
        for s in shade {
            let g = (s * 255.0).round().clamp(0.0, 255.0) as u8;
            out.extend_from_slice(&[g, g, g]);
        }
        Ok(out)
    }
}

/// Selected heads at one layer, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub layer: usize,
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyOptions {
    /// Fraction of heads kept (ceil).
    pub head_fraction: f64,
    /// Use row `i - 1` of the full sequence as the predecessor of query row
    /// `i`, even for the first query token.
    pub literal_predecessor: bool,
    /// Shift maps are clipped at `mean + clip_k * std` before min-max.
    pub clip_k: f64,
}

impl Default for SaliencyOptions {
    fn default() -> Self {
        Self { head_fraction: 0.5, literal_predecessor: false, clip_k: 3.0 }
    }
}

/// Pre-normalization map and the heads that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSaliency {
    pub heads: HeadSet,
    /// Per-head cumulative score used for head ranking.
    pub head_scores: Vec<f64>,
    pub values: Vec<f64>,
}

impl RawSaliency {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    fn scores_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// `ceil(total * fraction)`, at least one head.
pub fn head_count(total: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GiftError::Config(format!("head fraction must lie in (0, 1], got {fraction}")));
    }
    Ok(((total as f64 * fraction).ceil() as usize).clamp(1, total))
}

/// Per-head per-visual-column sums, reduced to a head ranking and the
/// averaged map over the selected heads.
fn reduce(
    layer: usize,
    per_head: Vec<Vec<f64>>,
    rows: usize,
    fraction: f64,
) -> Result<RawSaliency> {
    let head_scores: Vec<f64> = per_head.iter().map(|cols| cols.iter().sum()).collect();
    let k = head_count(per_head.len(), fraction)?;
    let heads = tensors::top_k_indices(&head_scores, k);
    let width = per_head.first().map_or(0, Vec::len);
    let denom = (heads.len() * rows) as f64;
    let values = (0..width)
        .map(|j| heads.iter().map(|&h| per_head[h][j]).sum::<f64>() / denom)
        .collect();
    Ok(RawSaliency { heads: HeadSet { layer, heads }, head_scores, values })
}

fn visual_nonempty(layout: &SegmentLayout) -> Result<()> {
    if layout.visual.is_empty() {
        return Err(GiftError::EmptyInput("visual span"));
    }
    Ok(())
}

/// Head ranking plus averaged attention to visual tokens over all query rows.
pub fn static_raw(attn: &AttentionTensor, layer: usize, fraction: f64) -> Result<RawSaliency> {
    attn.check_layer(layer)?;
    let layout = attn.layout();
    visual_nonempty(layout)?;
    if layout.query.is_empty() {
        return Err(GiftError::EmptyInput("query span"));
    }
    let vis = layout.visual.range();
    let per_head = (0..attn.heads())
        .map(|h| {
            let mut cols = vec![0.0f64; vis.len()];
            for i in layout.query.range() {
                for (c, &a) in cols.iter_mut().zip(&attn.row(layer, h, i)[vis.clone()]) {
                    *c += a as f64;
                }
            }
            cols
        })
        .collect();
    reduce(layer, per_head, layout.query.len, fraction)
}

pub fn select_heads_static(attn: &AttentionTensor, layer: usize, fraction: f64) -> Result<HeadSet> {
    Ok(static_raw(attn, layer, fraction)?.heads)
}

/// Static map: min-max of [`static_raw`], no clipping.
pub fn static_saliency(attn: &AttentionTensor, layer: usize, opts: &SaliencyOptions) -> Result<SaliencyMap> {
    let raw = static_raw(attn, layer, opts.head_fraction)?;
    Ok(SaliencyMap {
        layer,
        scores: tensors::minmax_normalize(&raw.scores_f32())?,
        normalization: Normalization::Minmax,
        method: SaliencyMethod::Static,
    })
}

/// Absolute row indices of info-rich query tokens that have a usable
/// predecessor row.
pub fn eligible_rows(layout: &SegmentLayout, mask: &InfoRichMask, literal_predecessor: bool) -> Result<Vec<usize>> {
    if mask.len() != layout.query.len {
        return Err(GiftError::Shape(format!(
            "info-rich mask has {} flags for {} query tokens",
            mask.len(),
            layout.query.len
        )));
    }
    let rows: Vec<usize> = mask
        .flags
        .iter()
        .enumerate()
        .filter(|&(k, &f)| f && (literal_predecessor || k > 0))
        .map(|(k, _)| layout.query.start + k)
        .filter(|&i| i > 0)
        .collect();
    if rows.is_empty() {
        return Err(GiftError::NoInfoRichTokens);
    }
    Ok(rows)
}

/// Head ranking plus averaged positive attention shift per visual token.
pub fn shift_raw(
    attn: &AttentionTensor,
    layer: usize,
    mask: &InfoRichMask,
    opts: &SaliencyOptions,
) -> Result<RawSaliency> {
    attn.check_layer(layer)?;
    let layout = attn.layout();
    visual_nonempty(layout)?;
    let rows = eligible_rows(layout, mask, opts.literal_predecessor)?;
    let vis = layout.visual.range();
    let per_head = (0..attn.heads())
        .map(|h| {
            let mut cols = vec![0.0f64; vis.len()];
            for &i in &rows {
                let cur = &attn.row(layer, h, i)[vis.clone()];
                let prev = &attn.row(layer, h, i - 1)[vis.clone()];
                for ((c, &a), &b) in cols.iter_mut().zip(cur).zip(prev) {
                    *c += (a as f64 - b as f64).max(0.0);
                }
            }
            cols
        })
        .collect();
    reduce(layer, per_head, rows.len(), opts.head_fraction)
}

pub fn select_heads_shift(
    attn: &AttentionTensor,
    layer: usize,
    mask: &InfoRichMask,
    opts: &SaliencyOptions,
) -> Result<HeadSet> {
    Ok(shift_raw(attn, layer, mask, opts)?.heads)
}

/// Shift map: [`shift_raw`], sigma-clipped, then min-max. An all-zero raw
/// map stays all zeros.
pub fn shift_saliency(
    attn: &AttentionTensor,
    layer: usize,
    mask: &InfoRichMask,
    opts: &SaliencyOptions,
) -> Result<SaliencyMap> {
    let raw = shift_raw(attn, layer, mask, opts)?;
    let clipped = tensors::clip_sigma(&raw.scores_f32(), opts.clip_k)?;
    Ok(SaliencyMap {
        layer,
        scores: tensors::minmax_normalize(&clipped)?,
        normalization: Normalization::Minmax,
        method: SaliencyMethod::Shift,
    })
}

/// Sum-normalized form of a raw map, used for scoring against boxes.
pub fn sum_normalized(raw: &RawSaliency, method: SaliencyMethod) -> Result<SaliencyMap> {
    Ok(SaliencyMap {
        layer: raw.heads.layer,
        scores: tensors::sum_normalize(&raw.scores_f32())?,
        normalization: Normalization::Sum,
        method,
    })
}

/// Outcome of the saliency-layer scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer: usize,
    /// Per-layer pre-normalization shift-map sum, averaged over the batch.
    pub mean_sums: Vec<f64>,
}

/// Argmax over per-layer sums; ties go to the lower layer.
pub fn pick_layer(sums: &[f64]) -> Option<usize> {
    tensors::top_k_indices(sums, 1).first().copied()
}

/// Pick the layer whose shift map carries the most total (pre-normalization)
/// positive shift, averaged over a calibration batch.
pub fn choose_saliency_layer(
    batch: &[(&AttentionTensor, &InfoRichMask)],
    opts: &SaliencyOptions,
) -> Result<LayerChoice> {
    let first = batch.first().ok_or(GiftError::EmptyInput("calibration batch"))?;
    let layers = first.0.layers();
    if batch.iter().any(|(a, _)| a.layers() != layers) {
        return Err(GiftError::Shape("calibration captures differ in depth".into()));
    }
    let per_example: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|(attn, mask)| {
            (0..layers)
                .map(|l| Ok(shift_raw(attn, l, mask, opts)?.total()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut mean_sums = vec![0.0f64; layers];
    for sums in &per_example {
        for (m, s) in mean_sums.iter_mut().zip(sums) {
            *m += s;
        }
    }
    for m in mean_sums.iter_mut() {
        *m /= batch.len() as f64;
    }
    let layer = pick_layer(&mean_sums).expect("at least one layer");
    Ok(LayerChoice { layer, mean_sums })
}

/// Share of a sum-normalized map inside `cells`, divided by the cells'
/// share of the grid.
pub fn normalized_saliency_score(map: &SaliencyMap, cells: &[usize], grid_cells: usize) -> Result<f64> {
    if map.normalization != Normalization::Sum {
        return Err(GiftError::InvalidInput("saliency score needs a sum-normalized map".into()));
    }
    if map.scores.len() != grid_cells {
        return Err(GiftError::Shape(format!(
            "map has {} scores for a grid of {grid_cells}",
            map.scores.len()
        )));
    }
    if cells.is_empty() {
        return Err(GiftError::EmptyInput("box"));
    }
    let mut seen = vec![false; grid_cells];
    for &c in cells {
        if c >= grid_cells || std::mem::replace(&mut seen[c], true) {
            return Err(GiftError::InvalidInput(format!("box cell {c} is out of bounds or repeated")));
        }
    }
    let inside: f64 = cells.iter().map(|&c| map.scores[c] as f64).sum();
    Ok(inside / (cells.len() as f64 / grid_cells as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Build a capture with `sys` system tokens, `vis` visual tokens and the
    /// given explicit query rows over visual columns; the remaining mass of
    /// each query row goes to its own position.
    fn capture(heads_rows: &[Vec<Vec<f32>>], vis: usize) -> AttentionTensor {
        let heads = heads_rows.len();
        let q = heads_rows[0].len();
        let layout = SegmentLayout::from_lengths(1, vis, q, 0);
        let n = 1 + vis + q;
        let mut data = vec![0.0f32; heads * n * n];
        for h in 0..heads {
            for i in 0..n {
                let row = &mut data[(h * n + i) * n..(h * n + i + 1) * n];
                if i < 1 + vis {
                    row[i] = 1.0;
                    continue;
                }
                let qrow = &heads_rows[h][i - 1 - vis];
                let mut used = 0.0;
                for (j, &a) in qrow.iter().enumerate() {
                    row[1 + j] = a;
                    used += a;
                }
                row[i] = 1.0 - used;
            }
        }
        AttentionTensor::new(1, heads, n, data, layout).unwrap()
    }

    fn approx(a: &[f32], b: &[f32]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn static_heads_and_map() {
        let t = capture(&[vec![vec![0.3, 0.3, 0.3]], vec![vec![0.05, 0.03, 0.02]]], 3);
        assert_eq!(select_heads_static(&t, 0, 0.5).unwrap().heads, vec![0]);

        let t = capture(&[vec![vec![0.2, 0.5, 0.3]]], 3);
        let m = static_saliency(&t, 0, &SaliencyOptions::default()).unwrap();
        approx(&m.scores, &[0.0, 1.0, 1.0 / 3.0]);

        let t2 = capture(&[vec![vec![0.2, 0.5, 0.3]; 4]], 3);
        let m2 = static_saliency(&t2, 0, &SaliencyOptions::default()).unwrap();
        approx(&m2.scores, &m.scores);
    }

    #[test]
    fn equal_heads_tie_to_lowest_indices() {
        let rows = vec![vec![0.1, 0.1]];
        let t = capture(&[rows.clone(), rows.clone(), rows.clone(), rows], 2);
        assert_eq!(select_heads_static(&t, 0, 0.5).unwrap().heads, vec![0, 1]);
    }

    #[test]
    fn shift_example() {
        let t = capture(&[vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]], 3);
        let mask = InfoRichMask::new(vec![false, true]);
        let m = shift_saliency(&t, 0, &mask, &SaliencyOptions::default()).unwrap();
        assert_eq!(m.scores, vec![1.0, 0.0, 0.0]);
        let raw = shift_raw(&t, 0, &mask, &SaliencyOptions::default()).unwrap();
        assert!((raw.values[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn shift_head_selection_picks_the_moving_head() {
        let still = vec![vec![0.2, 0.2], vec![0.2, 0.2]];
        let moving = vec![vec![0.1, 0.1], vec![0.3, 0.1]];
        let t = capture(&[still, moving], 2);
        let mask = InfoRichMask::new(vec![true, true]);
        let hs = select_heads_shift(&t, 0, &mask, &SaliencyOptions::default()).unwrap();
        assert_eq!(hs.heads, vec![1]);
    }

    #[test]
    fn constant_rows_give_zero_shift() {
        let rows = vec![vec![0.4, 0.1, 0.1]; 4];
        let t = capture(&[rows.clone(), rows], 3);
        let mask = InfoRichMask::new(vec![true; 4]);
        let opts = SaliencyOptions::default();
        let raw = shift_raw(&t, 0, &mask, &opts).unwrap();
        assert!(raw.values.iter().all(|&v| v == 0.0));
        assert_eq!(raw.heads.heads, vec![0]);
        assert!(shift_saliency(&t, 0, &mask, &opts).unwrap().is_all_zero());
    }

    #[test]
    fn predecessor_rules() {
        let t = capture(&[vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]], 3);
        let first_only = InfoRichMask::new(vec![true, false]);
        let opts = SaliencyOptions::default();
        assert!(matches!(shift_raw(&t, 0, &first_only, &opts), Err(GiftError::NoInfoRichTokens)));
        // literal: first query row is compared with the last visual row,
        // which attends only to itself (visual column 2).
        let literal = SaliencyOptions { literal_predecessor: true, ..opts };
        let raw = shift_raw(&t, 0, &first_only, &literal).unwrap();
        assert_eq!(raw.values.len(), 3);
        assert!((raw.values[0] - 0.2).abs() < 1e-7 && (raw.values[1] - 0.5).abs() < 1e-7);
        assert_eq!(raw.values[2], 0.0);
        let wrong_len = InfoRichMask::new(vec![true]);
        assert!(shift_raw(&t, 0, &wrong_len, &opts).is_err());
    }

    #[test]
    fn layer_choice() {
        assert_eq!(pick_layer(&[0.1, 0.9, 0.4]), Some(1));
        assert_eq!(pick_layer(&[0.0, 0.2, 0.5, 0.5]), Some(2));
        assert!(matches!(
            choose_saliency_layer(&[], &SaliencyOptions::default()),
            Err(GiftError::EmptyInput(_))
        ));
    }

    #[test]
    fn score_examples() {
        let uniform = SaliencyMap {
            layer: 0,
            scores: vec![1.0 / 16.0; 16],
            normalization: Normalization::Sum,
            method: SaliencyMethod::Static,
        };
        assert!((normalized_saliency_score(&uniform, &[0, 1, 5], 16).unwrap() - 1.0).abs() < 1e-6);

        let mut scores = vec![0.0; 16];
        for c in [0, 1, 4, 5] {
            scores[c] = 0.25;
        }
        let packed = SaliencyMap { scores, ..uniform.clone() };
        assert!((normalized_saliency_score(&packed, &[0, 1, 4, 5], 16).unwrap() - 4.0).abs() < 1e-6);

        assert!(normalized_saliency_score(&uniform, &[], 16).is_err());
        assert!(normalized_saliency_score(&uniform, &[16], 16).is_err());
        assert!(normalized_saliency_score(&uniform, &[2, 2], 16).is_err());
        let minmax = SaliencyMap { normalization: Normalization::Minmax, ..uniform };
        assert!(normalized_saliency_score(&minmax, &[0], 16).is_err());
    }

    #[test]
    fn heatmap_dimensions() {
        let m = SaliencyMap {
            layer: 0,
            scores: vec![0.0, 0.5, 1.0, 0.25, 0.0, 0.0],
            normalization: Normalization::Minmax,
            method: SaliencyMethod::Shift,
        };
        let ppm = m.heatmap_ppm(2, 3).unwrap();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), b"P6\n3 2\n255\n".len() + 18);
        assert!(m.heatmap_ppm(3, 3).is_err());
    }

    #[test]
    fn map_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.atn1");
        let m = SaliencyMap {
            layer: 3,
            scores: vec![0.0, 0.5, 1.0],
            normalization: Normalization::Minmax,
            method: SaliencyMethod::Shift,
        };
        m.save(&path).unwrap();
        assert_eq!(SaliencyMap::load(&path).unwrap(), m);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(side["method"], "shift");
        assert_eq!(side["normalization"], "minmax");
    }
}
