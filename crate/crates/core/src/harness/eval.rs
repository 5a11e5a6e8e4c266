use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GiftError, Result};
use crate::harness::fixtures::PlantedFixture;
use crate::saliency::{
    normalized_saliency_score, shift_raw, static_raw, sum_normalized, RawSaliency, SaliencyMethod, SaliencyOptions,
};
use crate::tensors::top_k_indices;

/// Static-vs-shift comparison on one fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: usize,
    pub static_score: f64,
    pub shift_score: f64,
    /// Mean raw (pre-normalization) saliency over the sink cells.
    pub static_sink_mean: f64,
    pub shift_sink_mean: f64,
    pub static_sink_top_decile: bool,
    pub shift_degenerate: bool,
    pub win: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub fixtures: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub mean_static_score: f64,
    pub mean_shift_score: f64,
    pub mean_static_sink: f64,
    pub mean_shift_sink: f64,
    pub static_sink_top_decile: usize,
    pub shift_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layer: usize,
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

fn sink_mean(raw: &RawSaliency, sinks: &[usize]) -> f64 {
    sinks.iter().map(|&c| raw.values[c]).sum::<f64>() / sinks.len() as f64
}

/// Score of a raw map against the box; `None` when the map is all zeros.
fn score(raw: &RawSaliency, method: SaliencyMethod, cells: &[usize]) -> Result<Option<f64>> {
    match sum_normalized(raw, method) {
        Ok(map) => Ok(Some(normalized_saliency_score(&map, cells, raw.values.len())?)),
        Err(GiftError::DegenerateSaliency(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn evaluate_fixture(fx: &PlantedFixture, layer: usize, opts: &SaliencyOptions) -> Result<EvalRecord> {
    let m = &fx.meta;
    let st = static_raw(&fx.attention, layer, opts.head_fraction)?;
    let sh = match shift_raw(&fx.attention, layer, &m.info_rich, opts) {
        Ok(r) => Some(r),
        Err(GiftError::NoInfoRichTokens) => None,
        Err(e) => return Err(e),
    };
    let static_score = score(&st, SaliencyMethod::Static, &m.box_cells)?.unwrap_or(0.0);
    let shift_score = match &sh {
        Some(r) => score(r, SaliencyMethod::Shift, &m.box_cells)?,
        None => None,
    };
    let decile = st.values.len().div_ceil(10);
    let top = top_k_indices(&st.values, decile);
    Ok(EvalRecord {
        id: m.id,
        static_score,
        shift_score: shift_score.unwrap_or(0.0),
        static_sink_mean: sink_mean(&st, &m.sinks),
        shift_sink_mean: sh.as_ref().map_or(0.0, |r| sink_mean(r, &m.sinks)),
        static_sink_top_decile: m.sinks.iter().any(|s| top.contains(s)),
        shift_degenerate: shift_score.is_none(),
        win: shift_score.is_some_and(|s| s > static_score),
    })
}

pub fn summarize(records: &[EvalRecord]) -> EvalSummary {
    let n = records.len();
    let mean = |f: fn(&EvalRecord) -> f64| if n == 0 { 0.0 } else { records.iter().map(f).sum::<f64>() / n as f64 };
    let wins = records.iter().filter(|r| r.win).count();
    EvalSummary {
        fixtures: n,
        wins,
        win_rate: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
        mean_static_score: mean(|r| r.static_score),
        mean_shift_score: mean(|r| r.shift_score),
        mean_static_sink: mean(|r| r.static_sink_mean),
        mean_shift_sink: mean(|r| r.shift_sink_mean),
        static_sink_top_decile: records.iter().filter(|r| r.static_sink_top_decile).count(),
        shift_degenerate: records.iter().filter(|r| r.shift_degenerate).count(),
    }
}

/// Evaluate every fixture at `layer`. With `jobs` set, fixtures are spread
/// over a pool of that many workers; records come back sorted by id either
/// way.
pub fn eval_saliency(
    fixtures: &[PlantedFixture],
    layer: usize,
    opts: &SaliencyOptions,
    jobs: Option<usize>,
) -> Result<EvalReport> {
    let run = || -> Result<Vec<EvalRecord>> {
        fixtures.par_iter().map(|fx| evaluate_fixture(fx, layer, opts)).collect()
    };
    let mut records = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| GiftError::Config(format!("worker pool: {e}")))?
            .install(run)?,
        None => fixtures.iter().map(|fx| evaluate_fixture(fx, layer, opts)).collect::<Result<_>>()?,
    };
    records.sort_by_key(|r| r.id);
    let summary = summarize(&records);
    Ok(EvalReport { layer, records, summary })
}
