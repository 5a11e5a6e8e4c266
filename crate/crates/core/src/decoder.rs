//! Greedy decoding and the two-phase steered pipeline.
//!
//! Phase 1 prefills the prompt only up to the saliency layer and turns the
//! captured attention into a map. Phase 2 runs an ordinary greedy decode
//! with the steering hook active on the fusion layers.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{GiftError, Result};
use crate::model::{
    AttentionTensor, DecodeSession, HeadRows, LayerRows, Model, PartialPrefill, Scene, Sequence, SteeringHook,
};
use crate::saliency::{shift_saliency, static_saliency, SaliencyMap, SaliencyOptions};
use crate::steering::{make_hook, FusionDiagnostic, SteeringConfig, SteeringMode};
use crate::tensors;
use crate::tokenizer::{select_info_rich, tag, tag_word, tokenize, InfoRichMask, Lexicon, Vocabulary};

/// Fixed instruction placed before the image.
pub const SYSTEM_PROMPT: &str = "you look at the picture .";

/// Tokens that end a sentence for diagnostic truncation.
pub const SENTENCE_END: [&str; 3] = [".", "?", "!"];

/// A tokenized prompt and the info-rich flags of its query.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub sequence: Sequence,
    pub query_mask: InfoRichMask,
}

impl Prompt {
    pub fn build(scene: &Scene, query: &str, vocab: &Vocabulary, lexicon: &Lexicon) -> Result<Self> {
        let system = tokenize(SYSTEM_PROMPT, vocab)?.ids;
        let visual = scene.visual_cells(vocab)?;
        let tagged = tag(tokenize(query, vocab)?, lexicon);
        Ok(Self {
            sequence: Sequence::from_parts(&system, &visual, &tagged.ids),
            query_mask: select_info_rich(&tagged),
        })
    }

    pub fn builtin(scene: &Scene, query: &str) -> Result<Self> {
        Self::build(scene, query, Vocabulary::builtin(), Lexicon::builtin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    /// Stop early when the end token wins. Benchmarks turn this off to get
    /// a fixed output length.
    pub stop_at_eos: bool,
    /// Keep the steered-layer rows of every step.
    pub capture: bool,
}

impl DecodeOptions {
    pub fn new(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, stop_at_eos: true, capture: false }
    }
}

/// Steered-layer rows of one decode step.
#[derive(Debug, Clone)]
pub struct StepSnapshot {
    pub step: usize,
    pub layers: Vec<LayerRows>,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Generated ids, end token excluded.
    pub tokens: Vec<u32>,
    pub steps: usize,
    pub stopped_at_eos: bool,
    pub duration_ns: u64,
    pub snapshots: Option<Vec<StepSnapshot>>,
}

fn check_rows(rows: &HeadRows) -> Result<()> {
    for h in 0..rows.heads() {
        let row = rows.row(h);
        if row.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(GiftError::InvalidHookOutput(format!("head {h} has a negative or non-finite weight")));
        }
        let sum: f64 = row.iter().map(|&a| a as f64).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(GiftError::InvalidHookOutput(format!("head {h} row sums to {sum}")));
        }
    }
    Ok(())
}

fn check_budget(model: &Model, prompt: &Sequence, opts: &DecodeOptions) -> Result<()> {
    let max = model.config().max_seq_len;
    let needed = prompt.len() + opts.max_new_tokens.saturating_sub(1);
    if needed > max {
        return Err(GiftError::ContextOverflow { needed, max });
    }
    Ok(())
}

/// Greedy loop shared by every mode. A disabled hook gives plain greedy
/// decoding.
pub fn decode_with_hook(model: &Model, prompt: &Sequence, hook: &SteeringHook, opts: &DecodeOptions) -> Result<DecodeResult> {
    let start = Instant::now();
    check_budget(model, prompt, opts)?;
    let session = if opts.max_new_tokens > 0 { Some(DecodeSession::start(model, prompt)?) } else { None };
    run_session(session, hook, opts, start)
}

fn run_session(session: Option<DecodeSession<'_>>, hook: &SteeringHook, opts: &DecodeOptions, start: Instant) -> Result<DecodeResult> {
    let eos = Vocabulary::builtin().eos_id();
    let mut tokens = Vec::with_capacity(opts.max_new_tokens);
    let mut snapshots = opts.capture.then(Vec::new);
    let mut stopped_at_eos = false;
    let mut steps = 0;
    if let Some(mut session) = session {
        for step in 0..opts.max_new_tokens {
            let out = session.step(hook)?;
            steps += 1;
            if let Some(snaps) = snapshots.as_mut() {
                let layers: Vec<LayerRows> = out.rows.into_iter().filter(|r| r.original.is_some()).collect();
                for l in &layers {
                    check_rows(&l.used)?;
                }
                snaps.push(StepSnapshot { step, layers });
            }
            let next = tensors::argmax(&out.logits).ok_or(GiftError::EmptyInput("logits"))? as u32;
            if opts.stop_at_eos && next == eos {
                stopped_at_eos = true;
                break;
            }
            tokens.push(next);
            if step + 1 < opts.max_new_tokens {
                session.push(next)?;
            }
        }
    }
    Ok(DecodeResult {
        tokens,
        steps,
        stopped_at_eos,
        duration_ns: start.elapsed().as_nanos() as u64,
        snapshots,
    })
}

pub fn greedy_decode(model: &Model, prompt: &Sequence, opts: &DecodeOptions) -> Result<DecodeResult> {
    decode_with_hook(model, prompt, &SteeringHook::disabled(), opts)
}

/// Result of [`gift_decode`].
#[derive(Debug, Clone)]
pub struct GiftOutcome {
    pub result: DecodeResult,
    /// Map used for steering; `None` when steering was off or fell back.
    pub map: Option<SaliencyMap>,
    pub steered: bool,
    /// True when the map was unusable and decoding ran unsteered.
    pub fallback: bool,
    /// Layers run by the truncated phase-1 prefill (0 when skipped).
    pub phase1_layers: usize,
}

/// Phase 1: truncated prefill and saliency map. A `None` map is
/// degenerate (no eligible info-rich token or all zeros).
pub struct PhaseOne {
    pub map: Option<SaliencyMap>,
    pub layers_executed: usize,
    pub prefill: PartialPrefill,
}

pub fn phase_one(model: &Model, prompt: &Prompt, cfg: &SteeringConfig) -> Result<PhaseOne> {
    let pre = model.prefill_resumable(&prompt.sequence, cfg.saliency_layer)?;
    let opts = SaliencyOptions {
        head_fraction: cfg.head_fraction,
        literal_predecessor: cfg.literal_predecessor,
        clip_k: cfg.clip_k,
    };
    let map = match cfg.mode {
        SteeringMode::StaticMap => static_saliency(&pre.attention, cfg.saliency_layer, &opts),
        _ => shift_saliency(&pre.attention, cfg.saliency_layer, &prompt.query_mask, &opts),
    };
    let map = match map {
        Ok(m) if m.is_all_zero() => None,
        Ok(m) => Some(m),
        Err(GiftError::NoInfoRichTokens) => None,
        Err(e) => return Err(e),
    };
    Ok(PhaseOne { map, layers_executed: pre.layers_executed, prefill: pre })
}

/// Two-phase steered decode. Mode `off` is plain greedy decoding.
///
/// Phase 2 continues from the phase-1 prefill instead of starting over;
/// the resulting state is identical to a fresh full prefill.
pub fn gift_decode(
    model: &Model,
    prompt: &Prompt,
    cfg: &SteeringConfig,
    calibration: Option<&FusionDiagnostic>,
    opts: &DecodeOptions,
) -> Result<GiftOutcome> {
    cfg.validate(model.config().layers)?;
    if cfg.mode == SteeringMode::Off {
        let result = greedy_decode(model, &prompt.sequence, opts)?;
        return Ok(GiftOutcome { result, map: None, steered: false, fallback: false, phase1_layers: 0 });
    }
    let t0 = Instant::now();
    check_budget(model, &prompt.sequence, opts)?;
    let PhaseOne { map, layers_executed: phase1_layers, prefill } = phase_one(model, prompt, cfg)?;
    let hook = match &map {
        Some(m) => make_hook(cfg, Some(m), calibration)?,
        None => SteeringHook::disabled(),
    };
    let session = if opts.max_new_tokens > 0 { Some(DecodeSession::resume(model, prefill)?) } else { None };
    let result = run_session(session, &hook, opts, t0)?;
    let steered = map.is_some();
    Ok(GiftOutcome { result, map, steered, fallback: !steered, phase1_layers })
}

/// Machine-readable record of one decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub tokens: Vec<u32>,
    pub text: String,
    pub steered: bool,
    pub fallback: bool,
    pub duration_ns: u64,
    pub config: serde_json::Value,
}

impl Transcript {
    pub fn new(outcome: &GiftOutcome, config: serde_json::Value) -> Self {
        Self {
            tokens: outcome.result.tokens.clone(),
            text: Vocabulary::builtin().detokenize(&outcome.result.tokens),
            steered: outcome.steered,
            fallback: outcome.fallback,
            duration_ns: outcome.result.duration_ns,
            config,
        }
    }
}

/// Prefix before the first sentence terminator.
pub fn truncate_at_sentence<'a>(ids: &'a [u32], vocab: &Vocabulary) -> &'a [u32] {
    let stop: Vec<u32> = SENTENCE_END.iter().filter_map(|w| vocab.id(w)).collect();
    let end = ids.iter().position(|id| stop.contains(id)).unwrap_or(ids.len());
    &ids[..end]
}

/// Info-rich flags for generated ids.
pub fn output_mask(ids: &[u32], vocab: &Vocabulary, lexicon: &Lexicon) -> InfoRichMask {
    InfoRichMask::new(
        ids.iter()
            .map(|&id| vocab.word(id).is_some_and(|w| tag_word(w, lexicon).is_info_rich()))
            .collect(),
    )
}

/// Calibration capture for the layer diagnostics: decode greedily, keep the
/// first sentence, and prefill prompt plus that sentence at full depth.
#[derive(Debug, Clone)]
pub struct CalibrationCapture {
    pub attention: AttentionTensor,
    pub query_mask: InfoRichMask,
    pub output_mask: InfoRichMask,
    pub output: Vec<u32>,
}

pub fn calibration_capture(model: &Model, prompt: &Prompt, max_new_tokens: usize) -> Result<CalibrationCapture> {
    let vocab = Vocabulary::builtin();
    let decoded = greedy_decode(model, &prompt.sequence, &DecodeOptions::new(max_new_tokens))?;
    let output = truncate_at_sentence(&decoded.tokens, vocab).to_vec();
    let full = prompt.sequence.with_generated(&output);
    let attention = model.prefill(&full, None)?.attention;
    Ok(CalibrationCapture {
        attention,
        query_mask: prompt.query_mask.clone(),
        output_mask: output_mask(&output, vocab, Lexicon::builtin()),
        output,
    })
}
