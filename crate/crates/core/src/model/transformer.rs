//! Pre-norm decoder-only transformer over `[system; visual; query; generated]`
//! with eager, materialized attention.
//!
//! Prefill and decode share one forward routine that appends keys/values to
//! a cache and computes each new row against everything cached so far, so a
//! decode step reproduces the corresponding prefill row bit for bit.

use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GiftError, Result};
use crate::model::attention::{AttentionTensor, HeadRows};
use crate::model::config::ModelConfig;
use crate::model::hook::SteeringHook;
use crate::model::layout::SegmentLayout;
use crate::model::scene::VisualCell;

/// Std of the query/key projections. Larger values sharpen attention.
const QK_GAIN: f32 = 1.3;
/// Std of sequence position embeddings relative to token embeddings.
const POS_SCALE: f32 = 0.25;
const RMS_EPS: f64 = 1e-6;

/// One input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqToken {
    Text(u32),
    Visual(VisualCell),
}

/// Tokens plus the layout describing which segment each belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    tokens: Vec<SeqToken>,
    layout: SegmentLayout,
}

impl Sequence {
    pub fn new(tokens: Vec<SeqToken>, layout: SegmentLayout) -> Result<Self> {
        layout.validate(tokens.len())?;
        for (i, t) in tokens.iter().enumerate() {
            let visual_slot = layout.visual.contains(i);
            match (t, visual_slot) {
                (SeqToken::Visual(_), true) | (SeqToken::Text(_), false) => {}
                _ => {
                    return Err(GiftError::Shape(format!(
                        "token {i} kind does not match its segment"
                    )))
                }
            }
        }
        Ok(Self { tokens, layout })
    }

    pub fn from_parts(system: &[u32], visual: &[VisualCell], query: &[u32]) -> Self {
        let tokens = system
            .iter()
            .map(|&id| SeqToken::Text(id))
            .chain(visual.iter().map(|&c| SeqToken::Visual(c)))
            .chain(query.iter().map(|&id| SeqToken::Text(id)))
            .collect();
        let layout = SegmentLayout::from_lengths(system.len(), visual.len(), query.len(), 0);
        Self { tokens, layout }
    }

    pub fn push_generated(&mut self, id: u32) {
        self.tokens.push(SeqToken::Text(id));
        self.layout.generated.len += 1;
    }

    pub fn with_generated(&self, ids: &[u32]) -> Self {
        let mut out = self.clone();
        for &id in ids {
            out.push_generated(id);
        }
        out
    }

    pub fn tokens(&self) -> &[SeqToken] {
        &self.tokens
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

struct Layer {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

/// Immutable seeded model; share it freely across threads.
pub struct Model {
    cfg: ModelConfig,
    tok_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    blank_emb: Vec<f32>,
    unembed: Vec<f32>,
    layers: Vec<Layer>,
}

/// Result of a (possibly truncated) prefill.
#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// Residual stream after the last executed layer, `n x d_model`.
    pub hidden: Vec<f32>,
    pub attention: AttentionTensor,
    pub layers_executed: usize,
}

/// Current-row attention at one layer of a decode step.
#[derive(Debug, Clone)]
pub struct LayerRows {
    pub layer: usize,
    /// Rows used for the value sum (after the hook, if any).
    pub used: HeadRows,
    /// Rows before the hook; present only where the hook ran.
    pub original: Option<HeadRows>,
}

/// Cached work of a truncated prefill, see [`Model::prefill_resumable`].
pub struct ResumeState {
    /// Address of the model that produced the state.
    owner: usize,
    prompt: Sequence,
    cache: KvCache,
    hidden: Vec<f32>,
    done: usize,
}

impl std::fmt::Debug for ResumeState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResumeState").field("positions", &self.cache.len).field("layers_done", &(self.done + 1)).finish()
    }
}

#[derive(Debug)]
pub struct PartialPrefill {
    pub attention: AttentionTensor,
    pub layers_executed: usize,
    pub state: ResumeState,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    pub rows: Vec<LayerRows>,
}

struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    fn new(layers: usize, capacity: usize, d: usize) -> Self {
        Self {
            keys: (0..layers).map(|_| Vec::with_capacity(capacity * d)).collect(),
            values: (0..layers).map(|_| Vec::with_capacity(capacity * d)).collect(),
            len: 0,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] as f64 * b[i] as f64;
        acc[1] += a[i + 1] as f64 * b[i + 1] as f64;
        acc[2] += a[i + 2] as f64 * b[i + 2] as f64;
        acc[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out = W x` for row-major `W` of shape `out.len() x x.len()`.
fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o = dot(row, x) as f32;
    }
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|&v| (v as f64 * inv) as f32).collect()
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn causal_softmax(scores: &[f64], out: &mut [f32]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut exps = Vec::with_capacity(scores.len());
    for &s in scores {
        let e = (s - max).exp();
        sum += e;
        exps.push(e);
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

fn check_hook_output(rows: &HeadRows, heads: usize, len: usize) -> Result<()> {
    if rows.heads() != heads || rows.len() != len {
        return Err(GiftError::InvalidHookOutput(format!(
            "expected {heads}x{len} rows, got {}x{}",
            rows.heads(),
            rows.len()
        )));
    }
    if let Some(bad) = rows.data().iter().find(|a| !a.is_finite() || **a < 0.0) {
        return Err(GiftError::InvalidHookOutput(format!("weight {bad} is negative or non-finite")));
    }
    Ok(())
}

impl Model {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dk = cfg.d_head;
        let hidden = cfg.mlp_hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let tok_emb = normal_vec(&mut rng, cfg.vocab_size * d, 1.0);
        let pos_emb = normal_vec(&mut rng, cfg.max_seq_len * d, POS_SCALE);
        let blank_emb = normal_vec(&mut rng, d, 1.0);

        let proj_std = 1.0 / (d as f32).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| {
                let wq = normal_vec(&mut rng, d * d, QK_GAIN * proj_std);
                let mut wk = normal_vec(&mut rng, d * d, QK_GAIN * proj_std);
                // The lower half of the heads are matching heads: shared
                // query/key projections make a token attend to positions
                // whose features resemble its own.
                let matching = cfg.heads / 2;
                wk[..matching * dk * d].copy_from_slice(&wq[..matching * dk * d]);
                Layer {
                    wq,
                    wk,
                    wv: normal_vec(&mut rng, d * d, proj_std),
                    wo: normal_vec(&mut rng, d * d, 0.5 * proj_std),
                    w_up: normal_vec(&mut rng, hidden * d, proj_std),
                    w_down: normal_vec(&mut rng, d * hidden, 0.5 / (hidden as f32).sqrt()),
                }
            })
            .collect();

        let unembed = normal_vec(&mut rng, cfg.vocab_size * d, 1.0);

        Ok(Self { cfg, tok_emb, pos_emb, blank_emb, unembed, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_sequence(&self, seq: &Sequence, extra: usize) -> Result<()> {
        let needed = seq.len() + extra;
        if needed > self.cfg.max_seq_len {
            return Err(GiftError::ContextOverflow { needed, max: self.cfg.max_seq_len });
        }
        if seq.is_empty() {
            return Err(GiftError::EmptyInput("sequence"));
        }
        if seq.layout().visual.len != self.cfg.grid_cells() {
            return Err(GiftError::Shape(format!(
                "visual span has {} tokens, model grid has {} cells",
                seq.layout().visual.len,
                self.cfg.grid_cells()
            )));
        }
        Ok(())
    }

    fn embed(&self, token: &SeqToken, pos: usize) -> Result<Vec<f32>> {
        let d = self.cfg.d_model;
        let row = |id: u32| -> Result<&[f32]> {
            let id = id as usize;
            if id >= self.cfg.vocab_size {
                return Err(GiftError::InvalidInput(format!(
                    "token id {id} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            Ok(&self.tok_emb[id * d..(id + 1) * d])
        };
        let mut x = match token {
            SeqToken::Text(id) => row(*id)?.to_vec(),
            SeqToken::Visual(cell) => match (cell.shape, cell.color) {
                (None, None) => self.blank_emb.clone(),
                (shape, color) => {
                    let mut x = vec![0.0f32; d];
                    for id in [shape, color].into_iter().flatten() {
                        for (a, b) in x.iter_mut().zip(row(id)?) {
                            *a += b;
                        }
                    }
                    x
                }
            },
        };
        for (a, b) in x.iter_mut().zip(&self.pos_emb[pos * d..(pos + 1) * d]) {
            *a += b;
        }
        Ok(x)
    }

    /// Run `tokens` (at positions `cache.len..`) through layers
    /// `0..=last_layer`, returning the new positions' residual stream.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tokens: &[SeqToken],
        cache: &mut KvCache,
        last_layer: usize,
        layout: &SegmentLayout,
        hook: &SteeringHook,
        capture: Option<&mut AttentionTensor>,
        step_rows: Option<&mut Vec<LayerRows>>,
    ) -> Result<Vec<f32>> {
        let start = cache.len;
        let mut h = Vec::with_capacity(tokens.len() * self.cfg.d_model);
        for (r, t) in tokens.iter().enumerate() {
            h.extend(self.embed(t, start + r)?);
        }
        self.run_layers(&mut h, start, cache, 0..=last_layer, layout, hook, capture, step_rows)?;
        cache.len += tokens.len();
        Ok(h)
    }

    /// Push residual rows for positions `start..` through `layers`,
    /// appending their keys and values to the cache.
    #[allow(clippy::too_many_arguments)]
    fn run_layers(
        &self,
        h: &mut [f32],
        start: usize,
        cache: &mut KvCache,
        layers: RangeInclusive<usize>,
        layout: &SegmentLayout,
        hook: &SteeringHook,
        mut capture: Option<&mut AttentionTensor>,
        mut step_rows: Option<&mut Vec<LayerRows>>,
    ) -> Result<()> {
        let d = self.cfg.d_model;
        let dk = self.cfg.d_head;
        let heads = self.cfg.heads;
        let n_new = h.len() / d;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut q = vec![0.0f32; n_new * d];
        let mut k = vec![0.0f32; d];
        let mut v = vec![0.0f32; d];
        let mut attn_out = vec![0.0f32; d];
        let mut proj = vec![0.0f32; d];
        let mut up = vec![0.0f32; self.cfg.mlp_hidden()];

        for l in layers {
            let layer = &self.layers[l];
            debug_assert_eq!(cache.keys[l].len(), start * d);
            for r in 0..n_new {
                let xn = rms_norm(&h[r * d..(r + 1) * d]);
                matvec(&layer.wq, &xn, &mut q[r * d..(r + 1) * d]);
                matvec(&layer.wk, &xn, &mut k);
                matvec(&layer.wv, &xn, &mut v);
                cache.keys[l].extend_from_slice(&k);
                cache.values[l].extend_from_slice(&v);
            }
            let keys = &cache.keys[l];
            let values = &cache.values[l];

            for r in 0..n_new {
                let pos = start + r;
                let width = pos + 1;
                let mut rows = HeadRows::zeros(heads, width);
                let mut scores = vec![0.0f64; width];
                for head in 0..heads {
                    let qh = &q[r * d + head * dk..r * d + (head + 1) * dk];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kh = &keys[j * d + head * dk..j * d + (head + 1) * dk];
                        *s = dot(qh, kh) * scale;
                    }
                    causal_softmax(&scores, rows.row_mut(head));
                }

                let mut original = None;
                if let Some(result) = hook.call(l, layout, &rows) {
                    let steered = result?;
                    check_hook_output(&steered, heads, width)?;
                    original = Some(std::mem::replace(&mut rows, steered));
                }

                if let Some(cap) = capture.as_deref_mut() {
                    for head in 0..heads {
                        cap.row_mut(l, head, pos)[..width].copy_from_slice(rows.row(head));
                    }
                }

                for head in 0..heads {
                    let weights = rows.row(head);
                    for c in 0..dk {
                        let mut acc = 0.0f64;
                        for (j, &a) in weights.iter().enumerate() {
                            acc += a as f64 * values[j * d + head * dk + c] as f64;
                        }
                        attn_out[head * dk + c] = acc as f32;
                    }
                }
                if let Some(sr) = step_rows.as_deref_mut() {
                    sr.push(LayerRows { layer: l, used: rows, original });
                }

                let hr = &mut h[r * d..(r + 1) * d];
                matvec(&layer.wo, &attn_out, &mut proj);
                for (a, b) in hr.iter_mut().zip(&proj) {
                    *a += b;
                }
                let xn = rms_norm(hr);
                matvec(&layer.w_up, &xn, &mut up);
                for u in up.iter_mut() {
                    *u = gelu(*u);
                }
                matvec(&layer.w_down, &up, &mut proj);
                for (a, b) in hr.iter_mut().zip(&proj) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    /// Prefill `seq` through layers `0..=up_to_layer` (all layers when
    /// `None`) and capture attention for exactly those layers. No steering.
    pub fn prefill(&self, seq: &Sequence, up_to_layer: Option<usize>) -> Result<PrefillOutput> {
        self.check_sequence(seq, 0)?;
        let last = up_to_layer.unwrap_or(self.cfg.layers - 1);
        if last >= self.cfg.layers {
            return Err(GiftError::LayerOutOfRange { layer: last, available: self.cfg.layers });
        }
        let n = seq.len();
        let layers_executed = last + 1;
        let mut attention = AttentionTensor::new_unchecked(
            layers_executed,
            self.cfg.heads,
            n,
            vec![0.0; layers_executed * self.cfg.heads * n * n],
            *seq.layout(),
        )?;
        let mut cache = KvCache::new(self.cfg.layers, n, self.cfg.d_model);
        let hidden = self.forward(
            seq.tokens(),
            &mut cache,
            last,
            seq.layout(),
            &SteeringHook::disabled(),
            Some(&mut attention),
            None,
        )?;
        Ok(PrefillOutput { hidden, attention, layers_executed })
    }

    /// Truncated prefill whose work can be reused by a later decode.
    ///
    /// Runs layers `0..=up_to_layer` over the whole prompt and captures
    /// their attention, like [`Model::prefill`]. The returned state holds
    /// those layers' keys, values and residual rows for every prompt token
    /// but the last, which is exactly what [`DecodeSession::resume`] would
    /// otherwise recompute.
    pub fn prefill_resumable(&self, seq: &Sequence, up_to_layer: usize) -> Result<PartialPrefill> {
        self.check_sequence(seq, 0)?;
        if up_to_layer >= self.cfg.layers {
            return Err(GiftError::LayerOutOfRange { layer: up_to_layer, available: self.cfg.layers });
        }
        let n = seq.len();
        let d = self.cfg.d_model;
        let layers_executed = up_to_layer + 1;
        let mut attention = AttentionTensor::new_unchecked(
            layers_executed,
            self.cfg.heads,
            n,
            vec![0.0; layers_executed * self.cfg.heads * n * n],
            *seq.layout(),
        )?;
        let mut cache = KvCache::new(self.cfg.layers, self.cfg.max_seq_len, d);
        let mut hidden = self.forward(
            seq.tokens(),
            &mut cache,
            up_to_layer,
            seq.layout(),
            &SteeringHook::disabled(),
            Some(&mut attention),
            None,
        )?;
        // Causality: the first n-1 rows never saw the last token.
        hidden.truncate((n - 1) * d);
        for l in 0..layers_executed {
            cache.keys[l].truncate((n - 1) * d);
            cache.values[l].truncate((n - 1) * d);
        }
        cache.len = n - 1;
        Ok(PartialPrefill {
            attention,
            layers_executed,
            state: ResumeState { owner: self as *const Model as usize, prompt: seq.clone(), cache, hidden, done: up_to_layer },
        })
    }

    /// Next-token logits from a final residual-stream vector.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let d = self.cfg.d_model;
        let xn = rms_norm(hidden);
        let scale = 1.0 / (d as f64).sqrt();
        self.unembed
            .chunks_exact(d)
            .map(|row| (dot(row, &xn) * scale) as f32)
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn duplicate_unembedding(&mut self, from: u32, to: u32) {
        let d = self.cfg.d_model;
        let src = self.unembed[from as usize * d..(from as usize + 1) * d].to_vec();
        self.unembed[to as usize * d..(to as usize + 1) * d].copy_from_slice(&src);
    }
}

/// Single-owner decoding state over a shared model.
///
/// The prompt minus its last token is prefilled on creation; every call to
/// [`DecodeSession::step`] then feeds exactly one pending token and yields
/// logits for the next one, so the first generated token is also produced
/// by a (steerable) decode step.
pub struct DecodeSession<'m> {
    model: &'m Model,
    cache: KvCache,
    seq: Sequence,
}

impl<'m> DecodeSession<'m> {
    pub fn start(model: &'m Model, prompt: &Sequence) -> Result<Self> {
        model.check_sequence(prompt, 0)?;
        let n = prompt.len();
        let mut cache = KvCache::new(model.cfg.layers, model.cfg.max_seq_len, model.cfg.d_model);
        if n > 1 {
            model.forward(
                &prompt.tokens()[..n - 1],
                &mut cache,
                model.cfg.layers - 1,
                prompt.layout(),
                &SteeringHook::disabled(),
                None,
                None,
            )?;
        }
        Ok(Self { model, cache, seq: prompt.clone() })
    }

    /// Continue a truncated prefill to full depth. The session is then in
    /// the same state, bit for bit, as one made by [`DecodeSession::start`].
    pub fn resume(model: &'m Model, partial: PartialPrefill) -> Result<Self> {
        let ResumeState { owner, prompt, mut cache, mut hidden, done } = partial.state;
        if owner != model as *const Model as usize {
            return Err(GiftError::InvalidInput("prefill state belongs to a different model".into()));
        }
        if done + 1 < model.cfg.layers && !hidden.is_empty() {
            model.run_layers(
                &mut hidden,
                0,
                &mut cache,
                done + 1..=model.cfg.layers - 1,
                prompt.layout(),
                &SteeringHook::disabled(),
                None,
                None,
            )?;
        }
        Ok(Self { model, cache, seq: prompt })
    }

    pub fn sequence(&self) -> &Sequence {
        &self.seq
    }

    pub fn layout(&self) -> &SegmentLayout {
        self.seq.layout()
    }

    pub fn has_pending(&self) -> bool {
        self.cache.len < self.seq.len()
    }

    /// Feed the pending token, applying `hook` to its attention rows.
    pub fn step(&mut self, hook: &SteeringHook) -> Result<StepOutput> {
        let pos = self.cache.len;
        if pos + 1 != self.seq.len() {
            return Err(GiftError::InvalidInput(
                "decode step needs exactly one pending token; push the previous output first".into(),
            ));
        }
        let token = self.seq.tokens()[pos];
        let mut rows = Vec::with_capacity(self.model.cfg.layers);
        let layout = *self.seq.layout();
        let hidden = self.model.forward(
            &[token],
            &mut self.cache,
            self.model.cfg.layers - 1,
            &layout,
            hook,
            None,
            Some(&mut rows),
        )?;
        Ok(StepOutput { logits: self.model.logits(&hidden), rows })
    }

    /// Append a generated token as the next pending input.
    pub fn push(&mut self, id: u32) -> Result<()> {
        if self.has_pending() {
            return Err(GiftError::InvalidInput("previous pending token not yet fed".into()));
        }
        if self.seq.len() + 1 > self.model.cfg.max_seq_len {
            return Err(GiftError::ContextOverflow {
                needed: self.seq.len() + 1,
                max: self.model.cfg.max_seq_len,
            });
        }
        self.seq.push_generated(id);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_cfg() -> ModelConfig {
        ModelConfig {
            layers: 3,
            heads: 4,
            d_model: 32,
            d_head: 8,
            vocab_size: 512,
            max_seq_len: 64,
            grid_rows: 2,
            grid_cols: 3,
            seed: 7,
        }
    }

    fn probe(cfg: &ModelConfig) -> Sequence {
        let cells: Vec<VisualCell> = (0..cfg.grid_cells())
            .map(|i| VisualCell { shape: Some(40 + i as u32), color: if i % 2 == 0 { Some(30) } else { None } })
            .collect();
        Sequence::from_parts(&[5, 6], &cells, &[100, 101, 102])
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let seq = probe(&cfg);
        let a = Model::build(cfg.clone()).unwrap();
        let b = Model::build(cfg.clone()).unwrap();
        let la = a.logits(&a.prefill(&seq, None).unwrap().hidden[(seq.len() - 1) * 32..]);
        let lb = b.logits(&b.prefill(&seq, None).unwrap().hidden[(seq.len() - 1) * 32..]);
        assert_eq!(la, lb);

        let c = Model::build(ModelConfig { seed: 8, ..cfg }).unwrap();
        let lc = c.logits(&c.prefill(&seq, None).unwrap().hidden[(seq.len() - 1) * 32..]);
        assert_ne!(la, lc);
    }

    #[test]
    fn build_rejects_inconsistent_dims() {
        let cfg = ModelConfig { d_model: 30, ..small_cfg() };
        assert!(matches!(Model::build(cfg), Err(GiftError::Config(_))));
    }

    #[test]
    fn prefill_depth_and_capture_invariants() {
        let cfg = small_cfg();
        let model = Model::build(cfg.clone()).unwrap();
        let seq = probe(&cfg);
        let full = model.prefill(&seq, Some(cfg.layers - 1)).unwrap();
        assert_eq!(full.attention.layers(), cfg.layers);
        assert_eq!(full.layers_executed, cfg.layers);
        full.attention.validate().unwrap();

        let partial = model.prefill(&seq, Some(1)).unwrap();
        assert_eq!(partial.layers_executed, 2);
        assert!(partial.layers_executed < full.layers_executed);
        for h in 0..cfg.heads {
            for i in 0..seq.len() {
                assert_eq!(partial.attention.row(1, h, i), full.attention.row(1, h, i));
            }
        }

        assert!(matches!(
            model.prefill(&seq, Some(cfg.layers)),
            Err(GiftError::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn decode_rows_match_prefill_rows_bitwise() {
        let cfg = small_cfg();
        let model = Model::build(cfg.clone()).unwrap();
        let prompt = probe(&cfg);
        let mut session = DecodeSession::start(&model, &prompt).unwrap();
        let out = session.step(&SteeringHook::disabled()).unwrap();

        let full = model.prefill(&prompt, None).unwrap();
        let last = prompt.len() - 1;
        assert_eq!(out.logits, model.logits(&full.hidden[last * 32..]));
        for lr in &out.rows {
            for h in 0..cfg.heads {
                assert_eq!(lr.used.row(h), &full.attention.row(lr.layer, h, last)[..last + 1]);
            }
            assert!(lr.original.is_none());
        }
    }

    #[test]
    fn hook_validation() {
        let cfg = small_cfg();
        let model = Model::build(cfg.clone()).unwrap();
        let prompt = probe(&cfg);

        let short = SteeringHook::new([1], |_, _, rows: &HeadRows| {
            Ok(HeadRows::zeros(rows.heads(), rows.len() - 1))
        });
        let mut s = DecodeSession::start(&model, &prompt).unwrap();
        assert!(matches!(s.step(&short), Err(GiftError::InvalidHookOutput(_))));

        let negative = SteeringHook::new([0], |_, _, rows: &HeadRows| {
            let mut out = rows.clone();
            out.row_mut(0)[0] = -0.1;
            Ok(out)
        });
        let mut s = DecodeSession::start(&model, &prompt).unwrap();
        assert!(matches!(s.step(&negative), Err(GiftError::InvalidHookOutput(_))));
    }

    #[test]
    fn scaled_then_renormalized_hook_is_a_no_op() {
        let cfg = small_cfg();
        let model = Model::build(cfg.clone()).unwrap();
        let prompt = probe(&cfg);
        let hook = SteeringHook::new(0..cfg.layers, |_, _, rows: &HeadRows| {
            let mut out = rows.clone();
            for h in 0..out.heads() {
                let doubled: Vec<f32> = out.row(h).iter().map(|&a| a * 2.0).collect();
                let sum: f64 = doubled.iter().map(|&a| a as f64).sum();
                for (o, a) in out.row_mut(h).iter_mut().zip(doubled) {
                    *o = (a as f64 / sum) as f32;
                }
            }
            Ok(out)
        });
        let mut plain = DecodeSession::start(&model, &prompt).unwrap();
        let mut hooked = DecodeSession::start(&model, &prompt).unwrap();
        let a = plain.step(&SteeringHook::disabled()).unwrap();
        let b = hooked.step(&hook).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
        assert!(b.rows.iter().all(|r| r.original.is_some()));
    }

    #[test]
    fn disabled_hook_is_bitwise_identity() {
        let cfg = small_cfg();
        let model = Model::build(cfg.clone()).unwrap();
        let prompt = probe(&cfg);
        let mut hook = SteeringHook::new(0..cfg.layers, |_, _, _: &HeadRows| {
            Ok(HeadRows::zeros(1, 1))
        });
        hook.set_enabled(false);
        let mut a = DecodeSession::start(&model, &prompt).unwrap();
        let mut b = DecodeSession::start(&model, &prompt).unwrap();
        assert_eq!(
            a.step(&SteeringHook::disabled()).unwrap().logits,
            b.step(&hook).unwrap().logits
        );
    }

    #[test]
    fn session_requires_push_between_steps() {
        let cfg = small_cfg();
        let model = Model::build(cfg.clone()).unwrap();
        let mut s = DecodeSession::start(&model, &probe(&cfg)).unwrap();
        s.step(&SteeringHook::disabled()).unwrap();
        assert!(s.step(&SteeringHook::disabled()).is_err());
        s.push(3).unwrap();
        assert!(s.push(3).is_err());
        s.step(&SteeringHook::disabled()).unwrap();
        assert_eq!(s.layout().generated.len, 1);
    }

    #[test]
    fn logit_tie_picks_the_lower_id() {
        let cfg = small_cfg();
        let mut model = Model::build(cfg.clone()).unwrap();
        let seq = probe(&cfg);
        let out = model.prefill(&seq, None).unwrap();
        let logits = model.logits(&out.hidden[(seq.len() - 1) * 32..]);
        let top = crate::tensors::argmax(&logits).unwrap() as u32;
        let lower = if top > 10 { top - 7 } else { top + 7 };
        let (lo, hi) = (lower.min(top), lower.max(top));
        model.duplicate_unembedding(top, lower);
        let logits = model.logits(&out.hidden[(seq.len() - 1) * 32..]);
        assert_eq!(logits[lo as usize], logits[hi as usize]);
        assert_eq!(crate::tensors::argmax(&logits), Some(lo as usize));
    }

    #[test]
    fn resumed_session_matches_fresh_session_bitwise() {
        let cfg = small_cfg();
        let model = Model::build(cfg.clone()).unwrap();
        let prompt = probe(&cfg);
        for s in 0..cfg.layers {
            let partial = model.prefill_resumable(&prompt, s).unwrap();
            assert_eq!(partial.layers_executed, s + 1);
            let reference = model.prefill(&prompt, Some(s)).unwrap();
            assert_eq!(partial.attention, reference.attention);
            let mut a = DecodeSession::resume(&model, partial).unwrap();
            let mut b = DecodeSession::start(&model, &prompt).unwrap();
            for id in [9u32, 17] {
                assert_eq!(a.step(&SteeringHook::disabled()).unwrap().logits, b.step(&SteeringHook::disabled()).unwrap().logits);
                a.push(id).unwrap();
                b.push(id).unwrap();
            }
        }
    }
}
