//! Random captures and brute-force reference implementations shared by the
//! integration tests. The references are written as plain loops over the
//! definitions and deliberately share no code with the library.

#![allow(dead_code)]

use gift::model::{AttentionTensor, SegmentLayout};
use gift::tokenizer::InfoRichMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomCapture {
    pub attention: AttentionTensor,
    pub query_mask: InfoRichMask,
    pub output_mask: InfoRichMask,
}

/// Causal softmax rows with random logits; a few columns get a large boost
/// so some heads look like sinks.
pub fn random_capture(seed: u64, layers: usize, heads: usize, layout: SegmentLayout) -> RandomCapture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = layout.total_len();
    let mut data = vec![0f32; layers * heads * n * n];
    for block in data.chunks_exact_mut(n * n) {
        let temp: f64 = rng.random_range(0.3..3.0);
        let sink = rng.random_range(0..n);
        for i in 0..n {
            let logits: Vec<f64> = (0..=i)
                .map(|j| rng.random_range(-1.0..1.0) * temp + if j == sink { 3.0 } else { 0.0 })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                block[i * n + j] = (e / sum) as f32;
            }
        }
    }
    let attention = AttentionTensor::new(layers, heads, n, data, layout).unwrap();
    let mut query: Vec<bool> = (0..layout.query.len).map(|_| rng.random_bool(0.5)).collect();
    if layout.query.len > 1 {
        query[1] = true;
    }
    let mut output: Vec<bool> = (0..layout.generated.len).map(|_| rng.random_bool(0.5)).collect();
    if let Some(first) = output.first_mut() {
        *first = true;
    }
    RandomCapture { attention, query_mask: InfoRichMask::new(query), output_mask: InfoRichMask::new(output) }
}

/// Layout of the acceptance-size captures: 96 tokens.
pub fn layout96() -> SegmentLayout {
    SegmentLayout::from_lengths(4, 64, 16, 12)
}

pub fn a(t: &AttentionTensor, l: usize, h: usize, i: usize, j: usize) -> f64 {
    t.get(l, h, i, j) as f64
}

/// Indices of the `k` largest scores (ties to the lower index), ascending.
pub fn oracle_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut chosen = Vec::new();
    let mut used = vec![false; scores.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for h in 0..scores.len() {
            if used[h] {
                continue;
            }
            if best.map_or(true, |b| scores[h] > scores[b]) {
                best = Some(h);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        chosen.push(b);
    }
    chosen.sort();
    chosen
}

pub fn oracle_head_count(heads: usize, fraction: f64) -> usize {
    let mut k = 0;
    while (k as f64) < heads as f64 * fraction {
        k += 1;
    }
    k.max(1).min(heads)
}

pub fn oracle_minmax(v: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi == lo {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

pub fn oracle_clip(v: &[f64], k: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let bound = mean + k * var.sqrt();
    v.iter().map(|&x| if x > bound { bound } else { x }).collect()
}

/// `(selected heads, raw map)` of the static method.
pub fn oracle_static_raw(t: &AttentionTensor, l: usize, fraction: f64) -> (Vec<usize>, Vec<f64>) {
    let lay = t.layout();
    let mut head_scores = vec![0.0; t.heads()];
    for h in 0..t.heads() {
        for i in lay.query.start..lay.query.end() {
            for j in lay.visual.start..lay.visual.end() {
                head_scores[h] += a(t, l, h, i, j);
            }
        }
    }
    let heads = oracle_top_k(&head_scores, oracle_head_count(t.heads(), fraction));
    let mut map = vec![0.0; lay.visual.len];
    for (c, j) in (lay.visual.start..lay.visual.end()).enumerate() {
        for &h in &heads {
            for i in lay.query.start..lay.query.end() {
                map[c] += a(t, l, h, i, j);
            }
        }
        map[c] /= (heads.len() * lay.query.len) as f64;
    }
    (heads, map)
}

/// `(selected heads, raw map)` of the shift method with the default
/// predecessor rule: only query tokens after the first contribute.
pub fn oracle_shift_raw(t: &AttentionTensor, l: usize, mask: &InfoRichMask, fraction: f64) -> (Vec<usize>, Vec<f64>) {
    let lay = t.layout();
    let rows: Vec<usize> = (1..lay.query.len).filter(|&k| mask.flags[k]).map(|k| lay.query.start + k).collect();
    let mut head_scores = vec![0.0; t.heads()];
    for h in 0..t.heads() {
        for &i in &rows {
            for j in lay.visual.start..lay.visual.end() {
                let d = a(t, l, h, i, j) - a(t, l, h, i - 1, j);
                if d > 0.0 {
                    head_scores[h] += d;
                }
            }
        }
    }
    let heads = oracle_top_k(&head_scores, oracle_head_count(t.heads(), fraction));
    let mut map = vec![0.0; lay.visual.len];
    for (c, j) in (lay.visual.start..lay.visual.end()).enumerate() {
        for &h in &heads {
            for &i in &rows {
                let d = a(t, l, h, i, j) - a(t, l, h, i - 1, j);
                if d > 0.0 {
                    map[c] += d;
                }
            }
        }
        map[c] /= (heads.len() * rows.len()) as f64;
    }
    (heads, map)
}

/// Per-layer `(r_v, r_t, H_OV, H_OT)` over the pooled info-rich output rows.
pub fn oracle_fusion(batch: &[(&AttentionTensor, &InfoRichMask)], fraction: f64) -> Vec<(f64, f64, Vec<usize>, Vec<usize>)> {
    let (layers, heads) = (batch[0].0.layers(), batch[0].0.heads());
    let k = oracle_head_count(heads, fraction);
    let mut out = Vec::new();
    for l in 0..layers {
        let mut vis = vec![0.0; heads];
        let mut txt = vec![0.0; heads];
        let mut rows = 0usize;
        for (t, mask) in batch {
            let lay = t.layout();
            for g in 0..lay.generated.len {
                if !mask.flags[g] {
                    continue;
                }
                let i = lay.generated.start + g;
                for h in 0..heads {
                    for j in lay.visual.start..lay.visual.end() {
                        vis[h] += a(t, l, h, i, j);
                    }
                    for j in lay.query.start..lay.query.end() {
                        txt[h] += a(t, l, h, i, j);
                    }
                }
                rows += 1;
            }
        }
        let ov = oracle_top_k(&vis, k);
        let ot = oracle_top_k(&txt, k);
        let r_v = ov.iter().map(|&h| vis[h]).sum::<f64>() / (k * rows) as f64;
        let r_t = ot.iter().map(|&h| txt[h]).sum::<f64>() / (k * rows) as f64;
        out.push((r_v, r_t, ov, ot));
    }
    out
}

/// Visual-mass ratio after multiplying by `exp(alpha * s)`, over `heads`.
pub fn oracle_mass_ratio(rows: &[Vec<f64>], vis: std::ops::Range<usize>, map: &[f64], alpha: f64, heads: &[usize]) -> f64 {
    let mut before = 0.0;
    let mut after = 0.0;
    for &h in heads {
        for (c, j) in vis.clone().enumerate() {
            before += rows[h][j];
            after += rows[h][j] * (alpha * map[c]).exp();
        }
    }
    after / before
}

/// Sum over heads and visual positions of `after / before`, `0/0 = 1`.
pub fn oracle_literal_ratio(rows: &[Vec<f64>], vis: std::ops::Range<usize>, map: &[f64], alpha: f64, heads: &[usize]) -> f64 {
    let mut r = 0.0;
    for &h in heads {
        for (c, j) in vis.clone().enumerate() {
            let before = rows[h][j];
            let after = before * (alpha * map[c]).exp();
            r += if before == 0.0 && after == 0.0 { 1.0 } else { after / before };
        }
    }
    r
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}
