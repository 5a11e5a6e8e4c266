use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::{gift_decode, greedy_decode, DecodeOptions, Prompt};
use crate::error::{GiftError, Result};
use crate::model::Model;
use crate::steering::{SteeringConfig, SteeringMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmup: usize,
    pub tokens: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { runs: 15, warmup: 2, tokens: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub prompts: usize,
    pub runs: usize,
    pub tokens: usize,
    pub greedy_median_ns: u64,
    pub off_median_ns: u64,
    pub gift_median_ns: u64,
    pub gift_ratio: f64,
    pub off_ratio: f64,
    /// Prompts that were actually steered (the rest fell back).
    pub steered_prompts: usize,
}

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

#[derive(Clone, Copy)]
enum Arm {
    Greedy,
    Off,
    Gift,
}

/// Median wall-clock of greedy, `off` and the configured steering over all
/// prompts. Arms are interleaved and their order rotated each run so slow
/// drift hits all of them alike. Every run decodes exactly `tokens` tokens.
pub fn bench_latency(model: &Model, prompts: &[Prompt], cfg: &SteeringConfig, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.runs < 10 {
        return Err(GiftError::Config(format!("latency needs at least 10 runs, got {}", opts.runs)));
    }
    if prompts.is_empty() {
        return Err(GiftError::EmptyInput("bench prompts"));
    }
    let dopts = DecodeOptions { max_new_tokens: opts.tokens, stop_at_eos: false, capture: false };
    let off_cfg = SteeringConfig { mode: SteeringMode::Off, ..cfg.clone() };
    let mut steered_prompts = 0;

    let run_arm = |arm: Arm, steered: &mut usize| -> Result<u64> {
        let t = Instant::now();
        for p in prompts {
            let n = match arm {
                Arm::Greedy => greedy_decode(model, &p.sequence, &dopts)?.tokens.len(),
                Arm::Off => gift_decode(model, p, &off_cfg, None, &dopts)?.result.tokens.len(),
                Arm::Gift => {
                    let o = gift_decode(model, p, cfg, None, &dopts)?;
                    *steered += usize::from(o.steered);
                    o.result.tokens.len()
                }
            };
            debug_assert_eq!(n, opts.tokens);
        }
        Ok(t.elapsed().as_nanos() as u64)
    };

    let arms = [Arm::Greedy, Arm::Off, Arm::Gift];
    let mut scratch = 0;
    for _ in 0..opts.warmup {
        for arm in arms {
            run_arm(arm, &mut scratch)?;
        }
    }
    let mut times = [Vec::new(), Vec::new(), Vec::new()];
    for r in 0..opts.runs {
        for k in 0..3 {
            let idx = (k + r) % 3;
            let mut steered = 0;
            times[idx].push(run_arm(arms[idx], &mut steered)?);
            if idx == 2 && r == 0 {
                steered_prompts = steered;
            }
        }
    }
    let greedy = median(&mut times[0]);
    let off = median(&mut times[1]);
    let gift = median(&mut times[2]);
    Ok(BenchReport {
        prompts: prompts.len(),
        runs: opts.runs,
        tokens: opts.tokens,
        greedy_median_ns: greedy,
        off_median_ns: off,
        gift_median_ns: gift,
        gift_ratio: gift as f64 / greedy as f64,
        off_ratio: off as f64 / greedy as f64,
        steered_prompts,
    })
}
