//! End-to-end acceptance suite. Each criterion prints one `PASS`/`FAIL`
//! line; the test fails at the end if any criterion failed.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use gift::decoder::{gift_decode, greedy_decode, DecodeOptions, Prompt};
use gift::harness::bench::{bench_latency, BenchOptions};
use gift::harness::diagnose::diagnose_layers;
use gift::harness::fixtures::{fixture_prompt, gen_fixtures, FixtureParams, FixtureShape};
use gift::harness::{eval_saliency, FUSION_THRESHOLD};
use gift::model::{HeadRows, Model, ModelConfig, SegmentLayout};
use gift::saliency::{
    choose_saliency_layer, pick_layer, select_heads_shift, select_heads_static, shift_raw, shift_saliency,
    static_saliency, Normalization, SaliencyMap, SaliencyMethod, SaliencyOptions,
};
use gift::steering::{
    amplify_visual, band_from_proportions, compute_ratio, fusion_diagnostic, renormalize, select_fusion_layers,
    FusionDiagnostic, LayerFusion, RatioKind, SteeringConfig, SteeringMode, Steerer,
};
use gift::tensors::softmax_with_bias;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn fixture_prompts(count: usize) -> Vec<Prompt> {
    gen_fixtures(0, count, &FixtureShape::default(), &FixtureParams::default())
        .unwrap()
        .iter()
        .map(|fx| fixture_prompt(fx).unwrap())
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let opts = SaliencyOptions::default();
    let f = opts.head_fraction;
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let caps: Vec<_> = (0..200).map(|s| random_capture(s, 8, 8, layout96())).collect();
    for (n, cap) in caps.iter().enumerate() {
        let t = &cap.attention;
        let lay = *t.layout();
        for l in 0..8 {
            let (heads, raw) = oracle_static_raw(t, l, f);
            check(select_heads_static(t, l, f).unwrap().heads == heads, || format!("static heads, capture {n} layer {l}"))?;
            let d = max_abs_diff(&static_saliency(t, l, &opts).unwrap().scores, &oracle_minmax(&raw));
            worst = worst.max(d);

            let (heads, raw) = oracle_shift_raw(t, l, &cap.query_mask, f);
            let lib_heads = select_heads_shift(t, l, &cap.query_mask, &opts).unwrap().heads;
            check(lib_heads == heads, || format!("shift heads, capture {n} layer {l}"))?;
            let lib_raw = shift_raw(t, l, &cap.query_mask, &opts).unwrap();
            for (x, y) in lib_raw.values.iter().zip(&raw) {
                worst = worst.max((x - y).abs());
            }
            let want = oracle_minmax(&oracle_clip(&raw, opts.clip_k));
            worst = worst.max(max_abs_diff(&shift_saliency(t, l, &cap.query_mask, &opts).unwrap().scores, &want));

            let i = lay.generated.start + rng.random_range(0..lay.generated.len);
            let rows: Vec<Vec<f32>> = (0..8).map(|h| t.row(l, h, i).to_vec()).collect();
            let rows64: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let hr = HeadRows::from_rows(&rows).unwrap();
            let scores: Vec<f32> = (0..lay.visual.len).map(|_| rng.random_range(0.0..=1.0)).collect();
            let s64: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
            let map = SaliencyMap { layer: l, scores, normalization: Normalization::Minmax, method: SaliencyMethod::Shift };
            let alpha = rng.random_range(0.0..6.0);
            let sel = oracle_top_k(&(0..8).map(|h| rows64[h][lay.visual.range()].iter().sum()).collect::<Vec<f64>>(), 4);
            let amp = amplify_visual(&hr, &lay, &map, alpha, &sel).unwrap();
            let got = compute_ratio(&hr, &amp, &lay, &sel, RatioKind::Mass).unwrap();
            let want = oracle_mass_ratio(&rows64, lay.visual.range(), &s64, alpha, &sel);
            worst = worst.max((got - want).abs() / want.max(1.0));
            let got = compute_ratio(&hr, &amp, &lay, &sel, RatioKind::LiteralSum).unwrap();
            let want = oracle_literal_ratio(&rows64, lay.visual.range(), &s64, alpha, &sel);
            worst = worst.max((got - want).abs() / want.max(1.0));
        }
    }
    for group in caps.chunks(4) {
        let batch: Vec<_> = group.iter().map(|c| (&c.attention, &c.output_mask)).collect();
        let diag = fusion_diagnostic(&batch, f).unwrap();
        for (got, (r_v, r_t, ov, ot)) in diag.layers.iter().zip(oracle_fusion(&batch, f)) {
            check(got.heads_ov == ov && got.heads_ot == ot, || format!("fusion heads, layer {}", got.layer))?;
            worst = worst.max((got.r_v - r_v).abs()).max((got.r_t - r_t).abs());
        }
    }
    let elapsed = start.elapsed();
    check(worst <= 1e-6, || format!("max deviation {worst:.3e} > 1e-6"))?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("200 captures, max deviation {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

fn steering_identity(model: &Model) -> Outcome {
    let opts = DecodeOptions::new(32);
    let identity = SteeringConfig { alpha: 0.0, beta: 1.0, ratio_kind: RatioKind::Mass, ..SteeringConfig::default() };
    let off = SteeringConfig { mode: SteeringMode::Off, ..SteeringConfig::default() };
    let mut steered = 0;
    for (n, p) in fixture_prompts(50).iter().enumerate() {
        let greedy = greedy_decode(model, &p.sequence, &opts).unwrap();
        let g = gift_decode(model, p, &identity, None, &opts).unwrap();
        steered += usize::from(g.steered);
        check(g.result.tokens == greedy.tokens, || format!("prompt {n}: alpha=0 tokens differ from greedy"))?;
        let o = gift_decode(model, p, &off, None, &opts).unwrap().result;
        let same = o.tokens == greedy.tokens && o.steps == greedy.steps && o.stopped_at_eos == greedy.stopped_at_eos;
        check(same, || format!("prompt {n}: off differs from greedy"))?;
    }
    Ok(format!("50 prompts identical, {steered} steered at alpha=0"))
}

fn additive_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lay = SegmentLayout::from_lengths(3, 24, 6, 5);
    let n = lay.total_len();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let logits: Vec<f32> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let plain = softmax_with_bias(&logits, &vec![0.0; n], &vec![false; n]).unwrap();
        let scores: Vec<f32> = (0..lay.visual.len).map(|_| rng.random_range(0.0..=1.0)).collect();
        let alpha: f64 = rng.random_range(0.0..8.0);
        let map = SaliencyMap { layer: 0, scores: scores.clone(), normalization: Normalization::Minmax, method: SaliencyMethod::Shift };
        let rows = HeadRows::from_rows(&[plain]).unwrap();
        let amp = amplify_visual(&rows, &lay, &map, alpha, &[0]).unwrap();
        let steered = renormalize(amp.row(0)).unwrap();
        let mut bias = vec![0.0f32; n];
        for (b, s) in bias[lay.visual.range()].iter_mut().zip(&scores) {
            *b = (alpha * *s as f64) as f32;
        }
        let want = softmax_with_bias(&logits, &bias, &vec![false; n]).unwrap();
        for (x, y) in steered.iter().zip(&want) {
            worst = worst.max((*x as f64 - *y as f64).abs());
        }
    }
    check(worst <= 1e-6, || format!("max deviation {worst:.3e} > 1e-6"))?;
    Ok(format!("1000 rows, max deviation {worst:.2e}"))
}

fn sink_robustness() -> Outcome {
    let fxs = gen_fixtures(0, 100, &FixtureShape::default(), &FixtureParams::default()).unwrap();
    let report = eval_saliency(&fxs, 2, &SaliencyOptions::default(), None).unwrap();
    let s = &report.summary;
    let zero_sinks = report.records.iter().all(|r| r.shift_sink_mean == 0.0);
    check(s.wins >= 95, || format!("shift wins {} < 95", s.wins))?;
    check(zero_sinks && s.mean_shift_sink == 0.0, || format!("mean shift sink {:e} != 0", s.mean_shift_sink))?;
    check(s.static_sink_top_decile >= 90, || format!("static sink in top decile {} < 90", s.static_sink_top_decile))?;
    Ok(format!(
        "wins {}/100, shift sink mean 0, static sink top decile {}/100",
        s.wins, s.static_sink_top_decile
    ))
}

fn weighted_center(rows: &HeadRows, heads: &[usize], start: usize, scores: &[f32]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &h in heads {
        for (c, &s) in scores.iter().enumerate() {
            let p = rows.row(h)[start + c] as f64;
            num += p * s as f64;
            den += p;
        }
    }
    num / den
}

fn cal_v_conservation(model: &Model) -> Outcome {
    let cfg = SteeringConfig { mode: SteeringMode::CalV, ..SteeringConfig::default() };
    let opts = DecodeOptions { capture: true, ..DecodeOptions::new(16) };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (n, p) in fixture_prompts(20).iter().enumerate() {
        let out = gift_decode(model, p, &cfg, None, &opts).unwrap();
        let map = out.map.clone().ok_or_else(|| format!("prompt {n}: no saliency map"))?;
        let steerer = Steerer::new(cfg.clone(), map.clone(), None).unwrap();
        let lay = *p.sequence.layout();
        let vis = lay.visual.range();
        for snap in out.result.snapshots.as_ref().unwrap() {
            for lr in &snap.layers {
                let before = lr.original.as_ref().unwrap();
                let (ov, _) = steerer.head_sets(lr.layer, &lay, before).unwrap();
                for &h in &ov {
                    worst = worst.max((lr.used.mass(h, vis.clone()) - before.mass(h, vis.clone())).abs());
                }
                let c0 = weighted_center(before, &ov, lay.visual.start, &map.scores);
                let c1 = weighted_center(&lr.used, &ov, lay.visual.start, &map.scores);
                check(c1 > c0, || {
                    format!("prompt {n} step {} layer {}: center {c1} not above {c0}", snap.step, lr.layer)
                })?;
                checked += 1;
            }
        }
    }
    check(worst <= 1e-6, || format!("visual mass moved by {worst:.3e} > 1e-6"))?;
    Ok(format!("20 prompts, {checked} step-layers, max mass change {worst:.2e}, centers all moved toward the map"))
}

fn truncated_prefill(model: &Model) -> Outcome {
    let cfg = SteeringConfig::default();
    let depth = model.config().layers;
    for (n, p) in fixture_prompts(5).iter().enumerate() {
        let out = gift_decode(model, p, &cfg, None, &DecodeOptions::new(4)).unwrap();
        let want = cfg.saliency_layer + 1;
        check(out.phase1_layers == want && want < depth, || {
            format!("prompt {n}: phase 1 ran {} layers, expected {want} of {depth}", out.phase1_layers)
        })?;
    }
    Ok(format!("phase 1 ran {} of {depth} layers", cfg.saliency_layer + 1))
}

fn latency(model: &Model) -> Outcome {
    let report = bench_latency(model, &fixture_prompts(4), &SteeringConfig::default(), &BenchOptions::default()).unwrap();
    let summary = format!("gift {:.3}x, off {:.3}x over {} runs", report.gift_ratio, report.off_ratio, report.runs);
    check(report.tokens == 32, || format!("decoded {} tokens", report.tokens))?;
    check(report.gift_ratio <= 1.3, || format!("{summary}: gift ratio above 1.3"))?;
    check((0.98..=1.02).contains(&report.off_ratio), || format!("{summary}: off ratio outside [0.98, 1.02]"))?;
    Ok(summary)
}

fn diagnostics_determinism(model: &Model) -> Outcome {
    let prompts = fixture_prompts(50);
    let opts = SaliencyOptions::default();
    let runs: Vec<_> = (0..3).map(|_| diagnose_layers(model, &prompts, &opts, 32, FUSION_THRESHOLD).unwrap()).collect();
    for r in &runs[1..] {
        check(r.saliency_layer == runs[0].saliency_layer && r.fusion_band == runs[0].fusion_band, || {
            "repeated diagnostics disagree".into()
        })?;
    }

    check(pick_layer(&[0.4, 0.9, 0.9]) == Some(1), || "argmax tie should go to layer 1".into())?;
    check(band_from_proportions(&[0.1, 0.35, 0.25], 0.2).unwrap() == vec![1, 2], || "band scan".into())?;
    let synthetic = FusionDiagnostic {
        layers: [0.1, 0.35, 0.25]
            .iter()
            .enumerate()
            .map(|(layer, &r_v)| LayerFusion { layer, r_v, r_t: 0.5, heads_ov: vec![0], heads_ot: vec![1] })
            .collect(),
    };
    check(select_fusion_layers(&synthetic, 0.2).unwrap() == vec![1, 2], || "synthetic fusion band".into())?;
    check(select_fusion_layers(&synthetic, 0.3).unwrap() == vec![1], || "synthetic fusion band at 0.3".into())?;

    let caps: Vec<_> = (0..3).map(|s| random_capture(100 + s, 3, 4, SegmentLayout::from_lengths(2, 9, 5, 3))).collect();
    let batch: Vec<_> = caps.iter().map(|c| (&c.attention, &c.query_mask)).collect();
    let mut sums = [0.0f64; 3];
    for (t, mask) in &batch {
        for (l, s) in sums.iter_mut().enumerate() {
            *s += oracle_shift_raw(t, l, mask, opts.head_fraction).1.iter().sum::<f64>() / 3.0;
        }
    }
    let mut best = 0;
    for l in 1..3 {
        if sums[l] > sums[best] {
            best = l;
        }
    }
    let choice = choose_saliency_layer(&batch, &opts).unwrap();
    check(choice.layer == best, || format!("synthetic layer choice {} != {best}", choice.layer))?;
    Ok(format!(
        "3 runs agree: saliency layer {}, fusion band {:?}; synthetic scans match",
        runs[0].saliency_layer, runs[0].fusion_band
    ))
}

#[test]
fn acceptance() {
    let model = Model::build(ModelConfig::default()).unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 oracle equivalence", Box::new(oracle_equivalence)),
        ("2 steering identity", Box::new(|| steering_identity(&model))),
        ("3 additive equivalence", Box::new(additive_equivalence)),
        ("4 sink robustness", Box::new(sink_robustness)),
        ("5 cal_v mass conservation", Box::new(|| cal_v_conservation(&model))),
        ("6 truncated prefill", Box::new(|| truncated_prefill(&model))),
        ("7 latency", Box::new(|| latency(&model))),
        ("8 diagnostics determinism", Box::new(|| diagnostics_determinism(&model))),
    ];
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout();
    for (name, run) in &criteria {
        let line = match run() {
            Ok(detail) => format!("PASS  {name}: {detail}\n"),
            Err(why) => {
                failed.push(*name);
                format!("FAIL  {name}: {why}\n")
            }
        };
        stdout.write_all(line.as_bytes()).unwrap();
        stdout.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
