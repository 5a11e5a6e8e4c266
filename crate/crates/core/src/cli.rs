//! Command-line front end. [`dispatch`] parses arguments, runs one
//! subcommand and returns the process exit code.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (bad input file, degenerate input), 3 internal error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::atn1;
use crate::decoder::{gift_decode, DecodeOptions, Prompt, Transcript};
use crate::error::{GiftError, Result};
use crate::harness::diagnose::{diagnose_layers, FUSION_THRESHOLD};
use crate::harness::fixtures::{self, fixture_prompt, gen_fixtures, FixtureParams, FixtureShape};
use crate::harness::{bench_latency, emit_report, eval_saliency, BenchOptions, MetricReport, ReportFormat};
use crate::model::{AttentionTensor, Model, ModelConfig, Scene, SegmentLayout};
use crate::saliency::{shift_saliency, static_saliency, SaliencyMethod, SaliencyOptions};
use crate::steering::{parse_layer_set, FusionDiagnostic, HeadSelection, RatioKind, SteeringConfig, SteeringMode};
use crate::tokenizer::{analyze, select_info_rich, InfoRichMask};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Everything a run can be configured with. Layering: built-in defaults,
/// then `--config FILE`, then individual flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub steering: SteeringConfig,
    pub max_new_tokens: usize,
    pub threshold: f64,
    pub jobs: Option<usize>,
    pub fixtures: FixtureParams,
    pub bench: BenchOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steering: SteeringConfig::default(),
            max_new_tokens: 32,
            threshold: FUSION_THRESHOLD,
            jobs: None,
            fixtures: FixtureParams::default(),
            bench: BenchOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.steering.validate(self.model.layers)?;
        self.fixtures.validate(&FixtureShape::from(&self.model))?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(GiftError::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }

    pub fn saliency_options(&self) -> SaliencyOptions {
        SaliencyOptions {
            head_fraction: self.steering.head_fraction,
            literal_predecessor: self.steering.literal_predecessor,
            clip_k: self.steering.clip_k,
        }
    }
}

/// JSON config key and the flag that sets it, one row per leaf.
pub const CONFIG_FLAGS: &[(&str, &str)] = &[
    ("model.layers", "--model-layers"),
    ("model.heads", "--model-heads"),
    ("model.d_model", "--d-model"),
    ("model.d_head", "--d-head"),
    ("model.vocab_size", "--vocab-size"),
    ("model.max_seq_len", "--max-seq-len"),
    ("model.grid_rows", "--grid-rows"),
    ("model.grid_cols", "--grid-cols"),
    ("model.seed", "--seed"),
    ("steering.alpha", "--alpha"),
    ("steering.beta", "--beta"),
    ("steering.saliency_layer", "--saliency-layer"),
    ("steering.fusion_layers", "--fusion-layers"),
    ("steering.head_fraction", "--head-fraction"),
    ("steering.clip_k", "--clip-k"),
    ("steering.mode", "--mode"),
    ("steering.head_selection", "--heads"),
    ("steering.ratio_kind", "--ratio-kind"),
    ("steering.literal_predecessor", "--literal-predecessor"),
    ("max_new_tokens", "--max-new-tokens"),
    ("threshold", "--threshold"),
    ("jobs", "--jobs"),
    ("fixtures.min_box", "--box-min"),
    ("fixtures.max_box", "--box-max"),
    ("fixtures.min_sinks", "--sinks-min"),
    ("fixtures.max_sinks", "--sinks-max"),
    ("fixtures.c_sink_min", "--c-sink-min"),
    ("fixtures.c_sink_max", "--c-sink-max"),
    ("fixtures.ramp_start", "--ramp-start"),
    ("fixtures.ramp_end", "--ramp-end"),
    ("bench.runs", "--runs"),
    ("bench.warmup", "--warmup"),
    ("bench.tokens", "--tokens"),
];

fn config_help() -> String {
    let mut s = String::from("Config file keys and the flags that override them:\n");
    for (key, flag) in CONFIG_FLAGS {
        s.push_str(&format!("  {key:<32} {flag}\n"));
    }
    s
}

/// Parse a kebab- or snake-case enum name through its serde form.
fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_layers(s: &str) -> std::result::Result<Vec<usize>, String> {
    parse_layer_set(s).map_err(|e| e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "gift",
    version,
    about = "Gaze-shift saliency and balanced attention steering on a small seeded decoder"
)]
struct Cli {
    #[command(flatten)]
    common: CommonFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonFlags {
    /// Seed for model weights and fixture generation
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Write the effective configuration as JSON
    #[arg(long = "resolved-config", global = true, value_name = "FILE")]
    resolved_config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    #[arg(long = "model-layers")]
    layers: Option<usize>,
    #[arg(long = "model-heads")]
    heads: Option<usize>,
    #[arg(long = "d-model")]
    d_model: Option<usize>,
    #[arg(long = "d-head")]
    d_head: Option<usize>,
    #[arg(long = "vocab-size")]
    vocab_size: Option<usize>,
    #[arg(long = "max-seq-len")]
    max_seq_len: Option<usize>,
    #[arg(long = "grid-rows")]
    grid_rows: Option<usize>,
    #[arg(long = "grid-cols")]
    grid_cols: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct SaliencyFlags {
    /// Layer whose attention yields the saliency map
    #[arg(long = "saliency-layer")]
    saliency_layer: Option<usize>,
    /// Fraction of heads kept by every head selection, in (0, 1]
    #[arg(long = "head-fraction")]
    head_fraction: Option<f64>,
    /// Sigma-clipping width for shift maps
    #[arg(long = "clip-k")]
    clip_k: Option<f64>,
    /// Compare the first query row with the last visual row too
    #[arg(long = "literal-predecessor", num_args = 0..=1, default_missing_value = "true")]
    literal_predecessor: Option<bool>,
}

#[derive(Args, Debug, Default)]
struct SteerFlags {
    /// Visual amplification strength
    #[arg(long)]
    alpha: Option<f64>,
    /// Query scaling factor
    #[arg(long)]
    beta: Option<f64>,
    /// Steered layers: a..b (inclusive) or a,b,c
    #[arg(long = "fusion-layers", value_parser = parse_layers)]
    fusion_layers: Option<Vec<usize>>,
    /// off | gift | inc-v | cal-v | static-map
    #[arg(long, value_parser = parse_enum::<SteeringMode>)]
    mode: Option<SteeringMode>,
    /// mass | literal-sum
    #[arg(long = "ratio-kind", value_parser = parse_enum::<RatioKind>)]
    ratio_kind: Option<RatioKind>,
    /// per-step | calibrated
    #[arg(long = "heads", value_parser = parse_enum::<HeadSelection>)]
    head_selection: Option<HeadSelection>,
    #[arg(long = "max-new-tokens")]
    max_new_tokens: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct FixtureFlags {
    #[arg(long = "box-min")]
    min_box: Option<usize>,
    #[arg(long = "box-max")]
    max_box: Option<usize>,
    #[arg(long = "sinks-min")]
    min_sinks: Option<usize>,
    #[arg(long = "sinks-max")]
    max_sinks: Option<usize>,
    #[arg(long = "c-sink-min")]
    c_sink_min: Option<f64>,
    #[arg(long = "c-sink-max")]
    c_sink_max: Option<f64>,
    #[arg(long = "ramp-start")]
    ramp_start: Option<f64>,
    #[arg(long = "ramp-end")]
    ramp_end: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct BenchFlags {
    /// Timed runs per arm (at least 10)
    #[arg(long)]
    runs: Option<usize>,
    /// Untimed warmup runs per arm
    #[arg(long)]
    warmup: Option<usize>,
    /// Tokens decoded per prompt
    #[arg(long)]
    tokens: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute a saliency map from an ATN1 attention capture
    Saliency(SaliencyCmd),
    /// Layer diagnostics
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    /// Decode a scene and query, printing a transcript
    Decode(DecodeCmd),
    /// Planted fixtures
    #[command(subcommand)]
    Fixtures(FixturesCmd),
    /// Evaluations
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Benchmarks
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Args, Debug)]
struct SaliencyCmd {
    /// ATN1 capture with dims [layers, heads, n, n]
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Fixture meta JSON giving the layout and info-rich flags
    #[arg(long, value_name = "FILE", conflicts_with_all = ["layout", "query"])]
    meta: Option<PathBuf>,
    /// Segment lengths system,visual,query[,generated]
    #[arg(long, requires = "query")]
    layout: Option<String>,
    /// Query text, tagged to find info-rich tokens
    #[arg(long)]
    query: Option<String>,
    /// static | shift
    #[arg(long, default_value = "shift", value_parser = parse_enum::<SaliencyMethod>)]
    mode: SaliencyMethod,
    /// Map output (ATN1 plus a .json sidecar)
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Optional grayscale PPM of the map over the model grid
    #[arg(long, value_name = "FILE")]
    heatmap: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    saliency: SaliencyFlags,
}

#[derive(Subcommand, Debug)]
enum DiagnoseCmd {
    /// Pick the saliency layer and the fusion band from a calibration batch
    Layers(DiagnoseLayersCmd),
}

#[derive(Args, Debug)]
struct DiagnoseLayersCmd {
    /// Fixture directory supplying scenes and queries
    #[arg(long, value_name = "DIR")]
    fixtures: Option<PathBuf>,
    /// Fixtures to generate from the seed when no directory is given
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Minimum visual proportion of a fusion layer
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long = "max-new-tokens")]
    max_new_tokens: Option<usize>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    saliency: SaliencyFlags,
}

#[derive(Args, Debug)]
struct DecodeCmd {
    #[arg(long, value_name = "FILE")]
    scene: PathBuf,
    #[arg(long)]
    query: String,
    /// Layer report or fusion diagnostic JSON, for --heads calibrated
    #[arg(long, value_name = "FILE")]
    diagnostic: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    saliency: SaliencyFlags,
    #[command(flatten)]
    steer: SteerFlags,
}

#[derive(Subcommand, Debug)]
enum FixturesCmd {
    /// Write planted fixtures: NNNN.atn1, NNNN.scene.json, NNNN.meta.json
    Gen(FixturesGenCmd),
}

#[derive(Args, Debug)]
struct FixturesGenCmd {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    fixture: FixtureFlags,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Static vs shift saliency on planted fixtures
    Planted(EvalPlantedCmd),
}

#[derive(Args, Debug)]
struct EvalPlantedCmd {
    #[arg(long, value_name = "DIR")]
    fixtures: PathBuf,
    /// Report file; format from --format or the extension
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// csv | json
    #[arg(long)]
    format: Option<String>,
    /// Directory for NNNN.static.ppm and NNNN.shift.ppm
    #[arg(long, value_name = "DIR")]
    heatmaps: Option<PathBuf>,
    /// Worker threads for the evaluation
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    saliency: SaliencyFlags,
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Median decode latency of greedy, off and steered runs
    Latency(BenchLatencyCmd),
}

#[derive(Args, Debug)]
struct BenchLatencyCmd {
    /// Fixture directory supplying scenes and queries
    #[arg(long, value_name = "DIR")]
    fixtures: Option<PathBuf>,
    /// Prompts to generate from the seed when no directory is given
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    saliency: SaliencyFlags,
    #[command(flatten)]
    steer: SteerFlags,
    #[command(flatten)]
    bench: BenchFlags,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ModelFlags {
    fn apply(self, m: &mut ModelConfig) {
        set(&mut m.layers, self.layers);
        set(&mut m.heads, self.heads);
        set(&mut m.d_model, self.d_model);
        set(&mut m.d_head, self.d_head);
        set(&mut m.vocab_size, self.vocab_size);
        set(&mut m.max_seq_len, self.max_seq_len);
        set(&mut m.grid_rows, self.grid_rows);
        set(&mut m.grid_cols, self.grid_cols);
    }
}

impl SaliencyFlags {
    fn apply(self, s: &mut SteeringConfig) {
        set(&mut s.saliency_layer, self.saliency_layer);
        set(&mut s.head_fraction, self.head_fraction);
        set(&mut s.clip_k, self.clip_k);
        set(&mut s.literal_predecessor, self.literal_predecessor);
    }
}

impl SteerFlags {
    fn apply(self, c: &mut RunConfig) {
        let s = &mut c.steering;
        set(&mut s.alpha, self.alpha);
        set(&mut s.beta, self.beta);
        set(&mut s.fusion_layers, self.fusion_layers);
        set(&mut s.mode, self.mode);
        set(&mut s.ratio_kind, self.ratio_kind);
        set(&mut s.head_selection, self.head_selection);
        set(&mut c.max_new_tokens, self.max_new_tokens);
    }
}

impl FixtureFlags {
    fn apply(self, f: &mut FixtureParams) {
        set(&mut f.min_box, self.min_box);
        set(&mut f.max_box, self.max_box);
        set(&mut f.min_sinks, self.min_sinks);
        set(&mut f.max_sinks, self.max_sinks);
        set(&mut f.c_sink_min, self.c_sink_min);
        set(&mut f.c_sink_max, self.c_sink_max);
        set(&mut f.ramp_start, self.ramp_start);
        set(&mut f.ramp_end, self.ramp_end);
    }
}

impl BenchFlags {
    fn apply(self, b: &mut BenchOptions) {
        set(&mut b.runs, self.runs);
        set(&mut b.warmup, self.warmup);
        set(&mut b.tokens, self.tokens);
    }
}

fn load_config(common: &CommonFlags) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| GiftError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    set(&mut cfg.model.seed, common.seed);
    Ok(cfg)
}

fn exit_code(err: &GiftError) -> i32 {
    match err {
        GiftError::Config(_) | GiftError::LayerOutOfRange { .. } => EXIT_USAGE,
        e if !e.is_data_error() => EXIT_INTERNAL,
        _ => EXIT_DATA,
    }
}

fn write_json(value: &impl Serialize, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => writeln!(out, "{text}")?,
    }
    Ok(())
}

fn parse_layout(text: &str) -> Result<SegmentLayout> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| GiftError::Config(format!("cannot parse layout {text:?}; use system,visual,query[,generated]")))?;
    match parts[..] {
        [s, v, q] => Ok(SegmentLayout::from_lengths(s, v, q, 0)),
        [s, v, q, g] => Ok(SegmentLayout::from_lengths(s, v, q, g)),
        _ => Err(GiftError::Config(format!("layout {text:?} needs 3 or 4 lengths"))),
    }
}

fn read_diagnostic(path: &Path) -> Result<FusionDiagnostic> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let inner = v.get("diagnostic").cloned().unwrap_or(v);
    Ok(serde_json::from_value(inner)?)
}

fn prompts_from(dir: Option<&Path>, count: usize, cfg: &RunConfig) -> Result<Vec<Prompt>> {
    match dir {
        Some(d) => fixtures::load_prompts(d),
        None => gen_fixtures(cfg.model.seed, count, &FixtureShape::from(&cfg.model), &cfg.fixtures)?
            .iter()
            .map(fixture_prompt)
            .collect(),
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let resolved = cli.common.resolved_config.clone();
    let finish = |cfg: &RunConfig| -> Result<()> {
        cfg.validate()?;
        if let Some(p) = &resolved {
            std::fs::write(p, serde_json::to_string_pretty(cfg)? + "\n")?;
        }
        Ok(())
    };

    match cli.command {
        Command::Saliency(cmd) => {
            cmd.model.apply(&mut cfg.model);
            cmd.saliency.apply(&mut cfg.steering);
            finish(&cfg)?;
            let (layout, mask) = match (&cmd.meta, &cmd.layout, &cmd.query) {
                (Some(meta), _, _) => {
                    let m = fixtures::read_meta(meta)?;
                    (m.layout, m.info_rich)
                }
                (None, Some(layout), Some(query)) => {
                    (parse_layout(layout)?, select_info_rich(&analyze(query)?))
                }
                (None, None, Some(query)) if cmd.mode == SaliencyMethod::Static => {
                    return Err(GiftError::Config(format!("--layout is required with --query {query:?}")));
                }
                _ => return Err(GiftError::Config("give --meta FILE or --layout with --query".into())),
            };
            if mask.len() != layout.query.len {
                return Err(GiftError::InvalidInput(format!(
                    "query has {} tokens but the layout expects {}",
                    mask.len(),
                    layout.query.len
                )));
            }
            let attn = AttentionTensor::from_dense(atn1::read_file(&cmd.input)?, layout)?;
            let layer = cfg.steering.saliency_layer;
            let opts = cfg.saliency_options();
            let map = match cmd.mode {
                SaliencyMethod::Static => static_saliency(&attn, layer, &opts)?,
                SaliencyMethod::Shift => shift_saliency(&attn, layer, &mask, &opts)?,
            };
            map.save(&cmd.output)?;
            if let Some(p) = &cmd.heatmap {
                std::fs::write(p, map.heatmap_ppm(cfg.model.grid_rows, cfg.model.grid_cols)?)?;
            }
            write_json(
                &serde_json::json!({
                    "layer": map.layer,
                    "method": map.method,
                    "output": cmd.output,
                    "all_zero": map.is_all_zero(),
                }),
                None,
                out,
            )
        }
        Command::Diagnose(DiagnoseCmd::Layers(cmd)) => {
            cmd.model.apply(&mut cfg.model);
            cmd.saliency.apply(&mut cfg.steering);
            set(&mut cfg.threshold, cmd.threshold);
            set(&mut cfg.max_new_tokens, cmd.max_new_tokens);
            finish(&cfg)?;
            let model = Model::build(cfg.model.clone())?;
            let prompts = prompts_from(cmd.fixtures.as_deref(), cmd.count, &cfg)?;
            let report = diagnose_layers(&model, &prompts, &cfg.saliency_options(), cfg.max_new_tokens, cfg.threshold)?;
            write_json(&report, cmd.output.as_deref(), out)
        }
        Command::Decode(cmd) => {
            cmd.model.apply(&mut cfg.model);
            cmd.saliency.apply(&mut cfg.steering);
            cmd.steer.apply(&mut cfg);
            finish(&cfg)?;
            let model = Model::build(cfg.model.clone())?;
            let scene = Scene::load(&cmd.scene)?;
            let prompt = Prompt::builtin(&scene, &cmd.query)?;
            let diag = cmd.diagnostic.as_deref().map(read_diagnostic).transpose()?;
            let outcome = gift_decode(&model, &prompt, &cfg.steering, diag.as_ref(), &DecodeOptions::new(cfg.max_new_tokens))?;
            let transcript = Transcript::new(&outcome, serde_json::to_value(&cfg)?);
            write_json(&transcript, cmd.output.as_deref(), out)
        }
        Command::Fixtures(FixturesCmd::Gen(cmd)) => {
            cmd.model.apply(&mut cfg.model);
            cmd.fixture.apply(&mut cfg.fixtures);
            finish(&cfg)?;
            let shape = FixtureShape::from(&cfg.model);
            for id in 0..cmd.count {
                let fx = fixtures::planted_fixture(cfg.model.seed, id, &shape, &cfg.fixtures)?;
                fixtures::validate_fixture(&fx)?;
                fixtures::write_fixture(&cmd.out, &fx)?;
            }
            std::fs::create_dir_all(&cmd.out)?;
            write_json(&serde_json::json!({ "count": cmd.count, "out": cmd.out, "seed": cfg.model.seed }), None, out)
        }
        Command::Eval(EvalCmd::Planted(cmd)) => {
            cmd.saliency.apply(&mut cfg.steering);
            if cmd.jobs.is_some() {
                cfg.jobs = cmd.jobs;
            }
            finish(&cfg)?;
            let format = match (&cmd.format, &cmd.report) {
                (Some(f), _) => f.parse::<ReportFormat>()?,
                (None, Some(p)) if p.extension().is_some_and(|e| e == "csv") => ReportFormat::Csv,
                _ => ReportFormat::Json,
            };
            let fixtures = fixtures::load_fixtures(&cmd.fixtures)?;
            let layer = cfg.steering.saliency_layer;
            let opts = cfg.saliency_options();
            let report = eval_saliency(&fixtures, layer, &opts, cfg.jobs)?;
            if let Some(dir) = &cmd.heatmaps {
                std::fs::create_dir_all(dir)?;
                for fx in &fixtures {
                    let (r, c) = (fx.meta.grid_rows, fx.meta.grid_cols);
                    let st = static_saliency(&fx.attention, layer, &opts)?;
                    std::fs::write(dir.join(format!("{:04}.static.ppm", fx.meta.id)), st.heatmap_ppm(r, c)?)?;
                    if let Ok(sh) = shift_saliency(&fx.attention, layer, &fx.meta.info_rich, &opts) {
                        std::fs::write(dir.join(format!("{:04}.shift.ppm", fx.meta.id)), sh.heatmap_ppm(r, c)?)?;
                    }
                }
            }
            if let Some(p) = &cmd.report {
                emit_report(&MetricReport { eval: Some(report.clone()), bench: None }, format, p)?;
            }
            write_json(&report.summary, None, out)
        }
        Command::Bench(BenchCmd::Latency(cmd)) => {
            cmd.model.apply(&mut cfg.model);
            cmd.saliency.apply(&mut cfg.steering);
            cmd.steer.apply(&mut cfg);
            cmd.bench.apply(&mut cfg.bench);
            finish(&cfg)?;
            let model = Model::build(cfg.model.clone())?;
            let prompts = prompts_from(cmd.fixtures.as_deref(), cmd.count, &cfg)?;
            let report = bench_latency(&model, &prompts, &cfg.steering, &cfg.bench)?;
            if let Some(p) = &cmd.report {
                let format = if p.extension().is_some_and(|e| e == "csv") { ReportFormat::Csv } else { ReportFormat::Json };
                emit_report(&MetricReport { eval: None, bench: Some(report.clone()) }, format, p)?;
            }
            write_json(&report, None, out)
        }
    }
}

/// Run the CLI with explicit output streams.
pub fn dispatch_to<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let command = Cli::command().after_long_help(config_help());
    let matches = match command.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().ansi().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return EXIT_USAGE;
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli, out))) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
        Err(_) => {
            let _ = writeln!(err, "error: internal failure");
            EXIT_INTERNAL
        }
    }
}

/// Run the CLI against the process's stdout and stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// Info-rich flags for a query string.
pub fn query_mask(query: &str) -> Result<InfoRichMask> {
    Ok(select_info_rich(&analyze(query)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_keys(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    if v.is_object() {
                        leaf_keys(v, &key, out);
                    } else {
                        out.push(key);
                    }
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn every_config_key_has_exactly_one_flag() {
        let mut keys = Vec::new();
        leaf_keys(&serde_json::to_value(RunConfig::default()).unwrap(), "", &mut keys);
        keys.sort();
        let mut table: Vec<String> = CONFIG_FLAGS.iter().map(|(k, _)| k.to_string()).collect();
        table.sort();
        assert_eq!(keys, table);
        let mut flags: Vec<&str> = CONFIG_FLAGS.iter().map(|(_, f)| *f).collect();
        flags.sort();
        flags.dedup();
        assert_eq!(flags.len(), CONFIG_FLAGS.len());
    }

    #[test]
    fn every_config_flag_is_accepted_somewhere() {
        let cmd = Cli::command();
        let mut longs = Vec::new();
        fn walk(c: &clap::Command, out: &mut Vec<String>) {
            for a in c.get_arguments() {
                if let Some(l) = a.get_long() {
                    out.push(format!("--{l}"));
                }
            }
            for s in c.get_subcommands() {
                walk(s, out);
            }
        }
        walk(&cmd, &mut longs);
        for (_, flag) in CONFIG_FLAGS {
            assert!(longs.iter().any(|l| l == flag), "{flag} not accepted");
        }
    }

    #[test]
    fn enum_flags_accept_kebab_case() {
        assert_eq!(parse_enum::<SteeringMode>("inc-v").unwrap(), SteeringMode::IncV);
        assert_eq!(parse_enum::<HeadSelection>("per-step").unwrap(), HeadSelection::PerStep);
        assert_eq!(parse_enum::<RatioKind>("literal_sum").unwrap(), RatioKind::LiteralSum);
        assert!(parse_enum::<SteeringMode>("loud").is_err());
    }

    #[test]
    fn layout_parsing() {
        assert_eq!(parse_layout("1,4,2").unwrap(), SegmentLayout::from_lengths(1, 4, 2, 0));
        assert!(parse_layout("1,4").is_err());
    }
}
