//! Planted fixtures, saliency evaluation, latency benchmarks and reports.

pub mod bench;
pub mod diagnose;
pub mod eval;
pub mod fixtures;
pub mod report;

pub use bench::{bench_latency, BenchOptions, BenchReport};
pub use diagnose::{diagnose_layers, LayerReport, FUSION_THRESHOLD};
pub use eval::{eval_saliency, evaluate_fixture, EvalRecord, EvalReport, EvalSummary};
pub use fixtures::{
    gen_fixtures, planted_fixture, validate_fixture, FixtureMeta, FixtureParams, FixtureShape, GridBox, PlantedFixture,
};
pub use report::{emit_report, read_csv, write_csv, MetricReport, ReportFormat};
