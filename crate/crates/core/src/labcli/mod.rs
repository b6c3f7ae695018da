//! Experiment configuration, checkpoints, the staged pipeline, reports
//! and the `csplab` command line.

mod checkpoint;
mod cli;
mod config;
mod pipeline;
mod report;

pub use checkpoint::{encode, load_checkpoint, read_meta, save_checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use cli::{exit_code, run_cli};
pub use config::{
    default_strategies, BenchSection, DomainSection, ExperimentConfig, FinetuneSection, Precision, PretrainSection, ORIGIN,
};
pub use pipeline::{
    slug, CellResult, Domain, EpochRow, Lab, LabData, LossPoint, ProbeSummary, PretrainSummary, TimingRow,
};
pub use report::{
    ablation_csv, collect_cells, curves, median, report_csv, report_dir, summarize, table2_csv, timing_csv,
    write_report, StrategySummary,
};
