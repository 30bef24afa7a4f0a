//! Benchmark driver: presets, synthetic data, run orchestration and reports.

mod data;
mod presets;
mod report;
mod run;
mod spec;

pub use data::{
    duplicate_rate, generate_synthetic, random_lookups, top_rows_share, IndexDistribution, IndexSampler, SyntheticData,
    ZIPF_EXPONENT,
};
pub use presets::{preset, PRESET_NAMES};
pub use report::{
    compare_reports, label_group, summarize_comms, ByteCheck, CommSummary, IterationReport, RankSummary, ScalingRow,
    Summary, SCHEMA_VERSION,
};
pub use run::{build_report, check_feasible, estimate_bytes, launch_tcp, run_benchmark, run_rank, run_rank_tcp};
pub use spec::{parse_config_file, ConfigFile, RunSpec};
