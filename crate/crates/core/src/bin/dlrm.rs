use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dlrm_core::comms::TransportKind;
use dlrm_core::costmodel::{crossover_ranks, CommPlan, ScalingMode, MIB};
use dlrm_core::embedding::UpdateStrategy;
use dlrm_core::harness::{self, parse_config_file, IterationReport, RunSpec};
use dlrm_core::model::CommVariant;
use dlrm_core::optim::PrecisionMode;
use dlrm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dlrm", version, about = "Hybrid-parallel DLRM training benchmark")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Cmd>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a benchmark (the default when no subcommand is given).
    Run(RunArgs),
    /// Speedup and efficiency of one report over another.
    Compare { baseline: PathBuf, candidate: PathBuf },
    /// Predicted communication volumes for a configuration.
    Costmodel {
        #[arg(long, default_value = "mini-small")]
        config: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ranks: Vec<usize>,
        #[arg(long, default_value = "strong")]
        scaling: ScalingMode,
    },
    /// List the built-in configurations.
    Presets,
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        spec_file: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        summary_out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Preset name or TOML config file.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long)]
    scaling: Option<ScalingMode>,
    /// inproc or tcp.
    #[arg(long)]
    transport: Option<TransportKind>,
    /// scatterlist, fused or alltoall.
    #[arg(long)]
    comm_variant: Option<CommVariant>,
    /// atomic, locked or racefree.
    #[arg(long)]
    update_strategy: Option<UpdateStrategy>,
    /// fp32 or bf16split.
    #[arg(long)]
    dtype: Option<PrecisionMode>,
    /// Wait for every gradient allreduce as soon as it is issued.
    #[arg(long)]
    blocking: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Compute threads per rank.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    comm_workers: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// uniform or clustered.
    #[arg(long)]
    distribution: Option<harness::IndexDistribution>,
    /// Rank 0 address for TCP runs; port 0 picks a free port.
    #[arg(long)]
    rendezvous: Option<String>,
    #[arg(long)]
    mem_limit_gb: Option<f64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn to_spec(&self) -> Result<RunSpec> {
        let mut spec = RunSpec::default();
        if let Some(c) = &self.config {
            spec.config = c.clone();
            if harness::preset(c).is_err() {
                let path = std::path::Path::new(c);
                if !path.exists() {
                    return Err(Error::Config(format!("'{c}' is neither a preset nor a file")));
                }
                let file = parse_config_file(&std::fs::read_to_string(path)?)?;
                spec.apply_file_keys(&file.run)?;
            }
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { spec.$f = v; })* };
        }
        set!(
            ranks,
            scaling,
            transport,
            comm_variant,
            update_strategy,
            dtype,
            iters,
            warmup,
            seed,
            threads,
            comm_workers,
            lr,
            distribution,
            rendezvous
        );
        if self.blocking {
            spec.blocking = true;
        }
        if let Some(gb) = self.mem_limit_gb {
            spec.mem_limit_bytes = (gb * (1u64 << 30) as f64) as u64;
        }
        if self.threads.is_none() {
            let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
            spec.threads = (cores / spec.ranks.max(1)).max(1);
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn write_out(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn print_summary(r: &IterationReport) {
    let m = r.loss_trace.len();
    eprintln!(
        "{} ranks={} GN={} iter {:.2} ms (p50 {:.2}, p95 {:.2}) {:.0} samples/s loss {:.5} -> {:.5}",
        r.spec.config,
        r.ranks,
        r.global_batch,
        r.iteration_ms.mean,
        r.iteration_ms.p50,
        r.iteration_ms.p95,
        r.throughput_samples_per_s,
        r.loss_trace.first().copied().unwrap_or(f32::NAN),
        r.loss_trace.get(m.wrapping_sub(1)).copied().unwrap_or(f32::NAN),
    );
}

fn read_report(path: &PathBuf) -> Result<IterationReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn costmodel(config: &str, ranks: &[usize], scaling: ScalingMode) -> Result<()> {
    let spec = RunSpec {
        config: config.to_string(),
        ..RunSpec::default()
    };
    let cfg = spec.model_config()?;
    println!(
        "ranks,global_batch,allreduce_mib,allreduce_mib_per_rank,alltoall_mib,alltoall_mib_per_rank,msg_kib,regime"
    );
    for &r in ranks {
        let p = CommPlan::new(&cfg, r, scaling);
        println!(
            "{r},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:?}",
            p.global_batch,
            p.allreduce_elements as f64 * 4.0 / MIB,
            p.allreduce_bytes_per_rank / MIB,
            p.alltoall_total_bytes as f64 / MIB,
            p.alltoall_bytes_per_rank / MIB,
            p.alltoall_msg_bytes / 1024.0,
            p.regime()
        );
    }
    match crossover_ranks(&cfg, scaling, cfg.tables) {
        Some(r) => eprintln!("becomes allreduce-bound at {r} ranks"),
        None => eprintln!("alltoall-bound up to {} ranks", cfg.tables),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        None => run_bench(&cli.run),
        Some(Cmd::Run(args)) => run_bench(&args),
        Some(Cmd::Compare { baseline, candidate }) => {
            let row = harness::compare_reports(&read_report(&baseline)?, &read_report(&candidate)?)?;
            println!("{}", serde_json::to_string_pretty(&row)?);
            Ok(())
        }
        Some(Cmd::Costmodel { config, ranks, scaling }) => costmodel(&config, &ranks, scaling),
        Some(Cmd::Presets) => {
            for name in harness::PRESET_NAMES {
                let c = harness::preset(name)?;
                println!(
                    "{name}: S={} E={} M={} P={} GN={} LN={} bottom={:?} top={:?}",
                    c.tables, c.dim, c.rows, c.lookups, c.gn, c.ln, c.bottom_mlp, c.top_mlp
                );
            }
            Ok(())
        }
        Some(Cmd::Worker {
            spec_file,
            rank,
            summary_out,
        }) => {
            let spec: RunSpec = serde_json::from_str(&std::fs::read_to_string(spec_file)?)?;
            let summary = harness::run_rank_tcp(&spec, rank)?;
            Ok(std::fs::write(summary_out, serde_json::to_vec(&summary)?)?)
        }
    }
}

fn run_bench(args: &RunArgs) -> Result<()> {
    let spec = args.to_spec()?;
    let report = harness::run_benchmark(&spec)?;
    print_summary(&report);
    write_out(args.out.as_ref(), &serde_json::to_string_pretty(&report)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
