//! `perfslice`: generate, inspect, query and diagnose sparse performance
//! databases.

mod bench;
mod exit;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use perfslice::frame::{group_aggregate, AggFn, Backend};
use perfslice::ingest::{hardware_concurrency, PruneStrategy};
use perfslice::itermodel::AnchorPolicy;
use perfslice::query::{parse_query, slice_to_frame, Session};
use perfslice::store::{open_database, validate_database, write_database, DbHandle, NodeKind};
use perfslice::synthgen::{
    generate_congestion_scenario, generate_iterative_scenario, presets, GroundTruth, ScenarioConfig,
};
use perfslice::topology::{render_report, ReportFormat};
use perfslice::workflow::{
    congestion_analysis, iteration_analysis, ClusterMethod, CongestionOptions, IterationOptions,
    WorkflowError,
};

use exit::Failure;
use output::{emit_json, emit_table, Format};

#[derive(Parser, Debug)]
#[command(name = "perfslice", version, about = "Selective analysis of sparse performance databases")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Database directory
    #[arg(long, global = true, default_value = "perf.db")]
    db: PathBuf,
    /// Worker threads (default: hardware concurrency)
    #[arg(long, global = true, env = "PERFSLICE_JOBS")]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = BackendArg::Par)]
    backend: BackendArg,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Drop contexts below this fraction of total summary time
    /// (default 0.01 for query/congestion, off for imbalance/iters)
    #[arg(long, global = true)]
    prune_share: Option<f64>,
    /// Drop line-level contexts
    #[arg(long, global = true)]
    drop_lines: bool,
    /// Keep contexts matching GLOB but drop their descendants
    #[arg(long, global = true, value_name = "GLOB")]
    collapse: Vec<String>,
    /// Override the scenario seed (gen)
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BackendArg {
    Seq,
    Par,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Preset {
    GamessTable5,
    AmgCongestion,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ClusterArg {
    Dbscan,
    Kmeans,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Suite {
    Ingest,
    Frame,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GroupBy {
    Rank,
    Ctx,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic database and its ground truth (truth.json)
    Gen {
        /// Scenario config (JSON)
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Output directory (default: --db)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize database metadata
    Info,
    /// Check every stored invariant
    Validate,
    /// Resolve and fetch a query slice
    Query {
        #[arg(long, default_value = "summary")]
        exec: String,
        #[arg(long, default_value = "*")]
        ctx: String,
        #[arg(long, default_value = "cputime:sum (i)")]
        metric: String,
        /// Aggregate the slice (sum and mean of value)
        #[arg(long, value_enum)]
        group_by: Option<GroupBy>,
    },
    /// Per-kernel balance ratio, CVs and execution share
    Imbalance {
        /// GPU metric names to consider (default gker, gxcopy, gimopy)
        #[arg(long)]
        metric: Vec<String>,
        #[arg(long, default_value_t = 0.001)]
        min_share: f64,
        #[arg(long, default_value = "auto")]
        anchor: String,
    },
    /// Iteration model, CV report and savings estimate
    Iters {
        /// auto, root, a context id, or a context name
        #[arg(long, default_value = "auto")]
        anchor: String,
        /// Whole-run time for the speedup estimate (default: longest trace)
        #[arg(long)]
        total_time: Option<f64>,
        #[arg(long, default_value_t = 0.001)]
        min_share: f64,
        /// Also write the model as CSV here
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Bottleneck call site, outlier nodes and their racks
    Congestion {
        #[arg(long, default_value = "MPI_*")]
        callsite: String,
        #[arg(long, value_enum, default_value_t = ClusterArg::Dbscan)]
        cluster: ClusterArg,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 4)]
        min_pts: usize,
    },
    /// Time ingestion or frame operations
    Bench {
        #[arg(long, value_enum, default_value_t = Suite::Ingest)]
        suite: Suite,
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
    },
}

impl Global {
    fn jobs(&self) -> Result<usize, Failure> {
        match self.jobs {
            Some(0) => Err(Failure::config("--jobs must be at least 1")),
            Some(n) => Ok(n),
            None => Ok(hardware_concurrency()),
        }
    }

    fn backend(&self) -> Result<Backend, Failure> {
        Ok(match self.backend {
            BackendArg::Seq => Backend::Sequential,
            BackendArg::Par => Backend::Parallel(self.jobs()?),
        })
    }

    fn prune(&self, default_share: f64) -> Result<Vec<PruneStrategy>, Failure> {
        let share = self.prune_share.unwrap_or(default_share);
        if !(0.0..=1.0).contains(&share) {
            return Err(Failure::config("--prune-share must be within [0, 1]"));
        }
        let mut v = Vec::new();
        if share > 0.0 {
            v.push(PruneStrategy::min_share(share));
        }
        if self.drop_lines {
            v.push(PruneStrategy::DropKind { kind: NodeKind::Line });
        }
        for g in &self.collapse {
            v.push(PruneStrategy::CollapseSubtreeGlob { name_glob: g.clone() });
        }
        Ok(v)
    }

    fn open(&self) -> Result<DbHandle, Failure> {
        open_database(&self.db).map_err(Failure::from)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Gen { scenario, preset, out } => cmd_gen(g, scenario.as_deref(), preset, out),
        Command::Info => cmd_info(g),
        Command::Validate => cmd_validate(g),
        Command::Query {
            exec,
            ctx,
            metric,
            group_by,
        } => cmd_query(g, &exec, &ctx, &metric, group_by),
        Command::Imbalance {
            metric,
            min_share,
            anchor,
        } => cmd_imbalance(g, &metric, min_share, &anchor),
        Command::Iters {
            anchor,
            total_time,
            min_share,
            model_out,
        } => cmd_iters(g, &anchor, total_time, min_share, model_out.as_deref()),
        Command::Congestion {
            callsite,
            cluster,
            k,
            eps,
            min_pts,
        } => {
            let method = match cluster {
                ClusterArg::Dbscan => ClusterMethod::Dbscan { eps, min_pts },
                ClusterArg::Kmeans => ClusterMethod::KMeans { k },
            };
            cmd_congestion(g, callsite, method)
        }
        Command::Bench { suite, sizes, repeat } => match suite {
            Suite::Ingest => bench::ingest(g.open()?, &sizes, repeat, g.jobs()?, g.format),
            Suite::Frame => bench::frame(&sizes, repeat, g.jobs()?, g.format),
        },
    }
}

fn cmd_gen(g: &Global, scenario: Option<&Path>, preset: Option<Preset>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = match (scenario, preset) {
        (_, Some(Preset::GamessTable5)) => ScenarioConfig::Iterative(presets::gamess_table5()),
        (_, Some(Preset::AmgCongestion)) => ScenarioConfig::Congestion(presets::amg_congestion()),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("parsing {}: {e}", path.display())))?
        }
        (None, None) => return Err(Failure::config("give a scenario file or --preset")),
    };
    if let Some(seed) = g.seed {
        *cfg.seed_mut() = seed;
    }
    let (image, truth) = match &cfg {
        ScenarioConfig::Iterative(c) => {
            let (i, t) = generate_iterative_scenario(c).map_err(Failure::config)?;
            (i, GroundTruth::Iterative(t))
        }
        ScenarioConfig::Congestion(c) => {
            let (i, t) = generate_congestion_scenario(c).map_err(Failure::config)?;
            (i, GroundTruth::Congestion(t))
        }
    };
    let dir = out.unwrap_or_else(|| g.db.clone());
    write_database(&image, &dir)?;
    let truth_path = dir.join("truth.json");
    let text = serde_json::to_string_pretty(&truth).map_err(Failure::other)?;
    std::fs::write(&truth_path, text).map_err(Failure::other)?;
    #[derive(Serialize)]
    struct Written<'a> {
        db: &'a Path,
        truth: &'a Path,
        profiles: usize,
        contexts: usize,
        traces: usize,
    }
    let w = Written {
        db: &dir,
        truth: &truth_path,
        profiles: image.profiles.len(),
        contexts: image.meta.cct.len(),
        traces: image.traces.len(),
    };
    match g.format {
        Format::Json => emit_json(&w),
        Format::Csv => {
            println!(
                "wrote {} ({} profiles, {} contexts, {} traces) and {}",
                dir.display(),
                w.profiles,
                w.contexts,
                w.traces,
                truth_path.display()
            );
            Ok(())
        }
    }
}

fn cmd_info(g: &Global) -> Result<(), Failure> {
    let h = g.open()?;
    let meta = h.meta();
    #[derive(Serialize)]
    struct Info {
        profiles: usize,
        rank_profiles: usize,
        contexts: usize,
        max_depth: u32,
        traces: usize,
        metrics: Vec<String>,
        hosts: usize,
        index_bytes: usize,
    }
    let mut hosts: Vec<&str> = meta.rank_profiles().map(|p| p.hostname.as_str()).collect();
    hosts.sort_unstable();
    hosts.dedup();
    let info = Info {
        profiles: h.n_profiles(),
        rank_profiles: meta.rank_profiles().count(),
        contexts: meta.cct.len(),
        max_depth: meta.cct.nodes().iter().map(|n| meta.cct.depth(n.id)).max().unwrap_or(0),
        traces: h.trace_index().len(),
        metrics: meta
            .metrics
            .iter()
            .map(|m| {
                let s = match m.scope {
                    perfslice::store::Scope::Inclusive => "i",
                    perfslice::store::Scope::Exclusive => "e",
                };
                format!("{} ({s})", m.name)
            })
            .collect(),
        hosts: hosts.len(),
        index_bytes: h.index_bytes_parsed(),
    };
    match g.format {
        Format::Json => emit_json(&info),
        Format::Csv => {
            println!("field,value");
            println!("profiles,{}", info.profiles);
            println!("rank_profiles,{}", info.rank_profiles);
            println!("contexts,{}", info.contexts);
            println!("max_depth,{}", info.max_depth);
            println!("traces,{}", info.traces);
            println!("metrics,\"{}\"", info.metrics.join(";"));
            println!("hosts,{}", info.hosts);
            println!("index_bytes,{}", info.index_bytes);
            Ok(())
        }
    }
}

fn cmd_validate(g: &Global) -> Result<(), Failure> {
    let h = g.open()?;
    let report = validate_database(&h);
    match g.format {
        Format::Json => emit_json(&report)?,
        Format::Csv => {
            println!("kind,file,profile_id,position,detail");
            for v in &report.violations {
                println!(
                    "{:?},{},{},{},\"{}\"",
                    v.kind,
                    v.file,
                    v.profile_id.map_or(String::new(), |p| p.to_string()),
                    v.position.map_or(String::new(), |p| p.to_string()),
                    v.detail.replace('"', "\"\"")
                );
            }
        }
    }
    if report.violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::other(format!("{} violations", report.violations.len())))
    }
}

fn cmd_query(g: &Global, exec: &str, ctx: &str, metric: &str, group_by: Option<GroupBy>) -> Result<(), Failure> {
    let q = parse_query(exec, ctx, metric, None).map_err(|e| Failure::from_query(e.into()))?;
    let h = g.open()?;
    let keep = perfslice::ingest::compute_keep_set(&h, &g.prune(0.01)?).map_err(Failure::from_ingest)?;
    let mut session = Session::new(&h, keep, g.jobs()?);
    let plan = session.plan(&q).map_err(Failure::from_query)?;
    if plan.empty {
        eprintln!("warning: query selects nothing");
    }
    let slice = session.fetch_plan(&plan).map_err(Failure::from_query)?;
    let table = slice_to_frame(&slice, &h);
    let table = match group_by {
        None => table,
        Some(by) => {
            let key = match by {
                GroupBy::Rank => "rank",
                GroupBy::Ctx => "ctx_id",
            };
            group_aggregate(
                &table,
                &[key],
                &[("value", AggFn::Sum), ("value", AggFn::Mean), ("value", AggFn::Count)],
                g.backend()?,
            )
            .map_err(Failure::other)?
        }
    };
    emit_table(&table, g.format)
}

fn parse_anchor(h: &DbHandle, s: &str) -> Result<AnchorPolicy, Failure> {
    let cct = &h.meta().cct;
    Ok(match s {
        "auto" => AnchorPolicy::Auto,
        "root" => AnchorPolicy::Explicit(cct.root()),
        _ => match s.parse::<u32>() {
            Ok(id) if cct.contains(id) => AnchorPolicy::Explicit(id),
            Ok(id) => return Err(Failure::config(format!("no context {id}"))),
            Err(_) => AnchorPolicy::Explicit(
                cct.nodes()
                    .iter()
                    .find(|n| n.name == s)
                    .map(|n| n.id)
                    .ok_or_else(|| Failure::config(format!("no context named {s:?}")))?,
            ),
        },
    })
}

fn cmd_imbalance(g: &Global, metrics: &[String], min_share: f64, anchor: &str) -> Result<(), Failure> {
    let h = g.open()?;
    let opts = IterationOptions {
        prune: g.prune(0.0)?,
        anchor: parse_anchor(&h, anchor)?,
        min_share,
        total_time_s: None,
        workers: g.jobs()?,
        gpu_metrics: (!metrics.is_empty()).then(|| metrics.to_vec()),
    };
    let rows = match iteration_analysis(&h, &opts) {
        Ok(a) => a.imbalance,
        Err(WorkflowError::NoGpuMetric) => Vec::new(),
        Err(e) => return Err(Failure::from_workflow(e)),
    };
    match g.format {
        Format::Json => emit_json(&rows),
        Format::Csv => output::emit_csv_rows(&rows),
    }
}

fn cmd_iters(
    g: &Global,
    anchor: &str,
    total_time: Option<f64>,
    min_share: f64,
    model_out: Option<&Path>,
) -> Result<(), Failure> {
    let h = g.open()?;
    let opts = IterationOptions {
        prune: g.prune(0.0)?,
        anchor: parse_anchor(&h, anchor)?,
        min_share,
        total_time_s: total_time,
        workers: g.jobs()?,
        gpu_metrics: None,
    };
    let a = iteration_analysis(&h, &opts).map_err(Failure::from_workflow)?;
    let model_table = a.model.to_table();
    if let Some(path) = model_out {
        let f = std::fs::File::create(path).map_err(Failure::other)?;
        model_table.write_csv(f).map_err(Failure::other)?;
    }
    match g.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                #[serde(flatten)]
                analysis: &'a perfslice::workflow::IterationAnalysis,
                model: serde_json::Value,
            }
            emit_json(&Out {
                analysis: &a,
                model: model_table.to_json(),
            })
        }
        Format::Csv => {
            println!("# anchor: {} ({})", a.anchor_name, a.anchor);
            println!("# traces: {}, iterations: {}", a.n_traces, a.n_iterations);
            println!("# savings");
            output::emit_csv_rows(&a.savings.rows)?;
            println!(
                "# total_savings_s: {:.3}, speedup_frac: {:.4}",
                a.savings.total_savings_s, a.savings.speedup_frac
            );
            println!("# cv report");
            output::emit_csv_rows(&a.imbalance)?;
            if model_out.is_none() {
                println!("# tri model");
                emit_table(&model_table, Format::Csv)?;
            }
            Ok(())
        }
    }
}

fn cmd_congestion(g: &Global, callsite: String, cluster: ClusterMethod) -> Result<(), Failure> {
    let h = g.open()?;
    let opts = CongestionOptions {
        prune: g.prune(0.01)?,
        callsite_glob: callsite,
        cluster,
        workers: g.jobs()?,
    };
    let a = congestion_analysis(&h, &opts).map_err(Failure::from_workflow)?;
    match g.format {
        Format::Json => emit_json(&a),
        Format::Csv => {
            println!("# call sites");
            #[derive(Serialize)]
            struct Site<'a> {
                ctx_id: u32,
                name: &'a str,
                summary_time_s: f64,
                balance_ratio: f64,
            }
            let sites: Vec<Site> = a
                .callsites
                .iter()
                .map(|c| Site {
                    ctx_id: c.ctx_id,
                    name: &c.name,
                    summary_time_s: c.summary_time_s,
                    balance_ratio: c.balance_ratio,
                })
                .collect();
            output::emit_csv_rows(&sites)?;
            println!(
                "# bottleneck: {} (balance ratio {:.3})",
                a.bottleneck.call_chain.join(" -> "),
                a.bottleneck.balance_ratio
            );
            println!(
                "# groups: {} normal / {} outlier nodes, off-block vs call-site clustering: {}",
                a.group_sizes[0], a.group_sizes[1], a.off_block
            );
            print!(
                "{}",
                String::from_utf8_lossy(&render_report(&a.report, ReportFormat::Text))
            );
            Ok(())
        }
    }
}
