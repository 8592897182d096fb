use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ytdma::allocator::{optimize, solve_model, PatternSolution};
use ytdma::paths::{enumerate_path_models, patterns_for, PathModel};
use ytdma::report::{
    enumerate_table, per_node_table, simulation_table, slot_columns, slot_table, summary_rows, summary_table, Table,
    SUMMARY_COLUMNS,
};
use ytdma::sim::{compare, compare_overall, simulate};
use ytdma::timeline::{build_timeline, Timeline};
use ytdma::topology::{derive_conflicts, validate_topology, ConflictSet, Topology, TopologyConfig};

const CONFIG_DIR_ENV: &str = "YTDMA_CONFIG_DIR";

/// Slot allocation for Y-shaped three-gateway sensor backbones.
#[derive(Parser, Debug)]
#[command(name = "ytdma", version)]
struct Cli {
    /// Topology file; relative paths not found here are looked up in $YTDMA_CONFIG_DIR.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Write data here instead of stdout; metadata goes to <output>.meta.json.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Override the cycle length from the config.
    #[arg(long, global = true)]
    cycle_slots: Option<u32>,
    /// Only consider models keeping the third gateway's branch whole.
    #[arg(long, global = true)]
    fixed_z: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List path models and their pattern counts.
    Enumerate,
    /// Solve the patterns of one path model.
    Solve {
        /// Model name such as 3-2-3.
        #[arg(long)]
        model: String,
        /// Gateway id of the branch without a separation link (default: third gateway).
        #[arg(long)]
        no_sep_branch: Option<u32>,
        #[arg(long)]
        pattern: Option<u8>,
        /// Write the slot grid here.
        #[arg(long)]
        emit_timeline: Option<PathBuf>,
        /// Print the slot table instead of the summary.
        #[arg(long)]
        report: bool,
    },
    /// Solve every model and pattern, best first.
    Optimize {
        #[arg(long)]
        top: Option<usize>,
    },
    /// Replay a solved schedule over lossy links.
    Simulate {
        /// Defaults to the best-ranked solution.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        no_sep_branch: Option<u32>,
        #[arg(long)]
        pattern: Option<u8>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Let a transmitter reuse a slot for its next packet when it lacks the scheduled one.
        #[arg(long)]
        reuse: bool,
    },
    /// Slot tables and ranked summaries for one or more configs.
    Report {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value = "3-2-3")]
        model: String,
        #[arg(long)]
        no_sep_branch: Option<u32>,
        /// Cycle lengths to tabulate, comma separated (default: the config's).
        #[arg(long, value_delimiter = ',')]
        cycles: Vec<u32>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn failed(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

struct Loaded {
    stem: String,
    topology: Topology,
    conflicts: ConflictSet,
}

fn load(path: &Path, cycle_slots: Option<u32>) -> Result<Loaded, Failure> {
    let path = resolve(path);
    let mut cfg = TopologyConfig::from_path(&path).map_err(|e| usage(e.to_string()))?;
    if let Some(t) = cycle_slots {
        if t == 0 {
            return Err(usage("--cycle-slots must be at least 1"));
        }
        cfg.cycle_slots = t;
    }
    let topology = validate_topology(&cfg).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let conflicts = derive_conflicts(&topology);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Loaded {
        stem,
        topology,
        conflicts,
    })
}

fn single_config(cli: &Cli) -> Result<Loaded, Failure> {
    match cli.config.as_slice() {
        [one] => load(one, cli.cycle_slots),
        [] => Err(usage("--config is required")),
        _ => Err(usage("this subcommand takes exactly one --config")),
    }
}

fn find_model(topo: &Topology, name: &str, branch: Option<u32>) -> Result<PathModel, Failure> {
    let branch = branch.unwrap_or(topo.gateways()[2].0);
    enumerate_path_models(topo, false)
        .into_iter()
        .find(|m| m.name == name && m.no_sep_branch.0 == branch)
        .ok_or_else(|| usage(format!("no model {name} with unseparated branch {branch}")))
}

fn solve_selected(l: &Loaded, model: &PathModel, pattern: Option<u8>) -> Result<Vec<PatternSolution>, Failure> {
    let t = l.topology.cycle_slots();
    if patterns_for(model, &l.conflicts).is_empty() {
        return Err(failed(format!("model {} has no conflict-free pattern", model.key())));
    }
    let sols = solve_model(&l.topology, model, &l.conflicts, t).map_err(|e| failed(e.to_string()))?;
    match pattern {
        None => Ok(sols),
        Some(p) => {
            let s: Vec<_> = sols.into_iter().filter(|s| s.pattern.id == p).collect();
            if s.is_empty() {
                Err(usage(format!("model {} has no pattern {p}", model.key())))
            } else {
                Ok(s)
            }
        }
    }
}

fn render(format: Format, table: &Table, json: Value) -> String {
    match format {
        Format::Csv => table.to_csv(),
        Format::Json => serde_json::to_string_pretty(&json).expect("serializable") + "\n",
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))
}

fn emit(cli: &Cli, data: String, meta: Value) -> Result<(), Failure> {
    match &cli.output {
        None => {
            print!("{data}");
            Ok(())
        }
        Some(path) => {
            write(path, &data)?;
            let mut side = path.clone().into_os_string();
            side.push(".meta.json");
            write(
                Path::new(&side),
                &(serde_json::to_string_pretty(&meta).expect("serializable") + "\n"),
            )
        }
    }
}

fn meta(cli: &Cli, command: &str, extra: Value) -> Value {
    let configs: Vec<String> = cli.config.iter().map(|p| resolve(p).display().to_string()).collect();
    json!({
        "tool": "ytdma",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "configs": configs,
        "format": format!("{:?}", cli.format).to_lowercase(),
        "fixed_z": cli.fixed_z,
        "details": extra,
    })
}

fn timeline_path(base: &Path, pattern: u8, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}_p{pattern}.{}", ext.to_string_lossy()),
        None => format!("{stem}_p{pattern}"),
    };
    base.with_file_name(name)
}

fn timeline_for(l: &Loaded, model: &PathModel, sol: &PatternSolution) -> Result<Timeline, Failure> {
    if !sol.allocation.feasible {
        return Err(failed(format!(
            "{} pattern {} is infeasible",
            sol.model, sol.pattern.id
        )));
    }
    build_timeline(model, sol, &l.conflicts, sol.cycle_slots).map_err(|e| failed(e.to_string()))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Enumerate => {
            let l = single_config(cli)?;
            let models: Vec<(PathModel, usize)> = enumerate_path_models(&l.topology, cli.fixed_z)
                .into_iter()
                .map(|m| {
                    let n = patterns_for(&m, &l.conflicts).len();
                    (m, n)
                })
                .collect();
            let table = enumerate_table(&models);
            let js = json!({ "models": table.to_json() });
            emit(cli, render(cli.format, &table, js), meta(cli, "enumerate", json!({})))
        }
        Command::Solve {
            model,
            no_sep_branch,
            pattern,
            emit_timeline,
            report,
        } => {
            let l = single_config(cli)?;
            let m = find_model(&l.topology, model, *no_sep_branch)?;
            let sols = solve_selected(&l, &m, *pattern)?;
            let summary = summary_table(&l.stem, &sols);
            let slots = slot_table(&slot_columns(&m, &l.topology, &l.conflicts), &sols);
            let per_node: Vec<Value> = sols
                .iter()
                .map(|s| json!({ "pattern": s.pattern.id, "per_node": per_node_table(s, &l.topology).to_json() }))
                .collect();
            let js = json!({
                "summary": summary.to_json(),
                "slot_table": slots.to_json(),
                "per_node": per_node,
            });
            let table = if *report { &slots } else { &summary };
            emit(
                cli,
                render(cli.format, table, js),
                meta(
                    cli,
                    "solve",
                    json!({ "model": m.key(), "cycle_slots": l.topology.cycle_slots() }),
                ),
            )?;
            if let Some(base) = emit_timeline {
                for s in &sols {
                    let tl = timeline_for(&l, &m, s)?;
                    write(&timeline_path(base, s.pattern.id, sols.len() > 1), &tl.to_grid())?;
                }
            }
            match sols.iter().find(|s| !s.allocation.feasible) {
                Some(s) => Err(failed(format!("{} pattern {} is infeasible", s.model, s.pattern.id))),
                None => Ok(()),
            }
        }
        Command::Optimize { top } => {
            let l = single_config(cli)?;
            let t = l.topology.cycle_slots();
            let mut ranked = optimize(&l.topology, t, cli.fixed_z).map_err(|e| failed(e.to_string()))?;
            if let Some(n) = top {
                ranked.truncate(*n);
            }
            let table = summary_table(&l.stem, &ranked);
            let js = json!({ "summary": table.to_json() });
            emit(
                cli,
                render(cli.format, &table, js),
                meta(cli, "optimize", json!({ "cycle_slots": t })),
            )
        }
        Command::Simulate {
            model,
            no_sep_branch,
            pattern,
            trials,
            seed,
            reuse,
        } => {
            let l = single_config(cli)?;
            let t = l.topology.cycle_slots();
            if *trials == 0 {
                return Err(usage("--trials must be at least 1"));
            }
            let (m, sol) = match model {
                Some(name) => {
                    let m = find_model(&l.topology, name, *no_sep_branch)?;
                    let mut sols = solve_selected(&l, &m, *pattern)?;
                    sols.sort_by(|a, b| b.com_product().total_cmp(&a.com_product()));
                    let best = sols.remove(0);
                    (m, best)
                }
                None => {
                    let best = optimize(&l.topology, t, cli.fixed_z)
                        .map_err(|e| failed(e.to_string()))?
                        .into_iter()
                        .next()
                        .ok_or_else(|| failed("no schedulable model"))?;
                    let m = enumerate_path_models(&l.topology, false)
                        .into_iter()
                        .find(|m| m.key() == best.model)
                        .expect("ranked model exists");
                    (m, best)
                }
            };
            let tl = timeline_for(&l, &m, &sol)?;
            let rep = simulate(&tl, &l.topology, *trials, *seed, *reuse).map_err(|e| failed(e.to_string()))?;
            let cmp = compare(&rep, &sol.allocation.per_node).map_err(|e| failed(e.to_string()))?;
            let overall = compare_overall(&rep, sol.com_product());
            let table = simulation_table(&rep, &cmp, &overall);
            let js = json!({
                "model": sol.model,
                "pattern": sol.pattern.id,
                "report": rep,
                "comparison": cmp,
                "overall": overall,
            });
            emit(
                cli,
                render(cli.format, &table, js),
                meta(
                    cli,
                    "simulate",
                    json!({ "model": sol.model, "pattern": sol.pattern.id, "trials": trials, "seed": seed,
                            "reuse": reuse, "rng": rep.rng }),
                ),
            )?;
            if !*reuse && !(cmp.pass && overall.pass) {
                return Err(failed(
                    "empirical rates deviate from the analytic values by more than 3 sigma",
                ));
            }
            Ok(())
        }
        Command::Report {
            out_dir,
            model,
            no_sep_branch,
            cycles,
        } => {
            if cli.config.is_empty() {
                return Err(usage("--config is required"));
            }
            fs::create_dir_all(out_dir).map_err(|e| failed(format!("cannot create {}: {e}", out_dir.display())))?;
            let mut summary = Table::new(&SUMMARY_COLUMNS);
            for path in &cli.config {
                let l = load(path, cli.cycle_slots)?;
                let stem = l.stem.clone();
                let ts = if cycles.is_empty() {
                    vec![l.topology.cycle_slots()]
                } else {
                    cycles.clone()
                };
                let m = find_model(&l.topology, model, *no_sep_branch)?;
                let columns = slot_columns(&m, &l.topology, &l.conflicts);
                let mut slots: Option<Table> = None;
                for &t in &ts {
                    if t == 0 {
                        return Err(usage("cycle lengths must be at least 1"));
                    }
                    let ranked = optimize(&l.topology, t, cli.fixed_z).map_err(|e| failed(e.to_string()))?;
                    summary_rows(&mut summary, &stem, &ranked);
                    let sols = solve_model(&l.topology, &m, &l.conflicts, t).map_err(|e| failed(e.to_string()))?;
                    let mut part = slot_table(&columns, &sols);
                    part.columns.insert(0, "cycle_slots".into());
                    for r in &mut part.rows {
                        r.insert(0, t.into());
                    }
                    match &mut slots {
                        None => slots = Some(part),
                        Some(s) => s.rows.extend(part.rows),
                    }
                }
                let slots = slots.expect("at least one cycle length");
                write(&out_dir.join(format!("slots_{stem}.csv")), &slots.to_csv())?;
                write(
                    &out_dir.join(format!("slots_{stem}.json")),
                    &(serde_json::to_string_pretty(&json!({ "model": m.key(), "slot_table": slots.to_json() }))
                        .expect("serializable")
                        + "\n"),
                )?;
            }
            write(&out_dir.join("summary.csv"), &summary.to_csv())?;
            write(
                &out_dir.join("summary.json"),
                &(serde_json::to_string_pretty(&json!({ "summary": summary.to_json() })).expect("serializable") + "\n"),
            )?;
            write(
                &out_dir.join("report.meta.json"),
                &(serde_json::to_string_pretty(&meta(cli, "report", json!({ "model": model, "cycles": cycles })))
                    .expect("serializable")
                    + "\n"),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ytdma: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
