//! `matcha`: deployment planner command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use matcha_core::artifacts::{self, render};
use matcha_core::device_map::{refine_latencies, search_mapping};
use matcha_core::model_ir::{load_model, TileConfig};
use matcha_core::pipeline::{assign, run_end_to_end, Approach, RunConfig, DEFAULT_NODE_LIMIT};
use matcha_core::platform::{load_platform, reference_platform, Platform};
use matcha_core::rewrite::{apply_assignment, verify_rewrite};
use matcha_core::sched_mem::{plan_with, validate_plan, PlanOptions};
use matcha_core::sim_exec::{gantt_svg, gantt_text, random_tensors, simulate};
use matcha_core::tile_alloc::SolveMode;
use matcha_core::{enumerate_matches, Error, Graph};

const EXIT_FAILED: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_BUDGET: u8 = 4;

#[derive(Parser)]
#[command(name = "matcha", version, about = "Plan DNN deployment across heterogeneous accelerators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve, rewrite and plan; writes assignment.json, tiledgraph.json and plan.json.
    Compile(CompileArgs),
    /// Replay a plan; writes timeline.json and optionally a Gantt chart.
    Simulate(SimulateArgs),
    /// Validate a plan and check the rewrite numerically.
    Verify(VerifyArgs),
    /// List pattern matches of a model.
    Match(ModelArgs),
    /// Dump per-supernode loop-nest mappings.
    Map(SolveArgs),
    /// Rewrite a model according to an assignment artifact.
    Rewrite(RewriteArgs),
    /// Schedule a tiled graph; writes plan.json.
    Plan(PlanArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// Platform description (built-in two-accelerator platform when omitted).
    #[arg(long)]
    platform: Option<PathBuf>,
    /// Default tile count of every tileable operator.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    tiles: u64,
    #[arg(short = 'o', long = "out", default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApproachArg {
    Optimized,
    LayerAsync,
    SequentialBaseline,
}

#[derive(Args, Clone)]
struct SolveArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "exact")]
    mode: ModeArg,
    /// Wall-clock limit of the exact search in milliseconds.
    #[arg(long)]
    budget_ms: Option<u64>,
    /// Search-node limit of the exact search.
    #[arg(long, default_value_t = DEFAULT_NODE_LIMIT)]
    node_limit: u64,
    #[arg(long, value_enum, default_value = "optimized")]
    approach: ApproachArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep the optimized plan even when an unsplit candidate plans shorter.
    #[arg(long)]
    no_fallback: bool,
}

#[derive(Args)]
struct CompileArgs {
    #[command(flatten)]
    solve: SolveArgs,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Json,
    Text,
    Svg,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    platform: Option<PathBuf>,
    #[arg(short = 'o', long = "out", default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Width of the text Gantt chart in columns.
    #[arg(long, default_value_t = 72)]
    width: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    platform: Option<PathBuf>,
    /// Directory holding tiledgraph.json and plan.json.
    #[arg(short = 'd', long = "dir", default_value = ".")]
    dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative difference for float outputs.
    #[arg(long, default_value_t = 1e-5)]
    rel_tol: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct RewriteArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    platform: Option<PathBuf>,
    #[arg(long)]
    assignment: PathBuf,
    #[arg(short = 'o', long = "out", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    tiled: PathBuf,
    #[arg(long)]
    platform: Option<PathBuf>,
    /// Run one job at a time.
    #[arg(long)]
    sequential: bool,
    #[arg(short = 'o', long = "out", default_value = ".")]
    out: PathBuf,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_input_error() || matches!(e, Error::Deadlock(_)) {
            EXIT_INPUT
        } else if e.is_infeasible() {
            EXIT_INFEASIBLE
        } else {
            EXIT_FAILED
        };
        Failure { code, message: e.to_string() }
    }
}

fn input_failure(message: String) -> Failure {
    Failure { code: EXIT_INPUT, message }
}

type CmdResult = Result<u8, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| input_failure(format!("cannot read {}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure { code: EXIT_FAILED, message: format!("cannot create {}: {e}", dir.display()) })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure { code: EXIT_FAILED, message: format!("cannot write {}: {e}", path.display()) })?;
    Ok(path)
}

fn platform(path: &Option<PathBuf>) -> Result<Platform, Failure> {
    match path {
        Some(p) => Ok(load_platform(&read(p)?)?),
        None => Ok(reference_platform()),
    }
}

fn model(path: &Path) -> Result<Graph, Failure> {
    Ok(load_model(&read(path)?)?)
}

fn run_config(a: &SolveArgs) -> RunConfig {
    RunConfig {
        tiles: TileConfig::uniform(a.model.tiles as usize),
        mode: match a.mode {
            ModeArg::Exact => SolveMode::Exact,
            ModeArg::Greedy => SolveMode::Greedy,
        },
        budget: a.budget_ms.map(Duration::from_millis),
        node_limit: Some(a.node_limit),
        seed: a.seed,
        approach: match a.approach {
            ApproachArg::Optimized => Approach::Optimized,
            ApproachArg::LayerAsync => Approach::LayerAsync,
            ApproachArg::SequentialBaseline => Approach::SequentialBaseline,
        },
        verify: false,
        fallback: !a.no_fallback,
    }
}

fn cmd_compile(a: &CompileArgs) -> CmdResult {
    let s = &a.solve;
    let g = model(&s.model.model)?;
    let plat = platform(&s.model.platform)?;
    let cfg = run_config(s);
    let out = run_end_to_end(&g, &plat, &cfg)?;
    let dir = &s.model.out;
    let mut doc = artifacts::assignment_json(&out.graph, &out.tiles, &out.matches, &out.assignment);
    doc["selected"] = out.selected.as_str().into();
    write(dir, "assignment.json", &render(&doc))?;
    write(dir, "tiledgraph.json", &render(&artifacts::tiled_json(&out.tiled)))?;
    write(dir, "plan.json", &render(&artifacts::plan_json(&out.plan)))?;
    println!("supernodes: {}", out.tiled.supernodes.len());
    println!("helpers: {}", out.tiled.helpers.iter().filter(|h| !h.alias).count());
    println!("model objective: {} cycles", matcha_core::rational::exact_string(&out.assignment.objective));
    println!("makespan: {} cycles", out.plan.makespan_cycles);
    for (approach, makespan) in &out.candidates {
        println!("candidate {:<20} {makespan} cycles{}", approach.as_str(), if *approach == out.selected { " (selected)" } else { "" });
    }
    println!("artifacts written to {}", dir.display());
    if out.budget_exhausted {
        eprintln!("warning: search budget exhausted; the best assignment found so far was written");
        return Ok(EXIT_BUDGET);
    }
    Ok(0)
}

fn utilization_table(tl: &matcha_core::Timeline) -> String {
    let mut s = format!("{:<14} {:>10} {:>10} {:>10} {:>10} {:>10} {:>7}\n", "resource", "kernel", "dispatch", "helper", "dma", "idle", "util");
    for row in &tl.rows {
        let b = tl.breakdown[&row.resource];
        let util = tl.utilization.get(&row.resource).map_or_else(
            || if tl.makespan_cycles == 0 { 0.0 } else { b.dma as f64 / tl.makespan_cycles as f64 },
            |u| *u,
        );
        s.push_str(&format!(
            "{:<14} {:>10} {:>10} {:>10} {:>10} {:>10} {:>6.1}%\n",
            row.resource,
            b.kernel,
            b.dispatch,
            b.helper,
            b.dma,
            b.idle,
            100.0 * util
        ));
    }
    s
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let plan = artifacts::load_plan(&read(&a.plan)?)?;
    let plat = platform(&a.platform)?;
    let tl = simulate(&plan, &plat)?;
    write(&a.out, "timeline.json", &render(&artifacts::timeline_json(&tl)))?;
    println!("makespan: {} cycles", tl.makespan_cycles);
    print!("{}", utilization_table(&tl));
    match a.format {
        Format::Json => {}
        Format::Text => {
            let text = gantt_text(&tl, a.width);
            write(&a.out, "gantt.txt", &text)?;
            print!("{text}");
        }
        Format::Svg => {
            write(&a.out, "gantt.svg", &gantt_svg(&tl))?;
        }
    }
    if !tl.divergent_tasks.is_empty() {
        eprintln!("replay diverges from the plan at tasks {:?}", tl.divergent_tasks);
        return Ok(EXIT_FAILED);
    }
    Ok(0)
}

fn cmd_verify(a: &VerifyArgs) -> CmdResult {
    let g = model(&a.model)?;
    let plat = platform(&a.platform)?;
    let tg = artifacts::load_tiled_graph(&read(&a.dir.join("tiledgraph.json"))?)?;
    let plan = artifacts::load_plan(&read(&a.dir.join("plan.json"))?)?;
    let validation = validate_plan(&plan, &tg, &plat);
    let tiles: TileConfig = TileConfig {
        default_tiles: 1,
        overrides: g.operators().iter().map(|o| (o.name.clone(), 1)).collect(),
    };
    let g = g.with_tiles(&tiles)?;
    let (weights, inputs) = random_tensors(&g, a.seed);
    let rewrite = verify_rewrite(&g, &tg, &inputs, &weights)?;
    let replay = simulate(&plan, &plat);
    let consistent = matches!(&replay, Ok(tl) if tl.makespan_cycles == plan.makespan_cycles && tl.divergent_tasks.is_empty());
    let passed = validation.passed() && rewrite.passes(&g, a.rel_tol) && consistent;
    if a.format == Format::Json {
        print!("{}", render(&artifacts::report_json(&validation, Some(&rewrite), passed)));
    } else {
        for c in &validation.checks {
            println!("{:<20} {}", c.name, if c.passed { "pass" } else { "FAIL" });
            for v in &c.violations {
                println!("  {v}");
            }
        }
        println!("{:<20} {}", "replay", if consistent { "pass" } else { "FAIL" });
        for o in &rewrite.outputs {
            println!(
                "output {:<13} max_abs {:.3e} max_rel {:.3e}{}",
                o.name,
                o.max_abs,
                o.max_rel,
                if o.identical { " (identical)" } else { "" }
            );
        }
        println!("{}", if passed { "verify: pass" } else { "verify: FAIL" });
    }
    Ok(if passed { 0 } else { EXIT_FAILED })
}

fn cmd_match(a: &ModelArgs) -> CmdResult {
    let g = model(&a.model)?;
    let plat = platform(&a.platform)?;
    let g = g.with_tiles(&matcha_core::pipeline::effective_tiles(&g, &TileConfig::uniform(a.tiles as usize)))?;
    let ms = enumerate_matches(&g, &plat);
    print!("{}", render(&artifacts::matches_json(&ms)));
    Ok(0)
}

fn cmd_map(a: &SolveArgs) -> CmdResult {
    let g = model(&a.model.model)?;
    let plat = platform(&a.model.platform)?;
    let (graph, matches, _, assignment) = assign(&g, &plat, &run_config(a))?;
    let tg = apply_assignment(&graph, &matches, &assignment.tiles)?;
    let ms = tg.supernodes.iter().map(|s| search_mapping(s, &tg, &plat)).collect::<Result<Vec<_>, _>>()?;
    let text = render(&artifacts::mappings_json(&ms));
    write(&a.model.out, "mapping.json", &text)?;
    print!("{text}");
    Ok(0)
}

fn cmd_rewrite(a: &RewriteArgs) -> CmdResult {
    let g = model(&a.model)?;
    let plat = platform(&a.platform)?;
    let doc = artifacts::load_assignment(&read(&a.assignment)?)?;
    let cfg = TileConfig { default_tiles: 1, overrides: doc.operator_tiles.iter().cloned().collect() };
    let g = g.with_tiles(&cfg)?;
    let matches = enumerate_matches(&g, &plat);
    if matches.len() != doc.matches.len() {
        return Err(input_failure(format!(
            "assignment lists {} matches, the model and platform yield {}",
            doc.matches.len(),
            matches.len()
        )));
    }
    let mut tiles = vec![0; matches.len()];
    for (id, pattern, nodes, t) in &doc.matches {
        match matches.get(*id) {
            Some(m) if &m.pattern == pattern && &m.nodes == nodes => tiles[*id] = *t,
            _ => return Err(input_failure(format!("assignment match {id} does not correspond to this model and platform"))),
        }
    }
    let tg = apply_assignment(&g, &matches, &tiles)?;
    let path = write(&a.out, "tiledgraph.json", &render(&artifacts::tiled_json(&tg)))?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn cmd_plan(a: &PlanArgs) -> CmdResult {
    let tg = artifacts::load_tiled_graph(&read(&a.tiled)?)?;
    let plat = platform(&a.platform)?;
    let lat = refine_latencies(&tg, &plat)?;
    let p = plan_with(&tg, &lat, &plat, &PlanOptions { sequential: a.sequential, exhaustive: false })?;
    let path = write(&a.out, "plan.json", &render(&artifacts::plan_json(&p)))?;
    println!("makespan: {} cycles", p.makespan_cycles);
    println!("wrote {}", path.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compile(a) => cmd_compile(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Match(a) => cmd_match(a),
        Command::Map(a) => cmd_map(a),
        Command::Rewrite(a) => cmd_rewrite(a),
        Command::Plan(a) => cmd_plan(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
