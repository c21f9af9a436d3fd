use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use loopbound::interp;
use loopbound::its::{self, Int, TransitionSystem};
use loopbound::pipeline::{self, Pipeline};
use loopbound::solver::{self, BoundVal};
use loopbound::termination::Verdict;

#[derive(Parser)]
#[command(name = "loopbound", about = "Resource-bound analysis for integer transition systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a transition system file and report a cost bound.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Input .its file
    file: PathBuf,
    /// Print the transformed (hierarchically loop-nested) system
    #[arg(long)]
    emit_transformed: bool,
    /// Print the generated cost relation system
    #[arg(long)]
    emit_crs: bool,
    /// Embed ranking functions into the emitted CRS
    #[arg(long)]
    embed_rf: bool,
    /// Emit the precondition-guarded CRS on conditional verdicts
    #[arg(long)]
    conditional: bool,
    /// Fuzz the bound against this many interpreter runs
    #[arg(long, value_name = "runs")]
    check_soundness: Option<u64>,
    /// Seed for soundness fuzzing
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Machine-readable report
    #[arg(long)]
    json: bool,
    /// Wall-clock budget in seconds
    #[arg(long, default_value_t = 300)]
    timeout: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Analyze(args) = cli.command;
    match run(&args) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {}", msg);
            ExitCode::from(1)
        }
    }
}

fn run(args: &AnalyzeArgs) -> Result<ExitCode, String> {
    let text = std::fs::read_to_string(&args.file)
        .map_err(|e| format!("cannot read {}: {}", args.file.display(), e))?;
    let ts = its::parse_its(&text).map_err(|e| format!("parse error: {}", e))?;

    let (tx, rx) = mpsc::channel();
    let ts_for_thread = ts.clone();
    std::thread::spawn(move || {
        let _ = tx.send(pipeline::run(&ts_for_thread));
    });
    let pl = match rx.recv_timeout(Duration::from_secs(args.timeout)) {
        Ok(r) => r.map_err(|e| e.to_string())?,
        Err(_) => {
            println!("verdict: unknown (timeout after {} s)", args.timeout);
            return Ok(ExitCode::from(2));
        }
    };

    let fuzz = match args.check_soundness {
        Some(runs) => Some(fuzz_bound(&ts, &pl, runs, args.seed)?),
        None => None,
    };

    if args.json {
        print_json(&pl, fuzz.as_ref());
    } else {
        print_report(args, &pl, fuzz.as_ref());
    }

    if let Some(f) = &fuzz {
        if f.violations > 0 {
            return Ok(ExitCode::from(1));
        }
    }
    match pl.bound.value {
        BoundVal::Finite(_) => Ok(ExitCode::SUCCESS),
        BoundVal::Infinite => Ok(ExitCode::from(2)),
    }
}

struct FuzzSummary {
    runs: u64,
    terminated: u64,
    capped: u64,
    skipped: u64,
    violations: u64,
    max_steps: usize,
}

fn fuzz_bound(
    ts: &TransitionSystem,
    pl: &Pipeline,
    runs: u64,
    seed: u64,
) -> Result<FuzzSummary, String> {
    let mut summary =
        FuzzSummary { runs, terminated: 0, capped: 0, skipped: 0, violations: 0, max_steps: 0 };
    if matches!(pl.bound.value, BoundVal::Infinite) {
        // Nothing to check against; running would only chase the step cap.
        summary.skipped = runs;
        return Ok(summary);
    }
    for i in 0..runs {
        let run_seed = seed.wrapping_add(i);
        let init = interp::random_valuation(&ts.variables, run_seed, 20);
        if let Some(pre) = &pl.bound.conditional {
            // A conditional bound only claims anything for initial states
            // satisfying the precondition.
            if !interp::atoms_hold(pre, &init) {
                summary.skipped += 1;
                continue;
            }
        }
        let trace = interp::run(ts, &init, run_seed ^ 0x9e37_79b9_7f4a_7c15, 8, 1_000_000);
        if !trace.terminated {
            summary.capped += 1;
            continue;
        }
        summary.terminated += 1;
        summary.max_steps = summary.max_steps.max(trace.steps());
        if let Some(b) = solver::eval_bound(&pl.bound, &init) {
            if Int::from(trace.steps()) > b {
                summary.violations += 1;
            }
        }
    }
    Ok(summary)
}

fn verdict_line(pl: &Pipeline) -> String {
    match &pl.analysis.verdict {
        Verdict::Proved => "proved".to_string(),
        Verdict::Conditional => format!(
            "conditional, Pre: {}",
            pl.analysis
                .pre
                .iter()
                .map(its::fmt_atom)
                .collect::<Vec<_>>()
                .join(" /\\ ")
        ),
        Verdict::Failed(why) => format!("unknown ({})", why),
    }
}

fn bound_lines(pl: &Pipeline) -> (String, String) {
    match &pl.bound.value {
        BoundVal::Infinite => ("infinity".to_string(), "infinity".to_string()),
        BoundVal::Finite(p) => {
            let poly = solver::fmt_poly(p);
            let bound = match &pl.bound.conditional {
                Some(pre) if !pre.is_empty() => format!(
                    "{} if {}",
                    poly,
                    pre.iter().map(its::fmt_atom).collect::<Vec<_>>().join(" /\\ ")
                ),
                _ => poly,
            };
            (bound, format!("O(N^{})", p.degree()))
        }
    }
}

fn print_report(args: &AnalyzeArgs, pl: &Pipeline, fuzz: Option<&FuzzSummary>) {
    println!("verdict: {}", verdict_line(pl));
    let (bound, degree) = bound_lines(pl);
    println!("bound: {}", bound);
    println!("degree: {}", degree);
    if args.emit_transformed {
        println!("-- transformed --");
        print!("{}", its::emit_its(&pl.transformed));
    }
    if args.emit_crs {
        println!("-- crs --");
        let crs = if args.embed_rf {
            pl.crs_embedded.as_ref().or(pl.crs.as_ref())
        } else if args.conditional {
            pl.crs.as_ref()
        } else {
            pl.crs.as_ref()
        };
        match crs {
            Some(c) => print!("{}", loopbound::crs::emit_crs(c)),
            None => println!("% no CRS (analysis failed)"),
        }
    }
    if let Some(f) = fuzz {
        println!(
            "soundness: {} runs, {} terminated, {} capped, {} skipped, {} violations, max steps {}",
            f.runs, f.terminated, f.capped, f.skipped, f.violations, f.max_steps
        );
    }
}

fn print_json(pl: &Pipeline, fuzz: Option<&FuzzSummary>) {
    let (bound, degree) = bound_lines(pl);
    let proofs: Vec<_> = pl
        .analysis
        .proofs
        .iter()
        .map(|(c, p)| {
            json!({
                "locations": c.locations.len(),
                "transitions": c.transitions.len(),
                "strict": p.strict.len(),
                "children": p.children.len(),
            })
        })
        .collect();
    let rf_ann: BTreeMap<String, String> = pl
        .rf_ann
        .iter()
        .map(|(l, rf)| {
            (
                pl.transformed.loc_name(*l).to_string(),
                its::fmt_term(rf),
            )
        })
        .collect();
    let report = json!({
        "verdict": verdict_line(pl),
        "bound": bound,
        "degree": degree,
        "validator_ok": pl.validator_ok,
        "validator_diags": pl.validator_diags,
        "proofs": proofs,
        "rf_annotations": rf_ann,
        "equations": pl.crs.as_ref().map(|c| c.equations.len()),
        "soundness": fuzz.map(|f| json!({
            "runs": f.runs,
            "terminated": f.terminated,
            "capped": f.capped,
            "skipped": f.skipped,
            "violations": f.violations,
            "max_steps": f.max_steps,
        })),
    });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
