use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stlattice::cli::{cmd_ablate, cmd_gen, cmd_run, cmd_sweep, cmd_train};
use stlattice::config::{RunConfig, ScenarioSource};
use stlattice::{Error, Result};

#[derive(Parser)]
#[command(name = "stlattice", version, about = "Sparse-keyframe detection on a scale-time lattice, simulated")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run this seed only (replaces `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (replaces `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fixed adaptive insertion threshold (replaces calibration).
    #[arg(long, global = true)]
    easiness_thresh: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a scenario to PGM frames, ground truth and a manifest.
    Gen {
        /// Bundled preset (static, slow, fast, fastsmall, mixed, noisy, train).
        #[arg(long, conflicts_with = "scenario")]
        preset: Option<String>,
        /// Scenario TOML file.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Train propagation/refinement regressors.
    Train,
    /// One pipeline run per seed with a result JSON and lattice dump.
    Run {
        /// Score every lattice node against its frame.
        #[arg(long)]
        per_node_eval: bool,
    },
    /// Interval x strategy x propagator sweep to CSV.
    Sweep {
        /// Keep rows already in the output CSV.
        #[arg(long)]
        resume: bool,
    },
    /// Propagation, unit variant, key frame and rescoring comparisons.
    Ablate,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
        cfg.sweep.seeds = vec![s];
        cfg.experiments.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(t) = cli.easiness_thresh {
        cfg.lattice.easiness_thresh = Some(t);
    }
    if let Cmd::Gen { preset, scenario } = &cli.cmd {
        if preset.is_some() || scenario.is_some() {
            cfg.scenario = ScenarioSource {
                preset: preset.clone(),
                path: scenario.clone(),
            };
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("cannot start {n} workers: {e}")))?;
    }
    let cfg = load(cli)?;
    match &cli.cmd {
        Cmd::Gen { .. } => {
            for &seed in &cfg.seeds {
                let sc = cfg.scenario_for(seed)?;
                let dir = if cfg.seeds.len() == 1 {
                    cfg.out.clone()
                } else {
                    cfg.out.join(format!("seed_{seed}"))
                };
                let r = cmd_gen(&sc, &dir)?;
                println!("{}: {} frames, {} boxes -> {}", sc.name, r.n_frames, r.n_boxes, r.dir.display());
            }
        }
        Cmd::Train => {
            for r in cmd_train(&cfg)? {
                println!(
                    "{}: {} samples, loss {:.5} -> {:.5} ({})",
                    r.model,
                    r.samples,
                    r.first_loss,
                    r.final_loss,
                    r.dir.display()
                );
            }
        }
        Cmd::Run { per_node_eval } => {
            for r in cmd_run(&cfg, *per_node_eval)? {
                println!(
                    "seed {}: mAP {:.4}  recall {:.4}  slow/medium/fast {}/{}/{}  key frames {}  cost {:.1} ms  {:.1} fps",
                    r.seed,
                    r.eval.map,
                    r.eval.recall,
                    fmt_opt(r.eval.breakdown.slow),
                    fmt_opt(r.eval.breakdown.medium),
                    fmt_opt(r.eval.breakdown.fast),
                    r.keyframes.len(),
                    r.eval.total_cost_ms,
                    r.eval.effective_fps
                );
            }
        }
        Cmd::Sweep { resume } => {
            let rows = cmd_sweep(&cfg, *resume)?;
            println!("{} rows -> {}", rows.len(), cfg.out.join("sweep.csv").display());
        }
        Cmd::Ablate => {
            let r = cmd_ablate(&cfg)?;
            for p in &r.propagation {
                println!("propagation {:8} mAP {:.4}  fast {}", p.propagator.name(), p.summary.map, fmt_opt(p.summary.map_fast));
            }
            for v in &r.variants {
                println!("variant {} mAP {:.4}", v.variant.name(), v.summary.map);
            }
            for k in &r.keyframes {
                println!(
                    "interval {:2} adaptive {:.4} uniform {:.4} gap {:+.4}",
                    k.interval,
                    k.adaptive.map,
                    k.uniform.map,
                    k.gap()
                );
            }
            println!("rescoring {:.4} -> {:.4}", r.rescoring.before.map, r.rescoring.after.map);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
