//! Command-line front end: simulate datasets, train the matcher, inspect
//! matches and alignments, evaluate against truth, and benchmark.

use clap::{Parser, Subcommand};
use mmatch::config::PipelineConfig;
use mmatch::geom::{rre, rte};
use mmatch::net::{
    classify_edges, load_checkpoint, match_f1, save_checkpoint, train, RmNetParams, TrainConfig,
};
use mmatch::pipeline::{
    bench_pair, evaluate_dataset, run_pipeline, training_example, RAW_POINT_BYTES,
};
use mmatch::sim::{generate_scene, make_frame_pair, scenario_by_name, SCENARIO_NAMES};
use mmatch::wire::{read_dataset, write_dataset};
use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mmatch", about = "Radar-assisted multi-vehicle perception fusion")]
struct Cli {
    /// Pipeline configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of simulated frame pairs.
    Simulate {
        /// One of: straight_light, straight_heavy, intersection_light,
        /// intersection_heavy, tjunction_light, tjunction_heavy.
        #[arg(long, default_value = "straight_light")]
        scenario: String,
        /// Number of frame pairs.
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cluster matcher on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score cross-view cluster matches on a dataset.
    Match {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Estimate the CAV-to-Ego transform per frame pair.
    Align {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Full evaluation with ablation baselines; writes a TSV report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Report file (tab-separated rows).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage latency and payload accounting on one dataset.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Timing repetitions per frame pair.
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, String> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Simulate {
            scenario,
            count,
            seed,
            out,
        } => {
            let mut pairs = Vec::with_capacity(count as usize);
            for i in 0..count {
                let spec = scenario_by_name(&scenario, seed + i).map_err(|e| {
                    format!("{e}; known scenarios: {}", SCENARIO_NAMES.join(", "))
                })?;
                let world = generate_scene(&spec).map_err(|e| format!("seed {}: {e}", seed + i))?;
                pairs.push((spec, make_frame_pair(&world, &cfg.sim)));
            }
            write_dataset(&out, &pairs).map_err(|e| e.to_string())?;
            println!("wrote {} frame pairs to {}", pairs.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            out,
            epochs,
            seed,
        } => {
            let pairs = read_dataset(&data).map_err(|e| e.to_string())?;
            let examples: Vec<_> = pairs
                .iter()
                .map(|(_, p)| training_example(p, &cfg))
                .collect();
            let tc = TrainConfig {
                epochs: epochs.unwrap_or(cfg.train.epochs),
                seed: seed.unwrap_or(cfg.train.seed),
                ..cfg.train
            };
            let mut params = RmNetParams::init(tc.seed);
            let history = train(&mut params, &examples, &cfg.net, &tc);
            for (i, loss) in history.iter().enumerate() {
                println!("epoch {i}\tloss {loss:.6}");
            }
            let f = File::create(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            save_checkpoint(&params, f).map_err(|e| e.to_string())?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Match { data, ckpt } => {
            let pairs = read_dataset(&data).map_err(|e| e.to_string())?;
            let params = load_params(&ckpt)?;
            let mut f1_sum = 0.0;
            println!("frame\tego\tcav\tscore");
            for (i, (_, pair)) in pairs.iter().enumerate() {
                let ex = training_example(pair, &cfg);
                let r = classify_edges(&params, &ex.graph, &cfg.net);
                for (e, c, s) in &r.matches {
                    println!("{i}\t{e}\t{c}\t{s:.4}");
                }
                f1_sum += match_f1(&r, &ex.graph, &ex.labels);
            }
            println!(
                "# mean F1 over {} frames: {:.4}",
                pairs.len(),
                f1_sum / pairs.len().max(1) as f64
            );
            Ok(())
        }
        Command::Align { data, ckpt } => {
            let pairs = read_dataset(&data).map_err(|e| e.to_string())?;
            let params = load_params(&ckpt)?;
            println!("frame\tyaw_rad\ttx_m\tty_m\trre_deg\trte_m\tstatus");
            for (i, (_, pair)) in pairs.iter().enumerate() {
                let out = run_pipeline(&pair.ego, &pair.cav, &params, &cfg);
                match out.transform {
                    Some(t) => println!(
                        "{i}\t{:.5}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\tok",
                        t.yaw,
                        t.tx,
                        t.ty,
                        rre(&t, &pair.truth_transform),
                        rte(&t, &pair.truth_transform)
                    ),
                    None => println!("{i}\t-\t-\t-\t-\t-\t{:?}", out.no_fusion.unwrap()),
                }
            }
            Ok(())
        }
        Command::Eval { data, ckpt, out } => {
            let pairs = read_dataset(&data).map_err(|e| e.to_string())?;
            let params = load_params(&ckpt)?;
            let frames: Vec<_> = pairs.into_iter().map(|(_, p)| p).collect();
            let report = evaluate_dataset(&frames, &params, &cfg);
            if let Some(path) = out {
                std::fs::write(&path, report.to_tsv())
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                println!("report written to {}", path.display());
            }
            print!("{}", report.summary());
            println!("objective_increases\t{}", report.monotonic_violations);
            Ok(())
        }
        Command::Bench { data, ckpt, iters } => {
            let pairs = read_dataset(&data).map_err(|e| e.to_string())?;
            let params = load_params(&ckpt)?;
            let mut totals = Vec::new();
            println!("frame\tsep_ms\tencode_ms\ttransmit_ms\tdecode_ms\tmatch_ms\talign_ms\ttotal_ms\tpayload_B\traw_equiv_B");
            for (i, (_, pair)) in pairs.iter().enumerate() {
                let (t, payload) = bench_pair(pair, &params, &cfg, iters);
                let raw = pair.cav.radar.len() * RAW_POINT_BYTES;
                println!(
                    "{i}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{payload}\t{raw}",
                    t.separation_ms,
                    t.encode_ms,
                    t.transmit_ms,
                    t.decode_ms,
                    t.matching_ms,
                    t.alignment_ms,
                    t.total_ms()
                );
                totals.push(t.total_ms());
            }
            totals.sort_by(f64::total_cmp);
            if !totals.is_empty() {
                println!("# median total {:.3} ms", totals[totals.len() / 2]);
            }
            Ok(())
        }
    }
}

fn load_params(path: &PathBuf) -> Result<RmNetParams, String> {
    let f = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_checkpoint(f).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
