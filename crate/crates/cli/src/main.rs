//! Command-line driver: runs the rotating square patch test case and writes
//! diagnostics, communication logs and checkpoints.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use sphmini_core::driver::{run, RunConfig};
use sphmini_core::sqpatch::SquarePatchConfig;

/// Weakly compressible SPH mini-app: rotating square patch benchmark.
#[derive(Parser, Debug)]
#[command(name = "sphmini", version, about)]
struct Args {
    /// Particles per edge of the x-y lattice.
    #[arg(short = 'n', long = "side", default_value_t = 50)]
    side: usize,

    /// Number of z layers (periodic direction).
    #[arg(long, default_value_t = 20)]
    layers: usize,

    /// Number of time-steps to run.
    #[arg(short = 's', long = "steps", default_value_t = 10)]
    steps: usize,

    /// Checkpoint cadence in steps (0 = only the initial checkpoint).
    #[arg(short = 'w', long = "checkpoint-every", default_value_t = 0)]
    checkpoint_every: usize,

    /// Number of simulated ranks.
    #[arg(long, default_value_t = 1)]
    ranks: usize,

    /// Worker threads (0 = auto).
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Sinc kernel exponent.
    #[arg(long = "kernel-n", default_value_t = 6.0)]
    kernel_n: f64,

    /// Evaluate kernels through the lookup table (default).
    #[arg(long = "table", overrides_with = "no_table", default_value_t = true)]
    table: bool,

    /// Evaluate kernels directly instead of through the lookup table.
    #[arg(long = "no-table")]
    no_table: bool,

    /// Track total momentum and energy (adds the third global reduction).
    #[arg(long = "track-energy", default_value_t = false)]
    track_energy: bool,

    /// Output directory for diagnostics, logs and checkpoints.
    #[arg(short = 'o', long = "out", default_value = "out")]
    out: PathBuf,

    /// Keep smoothing lengths fixed instead of adapting them.
    #[arg(long = "uniform-h", default_value_t = false)]
    uniform_h: bool,

    /// Artificial viscosity strength.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,

    /// Desired neighbor count.
    #[arg(long = "target-neighbors", default_value_t = 300)]
    target_neighbors: usize,

    /// Neighbor list capacity per particle.
    #[arg(long = "max-neighbors", default_value_t = 512)]
    max_neighbors: usize,

    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = RunConfig {
        patch: SquarePatchConfig {
            side: args.side,
            layers: args.layers,
            target_neighbors: args.target_neighbors,
            ..Default::default()
        },
        steps: args.steps,
        checkpoint_every: args.checkpoint_every,
        ranks: args.ranks,
        threads: args.threads,
        kernel_n: args.kernel_n,
        use_table: !args.no_table,
        track_energy: args.track_energy,
        out_dir: Some(args.out),
        uniform_h: args.uniform_h,
        alpha: args.alpha,
        max_neighbors: args.max_neighbors,
        resume: args.resume,
        ..Default::default()
    };

    match run(cfg) {
        Ok(summary) => {
            println!(
                "completed {} steps, t = {:.6e} s",
                summary.steps_done, summary.final_time
            );
            print!("{}", summary.timing_report);
            if let Some(last) = summary.diag.last() {
                println!(
                    "final: dt = {:.3e}, <neighbors> = {:.1}, halo ratio mean/max = {:.3}/{:.3}",
                    last.dt, last.neigh_mean, last.halo_ratio_mean, last.halo_ratio_max
                );
                if !last.etot.is_nan() {
                    println!(
                        "conserved: E = {:.10e}, p = ({:.3e}, {:.3e}, {:.3e}), Lz = {:.10e}",
                        last.etot, last.px, last.py, last.pz, last.lz
                    );
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
