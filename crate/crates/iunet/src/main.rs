use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iunet::commands::demo::{DemoMode, DemoOptions};
use iunet::commands::verify::{self, Fault, GROUPS};
use iunet::commands::{bench, demo, denoise, flow, Run};
use iunet::{AppError, AppResult};

/// Fully invertible U-Nets: verification, demos, toy training and benchmarks.
#[derive(Debug, Parser)]
#[command(name = "iunet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the configuration's, else out/<task>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the invariant checks and print PASS/FAIL per group.
    Verify {
        /// Run only this group.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(GROUPS))]
        group: Option<String>,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Downsample a PGM image invertibly and write the channels as tiles.
    DownsampleDemo {
        /// Input image (binary PGM, even extents).
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        mode: DemoMode,
        #[arg(long, default_value = "out/downsample-demo")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gradient steps for learn-l1.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Also upsample four constant channels (checkerboard artifacts).
        #[arg(long)]
        inverse_constant: bool,
    },
    /// Train a denoiser on foam phantoms.
    TrainDenoise(RunArgs),
    /// Train a normalizing flow on a Gaussian mixture.
    TrainFlow(RunArgs),
    /// Compare memory and runtime of the two backward engines across depths.
    BenchMemory(RunArgs),
}

fn execute(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::Verify { group, inject_fault } => {
            let results = verify::run(group.as_deref(), inject_fault);
            if verify::report(&results) {
                Ok(())
            } else {
                let failed: Vec<_> = results.iter().filter(|r| r.outcome.is_err()).map(|r| r.group).collect();
                Err(AppError::Failed(format!("groups failed: {}", failed.join(", "))))
            }
        }
        Command::DownsampleDemo { image, mode, out, seed, steps, inverse_constant } => {
            let opts = DemoOptions { mode, seed, steps, inverse_constant, ..DemoOptions::default() };
            let res = demo::run(&image, &out, &opts)?;
            if let (Some(first), Some(last)) = (res.trajectory.first(), res.trajectory.last()) {
                let worst = res.trajectory.iter().map(|r| r.orthogonality_defect).fold(0.0, f64::max);
                println!("l1 {:.6} -> {:.6} in {} steps, max orthogonality defect {worst:.2e}", first.l1, last.l1, last.step);
            }
            for f in &res.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::TrainDenoise(a) => {
            let run = Run::load(&a.config, a.seed, a.out)?;
            let res = denoise::run(&run)?;
            let (first, last) = (&res.rows[0], res.rows.last().expect("epoch 0 is always present"));
            println!(
                "test PSNR: input {:.3} dB, epoch 0 {:.3} dB, epoch {} {:.3} dB ({:+.3} dB over input)",
                first.test_psnr_input_db,
                first.test_psnr_db,
                last.epoch,
                last.test_psnr_db,
                last.test_psnr_db - last.test_psnr_input_db
            );
            println!("outputs in {}", run.out.display());
            Ok(())
        }
        Command::TrainFlow(a) => {
            let run = Run::load(&a.config, a.seed, a.out)?;
            let res = flow::run(&run)?;
            let (first, last) = (&res.log.epochs[0], res.log.epochs.last().expect("epoch 0 is always present"));
            let mean = res.sample_mean();
            println!(
                "NLL bits/dim: epoch 0 {:.4}, epoch {} {:.4} (val {:.4}); sample mean ({:.3}, {:.3})",
                first.mean_train_nll_bits, last.epoch, last.mean_train_nll_bits, last.mean_val_nll_bits, mean[0], mean[1]
            );
            println!("outputs in {}", run.out.display());
            Ok(())
        }
        Command::BenchMemory(a) => {
            let run = Run::load(&a.config, a.seed, a.out)?;
            let rows = bench::run(&run)?;
            println!("{:>6} {:>14} {:>14} {:>8} {:>10} {:>10}", "delta", "peak_me", "peak_conv", "ratio", "time_me", "time_conv");
            for r in &rows {
                println!(
                    "{:>6} {:>14} {:>14} {:>8.4} {:>10.4} {:>10.4}",
                    r.delta, r.peak_me_bytes, r.peak_conv_bytes, r.ratio, r.time_me_s, r.time_conv_s
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
