use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::*;

/// Light-weight transformer super-resolution with blur-kernel estimation
/// and fast per-image adaptation.
#[derive(Parser, Debug)]
#[command(name = "s2r", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Blur and downscale a directory of HR images.
    Degrade(DegradeArgs),
    /// Train the model on a directory of HR images.
    Pretrain(PretrainArgs),
    /// Estimate the blur kernel of one LR image.
    EstimateKernel(EstimateKernelArgs),
    /// Super-resolve LR images with a checkpoint.
    Sr(SrArgs),
    /// Score SR images against ground truth (Y channel PSNR/SSIM).
    Eval(EvalArgs),
    /// Print per-block parameter and multiply counts.
    ReportParams(ReportParamsArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Degrade(a) => degrade_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::EstimateKernel(a) => estimate_kernel_cmd(a),
        Command::Sr(a) => sr_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ReportParams(a) => report_params_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
