//! `wmhseg`: patch-based white-matter-hyperintensity segmentation toolkit.
//!
//! The workflow runs as subcommands over case directories:
//! `synth` makes a seeded cohort, `features` adds spatial-location volumes,
//! `train` fits a patch classifier, `segment`/`eval` apply it, `compare`
//! bootstraps two evaluated runs against each other, and `ablate` repeats
//! training on nested subsets of the training cases.
//!
//! Every subcommand accepts `--config <file>` (JSON, keys named exactly like
//! the flags) with command-line flags overriding file values, and writes a
//! `run_manifest.json` recording the fully resolved configuration.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

mod commands;
mod support;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    AblateArgs, CompareArgs, EvalArgs, FeaturesArgs, SegmentArgs, SynthArgs, TrainArgs, UsageError,
};

#[derive(Parser)]
#[command(
    name = "wmhseg",
    version,
    about = "White-matter-hyperintensity segmentation: synthetic cohorts, training, inference, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic cohort of case directories
    Synth(SynthArgs),
    /// Compute the eight spatial-location feature volumes for a cohort
    Features(FeaturesArgs),
    /// Train a patch classifier on a cohort's training split
    Train(TrainArgs),
    /// Write probability maps and binary segmentations for a split
    Segment(SegmentArgs),
    /// Evaluate a checkpoint on a split: Dice, ROC curve, Az
    Eval(EvalArgs),
    /// Compare two evaluated runs with a patient-level bootstrap
    Compare(CompareArgs),
    /// Re-train on nested subsets of the training cases and report Dice
    Ablate(AblateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and are not errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            eprintln!("run `wmhseg <subcommand> --help` for the flag list");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    /// Reflection over the flag table: every flag of every subcommand must
    /// carry help text, so `--help` documents the complete interface.
    #[test]
    fn every_flag_is_documented() {
        fn check(cmd: &clap::Command) {
            for arg in cmd.get_arguments() {
                assert!(
                    arg.get_help().is_some(),
                    "undocumented flag --{} on `{}`",
                    arg.get_id(),
                    cmd.get_name()
                );
            }
            for sub in cmd.get_subcommands() {
                assert!(
                    sub.get_about().is_some(),
                    "subcommand `{}` has no description",
                    sub.get_name()
                );
                check(sub);
            }
        }
        let cmd = Cli::command();
        check(&cmd);
        cmd.debug_assert();
    }

    #[test]
    fn all_seven_subcommands_exist() {
        let cmd = Cli::command();
        let names: Vec<&str> = cmd.get_subcommands().map(|c| c.get_name()).collect();
        for expected in ["synth", "features", "train", "segment", "eval", "compare", "ablate"] {
            assert!(names.contains(&expected), "missing subcommand {expected}");
        }
    }
}
