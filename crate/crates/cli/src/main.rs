mod args;
mod backends;
mod commands;

use args::{Cli, Command};
use clap::Parser;

/// Maps an error chain to a (category, exit code) pair. The category is also
/// emitted as the last stderr line in JSON for machine consumption.
fn classify(error: &anyhow::Error) -> (&'static str, i32) {
    use openground_core::backends::BackendError;
    use openground_core::chain::ChainError;
    use openground_core::config::ConfigError;
    use openground_core::eval::EvalError;
    use openground_core::grounding::GroundingError;
    use openground_core::olt::OltError;
    use openground_core::pipeline::PipelineError;
    use openground_core::scene::SceneError;
    use openground_core::synth::SynthError;

    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e.category() {
                "io" => ("io", 10),
                "backend" => ("backend", 12),
                "grounding" => ("grounding", 13),
                _ => ("validation", 14),
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return ("config", 11);
        }
        if cause.downcast_ref::<BackendError>().is_some()
            || cause.downcast_ref::<GroundingError>().is_some()
        {
            return ("backend", 12);
        }
        if let Some(e) = cause.downcast_ref::<ChainError>() {
            return match e {
                ChainError::Backend(_) => ("backend", 12),
                ChainError::Load { .. } => ("io", 10),
                _ => ("validation", 14),
            };
        }
        if let Some(e) = cause.downcast_ref::<SceneError>() {
            return match e {
                SceneError::Io { .. } => ("io", 10),
                _ => ("validation", 14),
            };
        }
        if let Some(e) = cause.downcast_ref::<OltError>() {
            return match e {
                OltError::Io { .. } => ("io", 10),
                _ => ("validation", 14),
            };
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return match e {
                SynthError::Io { .. } => ("io", 10),
                SynthError::Spec { .. } => ("config", 11),
                _ => ("validation", 14),
            };
        }
        if cause.downcast_ref::<EvalError>().is_some() {
            return ("validation", 14);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 10);
        }
    }
    ("error", 1)
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ground(args) => commands::ground(args),
        Command::Eval(args) => commands::eval(args),
        Command::Waed(args) => commands::waed(args),
        Command::Synth(args) => commands::synth(args),
        Command::Render(args) => commands::render(args),
        Command::Record(args) => commands::record(args),
        Command::Replay(args) => commands::replay(args),
    };
    if let Err(error) = result {
        let (category, code) = classify(&error);
        eprintln!("error: {error:#}");
        eprintln!(
            "{}",
            serde_json::json!({"error": {"category": category, "message": format!("{error:#}")}})
        );
        std::process::exit(code);
    }
}
