//! Experiment runner around `lora_al`: data generation, base pretraining,
//! active learning runs per strategy and seed, cross-run reports, and the
//! calibration and score-correlation probes. Every output is a CSV or JSON
//! file that is a pure function of the config.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{ExperimentConfig, Layout};

/// Process exit status for a failed command: 2 when the library reports a
/// broken internal invariant, 1 for everything the user can fix.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use lora_al::Error;
    fn internal(e: &Error) -> bool {
        match e {
            Error::Shape { .. } | Error::NonFinite(_) | Error::Contract(_) => true,
            Error::Round { source, .. } => internal(source),
            _ => false,
        }
    }
    let broken = err.chain().filter_map(|c| c.downcast_ref::<Error>()).any(internal);
    if broken {
        2
    } else {
        1
    }
}
