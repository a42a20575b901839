//! IO companion for the `mutualseq-core` training framework: binary corpus
//! and checkpoint formats, TOML run configuration, JSON-lines metrics
//! sinks, a scoped-thread executor, and the subcommand implementations
//! behind the `mutualseq` binary.

pub mod commands;
pub mod config;
pub mod exec;
pub mod formats;
pub mod metrics;

/// Stable process exit codes.
pub mod exit {
    /// Success.
    pub const OK: i32 = 0;
    /// A verification command found a failing check.
    pub const CHECK_FAILED: i32 = 1;
    /// Configuration or IO problem.
    pub const CONFIG: i32 = 2;
    /// Numeric abort (NaN/Inf) during training or evaluation.
    pub const NUMERIC: i32 = 3;
}

/// Map a core error onto the exit-code contract.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core_err) = err.downcast_ref::<mutualseq_core::Error>() {
        match core_err {
            mutualseq_core::Error::Numeric(_) => exit::NUMERIC,
            _ => exit::CONFIG,
        }
    } else {
        exit::CONFIG
    }
}
