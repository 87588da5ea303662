pub mod conf;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};

use conf::HarnessConfig;
use experiments::{Experiment, RunOptions};
use output::{Manifest, RunHeader};

/// Runs one experiment and writes its artifacts into `out`. The stored
/// config carries the effective seed, so it reproduces the run on its own.
/// The inner result is the experiment outcome; a failed run still leaves a
/// manifest behind.
pub fn execute(
    e: Experiment,
    cfg: &HarnessConfig,
    o: &RunOptions,
    out: &Path,
) -> std::io::Result<(Manifest, Vec<PathBuf>, Result<(), String>)> {
    let mut cfg = cfg.clone();
    cfg.run.seed = o.seed;
    let header = RunHeader {
        experiment: e.name().into(),
        figure: e.figure().into(),
        seed: o.seed,
        scale: o.scale.label().into(),
        repetitions: o.reps.unwrap_or(e.default_reps()),
        config_text: cfg.to_text(),
        max_raw_samples: cfg.run.max_raw_samples_per_run,
    };
    match experiments::run(e, &cfg, o) {
        Ok(a) => {
            let (m, p) = output::write_outputs(out, &header, Ok(&a))?;
            Ok((m, p, Ok(())))
        }
        Err(err) => {
            let why = err.to_string();
            let (m, p) = output::write_outputs(out, &header, Err(&why))?;
            Ok((m, p, Err(why)))
        }
    }
}
