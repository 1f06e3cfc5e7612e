//! Run directories: the files each pipeline command writes.
//!
//! Every command first validates its configuration, then creates the output directory,
//! writes `run_config.json` and a `STATUS` marker reading `running`, and finally replaces
//! the marker with the outcome (`certified`, `budget_exhausted`, `ok` or `error: ...`).

use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

use crate::certificate::{conformal_scores, quantify_safety_with_scores, write_scores_csv, ConformalReport};
use crate::config::RunConfig;
use crate::controller::SafetyFilter;
use crate::dynamics::ControlAffineSystem;
use crate::error::{Error, Result};
use crate::mlp::MlpCertificate;
use crate::sampling::sample_uniform;
use crate::seeds;
use crate::simulator::{empirical_safety_rate, levelset_grid, LevelSetGrid, SafetySummary};
use crate::trainer::{refine_system, RefineEvent, RefineOutput, RunStatus};

pub const STATUS_FILE: &str = "STATUS";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const HISTORY_FILE: &str = "history.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const DATASETS_FILE: &str = "datasets.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ROLLOUTS_FILE: &str = "rollouts.csv";
pub const LEVELSET_FILE: &str = "levelset.csv";
pub const LEVELSET_SIDECAR_FILE: &str = "levelset.json";

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_status(dir: &Path, status: &str) -> Result<()> {
    fs::write(dir.join(STATUS_FILE), format!("{status}\n"))?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, phase: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("phase_{phase}.json"))
}

fn open_run(config: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut resolved = config.resolved_json()?;
    resolved["command"] = serde_json::json!(command);
    write_json(&dir.join(RUN_CONFIG_FILE), &resolved)?;
    write_status(dir, "running")
}

/// Runs `body`, then records its outcome in the status marker.
fn finish<T>(dir: &Path, result: Result<T>, status: impl FnOnce(&T) -> &'static str) -> Result<T> {
    match &result {
        Ok(v) => write_status(dir, status(v))?,
        // Best effort: the original error matters more than a failed marker write.
        Err(e) => {
            let _ = write_status(dir, &format!("error: {e}"));
        }
    }
    result
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Certified => "certified",
        RunStatus::BudgetExhausted => "budget_exhausted",
    }
}

/// Trains and refines, writing the certificate, history, loss trace, final report and
/// one checkpoint per phase.
pub fn train_to_dir(config: &RunConfig, sys: &ControlAffineSystem, dir: &Path) -> Result<RefineOutput> {
    open_run(config, dir, "train")?;
    let result = (|| {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        let mut write_err = None;
        let out = refine_system(&config.train, sys, &mut |event| {
            if let RefineEvent::PhaseTrained { phase, certificate, .. } = event {
                if let Err(e) = certificate.save(checkpoint_path(dir, phase)) {
                    write_err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = write_err {
            return Err(e);
        }
        out.certificate.save(dir.join(CERTIFICATE_FILE))?;
        write_json(&dir.join(HISTORY_FILE), &out.history)?;
        out.history.write_loss_csv(&dir.join(LOSS_FILE))?;
        write_json(&dir.join(REPORT_FILE), &out.report)?;
        if config.output.write_datasets {
            out.datasets.write_csv(&dir.join(DATASETS_FILE))?;
        }
        if config.output.write_scores {
            // Same states as the final report: the sampler is seeded by `report.seed`.
            let law = config.train.verification_law(sys)?;
            let states = sample_uniform(sys.state_bounds(), out.report.n_samples, out.report.seed)?;
            let weights = config.train.loss.weights(0.0);
            let scores = conformal_scores(&out.certificate, &law, &states, &weights)?;
            write_scores_csv(&scores, &dir.join(SCORES_FILE))?;
        }
        Ok(out)
    })();
    finish(dir, result, |out| status_name(out.status))
}

fn check_certificate(cert: &MlpCertificate, sys: &ControlAffineSystem) -> Result<()> {
    if cert.input_dim() != sys.state_dim() {
        return Err(Error::Shape {
            context: "certificate input vs state dimension",
            expected: sys.state_dim(),
            got: cert.input_dim(),
        });
    }
    Ok(())
}

/// Seed of standalone verification samples, distinct from the refinement streams.
pub fn verification_seed(config: &RunConfig) -> u64 {
    seeds::derive(config.train.seed, seeds::VERIFY_STANDALONE)
}

/// Quantifies an existing certificate and writes the report.
pub fn verify_to_dir(
    config: &RunConfig,
    sys: &ControlAffineSystem,
    cert: &MlpCertificate,
    dir: &Path,
) -> Result<ConformalReport> {
    check_certificate(cert, sys)?;
    open_run(config, dir, "verify")?;
    let result = (|| {
        let c = &config.train.conformal;
        let law = config.train.verification_law(sys)?;
        let weights = config.train.loss.weights(0.0);
        let (report, scores) = quantify_safety_with_scores(
            cert,
            &law,
            &weights,
            c.n_samples,
            c.resolved_alpha()?,
            c.beta,
            verification_seed(config),
        )?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        if config.output.write_scores {
            write_scores_csv(&scores, &dir.join(SCORES_FILE))?;
        }
        Ok(report)
    })();
    finish(dir, result, |r| if r.certified() { "certified" } else { "not_certified" })
}

/// Seed of the rollout start states.
pub fn simulation_seed(config: &RunConfig) -> u64 {
    config.simulation.seed.unwrap_or_else(|| seeds::derive(config.train.seed, seeds::ROLLOUTS))
}

/// Rolls out the deployment filter and writes the summary, one status line per rollout
/// and the first `simulation.trajectories` trajectories.
pub fn simulate_to_dir(
    config: &RunConfig,
    sys: &ControlAffineSystem,
    cert: &MlpCertificate,
    dir: &Path,
) -> Result<SafetySummary> {
    check_certificate(cert, sys)?;
    open_run(config, dir, "simulate")?;
    let result = (|| {
        let s = &config.simulation;
        let filter = SafetyFilter::new(cert.clone(), config.train.deployment_law(sys)?)?;
        let (summary, kept) =
            empirical_safety_rate(&filter, s.n_rollouts, s.horizon_steps, s.dt, simulation_seed(config), s.trajectories)?;
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
        let mut w = csv::Writer::from_path(dir.join(ROLLOUTS_FILE))?;
        w.write_record(["rollout", "status", "safe", "min_h"])?;
        for (i, (status, min_h)) in summary.statuses.iter().zip(&summary.min_h).enumerate() {
            let name = serde_json::to_value(status)?;
            w.write_record([
                i.to_string(),
                name.as_str().unwrap_or_default().to_string(),
                status.is_safe_for(sys).to_string(),
                format!("{min_h:e}"),
            ])?;
        }
        w.flush()?;
        for (i, r) in kept.iter().enumerate() {
            r.write_csv(&dir.join(format!("trajectory_{i}.csv")))?;
        }
        Ok(summary)
    })();
    finish(dir, result, |_| "ok")
}

/// Evaluates `h` on the configured slice and writes the grid and its sidecar.
pub fn levelset_to_dir(
    config: &RunConfig,
    sys: &ControlAffineSystem,
    cert: &MlpCertificate,
    dir: &Path,
) -> Result<LevelSetGrid> {
    check_certificate(cert, sys)?;
    open_run(config, dir, "levelset")?;
    let result = (|| {
        let grid = levelset_grid(cert, &config.levelset.slice(sys.state_dim()), sys.state_bounds())?;
        grid.write_csv(&dir.join(LEVELSET_FILE))?;
        fs::write(dir.join(LEVELSET_SIDECAR_FILE), grid.sidecar_json()? + "\n")?;
        Ok(grid)
    })();
    finish(dir, result, |_| "ok")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SystemRegistry;

    fn tiny(system: &str) -> RunConfig {
        let text = format!(
            r#"
            system = "{system}"
            seed = 4
            [network]
            hidden_layers = [8]
            [data]
            n_safe = 64
            n_unsafe = 64
            n_domain = 128
            [training]
            epochs_phase0 = 2
            epochs_refine = 1
            max_refinements = 1
            [conformal]
            n_samples = 500
            alpha = 0.05
            [simulation]
            n_rollouts = 3
            horizon_steps = 5
            trajectories = 2
            [levelset]
            resolution = 3
            [output]
            write_datasets = true
            write_scores = true
            "#
        );
        RunConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn train_writes_every_artifact() {
        let config = tiny("dubins");
        let sys = config.validate(&SystemRegistry::with_builtins()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_to_dir(&config, &sys, dir.path()).unwrap();
        for f in [CERTIFICATE_FILE, HISTORY_FILE, LOSS_FILE, REPORT_FILE, RUN_CONFIG_FILE, DATASETS_FILE, SCORES_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        for phase in 0..out.history.refinements.len() {
            assert!(checkpoint_path(dir.path(), phase).is_file());
        }
        let status = fs::read_to_string(dir.path().join(STATUS_FILE)).unwrap();
        assert_eq!(status.trim(), status_name(out.status));
        let report = ConformalReport::read_json(&dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(report, out.report);
        let scores = fs::read_to_string(dir.path().join(SCORES_FILE)).unwrap();
        assert_eq!(scores.lines().count(), 501);
    }

    #[test]
    fn downstream_commands_write_outputs() {
        let config = tiny("dubins");
        let sys = config.validate(&SystemRegistry::with_builtins()).unwrap();
        let cert = MlpCertificate::init_glorot(&[3, 8, 1], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let report = verify_to_dir(&config, &sys, &cert, &dir.path().join("v")).unwrap();
        assert_eq!(report.n_samples, 500);
        assert!(dir.path().join("v").join(REPORT_FILE).is_file());

        let summary = simulate_to_dir(&config, &sys, &cert, &dir.path().join("s")).unwrap();
        assert_eq!(summary.n_rollouts, 3);
        assert!(dir.path().join("s/trajectory_1.csv").is_file());
        assert!(!dir.path().join("s/trajectory_2.csv").exists());
        let lines = fs::read_to_string(dir.path().join("s").join(ROLLOUTS_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 4);

        let grid = levelset_to_dir(&config, &sys, &cert, &dir.path().join("l")).unwrap();
        assert_eq!(grid.values.len(), 9);
        assert_eq!(fs::read_to_string(dir.path().join("l").join(STATUS_FILE)).unwrap(), "ok\n");
    }

    #[test]
    fn mismatched_certificate_leaves_no_outputs() {
        let config = tiny("dubins");
        let sys = config.validate(&SystemRegistry::with_builtins()).unwrap();
        let cert = MlpCertificate::init_glorot(&[2, 4, 1], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        assert!(verify_to_dir(&config, &sys, &cert, &target).is_err());
        assert!(!target.exists());
    }
}
