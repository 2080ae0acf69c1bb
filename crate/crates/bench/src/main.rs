use clap::{Args, Parser, Subcommand};
use rollout_grid::exec::serve_tcp;
use rollout_grid_bench::config::Mode;
use rollout_grid_bench::runs::config_from_manifest;
use rollout_grid_bench::{parse_config, run, RunContext, RunSummary};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bench", version, about = "Run rollout-grid experiments")]
struct Cli {
    /// Serve one environment over TCP (used for socket-transport workers).
    #[arg(long, hide = true, requires_all = ["env", "connect"])]
    worker: bool,
    #[arg(long, hide = true)]
    env: Option<String>,
    #[arg(long, hide = true)]
    connect: Option<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Env-steps per second for a fixed policy, optionally over a sweep.
    Throughput(RunArgs),
    /// Bayesian optimization of the lander design.
    Bo(RunArgs),
    /// Cross-entropy training of a tracker policy.
    Cem(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run from a manifest written by an earlier run.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    n_env: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the trial log already in the output directory (bo only).
    #[arg(long)]
    resume: bool,
}

fn run_command(mode: Mode, args: RunArgs) -> Result<RunSummary, String> {
    let (path, from_manifest) = match (&args.config, &args.manifest) {
        (Some(p), _) => (p, false),
        (None, Some(p)) => (p, true),
        (None, None) => unreachable!("clap requires one of them"),
    };
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let parsed = if from_manifest {
        config_from_manifest(&text)
    } else {
        parse_config(&text)
    };
    let mut cfg = parsed.map_err(|e| format!("{}: {e}", path.display()))?;
    if cfg.mode != mode {
        return Err(format!(
            "{} has mode {:?}, but the subcommand asks for {:?}",
            path.display(),
            cfg.mode,
            mode
        ));
    }
    if let Some(n) = args.n_env {
        cfg.n_env = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    cfg.normalize().map_err(|e| e.to_string())?;
    let ctx = RunContext {
        worker_program: None,
        resume: args.resume,
    };
    run(&cfg, &ctx).map_err(|e| e.to_string())
}

/// Runs the CLI and returns the process exit code.
fn cli_main<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.worker {
        let (env, addr) = (cli.env.unwrap_or_default(), cli.connect.unwrap_or_default());
        return match serve_tcp(&addr, Some(&env)) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("worker: {e}");
                1
            }
        };
    }
    let Some(command) = cli.command else {
        eprintln!("bench: missing subcommand (throughput, bo or cem); see --help");
        return 2;
    };
    let result = match command {
        Command::Throughput(a) => run_command(Mode::Throughput, a),
        Command::Bo(a) => run_command(Mode::Bo, a),
        Command::Cem(a) => run_command(Mode::Cem, a),
    };
    match result {
        Ok(summary) => {
            println!("{}", describe(&summary));
            0
        }
        Err(e) => {
            eprintln!("bench: {e}");
            1
        }
    }
}

fn describe(summary: &RunSummary) -> String {
    match summary {
        RunSummary::Throughput(rows) => rows
            .iter()
            .map(|r| {
                format!(
                    "n_env={} repeat={} env_steps/s={:.0} mean_barrier_latency={:.3e}s",
                    r.n_env, r.repeat, r.env_steps_per_s, r.mean_barrier_latency_s
                )
            })
            .collect::<Vec<_>>()
            .join("\n"),
        RunSummary::Bo { best, trials } => match best.as_ref().and_then(|b| b.value.map(|v| (b.number, v))) {
            Some((n, v)) => format!("{trials} trials, best J = {v} (trial {n})"),
            None => format!("{trials} trials, none complete"),
        },
        RunSummary::Cem {
            best_return,
            iterations,
        } => format!("{iterations} iterations, best episode return = {best_return}"),
    }
}

fn main() -> ExitCode {
    ExitCode::from(cli_main(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn write(dir: &Path, name: &str, text: &str) -> String {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    }

    fn manifest(dir: &Path) -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
    }

    fn bo_args(config: &str, extra: &[&str]) -> RunArgs {
        let mut v = vec!["bench", "bo", "--config", config];
        v.extend_from_slice(extra);
        match Cli::try_parse_from(v).unwrap().command.unwrap() {
            Command::Bo(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn throughput_flags_override_config() {
        let d = tempfile::tempdir().unwrap();
        let c = write(
            d.path(),
            "t.json",
            r#"{"mode":"throughput","env":"tracker","n_env":1,"seed":0,"throughput":{"steps":50}}"#,
        );
        let out = d.path().join("res");
        let code = cli_main(["bench", "throughput", "--config", &c, "--n-env", "2", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0);
        let m = manifest(&out);
        assert_eq!(m["status"], "complete");
        assert_eq!(m["config"]["n_env"], 2);
        assert_eq!(m["seed"], 7);
        assert_eq!(m["config"]["env_config"]["horizon"], 500);
        let csv = std::fs::read_to_string(out.join("throughput.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn typo_fails_with_suggestion_and_no_output() {
        let d = tempfile::tempdir().unwrap();
        let c = write(d.path(), "bad.json", r#"{"mode":"bo","env":"lander","n_envs":2,"seed":1}"#);
        let err = run_command(Mode::Bo, bo_args(&c, &[])).unwrap_err();
        assert!(err.contains("did you mean `n_env`"), "{err}");
        assert_eq!(cli_main(["bench", "bo", "--config", &c]), 1);
    }

    #[test]
    fn subcommand_must_match_mode() {
        let d = tempfile::tempdir().unwrap();
        let c = write(d.path(), "c.json", r#"{"mode":"cem","env":"tracker","n_env":1,"seed":1}"#);
        let err = run_command(Mode::Bo, bo_args(&c, &[])).unwrap_err();
        assert!(err.contains("mode"), "{err}");
        assert_eq!(cli_main(["bench", "throughput"]), 2);
        assert_eq!(cli_main(["bench"]), 2);
    }

    #[test]
    fn flag_override_is_validated() {
        let d = tempfile::tempdir().unwrap();
        let c = write(d.path(), "c.json", r#"{"mode":"bo","env":"lander","n_env":1,"seed":1}"#);
        let err = run_command(Mode::Bo, bo_args(&c, &["--n-env", "0"])).unwrap_err();
        assert!(err.contains("n_env ≥ 1"), "{err}");
    }

    #[test]
    fn rerun_from_manifest_reproduces_trial_log() {
        let d = tempfile::tempdir().unwrap();
        let first = d.path().join("first");
        let second = d.path().join("second");
        let c = write(d.path(), "bo.json", r#"{"mode":"bo","env":"lander","n_env":2,"seed":4,"bo":{"n_trials":10}}"#);
        assert_eq!(cli_main(["bench", "bo", "--config", &c, "--out", first.to_str().unwrap()]), 0);
        let m = first.join("manifest.json");
        assert_eq!(
            cli_main(["bench", "bo", "--manifest", m.to_str().unwrap(), "--out", second.to_str().unwrap()]),
            0
        );
        let strip = |dir: &Path| {
            rollout_grid_bench::runs::read_trials(&dir.join("trials.jsonl"))
                .unwrap()
                .iter()
                .map(rollout_grid::opt::Trial::without_times)
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&first).len(), 10);
        assert_eq!(strip(&first), strip(&second));
    }

    #[test]
    fn resume_extends_the_log() {
        let d = tempfile::tempdir().unwrap();
        let out = d.path().join("o");
        let c = write(d.path(), "bo.json", r#"{"mode":"bo","env":"lander","n_env":1,"seed":4,"bo":{"n_trials":3}}"#);
        let o = out.to_str().unwrap();
        assert_eq!(cli_main(["bench", "bo", "--config", &c, "--out", o]), 0);
        assert_eq!(cli_main(["bench", "bo", "--config", &c, "--out", o, "--resume"]), 0);
        let log = rollout_grid_bench::runs::read_trials(&out.join("trials.jsonl")).unwrap();
        assert_eq!(log.iter().map(|t| t.number).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
        assert_eq!(manifest(&out)["trials"], 6);
    }

    #[test]
    fn cem_writes_training_csv() {
        let d = tempfile::tempdir().unwrap();
        let out = d.path().join("o");
        let c = write(
            d.path(),
            "cem.json",
            r#"{"mode":"cem","env":"tracker","n_env":4,"seed":2,"env_config":{"horizon":20},"cem":{"iterations":2,"population":8}}"#,
        );
        assert_eq!(cli_main(["bench", "cem", "--config", &c, "--out", out.to_str().unwrap()]), 0);
        let csv = std::fs::read_to_string(out.join("training.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("wall_clock_s,mean_return,mse_x,mse_y"));
        assert_eq!(lines.count(), 2);
        assert!(out.join("policy.json").exists());
    }

    #[test]
    fn worker_mode_needs_a_driver() {
        assert_eq!(cli_main(["bench", "--worker", "--env", "tracker", "--connect", "127.0.0.1:1"]), 1);
        assert_eq!(cli_main(["bench", "--worker"]), 2);
    }
}
