//! Command-line pipeline: dataset generation, training, evaluation,
//! single-episode planning, and benchmark tables.
//!
//! Every command is a pure function of its config files, flags, and seeds;
//! deterministic outputs are byte-identical across re-runs and thread
//! counts. Wall-clock timing is never written into deterministic outputs —
//! it goes to `*.timing.csv` sidecar files and stdout only.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cedf::RobotCedf;
use crate::datagen::{
    compute_error_metrics, default_bounds, generate_dataset, read_dataset, write_dataset,
    DatasetHeader, DatasetSpec,
};
use crate::kinematics::{Aabb, LinkGeometry};
use crate::neural::{
    encode_input, mlp_input_gradient, predict_all, train, MlpParams, ModelFile, TrainConfig,
};
use crate::simulator::{run_benchmark, run_episode, Scenario, ShapeMode};
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "ncedf", version, about = "Learned distance fields and MPPI planning for continuum robots")]
pub struct Cli {
    /// Cap the rayon worker pool (outputs do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a labelled training dataset (JSONL).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a per-link distance network.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Network shape as "hidden_layers,width", e.g. "4,16".
        #[arg(long)]
        net: String,
        #[arg(long)]
        out: PathBuf,
        /// Drop the overestimation penalty (ablation).
        #[arg(long)]
        no_overestimation: bool,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-epoch history CSV; defaults to the model path with a
        /// .history.csv suffix.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a trained model against a labelled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Run one closed-loop episode and export the trajectory log.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ncedf")]
        shape: String,
        /// Per-step (step, ee_goal_dist, gt_clearance) CSV for plotting.
        #[arg(long)]
        plot_csv: Option<PathBuf>,
    },
    /// Run the paired shape-representation benchmark.
    Bench {
        #[arg(long)]
        scenario_template: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n_envs: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        /// Comma-separated shape modes, e.g. "ncedf,pcloud:1000".
        #[arg(long)]
        modes: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Dataset-generation config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub geometry: LinkGeometry,
    pub spec: DatasetSpec,
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub git_describe: String,
    pub unix_time_s: u64,
    pub outputs: Vec<String>,
}

pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore failure when a pool already exists (e.g. repeated calls)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::InvalidConfig(_) | Error::Json(_) | Error::DimensionMismatch { .. } => 2,
                _ => 3,
            };
            std::process::ExitCode::from(code)
        }
    }
}

/// Resolve a relative output path against the optional directory override.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os("NCEDF_OUT_DIR") {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_manifest(
    command: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    outputs: &[&Path],
) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        config,
        seeds,
        git_describe: git_describe(),
        unix_time_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let primary = outputs.first().expect("at least one output");
    let path = primary.with_extension(format!(
        "{}manifest.json",
        primary
            .extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    atomic_write(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out_path(&out)),
        Command::Train { data, val, net, out, no_overestimation, epochs, seed, history } => {
            let out = out_path(&out);
            let history = history
                .map(|h| out_path(&h))
                .unwrap_or_else(|| out.with_extension("history.csv"));
            cmd_train(&data, &val, &net, &out, &history, no_overestimation, epochs, seed)
        }
        Command::Eval { model, val, out_csv } => {
            cmd_eval(&model, &val, out_csv.map(|p| out_path(&p)).as_deref())
        }
        Command::Plan { scenario, model, out, shape, plot_csv } => cmd_plan(
            &scenario,
            &model,
            &out_path(&out),
            &shape,
            plot_csv.map(|p| out_path(&p)).as_deref(),
        ),
        Command::Bench { scenario_template, model, n_envs, base_seed, modes, out } => {
            cmd_bench(&scenario_template, &model, n_envs, base_seed, &modes, &out_path(&out))
        }
    }
}

fn cmd_gen_data(config_path: &Path, out: &Path) -> Result<()> {
    let cfg: GenDataConfig = serde_json::from_str(&fs::read_to_string(config_path)?)?;
    cfg.geometry.validate()?;
    let samples = generate_dataset(&cfg.geometry, &cfg.spec);
    let header = DatasetHeader { spec: cfg.spec.clone(), geometry: cfg.geometry };
    write_dataset(out, &header, &samples)?;
    write_manifest("gen-data", serde_json::to_value(&cfg)?, vec![cfg.spec.seed], &[out])?;
    println!("samples={} out={}", samples.len(), out.display());
    Ok(())
}

fn parse_net(net: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = net.split(',').collect();
    let bad = || Error::InvalidConfig(format!("--net expects \"layers,width\", got {net:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let layers: usize = parts[0].trim().parse().map_err(|_| bad())?;
    let width: usize = parts[1].trim().parse().map_err(|_| bad())?;
    if layers == 0 || width == 0 {
        return Err(bad());
    }
    Ok(MlpParams::shape(layers, width))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_path: &Path,
    val_path: &Path,
    net: &str,
    out: &Path,
    history_path: &Path,
    no_overestimation: bool,
    epochs: usize,
    seed: u64,
) -> Result<()> {
    let layer_dims = parse_net(net)?;
    let (header, data) = read_dataset(data_path)?;
    let (val_header, val) = read_dataset(val_path)?;
    if val_header.geometry != header.geometry {
        return Err(Error::GeometryMismatch(
            "training and validation sets use different link geometry".into(),
        ));
    }
    let cfg = TrainConfig {
        epochs,
        seed,
        lambda_overestimation: if no_overestimation {
            0.0
        } else {
            TrainConfig::default().lambda_overestimation
        },
        ..TrainConfig::default()
    };
    let (params, history) = train(&data, &val, &layer_dims, &cfg)?;

    let mut csv = String::from("epoch,train_loss,val_mae,val_rmse,val_moe\n");
    for h in &history {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.train_loss, h.val.mae, h.val.rmse, h.val.moe
        ));
    }
    atomic_write(history_path, csv.as_bytes())?;

    let meta = serde_json::json!({
        "train_config": cfg,
        "bounds": header.spec.bounds,
        "dataset": data_path.display().to_string(),
        "final": history.last().map(|h| &h.val),
    });
    ModelFile::new(&params, header.geometry, meta).save(out)?;
    write_manifest(
        "train",
        serde_json::json!({"net": net, "config": cfg}),
        vec![seed],
        &[out, history_path],
    )?;

    let last = history.last().expect("epochs >= 1");
    println!(
        "epochs={} final_train_loss={} final_mae={} final_rmse={} final_moe={}",
        epochs, last.train_loss, last.val.mae, last.val.rmse, last.val.moe
    );
    Ok(())
}

/// Mean absolute Eikonal residual `| |grad_p| - 1 |` over a dataset.
pub fn eikonal_residual(params: &MlpParams, samples: &[crate::datagen::TrainingSample]) -> f64 {
    use rayon::prelude::*;
    let sum: f64 = samples
        .par_iter()
        .map(|s| {
            let g = mlp_input_gradient(params, &encode_input(&s.point(), &s.config())).unwrap();
            (g.norm() - 1.0).abs()
        })
        .sum();
    sum / samples.len() as f64
}

fn cmd_eval(model_path: &Path, val_path: &Path, out_csv: Option<&Path>) -> Result<()> {
    let model = ModelFile::load(model_path)?;
    let params = model.params();
    let (_, val) = read_dataset(val_path)?;
    let preds = predict_all(&params, &val);
    let targets: Vec<f64> = val.iter().map(|s| s.d).collect();
    let metrics = compute_error_metrics(&preds, &targets)?;
    let residual = eikonal_residual(&params, &val);
    if let Some(csv) = out_csv {
        atomic_write(
            csv,
            format!(
                "mae,rmse,moe,eikonal_residual\n{},{},{},{}\n",
                metrics.mae, metrics.rmse, metrics.moe, residual
            )
            .as_bytes(),
        )?;
        write_manifest(
            "eval",
            serde_json::json!({"model": model_path.display().to_string()}),
            vec![],
            &[csv],
        )?;
    }
    println!(
        "mae={} rmse={} moe={} eikonal_residual={}",
        metrics.mae, metrics.rmse, metrics.moe, residual
    );
    Ok(())
}

/// Training-domain box recorded in a model's metadata, with a safe default.
fn model_bounds(model: &ModelFile) -> Aabb {
    model
        .training_meta
        .get("bounds")
        .and_then(|b| serde_json::from_value(b.clone()).ok())
        .unwrap_or_else(default_bounds)
}

fn load_cedf(model_path: &Path, scenario: &Scenario) -> Result<RobotCedf> {
    let model = ModelFile::load(model_path)?;
    let bounds = model_bounds(&model);
    let cedf = RobotCedf::from_model_file(&model, bounds, scenario.robot.links.len());
    cedf.check_geometry(&scenario.robot.links)?;
    Ok(cedf)
}

fn cmd_plan(
    scenario_path: &Path,
    model_path: &Path,
    out: &Path,
    shape: &str,
    plot_csv: Option<&Path>,
) -> Result<()> {
    let scenario: Scenario = serde_json::from_str(&fs::read_to_string(scenario_path)?)?;
    let mode: ShapeMode = shape.parse()?;
    let cedf = load_cedf(model_path, &scenario)?;
    let result = run_episode(&scenario, &cedf, mode)?;

    let mut log = Vec::new();
    for rec in &result.records {
        serde_json::to_writer(&mut log, rec)?;
        log.push(b'\n');
    }
    atomic_write(out, &log)?;

    // wall-clock sidecar, deliberately separate from the deterministic log
    let mut timing = String::from("step,solve_ms\n");
    for (i, ms) in result.solve_ms.iter().enumerate() {
        timing.push_str(&format!("{i},{ms}\n"));
    }
    atomic_write(&out.with_extension("timing.csv"), timing.as_bytes())?;

    if let Some(plot) = plot_csv {
        let mut csv = String::from("step,ee_goal_dist,gt_clearance\n");
        for rec in &result.records {
            csv.push_str(&format!("{},{},{}\n", rec.step, rec.ee_goal_dist, rec.gt_clearance));
        }
        atomic_write(plot, csv.as_bytes())?;
    }

    write_manifest(
        "plan",
        serde_json::json!({
            "scenario": scenario_path.display().to_string(),
            "model": model_path.display().to_string(),
            "shape": shape,
        }),
        vec![scenario.seed],
        &[out],
    )?;

    let mean_ms = result.solve_ms.iter().sum::<f64>() / result.solve_ms.len().max(1) as f64;
    println!("outcome={} steps={} mean_solve_ms={:.3}", result.outcome, result.steps, mean_ms);
    Ok(())
}

fn cmd_bench(
    template_path: &Path,
    model_path: &Path,
    n_envs: usize,
    base_seed: u64,
    modes: &str,
    out: &Path,
) -> Result<()> {
    let template: Scenario = serde_json::from_str(&fs::read_to_string(template_path)?)?;
    let modes: Vec<ShapeMode> =
        modes.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?;
    if modes.is_empty() {
        return Err(Error::EmptyInput("cmd_bench needs at least one mode"));
    }
    let cedf = load_cedf(model_path, &template)?;
    let rows = run_benchmark(&template, n_envs, base_seed, &modes, &cedf)?;

    // rates only: the deterministic table must not contain wall-clock data
    let mut csv = String::from("mode,success,collision,stuck\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{},{}\n", row.mode, row.success, row.collision, row.stuck));
    }
    atomic_write(out, csv.as_bytes())?;

    let mut timing = String::from("mode,mppi_ms_mean,mppi_ms_sd\n");
    for row in &rows {
        timing.push_str(&format!("{},{},{}\n", row.mode, row.mppi_ms_mean, row.mppi_ms_sd));
    }
    atomic_write(&out.with_extension("timing.csv"), timing.as_bytes())?;

    write_manifest(
        "bench",
        serde_json::json!({
            "template": template_path.display().to_string(),
            "model": model_path.display().to_string(),
            "n_envs": n_envs,
            "modes": rows.iter().map(|r| r.mode.clone()).collect::<Vec<_>>(),
        }),
        (0..n_envs as u64).map(|i| base_seed + i).collect(),
        &[out],
    )?;

    for row in &rows {
        println!(
            "mode={} success={} collision={} stuck={} mppi_ms_mean={:.3} mppi_ms_sd={:.3}",
            row.mode, row.success, row.collision, row.stuck, row.mppi_ms_mean, row.mppi_ms_sd
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn net_parsing() {
        assert_eq!(parse_net("4,16").unwrap(), MlpParams::shape(4, 16));
        assert_eq!(parse_net(" 2 , 8 ").unwrap(), MlpParams::shape(2, 8));
        assert!(parse_net("4").is_err());
        assert!(parse_net("a,b").is_err());
        assert!(parse_net("0,16").is_err());
    }

    #[test]
    fn out_dir_override_applies_to_relative_paths_only() {
        // absolute paths bypass the override regardless of the env var
        let abs = Path::new("/tmp/x.json");
        assert_eq!(out_path(abs), abs);
    }
}
