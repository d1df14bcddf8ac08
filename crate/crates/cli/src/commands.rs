//! Subcommands. Each writes its reports plus `run.json` into the output
//! directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use remem::distill::{run_protocol, vit_accuracy, write_grid_csv, CellSetup, GridRow, StudentModel, TeacherVariant};
use remem::expertness::{criticality, expertness_profile, rank_by_sigma, write_criticality_csv, write_expertness_csv};
use remem::infometer::{write_info_plane_csv, InfoPlanePoint};
use remem::nn::{save_checkpoint, ReMemConfig};
use remem::rng::sub_seed;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ProbeSplit, RunConfig};
use crate::pipeline::{
    at_checkpoint, base_teacher, distill_student, finetune_teacher, info_point, prepare_data, query_setting,
    resolve_teacher,
};
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Finetune,
    Distill,
    Sweep,
    PruneSweep,
    Expertness,
    Mi,
    Criticality,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Finetune => "finetune",
            Command::Distill => "distill",
            Command::Sweep => "sweep",
            Command::PruneSweep => "prune-sweep",
            Command::Expertness => "expertness",
            Command::Mi => "mi",
            Command::Criticality => "criticality",
            Command::Ablate => "ablate",
        }
    }
}

/// What a finished run wrote, echoed as `run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_s: f64,
    /// SHA-256 over the resolved config and every input file it names.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub resolved_config: RunConfig,
}

/// Runs `cmd` under `cfg`. `threads` caps the parallel protocol cells.
pub fn run_command(cmd: Command, cfg: &RunConfig, threads: usize) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let input_hash = input_hash(cfg)?;
    log::info!("{} (seed {}) -> {}", cmd.name(), cfg.seed, dir.display());
    let outputs = match cmd {
        Command::Finetune => cmd_finetune(cfg)?,
        Command::Distill => cmd_distill(cfg)?,
        Command::Sweep => cmd_sweep(cfg, threads)?,
        Command::PruneSweep => cmd_prune_sweep(cfg)?,
        Command::Expertness => cmd_expertness(cfg)?,
        Command::Mi => cmd_mi(cfg)?,
        Command::Criticality => cmd_criticality(cfg)?,
        Command::Ablate => cmd_ablate(cfg)?,
    };
    let report = RunReport {
        command: cmd.name().to_string(),
        seed: cfg.seed,
        threads,
        wall_time_s: start.elapsed().as_secs_f64(),
        input_hash,
        outputs,
        resolved_config: cfg.clone(),
    };
    write_json(&dir.join("run.json"), &report)?;
    Ok(report)
}

fn input_hash(cfg: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    let files = [cfg.dataset.path.as_ref(), cfg.distill.teacher_checkpoint.as_ref()];
    for path in files.into_iter().flatten() {
        if path.exists() {
            h.update(fs::read(path).map_err(|e| CliError::io(path, e))?);
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn cmd_finetune(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let splits = prepare_data(cfg)?;
    let base = base_teacher(cfg)?;
    let teacher = finetune_teacher(&base, &cfg.remem, &cfg.finetune(), &splits, cfg.seed)?;
    let mut outputs = Vec::new();

    let ckpt = dir.join("teacher.rmem");
    save_checkpoint(&teacher.model, &ckpt)?;
    outputs.push(ckpt);
    let mut snapshots = Vec::new();
    for (step, _) in &teacher.run.checkpoints {
        if *step == cfg.schedule.steps {
            continue;
        }
        let model = at_checkpoint(&base, &teacher.run, *step)?;
        let file = format!("teacher_step{step}.rmem");
        let path = dir.join(&file);
        save_checkpoint(&model, &path)?;
        snapshots.push(json!({
            "step": step,
            "file": file,
            "test_acc": vit_accuracy(&model, &cfg.remem, &splits.test)?,
        }));
        outputs.push(path);
    }

    let losses = dir.join("finetune_loss.csv");
    let rows: Vec<Vec<String>> = teacher
        .run
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()])
        .collect();
    write_rows(&losses, &["step", "loss"], &rows)?;
    outputs.push(losses);

    let metrics = dir.join("teacher.json");
    write_json(
        &metrics,
        &json!({
            "train_acc": teacher.train_acc,
            "test_acc": teacher.test_acc,
            "steps": cfg.schedule.steps,
            "parameters": teacher.model.parameter_count(),
            "snapshots": snapshots,
        }),
    )?;
    outputs.push(metrics);
    Ok(outputs)
}

fn cmd_distill(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let splits = prepare_data(cfg)?;
    let teacher = resolve_teacher(cfg, &splits)?;
    let query = query_setting(cfg);
    let teacher_acc = vit_accuracy(&teacher, &query, &splits.test)?;
    let run = distill_student(cfg, Some((&teacher, query)), &splits, cfg.seed)?;

    let curve = dir.join("student.csv");
    let rows: Vec<Vec<String>> = run.evals.iter().map(|(s, a)| vec![s.to_string(), a.to_string()]).collect();
    write_rows(&curve, &["step", "test_acc"], &rows)?;
    let metrics = dir.join("distill.json");
    write_json(
        &metrics,
        &json!({
            "teacher_acc": teacher_acc,
            "student_final_acc": run.final_acc,
            "student_best_acc": run.best_acc,
            "student_best_step": run.best_step,
            "teacher_parameters": teacher.parameter_count(),
            "student_parameters": StudentModel::new(cfg.distill.student, 0)?.parameter_count(),
        }),
    )?;
    Ok(vec![curve, metrics])
}

fn cmd_sweep(cfg: &RunConfig, threads: usize) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let grid = &cfg.protocol.grid;
    let last = *grid.checkpoint_steps.iter().max().expect("validated non-empty");
    if last > cfg.schedule.steps {
        return Err(CliError::Config(format!(
            "protocol checkpoint {last} is beyond schedule.steps {}",
            cfg.schedule.steps
        )));
    }
    let splits = prepare_data(cfg)?;
    let base = base_teacher(cfg)?;
    let mut variants = Vec::new();
    for &lr in &grid.teacher_lrs {
        let mut ft = cfg.finetune();
        ft.lr = lr;
        ft.checkpoint_steps = grid.checkpoint_steps.clone();
        let teacher = finetune_teacher(&base, &cfg.remem, &ft, &splits, cfg.seed)?;
        for &step in &grid.checkpoint_steps {
            let model = at_checkpoint(&base, &teacher.run, step)?;
            variants.push(TeacherVariant {
                ckpt_step: step,
                teacher_lr: lr,
                config: model.config,
                remem: query_setting(cfg),
                teacher_acc: vit_accuracy(&model, &query_setting(cfg), &splits.test)?,
                state: model.state(),
            });
        }
    }
    let setup = CellSetup {
        train: &splits.train,
        test: &splits.test,
        kd: cfg.distill.kd,
        student: cfg.distill.student,
        optim: cfg.distill.optim,
    };
    let result = run_protocol(grid, &variants, &setup, sub_seed(cfg.seed, "sweep"), threads)?;
    if result.failures > 0 {
        log::warn!("{} of {} cells failed", result.failures, result.rows.len());
    }
    let table = dir.join("grid.csv");
    write_grid_csv(&table, &result.rows)?;
    let best = dir.join("best.json");
    let best_row: Option<&GridRow> = result.best_row();
    write_json(&best, &json!({ "best": best_row, "failures": result.failures }))?;
    Ok(vec![table, best])
}

fn cmd_prune_sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let splits = prepare_data(cfg)?;
    let base = base_teacher(cfg)?;
    let ft = cfg.finetune();
    let n = cfg.vit.n_layers;
    let mut points: Vec<InfoPlanePoint> = Vec::with_capacity(2 * (n + 1));
    let unpruned = {
        let t = finetune_teacher(&base, &cfg.remem, &ft, &splits, cfg.seed)?;
        info_point(cfg, "mlp:0", &t.model, &cfg.remem, &splits, cfg.seed)?
    };
    for kind in ["mlp", "attn"] {
        for k in 0..=n {
            if k == 0 {
                points.push(InfoPlanePoint {
                    tag: format!("{kind}:0"),
                    ..unpruned.clone()
                });
                continue;
            }
            let remem = match kind {
                "mlp" => ReMemConfig {
                    prune_mlp_top_k: k,
                    ..cfg.remem
                },
                _ => ReMemConfig {
                    prune_attn_top_k: k,
                    ..cfg.remem
                },
            };
            let t = finetune_teacher(&base, &remem, &ft, &splits, cfg.seed)?;
            points.push(info_point(cfg, &format!("{kind}:{k}"), &t.model, &remem, &splits, cfg.seed)?);
        }
    }
    let path = cfg.output_dir.join("prune_sweep.csv");
    write_info_plane_csv(&path, &points)?;
    Ok(vec![path])
}

fn cmd_expertness(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let splits = prepare_data(cfg)?;
    let teacher = resolve_teacher(cfg, &splits)?;
    let data = match cfg.expertness.split {
        ProbeSplit::Train => &splits.train,
        ProbeSplit::Probe => &splits.probe,
    };
    let k = cfg.expertness.k.unwrap_or(cfg.vit.n_classes);
    let rows = expertness_profile(&teacher, &cfg.remem, data, k, sub_seed(cfg.seed, "expertness"))?;
    let path = cfg.output_dir.join("expertness.csv");
    write_expertness_csv(&path, &rows)?;
    Ok(vec![path])
}

fn cmd_mi(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let splits = prepare_data(cfg)?;
    let teacher = resolve_teacher(cfg, &splits)?;
    let point = info_point(cfg, "teacher", &teacher, &cfg.remem, &splits, cfg.seed)?;
    let table = cfg.output_dir.join("info_plane.csv");
    write_info_plane_csv(&table, std::slice::from_ref(&point))?;
    let summary = cfg.output_dir.join("mi.json");
    write_json(&summary, &point)?;
    Ok(vec![table, summary])
}

fn cmd_criticality(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let splits = prepare_data(cfg)?;
    let teacher = resolve_teacher(cfg, &splits)?;
    let n = cfg.vit.n_layers;
    let layers: Vec<usize> = if cfg.expertness.criticality_layers.is_empty() {
        (0..n).filter(|&l| !cfg.remem.mlp_pruned(l, n)).collect()
    } else {
        cfg.expertness.criticality_layers.clone()
    };
    if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
        return Err(CliError::Config(format!("criticality layer {bad} out of range for {n} layers")));
    }
    let mut rows = Vec::new();
    for layer in layers {
        rows.extend(criticality(&teacher, &cfg.remem, &splits.probe, layer)?);
    }
    let path = cfg.output_dir.join("criticality.csv");
    write_criticality_csv(&path, &rank_by_sigma(rows))?;
    Ok(vec![path])
}

/// Reweighting strength and SAM radius of the ablation's active arms: the
/// run's own settings when they are active, else the first grid entries.
pub fn ablation_settings(cfg: &RunConfig) -> (ReMemConfig, f64) {
    let reweight = if cfg.remem.is_neutral() {
        ReMemConfig::reweight(cfg.protocol.alpha_grid.first().copied().unwrap_or(1.0))
    } else {
        cfg.remem
    };
    let rho = if cfg.optimizer.sam_rho > 0.0 {
        cfg.optimizer.sam_rho
    } else {
        cfg.protocol.rho_grid.first().copied().unwrap_or(0.0)
    };
    (reweight, rho)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let splits = prepare_data(cfg)?;
    let base = base_teacher(cfg)?;
    let (reweight, rho) = ablation_settings(cfg);
    let neutral = ReMemConfig::neutral();
    let arms = [
        ("baseline", neutral, 0.0),
        ("reweight", reweight, 0.0),
        ("sam", neutral, rho),
        ("remem", reweight, rho),
    ];
    let mut rows = Vec::new();
    for (name, remem, sam_rho) in arms {
        let mut ft = cfg.finetune();
        ft.sam_rho = sam_rho;
        let teacher = finetune_teacher(&base, &remem, &ft, &splits, cfg.seed)?;
        let point = info_point(cfg, name, &teacher.model, &remem, &splits, cfg.seed)?;
        let student = distill_student(cfg, Some((&teacher.model, remem)), &splits, cfg.seed)?;
        rows.push(vec![
            name.to_string(),
            remem.alpha_mlp.to_string(),
            sam_rho.to_string(),
            teacher.test_acc.to_string(),
            point.mi.mi_proxy.to_string(),
            student.final_acc.to_string(),
        ]);
    }
    let path = cfg.output_dir.join("ablate.csv");
    write_rows(
        &path,
        &["variant", "alpha_mlp", "sam_rho", "teacher_acc", "mi_proxy", "student_acc"],
        &rows,
    )?;
    Ok(vec![path])
}
