//! Steps shared by the subcommands: data preparation, teacher pretraining
//! and fine-tuning, distillation and the information probes.

use remem::data::{generate_shapes, load_dataset, split, Dataset, ShapesSpec};
use remem::distill::{train_student, vit_accuracy, StudentModel, StudentRun, Teacher, VitTeacher};
use remem::finetune::{finetune, pretrain, FinetuneConfig, FinetuneRun};
use remem::infometer::{info_plane_point, InfoPlanePoint};
use remem::nn::{load_checkpoint, ReMemConfig, VitModel};
use remem::rng::{indexed_seed, sub_seed};

use crate::config::{DataSource, RunConfig};
use crate::{CliError, Result};

/// Train, test and probe images for one run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    /// Images the information probes reconstruct.
    pub probe: Dataset,
}

/// Builds the splits. Generator seeds in the config are offsets mixed with
/// the run seed, so changing `seed` alone redraws every split.
pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let ds = &cfg.dataset;
    let data_seed = indexed_seed(sub_seed(cfg.seed, "data"), ds.train.seed);
    let splits = match ds.source {
        DataSource::Shapes => {
            let draw = |label: &str, per_class: usize, noise: f64| {
                generate_shapes(&ShapesSpec {
                    samples_per_class: per_class,
                    noise,
                    seed: sub_seed(data_seed, label),
                    ..ds.train
                })
            };
            Splits {
                train: draw("train", ds.train.samples_per_class, ds.train.noise)?,
                test: draw("test", ds.test_samples_per_class, ds.train.noise)?,
                probe: draw("probe", ds.probe_samples_per_class, ds.probe_noise)?,
            }
        }
        DataSource::File => {
            let path = ds
                .path
                .as_deref()
                .ok_or_else(|| CliError::Config("dataset.path is required for a file source".into()))?;
            let full = load_dataset(path)?;
            if full.n_classes != cfg.vit.n_classes
                || full.channels != cfg.vit.channels
                || full.height != cfg.vit.image_size
                || full.width != cfg.vit.image_size
            {
                return Err(CliError::Config(format!(
                    "{}: {} classes of {}x{}x{} images do not match the vit config",
                    path.display(),
                    full.n_classes,
                    full.channels,
                    full.height,
                    full.width
                )));
            }
            let (train, test) = split(&full, ds.train_frac, ds.test_frac, sub_seed(data_seed, "split"))?;
            Splits {
                probe: test.clone(),
                train,
                test,
            }
        }
    };
    log::info!(
        "data: {} train, {} test, {} probe images",
        splits.train.len(),
        splits.test.len(),
        splits.probe.len()
    );
    Ok(splits)
}

/// The teacher before fine-tuning: pretrained on the broad shape vocabulary
/// when enabled, with its head cut down to the target classes.
pub fn base_teacher(cfg: &RunConfig) -> Result<VitModel> {
    let seed = sub_seed(cfg.seed, "teacher");
    if !cfg.pretrain.enabled {
        return Ok(VitModel::new(cfg.vit, sub_seed(seed, "init"))?);
    }
    let pre = &cfg.pretrain;
    let data = generate_shapes(&ShapesSpec {
        seed: indexed_seed(sub_seed(cfg.seed, "pretrain-data"), pre.data.seed),
        ..pre.data
    })?;
    let mut model = VitModel::new(
        remem::nn::VitConfig {
            n_classes: pre.data.n_classes,
            ..cfg.vit
        },
        sub_seed(seed, "init"),
    )?;
    let losses = pretrain(&model, &data, &pre.optim, sub_seed(seed, "pretrain"))?;
    log::info!(
        "pretrained on {} images, final loss {:.4}",
        data.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    model.resize_head(cfg.vit.n_classes, sub_seed(seed, "head"))?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: VitModel,
    pub run: FinetuneRun,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Fine-tunes a copy of `base` under `remem`, then scores it under the same
/// setting.
pub fn finetune_teacher(
    base: &VitModel,
    remem: &ReMemConfig,
    ft: &FinetuneConfig,
    splits: &Splits,
    seed: u64,
) -> Result<TrainedTeacher> {
    let mut model = base.snapshot();
    let run = finetune(&mut model, remem, &splits.train, ft, sub_seed(seed, "finetune"))?;
    let train_acc = vit_accuracy(&model, remem, &splits.train)?;
    let test_acc = vit_accuracy(&model, remem, &splits.test)?;
    log::info!("teacher fine-tuned: train {train_acc:.3}, test {test_acc:.3}");
    Ok(TrainedTeacher {
        model,
        run,
        train_acc,
        test_acc,
    })
}

/// The base model with the weights kept at `step` of a fine-tuning run.
pub fn at_checkpoint(base: &VitModel, run: &FinetuneRun, step: usize) -> Result<VitModel> {
    let state = run
        .checkpoint(step)
        .ok_or_else(|| CliError::Config(format!("no teacher snapshot at step {step}")))?;
    let model = base.snapshot();
    model.load_state(state)?;
    Ok(model)
}

/// The teacher the analysis commands inspect: loaded from
/// `distill.teacher_checkpoint` when set, otherwise fine-tuned under the
/// run's settings.
pub fn resolve_teacher(cfg: &RunConfig, splits: &Splits) -> Result<VitModel> {
    match &cfg.distill.teacher_checkpoint {
        Some(path) => Ok(load_checkpoint(cfg.vit, path)?),
        None => {
            let base = base_teacher(cfg)?;
            Ok(finetune_teacher(&base, &cfg.remem, &cfg.finetune(), splits, cfg.seed)?.model)
        }
    }
}

/// Setting the teacher is queried under during distillation.
pub fn query_setting(cfg: &RunConfig) -> ReMemConfig {
    if cfg.distill.teacher_remem {
        cfg.remem
    } else {
        ReMemConfig::neutral()
    }
}

/// Distills a fresh student from `teacher` (labels only when `None`).
pub fn distill_student(
    cfg: &RunConfig,
    teacher: Option<(&VitModel, ReMemConfig)>,
    splits: &Splits,
    seed: u64,
) -> Result<StudentRun> {
    let seed = sub_seed(seed, "distill");
    let student = StudentModel::new(cfg.distill.student, sub_seed(seed, "student"))?;
    let mut opt = cfg.distill.optim.build(cfg.distill.kd.total_steps())?;
    let wrapped = teacher.map(|(model, remem)| VitTeacher { model, remem });
    let run = train_student(
        &student,
        wrapped.as_ref().map(|t| t as &dyn Teacher),
        &splits.train,
        &splits.test,
        &cfg.distill.kd,
        &mut opt,
        seed,
    )?;
    log::info!("student: final {:.3}, best {:.3}", run.final_acc, run.best_acc);
    Ok(run)
}

/// Places a teacher on the information plane using the probe images.
pub fn info_point(
    cfg: &RunConfig,
    tag: &str,
    model: &VitModel,
    remem: &ReMemConfig,
    splits: &Splits,
    seed: u64,
) -> Result<InfoPlanePoint> {
    let point = info_plane_point(tag, model, remem, &splits.test, &splits.probe, &cfg.mi, sub_seed(seed, "mi"))?;
    log::info!("{tag}: error {:.3}, mi proxy {:.4}", point.teacher_err, point.mi.mi_proxy);
    Ok(point)
}
