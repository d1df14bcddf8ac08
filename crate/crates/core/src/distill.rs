//! Students and distillation: logit matching, DIST and patient distillation
//! with mixup, plus the sweep protocol that picks the best student over
//! teacher checkpoints and hyperparameter grids.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{uniform, Linear, NamedTensor, Param, ReMemConfig, VitConfig, VitModel};
use crate::optim::{sgd_step, Schedule, SgdState};
use crate::rng::{indexed_seed, rng_for, sub_seed, Rng};
use crate::tensor::{no_grad, softmax_values, Tensor};

/// Rows per forward pass when evaluating or caching teacher outputs.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            input_dim: 256,
            hidden: 128,
            n_classes: 4,
        }
    }
}

/// Two-hidden-layer ReLU perceptron over flattened pixels.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub layers: [Linear; 3],
}

fn uniform_linear(rng: &mut Rng, d_in: usize, d_out: usize) -> Linear {
    let bound = 1.0 / (d_in as f64).sqrt();
    Linear {
        weight: Tensor::param(uniform(rng, d_in * d_out, bound), &[d_in, d_out]).expect("shape"),
        bias: Tensor::param(uniform(rng, d_out, bound), &[d_out]).expect("shape"),
    }
}

impl StudentModel {
    pub fn new(config: StudentConfig, seed: u64) -> Result<StudentModel> {
        if config.input_dim == 0 || config.hidden == 0 || config.n_classes < 2 {
            return Err(Error::Parameter(format!("bad student config {config:?}")));
        }
        let mut rng = rng_for(seed, "student-init");
        let layers = [
            uniform_linear(&mut rng, config.input_dim, config.hidden),
            uniform_linear(&mut rng, config.hidden, config.hidden),
            uniform_linear(&mut rng, config.hidden, config.n_classes),
        ];
        Ok(StudentModel { config, layers })
    }

    /// Logits for `[b, input_dim]` rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(x)?.relu();
        let h = self.layers[1].forward(&h)?.relu();
        self.layers[2].forward(&h)
    }

    pub fn parameters(&self) -> Vec<Param> {
        let mut out = Vec::with_capacity(6);
        for (i, l) in self.layers.iter().enumerate() {
            out.push(Param {
                name: format!("fc{i}.weight"),
                tensor: l.weight.clone(),
                decay: true,
            });
            out.push(Param {
                name: format!("fc{i}.bias"),
                tensor: l.bias.clone(),
                decay: false,
            });
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn state(&self) -> Vec<NamedTensor> {
        self.parameters()
            .into_iter()
            .map(|p| (p.name, p.tensor.shape().to_vec(), p.tensor.to_vec()))
            .collect()
    }

    pub fn load_state(&self, state: &[NamedTensor]) -> Result<()> {
        let params = self.parameters();
        if state.len() != params.len() {
            return Err(Error::Validation(format!(
                "student state has {} tensors, model has {}",
                state.len(),
                params.len()
            )));
        }
        for (p, (name, shape, _)) in params.iter().zip(state) {
            if &p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    found: shape.clone(),
                });
            }
        }
        for (p, (_, _, values)) in params.iter().zip(state) {
            p.tensor.set_data(values.clone())?;
        }
        Ok(())
    }

    pub fn logits_for(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let _g = no_grad();
        let mut out = Vec::with_capacity(dataset.len() * self.config.n_classes);
        let all = dataset.all_indices();
        for chunk in all.chunks(EVAL_CHUNK) {
            out.extend(self.forward(&dataset.flat_batch(chunk)?)?.to_vec());
        }
        Ok(out)
    }

    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        Ok(accuracy(&self.logits_for(dataset)?, self.config.n_classes, &dataset.labels))
    }
}

/// Fraction of rows whose argmax (lowest index on ties) matches the label.
pub fn accuracy(logits: &[f64], n_classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .chunks(n_classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A frozen source of soft targets.
pub trait Teacher {
    /// Logits for a `[b, c, h, w]` batch, off the tape.
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

/// A ViT teacher evaluated under a fixed reweighting/pruning setting.
pub struct VitTeacher<'a> {
    pub model: &'a VitModel,
    pub remem: ReMemConfig,
}

impl Teacher for VitTeacher<'_> {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let _g = no_grad();
        Ok(self.model.forward(&self.remem, images)?.logits.detach())
    }
}

/// Test accuracy of a ViT under a reweighting setting.
pub fn vit_accuracy(model: &VitModel, remem: &ReMemConfig, dataset: &Dataset) -> Result<f64> {
    let _g = no_grad();
    let mut logits = Vec::with_capacity(dataset.len() * model.config.n_classes);
    for chunk in dataset.all_indices().chunks(EVAL_CHUNK) {
        logits.extend(model.forward(remem, &dataset.batch(chunk)?)?.logits.to_vec());
    }
    Ok(accuracy(&logits, model.config.n_classes, &dataset.labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdAlgorithm {
    LogitMatch,
    Dist,
    Patient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub algorithm: KdAlgorithm,
    /// Weight of the label cross-entropy; `1 − lambda` goes to the teacher term.
    pub lambda: f64,
    pub temperature: f64,
    pub dist_beta: f64,
    pub dist_gamma: f64,
    pub mixup_alpha: f64,
    pub steps: usize,
    /// Step multiplier applied for patient distillation.
    pub patient_factor: usize,
    pub batch_size: usize,
    pub eval_every: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            algorithm: KdAlgorithm::LogitMatch,
            lambda: 0.5,
            temperature: 2.0,
            dist_beta: 1.0,
            dist_gamma: 1.0,
            mixup_alpha: 0.8,
            steps: 400,
            patient_factor: 10,
            batch_size: 32,
            eval_every: 100,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        check_weights(self.lambda, self.temperature)?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Parameter("batch_size and eval_every must be positive".into()));
        }
        if self.algorithm == KdAlgorithm::Patient && (!(self.mixup_alpha > 0.0) || self.patient_factor < 2) {
            return Err(Error::Parameter(
                "patient distillation needs mixup_alpha > 0 and patient_factor ≥ 2".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_mixup(&self) -> bool {
        self.algorithm == KdAlgorithm::Patient
    }

    pub fn total_steps(&self) -> usize {
        match self.algorithm {
            KdAlgorithm::Patient => self.steps * self.patient_factor,
            _ => self.steps,
        }
    }
}

fn check_weights(lambda: f64, temperature: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// Class targets: integer labels or probability rows (mixed one-hots).
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(&'a Tensor),
}

fn label_loss(student_logits: &Tensor, targets: Targets<'_>) -> Result<Tensor> {
    match targets {
        Targets::Hard(y) => student_logits.cross_entropy(y),
        Targets::Soft(t) => student_logits.soft_cross_entropy(t),
    }
}

fn softened(teacher_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let c = *teacher_logits.shape().last().unwrap_or(&1);
    Tensor::new(
        softmax_values(&teacher_logits.to_vec(), c, temperature),
        teacher_logits.shape(),
    )
}

/// `λ·CE + (1−λ)·T²·KL(softmax(t/T) ‖ softmax(s/T))`, teacher detached.
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    lambda: f64,
    temperature: f64,
) -> Result<Tensor> {
    kd_loss_with(student_logits, teacher_logits, Targets::Hard(labels), lambda, temperature)
}

pub fn kd_loss_with(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    targets: Targets<'_>,
    lambda: f64,
    temperature: f64,
) -> Result<Tensor> {
    check_weights(lambda, temperature)?;
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::shape("kd_loss", student_logits.shape(), teacher_logits.shape()));
    }
    let ce = label_loss(student_logits, targets)?;
    if lambda == 1.0 {
        return Ok(ce);
    }
    let target = softened(teacher_logits, temperature)?;
    let kl = student_logits.kl_div_from_logits(&target, temperature)?;
    ce.scale(lambda).add(&kl.scale((1.0 - lambda) * temperature * temperature))
}

/// Correlation-based relation terms between student and teacher
/// probabilities.
#[derive(Debug, Clone)]
pub struct DistTerms {
    /// Mean over samples of one minus the row correlation.
    pub inter: Tensor,
    /// Mean over classes of one minus the column correlation.
    pub intra: Tensor,
    /// Rows plus columns with zero variance, counted as perfectly correlated.
    pub degenerate: usize,
}

pub fn dist_terms(student_probs: &Tensor, teacher_probs: &Tensor) -> Result<DistTerms> {
    let s = student_probs.shape();
    if s.len() != 2 || s[0] < 2 || s[1] < 2 {
        return Err(Error::Parameter(format!(
            "relation terms need at least a 2×2 batch, got {s:?}"
        )));
    }
    if teacher_probs.shape() != s {
        return Err(Error::shape("dist_terms", s, teacher_probs.shape()));
    }
    let teacher = teacher_probs.detach();
    let (rows, d_rows) = student_probs.pearson_rows(&teacher)?;
    let (cols, d_cols) = student_probs.transpose()?.pearson_rows(&teacher.transpose()?)?;
    let one_minus = |r: Tensor| r.neg().mean().add(&Tensor::scalar(1.0));
    let degenerate = d_rows + d_cols;
    if degenerate > 0 {
        log::warn!("relation loss: {d_rows} rows and {d_cols} columns have zero variance");
    }
    Ok(DistTerms {
        inter: one_minus(rows)?,
        intra: one_minus(cols)?,
        degenerate,
    })
}

/// `λ·CE + (1−λ)·(β·inter + γ·intra)` on probabilities softened at `T`.
pub fn dist_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    lambda: f64,
    beta: f64,
    gamma: f64,
    temperature: f64,
) -> Result<Tensor> {
    check_weights(lambda, temperature)?;
    let ce = student_logits.cross_entropy(labels)?;
    if lambda == 1.0 {
        return Ok(ce);
    }
    let terms = dist_terms(
        &student_logits.softmax(temperature)?,
        &softened(teacher_logits, temperature)?,
    )?;
    let relation = terms.inter.scale(beta).add(&terms.intra.scale(gamma))?;
    ce.scale(lambda).add(&relation.scale(1.0 - lambda))
}

/// Blends each example with a permuted partner: `x ← m·x + (1−m)·x[perm]`,
/// and the same for the target rows.
pub fn mixup_with(images: &[f64], targets: &[f64], batch: usize, mix: f64, perm: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let blend = |buf: &[f64]| {
        let w = buf.len() / batch.max(1);
        let mut out = Vec::with_capacity(buf.len());
        for (i, &j) in perm.iter().enumerate() {
            let (a, b) = (&buf[i * w..(i + 1) * w], &buf[j * w..(j + 1) * w]);
            out.extend(a.iter().zip(b).map(|(x, y)| mix * x + (1.0 - mix) * y));
        }
        out
    };
    (blend(images), blend(targets))
}

/// Draws the mixing weight from Beta(α, α) and a permutation from `rng`.
pub fn mixup(images: &[f64], targets: &[f64], batch: usize, alpha: f64, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let mix = sample_mix(alpha, rng)?;
    let mut perm: Vec<usize> = (0..batch).collect();
    perm.shuffle(rng);
    let (x, y) = mixup_with(images, targets, batch, mix, &perm);
    Ok((x, y, mix))
}

pub fn sample_mix(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Parameter(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * n_classes];
    for (i, &y) in labels.iter().enumerate() {
        out[i * n_classes + y] = 1.0;
    }
    out
}

/// Cycles through shuffled epochs of a dataset.
pub(crate) struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchStream {
    pub(crate) fn new(n: usize, batch: usize, rng: Rng) -> BatchStream {
        BatchStream {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng,
        }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    /// Training loss at every step.
    pub losses: Vec<f64>,
    /// `(steps completed, test accuracy)` at each evaluation.
    pub evals: Vec<(usize, f64)>,
    pub final_acc: f64,
    pub best_acc: f64,
    pub best_step: usize,
    pub best_state: Vec<NamedTensor>,
}

/// Optimizer settings for student training; the schedule is derived from
/// the step budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentOptim {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for StudentOptim {
    fn default() -> Self {
        StudentOptim {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 20,
        }
    }
}

impl StudentOptim {
    pub fn build(&self, total_steps: usize) -> Result<SgdState> {
        SgdState::new(
            Schedule::new(self.lr, self.warmup_steps.min(total_steps), total_steps)?,
            self.momentum,
            self.weight_decay,
        )
    }
}

/// Trains `student` against `teacher` (or labels alone when `None`).
/// Deterministic given `seed`; the teacher never receives gradients.
pub fn train_student(
    student: &StudentModel,
    teacher: Option<&dyn Teacher>,
    train: &Dataset,
    test: &Dataset,
    kd: &KdConfig,
    opt: &mut SgdState,
    seed: u64,
) -> Result<StudentRun> {
    kd.validate()?;
    if train.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }
    if train.pixels_per_image() != student.config.input_dim || train.n_classes != student.config.n_classes {
        return Err(Error::shape(
            "train_student",
            &[student.config.input_dim, student.config.n_classes],
            &[train.pixels_per_image(), train.n_classes],
        ));
    }
    let c = train.n_classes;
    let p = train.pixels_per_image();
    let params = student.parameters();
    let mut batches = BatchStream::new(train.len(), kd.batch_size, rng_for(seed, "student-batches"));
    let mut mix_rng = rng_for(seed, "mixup");

    // Without mixup the teacher sees only dataset images, so its logits are
    // computed once.
    let cached: Option<Vec<f64>> = match teacher {
        Some(t) if !kd.uses_mixup() && kd.lambda < 1.0 => {
            let mut all = Vec::with_capacity(train.len() * c);
            for chunk in train.all_indices().chunks(EVAL_CHUNK) {
                all.extend(t.logits(&train.batch(chunk)?)?.to_vec());
            }
            Some(all)
        }
        _ => None,
    };

    let total = kd.total_steps();
    let mut run = StudentRun {
        losses: Vec::with_capacity(total),
        evals: Vec::new(),
        final_acc: 0.0,
        best_acc: f64::NEG_INFINITY,
        best_step: 0,
        best_state: student.state(),
    };
    for step in 0..total {
        let idx = batches.next_batch();
        let b = idx.len();
        let labels = train.labels_of(&idx);
        let (images, soft) = if kd.uses_mixup() {
            let raw = train.batch(&idx)?.to_vec();
            let (x, y, _) = mixup(&raw, &one_hot(&labels, c), b, kd.mixup_alpha, &mut mix_rng)?;
            (x, Some(Tensor::new(y, &[b, c])?))
        } else {
            (train.batch(&idx)?.to_vec(), None)
        };
        let teacher_logits = match (teacher, &cached) {
            (_, Some(all)) => {
                let rows: Vec<f64> = idx.iter().flat_map(|&i| all[i * c..(i + 1) * c].iter().copied()).collect();
                Some(Tensor::new(rows, &[b, c])?)
            }
            (Some(t), None) if kd.lambda < 1.0 => {
                let shaped = Tensor::new(images.clone(), &[b, train.channels, train.height, train.width])?;
                Some(t.logits(&shaped)?)
            }
            _ => None,
        };
        let x = Tensor::new(images, &[b, p])?;
        let targets = match &soft {
            Some(t) => Targets::Soft(t),
            None => Targets::Hard(&labels),
        };
        let loss = sgd_step(opt, &params, step, || {
            let logits = student.forward(&x)?;
            match &teacher_logits {
                None => label_loss(&logits, targets),
                Some(t) => match kd.algorithm {
                    KdAlgorithm::Dist => dist_loss(
                        &logits,
                        t,
                        &labels,
                        kd.lambda,
                        kd.dist_beta,
                        kd.dist_gamma,
                        kd.temperature,
                    ),
                    _ => kd_loss_with(&logits, t, targets, kd.lambda, kd.temperature),
                },
            }
        })
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("student step {step}: {msg}")),
            other => other,
        })?;
        run.losses.push(loss);

        let done = step + 1;
        if done % kd.eval_every == 0 || done == total {
            let acc = student.accuracy(test)?;
            run.evals.push((done, acc));
            if acc > run.best_acc {
                run.best_acc = acc;
                run.best_step = done;
                run.best_state = student.state();
            }
        }
    }
    if total == 0 {
        run.best_acc = student.accuracy(test)?;
        run.evals.push((0, run.best_acc));
    }
    run.final_acc = run.evals.last().map_or(run.best_acc, |e| e.1);
    Ok(run)
}

/// Grids swept by [`run_protocol`]. Cells enumerate teacher variants
/// (checkpoint-major, then teacher LR), then student LR, λ and T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub checkpoint_steps: Vec<usize>,
    pub teacher_lrs: Vec<f64>,
    pub student_lrs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            checkpoint_steps: vec![200, 400],
            teacher_lrs: vec![0.01],
            student_lrs: vec![0.05],
            lambdas: vec![0.1, 0.5, 0.9],
            temperatures: vec![1.0, 2.0, 4.0],
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_steps.is_empty()
            || self.teacher_lrs.is_empty()
            || self.student_lrs.is_empty()
            || self.lambdas.is_empty()
            || self.temperatures.is_empty()
        {
            return Err(Error::Parameter("every protocol grid must be non-empty".into()));
        }
        Ok(())
    }

    pub fn cells_per_teacher(&self) -> usize {
        self.student_lrs.len() * self.lambdas.len() * self.temperatures.len()
    }
}

/// A frozen teacher snapshot, shareable across threads.
#[derive(Debug, Clone)]
pub struct TeacherVariant {
    pub ckpt_step: usize,
    pub teacher_lr: f64,
    pub config: VitConfig,
    pub remem: ReMemConfig,
    pub state: Vec<NamedTensor>,
    pub teacher_acc: f64,
}

impl TeacherVariant {
    pub fn build(&self) -> Result<VitModel> {
        let model = VitModel::new(self.config, 0)?;
        model.load_state(&self.state)?;
        model.set_trainable(false);
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub ckpt_step: usize,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub teacher_acc: f64,
    pub student_acc: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub rows: Vec<GridRow>,
    /// Index of the best successful row, earliest on ties.
    pub best: Option<usize>,
    pub failures: usize,
}

impl ProtocolResult {
    pub fn best_row(&self) -> Option<&GridRow> {
        self.best.map(|i| &self.rows[i])
    }
}

/// Everything a protocol cell needs besides its grid coordinates.
#[derive(Debug, Clone, Copy)]
pub struct CellSetup<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub kd: KdConfig,
    pub student: StudentConfig,
    pub optim: StudentOptim,
}

pub fn cell_seed(seed: u64, cell: usize) -> u64 {
    indexed_seed(sub_seed(seed, "protocol"), cell as u64)
}

/// Trains one student for a grid cell; also the direct entry point that
/// singleton protocols must agree with.
pub fn run_cell(
    variant: &TeacherVariant,
    setup: &CellSetup<'_>,
    student_lr: f64,
    lambda: f64,
    temperature: f64,
    seed: u64,
) -> Result<StudentRun> {
    let teacher_model = variant.build()?;
    let teacher = VitTeacher {
        model: &teacher_model,
        remem: variant.remem,
    };
    let kd = KdConfig {
        lambda,
        temperature,
        ..setup.kd
    };
    let student = StudentModel::new(setup.student, sub_seed(seed, "student"))?;
    let mut opt = StudentOptim {
        lr: student_lr,
        ..setup.optim
    }
    .build(kd.total_steps())?;
    train_student(&student, Some(&teacher), setup.train, setup.test, &kd, &mut opt, seed)
}

/// Sweeps the full grid. Cells run on up to `threads` workers and are
/// seeded by index, so the table does not depend on the thread count.
pub fn run_protocol(
    protocol: &EvalProtocol,
    variants: &[TeacherVariant],
    setup: &CellSetup<'_>,
    seed: u64,
    threads: usize,
) -> Result<ProtocolResult> {
    protocol.validate()?;
    setup.kd.validate()?;
    let mut ordered = Vec::with_capacity(variants.len());
    for &step in &protocol.checkpoint_steps {
        for &lr in &protocol.teacher_lrs {
            let v = variants
                .iter()
                .find(|v| v.ckpt_step == step && v.teacher_lr == lr)
                .ok_or_else(|| Error::Parameter(format!("no teacher variant for checkpoint {step}, lr {lr}")))?;
            ordered.push(v);
        }
    }
    let mut cells = Vec::new();
    for v in &ordered {
        for &slr in &protocol.student_lrs {
            for &lambda in &protocol.lambdas {
                for &t in &protocol.temperatures {
                    cells.push((*v, slr, lambda, t));
                }
            }
        }
    }
    let run = |i: usize| {
        let (v, slr, lambda, t) = cells[i];
        let outcome = run_cell(v, setup, slr, lambda, t, cell_seed(seed, i));
        let (student_acc, status) = match outcome {
            Ok(r) => (r.final_acc, "ok".to_string()),
            Err(e) => {
                log::warn!("protocol cell {i} failed: {e}");
                (f64::NAN, format!("failed: {e}"))
            }
        };
        GridRow {
            ckpt_step: v.ckpt_step,
            teacher_lr: v.teacher_lr,
            student_lr: slr,
            lambda,
            temperature: t,
            teacher_acc: v.teacher_acc,
            student_acc,
            status,
        }
    };
    let rows: Vec<GridRow> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        pool.install(|| (0..cells.len()).into_par_iter().map(run).collect())
    } else {
        (0..cells.len()).map(run).collect()
    };
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.status == "ok" && best.is_none_or(|b| r.student_acc > rows[b].student_acc) {
            best = Some(i);
        }
    }
    let failures = rows.iter().filter(|r| r.status != "ok").count();
    Ok(ProtocolResult { rows, best, failures })
}

pub const GRID_HEADER: &str = "ckpt_step,teacher_lr,student_lr,lambda,temperature,teacher_acc,student_acc,status";

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(GRID_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.ckpt_step.to_string(),
            r.teacher_lr.to_string(),
            r.student_lr.to_string(),
            r.lambda.to_string(),
            r.temperature.to_string(),
            r.teacher_acc.to_string(),
            r.student_acc.to_string(),
            r.status.clone(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("csv {}: {other:?}", path.display())),
    }
}
