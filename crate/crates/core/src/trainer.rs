//! Staged training: weights with gates off, gates with weights frozen, prune,
//! finetune. Also the joint ablation and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::{sgd_update, softmax_cross_entropy, BnConfig, Mode, Real, Rng, Tensor};
use crate::config::TrainConfig;
use crate::data::{augment, gen_synthetic, load_cifar10, AugmentFlags, Dataset, Split};
use crate::error::{Error, Result};
use crate::gating::{binarization_stats, penalty};
use crate::model::{preset, Batch, Model, ModelSpec, Targets, Topology};
use crate::pruner::{
    apply_masks_as_gates, count_flops, count_params, derive_masks, equivalence_check, prune,
    ArchReport, ChannelMask,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Weights,
    Arch,
    Prune,
    Finetune,
    Joint,
    Done,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Weights => "weights",
            Stage::Arch => "arch",
            Stage::Prune => "prune",
            Stage::Finetune => "finetune",
            Stage::Joint => "joint",
            Stage::Done => "done",
        }
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: Stage,
    pub epoch: usize,
    pub total_loss: f64,
    pub ce_loss: f64,
    pub penalty: f64,
    pub top1: f64,
    pub top5: f64,
    pub delta: f64,
    pub fraction_binarized: f64,
    pub fraction_active: f64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub rows: Vec<MetricsRow>,
}

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

impl Data {
    /// Synthetic sets are generated from the seed; CIFAR-10 is read from `data_dir`.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        match cfg.dataset.synthetic() {
            Some(kind) => Ok(Data {
                train: gen_synthetic(
                    kind,
                    cfg.synthetic_train,
                    cfg.num_classes,
                    cfg.seed,
                    cfg.image_size,
                    Split::Train,
                )?,
                test: gen_synthetic(
                    kind,
                    cfg.synthetic_test,
                    cfg.num_classes,
                    cfg.seed,
                    cfg.image_size,
                    Split::Test,
                )?,
            }),
            None => {
                if cfg.data_dir.is_empty() {
                    return Err(Error::Dataset("dataset = cifar10 needs data_dir".into()));
                }
                let subset = (cfg.subset_per_class > 0).then_some(cfg.subset_per_class);
                let (train, test) = load_cifar10(Path::new(&cfg.data_dir), subset)?;
                Ok(Data { train, test })
            }
        }
    }
}

/// Preset network for `cfg`, sized to the configured input.
pub fn build_model(cfg: &TrainConfig) -> Result<Model<f32>> {
    let mut spec = if cfg.model_spec.is_empty() {
        preset(&cfg.model, cfg.num_classes)?
    } else {
        let path = Path::new(&cfg.model_spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: ModelSpec = serde_json::from_str(&text)?;
        spec.num_classes = cfg.num_classes;
        spec
    };
    spec.order = cfg.gate_order;
    if cfg.dataset.synthetic().is_some() {
        spec.input_size = cfg.image_size;
    }
    let mut model = Model::new(&spec, &mut Rng::with_stream(cfg.seed, 0))?;
    model.bn_config = BnConfig {
        eps: cfg.bn_eps,
        momentum: cfg.bn_momentum,
    };
    model.grad_form = cfg.grad_form;
    Ok(model)
}

/// Full-width network of the same spec, for cost ratios.
pub fn baseline_of<T: Real>(model: &Model<T>) -> Result<Model<T>> {
    Model::skeleton(&model.spec, &Topology::full(&model.spec))
}

/// Whether `label` is among the `k` largest logits, ties going to the lower index.
pub fn in_top_k<T: Real>(logits: &[T], label: usize, k: usize) -> bool {
    let l = logits[label];
    if l.is_nan() {
        return false;
    }
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > l || (v == l && j < label))
        .count();
    rank < k
}

/// Top-1 and top-5 accuracy in percent, eval mode.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let (mut c1, mut c5) = (0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch(chunk)?;
        let logits = model.infer(&b.images, Mode::Eval)?;
        let k = model.num_classes();
        for (i, &l) in b.labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            c1 += in_top_k(row, l, 1) as usize;
            c5 += in_top_k(row, l, 5) as usize;
        }
    }
    let n = data.len() as f64;
    Ok((100.0 * c1 as f64 / n, 100.0 * c5 as f64 / n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EpochKind {
    Weights { lr: f64 },
    Arch { lr: f64 },
    Joint { lr_w: f64, lr_a: f64 },
}

/// Mean cross-entropy and mean penalty over the minibatches of one epoch.
fn run_epoch(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    kind: EpochKind,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let flags = AugmentFlags {
        flip: cfg.augment_flip,
        pad_crop: cfg.augment_crop,
    };
    let (mode, targets) = match kind {
        EpochKind::Weights { .. } => (Mode::Train, Targets::Weights),
        EpochKind::Arch { .. } => (Mode::Eval, Targets::Gates),
        EpochKind::Joint { .. } => (Mode::Train, Targets::Both),
    };
    let (mut ce_sum, mut pen_sum, mut steps) = (0f64, 0f64, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        // A lone sample cannot supply batch statistics.
        if chunk.len() < 2 && mode == Mode::Train {
            continue;
        }
        let batch = augment(&data.batch(chunk)?, flags, Split::Train, rng)?;
        model.zero_grad();
        let logits = model.forward(&batch.images, mode)?;
        let (ce, dlogits) = softmax_cross_entropy(&logits, &batch.labels)?;
        model.backward(&dlogits, targets)?;
        let pen = match kind {
            EpochKind::Weights { .. } => 0.0,
            _ => penalty(model.gates_mut(), cfg.lambda_a, true),
        };
        if !ce.is_finite() {
            return Err(Error::State(format!("loss diverged to {ce}")));
        }
        match kind {
            EpochKind::Weights { lr } => update_weights(model, lr, cfg),
            EpochKind::Arch { lr } => update_gates(model, lr, cfg),
            EpochKind::Joint { lr_w, lr_a } => {
                update_weights(model, lr_w, cfg);
                update_gates(model, lr_a, cfg);
            }
        }
        ce_sum += ce;
        pen_sum += pen;
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "no minibatch of at least two samples".into(),
        ));
    }
    Ok((ce_sum / steps as f64, pen_sum / steps as f64))
}

fn update_weights(model: &mut Model<f32>, lr: f64, cfg: &TrainConfig) {
    let (lr, mu, wd) = (lr as f32, cfg.momentum as f32, cfg.lambda_w as f32);
    for (_, p) in model.params_mut() {
        sgd_update(p, lr, mu, wd);
    }
}

fn update_gates(model: &mut Model<f32>, lr: f64, cfg: &TrainConfig) {
    let (lr, mu) = (lr as f32, cfg.arch_momentum as f32);
    for g in model.gates_mut().filter(|g| g.enabled) {
        sgd_update(&mut g.s, lr, mu, 0.0);
    }
}

fn make_row(
    model: &mut Model<f32>,
    data: &Data,
    cfg: &TrainConfig,
    stage: Stage,
    epoch: usize,
    (ce, pen): (f64, f64),
) -> Result<MetricsRow> {
    let (top1, top5) = evaluate(model, &data.test, cfg.batch_size)?;
    let enabled = model.gates_enabled();
    let (delta, stats) = if enabled {
        let d = model
            .gates()
            .find(|g| g.enabled)
            .map(|g| g.delta as f64)
            .unwrap_or(0.0);
        (
            d,
            binarization_stats(model.gates().filter(|g| g.enabled), cfg.binarize_tol),
        )
    } else {
        // Disabled gates pass every channel unscaled.
        (
            0.0,
            crate::gating::BinarizationStats {
                fraction_binarized: 1.0,
                fraction_active: 1.0,
            },
        )
    };
    Ok(MetricsRow {
        stage,
        epoch,
        total_loss: ce + pen,
        ce_loss: ce,
        penalty: pen,
        top1,
        top5,
        delta,
        fraction_binarized: stats.fraction_binarized,
        fraction_active: stats.fraction_active,
        flops: count_flops(model)?,
        params: count_params(model),
    })
}

fn require_gates(model: &Model<f32>, enabled: bool, what: &str) -> Result<()> {
    if model.gates_enabled() != enabled {
        return Err(Error::State(format!(
            "{what} needs gates {}",
            if enabled { "enabled" } else { "disabled" }
        )));
    }
    Ok(())
}

fn require_bn(model: &Model<f32>) -> Result<()> {
    if model.bn_states().iter().any(|(_, b)| !b.populated) {
        return Err(Error::State(
            "batch-norm running statistics are missing; train weights first".into(),
        ));
    }
    Ok(())
}

fn weight_epoch(
    model: &mut Model<f32>,
    data: &Data,
    cfg: &TrainConfig,
    rng: &mut Rng,
    stage: Stage,
    epoch: usize,
    lr: f64,
) -> Result<MetricsRow> {
    require_gates(model, false, "weight training")?;
    let losses = run_epoch(model, &data.train, cfg, rng, EpochKind::Weights { lr })?;
    make_row(model, data, cfg, stage, epoch, losses)
}

fn arch_epoch(
    model: &mut Model<f32>,
    data: &Data,
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch: usize,
) -> Result<MetricsRow> {
    require_gates(model, true, "architecture training")?;
    require_bn(model)?;
    model.set_delta(cfg.schedule(cfg.arch_epochs).delta(epoch)?)?;
    let losses = run_epoch(
        model,
        &data.train,
        cfg,
        rng,
        EpochKind::Arch { lr: cfg.arch_lr },
    )?;
    make_row(model, data, cfg, Stage::Arch, epoch, losses)
}

fn joint_epoch(
    model: &mut Model<f32>,
    data: &Data,
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch: usize,
) -> Result<MetricsRow> {
    require_gates(model, true, "joint training")?;
    model.set_delta(cfg.schedule(cfg.joint_budget()).delta(epoch)?)?;
    let losses = run_epoch(
        model,
        &data.train,
        cfg,
        rng,
        EpochKind::Joint {
            lr_w: cfg.weight_lr,
            lr_a: cfg.arch_lr,
        },
    )?;
    make_row(model, data, cfg, Stage::Joint, epoch, losses)
}

/// `weight_epochs` epochs of SGD on the weights; gates must be disabled and stay untouched.
pub fn stage_weight_opt(
    model: &mut Model<f32>,
    data: &Data,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StageReport> {
    require_gates(model, false, "weight training")?;
    let mut rows = Vec::new();
    for e in 0..cfg.weight_epochs {
        rows.push(weight_epoch(
            model,
            data,
            cfg,
            rng,
            Stage::Weights,
            e,
            cfg.weight_lr,
        )?);
    }
    Ok(StageReport { rows })
}

/// Enables the gates at `s = 0` and trains only them for `arch_epochs` epochs with
/// BN in eval mode and the scale following the schedule.
pub fn stage_arch_opt(
    model: &mut Model<f32>,
    data: &Data,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StageReport> {
    require_bn(model)?;
    model.enable_gates(cfg.delta0)?;
    let mut rows = Vec::new();
    for e in 0..cfg.arch_epochs {
        rows.push(arch_epoch(model, data, cfg, rng, e)?);
    }
    Ok(StageReport { rows })
}

/// `finetune_epochs` epochs on a pruned model with the decaying rate.
pub fn stage_finetune(
    model: &mut Model<f32>,
    data: &Data,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StageReport> {
    require_gates(model, false, "finetuning")?;
    if model.layers().iter().any(|l| l.out_map.is_empty()) {
        return Err(Error::LayerCollapse {
            layer: model
                .layers()
                .iter()
                .position(|l| l.out_map.is_empty())
                .unwrap_or(0),
        });
    }
    let mut rows = Vec::new();
    for e in 0..cfg.finetune_epochs {
        rows.push(weight_epoch(
            model,
            data,
            cfg,
            rng,
            Stage::Finetune,
            e,
            cfg.finetune_lr_at(e),
        )?);
    }
    Ok(StageReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    /// Epochs of `stage` already completed.
    pub epoch: usize,
}

/// A run that can stop after any epoch and be resumed from a checkpoint.
#[derive(Clone, Debug)]
pub struct Session {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub rng: Rng,
    pub progress: Progress,
    pub rows: Vec<MetricsRow>,
    pub masks: Option<ChannelMask>,
    pub equivalence: Option<f64>,
    /// Gates as they stood before pruning, for reporting.
    pub pre_prune_s: Option<Vec<Vec<f32>>>,
}

impl Session {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = build_model(&cfg)?;
        let stage = if cfg.joint_mode {
            model.enable_gates(cfg.delta0)?;
            Stage::Joint
        } else {
            Stage::Weights
        };
        Ok(Session {
            rng: Rng::with_stream(cfg.seed, 7),
            cfg,
            model,
            progress: Progress { stage, epoch: 0 },
            rows: Vec::new(),
            masks: None,
            equivalence: None,
            pre_prune_s: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.progress.stage == Stage::Done
    }

    fn advance(&mut self, stage: Stage) -> Result<()> {
        if stage == Stage::Arch {
            self.model.enable_gates(self.cfg.delta0)?;
        }
        self.progress = Progress { stage, epoch: 0 };
        Ok(())
    }

    /// Runs one epoch or one stage transition.
    pub fn step(&mut self, data: &Data) -> Result<()> {
        let Progress { stage, epoch } = self.progress.clone();
        let cfg = self.cfg.clone();
        match stage {
            Stage::Weights if epoch < cfg.weight_epochs => {
                let row = weight_epoch(
                    &mut self.model,
                    data,
                    &cfg,
                    &mut self.rng,
                    Stage::Weights,
                    epoch,
                    cfg.weight_lr,
                )?;
                self.finish_epoch(row);
            }
            Stage::Weights => self.advance(if cfg.arch_epochs > 0 {
                Stage::Arch
            } else {
                Stage::Prune
            })?,
            Stage::Arch if epoch < cfg.arch_epochs => {
                let row = arch_epoch(&mut self.model, data, &cfg, &mut self.rng, epoch)?;
                self.finish_epoch(row);
            }
            Stage::Arch => self.advance(Stage::Prune)?,
            Stage::Joint if epoch < cfg.joint_budget() => {
                let row = joint_epoch(&mut self.model, data, &cfg, &mut self.rng, epoch)?;
                self.finish_epoch(row);
            }
            Stage::Joint => self.advance(Stage::Prune)?,
            Stage::Prune => {
                self.prune_now()?;
                self.advance(if cfg.joint_mode {
                    Stage::Done
                } else {
                    Stage::Finetune
                })?;
            }
            Stage::Finetune if epoch < cfg.finetune_epochs => {
                let row = weight_epoch(
                    &mut self.model,
                    data,
                    &cfg,
                    &mut self.rng,
                    Stage::Finetune,
                    epoch,
                    cfg.finetune_lr_at(epoch),
                )?;
                self.finish_epoch(row);
            }
            Stage::Finetune => self.advance(Stage::Done)?,
            Stage::Done => {}
        }
        Ok(())
    }

    fn finish_epoch(&mut self, row: MetricsRow) {
        log::info!(
            "{} epoch {}: loss {:.4} (ce {:.4}, penalty {:.3e}) top1 {:.2} delta {} binarized {:.3}",
            row.stage.as_str(),
            row.epoch,
            row.total_loss,
            row.ce_loss,
            row.penalty,
            row.top1,
            row.delta,
            row.fraction_binarized
        );
        self.rows.push(row);
        self.progress.epoch += 1;
    }

    fn prune_now(&mut self) -> Result<()> {
        let gated = self.model.gates_enabled();
        let masks = if gated {
            derive_masks(&self.model, self.cfg.collapse_policy)
        } else {
            ChannelMask::full(&self.model)
        };
        for l in masks.rescued_layers() {
            log::warn!("layer {l}: every gate closed; keeping the channel with the largest s");
        }
        let pruned = prune(&self.model, &masks)?;
        if self.model.bn_states().iter().all(|(_, b)| b.populated)
            && self.cfg.equivalence_inputs > 0
        {
            let binary = apply_masks_as_gates(&self.model, &masks)?;
            let mut rng = Rng::with_stream(self.cfg.seed, 11);
            let diff = equivalence_check(&binary, &pruned, self.cfg.equivalence_inputs, &mut rng)?;
            log::info!("pruned vs binary-gated logits: max |diff| = {diff:.3e}");
            self.equivalence = Some(diff);
        }
        self.pre_prune_s = gated.then(|| {
            self.model
                .gates()
                .map(|g| g.s.value.data().to_vec())
                .collect()
        });
        self.masks = Some(masks);
        self.model = pruned;
        Ok(())
    }

    /// Steps while `keep_going(stage)` holds and the run is not finished.
    pub fn run_while(&mut self, data: &Data, keep_going: impl Fn(Stage) -> bool) -> Result<()> {
        while !self.is_done() && keep_going(self.progress.stage) {
            self.step(data)?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self, data: &Data) -> Result<()> {
        self.run_while(data, |_| true)
    }

    pub fn arch_report(&self) -> Result<ArchReport> {
        ArchReport::new(
            &baseline_of(&self.model)?,
            &self.model,
            self.masks.as_ref(),
            self.cfg.lambda_a,
            self.cfg.seed,
        )
    }
}

pub struct DnalOutcome {
    pub model: Model<f32>,
    pub report: ArchReport,
    pub stages: StageReport,
    pub masks: ChannelMask,
    pub equivalence: Option<f64>,
}

/// Weights, gates, prune, finetune.
pub fn run_dnal(cfg: &TrainConfig, data: &Data) -> Result<DnalOutcome> {
    let cfg = TrainConfig {
        joint_mode: false,
        ..cfg.clone()
    };
    let mut s = Session::new(cfg)?;
    s.run_to_end(data)?;
    let report = s.arch_report()?;
    Ok(DnalOutcome {
        masks: s
            .masks
            .clone()
            .unwrap_or_else(|| ChannelMask::full(&s.model)),
        model: s.model,
        report,
        stages: StageReport { rows: s.rows },
        equivalence: s.equivalence,
    })
}

/// Gate gradients measured with every gate pushed into saturation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub delta: f64,
    /// Smallest `|s|` after clamping.
    pub min_abs_s: f64,
    /// Gates whose `|s|` was raised to the floor.
    pub clamped: usize,
    pub gates: usize,
    pub max_abs_grad: f64,
    pub max_abs_grad_f64: f64,
}

fn saturated_grad<T: Real>(model: &mut Model<T>, batch: &Batch<f32>, lambda_a: f64) -> Result<f64> {
    model.zero_grad();
    let logits = model.forward(&batch.images.cast::<T>(), Mode::Train)?;
    let (_, dl) = softmax_cross_entropy(&logits, &batch.labels)?;
    model.backward(&dl, Targets::Gates)?;
    penalty(model.gates_mut(), lambda_a, true);
    Ok(model
        .gates()
        .flat_map(|g| {
            g.s.grad
                .data()
                .iter()
                .map(|v| v.as_f64().abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max))
}

/// Sets `delta` on every gate, lifts each `|s|` to at least `floor` (zero goes
/// negative), and returns the largest `|dL/ds|` of one train-mode step in 32-bit
/// and in 64-bit arithmetic.
pub fn measure_saturated_gradient(
    model: &Model<f32>,
    batch: &Batch<f32>,
    delta: f64,
    floor: f32,
    lambda_a: f64,
) -> Result<SaturationReport> {
    let mut m = model.clone();
    let mut clamped = 0;
    let mut gates = 0;
    let mut min_abs = f64::INFINITY;
    for g in m.gates_mut() {
        g.enabled = true;
        g.set_delta(delta)?;
        for s in g.s.value.data_mut() {
            gates += 1;
            if s.abs() < floor {
                *s = if *s > 0.0 { floor } else { -floor };
                clamped += 1;
            }
            min_abs = min_abs.min(s.abs() as f64);
        }
    }
    let max32 = saturated_grad(&mut m, batch, lambda_a)?;
    let mut m64 = m.cast::<f64>()?;
    let max64 = saturated_grad(&mut m64, batch, lambda_a)?;
    Ok(SaturationReport {
        delta,
        min_abs_s: min_abs,
        clamped,
        gates,
        max_abs_grad: max32,
        max_abs_grad_f64: max64,
    })
}

pub struct JointOutcome {
    pub model: Model<f32>,
    pub stages: StageReport,
    pub report: ArchReport,
    pub saturation: SaturationReport,
    pub final_top1: f64,
}

/// Completes a joint-mode session: trains the joint stage, probes the saturated
/// gate gradients, then prunes.
pub fn finish_joint(s: &mut Session, data: &Data) -> Result<SaturationReport> {
    if !s.cfg.joint_mode {
        return Err(Error::State("session is not in joint mode".into()));
    }
    if s.progress.stage != Stage::Joint {
        return Err(Error::State(format!(
            "joint run is already at stage {}",
            s.progress.stage.as_str()
        )));
    }
    s.run_while(data, |st| st == Stage::Joint)?;
    let probe_n = data.train.len().min(s.cfg.batch_size.max(2));
    let probe = data.train.batch(&(0..probe_n).collect::<Vec<_>>())?;
    let saturation =
        measure_saturated_gradient(&s.model, &probe, s.cfg.delta_max, 0.01, s.cfg.lambda_a)?;
    s.run_to_end(data)?;
    Ok(saturation)
}

/// Weights and gates trained together for the joint budget under the scale
/// schedule, then pruned; the saturated-gradient probe runs on the trained gates.
pub fn run_joint(cfg: &TrainConfig, data: &Data) -> Result<JointOutcome> {
    let mut s = Session::new(TrainConfig {
        joint_mode: true,
        ..cfg.clone()
    })?;
    let saturation = finish_joint(&mut s, data)?;
    let report = s.arch_report()?;
    let final_top1 = s.rows.last().map(|r| r.top1).unwrap_or(0.0);
    Ok(JointOutcome {
        model: s.model,
        stages: StageReport { rows: s.rows },
        report,
        saturation,
        final_top1,
    })
}

/// Initial logits of the network with every gate at `sigmoid(0) = 0.5`.
pub fn half_gated_logits(model: &Model<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut m = model.clone();
    m.enable_gates(1.0)?;
    m.infer(x, Mode::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetKind;

    fn blob_cfg() -> TrainConfig {
        TrainConfig {
            model: "tiny".into(),
            num_classes: 2,
            dataset: DatasetKind::Blobs,
            synthetic_train: 128,
            synthetic_test: 64,
            image_size: 8,
            batch_size: 16,
            weight_epochs: 2,
            arch_epochs: 3,
            finetune_epochs: 1,
            augment_crop: false,
            equivalence_inputs: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn model_spec_file_replaces_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let mut spec = preset("vgg_mini", 7).unwrap();
        spec.name = "custom".into();
        std::fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
        let cfg = TrainConfig {
            model_spec: path.display().to_string(),
            ..blob_cfg()
        };
        let m = build_model(&cfg).unwrap();
        assert_eq!(m.spec.name, "custom");
        assert_eq!(m.spec.num_classes, 2);
        assert_eq!(m.spec.units, spec.units);
        let missing = TrainConfig {
            model_spec: dir.path().join("nope.json").display().to_string(),
            ..blob_cfg()
        };
        assert!(matches!(build_model(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn top_k_tie_break() {
        let logits = [0.0f32; 10];
        let hits = (0..10).filter(|&l| in_top_k(&logits, l, 5)).count();
        assert_eq!(hits, 5);
        assert!(in_top_k(&logits, 4, 5) && !in_top_k(&logits, 5, 5));
        assert!(in_top_k(&[0.1f32, 0.9, 0.0], 1, 1));
        assert!(!in_top_k(&[f32::NAN, 0.0], 0, 5));
    }

    #[test]
    fn blobs_learned_in_two_epochs() {
        let cfg = blob_cfg();
        let data = Data::from_config(&cfg).unwrap();
        let mut model = build_model(&cfg).unwrap();
        let rep = stage_weight_opt(&mut model, &data, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(rep.rows.len(), 2);
        let (train_top1, _) = evaluate(&mut model, &data.train, 32).unwrap();
        assert!(train_top1 > 95.0, "{train_top1}");
        assert!(model
            .gates()
            .all(|g| !g.enabled && g.s.value.data().iter().all(|&s| s == 0.0)));
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let cfg = TrainConfig {
            weight_epochs: 0,
            ..blob_cfg()
        };
        let data = Data::from_config(&cfg).unwrap();
        let mut model = build_model(&cfg).unwrap();
        let before = model.clone();
        let rep = stage_weight_opt(&mut model, &data, &cfg, &mut Rng::new(0)).unwrap();
        assert!(rep.rows.is_empty());
        for ((_, a), (_, b)) in before.params().into_iter().zip(model.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn arch_stage_freezes_weights_and_reports_decomposed_loss() {
        let cfg = blob_cfg();
        let data = Data::from_config(&cfg).unwrap();
        let mut rng = Rng::new(1);
        let mut model = build_model(&cfg).unwrap();
        assert!(stage_arch_opt(&mut model, &data, &cfg, &mut rng).is_err());
        stage_weight_opt(&mut model, &data, &cfg, &mut rng).unwrap();
        let weights: Vec<Vec<u32>> = model
            .params()
            .iter()
            .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let bn: Vec<Vec<u32>> = model
            .bn_states()
            .iter()
            .map(|(_, b)| {
                b.running_mean
                    .data()
                    .iter()
                    .chain(b.running_var.data())
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        let rep = stage_arch_opt(&mut model, &data, &cfg, &mut rng).unwrap();
        let after: Vec<Vec<u32>> = model
            .params()
            .iter()
            .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let bn_after: Vec<Vec<u32>> = model
            .bn_states()
            .iter()
            .map(|(_, b)| {
                b.running_mean
                    .data()
                    .iter()
                    .chain(b.running_var.data())
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        assert_eq!(weights, after);
        assert_eq!(bn, bn_after);
        assert_eq!(
            rep.rows.iter().map(|r| r.delta).collect::<Vec<_>>(),
            vec![1.0, 100.0, 10000.0]
        );
        for r in &rep.rows {
            assert!((r.total_loss - (r.ce_loss + r.penalty)).abs() < 1e-6);
            assert!(r.top5 >= r.top1);
        }
    }

    #[test]
    fn finetune_keeps_gates_disabled() {
        let cfg = blob_cfg();
        let data = Data::from_config(&cfg).unwrap();
        let mut model = build_model(&cfg).unwrap();
        model.enable_gates(1.0).unwrap();
        assert!(stage_finetune(&mut model, &data, &cfg, &mut Rng::new(0)).is_err());
        model.disable_gates();
        stage_finetune(&mut model, &data, &cfg, &mut Rng::new(0)).unwrap();
        assert!(!model.gates_enabled());
    }

    #[test]
    fn session_is_deterministic_and_resumable() {
        let cfg = blob_cfg();
        let data = Data::from_config(&cfg).unwrap();
        let mut a = Session::new(cfg.clone()).unwrap();
        a.run_to_end(&data).unwrap();
        let mut b = Session::new(cfg.clone()).unwrap();
        b.run_while(&data, |s| s == Stage::Weights).unwrap();
        b.step(&data).unwrap();
        let mut c = b.clone();
        c.run_to_end(&data).unwrap();
        assert_eq!(a.rows, c.rows);
        assert_eq!(a.masks, c.masks);
        assert!(a.equivalence.unwrap() <= 1e-5);
        let stages: Vec<Stage> = a.rows.iter().map(|r| r.stage).collect();
        assert_eq!(
            stages,
            [
                Stage::Weights,
                Stage::Weights,
                Stage::Arch,
                Stage::Arch,
                Stage::Arch,
                Stage::Finetune
            ]
        );
    }

    #[test]
    fn no_gate_epochs_means_no_pruning() {
        let cfg = TrainConfig {
            weight_epochs: 0,
            arch_epochs: 0,
            finetune_epochs: 2,
            ..blob_cfg()
        };
        let data = Data::from_config(&cfg).unwrap();
        let out = run_dnal(&cfg, &data).unwrap();
        assert!(out.masks.is_full());
        assert_eq!(out.report.flops, out.report.baseline_flops);
        assert!(out.stages.rows.iter().all(|r| r.stage == Stage::Finetune));
    }

    #[test]
    fn zero_lambda_has_zero_penalty() {
        let cfg = TrainConfig {
            lambda_a: 0.0,
            finetune_epochs: 0,
            ..blob_cfg()
        };
        let data = Data::from_config(&cfg).unwrap();
        let out = run_dnal(&cfg, &data).unwrap();
        assert!(out.stages.rows.iter().all(|r| r.penalty == 0.0));
    }

    #[test]
    fn joint_starts_half_gated_and_saturates() {
        let cfg = TrainConfig {
            weight_epochs: 1,
            arch_epochs: 1,
            finetune_epochs: 1,
            ..blob_cfg()
        };
        let data = Data::from_config(&cfg).unwrap();
        let model = build_model(&cfg).unwrap();
        let x = data.train.batch(&[0, 1, 2, 3]).unwrap().images;
        let s = Session::new(TrainConfig {
            joint_mode: true,
            ..cfg.clone()
        })
        .unwrap();
        let mut first = s.model.clone();
        assert_eq!(
            first.infer(&x, Mode::Train).unwrap(),
            half_gated_logits(&model, &x).unwrap()
        );
        let out = run_joint(&cfg, &data).unwrap();
        assert_eq!(out.stages.rows.len(), 3);
        assert!(out.saturation.max_abs_grad <= 1e-38, "{:?}", out.saturation);
        assert!(
            out.saturation.max_abs_grad_f64 <= 1e-38,
            "{:?}",
            out.saturation
        );
        assert!(out.saturation.min_abs_s >= 0.01 - 1e-9);
    }
}
