//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::gating::{DeltaSchedule, GateGradForm};
use crate::model::GateOrder;
use crate::pruner::CollapsePolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Rings,
    Cifar10,
}

impl DatasetKind {
    pub fn synthetic(self) -> Option<SyntheticKind> {
        match self {
            DatasetKind::Blobs => Some(SyntheticKind::Blobs),
            DatasetKind::Rings => Some(SyntheticKind::Rings),
            DatasetKind::Cifar10 => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: String,
    /// JSON layer description used instead of the preset when non-empty.
    pub model_spec: String,
    pub num_classes: usize,
    pub gate_order: GateOrder,
    pub dataset: DatasetKind,
    pub data_dir: String,
    /// Training images kept per class; 0 keeps all.
    pub subset_per_class: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub image_size: usize,
    pub weight_epochs: usize,
    pub arch_epochs: usize,
    pub finetune_epochs: usize,
    /// Epochs of the joint ablation; 0 means the sum of the three stages.
    pub joint_epochs: usize,
    pub weight_lr: f64,
    pub arch_lr: f64,
    pub finetune_lr: f64,
    /// Fractions of the finetune epochs at which the rate is multiplied by `lr_decay`.
    pub finetune_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub arch_momentum: f64,
    pub lambda_w: f64,
    pub lambda_a: f64,
    pub delta0: f64,
    pub delta_max: f64,
    pub seed: u64,
    pub joint_mode: bool,
    pub augment_flip: bool,
    pub augment_crop: bool,
    pub collapse_policy: CollapsePolicy,
    pub grad_form: GateGradForm,
    pub binarize_tol: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub equivalence_inputs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: "resnet_mini".into(),
            model_spec: String::new(),
            num_classes: 10,
            gate_order: GateOrder::default(),
            dataset: DatasetKind::Cifar10,
            data_dir: String::new(),
            subset_per_class: 1000,
            synthetic_train: 2000,
            synthetic_test: 500,
            image_size: 32,
            weight_epochs: 10,
            arch_epochs: 10,
            finetune_epochs: 15,
            joint_epochs: 0,
            weight_lr: 0.1,
            arch_lr: 0.1,
            finetune_lr: 0.1,
            finetune_milestones: vec![0.25, 0.6],
            lr_decay: 0.1,
            batch_size: 128,
            momentum: 0.9,
            arch_momentum: 0.9,
            lambda_w: 1e-4,
            lambda_a: 1e-4,
            delta0: 1.0,
            delta_max: 1e4,
            seed: 0,
            joint_mode: false,
            augment_flip: true,
            augment_crop: true,
            collapse_policy: CollapsePolicy::default(),
            grad_form: GateGradForm::default(),
            binarize_tol: 1e-3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            equivalence_inputs: 100,
        }
    }
}

/// Every accepted key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("model", "preset name: tiny, vgg_mini, resnet_mini, mobilenet_mini, supernet_mini, supernet_sep_mini, resnet56, vgg16"),
    ("model_spec", "path to a JSON network description replacing the preset (empty = use `model`)"),
    ("num_classes", "number of classes"),
    ("gate_order", "conv-ss-bn-relu, conv-bn-ss-relu or conv-bn-relu-ss"),
    ("dataset", "cifar10, blobs or rings"),
    ("data_dir", "directory holding the CIFAR-10 binary batches"),
    ("subset_per_class", "CIFAR-10 training images kept per class (0 = all)"),
    ("synthetic_train", "synthetic training samples"),
    ("synthetic_test", "synthetic test samples"),
    ("image_size", "synthetic image side; also the model input size"),
    ("weight_epochs", "epochs of weight training with gates disabled"),
    ("arch_epochs", "epochs of gate training with weights frozen"),
    ("finetune_epochs", "epochs of finetuning after pruning"),
    ("joint_epochs", "epochs of the joint ablation (0 = sum of the three stages)"),
    ("weight_lr", "learning rate of the weight stage"),
    ("arch_lr", "learning rate of the gate stage"),
    ("finetune_lr", "initial finetune learning rate"),
    ("finetune_milestones", "comma-separated fractions of finetune epochs where the rate decays"),
    ("lr_decay", "factor applied at each finetune milestone"),
    ("batch_size", "minibatch size"),
    ("momentum", "SGD momentum for weights"),
    ("arch_momentum", "SGD momentum for gate parameters"),
    ("lambda_w", "weight decay"),
    ("lambda_a", "sparsity penalty coefficient"),
    ("delta0", "gate scale at the first gate epoch"),
    ("delta_max", "gate scale at the last gate epoch"),
    ("seed", "seed for initialization, shuffling, augmentation and synthetic data"),
    ("joint_mode", "run-all trains weights and gates jointly instead of in stages"),
    ("augment_flip", "random horizontal flips"),
    ("augment_crop", "zero-pad-4 random crops"),
    ("collapse_policy", "keep-max or strict, for layers whose gates all close"),
    ("grad_form", "chain-rule or printed (the latter fails gradient checks)"),
    ("binarize_tol", "distance from 0 or 1 at which a gate counts as binarized"),
    ("bn_momentum", "batch-norm running statistics momentum"),
    ("bn_eps", "batch-norm epsilon"),
    ("equivalence_inputs", "random inputs used to compare gated and pruned logits"),
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn parse_json_enum<T: for<'de> Deserialize<'de>>(v: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| format!("unknown value `{v}`"))
}

impl TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "model" => self.model = v.to_string(),
            "model_spec" => self.model_spec = v.to_string(),
            "num_classes" => self.num_classes = parse(v)?,
            "gate_order" => self.gate_order = v.parse().map_err(|e: Error| e.to_string())?,
            "dataset" => self.dataset = parse_json_enum(v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "subset_per_class" => self.subset_per_class = parse(v)?,
            "synthetic_train" => self.synthetic_train = parse(v)?,
            "synthetic_test" => self.synthetic_test = parse(v)?,
            "image_size" => self.image_size = parse(v)?,
            "weight_epochs" => self.weight_epochs = parse(v)?,
            "arch_epochs" => self.arch_epochs = parse(v)?,
            "finetune_epochs" => self.finetune_epochs = parse(v)?,
            "joint_epochs" => self.joint_epochs = parse(v)?,
            "weight_lr" => self.weight_lr = parse(v)?,
            "arch_lr" => self.arch_lr = parse(v)?,
            "finetune_lr" => self.finetune_lr = parse(v)?,
            "finetune_milestones" => {
                self.finetune_milestones = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(parse)
                    .collect::<std::result::Result<_, _>>()?
            }
            "lr_decay" => self.lr_decay = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "momentum" => self.momentum = parse(v)?,
            "arch_momentum" => self.arch_momentum = parse(v)?,
            "lambda_w" => self.lambda_w = parse(v)?,
            "lambda_a" => self.lambda_a = parse(v)?,
            "delta0" => self.delta0 = parse(v)?,
            "delta_max" => self.delta_max = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "joint_mode" => self.joint_mode = parse_bool(v)?,
            "augment_flip" => self.augment_flip = parse_bool(v)?,
            "augment_crop" => self.augment_crop = parse_bool(v)?,
            "collapse_policy" => self.collapse_policy = parse_json_enum(v)?,
            "grad_form" => self.grad_form = parse_json_enum(v)?,
            "binarize_tol" => self.binarize_tol = parse(v)?,
            "bn_momentum" => self.bn_momentum = parse(v)?,
            "bn_eps" => self.bn_eps = parse(v)?,
            "equivalence_inputs" => self.equivalence_inputs = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment; unknown
    /// and repeated keys are errors. `origin` names the source in error messages.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Config {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key `{k}` given twice")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        for (name, lr) in [
            ("weight_lr", self.weight_lr),
            ("arch_lr", self.arch_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.lambda_a < 0.0 || self.lambda_w < 0.0 {
            return bad("penalty coefficients must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.arch_momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self
            .finetune_milestones
            .iter()
            .any(|m| !(0.0..=1.0).contains(m))
        {
            return bad("finetune milestones are fractions in [0, 1]");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        DeltaSchedule {
            delta0: self.delta0,
            delta_max: self.delta_max,
            epochs: 1,
        }
        .validate()
    }

    pub fn schedule(&self, epochs: usize) -> DeltaSchedule {
        DeltaSchedule {
            delta0: self.delta0,
            delta_max: self.delta_max,
            epochs,
        }
    }

    pub fn joint_budget(&self) -> usize {
        if self.joint_epochs > 0 {
            self.joint_epochs
        } else {
            self.weight_epochs + self.arch_epochs + self.finetune_epochs
        }
    }

    /// Finetune learning rate for `epoch`: decayed once per milestone reached.
    pub fn finetune_lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .finetune_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.finetune_epochs as f64).floor() as usize)
            .count();
        self.finetune_lr * self.lr_decay.powi(passed as i32)
    }

    /// `key = value` text that parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, _) in KEYS {
            let v = &value[*k];
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(a) => a
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k} = {s}");
        }
        out
    }
}
