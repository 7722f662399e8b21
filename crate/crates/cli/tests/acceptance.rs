//! One pass/fail line per acceptance criterion.
//!
//! Criteria 6 and 7 train on CIFAR-10 and run only when `DNAL_CIFAR10_DIR` names a
//! directory holding the binary batches; otherwise they are reported as blocked and
//! do not affect the exit status.

use std::fs;
use std::path::Path;
use std::time::Instant;

use dnal::checks::gradient_suite;
use dnal::compute::{Mode, Rng, Tensor};
use dnal::config::{DatasetKind, TrainConfig};
use dnal::experiments::{desk_experiment, is_non_increasing, lambda_sweep};
use dnal::gating::{binarize, GateGradForm};
use dnal::model::{preset, Model};
use dnal::pruner::{
    count_flops, count_params, derive_masks, equivalence_check, format_cell, prune,
    search_space_log10, CollapsePolicy, BINARY_DELTA,
};
use dnal::trainer::{build_model, stage_arch_opt, stage_weight_opt, Data};

const CIFAR_ENV: &str = "DNAL_CIFAR10_DIR";

struct Outcome {
    pass: bool,
    detail: String,
    blocked: bool,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
            blocked: false,
        }
    }

    fn blocked(detail: impl Into<String>) -> Self {
        Outcome {
            pass: false,
            detail: detail.into(),
            blocked: true,
        }
    }
}

fn errored(e: impl std::fmt::Display) -> Outcome {
    Outcome::new(false, format!("error: {e}"))
}

fn blob_cfg(model: &str, classes: usize, size: usize, n: usize) -> TrainConfig {
    TrainConfig {
        model: model.into(),
        num_classes: classes,
        dataset: DatasetKind::Blobs,
        synthetic_train: n,
        synthetic_test: n / 4,
        image_size: size,
        batch_size: 32,
        augment_crop: false,
        ..TrainConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let (good, printed) = match (
        gradient_suite(GateGradForm::ChainRule, 0),
        gradient_suite(GateGradForm::Printed, 0),
    ) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return errored(e),
    };
    let secs = t.elapsed().as_secs_f64();
    let worst = good
        .iter()
        .filter(|r| r.name != "gate")
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let gate = good.iter().find(|r| r.name == "gate").unwrap();
    let printed_gate = printed.iter().find(|r| r.name == "gate").unwrap();
    let pass = good.iter().all(|r| r.passed()) && !printed_gate.passed() && secs < 60.0;
    Outcome::new(
        pass,
        format!(
            "{} checks, worst kernel/network rel err {worst:.2e} (< 1e-5), gate {:.2e} (< 1e-7); \
             printed gate derivative rel err {:.2e} (rejected); {secs:.1} s",
            good.len(),
            gate.max_rel_err,
            printed_gate.max_rel_err
        ),
    )
}

/// Criteria 2 and 8a share one weight-then-gate run.
fn criteria_2_and_8a() -> (Outcome, Outcome) {
    let cfg = TrainConfig {
        weight_epochs: 2,
        arch_epochs: 10,
        ..blob_cfg("resnet_mini", 10, 16, 512)
    };
    let run = || -> dnal::Result<_> {
        let data = Data::from_config(&cfg)?;
        let mut rng = Rng::new(cfg.seed);
        let mut model = build_model(&cfg)?;
        stage_weight_opt(&mut model, &data, &cfg, &mut rng)?;
        let before = snapshot(&model);
        let report = stage_arch_opt(&mut model, &data, &cfg, &mut rng)?;
        let after = snapshot(&model);
        Ok((model, report, before == after))
    };
    let (model, report, frozen) = match run() {
        Ok(r) => r,
        Err(e) => return (errored(&e), errored(&e)),
    };
    let fractions: Vec<f64> = report.rows.iter().map(|r| r.fraction_binarized).collect();
    let deltas: Vec<f64> = report.rows.iter().map(|r| r.delta).collect();
    let monotone = fractions.windows(2).all(|w| w[1] >= w[0]);
    let last = fractions.last().copied().unwrap_or(0.0);
    let masks = derive_masks(&model, CollapsePolicy::Strict);
    let masks_match = model.layers().iter().zip(&masks.layers).all(|(l, lm)| {
        let keep: Vec<bool> = lm
            .blocks
            .iter()
            .flat_map(|b| b.keep.iter().copied())
            .collect();
        let want: Vec<bool> = l
            .gates
            .s
            .value
            .data()
            .iter()
            .map(|&s| binarize(s))
            .collect();
        keep == want
    });
    let c2 = Outcome::new(
        report.rows.len() >= 10
            && deltas.first() == Some(&1.0)
            && deltas.last() == Some(&1e4)
            && last == 1.0
            && monotone
            && masks_match,
        format!(
            "{} epochs, delta {:e} -> {:e}; fraction_binarized per epoch {:?}; non-decreasing {monotone}; \
             masks == binarize(s) {masks_match}; {}/{} channels kept",
            report.rows.len(),
            deltas.first().unwrap_or(&0.0),
            deltas.last().unwrap_or(&0.0),
            fractions.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>(),
            masks.kept(),
            model.spec.total_gates()
        ),
    );
    let c8a = Outcome::new(
        frozen,
        format!("weights, BN affine and running statistics bitwise unchanged across the gate stage: {frozen}"),
    );
    (c2, c8a)
}

fn snapshot(model: &Model<f32>) -> Vec<u32> {
    let mut v: Vec<u32> = Vec::new();
    for (_, p) in model.params() {
        v.extend(p.value.data().iter().map(|x| x.to_bits()));
    }
    for (_, b) in model.bn_states() {
        v.extend(
            b.running_mean
                .data()
                .iter()
                .chain(b.running_var.data())
                .map(|x| x.to_bits()),
        );
    }
    v
}

/// Random binary gates (at least one open per layer) over a network with populated BN.
fn equivalence_for(name: &str, seed: u64) -> dnal::Result<f64> {
    let spec = preset(name, 10)?;
    let mut rng = Rng::new(seed);
    let mut model = Model::<f32>::new(&spec, &mut rng)?;
    for (pname, p) in model.params_mut() {
        for v in p.value.data_mut() {
            if pname.ends_with(".gamma") {
                *v = 0.5 + rng.uniform() as f32;
            } else if pname.ends_with(".beta") {
                *v = 0.1 * rng.normal() as f32;
            }
        }
    }
    let n = 8;
    let x = Tensor::from_vec(
        &[n, 3, 32, 32],
        (0..n * 3 * 32 * 32).map(|_| rng.normal() as f32).collect(),
    )?;
    model.infer(&x, Mode::Train)?;
    for g in model.gates_mut() {
        g.enabled = true;
        g.set_delta(BINARY_DELTA)?;
        for s in g.s.value.data_mut() {
            *s = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        }
        if g.s.value.data().iter().all(|&s| s < 0.0) {
            g.s.value.data_mut()[0] = 1.0;
        }
    }
    let masks = derive_masks(&model, CollapsePolicy::Strict);
    let pruned = prune(&model, &masks)?;
    equivalence_check(&model, &pruned, 100, &mut Rng::with_stream(seed, 5))
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, name) in ["vgg_mini", "resnet_mini", "supernet_mini"]
        .into_iter()
        .enumerate()
    {
        match equivalence_for(name, 100 + i as u64) {
            Ok(d) => {
                pass &= d <= 1e-5;
                parts.push(format!("{name} {d:.2e}"));
            }
            Err(e) => return errored(e),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    Outcome::new(
        pass,
        format!(
            "max |pruned - gated| logits over 100 inputs: {} (<= 1e-5); {secs:.1} s",
            parts.join(", ")
        ),
    )
}

fn criterion_4() -> Outcome {
    let run = || -> dnal::Result<(u64, u64)> {
        let m = Model::<f32>::skeleton(
            &preset("resnet56", 10)?,
            &dnal::model::Topology::full(&preset("resnet56", 10)?),
        )?;
        Ok((count_flops(&m)?, count_params(&m)))
    };
    match run() {
        Ok((flops, params)) => {
            let fe = (flops as f64 / 125.49e6 - 1.0).abs();
            let pe = (params as f64 / 0.85e6 - 1.0).abs();
            Outcome::new(
                fe <= 0.02 && pe <= 0.02,
                format!(
                    "ResNet56 FLOPs {} params {} (off by {:.2}% and {:.2}% of 125.49M / 0.85M)",
                    format_cell(flops, 1.0),
                    format_cell(params, 1.0),
                    100.0 * fe,
                    100.0 * pe
                ),
            )
        }
        Err(e) => errored(e),
    }
}

fn criterion_5() -> Outcome {
    match preset("vgg16", 10) {
        Ok(spec) => {
            let gates = spec.total_gates();
            let l = search_space_log10(&spec);
            Outcome::new(
                gates == 4224 && (l - 1271.55).abs() <= 0.01,
                format!(
                    "vgg16 has {gates} channels; 2^{gates} = 10^{l:.2} (≈10^{:.0})",
                    l.ceil()
                ),
            )
        }
        Err(e) => errored(e),
    }
}

fn cifar_cfg(dir: &str) -> TrainConfig {
    TrainConfig {
        model: "resnet_mini".into(),
        dataset: DatasetKind::Cifar10,
        data_dir: dir.into(),
        subset_per_class: 1000,
        weight_epochs: 10,
        arch_epochs: 10,
        finetune_epochs: 15,
        ..TrainConfig::default()
    }
}

fn cifar_dir() -> Option<String> {
    std::env::var(CIFAR_ENV)
        .ok()
        .filter(|d| Path::new(d).join("data_batch_1.bin").is_file())
}

fn criterion_6() -> Outcome {
    let Some(dir) = cifar_dir() else {
        return Outcome::blocked(format!(
            "needs the CIFAR-10 binary batches; set {CIFAR_ENV}"
        ));
    };
    let cfg = cifar_cfg(&dir);
    let t = Instant::now();
    let res = Data::from_config(&cfg).and_then(|d| lambda_sweep(&cfg, &[1e-5, 1e-4, 1e-3], &d));
    match res {
        Ok(pts) => {
            let hours = t.elapsed().as_secs_f64() / 3600.0;
            Outcome::new(
                is_non_increasing(&pts) && hours <= 2.0,
                format!(
                    "retained channels {:?} for lambda_a 1e-5/1e-4/1e-3; {hours:.2} h",
                    pts.iter().map(|p| p.retained_channels).collect::<Vec<_>>()
                ),
            )
        }
        Err(e) => errored(e),
    }
}

fn criterion_7() -> Outcome {
    let Some(dir) = cifar_dir() else {
        return Outcome::blocked(format!(
            "needs the CIFAR-10 binary batches; set {CIFAR_ENV}"
        ));
    };
    let cfg = cifar_cfg(&dir);
    let lambdas = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3];
    let res = Data::from_config(&cfg)
        .and_then(|d| desk_experiment(&cfg, &d, &[0, 1, 2, 3, 4], &lambdas, 0.4, 3.0, 1));
    match res {
        Ok(r) => Outcome::new(
            r.passed,
            format!(
                "lambda_a {:?}; per seed (reduction, gap): {:?}; {} failures",
                r.lambda_a,
                r.seeds
                    .iter()
                    .map(|s| (format!("{:.3}", s.flops_reduction), format!("{:.2}", s.gap)))
                    .collect::<Vec<_>>(),
                r.failures
            ),
        ),
        Err(e) => errored(e),
    }
}

const RUN_CFG: &str = "\
model = supernet_mini
num_classes = 4
dataset = rings
synthetic_train = 96
synthetic_test = 32
image_size = 8
batch_size = 32
weight_epochs = 2
arch_epochs = 3
finetune_epochs = 2
joint_epochs = 3
seed = 7
";

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["dnal", "-q"];
    argv.extend_from_slice(args);
    dnal_cli::cli_main(argv)
}

fn criterion_8b(dir: &Path) -> Outcome {
    let cfg = dir.join("desk.cfg");
    if let Err(e) = fs::write(&cfg, RUN_CFG) {
        return errored(e);
    }
    let cfg = cfg.to_str().unwrap();
    let mut outs = Vec::new();
    for run in ["run1", "run2"] {
        let out = dir.join(run);
        let code = cli(&[
            "run-all",
            "--config",
            cfg,
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        if code != 0 {
            return Outcome::new(false, format!("run-all exited {code}"));
        }
        outs.push(out);
    }
    let same = |f: &str| {
        fs::read(outs[0].join(f))
            .ok()
            .is_some_and(|a| Some(a) == fs::read(outs[1].join(f)).ok())
    };
    let (csv, json, ckpt) = (
        same("metrics.csv"),
        same("report.json"),
        same("checkpoint.dnal"),
    );
    Outcome::new(
        csv && json,
        format!("two run-all invocations: CSV identical {csv}, JSON identical {json} (checkpoint identical {ckpt})"),
    )
}

fn criterion_9(dir: &Path) -> Outcome {
    let cfg = dir.join("joint.cfg");
    if let Err(e) = fs::write(&cfg, RUN_CFG) {
        return errored(e);
    }
    let out = dir.join("joint");
    let code = cli(&[
        "run-joint",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    if code != 0 {
        return Outcome::new(false, format!("run-joint exited {code}"));
    }
    let report: serde_json::Value =
        match fs::read_to_string(out.join("report.json")).map(|t| serde_json::from_str(&t)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => return errored(e),
            Err(e) => return errored(e),
        };
    let sat = &report["saturation"];
    let get = |k: &str| sat[k].as_f64().unwrap_or(f64::NAN);
    let (delta, min_s, g32, g64) = (
        get("delta"),
        get("min_abs_s"),
        get("max_abs_grad"),
        get("max_abs_grad_f64"),
    );
    Outcome::new(
        delta == 1e4 && min_s >= 0.01 - 1e-9 && g32 <= 1e-38 && g64 <= 1e-38,
        format!(
            "run-joint report: delta {delta:e}, min |s| {min_s}, max |dL/ds| {g32:e} (f32) and {g64:e} (f64), bound 1e-38"
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let (c2, c8a) = criteria_2_and_8a();
    let c8b = criterion_8b(tmp.path());
    let c8 = Outcome::new(
        c8a.pass && c8b.pass,
        format!("{}; {}", c8a.detail, c8b.detail),
    );
    let results = [
        ("gradient correctness", criterion_1()),
        ("binarization", c2),
        ("prune equivalence", criterion_3()),
        ("FLOPs anchor", criterion_4()),
        ("search-space accounting", criterion_5()),
        ("lambda_a monotonicity", criterion_6()),
        ("end-to-end desk experiment", criterion_7()),
        ("stage isolation and determinism", c8),
        ("vanishing gate gradient", criterion_9(tmp.path())),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        let tag = match (o.pass, o.blocked) {
            (true, _) => "PASS",
            (false, true) => "FAIL (blocked)",
            (false, false) => "FAIL",
        };
        println!("criterion {}: {tag} {name}: {}", i + 1, o.detail);
        if !o.pass && !o.blocked {
            failed += 1;
        }
    }
    let blocked = results.iter().filter(|(_, o)| o.blocked).count();
    println!(
        "acceptance: {} passed, {failed} failed, {blocked} blocked",
        results.iter().filter(|(_, o)| o.pass).count()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
