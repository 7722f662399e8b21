//! Multi-run drivers: the penalty sweep and the pruned-versus-baseline comparison.

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::trainer::{Data, Session, Stage};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda_a: f64,
    pub retained_channels: usize,
    pub flops: u64,
    /// `1 - flops / baseline_flops`.
    pub flops_reduction: f64,
    pub top1: f64,
}

fn finish(mut s: Session, data: &Data) -> Result<SweepPoint> {
    s.run_to_end(data)?;
    let report = s.arch_report()?;
    Ok(SweepPoint {
        lambda_a: s.cfg.lambda_a,
        retained_channels: report.layers.iter().map(|l| l.kept).sum(),
        flops: report.flops,
        flops_reduction: 1.0 - report.flops as f64 / report.baseline_flops as f64,
        top1: s.rows.last().map(|r| r.top1).unwrap_or(0.0),
    })
}

/// Full runs of `base` for each penalty weight. The weight stage does not depend on
/// the penalty, so it runs once and each point continues from a copy.
pub fn lambda_sweep(base: &TrainConfig, lambdas: &[f64], data: &Data) -> Result<Vec<SweepPoint>> {
    let mut shared = Session::new(TrainConfig {
        joint_mode: false,
        ..base.clone()
    })?;
    shared.run_while(data, |st| st == Stage::Weights)?;
    lambdas
        .iter()
        .map(|&lambda_a| {
            let mut s = shared.clone();
            s.cfg.lambda_a = lambda_a;
            finish(s, data)
        })
        .collect()
}

/// Whether retained channels never increase with the penalty weight.
pub fn is_non_increasing(points: &[SweepPoint]) -> bool {
    let mut sorted: Vec<&SweepPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.lambda_a.total_cmp(&b.lambda_a));
    sorted
        .windows(2)
        .all(|w| w[1].retained_channels <= w[0].retained_channels)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline_top1: f64,
    pub pruned_top1: f64,
    pub flops_reduction: f64,
    pub gap: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeskReport {
    pub tuning: Vec<SweepPoint>,
    pub lambda_a: Option<f64>,
    pub seeds: Vec<SeedOutcome>,
    pub failures: usize,
    pub passed: bool,
}

/// Picks the smallest penalty in `lambdas` reaching `min_reduction` on the first seed,
/// then compares the pruned model with a plain baseline of equal epoch budget on
/// every seed. A seed passes when the reduction holds and top-1 drops by at most
/// `max_gap` points.
pub fn desk_experiment(
    base: &TrainConfig,
    data: &Data,
    seeds: &[u64],
    lambdas: &[f64],
    min_reduction: f64,
    max_gap: f64,
    max_failures: usize,
) -> Result<DeskReport> {
    let &first = seeds
        .first()
        .ok_or_else(|| Error::InvalidArgument("no seeds".into()))?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tuning = lambda_sweep(
        &TrainConfig {
            seed: first,
            ..base.clone()
        },
        &sorted,
        data,
    )?;
    let chosen = tuning
        .iter()
        .find(|p| p.flops_reduction >= min_reduction)
        .map(|p| p.lambda_a);
    let Some(lambda_a) = chosen else {
        return Ok(DeskReport {
            tuning,
            lambda_a: None,
            seeds: Vec::new(),
            failures: seeds.len(),
            passed: false,
        });
    };
    let budget = base.weight_epochs + base.arch_epochs + base.finetune_epochs;
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let plain = TrainConfig {
            seed,
            weight_epochs: 0,
            arch_epochs: 0,
            finetune_epochs: budget,
            joint_mode: false,
            ..base.clone()
        };
        let baseline = finish(Session::new(plain)?, data)?;
        let pruned = finish(
            Session::new(TrainConfig {
                seed,
                lambda_a,
                joint_mode: false,
                ..base.clone()
            })?,
            data,
        )?;
        let gap = baseline.top1 - pruned.top1;
        outcomes.push(SeedOutcome {
            seed,
            baseline_top1: baseline.top1,
            pruned_top1: pruned.top1,
            flops_reduction: pruned.flops_reduction,
            gap,
            passed: pruned.flops_reduction >= min_reduction && gap <= max_gap,
        });
    }
    let failures = outcomes.iter().filter(|o| !o.passed).count();
    Ok(DeskReport {
        tuning,
        lambda_a: Some(lambda_a),
        seeds: outcomes,
        failures,
        passed: failures <= max_failures,
    })
}
