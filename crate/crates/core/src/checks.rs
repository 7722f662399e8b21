//! Finite-difference gradient suite over every kernel, the gate and small networks.

use serde::Serialize;

use crate::compute::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, global_avg_pool,
    global_avg_pool_backward, grad_check, grad_check_step, linear, linear_backward, max_pool,
    max_pool_backward, relu, relu_backward, softmax_cross_entropy, BnConfig, BnState, ConvGeom,
    Mode, Rng, Tensor, FD_STEP,
};
use crate::error::Result;
use crate::gating::{scaled_sigmoid, GateGradForm};
use crate::model::{BlockSpec, GateOrder, LayerSpec, Model, ModelSpec, Targets, UnitSpec};

/// Tolerance on the max relative error for kernels and networks.
pub const KERNEL_TOL: f64 = 1e-5;
/// Tolerance for the scalar gate derivative.
pub const GATE_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn conv_check(rng: &mut Rng, x_shape: &[usize], w_shape: &[usize], geom: ConvGeom) -> Result<f64> {
    let x = randn(rng, x_shape);
    let w = randn(rng, w_shape);
    let r = randn(rng, conv2d(&x, &w, geom)?.shape());
    grad_check(
        |inp| {
            let y = conv2d(&inp[0], &inp[1], geom).unwrap();
            let (dx, dw) = conv2d_backward(&inp[0], &inp[1], &r, geom, true, true).unwrap();
            (
                Tensor::scalar(weighted_sum(&y, &r)),
                vec![dx.unwrap(), dw.unwrap()],
            )
        },
        &[x, w],
    )
}

fn bn_check(rng: &mut Rng) -> Result<f64> {
    let x = randn(rng, &[3, 4, 3, 3]);
    let gamma = randn(rng, &[4]);
    let beta = randn(rng, &[4]);
    let r = randn(rng, &[3, 4, 3, 3]);
    grad_check(
        |inp| {
            let mut st = BnState::new(4);
            let (y, cache) = batchnorm(
                &inp[0],
                &inp[1],
                &inp[2],
                &mut st,
                Mode::Train,
                BnConfig::default(),
            )
            .unwrap();
            let (dx, pg) = batchnorm_backward(&r, &inp[1], &cache, true).unwrap();
            let (dg, db) = pg.unwrap();
            (Tensor::scalar(weighted_sum(&y, &r)), vec![dx, dg, db])
        },
        &[x, gamma, beta],
    )
}

fn linear_check(rng: &mut Rng) -> Result<f64> {
    let x = randn(rng, &[4, 5]);
    let w = randn(rng, &[3, 5]);
    let b = randn(rng, &[3]);
    let r = randn(rng, &[4, 3]);
    grad_check(
        |inp| {
            let y = linear(&inp[0], &inp[1], &inp[2]).unwrap();
            let (dx, dw, db) = linear_backward(&inp[0], &inp[1], &r, true).unwrap();
            (
                Tensor::scalar(weighted_sum(&y, &r)),
                vec![dx.unwrap(), dw, db],
            )
        },
        &[x, w, b],
    )
}

fn relu_check(rng: &mut Rng) -> Result<f64> {
    // Keep inputs clear of the kink.
    let x = randn(rng, &[2, 3, 4, 4]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let r = randn(rng, x.shape());
    grad_check(
        |inp| {
            let y = relu(&inp[0]);
            (
                Tensor::scalar(weighted_sum(&y, &r)),
                vec![relu_backward(&r, &inp[0]).unwrap()],
            )
        },
        &[x],
    )
}

fn pool_check(rng: &mut Rng) -> Result<f64> {
    let x = randn(rng, &[2, 3, 4, 4]);
    let r = randn(rng, &[2, 3, 2, 2]);
    let rg = randn(rng, &[2, 3]);
    grad_check(
        |inp| {
            let (y, arg) = max_pool(&inp[0], 2, 2).unwrap();
            let g = global_avg_pool(&inp[0]).unwrap();
            let mut dx = max_pool_backward(&r, &arg, inp[0].shape()).unwrap();
            dx.add_assign(&global_avg_pool_backward(&rg, inp[0].shape()).unwrap())
                .unwrap();
            (
                Tensor::scalar(weighted_sum(&y, &r) + weighted_sum(&g, &rg)),
                vec![dx],
            )
        },
        &[x],
    )
}

fn ce_check(rng: &mut Rng) -> Result<f64> {
    let z = randn(rng, &[5, 4]);
    let labels = [0, 3, 1, 1, 2];
    grad_check(
        |inp| {
            let (l, d) = softmax_cross_entropy(&inp[0], &labels).unwrap();
            (Tensor::scalar(l), vec![d])
        },
        &[z],
    )
}

/// Worst error of `dp/ds` over random `(s, delta)` pairs with `|delta s| <= 2`.
pub fn gate_check(form: GateGradForm, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let delta = 1.0 + rng.uniform() * 99.0;
        let s = (rng.uniform() - 0.5) * 4.0 / delta;
        // The gate varies on a scale of 1/delta; so does the step.
        let err = grad_check_step(
            |inp| {
                let v = inp[0].data()[0];
                (
                    Tensor::scalar(scaled_sigmoid(v, delta)),
                    vec![Tensor::scalar(form.slope(v, delta))],
                )
            },
            &[Tensor::scalar(s)],
            FD_STEP / delta,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn toy_spec(order: GateOrder) -> ModelSpec {
    ModelSpec {
        name: "gradcheck".into(),
        in_channels: 2,
        input_size: 6,
        num_classes: 3,
        order,
        units: vec![
            UnitSpec::Layer(LayerSpec::multi(vec![
                BlockSpec::conv(3, 1, 2),
                BlockSpec::conv(5, 1, 2),
            ])),
            UnitSpec::Residual {
                first: LayerSpec::single(BlockSpec::conv(3, 2, 6)),
                second: LayerSpec {
                    blocks: vec![BlockSpec::conv(3, 1, 6)],
                    relu: false,
                },
                downsample: true,
            },
            UnitSpec::Layer(LayerSpec::multi(vec![
                BlockSpec::separable(3, 1, 2),
                BlockSpec::pointwise(1, 2),
            ])),
        ],
    }
}

/// Loss gradient of a gated network with respect to every weight and gate.
pub fn network_check(order: GateOrder, form: GateGradForm, rng: &mut Rng) -> Result<f64> {
    let mut m = Model::<f64>::new(&toy_spec(order), rng)?;
    m.grad_form = form;
    for g in m.gates_mut() {
        g.enabled = true;
        g.delta = 1.5;
        for v in g.s.value.data_mut() {
            *v = rng.normal();
        }
    }
    let x = randn(rng, &[4, 2, 6, 6]);
    let labels = [0, 2, 1, 2];
    let mut inputs: Vec<Tensor<f64>> = m
        .params()
        .into_iter()
        .map(|(_, p)| p.value.clone())
        .collect();
    let n_params = inputs.len();
    inputs.extend(m.gates().map(|g| g.s.value.clone()));
    grad_check(
        |inp| {
            for ((_, p), v) in m.params_mut().into_iter().zip(inp) {
                p.value = v.clone();
            }
            for (g, v) in m.gates_mut().zip(&inp[n_params..]) {
                g.s.value = v.clone();
            }
            m.zero_grad();
            let logits = m.forward(&x, Mode::Train).unwrap();
            let (loss, dl) = softmax_cross_entropy(&logits, &labels).unwrap();
            m.backward(&dl, Targets::Both).unwrap();
            let mut grads: Vec<Tensor<f64>> = m
                .params()
                .into_iter()
                .map(|(_, p)| p.grad.clone())
                .collect();
            grads.extend(m.gates().map(|g| g.s.grad.clone()));
            (Tensor::scalar(loss), grads)
        },
        &inputs,
    )
}

/// Every check, in 64-bit arithmetic, with the gate derivative given by `form`.
pub fn gradient_suite(form: GateGradForm, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64, tol: f64| {
        out.push(CheckResult {
            name: name.into(),
            max_rel_err: err,
            tol,
        })
    };
    push(
        "conv2d",
        conv_check(&mut rng, &[2, 3, 5, 5], &[4, 3, 3, 3], ConvGeom::new(1, 1))?,
        KERNEL_TOL,
    );
    push(
        "conv2d_strided",
        conv_check(&mut rng, &[2, 2, 6, 6], &[3, 2, 5, 5], ConvGeom::new(2, 2))?,
        KERNEL_TOL,
    );
    push(
        "conv2d_depthwise",
        conv_check(
            &mut rng,
            &[2, 3, 5, 5],
            &[3, 1, 3, 3],
            ConvGeom::grouped(1, 1, 3),
        )?,
        KERNEL_TOL,
    );
    push("batchnorm", bn_check(&mut rng)?, KERNEL_TOL);
    push("linear", linear_check(&mut rng)?, KERNEL_TOL);
    push("relu", relu_check(&mut rng)?, KERNEL_TOL);
    push("pooling", pool_check(&mut rng)?, KERNEL_TOL);
    push("softmax_cross_entropy", ce_check(&mut rng)?, KERNEL_TOL);
    push("gate", gate_check(form, &mut rng)?, GATE_TOL);
    for order in GateOrder::ALL {
        push(
            &format!("network[{order}]"),
            network_check(order, form, &mut rng)?,
            KERNEL_TOL,
        );
    }
    Ok(out)
}
