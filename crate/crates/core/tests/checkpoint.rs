use dnal::checkpoint::{from_bytes, load, save, to_bytes};
use dnal::compute::Mode;
use dnal::config::{DatasetKind, TrainConfig};
use dnal::trainer::{Data, Session, Stage};
use proptest::prelude::*;

fn cfg(model: &str, seed: u64) -> TrainConfig {
    TrainConfig {
        model: model.into(),
        num_classes: 3,
        dataset: DatasetKind::Rings,
        synthetic_train: 48,
        synthetic_test: 24,
        image_size: 8,
        batch_size: 16,
        weight_epochs: 3,
        arch_epochs: 3,
        finetune_epochs: 0,
        equivalence_inputs: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn bits(s: &Session) -> Vec<(String, Vec<u32>)> {
    let m = &s.model;
    let mut out: Vec<(String, Vec<u32>)> = m
        .params()
        .into_iter()
        .map(|(n, p)| {
            let v = p
                .value
                .data()
                .iter()
                .chain(p.momentum.data())
                .map(|x| x.to_bits())
                .collect();
            (n, v)
        })
        .collect();
    for (n, b) in m.bn_states() {
        let v = b
            .running_mean
            .data()
            .iter()
            .chain(b.running_var.data())
            .map(|x| x.to_bits())
            .collect();
        out.push((n, v));
    }
    for (i, g) in m.gates().enumerate() {
        let mut v: Vec<u32> =
            g.s.value
                .data()
                .iter()
                .chain(g.s.momentum.data())
                .map(|x| x.to_bits())
                .collect();
        v.push(g.delta.to_bits());
        v.push(g.enabled as u32);
        out.push((format!("gate{i}"), v));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn roundtrip_is_bitwise(
        preset in prop::sample::select(vec!["tiny", "vgg_mini", "resnet_mini", "mobilenet_mini", "supernet_mini", "supernet_sep_mini"]),
        seed in 0u64..1000,
        steps in 0usize..4,
        gate_noise in prop::collection::vec(-3.0f32..3.0, 1..16),
        delta in 1.0f64..1e4,
    ) {
        let mut s = Session::new(cfg(preset, seed)).unwrap();
        for _ in 0..steps {
            s.rng.next_u64();
        }
        // Perturb every trainable and buffered value so nothing round-trips by accident.
        for (i, (_, p)) in s.model.params_mut().into_iter().enumerate() {
            for (j, v) in p.momentum.data_mut().iter_mut().enumerate() {
                *v = gate_noise[(i + j) % gate_noise.len()] * 1e-3;
            }
        }
        for (i, g) in s.model.gates_mut().enumerate() {
            g.enabled = i % 2 == 0;
            g.set_delta(delta).unwrap();
            for (j, v) in g.s.value.data_mut().iter_mut().enumerate() {
                *v = gate_noise[(i * 7 + j) % gate_noise.len()];
            }
        }
        let back = from_bytes(&to_bytes(&s).unwrap()).unwrap();
        prop_assert_eq!(bits(&s), bits(&back));
        prop_assert_eq!(s.rng.state(), back.rng.state());
        prop_assert_eq!(&s.cfg, &back.cfg);
        prop_assert_eq!(s.model.topology(), back.model.topology());
        prop_assert_eq!(to_bytes(&s).unwrap(), to_bytes(&back).unwrap());
    }
}

#[test]
fn resume_at_epoch_three_of_six() {
    let c = TrainConfig {
        weight_epochs: 6,
        arch_epochs: 0,
        ..cfg("vgg_mini", 3)
    };
    let data = Data::from_config(&c).unwrap();
    let mut straight = Session::new(c.clone()).unwrap();
    straight
        .run_while(&data, |st| st == Stage::Weights)
        .unwrap();

    let mut first = Session::new(c).unwrap();
    while first.progress.epoch < 3 {
        first.step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epoch3.dnal");
    save(&first, &path).unwrap();
    drop(first);
    let mut resumed = load(&path).unwrap();
    assert_eq!(resumed.progress.epoch, 3);
    resumed.run_while(&data, |st| st == Stage::Weights).unwrap();

    assert_eq!(straight.rows, resumed.rows);
    assert_eq!(bits(&straight), bits(&resumed));
    let x = data.test.batch(&[0, 1, 2]).unwrap().images;
    assert_eq!(
        straight.model.infer(&x, Mode::Eval).unwrap(),
        resumed.model.infer(&x, Mode::Eval).unwrap()
    );
}

#[test]
fn resumed_pruned_model_keeps_training_identically() {
    let c = TrainConfig {
        finetune_epochs: 2,
        lambda_a: 1e-2,
        ..cfg("resnet_mini", 5)
    };
    let data = Data::from_config(&c).unwrap();
    let mut straight = Session::new(c.clone()).unwrap();
    straight.run_to_end(&data).unwrap();
    let mut part = Session::new(c).unwrap();
    part.run_while(&data, |st| st != Stage::Finetune).unwrap();
    part.step(&data).unwrap();
    let mut resumed = from_bytes(&to_bytes(&part).unwrap()).unwrap();
    resumed.run_to_end(&data).unwrap();
    assert_eq!(straight.rows, resumed.rows);
    assert_eq!(to_bytes(&straight).unwrap(), to_bytes(&resumed).unwrap());
}
