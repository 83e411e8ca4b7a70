use std::collections::BTreeMap;

use pipenet_core::model::{
    build_pipenet, named_portfolio, named_portfolio_with, param_group, ArchWidths, BlockKind, Checkpoint,
    CheckpointMeta, ModalBatch, ModelHandle, PORTFOLIO_NAMES,
};
use pipenet_core::nn::{softmax_cross_entropy, Tensor};
use pipenet_core::schedule::{ScheduleConfig, ScheduleState};
use pipenet_core::{ModalityId, PerModality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ArchWidths {
    ArchWidths {
        stem_channels: 4,
        stage_channels: (8, 16),
        cardinality: 4,
        fusion_channels: 16,
        fusion_repeats: 1,
        srb_repeats: (1, 1),
    }
}

fn random_batch(n: usize, patch: usize, seed: u64) -> ModalBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PerModality::from_fn(|_| {
        Tensor::from_vec([n, 1, patch, patch], (0..n * patch * patch).map(|_| rng.random_range(-1.0..1.0)).collect())
    })
}

fn loss(model: &mut ModelHandle, batch: &ModalBatch, targets: &[usize]) -> f64 {
    let logits = model.forward_train(batch).unwrap();
    softmax_cross_entropy(&logits, targets).loss
}

fn set_param(model: &mut ModelHandle, name: &str, index: usize, value: f64) {
    model.visit_params_mut(&mut |n, p| {
        if n == name {
            p.value[index] = value;
        }
    });
}

#[test]
fn named_portfolios_match_their_definitions() {
    let p5 = named_portfolio("P5").unwrap();
    assert_eq!(p5.pipelines.depth.block, BlockKind::Srb);
    for m in [ModalityId::Rgb, ModalityId::Ir] {
        assert!(matches!(p5.pipelines[m].block, BlockKind::Srxb { cardinality: 32 }));
        assert_eq!(p5.pipelines[m].stage_repeats, (2, 2));
    }
    assert_eq!(p5.to_string(), "P5: SRXB22 | SRB | SRXB22");
    let p4 = named_portfolio("P4").unwrap();
    assert!(p4.pipelines.iter().all(|(_, p)| p.label() == "SRXB34"));
    assert!(named_portfolio("P9").is_err());
}

#[test]
fn every_portfolio_builds_with_shared_pipeline_shapes() {
    for name in PORTFOLIO_NAMES {
        let spec = named_portfolio(name).unwrap();
        let shapes: Vec<_> = ModalityId::ALL.iter().map(|&m| spec.pipelines[m].output_shape(64)).collect();
        assert!(shapes.windows(2).all(|w| w[0] == w[1]), "{name}: {shapes:?}");
        assert_eq!(spec.fusion_input_channels(), 3 * shapes[0].0);

        let small = named_portfolio_with(name, &tiny()).unwrap();
        let model = build_pipenet(&small, PerModality::new(1, 1, 1), 16, 3).unwrap();
        let logits = model.forward(&random_batch(4, 16, 1)).unwrap();
        assert_eq!((logits.n(), logits.c(), logits.h(), logits.w()), (4, 2, 1, 1));
        assert!(logits.is_finite());
    }
}

#[test]
fn default_p5_forward_has_head_shape() {
    let model = build_pipenet(&named_portfolio("P5").unwrap(), PerModality::new(1, 1, 1), 64, 0).unwrap();
    let zeros = PerModality::from_fn(|_| Tensor::zeros([4, 1, 64, 64]));
    let logits = model.forward(&zeros).unwrap();
    assert_eq!(logits.shape(), [4, 2, 1, 1]);
    assert!(logits.is_finite());
}

#[test]
fn initialisation_is_a_function_of_the_seed() {
    let spec = named_portfolio_with("P3", &tiny()).unwrap();
    let a = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 11).unwrap();
    let b = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 11).unwrap();
    let c = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 12).unwrap();
    assert_eq!(a.state(), b.state());
    assert_ne!(a.state(), c.state());
}

#[test]
fn deeper_portfolio_has_more_parameters() {
    for widths in [ArchWidths::default(), tiny()] {
        let count = |name| {
            build_pipenet(&named_portfolio_with(name, &widths).unwrap(), PerModality::new(1, 1, 1), 32, 0)
                .unwrap()
                .param_count()
        };
        assert!(count("P4") > count("P2"));
    }
}

#[test]
fn eval_forward_is_per_element_and_pure() {
    let spec = named_portfolio_with("P5", &tiny()).unwrap();
    let mut model = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 5).unwrap();
    // Move running statistics away from their initial values.
    for s in 0..3 {
        model.forward_train(&random_batch(6, 16, 100 + s)).unwrap();
    }
    let batch = random_batch(5, 16, 7);
    let logits = model.forward(&batch).unwrap();
    assert_eq!(logits, model.forward(&batch).unwrap());

    let perm = [3, 0, 4, 1, 2];
    let permuted = PerModality::from_fn(|m| batch[m].select(&perm));
    let permuted_logits = model.forward(&permuted).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(permuted_logits.sample(i), logits.sample(p));
    }
    let single = PerModality::from_fn(|m| batch[m].select(&[2]));
    assert_eq!(model.forward(&single).unwrap().sample(0), logits.sample(2));
}

#[test]
fn finite_differences_agree_with_backprop_in_every_group() {
    let spec = named_portfolio_with("P5", &tiny()).unwrap();
    let mut model = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 21).unwrap();
    let batch = random_batch(3, 16, 8);
    let targets = [1, 0, 1];

    model.zero_grad();
    let logits = model.forward_train(&batch).unwrap();
    model.backward(&softmax_cross_entropy(&logits, &targets).grad);
    let mut analytic: BTreeMap<String, Vec<(String, usize, f64, f64)>> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut candidates = Vec::new();
    model.visit_params(&mut |name, p| {
        if p.trainable {
            for _ in 0..4 {
                let i = rng.random_range(0..p.value.len());
                candidates.push((name.to_string(), i, p.value[i], p.grad[i]));
            }
        }
    });
    for c in candidates {
        analytic.entry(param_group(&c.0).to_string()).or_default().push(c);
    }
    assert_eq!(analytic.len(), 5);

    for (group, params) in &analytic {
        let mut checked = 0;
        for (name, i, value, grad) in params {
            if grad.abs() < 1e-5 {
                continue;
            }
            // A ReLU kink inside the stencil spoils one step size but not a smaller one.
            let rel = [1e-6, 1e-7]
                .iter()
                .map(|&h| {
                    set_param(&mut model, name, *i, value + h);
                    let up = loss(&mut model, &batch, &targets);
                    set_param(&mut model, name, *i, value - h);
                    let down = loss(&mut model, &batch, &targets);
                    set_param(&mut model, name, *i, *value);
                    let numeric = (up - down) / (2.0 * h);
                    (grad - numeric).abs() / grad.abs().max(numeric.abs())
                })
                .fold(f64::INFINITY, f64::min);
            assert!(rel < 1e-3, "{name}[{i}]: analytic {grad}, rel {rel}");
            checked += 1;
        }
        assert!(checked >= 5, "{group}: only {checked} parameters with measurable gradient");
    }
}

#[test]
fn mean_logit_reaches_every_group() {
    let spec = named_portfolio_with("P5", &tiny()).unwrap();
    let mut model = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 2).unwrap();
    let batch = random_batch(4, 16, 3);
    model.zero_grad();
    let logits = model.forward_train(&batch).unwrap();
    let n = logits.data().len() as f64;
    model.backward(&Tensor::from_vec(logits.shape(), vec![1.0 / n; logits.data().len()]));
    let mut nonzero: BTreeMap<String, bool> = BTreeMap::new();
    model.visit_params(&mut |name, p| {
        if p.trainable {
            *nonzero.entry(param_group(name).to_string()).or_default() |= p.grad.iter().any(|&g| g != 0.0);
        }
    });
    assert_eq!(nonzero.len(), 5);
    assert!(nonzero.values().all(|&v| v), "{nonzero:?}");
}

#[test]
fn erasing_any_modality_changes_trained_logits() {
    let spec = named_portfolio_with("P5", &tiny()).unwrap();
    let mut model = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 4).unwrap();
    let batch = random_batch(4, 16, 5);
    let targets = [1, 0, 0, 1];
    for _ in 0..5 {
        model.zero_grad();
        let logits = model.forward_train(&batch).unwrap();
        model.backward(&softmax_cross_entropy(&logits, &targets).grad);
        model.visit_params_mut(&mut |_, p| {
            if p.trainable {
                for (w, g) in p.value.iter_mut().zip(&p.grad) {
                    *w -= 0.05 * g;
                }
            }
        });
    }
    let full = model.forward(&batch).unwrap();
    for m in ModalityId::ALL {
        let mut erased = batch.clone();
        erased[m].data_mut().fill(0.0);
        assert_ne!(model.forward(&erased).unwrap(), full, "{m} does not contribute");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = named_portfolio_with("P2", &tiny()).unwrap();
    let model = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 9).unwrap();
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: model.echo().clone(),
            step: 42,
            epochs_done: 3,
            schedule: ScheduleState::initial(&ScheduleConfig::default()),
            extra: serde_json::json!({"note": "x"}),
        },
        tensors: model.state(),
    };
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let rebuilt = ModelHandle::from_checkpoint(&back).unwrap();
    let batch = random_batch(2, 16, 1);
    assert_eq!(rebuilt.forward(&batch).unwrap(), model.forward(&batch).unwrap());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
