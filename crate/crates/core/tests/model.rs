use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use psvit::checkpoint;
use psvit::data::synthetic_blobs;
use psvit::init::normal;
use psvit::train::{evaluate, train, TrainConfig};
use psvit::{count_params, Error, Mode, Params, PsVit, PsVitConfig, Tensor};

fn images(count: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| normal(&[3, size, size], 1.0, &mut rng)).collect()
}

fn two_class_toy() -> PsVitConfig {
    PsVitConfig {
        num_classes: 2,
        ..PsVitConfig::toy()
    }
}

#[test]
fn logits_have_one_row_per_image() {
    let model = PsVit::<f32>::build(&PsVitConfig::toy(), 0).unwrap();
    let pass = model.forward(&images(3, 16, 1), &mut Mode::Eval).unwrap();
    assert_eq!(pass.logits.len(), 3);
    assert!(pass.logits.iter().all(|l| l.len() == 3));
    assert_eq!(pass.trajectories().len(), 3);
}

#[test]
fn eval_forward_is_deterministic_and_batch_independent() {
    let model = PsVit::<f32>::build(&PsVitConfig::toy(), 2).unwrap();
    let xs = images(4, 16, 3);
    let batch = model.predict(&xs).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let single = model.predict(std::slice::from_ref(x)).unwrap();
        assert_eq!(single[0], batch[i]);
    }
    assert_eq!(model.predict(&xs).unwrap(), batch);
}

#[test]
fn analytic_count_matches_stored_parameters() {
    for share in [false, true] {
        for (iters, depth) in [(1, 0), (2, 2), (4, 1)] {
            let cfg = PsVitConfig {
                share_weights: share,
                iterations: iters,
                depth,
                ..PsVitConfig::toy()
            };
            let model = PsVit::<f32>::build(&cfg, 0).unwrap();
            assert_eq!(
                model.param_store().count() as u64,
                count_params(&cfg).unwrap(),
                "share={share} N={iters} N_v={depth}"
            );
        }
    }
}

#[test]
fn tying_weights_drops_exactly_the_redundant_sampler_tensors() {
    let cfg = PsVitConfig {
        iterations: 4,
        ..PsVitConfig::toy()
    };
    let mut model = PsVit::<f32>::build(&cfg, 0).unwrap();
    let before = model.param_store().count();
    model.tie_weights().unwrap();
    let after = model.param_store().count();
    let layer = model.sampler.layers[0].param_count();
    let head = 2 * cfg.dim;
    assert_eq!(before - after, 3 * layer + 2 * head);
    assert_eq!(
        after as u64,
        count_params(&PsVitConfig {
            share_weights: true,
            ..cfg
        })
        .unwrap()
    );
    assert!(model.tie_weights().is_err());
}

#[test]
fn shared_model_sees_gradients_from_every_iteration() {
    let cfg = PsVitConfig {
        share_weights: true,
        iterations: 3,
        ..two_class_toy()
    };
    let mut model = PsVit::<f32>::build(&cfg, 4).unwrap();
    let xs = images(2, 16, 5);
    let pass = model.forward(&xs, &mut Mode::Eval).unwrap();
    let (_, dlogits) = pass.loss(&[0, 1], 0.0).unwrap();
    model.zero_grads();
    model.backward(&pass, &dlogits).unwrap();
    let g = model.sampler.layers[0].attn.wq.grad().unwrap();
    assert!(g.iter().any(|v| *v != 0.0));
}

#[test]
fn checkpoint_restores_predictions_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.psvt");
    let mut model = PsVit::<f32>::build(&two_class_toy(), 9).unwrap();
    let ds = synthetic_blobs(16, 16, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        warmup_epochs: 1,
        ..Default::default()
    };
    train(&mut model, &ds, &cfg, |_, _| Ok(())).unwrap();
    checkpoint::save(&model.param_store(), &path).unwrap();
    let restored = PsVit::<f32>::from_store(&checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(
        restored.predict(&ds.images).unwrap(),
        model.predict(&ds.images).unwrap()
    );
}

#[test]
fn strict_load_lists_every_offender() {
    let store = PsVit::<f32>::build(&PsVitConfig::toy(), 0).unwrap().param_store();
    let mut other = PsVit::<f32>::zeros(&PsVitConfig {
        depth: 3,
        num_classes: 4,
        ..PsVitConfig::toy()
    })
    .unwrap();
    let Err(Error::ParamMismatch(list)) = other.load_store(&store, true) else {
        panic!("strict load should fail");
    };
    assert!(list.iter().any(|m| m.starts_with("head.weight: shape")));
    assert!(list
        .iter()
        .any(|m| m.contains("vtm.layers.2") && m.ends_with("missing from checkpoint")));
    // non-strict load copies what matches
    other.load_store(&store, false).unwrap();
}

#[test]
fn training_is_reproducible_under_a_seed() {
    let ds = synthetic_blobs(16, 16, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        warmup_epochs: 1,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut m = PsVit::<f32>::build(&two_class_toy(), 5).unwrap();
        let metrics = train(&mut m, &ds, &cfg, |_, _| Ok(())).unwrap();
        (metrics, m.param_store())
    };
    assert_eq!(run(), run());
}

#[test]
fn eval_reports_are_consistent() {
    let ds = synthetic_blobs(20, 16, 2).unwrap();
    let model = PsVit::<f32>::build(&two_class_toy(), 0).unwrap();
    let r = evaluate(&model, &ds, 7).unwrap();
    assert!(r.top5 >= r.top1);
    // two classes: every label is in the top five
    assert_eq!(r.top5, 1.0);
    assert_eq!(r.samples, 20);
}

#[test]
fn f64_model_agrees_with_f32() {
    let model = PsVit::<f32>::build(&PsVitConfig::toy(), 6).unwrap();
    let wide = model.cast::<f64>().unwrap();
    let xs = images(2, 16, 8);
    let a = model.predict(&xs).unwrap();
    let b = wide.predict(&xs.iter().map(|x| x.cast()).collect::<Vec<_>>()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.cast::<f64>().max_abs_diff(y).unwrap() < 1e-4);
    }
}
