use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scan_core::data::{Dataset, DatasetSpec};
use scan_core::gradcheck::finite_difference_gradcheck;
use scan_core::loss::{rmo_loss, Aggregation, RmoConfig};
use scan_core::network::{Layer, NetworkForm, SacNetwork};
use scan_core::ops::softmax_cross_entropy;
use scan_core::optim::{Sgd, SgdConfig};
use scan_core::sac::{sac_forward, SacPath};
use scan_core::train::{compute_gradients, evaluate, train, train_step, NetConfig, Objective, TrainConfig};
use scan_core::{DenseArray, FloatWidth};

fn dataset(seed: u64, train_samples: usize) -> Dataset {
    DatasetSpec {
        train_samples,
        test_samples: 256,
        seed,
        ..DatasetSpec::default()
    }
    .generate()
    .unwrap()
}

fn all_scales(net: &SacNetwork) -> Vec<f64> {
    net.sac_layers().unwrap().iter().flat_map(|l| l.scales()).collect()
}

#[test]
fn short_run_fits_training_set() {
    let data = dataset(7, 2048);
    let cfg = TrainConfig {
        seed: 7,
        epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (net, history) = train(&NetConfig::default(), &data, &cfg).unwrap();
    let last = history.epochs.last().unwrap();
    assert!(last.train_accuracy > 0.9, "train accuracy {}", last.train_accuracy);
    assert!(last.loss.total < history.epochs[0].loss.total);
    let eval = evaluate(&net, &data.train, FloatWidth::F64).unwrap();
    assert!(eval.accuracy > 0.9);

    // same seed, same bits
    let (again, _) = train(&NetConfig::default(), &data, &cfg).unwrap();
    assert_eq!(again.param_arrays(), net.param_arrays());

    let (plain_rec, _) = train(
        &NetConfig::default(),
        &data,
        &TrainConfig {
            rmo: RmoConfig::disabled(),
            ..cfg.clone()
        },
    )
    .unwrap();
    let with = all_scales(&net);
    let without = all_scales(&plain_rec);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&with) - mean(&without)).abs() > 0.05, "{} vs {}", mean(&with), mean(&without));
}

#[test]
fn small_set_is_memorized() {
    let data = dataset(3, 16);
    let cfg = TrainConfig {
        seed: 1,
        epochs: 300,
        batch_size: 16,
        lr_drop_at: 1.0,
        ..TrainConfig::default()
    };
    let (net, _) = train(&NetConfig::default(), &data, &cfg).unwrap();
    assert_eq!(evaluate(&net, &data.train, FloatWidth::F64).unwrap().accuracy, 1.0);
}

#[test]
fn response_term_alone_grows_the_response() {
    let data = dataset(11, 32);
    let mut net = SacNetwork::init(NetworkForm::Sac, 1, &[4], 4, 5).unwrap();
    let objective = Objective {
        include_rec: false,
        ..Objective::new(RmoConfig::default())
    };
    let mut opt = Sgd::new(SgdConfig::default());
    let images = &data.train.images;
    let labels = &data.train.labels;
    let norm = |net: &SacNetwork| net.forward_trace(images).unwrap().pre_activations[0].norm_l2();
    let first = compute_gradients(&net, images, labels, &objective).unwrap().0.total;
    let mut norms = vec![norm(&net)];
    let mut last = first;
    for _ in 0..200 {
        last = train_step(&mut net, &mut opt, images, labels, &objective, 0.01).unwrap().0.total;
        norms.push(norm(&net));
    }
    let tail = &norms[norms.len() - 21..];
    assert!(tail.windows(2).all(|w| w[1] > w[0]), "{tail:?}");
    assert!(last < first, "{last} vs {first}");
}

/// The training gradient equals the gradient of a loss whose response terms
/// see each layer's input as a constant.
#[test]
fn training_gradient_matches_detached_objective() {
    for aggregation in [Aggregation::Sum, Aggregation::Mean] {
        let rmo = RmoConfig {
            lambda: 20.0,
            enabled: true,
            aggregation,
        };
        let base = SacNetwork::init(NetworkForm::Sac, 1, &[3, 4], 3, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DenseArray::random_uniform(&[3, 1, 9, 9], -1.0, 1.0, &mut rng);
        let labels = [0, 2, 1];
        let inputs = base.forward_trace(&x).unwrap().inputs;
        let weight = rmo.layer_weight(2);
        let objective = Objective::new(rmo);
        let report = finite_difference_gradcheck(
            |p| {
                let net = base.with_param_arrays(p)?;
                let (rec, _) = softmax_cross_entropy(&net.logits(&x)?, &labels)?;
                let mut total = rec;
                for (layer, input) in net.layers().iter().zip(&inputs) {
                    let Layer::Sac(s) = layer else { unreachable!() };
                    total += weight * rmo_loss(&sac_forward(input, s, SacPath::Train)?.pre_activation, rmo.lambda)?;
                }
                let (_, grads, _) = compute_gradients(&net, &x, &labels, &objective)?;
                Ok((total, grads.arrays()))
            },
            &base.param_arrays(),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
