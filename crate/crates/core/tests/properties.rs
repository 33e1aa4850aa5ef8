mod common;

use common::{brute_force_xpass_gains, full_compose, interior_max_diff, random_network, random_sac_layer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scan_core::analysis::{filter_decomposition, scale_histogram, xpass_classification, XPassClass};
use scan_core::data::{Blur, DatasetSpec};
use scan_core::loss::{rmo_loss, RmoConfig};
use scan_core::model_io::{decode_model, encode_model};
use scan_core::network::{LayerGrads, NetworkForm, SacNetwork};
use scan_core::sac::{absorb, sac_forward, SacLayer, SacPath};
use scan_core::scale_space::{normalized_derivative_amplitude, ScaleOracleSpec};
use scan_core::train::{compute_gradients, evaluate, Objective};
use scan_core::{DenseArray, FloatWidth};

fn k3(v: [f64; 9]) -> DenseArray {
    DenseArray::from_vec(&[3, 3], v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn train_and_absorbed_paths_agree(seed in any::<u64>(), c_in in 1usize..4, c_out in 1usize..4, h in 9usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_sac_layer(&mut rng, c_in, c_out);
        let x: DenseArray = DenseArray::random_uniform(&[2, c_in, h, h + 1], -1.0, 1.0, &mut rng);
        let a = sac_forward(&x, &layer, SacPath::Train).unwrap().pre_activation;
        let b = sac_forward(&x, &layer, SacPath::Absorbed).unwrap().pre_activation;
        prop_assert!(interior_max_diff(&a, &b, 4) < 1e-10);
        let x32 = x.cast::<f32>();
        let a = sac_forward(&x32, &layer, SacPath::Train).unwrap().pre_activation;
        let b = sac_forward(&x32, &layer, SacPath::Absorbed).unwrap().pre_activation;
        prop_assert!(interior_max_diff(&a, &b, 4) < 1e-4);
    }

    #[test]
    fn absorb_is_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_sac_layer(&mut rng, 2, 3);
        let copy = layer.clone();
        let first = absorb(&layer);
        let second = absorb(&layer);
        prop_assert_eq!(first.k_u.data(), second.k_u.data());
        prop_assert_eq!(layer, copy);
    }

    #[test]
    fn response_loss_is_in_unit_interval(seed in any::<u64>(), scale in 0.0f64..100.0, lambda in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DenseArray::random_uniform(&[2, 3, 5, 6], -1.0, 1.0, &mut rng).scale(scale);
        let v = rmo_loss(&f, lambda).unwrap();
        prop_assert!(v > 0.0 && v <= 1.0);
        prop_assert_eq!(v == 1.0, f.max_abs() == 0.0);
    }

    #[test]
    fn response_term_only_reaches_its_own_layer(seed in any::<u64>(), only in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c = 1;
        for _ in 0..3 {
            let o = rng.random_range(1..=3);
            layers.push(scan_core::network::Layer::Sac(random_sac_layer(&mut rng, c, o)));
            c = o;
        }
        let head = scan_core::network::Head {
            weights: DenseArray::random_uniform(&[3, c], -1.0, 1.0, &mut rng),
            bias: DenseArray::zeros(&[3]),
        };
        let net = SacNetwork::new(layers, head).unwrap();
        let x = DenseArray::random_uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
        let objective = Objective {
            include_rec: false,
            rmo_only_layer: Some(only),
            ..Objective::new(RmoConfig::default())
        };
        let (_, grads, _) = compute_gradients(&net, &x, &[0, 1], &objective).unwrap();
        let inputs = net.forward_trace(&x).unwrap().inputs;
        for (l, g) in grads.layers.iter().enumerate() {
            let LayerGrads::Sac { d_k, d_k_i, d_theta } = g else { unreachable!() };
            let touched = d_k.max_abs() + d_k_i.max_abs() + d_theta.iter().map(|v| v.abs()).sum::<f64>();
            if l == only {
                // a dead upstream ReLU can leave this layer nothing to respond to
                if inputs[l].max_abs() > 0.0 {
                    prop_assert!(touched > 0.0);
                }
            } else {
                prop_assert_eq!(touched, 0.0);
            }
        }
        prop_assert_eq!(grads.d_head_weights.max_abs(), 0.0);
        prop_assert_eq!(grads.d_head_bias.max_abs(), 0.0);
    }

    #[test]
    fn save_load_round_trip(seed in any::<u64>(), sac in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, sac);
        let back = decode_model(&encode_model(&net).unwrap()).unwrap();
        prop_assert_eq!(back.param_arrays(), net.param_arrays());
        prop_assert_eq!(back.form(), net.form());
    }

    #[test]
    fn histogram_is_a_partition_of_unity(seed in any::<u64>(), width in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, true);
        for h in scale_histogram(&net, width).unwrap() {
            prop_assert!(h.bins.iter().all(|b| b.1 >= 0.0));
            prop_assert!((h.integral() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn well_conditioned_decompositions_are_consistent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = DenseArray::random_uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let mut k_i = DenseArray::random_uniform(&[3, 3], -0.2, 0.2, &mut rng);
        k_i.data_mut()[4] += 2.0;
        let a = filter_decomposition(&k, &k_i, None).unwrap();
        prop_assume!(a.well_conditioned);
        prop_assert!(a.residual < 1e-3, "residual {}", a.residual);
    }

    #[test]
    fn composed_kernels_are_recovered(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k_a0 = DenseArray::random_uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let mut k_i = DenseArray::random_uniform(&[3, 3], -0.2, 0.2, &mut rng);
        k_i.data_mut()[4] += 2.0;
        let (k, n) = full_compose(k_a0.data(), 3, k_i.data(), 3);
        let k = DenseArray::from_vec(&[n, n], k).unwrap();
        let a = filter_decomposition(&k, &k_i, None).unwrap();
        prop_assert!(a.k_a.max_abs_diff(&k_a0).unwrap() < 1e-4);
        prop_assert!(a.residual < 1e-6);
    }

    #[test]
    fn classification_ignores_positive_rescaling(dc in 0.01f64..10.0, ratio in 0.1f64..10.0, s in 0.001f64..1000.0) {
        prop_assert_eq!(XPassClass::from_gains(dc, dc * ratio), XPassClass::from_gains(s * dc, s * dc * ratio));
    }

    #[test]
    fn normalized_amplitude_is_unimodal(omega in 0.3f64..3.0, order in 1u32..4) {
        let spec = ScaleOracleSpec::with_range(omega, order, 1.0, 0.01, 20.0 * order as f64 / (omega * omega), 0.01 / (omega * omega)).unwrap();
        let amps: Vec<f64> = spec.t_grid.iter().map(|&t| normalized_derivative_amplitude(&spec, t).unwrap()).collect();
        let signs: Vec<bool> = amps.windows(2).filter(|w| w[1] != w[0]).map(|w| w[1] > w[0]).collect();
        let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
        prop_assert_eq!(changes, 1);
        prop_assert!(signs[0] && !signs[signs.len() - 1]);
        let plain = ScaleOracleSpec { gamma: 0.0, ..spec.clone() };
        let ordinary: Vec<f64> = plain.t_grid.iter().map(|&t| normalized_derivative_amplitude(&plain, t).unwrap()).collect();
        prop_assert!(ordinary.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn parameter_accounting_matches_plain_baseline() {
    for widths in [vec![4], vec![8, 16], vec![3, 5, 7]] {
        let sac = SacNetwork::init(NetworkForm::Sac, 2, &widths, 4, 1).unwrap();
        let plain = SacNetwork::init(NetworkForm::Absorbed, 2, &widths, 4, 1).unwrap();
        let folded = sac.absorbed();
        assert_eq!(folded.param_count(), plain.param_count());
        assert_eq!(folded.conv_multiplies_per_pixel(), plain.conv_multiplies_per_pixel());
        let mut c = 2;
        let mut extra_t = 0;
        let mut bank = 0;
        for &w in &widths {
            extra_t += w;
            bank += w * c * 9;
            c = w;
        }
        assert_eq!(sac.param_count() - plain.param_count(), extra_t + bank);
        let per_layer: Vec<bool> = sac.sac_layers().unwrap().iter().map(|l| l.theta().len() * 9 * l.in_channels() == l.k().len()).collect();
        assert!(per_layer.iter().all(|&b| b));
    }
}

/// Blob of inner scale `t0` against a bank of Laplacian-kernel filters: the
/// central response is largest for the filter whose `t` is nearest `t0`.
#[test]
fn scale_response_peaks_at_matching_filter() {
    let lap = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    let bank = [0.25, 0.5, 1.0, 2.0, 4.0];
    let n = 33;
    for (t0, expect) in [(0.5, 1), (1.0, 2), (2.0, 3)] {
        let c = (n / 2) as f64;
        let img: Vec<f64> = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
                (-(x * x + y * y) / (2.0 * t0)).exp()
            })
            .collect();
        let input = DenseArray::from_vec(&[1, 1, n, n], img).unwrap();
        let k = DenseArray::from_vec(&[5, 1, 3, 3], lap.iter().cycle().take(45).copied().collect()).unwrap();
        let theta = bank.iter().map(|t: &f64| t.ln()).collect();
        let layer = SacLayer::from_parts(k, DenseArray::zeros(&[5, 1, 3, 3]), theta, 1.0, false).unwrap();
        let out = sac_forward(&input, &layer, SacPath::Train).unwrap().pre_activation;
        let resp: Vec<f64> = (0..5).map(|o| out.at4(0, o, n / 2, n / 2).abs()).collect();
        let arg = (0..5).max_by(|&a, &b| resp[a].partial_cmp(&resp[b]).unwrap()).unwrap();
        assert_eq!(arg, expect, "t0 {t0}: responses {resp:?}");
    }
}

#[test]
fn xpass_examples_match_direct_dft() {
    let impulse = k3([0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let lap = k3([0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]);
    let boxk = k3([1.0 / 9.0; 9]);
    let classify = |dc: f64, outer: f64| {
        if (outer - dc).abs() <= 0.05 * dc {
            XPassClass::AllPass
        } else if outer > 1.2 * dc {
            XPassClass::HighPass
        } else if dc > 1.2 * outer {
            XPassClass::LowPass
        } else {
            XPassClass::Mixed
        }
    };
    for (k_a, t) in [(&lap, 1.0), (&boxk, 4.0), (&lap.scale(-1.0), 1.0), (&lap, 0.3)] {
        // k = k_a ⊛ 𝟙, so the decomposition recovers k_a exactly
        let analysis = xpass_classification(k_a, &impulse, t, 1.0, None).unwrap();
        let x = analysis.xpass.unwrap();
        let (dc, outer) = brute_force_xpass_gains(k_a.data(), t, 1.0, 16);
        assert!((x.dc_gain - dc).abs() < 1e-6 && (x.high_gain - outer).abs() < 1e-6, "{x:?} vs {dc} {outer}");
        assert_eq!(x.class, classify(dc, outer));
    }
    let box_class = xpass_classification(&boxk, &impulse, 4.0, 1.0, None).unwrap().xpass.unwrap().class;
    assert_eq!(box_class, XPassClass::LowPass);
    // the Laplacian at t = 1 smooths the high band only mildly: gain ratio under 1.2
    let lap_class = xpass_classification(&lap, &impulse, 1.0, 1.0, None).unwrap().xpass.unwrap().class;
    assert_eq!(lap_class, XPassClass::Mixed);
}

fn high_band_energy(images: &DenseArray) -> f64 {
    let [n, _, h, w] = images.dims4().unwrap();
    let mut total = 0.0;
    for i in 0..n {
        for ky in 0..h {
            for kx in 0..w {
                let fy = if ky > h / 2 { h - ky } else { ky };
                let fx = if kx > w / 2 { w - kx } else { kx };
                // above half the Nyquist frequency in either axis
                if 4 * fy.max(fx) <= h.min(w) {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let p = 2.0 * std::f64::consts::PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        let v = images.at4(i, 0, y, x);
                        re += v * p.cos();
                        im -= v * p.sin();
                    }
                }
                total += re * re + im * im;
            }
        }
    }
    total
}

#[test]
fn blur_removes_high_band_energy() {
    for t in [1.0, 2.0, 4.0] {
        let spec = DatasetSpec {
            train_samples: 4,
            test_samples: 24,
            blur: Blur::Gaussian { t_min: t, t_max: t },
            seed: 5,
            ..DatasetSpec::default()
        };
        let d = spec.generate().unwrap();
        assert!(high_band_energy(&d.test_blurred.images) < high_band_energy(&d.test.images));
    }
}

#[test]
fn sac_and_absorbed_forms_classify_alike() {
    let spec = DatasetSpec {
        train_samples: 8,
        test_samples: 1000,
        seed: 2,
        ..DatasetSpec::default()
    };
    let d = spec.generate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut layers = Vec::new();
    let mut c = 1;
    for w in [6, 8] {
        layers.push(scan_core::network::Layer::Sac(random_sac_layer(&mut rng, c, w)));
        c = w;
    }
    let head = scan_core::network::Head {
        weights: DenseArray::random_uniform(&[4, c], -1.0, 1.0, &mut rng),
        bias: DenseArray::zeros(&[4]),
    };
    let net = SacNetwork::new(layers, head).unwrap();
    let a = evaluate(&net, &d.test, FloatWidth::F64).unwrap();
    let b = evaluate(&net.absorbed(), &d.test, FloatWidth::F64).unwrap();
    let same = a.predictions.iter().zip(&b.predictions).filter(|(x, y)| x == y).count();
    assert!(same as f64 >= 0.999 * 1000.0);
    assert!((a.accuracy - b.accuracy).abs() <= 0.001);
    let c32 = evaluate(&net.absorbed(), &d.test, FloatWidth::F32).unwrap();
    let same32 = a.predictions.iter().zip(&c32.predictions).filter(|(x, y)| x == y).count();
    assert!(same32 as f64 >= 0.999 * 1000.0);
}

#[test]
fn random_network_is_at_chance() {
    let spec = DatasetSpec {
        train_samples: 8,
        test_samples: 1000,
        seed: 4,
        ..DatasetSpec::default()
    };
    let d = spec.generate().unwrap();
    let mut hits = 0.0;
    let seeds = 10;
    for s in 0..seeds {
        let net = SacNetwork::init(NetworkForm::Sac, 1, &[4, 8], 4, 100 + s).unwrap();
        hits += evaluate(&net, &d.test, FloatWidth::F64).unwrap().accuracy;
    }
    let mean = hits / seeds as f64;
    assert!((mean - 0.25).abs() <= 0.05, "mean accuracy {mean}");
}
