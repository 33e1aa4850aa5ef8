#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scan_core::network::{Head, Layer, PlainLayer, SacNetwork};
use scan_core::sac::SacLayer;
use scan_core::scale_space::gaussian_kernel;
use scan_core::DenseArray;

pub fn interior_max_diff<T: scan_core::Scalar>(a: &DenseArray<T>, b: &DenseArray<T>, border: usize) -> f64 {
    let [n, c, h, w] = a.dims4().unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..c {
            for y in border..h - border {
                for x in border..w - border {
                    worst = worst.max((a.at4(i, j, y, x).to_f64() - b.at4(i, j, y, x).to_f64()).abs());
                }
            }
        }
    }
    worst
}

pub fn random_sac_layer(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> SacLayer {
    let k = DenseArray::random_uniform(&[c_out, c_in, 3, 3], -1.0, 1.0, rng);
    let k_i = DenseArray::random_uniform(&[c_out, c_in, 3, 3], -1.0, 1.0, rng);
    let theta = (0..c_out).map(|_| rng.random_range(-2.0..2.0)).collect();
    SacLayer::from_parts(k, k_i, theta, 1.0, true).unwrap()
}

/// Random network whose values are all exactly representable in `f32`.
pub fn random_network(rng: &mut ChaCha8Rng, sac: bool) -> SacNetwork {
    let depth = rng.random_range(1..=3);
    let mut c = rng.random_range(1..=3);
    let in_channels = c;
    let mut layers = Vec::new();
    for _ in 0..depth {
        let o = rng.random_range(1..=4);
        layers.push(if sac {
            Layer::Sac(random_sac_layer(rng, c, o))
        } else {
            Layer::Plain(PlainLayer::from_kernel(DenseArray::random_uniform(&[o, c, 3, 3], -1.0, 1.0, rng), true).unwrap())
        });
        c = o;
    }
    let classes = rng.random_range(2..=5);
    let head = Head {
        weights: DenseArray::random_uniform(&[classes, c], -1.0, 1.0, rng),
        bias: DenseArray::random_uniform(&[classes], -1.0, 1.0, rng),
    };
    let net = SacNetwork::new(layers, head).unwrap();
    assert_eq!(net.in_channels(), in_channels);
    scan_core::model_io::round_to_f32(&net)
}

/// Full (zero-padded) 2-D correlation of two odd square kernels.
pub fn full_compose(a: &[f64], na: usize, b: &[f64], nb: usize) -> (Vec<f64>, usize) {
    let n = na + nb - 1;
    let mut out = vec![0.0; n * n];
    for ay in 0..na {
        for ax in 0..na {
            for by in 0..nb {
                for bx in 0..nb {
                    out[(ay + by) * n + ax + bx] += a[ay * na + ax] * b[by * nb + bx];
                }
            }
        }
    }
    (out, n)
}

/// DC gain and mean gain over `max(|kx|, |ky|) > grid/4` of
/// `t^γ · (g ⊛ k_a) + 𝟙`, by direct summation of the spatial kernel's DFT.
pub fn brute_force_xpass_gains(k_a: &[f64], t: f64, gamma: f64, grid: usize) -> (f64, f64) {
    let g = gaussian_kernel(t, 2, 2, true).unwrap();
    let (mut x, n) = full_compose(g.values.data(), 5, k_a, 3);
    let w = t.powf(gamma);
    for v in x.iter_mut() {
        *v *= w;
    }
    x[(n / 2) * n + n / 2] += 1.0;
    let half = grid as i64 / 2;
    let mut dc = 0.0;
    let mut outer = 0.0;
    let mut count = 0;
    for ky in -half + 1..=half {
        for kx in -half + 1..=half {
            let (wy, wx) = (
                2.0 * std::f64::consts::PI * ky as f64 / grid as f64,
                2.0 * std::f64::consts::PI * kx as f64 / grid as f64,
            );
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                for xx in 0..n {
                    let phase = wy * (y as f64 - (n / 2) as f64) + wx * (xx as f64 - (n / 2) as f64);
                    re += x[y * n + xx] * phase.cos();
                    im -= x[y * n + xx] * phase.sin();
                }
            }
            let gain = (re * re + im * im).sqrt();
            if kx == 0 && ky == 0 {
                dc = gain;
            }
            if ky.abs().max(kx.abs()) > half / 2 {
                outer += gain;
                count += 1;
            }
        }
    }
    (dc, outer / count as f64)
}
