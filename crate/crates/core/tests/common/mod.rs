//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use afnas::fxp::{search_formats, QuantPair};
use afnas::nn::{bce_loss, forward_train, FeatureMap, LayerShape, QuantMode, QuantizedNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random small network (1-3 layers) plus a batch it accepts.
pub fn random_small_case(seed: u64) -> (QuantizedNetwork, Vec<FeatureMap>, Vec<f64>) {
    let mut r = rng(seed);
    let formats = search_formats();
    let quant = QuantPair::new(formats[r.random_range(0..formats.len())], formats[r.random_range(0..formats.len())]);
    let n_layers = r.random_range(1..=3);
    let mut shapes = Vec::new();
    for _ in 0..n_layers {
        let kernel = 1usize << r.random_range(0..=3);
        let stride = 1usize << r.random_range(0..=kernel.trailing_zeros().min(2));
        let channels = 1usize << r.random_range(2..=3);
        shapes.push(LayerShape::new(kernel, channels, stride));
    }
    let h = r.random_range(96..=256);
    let mut net = QuantizedNetwork::init(2, &shapes, quant, r.random()).unwrap();
    for l in net.layers.iter_mut() {
        for g in l.bn.scale.iter_mut() {
            *g = r.random_range(0.5..1.5);
        }
        for b in l.bn.bias.iter_mut() {
            *b = r.random_range(-0.3..0.3);
        }
    }
    net.head_bias = r.random_range(-0.2..0.2);
    let batch: Vec<FeatureMap> = (0..3)
        .map(|_| {
            FeatureMap::from_fn(h, 2, |_, _| {
                let z: f64 = StandardNormal.sample(&mut r);
                z * 0.8
            })
        })
        .collect();
    let targets = vec![1.0, 0.0, 1.0];
    (net, batch, targets)
}

fn surrogate_loss(net: &QuantizedNetwork, batch: &[FeatureMap], targets: &[f64]) -> (f64, Vec<u8>) {
    let cache = forward_train(net, batch, QuantMode::Surrogate).unwrap();
    (bce_loss(&cache.logits, targets), cache.activation_pattern(net.quant))
}

/// Central-difference gradient of the surrogate loss. Coordinates whose
/// perturbation crosses a ReLU or clip boundary come back as `None`.
pub fn finite_difference_gradient(
    net: &QuantizedNetwork,
    batch: &[FeatureMap],
    targets: &[f64],
    h: f64,
) -> Vec<Option<f64>> {
    let (_, base_pattern) = surrogate_loss(net, batch, targets);
    let sizes: Vec<usize> = net.trainable().iter().map(|s| s.len()).collect();
    let mut out = Vec::new();
    let mut probe = net.clone();
    for (si, n) in sizes.iter().enumerate() {
        for j in 0..*n {
            let orig = probe.trainable()[si][j];
            probe.trainable_mut()[si][j] = orig + h;
            let (fp, pp) = surrogate_loss(&probe, batch, targets);
            probe.trainable_mut()[si][j] = orig - h;
            let (fm, pm) = surrogate_loss(&probe, batch, targets);
            probe.trainable_mut()[si][j] = orig;
            if pp == base_pattern && pm == base_pattern {
                out.push(Some((fp - fm) / (2.0 * h)));
            } else {
                out.push(None);
            }
        }
    }
    out
}

/// Relative error `|a − b| / max(|a|, |b|)` over the coordinates the
/// oracle kept, plus how many were kept.
pub fn relative_gradient_error(analytic: &[f64], numeric: &[Option<f64>]) -> (f64, usize) {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut kept = 0;
    for (a, b) in analytic.iter().zip(numeric) {
        if let Some(b) = b {
            diff += (a - b) * (a - b);
            na += a * a;
            nb += b * b;
            kept += 1;
        }
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        (0.0, kept)
    } else {
        (diff.sqrt() / scale, kept)
    }
}
