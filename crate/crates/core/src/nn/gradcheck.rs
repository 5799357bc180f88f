//! Backprop against central finite differences, in f64.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const EPS: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

fn random(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn l1(y: &Tensor<f64>, t: &Tensor<f64>) -> f64 {
    (y - t).mapv(f64::abs).mean().unwrap()
}

fn perturb(net: &mut dyn Layer<f64>, name: &str, idx: usize, delta: f64) {
    net.visit_mut("", &mut |n, p| {
        if n == name {
            let s = p.value.as_slice_mut().unwrap();
            s[idx] += delta;
        }
    });
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    /// Parameter entries compared.
    pub checked: usize,
    /// Picks skipped because a kink fell inside the stencil.
    pub kinks_skipped: usize,
    pub inputs_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn compare(&mut self, what: String, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(FLOOR);
        let rel = (analytic - numeric).abs() / scale;
        self.max_rel_err = self.max_rel_err.max(rel);
        if rel >= REL_TOL {
            self.failures.push(format!(
                "{what}: backprop {analytic:e} vs finite difference {numeric:e} (rel {rel:e})"
            ));
        }
    }
}

/// Compares backprop against central differences of an L1 loss on at least
/// `samples` trainable weights (every tensor at least once) and a few input
/// elements.
pub fn check_layer(net: &mut dyn Layer<f64>, x: &Tensor<f64>, samples: usize, seed: u64) -> GradcheckReport {
    let mut report = GradcheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = net.forward(x);
    let target = random(y.dim(), &mut rng).mapv(|v| v * 0.5 + 0.5);

    net.zero_grad();
    let y = net.forward_train(x);
    let n = y.len() as f64;
    let dy = (&y - &target).mapv(|d| d.signum() / n);
    let dx = net.backward(&dy);

    let mut params: Vec<(String, usize)> = Vec::new();
    net.visit("", &mut |name, p| {
        if !p.frozen {
            params.push((name.to_string(), p.value.len()))
        }
    });
    let total: usize = params.iter().map(|p| p.1).sum();
    if total < samples {
        report.failures.push(format!("only {total} trainable entries, {samples} requested"));
        return report;
    }

    let mut grads = std::collections::BTreeMap::new();
    net.visit("", &mut |name, p| {
        grads.insert(name.to_string(), p.grad.as_slice().unwrap().to_vec());
    });

    // every parameter tensor once, then random picks
    let mut picks: Vec<(String, usize)> = params.iter().map(|(n, len)| (n.clone(), rng.random_range(0..*len))).collect();
    while picks.len() < samples {
        let (name, len) = &params[rng.random_range(0..params.len())];
        picks.push((name.clone(), rng.random_range(0..*len)));
    }
    let base = l1(&net.forward(x), &target);
    for (name, idx) in &picks {
        let (mut name, mut idx) = (name.as_str(), *idx);
        loop {
            let central = |net: &mut dyn Layer<f64>, e: f64| {
                perturb(net, name, idx, e);
                let up = l1(&net.forward(x), &target);
                perturb(net, name, idx, -2.0 * e);
                let down = l1(&net.forward(x), &target);
                perturb(net, name, idx, e);
                (up, down)
            };
            let (up, down) = central(net, EPS);
            let numeric = (up - down) / (2.0 * EPS);
            // A ReLU or |.| kink inside the stencil makes the difference
            // quotient meaningless: the one-sided slopes disagree, or the
            // quotient changes when the stencil shrinks.
            let (fwd, bwd) = ((up - base) / EPS, (base - down) / EPS);
            let (u2, d2) = central(net, EPS / 10.0);
            let fine = (u2 - d2) / (2.0 * EPS / 10.0);
            let kink = (fwd - bwd).abs() > REL_TOL * fwd.abs().max(bwd.abs()).max(FLOOR)
                || (numeric - fine).abs() > 0.5 * REL_TOL * numeric.abs().max(fine.abs()).max(FLOOR);
            if kink && report.kinks_skipped < 50 * samples {
                // tensors whose every entry feeds many kinks (norm affines
                // of tiny nets) get skipped in favour of another pick
                report.kinks_skipped += 1;
                let (n, len) = &params[rng.random_range(0..params.len())];
                name = n.as_str();
                idx = rng.random_range(0..*len);
                continue;
            }
            report.compare(format!("{name}[{idx}]"), grads[name][idx], numeric);
            report.checked += 1;
            break;
        }
    }

    let mut skipped_inputs = 0;
    while report.inputs_checked < 5 {
        let i = rng.random_range(0..x.len());
        let at = |e: f64| {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += e;
            l1(&net.forward(&xp), &target)
        };
        let (up, down) = (at(EPS), at(-EPS));
        let numeric = (up - down) / (2.0 * EPS);
        let fine = (at(EPS / 10.0) - at(-EPS / 10.0)) / (2.0 * EPS / 10.0);
        let (fwd, bwd) = ((up - base) / EPS, (base - down) / EPS);
        let kink = (fwd - bwd).abs() > REL_TOL * fwd.abs().max(bwd.abs()).max(FLOOR)
            || (numeric - fine).abs() > 0.5 * REL_TOL * numeric.abs().max(fine.abs()).max(FLOOR);
        if kink && skipped_inputs < 50 {
            skipped_inputs += 1;
            report.kinks_skipped += 1;
            continue;
        }
        report.compare(format!("input[{i}]"), dx.as_slice().unwrap()[i], numeric);
        report.inputs_checked += 1;
    }
    report
}

/// Network family name, net and probe input for each family, small enough
/// for finite differences.
pub fn family_probes(seed: u64) -> Vec<(&'static str, Network<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        (
            "transform",
            build_transform_net::<f64>(NetConfig::new(3, 1, 5, 3), seed).unwrap(),
            random((2, 5, 16, 16), &mut rng),
        ),
        (
            "mask (from features)",
            build_mask_net::<f64>(NetConfig::new(3, 1, 9, 1), true, seed + 1).unwrap(),
            random((2, 9, 8, 8), &mut rng),
        ),
        (
            "mask (joint, raw image)",
            build_mask_net::<f64>(NetConfig::new(3, 1, 3, 2), false, seed + 2).unwrap(),
            random((1, 3, 16, 16), &mut rng),
        ),
        (
            "domain adaptation",
            build_da_net::<f64>(NetConfig::new(4, 2, 3, 6), seed + 3).unwrap(),
            random((2, 3, 16, 16), &mut rng),
        ),
        (
            "discriminator",
            build_discriminator::<f64>(NetConfig::new(4, 1, 6, 1), seed + 4).unwrap(),
            random((2, 6, 16, 16), &mut rng),
        ),
    ]
}

#[cfg(test)]
fn check(net: &mut dyn Layer<f64>, x: &Tensor<f64>, samples: usize, seed: u64) {
    let r = check_layer(net, x, samples, seed);
    assert!(r.passed(), "{:#?}", r.failures);
    assert!(r.checked >= samples);
}

#[cfg(test)]
#[test]
fn transform_net_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = build_transform_net::<f64>(NetConfig::new(3, 1, 5, 3), 7).unwrap();
    let x = random((2, 5, 16, 16), &mut rng);
    check(&mut net, &x, 40, 2);
}

#[cfg(test)]
#[test]
fn mask_net_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = build_mask_net::<f64>(NetConfig::new(3, 1, 9, 1), true, 8).unwrap();
    let x = random((2, 9, 8, 8), &mut rng);
    check(&mut net, &x, 40, 4);
    let mut joint = build_mask_net::<f64>(NetConfig::new(3, 1, 3, 2), false, 9).unwrap();
    let x = random((1, 3, 16, 16), &mut rng);
    check(&mut joint, &x, 30, 5);
}

#[cfg(test)]
#[test]
fn da_net_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = build_da_net::<f64>(NetConfig::new(4, 2, 3, 6), 10).unwrap();
    let x = random((2, 3, 16, 16), &mut rng);
    check(&mut net, &x, 30, 6);
    // frozen front end accumulates nothing
    net.visit("", &mut |n, p| {
        if n.starts_with("fixed") {
            assert!(p.grad.iter().all(|g| *g == 0.0));
        }
    });
}

#[cfg(test)]
#[test]
fn discriminator_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = build_discriminator::<f64>(NetConfig::new(4, 1, 6, 1), 11).unwrap();
    let x = random((2, 6, 16, 16), &mut rng);
    check(&mut net, &x, 30, 8);
}
