//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawmark::nnet::{Activation, DenseParams, LayerSpec, LossKind, Model, ModelSpec, Targets};
use rawmark::watermark::Candidate;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Model with weights and biases drawn uniformly from [-scale, scale].
pub fn random_model(
    r: &mut ChaCha8Rng,
    input: usize,
    hidden: &[usize],
    act: Activation,
    classes: usize,
    scale: f64,
) -> Model {
    let spec = ModelSpec::mlp(input, hidden, act, classes);
    let base = Model::init(spec.clone(), r.random()).unwrap();
    let layers = base
        .layers()
        .iter()
        .map(|l| {
            let mut p = DenseParams::zeros(l.in_dim, l.out_dim);
            p.weights.iter_mut().chain(p.bias.iter_mut()).for_each(|v| *v = r.random_range(-scale..scale));
            p
        })
        .collect();
    Model::from_parts(spec, layers, base.provenance().clone()).unwrap()
}

/// Hidden pre-activations of every layer, computed from the raw parameters.
pub fn pre_activations(model: &Model, x: &[f64]) -> Vec<Vec<f64>> {
    let mut h = x.to_vec();
    let mut out = Vec::new();
    let mut dense = model.layers().iter();
    for layer in &model.spec().layers {
        match layer {
            LayerSpec::Dense { .. } => {
                let p = dense.next().unwrap();
                h = (0..p.out_dim)
                    .map(|o| p.bias[o] + (0..p.in_dim).map(|i| p.weights[o * p.in_dim + i] * h[i]).sum::<f64>())
                    .collect();
                out.push(h.clone());
            }
            LayerSpec::Activation(a) => h = h.iter().map(|&z| a.apply(z)).collect(),
        }
    }
    out
}

/// Mean loss of `model` with one parameter overwritten.
fn loss_with(
    model: &Model,
    layer: usize,
    index: usize,
    value: f64,
    inputs: &[Vec<f64>],
    targets: Targets,
    loss: LossKind,
) -> f64 {
    let mut layers = model.layers().to_vec();
    let w = layers[layer].weights.len();
    if index < w {
        layers[layer].weights[index] = value;
    } else {
        layers[layer].bias[index - w] = value;
    }
    let m = Model::from_parts(model.spec().clone(), layers, model.provenance().clone()).unwrap();
    m.loss_and_param_grads(inputs, targets, loss).unwrap().0
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative error between analytic and central-difference parameter
/// gradients.
pub fn param_gradient_error(model: &Model, inputs: &[Vec<f64>], targets: Targets, loss: LossKind, h: f64) -> f64 {
    let (_, grads) = model.loss_and_param_grads(inputs, targets, loss).unwrap();
    let mut worst: f64 = 0.0;
    for (l, g) in grads.iter().enumerate() {
        let p = &model.layers()[l];
        let all: Vec<f64> = p.weights.iter().chain(&p.bias).copied().collect();
        let analytic: Vec<f64> = g.weights.iter().chain(&g.bias).copied().collect();
        for (i, (&v, &a)) in all.iter().zip(&analytic).enumerate() {
            let fd = (loss_with(model, l, i, v + h, inputs, targets, loss)
                - loss_with(model, l, i, v - h, inputs, targets, loss))
                / (2.0 * h);
            worst = worst.max(relative_error(a, fd));
        }
    }
    worst
}

pub fn input_gradient_error(model: &Model, x: &[f64], target: usize, h: f64) -> f64 {
    let g = model.input_gradient(x, target).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[i] += h;
        down[i] -= h;
        let fd = (model.loss_at(&up, target).unwrap() - model.loss_at(&down, target).unwrap()) / (2.0 * h);
        worst = worst.max(relative_error(g[i], fd));
    }
    worst
}

/// Mann-Whitney statistic by pairwise counting, ties counted as one half.
pub fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Selection by rank: a candidate's rank is the number of candidates that
/// beat it (larger gap, or equal gap and lower source index).
pub fn selection_by_rank(candidates: &[Candidate], n: usize) -> Vec<usize> {
    let beats =
        |a: &Candidate, b: &Candidate| a.gap() > b.gap() || (a.gap() == b.gap() && a.source_index < b.source_index);
    let mut ranked: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (candidates.iter().filter(|o| beats(o, c)).count(), i))
        .filter(|&(rank, _)| rank < n)
        .collect();
    ranked.sort();
    ranked.into_iter().map(|(_, i)| i).collect()
}

fn lr_partials(xs: &[f64], ys: &[bool], w: f64, b: f64, l2: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let (mut gw, mut gb) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let p = 1.0 / (1.0 + (-(w * x + b)).exp());
        let r = p - if y { 1.0 } else { 0.0 };
        gw += r * x;
        gb += r;
    }
    (gw / n + l2 * w, gb / n)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f is increasing; expand the bracket until it straddles zero.
    while f(lo) > 0.0 {
        lo = 2.0 * lo - hi;
    }
    while f(hi) < 0.0 {
        hi = 2.0 * hi - lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Regularized logistic-regression optimum by nested bisection: the inner
/// solve finds the best bias for a slope, the outer one zeroes the slope
/// derivative along that profile (monotone by convexity).
pub fn lr_oracle(xs: &[f64], ys: &[bool], l2: f64) -> (f64, f64) {
    let best_b = |w: f64| bisect(-1.0, 1.0, |b| lr_partials(xs, ys, w, b, l2).1);
    let w = bisect(-1.0, 1.0, |w| lr_partials(xs, ys, w, best_b(w), l2).0);
    (w, best_b(w))
}

pub fn gaussian_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// `P(extracted | x)` from closed-form class densities.
pub fn gnb_posterior(xs: &[f64], ys: &[bool], x: f64) -> f64 {
    let stats = |want: bool| {
        let v: Vec<f64> = xs.iter().zip(ys).filter(|(_, &y)| y == want).map(|(&x, _)| x).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
        (m, var, v.len() as f64 / xs.len() as f64)
    };
    let (me, ve, pe) = stats(true);
    let (mn, vn, pn) = stats(false);
    let je = pe * gaussian_pdf(x, me, ve);
    let jn = pn * gaussian_pdf(x, mn, vn);
    je / (je + jn)
}
