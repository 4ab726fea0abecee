//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use rofg_core::data_io::{gen_synthetic, Dataset, Render, SyntheticKind, SyntheticSpec};
use rofg_core::models::{cross_entropy, forward, init_params, ModelParams, ModelSpec};
use rofg_core::{finite_diff_grad, Array, DenseArray, Rng, Tape};

pub fn random_images(n: usize, c: usize, side: usize, rng: &mut Rng) -> DenseArray {
    DenseArray::new(vec![n, c, side, side], (0..n * c * side * side).map(|_| rng.uniform()).collect()).unwrap()
}

pub fn random_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

pub fn model(spec: &ModelSpec, seed: u64) -> ModelParams {
    init_params(spec, &mut Rng::new(seed)).unwrap()
}

/// Separable two-class blobs as 2-D features.
pub fn blobs(n_train: usize, n_test: usize, classes: usize, noise: f32, seed: u64) -> (Dataset, Dataset) {
    let mut spec = SyntheticSpec::new(SyntheticKind::Blobs, Render::Features, n_train, n_test, classes);
    spec.noise = noise;
    gen_synthetic(&spec, &Rng::new(seed)).unwrap()
}

/// Small synthetic image task for fast end-to-end runs.
pub fn tiny_images(n_train: usize, n_test: usize, side: usize, seed: u64) -> (Dataset, Dataset) {
    let mut spec = SyntheticSpec::new(SyntheticKind::Blobs, Render::Image { side }, n_train, n_test, 4);
    spec.noise = 0.05;
    spec.pixel_noise = 0.05;
    gen_synthetic(&spec, &Rng::new(seed)).unwrap()
}

/// Reference forward pass written with plain loops over NCHW inputs. Returns
/// the logits and the on/off pattern of every relu unit.
pub fn naive_forward(spec: &ModelSpec, params: &ModelParams<f64>, x: &[f64], n: usize) -> (Vec<f64>, Vec<bool>) {
    let arrays: Vec<&Array<f64>> = params.arrays().collect();
    let mut mask = Vec::new();
    let relu = |v: &mut [f64], mask: &mut Vec<bool>| {
        for a in v.iter_mut() {
            mask.push(*a > 0.0);
            if *a <= 0.0 {
                *a = 0.0;
            }
        }
    };
    let dense = |h: &[f64], w: &Array<f64>, b: &Array<f64>| -> Vec<f64> {
        let (fin, fout) = (w.shape()[0], w.shape()[1]);
        let mut out = Vec::with_capacity(n * fout);
        for i in 0..n {
            for o in 0..fout {
                let mut s = b.data()[o];
                for k in 0..fin {
                    s += h[i * fin + k] * w.data()[k * fout + o];
                }
                out.push(s);
            }
        }
        out
    };
    let mut idx = 0;
    let mut h: Vec<f64>;
    let dense_layers;
    match spec {
        ModelSpec::Mlp { widths } => {
            h = x.to_vec();
            dense_layers = widths.len() - 1;
        }
        ModelSpec::Cnn(c) => {
            // Work in NHWC to match the flatten order of the dense head.
            let (mut ch, mut hh, mut ww) = (c.in_channels, c.height, c.width);
            let mut act = vec![0.0; n * hh * ww * ch];
            for i in 0..n {
                for cc in 0..ch {
                    for r in 0..hh {
                        for q in 0..ww {
                            act[((i * hh + r) * ww + q) * ch + cc] = x[((i * ch + cc) * hh + r) * ww + q];
                        }
                    }
                }
            }
            for b in &c.blocks {
                let (w, bias) = (arrays[idx], arrays[idx + 1]);
                idx += 2;
                let (k, co) = (b.kernel, b.out_channels);
                let pad = (k / 2) as isize;
                let mut z = vec![0.0; n * hh * ww * co];
                for i in 0..n {
                    for r in 0..hh {
                        for q in 0..ww {
                            for o in 0..co {
                                let mut s = bias.data()[o];
                                for dr in 0..k {
                                    for dq in 0..k {
                                        let (sr, sq) = (r as isize + dr as isize - pad, q as isize + dq as isize - pad);
                                        if sr < 0 || sq < 0 || sr >= hh as isize || sq >= ww as isize {
                                            continue;
                                        }
                                        for ci in 0..ch {
                                            let xv = act[((i * hh + sr as usize) * ww + sq as usize) * ch + ci];
                                            s += xv * w.data()[((dr * k + dq) * ch + ci) * co + o];
                                        }
                                    }
                                }
                                z[((i * hh + r) * ww + q) * co + o] = s;
                            }
                        }
                    }
                }
                relu(&mut z, &mut mask);
                let (ph, pw) = (hh / 2, ww / 2);
                let mut pooled = vec![0.0; n * ph * pw * co];
                for i in 0..n {
                    for r in 0..ph {
                        for q in 0..pw {
                            for o in 0..co {
                                let at = |rr: usize, qq: usize| z[((i * hh + rr) * ww + qq) * co + o];
                                pooled[((i * ph + r) * pw + q) * co + o] = 0.25
                                    * (at(2 * r, 2 * q) + at(2 * r, 2 * q + 1) + at(2 * r + 1, 2 * q) + at(2 * r + 1, 2 * q + 1));
                            }
                        }
                    }
                }
                act = pooled;
                ch = co;
                hh = ph;
                ww = pw;
            }
            h = act;
            dense_layers = c.hidden.len() + 1;
        }
    }
    for layer in 0..dense_layers {
        h = dense(&h, arrays[idx], arrays[idx + 1]);
        idx += 2;
        if layer + 1 < dense_layers {
            relu(&mut h, &mut mask);
        }
    }
    (h, mask)
}

/// Mean cross-entropy from raw logits, computed directly in f64.
pub fn naive_mean_ce(logits: &[f64], y: &[usize]) -> f64 {
    let c = logits.len() / y.len();
    let mut total = 0.0;
    for (row, &label) in logits.chunks_exact(c).zip(y) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / y.len() as f64
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose difference bracket crosses a relu kink.
    pub kinks: usize,
}

impl GradCheck {
    pub fn merge(self, o: GradCheck) -> GradCheck {
        GradCheck {
            max_rel: self.max_rel.max(o.max_rel),
            checked: self.checked + o.checked,
            kinks: self.kinks + o.kinks,
        }
    }
}

/// Runs [`finite_diff_grad`] over `x` with `loss`, which also returns the relu
/// pattern at the probe point, and compares against `analytic`.
fn compare(
    analytic: &[f64],
    x: &Array<f64>,
    mut loss: impl FnMut(&Array<f64>) -> (f64, Vec<bool>),
    base_mask: &[bool],
    h: f64,
) -> GradCheck {
    // Probes run +h then -h per coordinate; remember which crossed a kink.
    let mut crossed = Vec::with_capacity(2 * x.len());
    let fd = finite_diff_grad(
        |probe| {
            let (l, m) = loss(probe);
            crossed.push(m != base_mask);
            Ok(l)
        },
        x,
        h,
    )
    .unwrap();
    let mut out = GradCheck::default();
    for (i, (&a, &f)) in analytic.iter().zip(fd.data()).enumerate() {
        if crossed[2 * i] || crossed[2 * i + 1] {
            out.kinks += 1;
            continue;
        }
        if a.abs() <= 1e-6 {
            continue;
        }
        out.max_rel = out.max_rel.max((a - f).abs() / a.abs());
        out.checked += 1;
    }
    out
}

/// Checks the gradient of mean cross-entropy with respect to every parameter
/// and every input pixel against central differences of [`naive_forward`].
pub fn grad_check(spec: &ModelSpec, params: &ModelParams, x: &DenseArray, y: &[usize], h: f64) -> GradCheck {
    let p64: ModelParams<f64> = params.cast();
    let x64: Array<f64> = x.cast();
    let n = y.len();
    let mut tape = Tape::<f64>::new();
    let nodes = p64.bind(&mut tape, true);
    let xi = tape.leaf(x64.clone());
    let logits = forward(spec, &mut tape, &nodes, xi).unwrap();
    let (_, mean) = cross_entropy(&mut tape, logits, y).unwrap();
    let mut wrt = nodes.clone();
    wrt.push(xi);
    let grads = tape.backward(mean, &wrt).unwrap();
    let (_, base_mask) = naive_forward(spec, &p64, x64.data(), n);

    let mut result = GradCheck::default();
    for (pi, &node) in nodes.iter().enumerate() {
        let g = grads.get(node).unwrap();
        let current = p64.arrays().nth(pi).unwrap().clone();
        let loss = |arr: &Array<f64>| {
            let mut p = p64.clone();
            *p.arrays_mut().nth(pi).unwrap() = arr.clone();
            let (l, m) = naive_forward(spec, &p, x64.data(), n);
            (naive_mean_ce(&l, y), m)
        };
        result = result.merge(compare(g.data(), &current, loss, &base_mask, h));
    }
    let gx = grads.get(xi).unwrap();
    let loss = |xs: &Array<f64>| {
        let (l, m) = naive_forward(spec, &p64, xs.data(), n);
        (naive_mean_ce(&l, y), m)
    };
    result.merge(compare(gx.data(), &x64, loss, &base_mask, h))
}

/// A binary linear classifier `w·x + b` written as a two-logit MLP whose
/// logit difference is the linear score, so cross-entropy is the logistic
/// loss of the ±1 label.
pub fn linear_as_mlp(w: &[f32], b: f32) -> (ModelSpec, ModelParams) {
    let d = w.len();
    let mut weight = vec![0.0f32; d * 2];
    for (k, &wk) in w.iter().enumerate() {
        weight[k * 2 + 1] = wk;
    }
    let params = ModelParams::from_entries(vec![
        ("fc0.weight".into(), DenseArray::new(vec![d, 2], weight).unwrap()),
        ("fc0.bias".into(), DenseArray::new(vec![2], vec![0.0, b]).unwrap()),
    ]);
    (ModelSpec::mlp(&[d, 2]), params)
}

/// Closed-form ℓ∞ worst case of the logistic loss for a linear model.
pub fn linear_worst_case(w: &[f32], b: f32, x: &[f32], label: usize, eps: f32) -> f64 {
    let y = if label == 1 { 1.0 } else { -1.0 };
    let score: f64 = w.iter().zip(x).map(|(&a, &v)| a as f64 * v as f64).sum::<f64>() + b as f64;
    let l1: f64 = w.iter().map(|v| v.abs() as f64).sum();
    let margin = y * score - eps as f64 * l1;
    (1.0 + (-margin).exp()).ln()
}
