//! Independent reference computations used only by tests.
//!
//! The finite-difference oracle evaluates the network in double-double
//! arithmetic so that the tiny logit differences produced by a 1e-6
//! perturbation keep full relative precision, then forms the loss
//! difference through `expm1`/`log1p` instead of subtracting two losses.
#![allow(dead_code)]

use gradfisher_core::model::{Activation, ModelParams};
use gradfisher_core::Matrix;

#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }
    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = two_sum(s, e);
        Dd { hi, lo }
    }
    pub fn sub(self, o: Dd) -> Dd {
        self.add(Dd { hi: -o.hi, lo: -o.lo })
    }
    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = two_sum(p, e);
        Dd { hi, lo }
    }
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Logits in double-double; `perturb` = (block index, entry index, delta)
/// where the delta is applied exactly in double-double.
pub fn dd_logits(params: &ModelParams, x: &[f64], perturb: Option<(usize, usize, f64)>) -> Vec<Dd> {
    let blocks = params.blocks();
    let get = |b: usize, i: usize| -> Dd {
        let v = Dd::from(blocks[b][i]);
        match perturb {
            Some((pb, pi, d)) if pb == b && pi == i => v.add(Dd::from(d)),
            _ => v,
        }
    };
    let mut act: Vec<Dd> = x.iter().map(|&v| Dd::from(v)).collect();
    for (li, layer) in params.layers.iter().enumerate() {
        let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
        let mut next = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = get(2 * li + 1, r);
            for c in 0..cols {
                acc = acc.add(get(2 * li, r * cols + c).mul(act[c]));
            }
            next.push(match layer.activation {
                Activation::Relu if acc.hi <= 0.0 => Dd::from(0.0),
                _ => acc,
            });
        }
        act = next;
    }
    let hb = 2 * params.layers.len();
    let (n, m) = (params.head_weight.rows(), params.head_weight.cols());
    (0..n)
        .map(|r| {
            let mut acc = get(hb + 1, r);
            for c in 0..m {
                acc = acc.add(get(hb, r * m + c).mul(act[c]));
            }
            acc
        })
        .collect()
}

/// Smallest |pre-activation| over ReLU layers, used to keep test points
/// away from kinks.
pub fn min_relu_margin(params: &ModelParams, x: &[f64]) -> f64 {
    let t = gradfisher_core::model::forward(params, x).unwrap();
    let mut margin = f64::INFINITY;
    for (l, pre) in params.layers.iter().zip(&t.pre_activations) {
        if l.activation == Activation::Relu {
            for &a in pre.iter() {
                margin = margin.min(a.abs());
            }
        }
    }
    margin
}

/// L(θ+h) − L(θ−h) for cross-entropy, from double-double logits.
fn loss_difference(plus: &[Dd], minus: &[Dd], y: usize) -> f64 {
    // LSE(l+) − LSE(l−) = log( Σ e^{l−_i} (1 + expm1(d_i)) / Σ e^{l−_i} )
    let max = minus.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut num = 0.0;
    for (p, m) in plus.iter().zip(minus) {
        let w = (m.to_f64() - max).exp();
        let d = p.sub(*m).to_f64();
        z += w;
        num += w * d.exp_m1();
    }
    (num / z).ln_1p() - plus[y].sub(minus[y]).to_f64()
}

/// Double-double pre-activations and activations of every extractor layer.
struct DdTrace {
    pre: Vec<Vec<Dd>>,
    act: Vec<Vec<Dd>>,
    logits: Vec<Dd>,
}

fn relu_dd(v: Dd, activation: Activation) -> Dd {
    match activation {
        Activation::Relu if v.hi <= 0.0 => Dd::from(0.0),
        _ => v,
    }
}

fn dense_dd(w: &[f64], b: &[f64], cols: usize, input: &[Dd]) -> Vec<Dd> {
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let mut acc = Dd::from(bias);
            for c in 0..cols {
                acc = acc.add(Dd::from(w[r * cols + c]).mul(input[c]));
            }
            acc
        })
        .collect()
}

fn dd_trace(params: &ModelParams, x: &[f64]) -> DdTrace {
    let mut act = vec![x.iter().map(|&v| Dd::from(v)).collect::<Vec<_>>()];
    let mut pre = Vec::new();
    for layer in &params.layers {
        let z = dense_dd(
            layer.weight.as_slice(),
            &layer.bias,
            layer.weight.cols(),
            act.last().unwrap(),
        );
        act.push(z.iter().map(|&v| relu_dd(v, layer.activation)).collect());
        pre.push(z);
    }
    let logits = dense_dd(
        params.head_weight.as_slice(),
        &params.head_bias,
        params.head_weight.cols(),
        act.last().unwrap(),
    );
    DdTrace { pre, act, logits }
}

/// Logits after adding `delta` to one parameter, propagating only the
/// change from the perturbed unit onward.
fn perturbed_logits(params: &ModelParams, base: &DdTrace, block: usize, idx: usize, delta: f64) -> Vec<Dd> {
    let n_layers = params.layers.len();
    let d = Dd::from(delta);
    if block >= 2 * n_layers {
        let mut logits = base.logits.clone();
        let m = params.head_weight.cols();
        if block == 2 * n_layers {
            let (r, c) = (idx / m, idx % m);
            logits[r] = logits[r].add(d.mul(base.act[n_layers][c]));
        } else {
            logits[idx] = logits[idx].add(d);
        }
        return logits;
    }
    let li = block / 2;
    let cols = params.layers[li].weight.cols();
    let (r, change) = if block % 2 == 0 {
        (idx / cols, d.mul(base.act[li][idx % cols]))
    } else {
        (idx, d)
    };
    let mut act = base.act[li + 1].clone();
    act[r] = relu_dd(base.pre[li][r].add(change), params.layers[li].activation);
    let diff = act[r].sub(base.act[li + 1][r]);
    // The next layer only sees a change in input r.
    let next_update = |w: &Matrix, pre: &[Dd]| -> Vec<Dd> {
        let cols = w.cols();
        pre.iter()
            .enumerate()
            .map(|(k, &p)| p.add(Dd::from(w.as_slice()[k * cols + r]).mul(diff)))
            .collect()
    };
    if li + 1 == n_layers {
        return next_update(&params.head_weight, &base.logits);
    }
    let z = next_update(&params.layers[li + 1].weight, &base.pre[li + 1]);
    let mut act: Vec<Dd> = z
        .iter()
        .map(|&v| relu_dd(v, params.layers[li + 1].activation))
        .collect();
    for layer in &params.layers[li + 2..] {
        let z = dense_dd(layer.weight.as_slice(), &layer.bias, layer.weight.cols(), &act);
        act = z.iter().map(|&v| relu_dd(v, layer.activation)).collect();
    }
    dense_dd(
        params.head_weight.as_slice(),
        &params.head_bias,
        params.head_weight.cols(),
        &act,
    )
}

/// Central finite differences (step `h`) for every parameter, block order.
pub fn finite_difference_gradient(params: &ModelParams, x: &[f64], y: usize, h: f64) -> Vec<f64> {
    let base = dd_trace(params, x);
    let sizes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (b, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let plus = perturbed_logits(params, &base, b, i, h);
            let minus = perturbed_logits(params, &base, b, i, -h);
            out.push(loss_difference(&plus, &minus, y) / (2.0 * h));
        }
    }
    out
}

/// One central difference from two full double-double forward passes.
pub fn finite_difference_entry(params: &ModelParams, x: &[f64], y: usize, h: f64, block: usize, idx: usize) -> f64 {
    let plus = dd_logits(params, x, Some((block, idx, h)));
    let minus = dd_logits(params, x, Some((block, idx, -h)));
    loss_difference(&plus, &minus, y) / (2.0 * h)
}

/// Central differences of the loss with respect to the logits themselves.
pub fn finite_difference_logits(logits: &[f64], y: usize, h: f64) -> Vec<f64> {
    (0..logits.len())
        .map(|k| {
            let plus: Vec<Dd> = logits
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if i == k {
                        Dd::from(v).add(Dd::from(h))
                    } else {
                        Dd::from(v)
                    }
                })
                .collect();
            let minus: Vec<Dd> = logits
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if i == k {
                        Dd::from(v).sub(Dd::from(h))
                    } else {
                        Dd::from(v)
                    }
                })
                .collect();
            loss_difference(&plus, &minus, y) / (2.0 * h)
        })
        .collect()
}

/// −log p_y as log1p(Σ_{i≠y} e^{l_i − l_y}) with a double-double sum.
pub fn reference_loss(logits: &[f64], y: usize) -> f64 {
    let mut acc = Dd::from(0.0);
    for (i, &l) in logits.iter().enumerate() {
        if i != y {
            acc = acc.add(Dd::from((l - logits[y]).exp()));
        }
    }
    acc.to_f64().ln_1p()
}

/// Softmax by direct exponentiate-and-normalise, no max shift.
pub fn reference_softmax(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-15 || nb < 1e-15 {
        0.0
    } else {
        dot / (na * nb)
    }
}
