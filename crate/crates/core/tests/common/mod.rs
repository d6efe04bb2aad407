//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use gnskit::costmodel::{CostShape, Method, PhaseCost};
use gnskit::layers::TokenIds;
use gnskit::tensor::contract;
use gnskit::trainer::ToyModel;
use gnskit::Tensor;
use rand::Rng;

pub fn close(a: f64, b: f64, rtol: f64) -> bool {
    a == b || (a - b).abs() <= rtol * a.abs().max(b.abs())
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Example `b` of a `B×T×F` tensor as `T×F`.
pub fn example(x: &Tensor, b: usize) -> Tensor {
    let (t, f) = (x.shape()[1], x.shape()[2]);
    Tensor::new(vec![t, f], x.data()[b * t * f..(b + 1) * t * f].to_vec()).unwrap()
}

fn ones(n: usize) -> Tensor {
    Tensor::from_vec(vec![1.0; n])
}

/// `B² · mean_b ‖w_b‖²` from a list of per-example squared norms.
pub fn corrected(per_example: &[f64]) -> f64 {
    let b = per_example.len() as f64;
    b * b * per_example.iter().sum::<f64>() / b
}

/// Linear layer: one backward contraction per example.
pub fn linear_oracle(x: &Tensor, g: &Tensor, with_bias: bool) -> BTreeMap<&'static str, Vec<f64>> {
    let mut out: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for b in 0..x.shape()[0] {
        let (xb, gb) = (example(x, b), example(g, b));
        let w = contract("tk,tl->kl", &[&xb, &gb]).unwrap();
        out.entry("weight").or_default().push(w.sqnorm());
        if with_bias {
            let bias = contract("t,tl->l", &[&ones(xb.shape()[0]), &gb]).unwrap();
            out.entry("bias").or_default().push(bias.sqnorm());
        }
    }
    out
}

/// Normalizes every trailing vector with population variance.
pub fn normalize(x: &Tensor, eps: f64) -> Tensor {
    let k = *x.shape().last().unwrap();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        let mean = row.iter().sum::<f64>() / k as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
        let sd = (var + eps).sqrt();
        data.extend(row.iter().map(|v| (v - mean) / sd));
    }
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// LayerNorm: `γ′_b = Σ_t g ⊙ x̂`, `β′_b = Σ_t g`, per example.
pub fn layernorm_oracle(x: &Tensor, g: &Tensor, eps: f64) -> BTreeMap<&'static str, Vec<f64>> {
    let x_hat = normalize(x, eps);
    let mut out: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for b in 0..x.shape()[0] {
        let (xb, gb) = (example(&x_hat, b), example(g, b));
        let gamma = contract("tk,tk->k", &[&xb, &gb]).unwrap();
        let beta = contract("t,tk->k", &[&ones(xb.shape()[0]), &gb]).unwrap();
        out.entry("gamma").or_default().push(gamma.sqnorm());
        out.entry("beta").or_default().push(beta.sqnorm());
    }
    out
}

/// Embedding: dense one-hot contraction per example.
pub fn embedding_oracle(ids: &TokenIds, g: &Tensor, vocab: usize) -> Vec<f64> {
    let seq = ids.seq();
    (0..ids.batch())
        .map(|b| {
            let mut onehot = vec![0.0; seq * vocab];
            for (t, &id) in ids.example(b).iter().enumerate() {
                onehot[t * vocab + id] = 1.0;
            }
            let oh = Tensor::new(vec![seq, vocab], onehot).unwrap();
            contract("tv,td->vd", &[&oh, &example(g, b)]).unwrap().sqnorm()
        })
        .collect()
}

/// Tensors whose elements the I/O counter can see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Buf {
    X,
    G,
    WPerExample,
    WSum,
    GramX,
    GramG,
    Norms,
}

/// Literal multiply/add counter plus the set of distinct values touched.
#[derive(Default)]
struct Counter {
    flops: u64,
    touched: HashSet<(Buf, usize)>,
    excluded: Vec<Buf>,
}

impl Counter {
    fn excluding(excluded: &[Buf]) -> Self {
        Self {
            excluded: excluded.to_vec(),
            ..Self::default()
        }
    }

    fn touch(&mut self, buf: Buf, idx: usize) {
        if !self.excluded.contains(&buf) {
            self.touched.insert((buf, idx));
        }
    }

    fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.flops += 1;
        a * b
    }

    fn add(&mut self, a: f64, b: f64) -> f64 {
        self.flops += 1;
        a + b
    }

    /// Reduction over `n` terms: the first term is taken, then `n−1` adds.
    fn sum(&mut self, terms: impl IntoIterator<Item = f64>) -> f64 {
        let mut it = terms.into_iter();
        let first = it.next().unwrap_or(0.0);
        it.fold(first, |acc, v| self.add(acc, v))
    }

    fn io(&self) -> u64 {
        self.touched.len() as u64
    }
}

/// Runs both phases of `method` on arbitrary data while counting, and
/// returns `(flops, io)` per phase together with the computed norms.
pub fn count_costs(shape: &CostShape, method: Method) -> (PhaseCost, PhaseCost, Vec<f64>) {
    let (b, t, k, l) = (
        shape.b as usize,
        shape.t as usize,
        shape.k as usize,
        shape.l as usize,
    );
    let x: Vec<f64> = (0..b * t * k).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
    let g: Vec<f64> = (0..b * t * l).map(|i| ((i * 5 + 1) % 13) as f64 - 6.0).collect();
    let xi = |bb: usize, tt: usize, kk: usize| (bb * t + tt) * k + kk;
    let gi = |bb: usize, tt: usize, ll: usize| (bb * t + tt) * l + ll;

    match method {
        Method::Simultaneous => {
            // The reduction of w_b into the weight gradient is not memory traffic
            // of the norm computation.
            let mut wg = Counter::excluding(&[Buf::WSum]);
            let mut w_b = vec![0.0; b * k * l];
            for bb in 0..b {
                for kk in 0..k {
                    for ll in 0..l {
                        let terms: Vec<f64> = (0..t)
                            .map(|tt| {
                                wg.touch(Buf::X, xi(bb, tt, kk));
                                wg.touch(Buf::G, gi(bb, tt, ll));
                                wg.mul(x[xi(bb, tt, kk)], g[gi(bb, tt, ll)])
                            })
                            .collect();
                        let idx = (bb * k + kk) * l + ll;
                        w_b[idx] = wg.sum(terms);
                        wg.touch(Buf::WPerExample, idx);
                    }
                }
            }
            for kl in 0..k * l {
                let terms: Vec<f64> = (0..b).map(|bb| w_b[bb * k * l + kl]).collect();
                wg.sum(terms);
                wg.touch(Buf::WSum, kl);
            }
            let mut nm = Counter::default();
            let mut norms = Vec::with_capacity(b);
            for bb in 0..b {
                let terms: Vec<f64> = (0..k * l)
                    .map(|kl| {
                        let idx = bb * k * l + kl;
                        nm.touch(Buf::WPerExample, idx);
                        nm.mul(w_b[idx], w_b[idx])
                    })
                    .collect();
                norms.push(nm.sum(terms));
                nm.touch(Buf::Norms, bb);
            }
            (
                PhaseCost {
                    weight_grad: wg.flops,
                    grad_norms: nm.flops,
                },
                PhaseCost {
                    weight_grad: wg.io(),
                    grad_norms: nm.io(),
                },
                norms,
            )
        }
        Method::Frobenius => {
            let mut wg = Counter::default();
            for kk in 0..k {
                for ll in 0..l {
                    let mut terms = Vec::with_capacity(b * t);
                    for bb in 0..b {
                        for tt in 0..t {
                            wg.touch(Buf::X, xi(bb, tt, kk));
                            wg.touch(Buf::G, gi(bb, tt, ll));
                            terms.push(wg.mul(x[xi(bb, tt, kk)], g[gi(bb, tt, ll)]));
                        }
                    }
                    wg.sum(terms);
                    wg.touch(Buf::WSum, kk * l + ll);
                }
            }
            // Inputs and output gradients are still resident from the
            // weight-gradient phase.
            let mut nm = Counter::excluding(&[Buf::X, Buf::G]);
            let mut norms = Vec::with_capacity(b);
            for bb in 0..b {
                let mut gx = vec![0.0; t * t];
                let mut gg = vec![0.0; t * t];
                for t1 in 0..t {
                    for t2 in 0..t {
                        let tx: Vec<f64> = (0..k)
                            .map(|kk| nm.mul(x[xi(bb, t1, kk)], x[xi(bb, t2, kk)]))
                            .collect();
                        gx[t1 * t + t2] = nm.sum(tx);
                        nm.touch(Buf::GramX, (bb * t + t1) * t + t2);
                        let tg: Vec<f64> = (0..l)
                            .map(|ll| nm.mul(g[gi(bb, t1, ll)], g[gi(bb, t2, ll)]))
                            .collect();
                        gg[t1 * t + t2] = nm.sum(tg);
                        nm.touch(Buf::GramG, (bb * t + t1) * t + t2);
                    }
                }
                // Elementwise product of the Gram matrices; its final
                // summation is not part of the count.
                let mut s = 0.0;
                for i in 0..t * t {
                    s += nm.mul(gx[i], gg[i]);
                }
                norms.push(s);
                nm.touch(Buf::Norms, bb);
            }
            (
                PhaseCost {
                    weight_grad: wg.flops,
                    grad_norms: nm.flops,
                },
                PhaseCost {
                    weight_grad: wg.io(),
                    grad_norms: nm.io(),
                },
                norms,
            )
        }
    }
}

/// One central-difference comparison.
#[derive(Debug, Clone)]
pub struct FdCheck {
    pub layer: String,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdCheck {
    pub fn passes(&self, rtol: f64) -> bool {
        let diff = (self.analytic - self.numeric).abs();
        diff <= rtol * self.analytic.abs().max(self.numeric.abs()) || diff <= 1e-9
    }
}

/// Compares backward gradients of the mean loss to central differences
/// at `per_param` random coordinates of every parameter tensor.
pub fn finite_difference_checks<R: Rng>(
    model: &ToyModel,
    ids: &TokenIds,
    targets: &TokenIds,
    h: f64,
    per_param: usize,
    rng: &mut R,
) -> Vec<FdCheck> {
    let n = (ids.batch() * ids.seq()) as f64;
    let cache = model.forward(ids, targets).unwrap();
    let grads = model.backward(&cache, targets, 1.0 / n, false).unwrap();
    let mut checks = Vec::new();
    for (li, lg) in grads.iter().enumerate() {
        for (name, grad) in &lg.grads {
            for _ in 0..per_param {
                let j = rng.gen_range(0..grad.numel());
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    for (pn, t) in m.layers_mut()[li].layer.params_mut() {
                        if pn == name {
                            t.data_mut()[j] += delta;
                        }
                    }
                    m.mean_loss(ids, targets).unwrap()
                };
                checks.push(FdCheck {
                    layer: lg.key.name.clone(),
                    param: name.clone(),
                    index: j,
                    analytic: grad.data()[j],
                    numeric: (eval(h) - eval(-h)) / (2.0 * h),
                });
            }
        }
    }
    checks
}
