//! Toy next-token model built only from instrumented layer types:
//! embedding → N × [LayerNorm → Linear → tanh → Linear, residual] →
//! LayerNorm → Linear head → softmax cross-entropy.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gns::{LayerKey, LayerType};
use crate::layers::{
    EmbeddingLayer, GradMap, LayerGradOutput, LayerNormCache, LayerNormLayer, LinearLayer,
    TokenIds,
};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Embedding(EmbeddingLayer),
    LayerNorm(LayerNormLayer),
    Linear(LinearLayer),
}

impl Layer {
    pub fn layer_type(&self) -> LayerType {
        match self {
            Layer::Embedding(_) => LayerType::Embedding,
            Layer::LayerNorm(_) => LayerType::LayerNorm,
            Layer::Linear(_) => LayerType::Linear,
        }
    }

    /// Parameters sorted by name, matching `GradMap` iteration order.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut params = match self {
            Layer::Embedding(l) => l.params_mut(),
            Layer::LayerNorm(l) => l.params_mut(),
            Layer::Linear(l) => l.params_mut(),
        };
        params.sort_by_key(|(name, _)| *name);
        params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub key: LayerKey,
    pub layer: Layer,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub model_dim: usize,
    pub hidden: usize,
    pub n_blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: ModelDims,
    layers: Vec<NamedLayer>,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: TokenIds,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    final_act: Tensor,
    /// Softmax probabilities over the vocabulary, `B×T×V`.
    probs: Vec<f64>,
    /// Summed token cross-entropy of each example.
    pub example_loss: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln: LayerNormCache,
    normed: Tensor,
    hidden: Tensor,
}

/// Gradients of one layer, with per-example norms when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub key: LayerKey,
    pub grads: GradMap,
    /// Corrected per-example squared norms, present for simultaneous backward.
    pub per_example_sqnorms: Option<BTreeMap<String, f64>>,
}

impl ToyModel {
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let ModelDims {
            vocab,
            model_dim: d,
            hidden: h,
            n_blocks,
        } = dims;
        if vocab < 2 || d < 2 || h < 1 {
            return Err(Error::Config(format!("invalid model dims {dims:?}")));
        }
        let mut normal = |shape: &[usize], std: f64| -> Result<Tensor> {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut layers = Vec::with_capacity(3 * n_blocks + 3);
        layers.push(NamedLayer {
            key: LayerKey::new("embed", LayerType::Embedding),
            layer: Layer::Embedding(EmbeddingLayer::new(normal(&[vocab, d], 1.0)?)?),
        });
        let residual_std = 1.0 / ((h as f64).sqrt() * (2.0 * n_blocks.max(1) as f64).sqrt());
        for i in 0..n_blocks {
            layers.push(NamedLayer {
                key: LayerKey::new(format!("blocks.{i}.ln"), LayerType::LayerNorm),
                layer: Layer::LayerNorm(LayerNormLayer::identity(d, LN_EPS)?),
            });
            layers.push(NamedLayer {
                key: LayerKey::new(format!("blocks.{i}.fc1"), LayerType::Linear),
                layer: Layer::Linear(LinearLayer::new(
                    normal(&[d, h], 1.0 / (d as f64).sqrt())?,
                    Some(Tensor::zeros(&[h])),
                )?),
            });
            layers.push(NamedLayer {
                key: LayerKey::new(format!("blocks.{i}.fc2"), LayerType::Linear),
                layer: Layer::Linear(LinearLayer::new(
                    normal(&[h, d], residual_std)?,
                    Some(Tensor::zeros(&[d])),
                )?),
            });
        }
        layers.push(NamedLayer {
            key: LayerKey::new("ln_f", LayerType::LayerNorm),
            layer: Layer::LayerNorm(LayerNormLayer::identity(d, LN_EPS)?),
        });
        layers.push(NamedLayer {
            key: LayerKey::new("head", LayerType::Linear),
            layer: Layer::Linear(LinearLayer::new(
                normal(&[d, vocab], 1.0 / (d as f64).sqrt())?,
                Some(Tensor::zeros(&[vocab])),
            )?),
        });
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn layers(&self) -> &[NamedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedLayer] {
        &mut self.layers
    }

    pub fn n_params(&self) -> usize {
        let mut copy = self.clone();
        copy.layers
            .iter_mut()
            .flat_map(|l| l.layer.params_mut())
            .map(|(_, t)| t.numel())
            .sum()
    }

    fn embed(&self) -> &EmbeddingLayer {
        match &self.layers[0].layer {
            Layer::Embedding(e) => e,
            _ => unreachable!("layer 0 is the embedding"),
        }
    }

    fn ln(&self, idx: usize) -> &LayerNormLayer {
        match &self.layers[idx].layer {
            Layer::LayerNorm(l) => l,
            _ => unreachable!("layer {idx} is a LayerNorm"),
        }
    }

    fn linear(&self, idx: usize) -> &LinearLayer {
        match &self.layers[idx].layer {
            Layer::Linear(l) => l,
            _ => unreachable!("layer {idx} is linear"),
        }
    }

    fn final_ln_idx(&self) -> usize {
        1 + 3 * self.dims.n_blocks
    }

    /// Forward pass with per-example summed cross-entropy against `targets`.
    pub fn forward(&self, ids: &TokenIds, targets: &TokenIds) -> Result<ForwardCache> {
        if ids.batch() != targets.batch() || ids.seq() != targets.seq() {
            return Err(Error::Shape("ids and targets differ in shape".into()));
        }
        let mut h = self.embed().forward(ids)?;
        let mut blocks = Vec::with_capacity(self.dims.n_blocks);
        for i in 0..self.dims.n_blocks {
            let base = 1 + 3 * i;
            let (normed, ln) = self.ln(base).forward(&h)?;
            let mut hidden = self.linear(base + 1).forward(&normed)?;
            hidden.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            let out = self.linear(base + 2).forward(&hidden)?;
            h.data_mut()
                .iter_mut()
                .zip(out.data())
                .for_each(|(a, b)| *a += b);
            blocks.push(BlockCache { ln, normed, hidden });
        }
        let (final_act, final_ln) = self.ln(self.final_ln_idx()).forward(&h)?;
        let logits = self.linear(self.final_ln_idx() + 1).forward(&final_act)?;

        let v = self.dims.vocab;
        let seq = ids.seq();
        let mut probs = logits.into_data();
        let mut example_loss = vec![0.0; ids.batch()];
        for (n, row) in probs.chunks_exact_mut(v).enumerate() {
            let target = targets.ids()[n];
            if target >= v {
                return Err(Error::IdOutOfRange { id: target, vocab: v });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            let log_z = z.ln();
            let nll = -((row[target]).ln() - log_z);
            let inv_z = 1.0 / z;
            row.iter_mut().for_each(|p| *p *= inv_z);
            example_loss[n / seq] += nll;
        }
        Ok(ForwardCache {
            ids: ids.clone(),
            blocks,
            final_ln,
            final_act,
            probs,
            example_loss,
        })
    }

    /// Backpropagates `grad_scale · Σ_tokens CE` through every layer.
    ///
    /// For a mean loss over a batch of `B` sequences of length `T`, pass
    /// `grad_scale = 1/(B·T)` (times any loss scale). With `per_example`,
    /// every layer uses its simultaneous backward and reports norms.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        targets: &TokenIds,
        grad_scale: f64,
        per_example: bool,
    ) -> Result<Vec<LayerGrads>> {
        let v = self.dims.vocab;
        let (batch, seq) = (cache.ids.batch(), cache.ids.seq());
        let mut dlogits = cache.probs.clone();
        for (n, row) in dlogits.chunks_exact_mut(v).enumerate() {
            row[targets.ids()[n]] -= 1.0;
            row.iter_mut().for_each(|p| *p *= grad_scale);
        }
        let dlogits = Tensor::new(vec![batch, seq, v], dlogits)?;

        let mut out: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let record = |out: &mut Vec<Option<LayerGrads>>,
                      idx: usize,
                      grads: GradMap,
                      norms: Option<BTreeMap<String, f64>>| {
            out[idx] = Some(LayerGrads {
                key: self.layers[idx].key.clone(),
                grads,
                per_example_sqnorms: norms,
            });
        };
        let split = |o: LayerGradOutput| (o.weight_grads, Some(o.per_example_sqnorms));

        let linear_back = |idx: usize, x: &Tensor, g: &Tensor| -> Result<(GradMap, Option<BTreeMap<String, f64>>, Tensor)> {
            let layer = self.linear(idx);
            if per_example {
                let (o, dx) = layer.backward_simultaneous(x, g)?;
                let (gm, n) = split(o);
                Ok((gm, n, dx))
            } else {
                let (gm, dx) = layer.backward(x, g)?;
                Ok((gm, None, dx))
            }
        };
        let ln_back = |idx: usize, c: &LayerNormCache, g: &Tensor| -> Result<(GradMap, Option<BTreeMap<String, f64>>, Tensor)> {
            let layer = self.ln(idx);
            if per_example {
                let (o, dx) = layer.backward_simultaneous(c, g)?;
                let (gm, n) = split(o);
                Ok((gm, n, dx))
            } else {
                let (gm, dx) = layer.backward(c, g)?;
                Ok((gm, None, dx))
            }
        };

        let f = self.final_ln_idx();
        let (gm, norms, dact) = linear_back(f + 1, &cache.final_act, &dlogits)?;
        record(&mut out, f + 1, gm, norms);
        let (gm, norms, mut dh) = ln_back(f, &cache.final_ln, &dact)?;
        record(&mut out, f, gm, norms);

        for i in (0..self.dims.n_blocks).rev() {
            let base = 1 + 3 * i;
            let bc = &cache.blocks[i];
            let (gm, norms, mut dhidden) = linear_back(base + 2, &bc.hidden, &dh)?;
            record(&mut out, base + 2, gm, norms);
            dhidden
                .data_mut()
                .iter_mut()
                .zip(bc.hidden.data())
                .for_each(|(d, &a)| *d *= 1.0 - a * a);
            let (gm, norms, dnormed) = linear_back(base + 1, &bc.normed, &dhidden)?;
            record(&mut out, base + 1, gm, norms);
            let (gm, norms, dres) = ln_back(base, &bc.ln, &dnormed)?;
            record(&mut out, base, gm, norms);
            dh.data_mut()
                .iter_mut()
                .zip(dres.data())
                .for_each(|(a, b)| *a += b);
        }

        if per_example {
            let o = self.embed().backward_simultaneous(&cache.ids, &dh)?;
            let (gm, norms) = split(o);
            record(&mut out, 0, gm, norms);
        } else {
            let gm = self.embed().backward(&cache.ids, &dh)?;
            record(&mut out, 0, gm, None);
        }
        Ok(out.into_iter().map(|g| g.expect("every layer visited")).collect())
    }

    /// Mean token cross-entropy of a batch.
    pub fn mean_loss(&self, ids: &TokenIds, targets: &TokenIds) -> Result<f64> {
        let cache = self.forward(ids, targets)?;
        Ok(sum_in_order(&cache.example_loss) / (ids.batch() * ids.seq()) as f64)
    }
}

pub(crate) fn sum_in_order(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, b| a + b)
}
