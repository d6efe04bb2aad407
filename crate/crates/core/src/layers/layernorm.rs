use super::{
    accumulate_rows, add_into, batch_rows, sqnorm, GradMap, LayerGradOutput,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// LayerNorm over the trailing axis with affine parameters `γ`, `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormLayer {
    gamma: Tensor,
    beta: Tensor,
    epsilon: f64,
}

/// Forward-pass state needed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    /// Normalized activations `(x − μ)/√(σ² + ε)`.
    pub x_hat: Tensor,
    /// `1/√(σ² + ε)`, one per trailing vector.
    pub inv_std: Vec<f64>,
}

impl LayerNormLayer {
    pub fn new(gamma: Tensor, beta: Tensor, epsilon: f64) -> Result<Self> {
        if gamma.rank() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::Shape(format!(
                "gamma {:?} and beta {:?} must be equal 1-D shapes",
                gamma.shape(),
                beta.shape()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            gamma,
            beta,
            epsilon,
        })
    }

    /// `γ = 1`, `β = 0`.
    pub fn identity(dim: usize, epsilon: f64) -> Result<Self> {
        Self::new(
            Tensor::from_vec(vec![1.0; dim]),
            Tensor::zeros(&[dim]),
            epsilon,
        )
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("beta", &mut self.beta), ("gamma", &mut self.gamma)]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let k = self.dim();
        if k < 2 {
            return Err(Error::InvalidArgument(
                "LayerNorm needs at least two features".into(),
            ));
        }
        batch_rows(x, k, "layernorm input")?;
        let n = k as f64;
        let mut x_hat = vec![0.0; x.numel()];
        let mut y = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(x.numel() / k);
        for ((xr, hr), yr) in x
            .data()
            .chunks_exact(k)
            .zip(x_hat.chunks_exact_mut(k))
            .zip(y.chunks_exact_mut(k))
        {
            let mean = xr.iter().sum::<f64>() / n;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + self.epsilon).sqrt();
            inv_std.push(r);
            for (i, (&xv, h)) in xr.iter().zip(hr.iter_mut()).enumerate() {
                *h = (xv - mean) * r;
                yr[i] = self.gamma.data()[i] * *h + self.beta.data()[i];
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), y)?,
            LayerNormCache {
                x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
                inv_std,
            },
        ))
    }

    fn check_backward(&self, cache: &LayerNormCache, g: &Tensor) -> Result<(usize, usize)> {
        if cache.x_hat.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "cached activations {:?} do not match gradient {:?}",
                cache.x_hat.shape(),
                g.shape()
            )));
        }
        let dims = batch_rows(g, self.dim(), "layernorm upstream gradient")?;
        if cache.inv_std.len() != g.numel() / self.dim() {
            return Err(Error::Shape("cache inverse std length mismatch".into()));
        }
        Ok(dims)
    }

    /// `dL/dx = r·(h − mean(h) − x̂·mean(h·x̂))` with `h = γ·g`.
    fn input_grad(&self, cache: &LayerNormCache, g: &Tensor) -> Result<Tensor> {
        let k = self.dim();
        let n = k as f64;
        let gamma = self.gamma.data();
        let mut dx = vec![0.0; g.numel()];
        let mut h = vec![0.0; k];
        for (((gr, xr), dr), &r) in g
            .data()
            .chunks_exact(k)
            .zip(cache.x_hat.data().chunks_exact(k))
            .zip(dx.chunks_exact_mut(k))
            .zip(&cache.inv_std)
        {
            for i in 0..k {
                h[i] = gamma[i] * gr[i];
            }
            let mean_h = h.iter().sum::<f64>() / n;
            let mean_hx = h.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
            for i in 0..k {
                dr[i] = r * (h[i] - mean_h - xr[i] * mean_hx);
            }
        }
        Tensor::new(g.shape().to_vec(), dx)
    }

    /// `γ′_b = Σ x̂·g`, `β′_b = Σ g` over every non-batch axis, each with its
    /// corrected per-example squared norm.
    pub fn backward_simultaneous(
        &self,
        cache: &LayerNormCache,
        g: &Tensor,
    ) -> Result<(LayerGradOutput, Tensor)> {
        let (batch, rows) = self.check_backward(cache, g)?;
        let k = self.dim();
        let mut out = LayerGradOutput::new(batch);
        let mut gamma_total = vec![0.0; k];
        let mut beta_total = vec![0.0; k];
        let mut gamma_b = vec![0.0; k];
        let mut beta_b = vec![0.0; k];
        let mut gamma_raw = Vec::with_capacity(batch);
        let mut beta_raw = Vec::with_capacity(batch);
        for b in 0..batch {
            let span = b * rows * k..(b + 1) * rows * k;
            let gs = &g.data()[span.clone()];
            let xs = &cache.x_hat.data()[span];
            gamma_b.iter_mut().for_each(|v| *v = 0.0);
            beta_b.iter_mut().for_each(|v| *v = 0.0);
            accumulate_gamma(&mut gamma_b, xs, gs, k);
            accumulate_rows(&mut beta_b, gs, k);
            gamma_raw.push(sqnorm(&gamma_b));
            beta_raw.push(sqnorm(&beta_b));
            add_into(&mut gamma_total, &gamma_b);
            add_into(&mut beta_total, &beta_b);
        }
        out.insert("gamma", Tensor::from_vec(gamma_total), gamma_raw);
        out.insert("beta", Tensor::from_vec(beta_total), beta_raw);
        Ok((out, self.input_grad(cache, g)?))
    }

    pub fn backward(&self, cache: &LayerNormCache, g: &Tensor) -> Result<(GradMap, Tensor)> {
        self.check_backward(cache, g)?;
        let k = self.dim();
        let mut dgamma = vec![0.0; k];
        let mut dbeta = vec![0.0; k];
        accumulate_gamma(&mut dgamma, cache.x_hat.data(), g.data(), k);
        accumulate_rows(&mut dbeta, g.data(), k);
        let mut grads = GradMap::new();
        grads.insert("gamma".into(), Tensor::from_vec(dgamma));
        grads.insert("beta".into(), Tensor::from_vec(dbeta));
        Ok((grads, self.input_grad(cache, g)?))
    }
}

fn accumulate_gamma(acc: &mut [f64], x_hat: &[f64], g: &[f64], k: usize) {
    for (xr, gr) in x_hat.chunks_exact(k).zip(g.chunks_exact(k)) {
        for ((a, &xv), &gv) in acc.iter_mut().zip(xr).zip(gr) {
            *a += xv * gv;
        }
    }
}
