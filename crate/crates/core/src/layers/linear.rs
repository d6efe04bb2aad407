use super::{
    accumulate_outer, accumulate_rows, add_into, batch_rows, same_leading, sqnorm, GradMap,
    LayerGradOutput,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map `y = x·W + b` with `W` of shape `K×L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!(
                "linear weight must be K×L, got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match output dim {}",
                    b.shape(),
                    weight.shape()[1]
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Mutable access to the parameters as `(name, tensor)` pairs.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("weight", &mut self.weight)];
        if let Some(b) = self.bias.as_mut() {
            out.push(("bias", b));
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (k, l) = (self.in_dim(), self.out_dim());
        batch_rows(x, k, "linear input")?;
        let rows = x.numel() / k;
        let w = self.weight.data();
        let mut y = vec![0.0; rows * l];
        for (xr, yr) in x.data().chunks_exact(k).zip(y.chunks_exact_mut(l)) {
            for (&xv, wr) in xr.iter().zip(w.chunks_exact(l)) {
                for (a, &wv) in yr.iter_mut().zip(wr) {
                    *a += xv * wv;
                }
            }
            if let Some(b) = &self.bias {
                add_into(yr, b.data());
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = l;
        Tensor::new(shape, y)
    }

    fn check_backward(&self, x: &Tensor, g: &Tensor) -> Result<(usize, usize)> {
        let (batch, rows) = batch_rows(x, self.in_dim(), "linear input")?;
        batch_rows(g, self.out_dim(), "linear upstream gradient")?;
        if !same_leading(x, g) {
            return Err(Error::Shape(format!(
                "input {:?} and gradient {:?} disagree on leading axes",
                x.shape(),
                g.shape()
            )));
        }
        Ok((batch, rows))
    }

    /// `dL/dx = g·Wᵀ`.
    fn input_grad(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let (k, l) = (self.in_dim(), self.out_dim());
        let w = self.weight.data();
        let mut wt = vec![0.0; k * l];
        for (i, wr) in w.chunks_exact(l).enumerate() {
            for (j, &v) in wr.iter().enumerate() {
                wt[j * k + i] = v;
            }
        }
        let mut dx = vec![0.0; x.numel()];
        for (gr, dxr) in g.data().chunks_exact(l).zip(dx.chunks_exact_mut(k)) {
            for (&gv, wtr) in gr.iter().zip(wt.chunks_exact(k)) {
                for (d, &wv) in dxr.iter_mut().zip(wtr) {
                    *d += gv * wv;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), dx)
    }

    /// Backward pass materializing each example's weight gradient `w′_b`
    /// (summed over every non-batch, non-feature axis) and its squared norm.
    pub fn backward_simultaneous(
        &self,
        x: &Tensor,
        g: &Tensor,
    ) -> Result<(LayerGradOutput, Tensor)> {
        let (batch, rows) = self.check_backward(x, g)?;
        let (k, l) = (self.in_dim(), self.out_dim());
        let mut out = LayerGradOutput::new(batch);

        let mut total = vec![0.0; k * l];
        let mut per_b = vec![0.0; k * l];
        let mut raw = Vec::with_capacity(batch);
        let mut bias_total = vec![0.0; l];
        let mut bias_b = vec![0.0; l];
        let mut bias_raw = Vec::with_capacity(batch);
        for b in 0..batch {
            let xs = &x.data()[b * rows * k..(b + 1) * rows * k];
            let gs = &g.data()[b * rows * l..(b + 1) * rows * l];
            per_b.iter_mut().for_each(|v| *v = 0.0);
            accumulate_outer(&mut per_b, xs, gs, k, l);
            raw.push(sqnorm(&per_b));
            add_into(&mut total, &per_b);
            if self.bias.is_some() {
                bias_b.iter_mut().for_each(|v| *v = 0.0);
                accumulate_rows(&mut bias_b, gs, l);
                bias_raw.push(sqnorm(&bias_b));
                add_into(&mut bias_total, &bias_b);
            }
        }
        out.insert("weight", Tensor::new(vec![k, l], total)?, raw);
        if self.bias.is_some() {
            out.insert("bias", Tensor::from_vec(bias_total), bias_raw);
        }
        Ok((out, self.input_grad(x, g)?))
    }

    /// Standard backward pass: gradients summed over every row at once.
    pub fn backward(&self, x: &Tensor, g: &Tensor) -> Result<(GradMap, Tensor)> {
        self.check_backward(x, g)?;
        let (k, l) = (self.in_dim(), self.out_dim());
        let mut grads = GradMap::new();
        let mut dw = vec![0.0; k * l];
        accumulate_outer(&mut dw, x.data(), g.data(), k, l);
        grads.insert("weight".into(), Tensor::new(vec![k, l], dw)?);
        if self.bias.is_some() {
            let mut db = vec![0.0; l];
            accumulate_rows(&mut db, g.data(), l);
            grads.insert("bias".into(), Tensor::from_vec(db));
        }
        Ok((grads, self.input_grad(x, g)?))
    }
}

/// Per-example squared weight-gradient norms `⟨X_b X_bᵀ, G_b G_bᵀ⟩_F`
/// for `B×T×K` inputs and `B×T×L` gradients, without forming `w′_b`.
pub fn linear_perexample_sqnorm_frobenius(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || g.rank() != 3 {
        return Err(Error::Shape(format!(
            "Frobenius path needs B×T×K and B×T×L, got {:?} and {:?}",
            x.shape(),
            g.shape()
        )));
    }
    let (batch, seq, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let l = g.shape()[2];
    if g.shape()[..2] != x.shape()[..2] {
        return Err(Error::Shape(format!(
            "input {:?} and gradient {:?} disagree on B×T",
            x.shape(),
            g.shape()
        )));
    }
    let gram = |data: &[f64], f: usize| -> Vec<f64> {
        let mut out = vec![0.0; seq * seq];
        for t in 0..seq {
            for u in 0..seq {
                let a = &data[t * f..(t + 1) * f];
                let b = &data[u * f..(u + 1) * f];
                out[t * seq + u] = a.iter().zip(b).fold(0.0, |acc, (p, q)| acc + p * q);
            }
        }
        out
    };
    let mut norms = Vec::with_capacity(batch);
    for b in 0..batch {
        let xx = gram(&x.data()[b * seq * k..(b + 1) * seq * k], k);
        let gg = gram(&g.data()[b * seq * l..(b + 1) * seq * l], l);
        norms.push(xx.iter().zip(&gg).fold(0.0, |acc, (p, q)| acc + p * q));
    }
    Ok(Tensor::from_vec(norms))
}
