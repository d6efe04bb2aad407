use super::{GradMap, LayerGradOutput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `B×T` token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIds {
    batch: usize,
    seq: usize,
    ids: Vec<usize>,
}

impl TokenIds {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch * seq != ids.len() {
            return Err(Error::Shape(format!(
                "{} ids do not fill a {batch}×{seq} grid",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn example(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Examples `range` as a new id grid.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            batch: range.len(),
            seq: self.seq,
            ids: self.ids[range.start * self.seq..range.end * self.seq].to_vec(),
        }
    }
}

/// Token embedding table of shape `V×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLayer {
    weight: Tensor,
}

impl EmbeddingLayer {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.rank() != 2 || weight.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "embedding weight must be V×D with V ≥ 1, got {:?}",
                weight.shape()
            )));
        }
        Ok(Self { weight })
    }

    pub fn vocab(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight)]
    }

    fn check_ids(&self, ids: &TokenIds) -> Result<()> {
        let vocab = self.vocab();
        match ids.ids.iter().find(|&&id| id >= vocab) {
            Some(&id) => Err(Error::IdOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    pub fn forward(&self, ids: &TokenIds) -> Result<Tensor> {
        self.check_ids(ids)?;
        let d = self.dim();
        let w = self.weight.data();
        let mut out = Vec::with_capacity(ids.ids.len() * d);
        for &id in &ids.ids {
            out.extend_from_slice(&w[id * d..(id + 1) * d]);
        }
        Tensor::new(vec![ids.batch, ids.seq, d], out)
    }

    fn check_backward(&self, ids: &TokenIds, g: &Tensor) -> Result<()> {
        self.check_ids(ids)?;
        if g.shape() != [ids.batch, ids.seq, self.dim()] {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match ids {}×{} and dim {}",
                g.shape(),
                ids.batch,
                ids.seq,
                self.dim()
            )));
        }
        if ids.batch == 0 {
            return Err(Error::InvalidArgument("embedding backward on an empty batch".into()));
        }
        Ok(())
    }

    /// Per-example gradients accumulated per distinct id (never forming the
    /// `B×T×V` one-hot), plus their corrected squared norm.
    pub fn backward_simultaneous(&self, ids: &TokenIds, g: &Tensor) -> Result<LayerGradOutput> {
        self.check_backward(ids, g)?;
        let (vocab, d, seq) = (self.vocab(), self.dim(), ids.seq);
        let mut out = LayerGradOutput::new(ids.batch);
        let mut total = vec![0.0; vocab * d];
        let mut raw = Vec::with_capacity(ids.batch);
        // Scratch row per id; `touched` lists ids with nonzero rows this example.
        let mut scratch = vec![0.0; vocab * d];
        let mut touched: Vec<usize> = Vec::with_capacity(seq);
        for b in 0..ids.batch {
            touched.clear();
            for (t, &id) in ids.example(b).iter().enumerate() {
                if !touched.contains(&id) {
                    touched.push(id);
                }
                let row = &g.data()[(b * seq + t) * d..(b * seq + t + 1) * d];
                for (a, &v) in scratch[id * d..(id + 1) * d].iter_mut().zip(row) {
                    *a += v;
                }
            }
            touched.sort_unstable();
            let mut s = 0.0;
            for &id in &touched {
                let acc = &mut scratch[id * d..(id + 1) * d];
                s = acc.iter().fold(s, |s, v| s + v * v);
                for (tv, a) in total[id * d..(id + 1) * d].iter_mut().zip(acc.iter_mut()) {
                    *tv += *a;
                    *a = 0.0;
                }
            }
            raw.push(s);
        }
        out.insert("weight", Tensor::new(vec![vocab, d], total)?, raw);
        Ok(out)
    }

    pub fn backward(&self, ids: &TokenIds, g: &Tensor) -> Result<GradMap> {
        self.check_backward(ids, g)?;
        let d = self.dim();
        let mut dw = vec![0.0; self.vocab() * d];
        for (&id, row) in ids.ids.iter().zip(g.data().chunks_exact(d)) {
            for (a, &v) in dw[id * d..(id + 1) * d].iter_mut().zip(row) {
                *a += v;
            }
        }
        let mut grads = GradMap::new();
        grads.insert("weight".into(), Tensor::new(vec![self.vocab(), d], dw)?);
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{contract, reduce, Reduction};

    fn onehot(ids: &TokenIds, vocab: usize) -> Tensor {
        let mut data = vec![0.0; ids.ids().len() * vocab];
        for (n, &id) in ids.ids().iter().enumerate() {
            data[n * vocab + id] = 1.0;
        }
        Tensor::new(vec![ids.batch(), ids.seq(), vocab], data).unwrap()
    }

    #[test]
    fn repeated_tokens_accumulate_before_squaring() {
        let layer = EmbeddingLayer::new(Tensor::zeros(&[3, 1])).unwrap();
        let ids = TokenIds::new(1, 2, vec![0, 0]).unwrap();
        let g = Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let out = layer.backward_simultaneous(&ids, &g).unwrap();
        assert_eq!(out.weight_grads["weight"].data(), &[3.0, 0.0, 0.0]);
        assert_eq!(out.per_example_sqnorms["weight"], 9.0);
    }

    #[test]
    fn distinct_tokens() {
        let layer = EmbeddingLayer::new(Tensor::zeros(&[3, 1])).unwrap();
        let ids = TokenIds::new(1, 2, vec![0, 1]).unwrap();
        let g = Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let out = layer.backward_simultaneous(&ids, &g).unwrap();
        assert_eq!(out.weight_grads["weight"].data(), &[1.0, 2.0, 0.0]);
        assert_eq!(out.per_example_sqnorms["weight"], 5.0);
    }

    #[test]
    fn zero_gradient() {
        let layer = EmbeddingLayer::new(Tensor::zeros(&[4, 2])).unwrap();
        let ids = TokenIds::new(2, 2, vec![0, 3, 3, 1]).unwrap();
        let out = layer
            .backward_simultaneous(&ids, &Tensor::zeros(&[2, 2, 2]))
            .unwrap();
        assert!(out.weight_grads["weight"].data().iter().all(|&v| v == 0.0));
        assert_eq!(out.per_example_sqnorms["weight"], 0.0);
    }

    #[test]
    fn bucketed_matches_dense_onehot() {
        let (vocab, d) = (5, 3);
        let layer = EmbeddingLayer::new(Tensor::zeros(&[vocab, d])).unwrap();
        let ids = TokenIds::new(2, 4, vec![1, 4, 1, 0, 2, 2, 2, 3]).unwrap();
        let g = Tensor::new(
            vec![2, 4, d],
            (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect(),
        )
        .unwrap();
        let out = layer.backward_simultaneous(&ids, &g).unwrap();

        let oh = onehot(&ids, vocab);
        let per_b = contract("btv,btd->bvd", &[&oh, &g]).unwrap();
        let s = reduce(Reduction::SqNorm, &per_b, &[1, 2]).unwrap();
        let total = contract("bvd->vd", &[&per_b]).unwrap();
        assert_eq!(out.raw_per_example["weight"], s.data());
        assert_eq!(&out.weight_grads["weight"], &total);
        let expected = 0.5 * s.data().iter().sum::<f64>() * 4.0;
        approx::assert_relative_eq!(out.per_example_sqnorms["weight"], expected, max_relative = 1e-15);
    }

    #[test]
    fn out_of_range_id() {
        let layer = EmbeddingLayer::new(Tensor::zeros(&[3, 1])).unwrap();
        let ids = TokenIds::new(1, 2, vec![0, 3]).unwrap();
        assert!(matches!(
            layer.forward(&ids),
            Err(Error::IdOutOfRange { id: 3, vocab: 3 })
        ));
        let g = Tensor::zeros(&[1, 2, 1]);
        assert!(layer.backward_simultaneous(&ids, &g).is_err());
        assert!(TokenIds::new(2, 2, vec![0]).is_err());
    }
}
