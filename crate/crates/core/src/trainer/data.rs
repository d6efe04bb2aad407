//! Synthetic first-order Markov token streams.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::layers::TokenIds;

/// Row-stochastic `V×V` transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    vocab: usize,
    transition: Vec<f64>,
}

impl MarkovChain {
    pub fn from_matrix(vocab: usize, transition: Vec<f64>) -> Result<Self> {
        if vocab < 2 || transition.len() != vocab * vocab {
            return Err(Error::InvalidArgument(format!(
                "need a {vocab}×{vocab} matrix with V ≥ 2"
            )));
        }
        for row in transition.chunks_exact(vocab) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("rows must be probability vectors".into()));
            }
        }
        Ok(Self { vocab, transition })
    }

    /// Rows drawn from a symmetric Dirichlet with the given concentration.
    pub fn random(vocab: usize, concentration: f64, rng: &mut impl Rng) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidArgument("vocabulary must have at least 2 tokens".into()));
        }
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("concentration {concentration}: {e}")))?;
        let mut transition = Vec::with_capacity(vocab * vocab);
        for _ in 0..vocab {
            let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng).max(1e-300)).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
            transition.extend(row);
        }
        Ok(Self { vocab, transition })
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        Self::from_matrix(vocab, vec![1.0 / vocab as f64; vocab * vocab])
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.transition[from * self.vocab..(from + 1) * self.vocab]
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.vocab;
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..10_000 {
            let mut next = vec![0.0; v];
            for (i, &p) in pi.iter().enumerate() {
                for (n, &t) in next.iter_mut().zip(self.row(i)) {
                    *n += p * t;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats: the lowest achievable next-token loss under
    /// the stationary distribution.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        (0..self.vocab)
            .map(|i| {
                let h: f64 = self
                    .row(i)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                pi[i] * h
            })
            .sum()
    }

    fn step(&self, from: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (j, &p) in self.row(from).iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        self.vocab - 1
    }
}

/// Seeded stream of sequences; cloning forks the stream state.
#[derive(Debug, Clone)]
pub struct MarkovStream {
    chain: Arc<MarkovChain>,
    rng: ChaCha8Rng,
}

impl MarkovStream {
    pub fn new(chain: MarkovChain, rng: ChaCha8Rng) -> Self {
        Self {
            chain: Arc::new(chain),
            rng,
        }
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }

    /// One sequence of `len` tokens with a uniformly drawn first token.
    pub fn sequence(&mut self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut cur = self.rng.gen_range(0..self.chain.vocab);
        out.push(cur);
        for _ in 1..len {
            cur = self.chain.step(cur, &mut self.rng);
            out.push(cur);
        }
        out
    }

    /// `batch` sequences of length `seq + 1`, split into inputs and the
    /// targets shifted by one.
    pub fn batch(&mut self, batch: usize, seq: usize) -> (TokenIds, TokenIds) {
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let s = self.sequence(seq + 1);
            inputs.extend_from_slice(&s[..seq]);
            targets.extend_from_slice(&s[1..]);
        }
        (
            TokenIds::new(batch, seq, inputs).expect("sized above"),
            TokenIds::new(batch, seq, targets).expect("sized above"),
        )
    }
}

/// Random chain from `seed` (stream 0) and a sequence stream on stream 1.
pub fn make_dataset(vocab: usize, concentration: f64, seed: u64) -> Result<MarkovStream> {
    let mut chain_rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::random(vocab, concentration, &mut chain_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(MarkovStream::new(chain, rng))
}
