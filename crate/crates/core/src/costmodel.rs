//! Closed-form FLOP and I/O counts for per-example gradient norms of a
//! linear layer, comparing the simultaneous method with the Gram-matrix
//! (Frobenius) method.
//!
//! Dimensions: `B` batch, `T` sequence length, `K` input dim, `L` output
//! dim. Elsewhere `K` is also written `P` or `I` and `L` is written `D`.
//! FLOPs count one multiply and one add separately and a reduction over
//! `n` terms costs `n − 1` adds. I/O counts values, not bytes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostShape {
    pub b: u64,
    pub t: u64,
    pub k: u64,
    pub l: u64,
    pub bytes_per_value: u64,
}

impl CostShape {
    pub fn new(b: u64, t: u64, k: u64, l: u64) -> Result<Self> {
        Self::with_bytes(b, t, k, l, 4)
    }

    pub fn with_bytes(b: u64, t: u64, k: u64, l: u64, bytes_per_value: u64) -> Result<Self> {
        if [b, t, k, l, bytes_per_value].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "cost dimensions must be positive, got B={b} T={t} K={k} L={l} bytes={bytes_per_value}"
            )));
        }
        Ok(Self {
            b,
            t,
            k,
            l,
            bytes_per_value,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Simultaneous,
    Frobenius,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Simultaneous, Method::Frobenius];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Simultaneous => "simultaneous",
            Method::Frobenius => "frobenius",
        })
    }
}

/// Costs split into the weight-gradient and gradient-norm phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseCost {
    pub weight_grad: u64,
    pub grad_norms: u64,
}

impl PhaseCost {
    pub fn total(&self) -> u64 {
        self.weight_grad + self.grad_norms
    }
}

pub fn flops(shape: &CostShape, method: Method) -> PhaseCost {
    let CostShape { b, t, k, l, .. } = *shape;
    match method {
        Method::Simultaneous => PhaseCost {
            weight_grad: b * k * l * (2 * t - 1) + k * l * (b - 1),
            grad_norms: b * k * l + b * (k * l - 1),
        },
        Method::Frobenius => PhaseCost {
            weight_grad: k * l * (2 * b * t - 1),
            grad_norms: b * t * t * (2 * k + 2 * l - 2) + b * t * t,
        },
    }
}

/// Values read or written.
pub fn io(shape: &CostShape, method: Method) -> PhaseCost {
    let CostShape { b, t, k, l, .. } = *shape;
    match method {
        Method::Simultaneous => PhaseCost {
            weight_grad: b * k * l + b * k * t + b * l * t,
            grad_norms: b * k * l + b,
        },
        Method::Frobenius => PhaseCost {
            weight_grad: b * k * t + b * l * t + k * l,
            grad_norms: 2 * b * t * t + b,
        },
    }
}

pub fn io_bytes(shape: &CostShape, method: Method) -> PhaseCost {
    let v = io(shape, method);
    PhaseCost {
        weight_grad: v.weight_grad * shape.bytes_per_value,
        grad_norms: v.grad_norms * shape.bytes_per_value,
    }
}

/// Norm-phase I/O of a LayerNorm layer: the `B×K` per-example γ (or β)
/// gradients plus `B` norms. Here `k` is the normalized dimension.
pub fn layernorm_norm_io(shape: &CostShape) -> u64 {
    shape.b * shape.k + shape.b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Io,
    Flops,
}

/// Sequence length at which both methods' gradient-norm costs are equal;
/// above it the simultaneous method is cheaper.
pub fn crossover_t(k: u64, l: u64, criterion: Criterion) -> f64 {
    let (k, l) = (k as f64, l as f64);
    match criterion {
        Criterion::Io => (2.0 * k * l).sqrt() / 2.0,
        Criterion::Flops => ((2.0 * k * l - 1.0) / (2.0 * k + 2.0 * l - 1.0)).sqrt(),
    }
}

/// Integer sweep axis: `n`, `a,b,c`, `a..b` (doubling from `a`, always
/// ending at `b`) or `a..b:s` (arithmetic with step `s`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimRange(Vec<u64>);

impl DimRange {
    pub fn values(&self) -> &[u64] {
        &self.0
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("malformed range `{s}`: {why}"));
        let positive = |v: &str| -> Result<u64> {
            let n: u64 = v.trim().parse().map_err(|_| bad("expected an integer"))?;
            if n == 0 {
                return Err(bad("values must be positive"));
            }
            Ok(n)
        };
        let s_trim = s.trim();
        if s_trim.is_empty() {
            return Err(bad("empty"));
        }
        if let Some((lo, rest)) = s_trim.split_once("..") {
            let (hi, step) = match rest.split_once(':') {
                Some((hi, step)) => (hi, Some(positive(step)?)),
                None => (rest, None),
            };
            let (lo, hi) = (positive(lo)?, positive(hi)?);
            if lo > hi {
                return Err(bad("start exceeds end"));
            }
            let mut out = Vec::new();
            let mut v = lo;
            while v < hi {
                out.push(v);
                if out.len() > 1_000_000 {
                    return Err(bad("too many points"));
                }
                v = match step {
                    Some(step) => v.saturating_add(step),
                    None => v.saturating_mul(2),
                };
            }
            out.push(hi);
            return Ok(Self(out));
        }
        let values = s_trim
            .split(',')
            .map(positive)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(values))
    }
}

impl FromStr for DimRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: &'static str,
    #[serde(rename = "B")]
    pub b: u64,
    #[serde(rename = "T")]
    pub t: u64,
    #[serde(rename = "K")]
    pub k: u64,
    #[serde(rename = "L")]
    pub l: u64,
    pub flops_wg: u64,
    pub flops_norms: u64,
    pub io_wg: u64,
    pub io_norms: u64,
    /// Total FLOPs relative to the Frobenius method at the same shape.
    pub ratio_vs_frobenius: f64,
}

/// One row per (shape, method) over the cartesian grid, T varying fastest.
pub fn sweep(b: &DimRange, t: &DimRange, k: &DimRange, l: &DimRange) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &bv in b.values() {
        for &kv in k.values() {
            for &lv in l.values() {
                for &tv in t.values() {
                    let shape = CostShape::new(bv, tv, kv, lv)?;
                    let reference = flops(&shape, Method::Frobenius).total() as f64;
                    for method in Method::ALL {
                        let f = flops(&shape, method);
                        let i = io(&shape, method);
                        rows.push(SweepRow {
                            method: match method {
                                Method::Simultaneous => "simultaneous",
                                Method::Frobenius => "frobenius",
                            },
                            b: bv,
                            t: tv,
                            k: kv,
                            l: lv,
                            flops_wg: f.weight_grad,
                            flops_norms: f.grad_norms,
                            io_wg: i.weight_grad,
                            io_norms: i.grad_norms,
                            ratio_vs_frobenius: f.total() as f64 / reference,
                        });
                    }
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
