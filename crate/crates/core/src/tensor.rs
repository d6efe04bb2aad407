//! Dense row-major `f64` tensors with einsum-style contraction.
//!
//! All reductions run in a fixed order (row-major over the input, and for
//! [`contract`] the last summed label varies fastest), so results are
//! reproducible bit-for-bit.

use std::fmt;

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            if i >= n {
                return None;
            }
            flat = flat * n + i;
        }
        Some(self.data[flat])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Sum of squares of every element, in row-major order.
    pub fn sqnorm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Advance a row-major multi-index; returns false once it wraps around.
fn advance(index: &mut [usize], extents: &[usize]) -> bool {
    for axis in (0..index.len()).rev() {
        index[axis] += 1;
        if index[axis] < extents[axis] {
            return true;
        }
        index[axis] = 0;
    }
    false
}

/// Parsed einsum descriptor such as `"bk,bl->kl"`.
///
/// Labels are single ASCII letters. Every label on the output side must
/// appear in at least one input; labels absent from the output are summed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractionSpec {
    inputs: Vec<Vec<char>>,
    output: Vec<char>,
}

impl ContractionSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let err = |reason: &str| Error::Descriptor {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, rhs) = compact
            .split_once("->")
            .ok_or_else(|| err("missing `->`"))?;
        let parse_labels = |s: &str| -> Result<Vec<char>> {
            s.chars()
                .map(|c| {
                    if c.is_ascii_alphabetic() {
                        Ok(c)
                    } else {
                        Err(err(&format!("unexpected character {c:?}")))
                    }
                })
                .collect()
        };
        let inputs = lhs
            .split(',')
            .map(parse_labels)
            .collect::<Result<Vec<_>>>()?;
        let output = parse_labels(rhs)?;
        for (i, labels) in inputs.iter().enumerate() {
            for (j, c) in labels.iter().enumerate() {
                if labels[..j].contains(c) {
                    return Err(err(&format!("label {c:?} repeated within operand {i}")));
                }
            }
        }
        for (j, c) in output.iter().enumerate() {
            if output[..j].contains(c) {
                return Err(err(&format!("label {c:?} repeated in output")));
            }
            if !inputs.iter().any(|labels| labels.contains(c)) {
                return Err(err(&format!("output label {c:?} absent from all inputs")));
            }
        }
        Ok(Self { inputs, output })
    }

    pub fn n_operands(&self) -> usize {
        self.inputs.len()
    }

    /// Labels that are summed over, in order of first appearance.
    pub fn summed_labels(&self) -> Vec<char> {
        let mut summed = Vec::new();
        for labels in &self.inputs {
            for c in labels {
                if !self.output.contains(c) && !summed.contains(c) {
                    summed.push(*c);
                }
            }
        }
        summed
    }
}

/// Generalized contraction: `out[o] = Σ_s Π_i operand_i[...]`.
pub fn contract(spec: &str, operands: &[&Tensor]) -> Result<Tensor> {
    contract_with(&ContractionSpec::parse(spec)?, operands)
}

pub fn contract_with(spec: &ContractionSpec, operands: &[&Tensor]) -> Result<Tensor> {
    if spec.inputs.len() != operands.len() {
        return Err(Error::Shape(format!(
            "descriptor names {} operands but {} were given",
            spec.inputs.len(),
            operands.len()
        )));
    }
    let mut extents: Vec<(char, usize)> = Vec::new();
    for (i, (labels, t)) in spec.inputs.iter().zip(operands).enumerate() {
        if labels.len() != t.rank() {
            return Err(Error::Shape(format!(
                "operand {i} has rank {} but descriptor gives {} labels",
                t.rank(),
                labels.len()
            )));
        }
        for (c, &n) in labels.iter().zip(t.shape()) {
            match extents.iter().find(|(l, _)| l == c) {
                Some(&(_, m)) if m != n => {
                    return Err(Error::Shape(format!(
                        "label {c:?} has extent {m} and {n} on different operands"
                    )));
                }
                Some(_) => {}
                None => extents.push((*c, n)),
            }
        }
    }
    let extent = |c: char| extents.iter().find(|(l, _)| *l == c).map(|&(_, n)| n).unwrap();

    let out_shape: Vec<usize> = spec.output.iter().map(|&c| extent(c)).collect();
    let summed = spec.summed_labels();
    let sum_shape: Vec<usize> = summed.iter().map(|&c| extent(c)).collect();

    // For every operand, its stride along each output label and each summed label.
    let mut out_strides = Vec::with_capacity(operands.len());
    let mut sum_strides = Vec::with_capacity(operands.len());
    for (labels, t) in spec.inputs.iter().zip(operands) {
        let strides = strides_of(t.shape());
        let stride_for = |c: &char| {
            labels
                .iter()
                .position(|l| l == c)
                .map_or(0, |axis| strides[axis])
        };
        out_strides.push(spec.output.iter().map(stride_for).collect::<Vec<_>>());
        sum_strides.push(summed.iter().map(stride_for).collect::<Vec<_>>());
    }

    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return Tensor::new(out_shape, out);
    }
    let sum_empty = sum_shape.contains(&0);
    let mut out_idx = vec![0usize; out_shape.len()];
    let mut bases = vec![0usize; operands.len()];
    let mut sum_idx = vec![0usize; sum_shape.len()];
    loop {
        for (op, base) in bases.iter_mut().enumerate() {
            *base = out_idx
                .iter()
                .zip(&out_strides[op])
                .map(|(i, s)| i * s)
                .sum();
        }
        let mut acc = 0.0;
        if !sum_empty {
            sum_idx.iter_mut().for_each(|i| *i = 0);
            loop {
                let mut prod = 1.0;
                for (op, t) in operands.iter().enumerate() {
                    let offset: usize = sum_idx
                        .iter()
                        .zip(&sum_strides[op])
                        .map(|(i, s)| i * s)
                        .sum();
                    prod *= t.data[bases[op] + offset];
                }
                acc += prod;
                if !advance(&mut sum_idx, &sum_shape) {
                    break;
                }
            }
        }
        out.push(acc);
        if !advance(&mut out_idx, &out_shape) {
            break;
        }
    }
    Tensor::new(out_shape, out)
}

/// Pointwise operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Square,
    Scale(f64),
}

/// Applies `op` pointwise. Binary ops broadcast the lower-rank operand over
/// the leading axes of the other; its shape must equal the other's trailing axes.
pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let binary = |f: fn(f64, f64) -> f64| -> Result<Tensor> {
        let b = b.ok_or_else(|| {
            Error::InvalidArgument(format!("{op:?} needs a second operand"))
        })?;
        let (big, small, swapped) = if a.rank() >= b.rank() {
            (a, b, false)
        } else {
            (b, a, true)
        };
        let tail = &big.shape[big.rank() - small.rank()..];
        if tail != small.shape() {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} against {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let period = small.numel();
        let data = big
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if period == 0 { 0.0 } else { small.data[i % period] };
                if swapped {
                    f(y, x)
                } else {
                    f(x, y)
                }
            })
            .collect();
        Tensor::new(big.shape.clone(), data)
    };
    let unary = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        if b.is_some() {
            return Err(Error::InvalidArgument(format!(
                "{op:?} takes a single operand"
            )));
        }
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| f(x)).collect(),
        })
    };
    match op {
        Elementwise::Add => binary(|x, y| x + y),
        Elementwise::Sub => binary(|x, y| x - y),
        Elementwise::Mul => binary(|x, y| x * y),
        Elementwise::Square => unary(&|x| x * x),
        Elementwise::Scale(c) => unary(&|x| c * x),
    }
}

/// Reductions over a set of axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    SqNorm,
}

/// Reduces `a` over `axes` (removed from the output shape). Accumulation
/// visits the input in row-major order.
pub fn reduce(op: Reduction, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut reduced = vec![false; rank];
    for &axis in axes {
        if axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for rank {rank}"
            )));
        }
        if reduced[axis] {
            return Err(Error::InvalidArgument(format!("axis {axis} listed twice")));
        }
        reduced[axis] = true;
    }
    let count: usize = (0..rank)
        .filter(|&i| reduced[i])
        .map(|i| a.shape[i])
        .product();
    if op == Reduction::Mean && count == 0 {
        return Err(Error::EmptyReduction(format!(
            "mean over zero elements of shape {:?}",
            a.shape()
        )));
    }
    let out_shape: Vec<usize> = (0..rank)
        .filter(|&i| !reduced[i])
        .map(|i| a.shape[i])
        .collect();
    let out_strides = strides_of(&out_shape);
    // Stride into the output for each input axis (0 on reduced axes).
    let mut map_strides = vec![0usize; rank];
    let mut j = 0;
    for i in 0..rank {
        if !reduced[i] {
            map_strides[i] = out_strides[j];
            j += 1;
        }
    }
    let mut out = vec![0.0; out_shape.iter().product()];
    if a.numel() > 0 {
        let mut idx = vec![0usize; rank];
        for &x in &a.data {
            let o: usize = idx.iter().zip(&map_strides).map(|(i, s)| i * s).sum();
            out[o] += match op {
                Reduction::SqNorm => x * x,
                _ => x,
            };
            advance(&mut idx, &a.shape);
        }
    }
    if op == Reduction::Mean {
        let n = count as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(out_shape, out)
}

/// Reduces over every axis.
pub fn reduce_all(op: Reduction, a: &Tensor) -> Result<Tensor> {
    let axes: Vec<usize> = (0..a.rank()).collect();
    reduce(op, a, &axes)
}
