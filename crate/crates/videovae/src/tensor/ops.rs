//! Elementwise ops, reductions, and shape ops with their backward rules.

use super::{RngStream, Tensor};
use crate::{Result, VvError};

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(VvError::Dimension(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -v).collect()),
                ]
            },
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g| {
                let da = g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect();
                let db = g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect();
                vec![Some(da), Some(db)]
            },
        ))
    }

    pub fn neg(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |g| {
            vec![Some(g.iter().map(|v| -v).collect())]
        })
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v.exp()).collect();
        let out_data = data.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&out_data).map(|(g, y)| g * y).collect())]
        })
    }

    /// |x| with subgradient 0 at x = 0.
    pub fn abs(&self) -> Tensor {
        let input = self.to_vec();
        let data: Vec<f32> = input.iter().map(|v| v.abs()).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(&input)
                    .map(|(g, x)| g * x.signum() * f32::from(*x != 0.0))
                    .collect(),
            )]
        })
    }

    pub fn relu(&self) -> Tensor {
        let input = self.to_vec();
        let data: Vec<f32> = input.iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            // subgradient at exactly 0 is 0
            vec![Some(
                g.iter()
                    .zip(&input)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let y = data.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(
                g.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )]
        })
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v.tanh()).collect();
        let y = data.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(
                g.iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )]
        })
    }

    /// Clamp values to `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        let input = self.to_vec();
        let data: Vec<f32> = input.iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(&input)
                    .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
                    .collect(),
            )]
        })
    }

    pub fn sum_all(&self) -> Tensor {
        // 64-bit accumulator: keeps finite-difference oracles meaningful
        let s = self.data().iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        let n = self.numel();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    /// Inverted-scaling dropout. In eval mode (`training == false`) this is
    /// the identity and consumes no randomness.
    pub fn dropout(&self, rate: f32, rng: &mut RngStream, training: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(VvError::Parameter(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(Tensor::from_op(
                self.to_vec(),
                self.shape().to_vec(),
                vec![self.clone()],
                |g| vec![Some(g.to_vec())],
            ));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.numel())
            .map(|_| {
                if rng.uniform() < f64::from(rate) {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())],
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(VvError::Dimension(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(VvError::Dimension(format!(
                "narrow: axis {axis} out of range for shape {shape:?}"
            )));
        }
        if start + len > shape[axis] {
            return Err(VvError::Dimension(format!(
                "narrow: range {start}..{} exceeds axis {axis} of size {}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_dim = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;

        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);

        let parent_numel = self.numel();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |g| {
                let mut dp = vec![0.0f32; parent_numel];
                for o in 0..outer {
                    let dst = (o * axis_dim + start) * inner;
                    let src = o * len * inner;
                    dp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(dp)]
            },
        ))
    }

    /// Concatenate along `axis`. All non-axis dims must agree.
    pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = inputs
            .first()
            .ok_or_else(|| VvError::Parameter("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(VvError::Dimension(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        for t in inputs {
            if t.shape().len() != rank {
                return Err(VvError::Dimension(format!(
                    "concat: rank mismatch {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != first.shape()[d] {
                    return Err(VvError::Dimension(format!(
                        "concat: non-axis dim {d} mismatch {:?} vs {:?}",
                        first.shape(),
                        t.shape()
                    )));
                }
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let axis_dims: Vec<usize> = inputs.iter().map(|t| t.shape()[axis]).collect();
        let total_axis: usize = axis_dims.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_axis;

        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (t, &ad) in inputs.iter().zip(&axis_dims) {
                let src = t.data();
                let base = o * ad * inner;
                data.extend_from_slice(&src[base..base + ad * inner]);
            }
        }

        let dims = axis_dims.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            inputs.to_vec(),
            move |g| {
                let mut grads: Vec<Vec<f32>> = dims
                    .iter()
                    .map(|ad| Vec::with_capacity(outer * ad * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, &ad) in grads.iter_mut().zip(&dims) {
                        gi.extend_from_slice(&g[pos..pos + ad * inner]);
                        pos += ad * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        ))
    }

    /// Mean cross-entropy of row-wise logits against class indices,
    /// numerically stabilized by max subtraction.
    pub fn cross_entropy_with_logits(&self, labels: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(VvError::Dimension(format!(
                "cross_entropy: expected [N,K] logits, got {shape:?}"
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(VvError::Dimension(format!(
                "cross_entropy: {n} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(VvError::Parameter(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let logits = self.data();
        let mut loss = 0.0f64;
        let mut softmax = vec![0.0f32; n * k];
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += f64::from(v - max).exp();
            }
            let log_denom = denom.ln();
            loss += log_denom - f64::from(row[label] - max);
            for (j, &v) in row.iter().enumerate() {
                softmax[i * k + j] = (f64::from(v - max).exp() / denom) as f32;
            }
        }
        drop(logits);
        let mean = (loss / n as f64) as f32;
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![mean],
            vec![1],
            vec![self.clone()],
            move |g| {
                let scale = g[0] / n as f32;
                let mut d = softmax.clone();
                for (i, &label) in labels.iter().enumerate() {
                    d[i * k + label] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                vec![Some(d)]
            },
        ))
    }
}
