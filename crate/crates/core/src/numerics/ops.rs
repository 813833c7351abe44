//! Forward evaluation and graph recording for tensor operations.
//!
//! Shape preconditions are enforced with assertions; the checked entry points
//! with typed errors live in [`super::nn`].

use std::sync::Arc;

use super::tape::{NodeRef, Op, Operand, Tape};
use super::tensor::{numel, Tensor};

fn tape_of(ts: &[&Tensor]) -> Option<Tape> {
    let mut found: Option<Tape> = None;
    for t in ts {
        if let Some(r) = t.node_ref() {
            match &found {
                None => found = Some(r.tape.clone()),
                Some(e) => assert_eq!(
                    e.id(),
                    r.tape.id(),
                    "operands tracked on different tapes cannot be combined"
                ),
            }
        }
    }
    found
}

fn finish(
    tape: Option<Tape>,
    shape: Vec<usize>,
    data: Vec<f64>,
    op: impl FnOnce(&Tape) -> Op,
) -> Tensor {
    let data = Arc::new(data);
    let node = tape.map(|tape| {
        let id = tape.push(Arc::clone(&data), op(&tape));
        NodeRef { tape, id }
    });
    Tensor { shape, data, node }
}

macro_rules! unary_elementwise {
    ($name:ident, $fwd:expr, $variant:ident) => {
        pub fn $name(&self) -> Tensor {
            let f = $fwd;
            let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
            finish(tape_of(&[self]), self.shape.clone(), data, |t| Op::$variant {
                x: Operand::of(self, t),
            })
        }
    };
}

impl Tensor {
    fn assert_same_shape(&self, other: &Tensor, what: &str) {
        assert_eq!(
            self.shape, other.shape,
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect();
        finish(tape_of(&[self, other]), self.shape.clone(), data, |t| Op::Add {
            a: Operand::of(self, t),
            b: Operand::of(other, t),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect();
        finish(tape_of(&[self, other]), self.shape.clone(), data, |t| Op::Sub {
            a: Operand::of(self, t),
            b: Operand::of(other, t),
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).collect();
        finish(tape_of(&[self, other]), self.shape.clone(), data, |t| Op::Mul {
            a: Operand::of(self, t),
            b: Operand::of(other, t),
        })
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data.iter().map(|v| -v).collect();
        finish(tape_of(&[self]), self.shape.clone(), data, |t| Op::Neg { x: Operand::of(self, t) })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|v| c * v).collect();
        finish(tape_of(&[self]), self.shape.clone(), data, |t| Op::Scale {
            x: Operand::of(self, t),
            c,
        })
    }

    /// y = W x where self is a [m, n] matrix and x a length-n vector.
    pub fn matvec(&self, x: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2, "matvec: weight must be a matrix");
        let (m, n) = (self.shape[0], self.shape[1]);
        assert_eq!(x.len(), n, "matvec: shape mismatch {:?} x {:?}", self.shape, x.shape());
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            data[i] = row.iter().zip(x.data.iter()).map(|(w, x)| w * x).sum();
        }
        finish(tape_of(&[self, x]), vec![m], data, |t| Op::MatVec {
            w: Operand::of(self, t),
            x: Operand::of(x, t),
            m,
            n,
        })
    }

    /// y = A Bᵀ where self: [r, k] and other: [c, k].
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2, "matmul_nt: lhs must be a matrix");
        assert_eq!(other.shape.len(), 2, "matmul_nt: rhs must be a matrix");
        let (r, k) = (self.shape[0], self.shape[1]);
        let c = other.shape[0];
        assert_eq!(other.shape[1], k, "matmul_nt: inner dimension mismatch");
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..c {
                let brow = &other.data[j * k..(j + 1) * k];
                data[i * c + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        finish(tape_of(&[self, other]), vec![r, c], data, |t| Op::MatMulNT {
            a: Operand::of(self, t),
            b: Operand::of(other, t),
            r,
            k,
            c,
        })
    }

    /// 3x3 cross-correlation with stride 1 and zero padding 1.
    /// self: [C, H, W], kernels: [F, C, 3, 3], bias: [F] → [F, H, W].
    pub fn conv2d(&self, kernels: &Tensor, bias: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 3, "conv2d: input must be [C, H, W]");
        let (ch, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        assert_eq!(
            kernels.shape(),
            &[bias.len(), ch, 3, 3],
            "conv2d: kernel shape mismatch {:?} for input {:?}",
            kernels.shape(),
            self.shape
        );
        let f = bias.len();
        let mut data = vec![0.0; f * h * w];
        for fi in 0..f {
            for i in 0..h {
                for j in 0..w {
                    let mut s = bias.data[fi];
                    for c in 0..ch {
                        for a in 0..3usize {
                            let xi = i as isize + a as isize - 1;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            for bb in 0..3usize {
                                let xj = j as isize + bb as isize - 1;
                                if xj < 0 || xj >= w as isize {
                                    continue;
                                }
                                s += self.data[(c * h + xi as usize) * w + xj as usize]
                                    * kernels.data[((fi * ch + c) * 3 + a) * 3 + bb];
                            }
                        }
                    }
                    data[(fi * h + i) * w + j] = s;
                }
            }
        }
        finish(tape_of(&[self, kernels, bias]), vec![f, h, w], data, |t| Op::Conv2d {
            x: Operand::of(self, t),
            k: Operand::of(kernels, t),
            b: Operand::of(bias, t),
            ch,
            h,
            w,
            f,
        })
    }

    unary_elementwise!(sigmoid, |v: f64| 1.0 / (1.0 + (-v).exp()), Sigmoid);
    unary_elementwise!(tanh, |v: f64| v.tanh(), Tanh);
    unary_elementwise!(relu, |v: f64| if v > 0.0 { v } else { 0.0 }, Relu);
    unary_elementwise!(exp, |v: f64| v.exp(), Exp);
    unary_elementwise!(ln, |v: f64| v.ln(), Ln);
    unary_elementwise!(recip, |v: f64| 1.0 / v, Recip);
    unary_elementwise!(abs, |v: f64| v.abs(), Abs);

    pub fn sum(&self) -> Tensor {
        let s = self.data.iter().sum();
        finish(tape_of(&[self]), vec![], vec![s], |t| Op::Sum { x: Operand::of(self, t) })
    }

    pub fn mean(&self) -> Tensor {
        assert!(!self.is_empty(), "mean of empty tensor");
        let s = self.data.iter().sum::<f64>() / self.len() as f64;
        finish(tape_of(&[self]), vec![], vec![s], |t| Op::Mean { x: Operand::of(self, t) })
    }

    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "dot");
        let s = self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum();
        finish(tape_of(&[self, other]), vec![], vec![s], |t| Op::Dot {
            a: Operand::of(self, t),
            b: Operand::of(other, t),
        })
    }

    /// Flat 1-D concatenation.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut data = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        finish(tape_of(parts), vec![total], data, |t| Op::Concat {
            parts: parts.iter().map(|p| Operand::of(p, t)).collect(),
        })
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(rows: &[&Tensor]) -> Tensor {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "stack_rows: ragged rows");
            data.extend_from_slice(&r.data);
        }
        finish(tape_of(rows), vec![rows.len(), cols], data, |t| Op::StackRows {
            rows: rows.iter().map(|r| Operand::of(r, t)).collect(),
            cols,
        })
    }

    /// Scalar element extraction by flat index.
    pub fn pick(&self, idx: usize) -> Tensor {
        assert!(idx < self.len(), "pick: index {idx} out of bounds for {:?}", self.shape);
        let v = self.data[idx];
        finish(tape_of(&[self]), vec![], vec![v], |t| Op::PickElement {
            x: Operand::of(self, t),
            idx,
        })
    }

    pub fn log_softmax(&self) -> Tensor {
        assert_eq!(self.shape.len(), 1, "log_softmax: expected a vector");
        let data = log_softmax_slice(&self.data);
        finish(tape_of(&[self]), self.shape.clone(), data, |t| Op::LogSoftmax {
            x: Operand::of(self, t),
        })
    }

    pub fn row_log_softmax(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "row_log_softmax: expected a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            data[i * c..(i + 1) * c].copy_from_slice(&log_softmax_slice(
                &self.data[i * c..(i + 1) * c],
            ));
        }
        finish(tape_of(&[self]), self.shape.clone(), data, |t| Op::RowLogSoftmax {
            x: Operand::of(self, t),
            r,
            c,
        })
    }

    /// Per-row log Σ exp over columns where `mask` is true. Every row must
    /// retain at least one unmasked column.
    pub fn row_logsumexp_masked(&self, mask: &[bool]) -> Tensor {
        assert_eq!(self.shape.len(), 2, "row_logsumexp_masked: expected a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        assert_eq!(mask.len(), r * c, "row_logsumexp_masked: mask length mismatch");
        let mut data = vec![0.0; r];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mrow = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(mrow)
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite(), "row_logsumexp_masked: fully masked row {i}");
            let s: f64 =
                row.iter().zip(mrow).filter(|(_, m)| **m).map(|(v, _)| (v - mx).exp()).sum();
            data[i] = mx + s.ln();
        }
        let mask = Arc::new(mask.to_vec());
        finish(tape_of(&[self]), vec![r], data, |t| Op::RowLogSumExpMasked {
            x: Operand::of(self, t),
            mask,
            r,
            c,
        })
    }

    /// Each row divided by its Euclidean norm.
    pub fn row_normalize(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "row_normalize: expected a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-12, "row_normalize: zero-norm row {i}");
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        finish(tape_of(&[self]), self.shape.clone(), data, |t| Op::RowNormalize {
            x: Operand::of(self, t),
            r,
            c,
        })
    }

    /// Scalar Σ w_i · x_i with constant weights.
    pub fn weighted_sum(&self, weights: &[f64]) -> Tensor {
        assert_eq!(weights.len(), self.len(), "weighted_sum: weight length mismatch");
        let s = self.data.iter().zip(weights).map(|(x, w)| x * w).sum();
        let w = Arc::new(weights.to_vec());
        finish(tape_of(&[self]), vec![], vec![s], |t| Op::WeightedSum {
            x: Operand::of(self, t),
            w,
        })
    }

    /// Elementwise product with a (possibly tracked) scalar.
    pub fn mul_scalar(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.len(), 1, "mul_scalar: scalar expected");
        let sv = s.data[0];
        let data = self.data.iter().map(|v| v * sv).collect();
        finish(tape_of(&[self, s]), self.shape.clone(), data, |t| Op::MulScalar {
            x: Operand::of(self, t),
            s: Operand::of(s, t),
        })
    }

    /// self: [r, c] with `bias` of length c added to every row.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2, "add_row_broadcast: expected a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        assert_eq!(bias.len(), c, "add_row_broadcast: bias length mismatch");
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = self.data[i * c + j] + bias.data[j];
            }
        }
        finish(tape_of(&[self, bias]), self.shape.clone(), data, |t| Op::AddRowBroadcast {
            x: Operand::of(self, t),
            b: Operand::of(bias, t),
            r,
            c,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.len(),
            "reshape: {:?} incompatible with {:?}",
            shape,
            self.shape
        );
        finish(tape_of(&[self]), shape.to_vec(), self.data.to_vec(), |t| Op::Reshape {
            x: Operand::of(self, t),
        })
    }
}

fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
