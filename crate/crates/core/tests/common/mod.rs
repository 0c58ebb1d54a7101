//! Shared test fixtures: independent f64 re-implementations of every
//! forward primitive (used as finite-difference oracles), a literal
//! NT-Xent double-loop oracle, and synthetic scene builders.

#![allow(dead_code)]

use hsic_core::dataset::HsiCube;
use hsic_core::rng::Rng;

/// Row-major f64 matrix for straight-line oracle forwards.
#[derive(Debug, Clone)]
pub struct M {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl M {
    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> M {
        assert_eq!(rows * cols, data.len());
        M {
            rows,
            cols,
            data: data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> M {
        assert_eq!(rows * cols, data.len());
        M {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn matmul(&self, other: &M) -> M {
        assert_eq!(self.cols, other.rows);
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for j in 0..other.cols {
                    out[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        M {
            rows: self.rows,
            cols: other.cols,
            data: out,
        }
    }

    /// self * other^T, matching the tape's matmul_nt.
    pub fn matmul_nt(&self, other: &M) -> M {
        assert_eq!(self.cols, other.cols);
        let mut out = vec![0.0; self.rows * other.rows];
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[j * other.cols + k];
                }
                out[i * other.rows + j] = acc;
            }
        }
        M {
            rows: self.rows,
            cols: other.rows,
            data: out,
        }
    }

    pub fn add_bias(&self, bias: &[f64]) -> M {
        assert_eq!(bias.len(), self.cols);
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        out
    }

    pub fn affine(&self, w: &M, b: &[f64]) -> M {
        self.matmul_nt(w).add_bias(b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> M {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> M {
        self.map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn zip(&self, other: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!(self.data.len(), other.data.len());
        M {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> M {
        assert_eq!(rows * cols, self.data.len());
        M {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    pub fn log_softmax_rows(&self) -> M {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..self.cols {
                out.data[i * self.cols + j] = self.data[i * self.cols + j] - lse;
            }
        }
        out
    }

    pub fn l2_normalize_rows(&self) -> M {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "zero row in l2_normalize oracle");
            for j in 0..self.cols {
                out.data[i * self.cols + j] /= norm;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Literal weighted BCE-with-logits, mean over all terms.
pub fn bce_oracle(logits: &M, targets: &[f64], weights: &[f64], pos_weights: &[f64]) -> f64 {
    let n = logits.data.len();
    let mut acc = 0.0;
    for i in 0..n {
        let x = logits.data[i];
        acc += weights[i]
            * (pos_weights[i] * targets[i] * softplus(-x) + (1.0 - targets[i]) * softplus(x));
    }
    acc / n as f64
}

/// Literal mean negative log-likelihood with 1-based class labels.
pub fn ce_oracle(logits: &M, targets: &[u32]) -> f64 {
    let lsm = logits.log_softmax_rows();
    let mut acc = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        acc -= lsm.data[i * logits.cols + (t as usize - 1)];
    }
    acc / targets.len() as f64
}

/// Literal Eq. 1–2 double loop: cosine similarities, temperature scaling,
/// softmax denominator excluding self, mean over the 2N ordered pairs.
pub fn nt_xent_oracle(z: &[f64], two_n: usize, dim: usize, temperature: f64) -> f64 {
    let cos = |i: usize, j: usize| -> f64 {
        let a = &z[i * dim..(i + 1) * dim];
        let b = &z[j * dim..(j + 1) * dim];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..two_n {
        let j = i ^ 1;
        let mut denom = 0.0;
        for k in 0..two_n {
            if k != i {
                denom += (cos(i, k) / temperature).exp();
            }
        }
        total -= ((cos(i, j) / temperature).exp() / denom).ln();
    }
    total / two_n as f64
}

/// Three linearly separable spectral classes over `bands` bands with mild
/// positional variation so patches are distinct. Ground truth is three
/// vertical strips, no background.
pub fn separable_scene(height: usize, width: usize, bands: usize) -> HsiCube {
    let mut gt = vec![0u32; height * width];
    let mut reflectance = vec![0.0f32; height * width * bands];
    let mut rng = Rng::new(0x5ce9e);
    for r in 0..height {
        for c in 0..width {
            let class = (c * 3 / width).min(2) as u32 + 1;
            gt[r * width + c] = class;
            for b in 0..bands {
                // Class signatures peak on disjoint band groups.
                let peak = if b * 3 / bands == (class - 1) as usize {
                    0.8
                } else {
                    0.1
                };
                let jitter = rng.uniform(-0.03, 0.03);
                reflectance[(r * width + c) * bands + b] = (peak + jitter).clamp(0.0, 1.0);
            }
        }
    }
    HsiCube {
        height,
        width,
        bands,
        reflectance,
        gt,
        num_classes: 3,
    }
}

/// Relative error with a small denominator floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
