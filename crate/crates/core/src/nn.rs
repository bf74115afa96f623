//! Dense matrices, parameter traversal, and the Adam update shared by the
//! sequence models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Entries uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// out += self * x
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(x, &mut out);
        out
    }

    /// out += self^T * y
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// self += y * x^T
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        for (&yi, row) in y.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if yi != 0.0 {
                axpy(yi, x, row);
            }
        }
    }
}

/// Eight independent partial sums, so the loop can vectorize.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let x: &[f64; 8] = x.try_into().unwrap();
        let y: &[f64; 8] = y.try_into().unwrap();
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// y += a * x
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Uniform access to every trainable array of a model, in a fixed order.
/// Gradients are stored in a value of the same type.
pub trait Parameters: Sized {
    fn groups(&self) -> Vec<(&'static str, &[f64])>;
    fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;
    fn zeros_like(&self) -> Self;

    fn num_parameters(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }

    fn global_norm(&self) -> f64 {
        self.groups()
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for (_, g) in self.groups_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
        norm
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(model: &P, lr: f64) -> Self {
        let shapes: Vec<usize> = model.groups().iter().map(|(_, g)| g.len()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Descent step: params -= lr * m_hat / (sqrt(v_hat) + eps).
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let grads = grads.groups();
        for (gi, (_, p)) in params.groups_mut().into_iter().enumerate() {
            let g = grads[gi].1;
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Result of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub group: &'static str,
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)
    pub relative_error: f64,
}

/// Central finite-difference check of `grads` against `loss` for every
/// parameter group of `model`.
pub fn check_gradients<P, F>(model: &P, grads: &P, eps: f64, mut loss: F) -> Vec<GroupCheck>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let analytic: Vec<(&'static str, Vec<f64>)> = grads.groups().into_iter().map(|(n, g)| (n, g.to_vec())).collect();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (gi, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.groups()[gi].1[k];
            probe.groups_mut()[gi].1[k] = orig + eps;
            let up = loss(&probe);
            probe.groups_mut()[gi].1[k] = orig - eps;
            let dn = loss(&probe);
            probe.groups_mut()[gi].1[k] = orig;
            *slot = (up - dn) / (2.0 * eps);
        }
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(GroupCheck {
            group: name,
            relative_error: diff / na.max(nn).max(1e-8),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Quad {
        w: Vec<f64>,
    }

    impl Parameters for Quad {
        fn groups(&self) -> Vec<(&'static str, &[f64])> {
            vec![("w", &self.w)]
        }
        fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("w", &mut self.w)]
        }
        fn zeros_like(&self) -> Self {
            Quad {
                w: vec![0.0; self.w.len()],
            }
        }
    }

    #[test]
    fn matvec_and_transpose() {
        let m = Mat {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        let mut out = vec![0.0; 3];
        m.matvec_t_acc(&[1.0, 1.0], &mut out);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
        let mut z = Mat::zeros(2, 3);
        z.add_outer(&[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(z.data, vec![1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
    }

    #[test]
    fn dot_matches_naive_sum() {
        for n in 0..11 {
            let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 1.0).collect();
            let b: Vec<f64> = (0..n).map(|i| 2.0 - i as f64).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut q = Quad { w: vec![3.0, 4.0] };
        assert_eq!(q.clip_global_norm(1.0), 5.0);
        assert!((q.global_norm() - 1.0).abs() < 1e-12);
        let mut small = Quad { w: vec![0.3, 0.4] };
        small.clip_global_norm(1.0);
        assert_eq!(small.w, vec![0.3, 0.4]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut q = Quad { w: vec![2.0, -3.0] };
        let mut opt = Adam::new(&q, 0.1);
        for _ in 0..500 {
            let g = Quad {
                w: q.w.iter().map(|x| 2.0 * x).collect(),
            };
            opt.step(&mut q, &g);
        }
        assert!(q.w.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn finite_difference_check_on_known_gradient() {
        let q = Quad { w: vec![0.7, -1.3] };
        let g = Quad {
            w: q.w.iter().map(|x| 3.0 * x * x).collect(),
        };
        let checks = check_gradients(&q, &g, 1e-5, |p| p.w.iter().map(|x| x * x * x).sum());
        assert!(checks[0].relative_error < 1e-8);
    }

    #[test]
    fn uniform_init_respects_bound() {
        let mut rng = seeded_rng(1);
        let m = Mat::uniform(10, 10, 16, &mut rng);
        assert!(m.data.iter().all(|v| v.abs() <= 0.25));
    }
}
