//! Matérn kernels and the Hilbert-Schmidt independence criterion.
//!
//! Only the closed-form half-integer orders are supported:
//!
//! | order | `k(r)` with `s = sqrt(2 eta) r / l` |
//! |-------|------------------------------------|
//! | 1/2   | `a exp(-s)`                        |
//! | 3/2   | `a (1 + s) exp(-s)`                |
//! | 5/2   | `a (1 + s + s^2 / 3) exp(-s)`      |
//!
//! HSIC uses the biased estimator `tr(K H L H) / (n - 1)^2` with the
//! centering matrix `H = I - 11^T / n`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum MaternOrder {
    Half,
    #[default]
    ThreeHalves,
    FiveHalves,
}

impl MaternOrder {
    pub fn as_f64(self) -> f64 {
        match self {
            MaternOrder::Half => 0.5,
            MaternOrder::ThreeHalves => 1.5,
            MaternOrder::FiveHalves => 2.5,
        }
    }
}

impl TryFrom<f64> for MaternOrder {
    type Error = Error;

    fn try_from(eta: f64) -> Result<Self> {
        match eta {
            0.5 => Ok(MaternOrder::Half),
            1.5 => Ok(MaternOrder::ThreeHalves),
            2.5 => Ok(MaternOrder::FiveHalves),
            other => Err(Error::UnsupportedOrder(other)),
        }
    }
}

impl From<MaternOrder> for f64 {
    fn from(o: MaternOrder) -> f64 {
        o.as_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaternParams {
    pub order: MaternOrder,
    pub amplitude: f64,
    pub length_scale: f64,
}

impl Default for MaternParams {
    fn default() -> Self {
        Self {
            order: MaternOrder::ThreeHalves,
            amplitude: 1.0,
            length_scale: 1.0,
        }
    }
}

impl MaternParams {
    pub fn new(order: MaternOrder, amplitude: f64, length_scale: f64) -> Result<Self> {
        let p = Self {
            order,
            amplitude,
            length_scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        Ok(())
    }

    /// Kernel value as a function of the Euclidean distance `r`.
    pub fn eval(&self, r: f64) -> f64 {
        let a = self.amplitude;
        let l = self.length_scale;
        match self.order {
            MaternOrder::Half => a * (-r / l).exp(),
            MaternOrder::ThreeHalves => {
                let s = 3f64.sqrt() * r / l;
                a * (1.0 + s) * (-s).exp()
            }
            MaternOrder::FiveHalves => {
                let s = 5f64.sqrt() * r / l;
                a * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }

    /// `k'(r) / r`, the factor that turns `z_u - z_w` into `dk/dz_u`.
    /// For order 1/2 the kernel has a kink at zero; the subgradient 0 is used.
    pub(crate) fn radial_derivative_over_r(&self, r: f64) -> f64 {
        let a = self.amplitude;
        let l = self.length_scale;
        match self.order {
            MaternOrder::Half => {
                if r == 0.0 {
                    0.0
                } else {
                    -(a / l) * (-r / l).exp() / r
                }
            }
            MaternOrder::ThreeHalves => {
                let s = 3f64.sqrt() * r / l;
                -3.0 * a / (l * l) * (-s).exp()
            }
            MaternOrder::FiveHalves => {
                let s = 5f64.sqrt() * r / l;
                -5.0 * a / (3.0 * l * l) * (1.0 + s) * (-s).exp()
            }
        }
    }
}

pub fn matern_kernel(u: &[f64], w: &[f64], params: &MaternParams) -> Result<f64> {
    params.validate()?;
    if u.len() != w.len() {
        return Err(Error::Shape(format!(
            "vector lengths differ: {} vs {}",
            u.len(),
            w.len()
        )));
    }
    Ok(params.eval(euclidean(u.iter().copied(), w.iter().copied())))
}

fn euclidean(u: impl Iterator<Item = f64>, w: impl Iterator<Item = f64>) -> f64 {
    u.zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub(crate) fn row_distance(u: ArrayView1<f64>, w: ArrayView1<f64>) -> f64 {
    euclidean(u.iter().copied(), w.iter().copied())
}

/// A symmetric Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

/// Stacks equal-length rows into a matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::Shape(format!(
            "ragged input: row {i} has {} entries, expected {d}",
            r.len()
        )));
    }
    Ok(Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]))
}

/// Matérn Gram matrix over the rows of `samples`.
pub fn kernel_matrix(samples: ArrayView2<f64>, params: &MaternParams) -> Result<KernelMatrix> {
    params.validate()?;
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::Empty(
            "kernel matrix needs at least one sample".into(),
        ));
    }
    let mut values = Array2::zeros((n, n));
    for u in 0..n {
        values[[u, u]] = params.amplitude;
        for w in (u + 1)..n {
            let k = params.eval(row_distance(samples.row(u), samples.row(w)));
            values[[u, w]] = k;
            values[[w, u]] = k;
        }
    }
    Ok(KernelMatrix { values })
}

/// Delta kernel on class labels (the linear kernel on one-hot codes).
pub fn label_kernel(labels: &[usize], num_classes: usize) -> Result<KernelMatrix> {
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    let n = labels.len();
    Ok(KernelMatrix {
        values: Array2::from_shape_fn(
            (n, n),
            |(u, w)| {
                if labels[u] == labels[w] {
                    1.0
                } else {
                    0.0
                }
            },
        ),
    })
}

/// `H K H` computed as `K - row means - column means + grand mean`.
pub fn center(k: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows();
    if n == 0 {
        return k.clone();
    }
    let nf = n as f64;
    let row_means: Vec<f64> = k.rows().into_iter().map(|r| r.sum() / nf).collect();
    let col_means: Vec<f64> = k.columns().into_iter().map(|c| c.sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    Array2::from_shape_fn((n, n), |(i, j)| {
        k[[i, j]] - row_means[i] - col_means[j] + grand
    })
}

/// `sum_uw a_uw b_uw`, i.e. `tr(A B)` for symmetric `B`.
pub(crate) fn frobenius_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Biased HSIC estimate `tr(K_z H K_y H) / (n - 1)^2`.
pub fn hsic(k_z: &KernelMatrix, k_y: &KernelMatrix) -> Result<f64> {
    let n = k_z.n();
    if k_z.values.dim() != (n, n) || k_y.values.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "kernel matrices differ in size: {:?} vs {:?}",
            k_z.values.dim(),
            k_y.values.dim()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidParameter(
            "HSIC needs at least two samples".into(),
        ));
    }
    // tr(K H L H) = sum_uw K_uw (H L H)_wu and H L H is symmetric.
    let centered_y = center(&k_y.values);
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok(frobenius_inner(&k_z.values, &centered_y) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Label-permutation test of independence between `samples` and `labels`.
/// The p-value is the fraction of permutations whose HSIC is at least the
/// observed one (ties within a relative `1e-12` count as at least).
pub fn hsic_permutation_test(
    samples: ArrayView2<f64>,
    labels: &[usize],
    params: &MaternParams,
    num_permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    let n = samples.nrows();
    if n < 5 {
        return Err(Error::InvalidParameter(format!(
            "permutation test needs at least 5 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }
    if num_permutations < 100 {
        return Err(Error::InvalidParameter(format!(
            "need at least 100 permutations, got {num_permutations}"
        )));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Degenerate("labels contain a single class".into()));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let k = kernel_matrix(samples, params)?;
    let centered = center(&k.values);
    let denom = ((n - 1) * (n - 1)) as f64;
    // HSIC is symmetric in its kernels, so centering K once covers every permutation.
    let statistic_for = |labels: &[usize]| -> f64 {
        let mut acc = 0.0;
        for u in 0..n {
            for w in 0..n {
                if labels[u] == labels[w] {
                    acc += centered[[u, w]];
                }
            }
        }
        acc / denom
    };
    let observed = hsic(&k, &label_kernel(labels, num_classes)?)?;
    let tolerance = 1e-12 * observed.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels.to_vec();
    let mut at_least = 0usize;
    for _ in 0..num_permutations {
        shuffled.shuffle(&mut rng);
        if statistic_for(&shuffled) >= observed - tolerance {
            at_least += 1;
        }
    }
    Ok(PermutationTest {
        statistic: observed,
        p_value: at_least as f64 / num_permutations as f64,
    })
}
