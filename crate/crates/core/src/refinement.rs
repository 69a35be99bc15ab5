//! Gaussian-correlation dependency refinement of graph convolution.
//!
//! For joint features `v_i, v_j` the correlation is the elementwise
//! `exp(-(v_i - v_j)^2 / (2 delta^2))`. A linear map `phi` turns it into a
//! `C'`-dimensional dependency `r_ij`, and each output channel `c` uses the
//! refined adjacency `A + s_c * R[.., .., c]`. Degree normalization always
//! uses the degrees of the static `A + I`, so the refined operator reduces
//! exactly to the plain graph convolution when every `s_c` is zero.
//!
//! These are the reference (tape-free) implementations; the model's
//! differentiable forward pass is checked against them.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{normalize_adjacency, self_loop_degrees, MotionSequence};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GaussianWidth(f64);

impl GaussianWidth {
    pub fn new(delta: f64) -> Result<Self> {
        if delta > 0.0 && delta.is_finite() {
            Ok(Self(delta))
        } else {
            Err(Error::InvalidParameter(format!(
                "Gaussian width must be positive, got {delta}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for GaussianWidth {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<GaussianWidth> for f64 {
    fn from(w: GaussianWidth) -> f64 {
        w.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[inline]
pub(crate) fn gaussian(diff: f64, delta: f64) -> f64 {
    (-(diff * diff) / (2.0 * delta * delta)).exp()
}

pub fn gaussian_correlation(v_i: &[f64], v_j: &[f64], delta: GaussianWidth) -> Result<Vec<f64>> {
    if v_i.len() != v_j.len() {
        return Err(Error::Shape(format!(
            "feature lengths differ: {} vs {}",
            v_i.len(),
            v_j.len()
        )));
    }
    Ok(v_i
        .iter()
        .zip(v_j)
        .map(|(a, b)| gaussian(a - b, delta.get()))
        .collect())
}

/// Temporal mean of each joint's channel vector, `N x C`.
pub fn joint_features(seq: &MotionSequence) -> Array2<f64> {
    temporal_mean(seq.data())
}

pub(crate) fn temporal_mean(x: &Array3<f64>) -> Array2<f64> {
    let t = x.dim().0 as f64;
    x.sum_axis(Axis(0)) / t
}

/// Learnable pieces of the refinement: `phi` (`C x C'` plus bias) and the
/// per-channel scales `s_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyParams {
    pub phi_weights: Array2<f64>,
    pub phi_bias: Array1<f64>,
    pub channel_scale: Array1<f64>,
}

impl DependencyParams {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            phi_weights: Array2::zeros((in_channels, out_channels)),
            phi_bias: Array1::zeros(out_channels),
            channel_scale: Array1::zeros(out_channels),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.phi_weights.nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.phi_weights.ncols()
    }

    fn validate(&self) -> Result<()> {
        let c_out = self.out_channels();
        if self.phi_bias.len() != c_out || self.channel_scale.len() != c_out {
            return Err(Error::Shape(format!(
                "phi has {c_out} outputs but bias has {} and scale has {}",
                self.phi_bias.len(),
                self.channel_scale.len()
            )));
        }
        Ok(())
    }
}

/// `N x N x C'` pairwise dependencies.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyTensor {
    pub values: Array3<f64>,
}

pub fn dependency_tensor(
    features: &Array2<f64>,
    delta: GaussianWidth,
    params: &DependencyParams,
) -> Result<DependencyTensor> {
    params.validate()?;
    let (n, c) = features.dim();
    if c != params.in_channels() {
        return Err(Error::Shape(format!(
            "features have {c} channels, phi expects {}",
            params.in_channels()
        )));
    }
    let c_out = params.out_channels();
    let mut values = Array3::zeros((n, n, c_out));
    let mut corr = vec![0.0; c];
    for i in 0..n {
        for j in 0..n {
            for (k, slot) in corr.iter_mut().enumerate() {
                *slot = gaussian(features[[i, k]] - features[[j, k]], delta.get());
            }
            for o in 0..c_out {
                let mut acc = params.phi_bias[o];
                for (k, g) in corr.iter().enumerate() {
                    acc += params.phi_weights[[k, o]] * g;
                }
                values[[i, j, o]] = acc;
            }
        }
    }
    Ok(DependencyTensor { values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedAdjacency {
    pub values: Array3<f64>,
    pub static_part: Array2<f64>,
}

pub fn refine_adjacency(
    a: &Array2<f64>,
    r: &DependencyTensor,
    params: &DependencyParams,
) -> Result<RefinedAdjacency> {
    params.validate()?;
    let (n, m, c_out) = r.values.dim();
    if a.dim() != (n, m) || n != m {
        return Err(Error::Shape(format!(
            "adjacency {:?} does not match dependency tensor {n}x{m}",
            a.dim()
        )));
    }
    if c_out != params.out_channels() {
        return Err(Error::Shape(format!(
            "dependency tensor has {c_out} channels, scales have {}",
            params.out_channels()
        )));
    }
    let values = Array3::from_shape_fn((n, n, c_out), |(i, j, c)| {
        a[[i, j]] + params.channel_scale[c] * r.values[[i, j, c]]
    });
    Ok(RefinedAdjacency {
        values,
        static_part: a.clone(),
    })
}

/// Per-frame `x_t W`, `T x N x C'`.
fn project(x: &Array3<f64>, w: &Array2<f64>) -> Result<Array3<f64>> {
    let (t, n, c) = x.dim();
    if w.nrows() != c {
        return Err(Error::Shape(format!(
            "input has {c} channels, weight expects {}",
            w.nrows()
        )));
    }
    let c_out = w.ncols();
    let mut h = Array3::zeros((t, n, c_out));
    for f in 0..t {
        for j in 0..n {
            for o in 0..c_out {
                let mut acc = 0.0;
                for k in 0..c {
                    acc += x[[f, j, k]] * w[[k, o]];
                }
                h[[f, j, o]] = acc;
            }
        }
    }
    Ok(h)
}

/// Graph convolution with a channel-specific refined adjacency:
/// output channel `c` is `act(N_c x_t W)[.., c]` with
/// `N_c = D^{-1/2} (A_c + I) D^{-1/2}` and `D` from the static `A + I`.
pub fn refined_graph_conv(
    x: &Array3<f64>,
    refined: &RefinedAdjacency,
    w: &Array2<f64>,
    activation: Activation,
) -> Result<Array3<f64>> {
    let (t, n, _) = x.dim();
    let (rn, _, c_out) = refined.values.dim();
    if rn != n || refined.static_part.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "input has {n} joints, refined adjacency has {rn}"
        )));
    }
    if w.ncols() != c_out {
        return Err(Error::Shape(format!(
            "weight has {} outputs, refined adjacency has {c_out} channels",
            w.ncols()
        )));
    }
    let degrees = self_loop_degrees(&refined.static_part);
    let h = project(x, w)?;
    let mut out = Array3::zeros((t, n, c_out));
    for f in 0..t {
        for i in 0..n {
            for c in 0..c_out {
                let mut acc = 0.0;
                for j in 0..n {
                    let self_loop = if i == j { 1.0 } else { 0.0 };
                    let norm =
                        (refined.values[[i, j, c]] + self_loop) / (degrees[i] * degrees[j]).sqrt();
                    acc += norm * h[[f, j, c]];
                }
                let v = activation.apply(acc);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "graph conv output at ({f}, {i}, {c})"
                    )));
                }
                out[[f, i, c]] = v;
            }
        }
    }
    Ok(out)
}

/// Plain graph convolution `act(D^{-1/2} (A + I) D^{-1/2} x_t W)`.
pub fn graph_conv(
    x: &Array3<f64>,
    a: &Array2<f64>,
    w: &Array2<f64>,
    activation: Activation,
) -> Result<Array3<f64>> {
    let (t, n, _) = x.dim();
    if a.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "input has {n} joints, adjacency is {:?}",
            a.dim()
        )));
    }
    let norm = normalize_adjacency(a)?;
    let h = project(x, w)?;
    let c_out = w.ncols();
    let mut out = Array3::zeros((t, n, c_out));
    for f in 0..t {
        for i in 0..n {
            for c in 0..c_out {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += norm[[i, j]] * h[[f, j, c]];
                }
                out[[f, i, c]] = activation.apply(acc);
            }
        }
    }
    Ok(out)
}
