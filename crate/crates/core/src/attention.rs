//! Class activation maps, re-balancing and the transform-consistency loss.

use std::io::{Read, Write};

use ndarray::{linalg::general_mat_mul, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::balance::BalanceWeights;
use crate::error::{Error, Result};

/// Backbone output, shape N×C×H×W.
pub type FeatureMap = Array4<f64>;

/// Fully connected weights, shape L×C. Shared between logits and CAMs.
pub type ClassifierWeights = Array2<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    /// Shape N×L×H×W.
    pub values: Array4<f64>,
    pub rebalanced: bool,
}

impl AttentionMaps {
    pub fn new(values: Array4<f64>) -> Self {
        Self {
            values,
            rebalanced: false,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.values.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

/// Per-element distance used inside the consistency loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyDistance {
    Abs,
    #[default]
    Squared,
}

impl std::str::FromStr for ConsistencyDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(Self::Abs),
            "squared" => Ok(Self::Squared),
            other => Err(Error::config(format!("unknown consistency distance `{other}`"))),
        }
    }
}

fn dims4(a: &Array4<f64>) -> [usize; 4] {
    let s = a.shape();
    [s[0], s[1], s[2], s[3]]
}

/// `A(i,l,h,w) = Σ_c W(l,c) F(i,c,h,w)`. The fc bias takes no part.
pub fn compute_cam(features: &FeatureMap, weights: &ClassifierWeights) -> Result<AttentionMaps> {
    let [n, c, h, w] = dims4(features);
    let (l, wc) = weights.dim();
    if wc != c {
        return Err(Error::ShapeMismatch {
            context: "classifier columns vs feature channels",
            expected: vec![l, c],
            actual: vec![l, wc],
        });
    }
    let feats = features.as_standard_layout();
    let mut out = Array4::<f64>::zeros((n, l, h, w));
    let hw = h * w;
    for i in 0..n {
        let f_i = feats.index_axis(Axis(0), i);
        let f_i = f_i.to_shape((c, hw)).expect("contiguous sample");
        let mut out_i = out.index_axis_mut(Axis(0), i);
        let mut out_i = out_i
            .view_mut()
            .into_shape_with_order((l, hw))
            .expect("contiguous output");
        general_mat_mul(1.0, weights, &f_i, 0.0, &mut out_i);
    }
    Ok(AttentionMaps::new(out))
}

/// Gradients of a scalar loss through [`compute_cam`]: returns
/// `(dL/dF, dL/dW)` given `dL/dA`.
pub fn cam_backward(
    features: &FeatureMap,
    weights: &ClassifierWeights,
    grad_maps: &Array4<f64>,
) -> (FeatureMap, ClassifierWeights) {
    let [n, c, h, w] = dims4(features);
    let l = weights.nrows();
    let hw = h * w;
    let feats = features.as_standard_layout();
    let grads = grad_maps.as_standard_layout();
    let mut grad_f = Array4::<f64>::zeros((n, c, h, w));
    let mut grad_w = Array2::<f64>::zeros((l, c));
    for i in 0..n {
        let f_i = feats.index_axis(Axis(0), i);
        let f_i = f_i.to_shape((c, hw)).expect("contiguous sample");
        let g_i = grads.index_axis(Axis(0), i);
        let g_i = g_i.to_shape((l, hw)).expect("contiguous grad");
        general_mat_mul(1.0, &g_i, &f_i.t(), 1.0, &mut grad_w);
        let mut gf_i = grad_f.index_axis_mut(Axis(0), i);
        let mut gf_i = gf_i
            .view_mut()
            .into_shape_with_order((c, hw))
            .expect("contiguous grad");
        general_mat_mul(1.0, &weights.t(), &g_i, 0.0, &mut gf_i);
    }
    (grad_f, grad_w)
}

/// `M(i,l,h,w) = B_l A(i,l,h,w)` with the normalized balance weights.
pub fn rebalance_attention(maps: &AttentionMaps, weights: &BalanceWeights) -> Result<AttentionMaps> {
    if maps.rebalanced {
        return Err(Error::AlreadyRebalanced);
    }
    let [_, l, _, _] = maps.shape();
    if weights.num_classes() != l {
        return Err(Error::ShapeMismatch {
            context: "balance weights vs attention classes",
            expected: vec![l],
            actual: vec![weights.num_classes()],
        });
    }
    let mut values = maps.values.clone();
    scale_class_planes(&mut values, &weights.normalized);
    Ok(AttentionMaps {
        values,
        rebalanced: true,
    })
}

/// Multiplies each class plane `[.., l, .., ..]` by `scale[l]` in place. Also
/// serves as the backward pass of [`rebalance_attention`].
pub fn scale_class_planes(values: &mut Array4<f64>, scale: &[f64]) {
    for mut sample in values.outer_iter_mut() {
        for (mut plane, &b) in sample.outer_iter_mut().zip(scale) {
            plane.mapv_inplace(|v| v * b);
        }
    }
}

/// Horizontal reversal along the width axis.
pub fn flip_w(maps: &AttentionMaps) -> AttentionMaps {
    AttentionMaps {
        values: flip_width(&maps.values),
        rebalanced: maps.rebalanced,
    }
}

/// Reverses the last axis of any N×C×H×W array.
pub fn flip_width(values: &Array4<f64>) -> Array4<f64> {
    let mut out = values.to_owned();
    out.invert_axis(Axis(3));
    out.as_standard_layout().into_owned()
}

fn check_pair(m: &AttentionMaps, other: &AttentionMaps) -> Result<()> {
    if !m.rebalanced || !other.rebalanced {
        return Err(Error::NotRebalanced);
    }
    if m.shape() != other.shape() {
        return Err(Error::ShapeMismatch {
            context: "consistency loss operands",
            expected: m.shape().to_vec(),
            actual: other.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean per-element distance between `m` and the aligned transformed-view
/// maps (for the flip transform, `flip_w(m_tilde)`).
pub fn consistency_loss(
    m: &AttentionMaps,
    aligned: &AttentionMaps,
    distance: ConsistencyDistance,
) -> Result<f64> {
    check_pair(m, aligned)?;
    let count = m.values.len() as f64;
    let sum: f64 = m
        .values
        .iter()
        .zip(aligned.values.iter())
        .map(|(a, b)| match distance {
            ConsistencyDistance::Abs => (a - b).abs(),
            ConsistencyDistance::Squared => (a - b) * (a - b),
        })
        .sum();
    Ok(sum / count)
}

/// Gradient of [`consistency_loss`] with respect to `m`; the gradient with
/// respect to `aligned` is its negation. The absolute variant uses a zero
/// subgradient at equality.
pub fn consistency_loss_grad(
    m: &AttentionMaps,
    aligned: &AttentionMaps,
    distance: ConsistencyDistance,
) -> Result<Array4<f64>> {
    check_pair(m, aligned)?;
    let count = m.values.len() as f64;
    let mut grad = &m.values - &aligned.values;
    match distance {
        ConsistencyDistance::Abs => grad.mapv_inplace(|d| {
            if d > 0.0 {
                1.0 / count
            } else if d < 0.0 {
                -1.0 / count
            } else {
                0.0
            }
        }),
        ConsistencyDistance::Squared => grad.mapv_inplace(|d| 2.0 * d / count),
    }
    Ok(grad)
}

const RBAM_MAGIC: &[u8; 6] = b"RBAM1\0";

/// Attention maps as stored on disk: 32-bit floats, row-major (i,l,h,w).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub shape: [usize; 4],
    pub values: Vec<f32>,
}

impl AttentionDump {
    pub fn from_maps(maps: &AttentionMaps) -> Self {
        Self {
            shape: maps.shape(),
            values: maps.values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(RBAM_MAGIC)?;
        for d in self.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        read_exact(&mut input, &mut magic)?;
        if &magic != RBAM_MAGIC {
            return Err(Error::data("not an RBAM1 attention dump"));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            let mut b = [0u8; 4];
            read_exact(&mut input, &mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        read_exact(&mut input, &mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, values })
    }

    pub fn to_array(&self) -> Array4<f32> {
        Array4::from_shape_vec(self.shape, self.values.clone()).expect("shape matches length")
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::data(format!("truncated RBAM1 dump: {e}")))
}
