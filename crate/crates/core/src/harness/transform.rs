//! Second-view transforms and the maps that align transformed-view
//! attention back onto the original view.

use ndarray::{Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::config::TransformKind;
use crate::attention::flip_width;
use crate::error::{Error, Result};

/// Per-sample transform parameters for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum TransformParams {
    Flip,
    /// Zoom factor about the image centre, one per sample.
    Scale(Vec<f64>),
    /// Pixel gain, one per sample.
    Gain(Vec<f64>),
}

impl TransformParams {
    pub fn kind(&self) -> TransformKind {
        match self {
            Self::Flip => TransformKind::Flip,
            Self::Scale(_) => TransformKind::Scaling,
            Self::Gain(_) => TransformKind::Intensity,
        }
    }

    /// Draws parameters uniformly from the configured ranges. Always
    /// consumes `n` draws so the stream position is independent of `kind`.
    pub fn sample<R: Rng>(
        kind: TransformKind,
        n: usize,
        scale_range: [f64; 2],
        gain_range: [f64; 2],
        rng: &mut R,
    ) -> Self {
        let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let lerp = |[a, b]: [f64; 2]| u.iter().map(|t| a + (b - a) * t).collect();
        match kind {
            TransformKind::Flip => Self::Flip,
            TransformKind::Scaling => Self::Scale(lerp(scale_range)),
            TransformKind::Intensity => Self::Gain(lerp(gain_range)),
        }
    }
}

/// Maps transformed-view attention onto the original view's frame.
#[derive(Clone, Debug, PartialEq)]
pub enum InverseMap {
    Identity,
    Flip,
    /// Undo a per-sample zoom by resampling with factor `s`.
    Rescale(Vec<f64>),
}

/// Bilinear taps `(index, weight)` sampling a `h×w` plane at the point that
/// a zoom by `s` about the centre sends to each output pixel, i.e.
/// `src = c + (dst - c) * s`, with edge clamping.
fn zoom_taps(h: usize, w: usize, s: f64) -> Vec<[(usize, f64); 4]> {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let axis = |p: usize, c: f64, len: usize| -> (usize, usize, f64) {
        let q = (c + (p as f64 - c) * s).clamp(0.0, (len - 1) as f64);
        let lo = q.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, q - lo as f64)
    };
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = axis(y, cy, h);
        for x in 0..w {
            let (x0, x1, fx) = axis(x, cx, w);
            taps.push([
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ]);
        }
    }
    taps
}

/// Resamples every plane of sample `i` with its own factor. With
/// `adjoint`, scatters instead of gathers (the transpose operator).
fn resample(values: &Array4<f64>, factors: &[f64], adjoint: bool) -> Array4<f64> {
    let (n, c, h, w) = values.dim();
    let src = values.as_standard_layout();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        let taps = zoom_taps(h, w, factors[i]);
        let s_i = src.index_axis(Axis(0), i);
        let s_i: ArrayView2<f64> = s_i.into_shape_with_order((c, h * w)).expect("standard layout");
        let mut o_i = out.index_axis_mut(Axis(0), i);
        let mut o_i: ArrayViewMut2<f64> = o_i
            .view_mut()
            .into_shape_with_order((c, h * w))
            .expect("standard layout");
        for ch in 0..c {
            let plane = s_i.row(ch);
            let mut dst = o_i.row_mut(ch);
            for (p, tap) in taps.iter().enumerate() {
                for &(q, wt) in tap {
                    if wt == 0.0 {
                        continue;
                    }
                    if adjoint {
                        dst[q] += wt * plane[p];
                    } else {
                        dst[p] += wt * plane[q];
                    }
                }
            }
        }
    }
    out
}

impl InverseMap {
    pub fn apply(&self, values: &Array4<f64>) -> Array4<f64> {
        match self {
            Self::Identity => values.clone(),
            Self::Flip => flip_width(values),
            Self::Rescale(f) => resample(values, f, false),
        }
    }

    /// Transpose of [`InverseMap::apply`], used to route gradients.
    pub fn adjoint(&self, values: &Array4<f64>) -> Array4<f64> {
        match self {
            Self::Identity => values.clone(),
            Self::Flip => flip_width(values),
            Self::Rescale(f) => resample(values, f, true),
        }
    }
}

/// Transforms a batch of raw images and returns the inverse map for the
/// attention maps.
pub fn apply_transform(images: &Array4<f64>, params: &TransformParams) -> Result<(Array4<f64>, InverseMap)> {
    let (n, _, h, w) = images.dim();
    match params {
        TransformParams::Flip => Ok((flip_width(images), InverseMap::Flip)),
        TransformParams::Scale(factors) => {
            check_len(factors, n)?;
            for &s in factors {
                if !(s.is_finite() && s > 0.0) || (s * h as f64) < 2.0 || (s * w as f64) < 2.0 {
                    return Err(Error::config(format!(
                        "scale {s} leaves less than 2×2 pixels of a {h}×{w} image"
                    )));
                }
            }
            // Output pixel p shows input point c + (p - c) / s.
            let inverse: Vec<f64> = factors.iter().map(|s| 1.0 / s).collect();
            Ok((resample(images, &inverse, false), InverseMap::Rescale(factors.clone())))
        }
        TransformParams::Gain(gains) => {
            check_len(gains, n)?;
            let mut out = images.as_standard_layout().into_owned();
            for (mut sample, &g) in out.outer_iter_mut().zip(gains) {
                sample.mapv_inplace(|v| v * g);
            }
            Ok((out, InverseMap::Identity))
        }
    }
}

fn check_len(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::ShapeMismatch {
            context: "transform parameters vs batch",
            expected: vec![n],
            actual: vec![v.len()],
        });
    }
    Ok(())
}
