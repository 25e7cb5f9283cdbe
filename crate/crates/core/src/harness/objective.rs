//! The full training objective for one batch and its gradient.

use ndarray::{concatenate, Array2, Array4, Axis};

use super::config::TrainConfig;
use super::transform::{apply_transform, InverseMap, TransformParams};
use crate::attention::{
    cam_backward, consistency_loss, consistency_loss_grad, rebalance_attention, scale_class_planes, AttentionMaps,
};
use crate::balance::BalanceWeights;
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_grad, dual_view_ce, dual_view_smooth_ce, make_smooth_labels, smooth_ce_grad, total_loss,
    LossBreakdown,
};
use crate::model::{BatchStats, Mode, Model, ParamSet, ViewOutput, FC_BIAS, FC_WEIGHT};

pub struct ObjectiveOutput {
    pub loss: LossBreakdown,
    /// Present when gradients were requested.
    pub grads: Option<ParamSet>,
    pub stats: BatchStats,
}

/// Evaluates `cls + λ·cons` on `images` (already normalized) and their
/// transformed copies. `transformed` must be the normalized second view and
/// `inverse` its attention alignment map. Flags in `config` gate each term:
/// with RAC off the consistency term is never computed, with RSL off the
/// targets are one-hot.
pub fn objective(
    model: &Model,
    images: &Array4<f64>,
    transformed: &Array4<f64>,
    inverse: &InverseMap,
    labels: &[usize],
    config: &TrainConfig,
    weights: &BalanceWeights,
    want_grads: bool,
) -> Result<ObjectiveOutput> {
    let out = model.forward_pair(images, transformed, Mode::Train)?;
    let (v1, v2) = (&out.original, &out.transformed);
    let num_classes = model.config.num_classes;

    let (cls, g1, g2) = if config.enable_rsl {
        let targets = make_smooth_labels(labels, weights, config.alpha, num_classes)?;
        (
            dual_view_smooth_ce(&v1.logits, &v2.logits, &targets)?,
            smooth_ce_grad(&v1.logits, &targets)?,
            smooth_ce_grad(&v2.logits, &targets)?,
        )
    } else {
        (
            dual_view_ce(&v1.logits, &v2.logits, labels)?,
            cross_entropy_grad(&v1.logits, labels)?,
            cross_entropy_grad(&v2.logits, labels)?,
        )
    };

    let lambda = config.effective_lambda();
    let mut map_grads = None;
    let cons = if config.enable_rac {
        let m = rebalance_attention(&v1.maps, weights)?;
        let m_tilde = rebalance_attention(&v2.maps, weights)?;
        let aligned = AttentionMaps {
            values: inverse.apply(&m_tilde.values),
            rebalanced: true,
        };
        let cons = consistency_loss(&m, &aligned, config.consistency_distance)?;
        if want_grads {
            let mut dm = consistency_loss_grad(&m, &aligned, config.consistency_distance)?;
            dm.mapv_inplace(|g| g * lambda);
            let mut dm_tilde = inverse.adjoint(&dm.mapv(|g| -g));
            scale_class_planes(&mut dm, &weights.normalized);
            scale_class_planes(&mut dm_tilde, &weights.normalized);
            map_grads = Some((dm, dm_tilde));
        }
        cons
    } else {
        0.0
    };

    let loss = total_loss(cls, cons, lambda)?;
    if !loss.total.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss (cls {}, cons {})",
            loss.cls, loss.cons
        )));
    }
    let stats = out.stats.clone().expect("training pass records statistics");
    if !want_grads {
        return Ok(ObjectiveOutput {
            loss,
            grads: None,
            stats,
        });
    }

    let mut grads = model.params.zeros_like();
    let w = model.fc_weight();
    let (da1, da2) = match map_grads {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let df1 = view_backward(v1, &g1, da1.as_ref(), &w, &mut grads);
    let df2 = view_backward(v2, &g2, da2.as_ref(), &w, &mut grads);
    let joint = concatenate(Axis(0), &[df1.view(), df2.view()]).expect("matching feature shapes");
    let cache = out.cache.as_ref().expect("training pass keeps its cache");
    model.backbone_backward(cache, &joint, &mut grads);
    Ok(ObjectiveOutput {
        loss,
        grads: Some(grads),
        stats,
    })
}

/// Head and attention gradients for one view; returns `dL/dF` and
/// accumulates the fc gradients.
fn view_backward(
    view: &ViewOutput,
    grad_logits: &Array2<f64>,
    grad_maps: Option<&Array4<f64>>,
    w: &Array2<f64>,
    grads: &mut ParamSet,
) -> Array4<f64> {
    let (n, c, h, wd) = view.features.dim();
    let (mut df, mut dw) = match grad_maps {
        Some(da) => cam_backward(&view.features, w, da),
        None => (Array4::zeros((n, c, h, wd)), Array2::zeros(w.dim())),
    };
    dw += &grad_logits.t().dot(&view.pooled);
    let dpooled = grad_logits.dot(w) / (h * wd) as f64;
    for (mut sample, row) in df.outer_iter_mut().zip(dpooled.outer_iter()) {
        for (mut plane, &g) in sample.outer_iter_mut().zip(row.iter()) {
            plane += g;
        }
    }
    let gw = grads.get_mut(FC_WEIGHT).expect("fc weight");
    gw.data.iter_mut().zip(dw.iter()).for_each(|(a, b)| *a += b);
    let gb = grads.get_mut(FC_BIAS).expect("fc bias");
    for row in grad_logits.outer_iter() {
        gb.data.iter_mut().zip(row.iter()).for_each(|(a, b)| *a += b);
    }
    df
}

/// Convenience wrapper: transforms `images` itself. Only valid for
/// transforms that commute with input normalization (flip, scaling).
pub fn objective_with_transform(
    model: &Model,
    images: &Array4<f64>,
    params: &TransformParams,
    labels: &[usize],
    config: &TrainConfig,
    weights: &BalanceWeights,
    want_grads: bool,
) -> Result<ObjectiveOutput> {
    let (transformed, inverse) = apply_transform(images, params)?;
    objective(model, images, &transformed, &inverse, labels, config, weights, want_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{compute_balance_weights, ClassCounts};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            input_size: 8,
            channels: vec![3, 4],
            num_classes: 3,
            ..Default::default()
        };
        Model::init(cfg, seed).unwrap()
    }

    fn images(seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((2, 1, 8, 8), || rng.gen_range(-1.0..1.0))
    }

    fn weights() -> BalanceWeights {
        compute_balance_weights(&ClassCounts::from_counts(vec![50, 10, 2]).unwrap(), 0.9999).unwrap()
    }

    #[test]
    fn zero_weights_reduce_to_dual_ce() {
        let model = small_model(1);
        let x = images(2);
        let cfg = TrainConfig {
            lambda: 0.0,
            alpha: 0.0,
            ..Default::default()
        };
        let both = objective_with_transform(&model, &x, &TransformParams::Flip, &[0, 2], &cfg, &weights(), true).unwrap();
        let plain = TrainConfig {
            enable_rac: false,
            enable_rsl: false,
            ..cfg.clone()
        };
        let base = objective_with_transform(&model, &x, &TransformParams::Flip, &[0, 2], &plain, &weights(), true).unwrap();
        assert!((both.loss.total - base.loss.total).abs() < 1e-12);
        assert_eq!(base.loss.cons, 0.0);
        for (a, b) in both.grads.unwrap().entries.iter().zip(&base.grads.unwrap().entries) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut model = small_model(3);
        let x = images(4);
        let labels = [1, 2];
        let cfg = TrainConfig::default();
        let w = weights();
        let eval = |m: &Model| {
            objective_with_transform(m, &x, &TransformParams::Flip, &labels, &cfg, &w, false)
                .unwrap()
                .loss
                .total
        };
        let grads = objective_with_transform(&model, &x, &TransformParams::Flip, &labels, &cfg, &w, true)
            .unwrap()
            .grads
            .unwrap();
        let h = 1e-6;
        for (pi, p) in grads.entries.iter().enumerate() {
            for k in (0..p.data.len()).step_by(3) {
                let orig = model.params.entries[pi].data[k];
                model.params.entries[pi].data[k] = orig + h;
                let up = eval(&model);
                model.params.entries[pi].data[k] = orig - h;
                let down = eval(&model);
                model.params.entries[pi].data[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = p.data[k];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "{}[{k}]: analytic {analytic} numeric {numeric}", p.name);
            }
        }
    }

    #[test]
    fn scaling_gradient_matches_finite_differences() {
        let mut model = small_model(5);
        let x = images(6);
        let labels = [0, 1];
        let cfg = TrainConfig {
            transform: super::super::config::TransformKind::Scaling,
            ..Default::default()
        };
        let params = TransformParams::Scale(vec![0.8, 1.2]);
        let w = weights();
        let grads = objective_with_transform(&model, &x, &params, &labels, &cfg, &w, true)
            .unwrap()
            .grads
            .unwrap();
        let p = grads.get(FC_WEIGHT).unwrap().clone();
        let slot = model.params.entries.iter().position(|e| e.name == FC_WEIGHT).unwrap();
        let h = 1e-6;
        for k in 0..p.data.len() {
            let orig = model.params.entries[slot].data[k];
            let mut f = |v| {
                model.params.entries[slot].data[k] = v;
                objective_with_transform(&model, &x, &params, &labels, &cfg, &w, false)
                    .unwrap()
                    .loss
                    .total
            };
            let numeric = (f(orig + h) - f(orig - h)) / (2.0 * h);
            model.params.entries[slot].data[k] = orig;
            assert!((numeric - p.data[k]).abs() < 1e-6 * numeric.abs().max(1.0));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = small_model(7);
        model.params.get_mut(FC_BIAS).unwrap().data[0] = f64::NAN;
        let r = objective_with_transform(
            &model,
            &images(8),
            &TransformParams::Flip,
            &[0, 1],
            &TrainConfig::default(),
            &weights(),
            false,
        );
        assert!(matches!(r, Err(Error::Divergence(_))));
    }
}
