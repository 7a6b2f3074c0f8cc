//! Component ablation: train and evaluate every combination of the
//! convolution branch and the interaction module under one shared
//! budget, yielding labeled report rows.

use crate::depthmap::DepthMap;
use crate::error::Result;
use crate::metrics::{aggregate, evaluate, Crop, Metrics};
use crate::model::{predict, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{train, Control, Progress, TrainConfig};

/// Mean per-image metrics of a trained model over a scene list.
pub fn evaluate_scenes(
    cfg: &ModelConfig,
    params: &ParamSet,
    scenes: &[(Tensor, DepthMap)],
    crop: Crop,
    align: bool,
) -> Result<Metrics> {
    let mut per_image = Vec::with_capacity(scenes.len());
    for (image, gt) in scenes {
        let depth = predict(cfg, params, image)?;
        let pred = DepthMap::from_tensor(&depth)?;
        per_image.push(evaluate(&pred, gt, crop, align)?);
    }
    aggregate(&per_image)
}

/// The four variants in report order.
pub fn variants(base: &ModelConfig) -> Vec<ModelConfig> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(cb, hahi)| {
            let mut cfg = base.clone();
            cfg.use_conv_branch = cb;
            cfg.use_hahi = hahi;
            cfg
        })
        .collect()
}

/// Train every variant from the same recipe and score it on held-out
/// scenes. `on_iter` sees the variant label with each step and may
/// stop that variant's training early.
pub fn run_ablation(
    base: &ModelConfig,
    tc: &TrainConfig,
    train_scenes: &[(Tensor, DepthMap)],
    eval_scenes: &[(Tensor, DepthMap)],
    crop: Crop,
    align: bool,
    mut on_iter: impl FnMut(&str, &Progress) -> Control,
) -> Result<Vec<(String, Metrics)>> {
    let mut rows = Vec::with_capacity(4);
    for cfg in variants(base) {
        let label = cfg.variant_name();
        let outcome = train(&cfg, tc, train_scenes, |p| on_iter(label, p))?;
        let metrics = evaluate_scenes(&cfg, &outcome.params, eval_scenes, crop, align)?;
        rows.push((label.to_string(), metrics));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, scene_set};

    fn tiny_base() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default();
        cfg.swin.embed_dim = 8;
        cfg.swin.depths = vec![1, 1];
        cfg.swin.window = 2;
        cfg.swin.heads = vec![2, 4];
        cfg.swin.num_levels = 2;
        cfg.conv.channels = 8;
        cfg.attn.heads = 2;
        cfg.attn.points = 2;
        cfg
    }

    #[test]
    fn four_labeled_rows() {
        let base = tiny_base();
        let tc = TrainConfig {
            iterations: 1,
            base_lr: 1e-4,
            seed: 1,
            ..TrainConfig::default()
        };
        let specs = scene_set(2, 5, 16, 16, 0.5, 4.0, 2);
        let scenes: Vec<_> = specs.iter().map(|s| gen_scene(s).unwrap()).collect();
        let rows =
            run_ablation(&base, &tc, &scenes, &scenes, Crop::None, true, |_, _| {
                Control::Continue
            })
            .unwrap();
        let labels: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["baseline", "+CB", "+HAHI", "+CB+HAHI"]);
        for (_, m) in &rows {
            assert!(m.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn variant_toggles_are_exhaustive() {
        let vs = variants(&tiny_base());
        assert_eq!(vs.len(), 4);
        assert!(!vs[0].use_conv_branch && !vs[0].use_hahi);
        assert!(vs[3].use_conv_branch && vs[3].use_hahi);
    }
}
