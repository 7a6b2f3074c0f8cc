//! Training loop: AdamW with decoupled weight decay and a linear
//! warm-up followed by cosine decay to zero.

use crate::depthmap::DepthMap;
use crate::error::{Error, Result};
use crate::model::{forward_loss, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Fraction of iterations spent in linear warm-up, in [0, 1).
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 1,
            base_lr: 3e-4,
            weight_decay: 0.01,
            warmup_frac: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid(format!(
                "warm-up fraction {} must lie in [0, 1)",
                self.warmup_frac
            )));
        }
        Ok(())
    }
}

/// Learning rate at iteration `t` of `total`: linear ramp from zero
/// over the warm-up span, then half-cosine decay to zero. Continuous
/// at the joint, never negative.
pub fn lr_at(t: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = t as f64;
    let t_warm = warmup_frac * total as f64;
    if t < t_warm {
        base * t / t_warm
    } else {
        let span = total as f64 - t_warm;
        let p = ((t - t_warm) / span).min(1.0);
        base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// AdamW over a ParamSet, moments kept in set order. Weight decay is
/// decoupled: it scales the parameter directly instead of entering the
/// moment estimates.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|(_, t)| Tensor::zeros_like(t)).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros_like(t)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != p.numel() {
                return Err(Error::invalid("gradient/parameter size mismatch"));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossPoint {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct Progress<'a> {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub params: &'a ParamSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub curve: Vec<LossPoint>,
    /// Iteration whose loss came back non-finite, if training aborted.
    /// `params` then holds the state from before that step.
    pub diverged: Option<usize>,
    pub stopped_early: bool,
}

/// Mean loss and mean per-parameter gradients over a batch of scenes.
fn batch_gradients(
    model: &ModelConfig,
    params: &ParamSet,
    batch: &[&(Tensor, DepthMap)],
) -> Result<(f64, Vec<Tensor>)> {
    let mut total_loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (image, gt) in batch {
        let lg = forward_loss(model, params, image, gt)?;
        total_loss += lg.graph.value(lg.loss).item();
        let grads = lg.graph.backward(lg.loss, Tensor::scalar(1.0))?;
        let per_param = lg.bound.gradients(&lg.graph, &grads);
        match &mut acc {
            None => acc = Some(per_param),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&per_param) {
                    a.add_assign(g);
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let mut acc = acc.expect("batch is non-empty");
    for g in &mut acc {
        g.scale_in_place(inv);
    }
    Ok((total_loss * inv, acc))
}

/// Optimize `model` on `scenes`. The callback runs after every step
/// and may stop training early; pass `|_| Control::Continue` when no
/// monitoring is wanted. Fully deterministic in the configs.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    scenes: &[(Tensor, DepthMap)],
    mut on_iter: impl FnMut(&Progress) -> Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    let mut params = model.init_params(cfg.seed);
    let mut last_good = params.clone();
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7aa1_5eed);
    let mut curve = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let lr = lr_at(iter, cfg.iterations, cfg.base_lr, cfg.warmup_frac);
        let batch: Vec<&(Tensor, DepthMap)> = (0..cfg.batch_size)
            .map(|_| &scenes[rng.gen_range(0..scenes.len())])
            .collect();
        let (loss, grads) = batch_gradients(model, &params, &batch)?;
        if !loss.is_finite() {
            // roll back to the state that produced the last finite loss
            return Ok(TrainOutcome {
                params: last_good,
                curve,
                diverged: Some(iter),
                stopped_early: false,
            });
        }
        last_good = params.clone();
        opt.step(&mut params, &grads, lr)?;
        curve.push(LossPoint { iter, lr, loss });
        let progress = Progress {
            iter,
            lr,
            loss,
            params: &params,
        };
        if on_iter(&progress) == Control::Stop {
            return Ok(TrainOutcome {
                params,
                curve,
                diverged: None,
                stopped_early: true,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        curve,
        diverged: None,
        stopped_early: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, SceneSpec};

    fn tiny_model() -> ModelConfig {
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

    fn tiny_scene(seed: u64) -> (Tensor, DepthMap) {
        gen_scene(&SceneSpec {
            seed,
            h: 16,
            w: 16,
            d_min: 0.5,
            d_max: 4.0,
            n_rects: 2,
            background: (2.0, 1.0, -0.5),
        })
        .unwrap()
    }

    #[test]
    fn schedule_endpoints_and_shape() {
        let base = 0.1;
        assert_eq!(lr_at(0, 100, base, 0.3), 0.0);
        assert!((lr_at(30, 100, base, 0.3) - base).abs() < 1e-15);
        assert!((lr_at(100, 100, base, 0.3)).abs() < 1e-15);
        // continuity at the joint
        let before = lr_at(29, 100, base, 0.3);
        let after = lr_at(31, 100, base, 0.3);
        assert!((before - base).abs() < 0.05 && (base - after).abs() < 0.05);
        // monotone up then down, never negative
        for t in 0..100 {
            let a = lr_at(t, 100, base, 0.3);
            let b = lr_at(t + 1, 100, base, 0.3);
            assert!(a >= 0.0 && b >= 0.0);
            if t < 29 {
                assert!(b > a);
            }
            if t >= 30 {
                assert!(b <= a);
            }
        }
        // no warm-up: starts at base
        assert_eq!(lr_at(0, 100, base, 0.0), base);
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.1);
        let g = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        opt.step(&mut ps, &[g.clone()], 0.01).unwrap();
        // After one step m̂ = g, v̂ = g², so the Adam term is sign(g)
        // (up to eps) and decay shrinks the parameter by lr·wd·p.
        let want0 = 1.0 - 0.01 * (0.5 / (0.5 + 1e-8) + 0.1 * 1.0);
        let want1 = -2.0 - 0.01 * (-1.0 / (1.0 + 1e-8) + 0.1 * -2.0);
        let got = ps.get("p").unwrap().data();
        assert!((got[0] - want0).abs() < 1e-12, "{got:?}");
        assert!((got[1] - want1).abs() < 1e-12, "{got:?}");

        // second step with the same gradient
        opt.step(&mut ps, &[g], 0.01).unwrap();
        assert_eq!(opt.t, 2);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: pure Adam leaves the parameter alone, decay
        // still shrinks it multiplicatively.
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::new(vec![1], vec![4.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.5);
        opt.step(&mut ps, &[Tensor::zeros(&[1])], 0.1).unwrap();
        let got = ps.get("p").unwrap().data()[0];
        assert!((got - 4.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let model = tiny_model();
        let cfg = TrainConfig {
            iterations: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let scenes = vec![tiny_scene(1)];
        let out = train(&model, &cfg, &scenes, |_| Control::Continue).unwrap();
        assert!(out.curve.is_empty());
        assert!(out.diverged.is_none());
        let init = model.init_params(5);
        for (name, t) in init.iter() {
            assert_eq!(out.params.get(name).unwrap().data(), t.data());
        }
    }

    #[test]
    fn short_run_is_deterministic_and_recorded() {
        let model = tiny_model();
        let cfg = TrainConfig {
            iterations: 3,
            base_lr: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let scenes = vec![tiny_scene(1), tiny_scene(2)];
        let a = train(&model, &cfg, &scenes, |_| Control::Continue).unwrap();
        let b = train(&model, &cfg, &scenes, |_| Control::Continue).unwrap();
        assert_eq!(a.curve.len(), 3);
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.lr, y.lr);
        }
        for (name, t) in a.params.iter() {
            assert_eq!(b.params.get(name).unwrap().data(), t.data());
        }
        assert!(a.curve.iter().all(|p| p.loss.is_finite()));
    }

    #[test]
    fn divergence_keeps_last_good_params() {
        let model = tiny_model();
        // an absurd lr makes the decoupled decay alternate sign with a
        // huge growth factor, overflowing the parameters to non-finite
        let cfg = TrainConfig {
            iterations: 120,
            base_lr: 1e12,
            warmup_frac: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let scenes = vec![tiny_scene(7)];
        let out = train(&model, &cfg, &scenes, |_| Control::Continue).unwrap();
        let at = out.diverged.expect("expected divergence");
        assert_eq!(out.curve.len(), at);
        assert!(out
            .params
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn early_stop_honored() {
        let model = tiny_model();
        let cfg = TrainConfig {
            iterations: 100,
            base_lr: 1e-4,
            seed: 2,
            ..TrainConfig::default()
        };
        let scenes = vec![tiny_scene(4)];
        let out = train(&model, &cfg, &scenes, |p| {
            if p.iter >= 1 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.curve.len(), 2);
    }
}
