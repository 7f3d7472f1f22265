//! AdamW + L1 training on `(single plane, merged plane)` pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::blocks::ForwardCtx;
use crate::error::{Error, Result};
use crate::metrics::{psnr, Peak};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub total_iters: usize,
    pub halve_every_epochs: usize,
    pub drop_path: f64,
    pub seed: u64,
    /// Validation cadence in iterations; 0 validates only at the start and end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch: 1,
            total_iters: 5000,
            halve_every_epochs: 20,
            drop_path: 0.1,
            seed: 42,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch != 1 {
            return Err(Error::Config(format!("only batch size 1 is supported, got {}", self.batch)));
        }
        if self.halve_every_epochs == 0 {
            return Err(Error::Config("halve_every_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path must lie in [0, 1), got {}", self.drop_path)));
        }
        Ok(())
    }

    /// `lr0 · 2^(−⌊epoch / halve_every_epochs⌋)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.halve_every_epochs) as i32)
    }
}

/// AdamW moments, aligned with the parameter order of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Dimension(format!(
            "l1 loss inputs have {} and {} values",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(&a, &b)| (a - b).abs() as f64).sum::<f64>() / pred.len() as f64)
}

/// One AdamW update with decoupled weight decay. Nothing is modified when any
/// gradient is non-finite.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Dimension(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (p, g) in store.iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::Dimension(format!("gradient shape mismatch for `{}`", p.name)));
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
                index,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = (1.0 - cfg.beta1.powi(t)) as f32;
    let bc2 = (1.0 - cfg.beta2.powi(t)) as f32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (c1, c2) = ((1.0 - cfg.beta1) as f32, (1.0 - cfg.beta2) as f32);
    let lr32 = lr as f32;
    let shrink = 1.0 - (lr * cfg.weight_decay) as f32;
    for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let decay = p.decay;
        for (((w, &gi), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            if decay {
                *w *= shrink;
            }
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr32 * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `[H, W, 1]` images in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanePair {
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<PlanePair>,
    pub val: Vec<PlanePair>,
}

impl Dataset {
    /// Holds out `round(val_fraction · n)` pairs (at least one when `n ≥ 2`)
    /// after a seeded shuffle.
    pub fn split(mut pairs: Vec<PlanePair>, val_fraction: f64, seed: u64) -> Self {
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = pairs.len();
        let mut k = (val_fraction * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        let val = pairs.split_off(n - k.min(n));
        Dataset { train: pairs, val }
    }
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    /// Mean training L1 since the previous row (`NaN` at iteration 0).
    pub train_l1: f64,
    pub val_l1: f64,
    pub val_psnr: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("iter,train_l1,val_l1,val_psnr\n");
    for p in curve {
        s.push_str(&format!("{},{},{},{}\n", p.iter, p.train_l1, p.val_l1, p.val_psnr));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub optimizer: OptimizerState,
}

/// Mean L1 (on `[0, 1]`) and mean PSNR (on `[0, 255]`) of the model over `pairs`.
pub fn evaluate(model: &Model, pairs: &[PlanePair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut l1, mut db) = (0.0, 0.0);
    for p in pairs {
        let out = model.enhance_plane(&p.input)?;
        l1 += l1_loss(out.data(), p.target.data())?;
        let a: Vec<f32> = out.data().iter().map(|v| v * 255.0).collect();
        let b: Vec<f32> = p.target.data().iter().map(|v| v * 255.0).collect();
        db += psnr(&a, &b, Peak::ImageMax)?;
    }
    let n = pairs.len() as f64;
    Ok((l1 / n, db / n))
}

/// Trains `model` in place. Iteration `i` belongs to epoch `⌊i / |train|⌋`;
/// each epoch visits the training pairs in a fresh seeded order.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ctx = ForwardCtx::training(cfg.seed.wrapping_add(1));
    ctx.drop_path = Some(cfg.drop_path);
    let mut state = OptimizerState::new(model.params());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut curve = Vec::new();

    let (val_l1, val_psnr) = evaluate(model, &data.val)?;
    log::info!("iter 0: val_l1 {val_l1:.5} val_psnr {val_psnr:.3}");
    curve.push(CurvePoint {
        iter: 0,
        train_l1: f64::NAN,
        val_l1,
        val_psnr,
    });
    let (mut run_sum, mut run_n) = (0.0, 0usize);
    for it in 0..cfg.total_iters {
        let epoch = it / order.len();
        let pos = it % order.len();
        if pos == 0 {
            order.shuffle(&mut order_rng);
        }
        let pair = &data.train[order[pos]];
        let lr = cfg.learning_rate(epoch);

        let mut g = Graph::<f32>::new();
        let p = model.params().bind(&mut g);
        let x = g.leaf(pair.input.clone());
        let t = g.leaf(pair.target.clone());
        let y = model.forward(&mut g, &p, x, &mut ctx)?;
        let loss = g.l1_loss(y, t)?;
        g.backward(loss)?;
        run_sum += g.value(loss).data()[0] as f64;
        run_n += 1;
        let grads: Vec<Tensor> = p
            .iter()
            .zip(model.params().iter())
            .map(|(&v, prm)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(prm.tensor.shape())))
            .collect();
        drop(g);
        adamw_step(model.params_mut(), &grads, &mut state, cfg, lr)?;

        let done = it + 1;
        if done == cfg.total_iters || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let (val_l1, val_psnr) = evaluate(model, &data.val)?;
            let train_l1 = run_sum / run_n as f64;
            log::info!("iter {done}: lr {lr:.2e} train_l1 {train_l1:.5} val_l1 {val_l1:.5} val_psnr {val_psnr:.3}");
            curve.push(CurvePoint {
                iter: done,
                train_l1,
                val_l1,
                val_psnr,
            });
            (run_sum, run_n) = (0.0, 0);
        }
    }
    Ok(TrainOutcome {
        curve,
        optimizer: state,
    })
}
