//! Mean-squared-error training of the unfolded network with Adam.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{HighResGrid, Measurement};
use crate::net::Network;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moments must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("eps and clip norm must be > 0".into());
        }
        Ok(())
    }
}

/// Sum of `values` in ascending order, so the result does not depend on
/// the order they were produced in.
pub fn canonical_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Mean of `(pred − gt)²` over every sample and pixel.
pub fn mse_loss(pred: &[HighResGrid], gt: &[HighResGrid]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let mut per = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        p.check_same_dims(g, "prediction vs target")?;
        let s: f64 = p
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        per.push(s / p.len() as f64);
    }
    Ok(canonical_sum(&per) / per.len() as f64)
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// A measurement with its ground-truth sub-pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub y: Measurement,
    pub truth: HighResGrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    /// Optimizer steps taken by the end of the epoch.
    pub step: u64,
    /// Mean per-sample loss seen during the epoch.
    pub loss: f64,
}

/// Order in which an epoch visits the training set.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::derive(seed, "shuffle"), epoch as u64);
    order.shuffle(&mut r);
    order
}

/// Trains `net` in place. `on_epoch` runs after every epoch, e.g. to write
/// checkpoints.
pub fn train<F>(
    net: &mut Network,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<LossRow>>
where
    F: FnMut(&LossRow, &Network) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut state = AdamState::new(net.params().tensors());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut losses = Vec::with_capacity(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| net.loss_and_grad(&data[i].y, &data[i].truth))
                .collect::<Result<Vec<_>>>()?;
            let mut total: Vec<Tensor> = net
                .params()
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: state.t as usize + 1,
                    });
                }
                losses.push(*loss);
                for (acc, g) in total.iter_mut().zip(grads) {
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut total {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            clip_grad_norm(&mut total, cfg.clip_norm);
            let params = net.params_mut();
            adam_step(params.tensors_mut(), &total, &mut state, cfg);
            params.round_to_f32();
        }
        let row = LossRow {
            epoch,
            step: state.t,
            loss: canonical_sum(&losses) / losses.len() as f64,
        };
        on_epoch(&row, net)?;
        log.push(row);
    }
    Ok(log)
}

/// `epoch,step,loss` CSV.
pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut s = String::from("epoch,step,loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
