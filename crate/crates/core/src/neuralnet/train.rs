use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::tensor::Tensor;
use crate::error::{PallorError, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub loss: Loss,
    /// Heavy-ball momentum; 0 gives plain SGD.
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 100, batch_size: 16, loss: Loss::Mse, momentum: 0.0, seed: 0 }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(PallorError::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PallorError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PallorError::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Averaged MSE loss and gradient over a batch. Per-sample gradients may be
/// computed in parallel; they are summed in sample order.
pub fn batch_gradients(net: &Network, batch: &[(&Tensor, &Tensor)], exec: Exec) -> Result<(f64, Gradients)> {
    let per_sample = exec.map(batch, |(x, y)| net.backward(x, y));
    let mut total = Gradients::zeros(net.spec());
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    let k = 1.0 / batch.len().max(1) as f64;
    total.scale(k);
    Ok((loss * k, total))
}

/// SGD with optional heavy-ball momentum.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: None }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        if self.momentum == 0.0 {
            net.sgd_step(grads, self.lr);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros(net.spec()));
        v.scale(self.momentum);
        v.add_assign(grads);
        net.sgd_step(v, self.lr);
    }
}

/// Trains `net` in place on `(input, target)` pairs, reshuffling each epoch
/// with a generator seeded by `config.seed`. `on_epoch(epoch, mean_loss, net)`
/// runs after every epoch. Returns the per-epoch mean training loss.
pub fn train(
    net: &mut Network,
    data: &[(Tensor, Tensor)],
    config: &TrainingConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(usize, f64, &Network),
) -> Result<Vec<f64>> {
    config.validate()?;
    if data.is_empty() {
        return Err(PallorError::Dataset("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = Sgd::new(config.learning_rate, config.momentum);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Tensor, &Tensor)> = chunk.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            let (loss, grads) = batch_gradients(net, &batch, exec)?;
            if !loss.is_finite() {
                return Err(PallorError::InvalidConfig(format!("training diverged at epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            opt.step(net, &grads);
        }
        let mean = epoch_loss / data.len() as f64;
        curve.push(mean);
        on_epoch(epoch, mean, net);
    }
    Ok(curve)
}

/// Max relative error between backprop gradients and central differences
/// with step `step`, over every parameter.
pub fn gradient_check(net: &Network, input: &Tensor, target: &Tensor, step: f64) -> Result<f64> {
    if !(step.is_finite() && step > 0.0) {
        return Err(PallorError::InvalidConfig(format!("gradient-check step {step}")));
    }
    let (_, analytic) = net.backward(input, target)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (li, layer) in analytic.layers.iter().enumerate() {
        for (which, grads) in [(0, &layer.weights), (1, &layer.bias)] {
            for (pi, &a) in grads.iter().enumerate() {
                *param_mut(&mut probe, li, which, pi) = original_plus(net, li, which, pi, step);
                let plus = probe.loss(input, target)?;
                *param_mut(&mut probe, li, which, pi) = original_plus(net, li, which, pi, -step);
                let minus = probe.loss(input, target)?;
                *param_mut(&mut probe, li, which, pi) = original_plus(net, li, which, pi, 0.0);
                let numeric = (plus - minus) / (2.0 * step);
                let denom = a.abs().max(numeric.abs()).max(1e-12);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

fn param_mut(net: &mut Network, layer: usize, which: usize, idx: usize) -> &mut f64 {
    let p = &mut net.params_mut()[layer];
    if which == 0 {
        &mut p.weights[idx]
    } else {
        &mut p.bias[idx]
    }
}

fn original_plus(net: &Network, layer: usize, which: usize, idx: usize, delta: f64) -> f64 {
    let p = &net.params()[layer];
    let v = if which == 0 { p.weights[idx] } else { p.bias[idx] };
    v + delta
}
