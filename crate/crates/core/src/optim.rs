//! Adam, gradient clipping, learning-rate schedules, batch sampling and
//! teacher pre-training.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{forward_graph, perplexity, Bound, Model};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP: f64 = 1.0;

/// Adam with per-parameter step counts; parameters without a gradient in a
/// step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    t: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            t: vec![0; sizes.len()],
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<Vec<f64>>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.t[idx] += 1;
            let t = self.t[idx] as f64;
            let bc1 = 1.0 - libm::pow(ADAM_BETA1, t);
            let bc2 = 1.0 - libm::pow(ADAM_BETA2, t);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / (libm::sqrt(v[i] / bc2) + ADAM_EPS);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().flatten().map(|g| g * g).sum());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay to 10% of the base rate.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
        if step < warmup {
            return base * (step + 1) as f64 / warmup as f64;
        }
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(warmup).max(1);
                let frac = ((step - warmup) as f64 / span as f64).min(1.0);
                base * (0.1 + 0.9 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac)))
            }
        }
    }
}

/// Draws `batch` random windows of `seq + 1` tokens; returns `(inputs, targets)` flattened.
pub fn sample_batch<R: Rng + ?Sized>(
    stream: &[usize],
    batch: usize,
    seq: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if stream.len() < seq + 1 {
        return Err(Error::InvalidArgument(alloc::format!(
            "stream of {} tokens is shorter than a window of {}",
            stream.len(),
            seq + 1
        )));
    }
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let start = rng.random_range(0..=stream.len() - seq - 1);
        inputs.extend_from_slice(&stream[start..start + seq]);
        targets.extend_from_slice(&stream[start + 1..start + seq + 1]);
    }
    Ok((inputs, targets))
}

impl Bound {
    /// Backbone handles followed by site weights in key order; matches
    /// [`Model::tensors_mut`].
    pub fn param_vars(&self) -> Vec<Var> {
        let b = &self.backbone;
        let mut out = vec![b.embedding];
        out.extend(&b.attn_norms);
        out.extend(&b.mlp_norms);
        out.push(b.final_norm);
        out.push(b.output);
        out.extend(self.sites.values().map(|s| s.weight));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Validation interval in steps; 0 disables intermediate evaluation.
    pub eval_every: usize,
    /// Number of validation tokens scored at each evaluation.
    pub eval_tokens: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            schedule: LrSchedule::Cosine,
            warmup_steps: 50,
            steps: 1000,
            batch_size: 8,
            seq_len: 128,
            seed: 0,
            eval_every: 100,
            eval_tokens: 16_384,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_ppl: Option<f64>,
    pub lr: f64,
}

/// Trains every parameter of `model` with next-token cross-entropy.
pub fn pretrain(
    model: &mut Model,
    train: &[usize],
    val: &[usize],
    cfg: &PretrainConfig,
    on_record: &mut dyn FnMut(&PretrainRecord),
) -> Result<Vec<PretrainRecord>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training stream".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.tensors_mut().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut records = Vec::new();
    let val = &val[..val.len().min(cfg.eval_tokens + 1)];
    for step in 0..cfg.steps {
        let lr = cfg.schedule.lr_at(cfg.lr, step, cfg.steps, cfg.warmup_steps);
        let (inputs, targets) = sample_batch(train, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let mut g = Graph::new();
        let bound = model.bind_with(&mut g, true);
        let trace = forward_graph(&mut g, &model.config, &bound, &inputs, cfg.batch_size, None)?;
        let loss = g.cross_entropy(trace.logits, &targets, None)?;
        let loss_value = g.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NanLoss { step, lr });
        }
        g.backward(loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = bound
            .param_vars()
            .into_iter()
            .map(|v| g.grad(v).map(<[f64]>::to_vec))
            .collect();
        drop(g);
        clip_grad_norm(&mut grads, GRAD_CLIP);
        let mut params: Vec<&mut [f64]> = model.tensors_mut().map(|t| t.data_mut()).collect();
        adam.step(&mut params, &grads, lr);

        let last = step + 1 == cfg.steps;
        let eval_now = last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0);
        if eval_now {
            let val_ppl = if val.len() >= 2 {
                Some(perplexity(model, val, cfg.seq_len, cfg.batch_size)?)
            } else {
                None
            };
            let rec = PretrainRecord { step: step + 1, train_loss: loss_value, val_ppl, lr };
            on_record(&rec);
            records.push(rec);
        }
    }
    Ok(records)
}
