//! Progressive module replacement: delta training against a frozen teacher.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delta::{init_delta, BindOptions, CompressedModel, DeltaModule, InitMethod, InitOptions, SharingPlan, StoredWeight};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{forward_batch, forward_graph, perplexity, Bound, LanguageModel, Model, ModelConfig, WeightSite};
use crate::optim::{clip_grad_norm, sample_batch, Adam, LrSchedule, GRAD_CLIP};
use crate::tensor::Tensor;

/// Probability ramp for swapping teacher sublayers for their delta versions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplacementScheduler {
    pub p0: f64,
    pub converge_step: usize,
    /// Depth bias `γ`; 0 gives every site the same rate.
    pub depth_bias: f64,
    /// Epochs trained once every site has reached rate 1; `None` runs all epochs.
    pub extra_epochs: Option<usize>,
}

impl Default for ReplacementScheduler {
    fn default() -> Self {
        Self { p0: 0.5, converge_step: 200, depth_bias: 0.0, extra_epochs: None }
    }
}

impl ReplacementScheduler {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p0) {
            return Err(Error::InvalidConfig(format!("p0 = {} is outside [0, 1]", self.p0)));
        }
        if self.converge_step == 0 {
            return Err(Error::InvalidConfig("converge_step must be at least 1".into()));
        }
        if !(self.depth_bias >= 0.0) {
            return Err(Error::InvalidConfig(format!("depth bias {} is negative", self.depth_bias)));
        }
        Ok(())
    }

    pub fn base(&self, step: usize) -> f64 {
        let ramp = self.p0 + (1.0 - self.p0) * step as f64 / self.converge_step as f64;
        ramp.min(1.0)
    }

    /// `true` once every site is replaced with certainty.
    pub fn converged(&self, step: usize) -> bool {
        self.base(step) >= 1.0
    }
}

/// `min(1, base(step)·(1 + γ·rank/max(1, n−1)))`, clipped to `[0, 1]`.
pub fn replacement_probability(sched: &ReplacementScheduler, step: usize, depth_rank: usize, n_sites: usize) -> f64 {
    let denom = n_sites.saturating_sub(1).max(1) as f64;
    let p = sched.base(step) * (1.0 + sched.depth_bias * depth_rank as f64 / denom);
    p.clamp(0.0, 1.0)
}

/// Depth rank of every plan target (plan order) by distinct target block, and
/// the number of distinct ranks.
pub fn depth_ranks(plan: &SharingPlan) -> (Vec<usize>, usize) {
    let blocks = plan.target_blocks();
    let ranks = plan
        .entries
        .iter()
        .map(|e| blocks.binary_search(&e.target.block).expect("target block listed"))
        .collect();
    (ranks, blocks.len())
}

/// Independent Bernoulli draw per site; `true` selects the student path.
pub fn sample_replacement_mask<R: Rng + ?Sized>(
    sched: &ReplacementScheduler,
    step: usize,
    ranks: &[usize],
    n_ranks: usize,
    rng: &mut R,
) -> Vec<bool> {
    ranks
        .iter()
        .map(|&r| {
            let p = replacement_probability(sched, step, r, n_ranks);
            rng.random::<f64>() < p
        })
        .collect()
}

/// Logits `[B, T, V]` with the student path at sites whose mask entry is true and
/// the teacher's weights elsewhere.
pub fn hybrid_forward(
    teacher: &Model,
    student: &CompressedModel,
    mask: &[bool],
    tokens: &[usize],
    batch: usize,
) -> Result<Tensor> {
    let view = Hybrid { teacher, student, mask };
    forward_batch(&view, tokens, batch)
}

struct Hybrid<'a> {
    teacher: &'a Model,
    student: &'a CompressedModel,
    mask: &'a [bool],
}

impl LanguageModel for Hybrid<'_> {
    fn config(&self) -> &ModelConfig {
        &self.student.config
    }

    fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let opts = BindOptions { fallback: Some((self.teacher, self.mask)), ..Default::default() };
        Ok(self.student.bind_with(g, &opts)?.0)
    }
}

/// A compressed model evaluated with unmerged adapters.
pub struct WithAdapters<'a> {
    pub model: &'a CompressedModel,
    pub adapters: &'a BTreeMap<WeightSite, DeltaModule>,
}

impl LanguageModel for WithAdapters<'_> {
    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let opts = BindOptions { adapters: Some(self.adapters), ..Default::default() };
        Ok(self.model.bind_with(g, &opts)?.0)
    }
}

/// `(1−α)·CE + α·KL(teacher ‖ student)` recorded in `g`.
pub fn distill_loss_graph(g: &mut Graph, student_logits: Var, teacher_logits: &Tensor, targets: &[usize], alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} is outside [0, 1]")));
    }
    let ce = (alpha < 1.0).then(|| g.cross_entropy(student_logits, targets, None)).transpose()?;
    let kl = (alpha > 0.0).then(|| g.kl_divergence(teacher_logits, student_logits, None)).transpose()?;
    match (ce, kl) {
        (Some(ce), None) => Ok(ce),
        (None, Some(kl)) => Ok(kl),
        (Some(ce), Some(kl)) => {
            let ce = g.scale(ce, 1.0 - alpha);
            let kl = g.scale(kl, alpha);
            g.add(ce, kl)
        }
        (None, None) => unreachable!("alpha lies in [0, 1]"),
    }
}

/// Value of the distillation loss for fixed logits (`[..., V]` each).
pub fn distill_loss(student_logits: &Tensor, teacher_logits: &Tensor, targets: &[usize], alpha: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let loss = distill_loss_graph(&mut g, s, teacher_logits, targets, alpha)?;
    Ok(g.value(loss).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    DeltaOnly,
    /// Deltas plus low-rank adapters on every retained weight.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` is one pass over the training split.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub alpha_lora: f64,
    pub lora_dropout: f64,
    pub lora_rank: usize,
    /// Validation tokens scored after each epoch.
    pub eval_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
            warmup_steps: 0,
            epochs: 3,
            steps_per_epoch: None,
            batch_size: 8,
            seq_len: 128,
            seed: 0,
            mode: TrainMode::DeltaOnly,
            alpha_lora: 16.0,
            lora_dropout: 0.0,
            lora_rank: 4,
            eval_tokens: 16_384,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} is outside [0, 1]", self.alpha));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate {} is not positive", self.lr));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.steps_per_epoch == Some(0) {
            return bad("batch size, sequence length and steps per epoch must be positive".into());
        }
        if self.seq_len > model.max_seq_len {
            return bad(format!("sequence length {} exceeds {}", self.seq_len, model.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad(format!("adapter dropout {} is outside [0, 1)", self.lora_dropout));
        }
        if self.mode == TrainMode::Joint && (self.lora_rank == 0 || self.lora_rank > model.d_model) {
            return bad(format!("adapter rank {} is out of range", self.lora_rank));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub tokens: usize,
    /// Mean training loss over the epoch.
    pub train_loss: f64,
    /// Mean loss of the first and last tenth of the epoch's steps.
    pub loss_start: f64,
    pub loss_end: f64,
    pub val_ppl: f64,
    /// Mean fraction of sites on the student path.
    pub replacement_rate: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// First epoch with validation perplexity within 5% of the final one.
    pub epochs_to_threshold: Option<usize>,
    /// Epoch after which every site was replaced with certainty.
    pub converged_epoch: Option<usize>,
    pub tokens: usize,
    /// Filled in by callers that can read a clock.
    pub wall_clock_secs: Option<f64>,
}

impl TrainReport {
    pub fn final_ppl(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_ppl)
    }

    fn finish(&mut self) {
        self.tokens = self.epochs.iter().map(|e| e.tokens).sum();
        self.epochs_to_threshold = self.final_ppl().and_then(|f| {
            self.epochs.iter().find(|e| e.val_ppl <= 1.05 * f).map(|e| e.epoch)
        });
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Gaussian-initialized adapters for every retained weight.
pub fn init_adapters(student: &CompressedModel, cfg: &TrainConfig) -> Result<BTreeMap<WeightSite, DeltaModule>> {
    let mut rng = rng_stream(cfg.seed, 4);
    let opts = InitOptions { alpha_lora: cfg.alpha_lora };
    student
        .weights
        .iter()
        .map(|(&site, w)| {
            let [m, n] = w.shape();
            let zero = Tensor::zeros(&[m, n]);
            Ok((site, init_delta(&zero, cfg.lora_rank, InitMethod::Gaussian, None, &opts, &mut rng)?))
        })
        .collect()
}

/// Folds adapters into their base weights.
pub fn merge_adapters(student: &mut CompressedModel, adapters: &BTreeMap<WeightSite, DeltaModule>) -> Result<()> {
    for (site, ad) in adapters {
        match student.weights.get_mut(site) {
            Some(StoredWeight::Dense(w)) => *w = w.add(&ad.effective())?,
            Some(StoredWeight::Quantized(_)) => {
                return Err(Error::InvalidConfig(format!("cannot merge an adapter into quantized {site}")))
            }
            None => return Err(Error::UnknownSite(*site)),
        }
    }
    Ok(())
}

/// Trains the student's delta modules (and adapters in joint mode) with the
/// distillation loss. Without a scheduler every site uses the student path.
pub fn train(
    teacher: &Model,
    student: &CompressedModel,
    train_split: &[usize],
    val_split: &[usize],
    cfg: &TrainConfig,
    sched: Option<&ReplacementScheduler>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(CompressedModel, TrainReport)> {
    cfg.validate(&student.config)?;
    if let Some(s) = sched {
        s.validate()?;
    }
    student.validate()?;
    if teacher.config != student.config {
        return Err(Error::InvalidConfig("teacher and student configurations differ".into()));
    }
    let mut out = student.clone();
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((out, report));
    }
    if train_split.len() < cfg.seq_len + 1 {
        return Err(Error::EmptySample);
    }
    let val = &val_split[..val_split.len().min(cfg.eval_tokens + 1)];
    if val.len() < 2 {
        return Err(Error::EmptySample);
    }
    let joint = cfg.mode == TrainMode::Joint;
    if joint && out.weights.values().any(StoredWeight::is_quantized) {
        return Err(Error::InvalidConfig("joint mode needs unquantized weights".into()));
    }
    let mut adapters = if joint { init_adapters(&out, cfg)? } else { BTreeMap::new() };

    let targets = out.plan.targets();
    let (ranks, n_ranks) = depth_ranks(&out.plan);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or((train_split.len() / cfg.tokens_per_step()).max(1));
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut batch_rng = rng_stream(cfg.seed, 1);
    let mut mask_rng = rng_stream(cfg.seed, 2);
    let mut dropout_rng = rng_stream(cfg.seed, 3);

    let sizes: Vec<usize> = out
        .deltas
        .values()
        .chain(adapters.values())
        .flat_map(|d| [d.a.len(), d.b.len()])
        .collect();
    let mut adam = Adam::new(&sizes);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut losses = Vec::with_capacity(steps_per_epoch);
        let mut rate_sum = 0.0;
        let mut lr = cfg.lr;
        for _ in 0..steps_per_epoch {
            lr = cfg.schedule.lr_at(cfg.lr, step, total_steps, cfg.warmup_steps);
            let (inputs, tgts) = sample_batch(train_split, cfg.batch_size, cfg.seq_len, &mut batch_rng)?;
            let mask = sched.map(|s| sample_replacement_mask(s, step, &ranks, n_ranks, &mut mask_rng));
            rate_sum += mask.as_ref().map_or(1.0, |m| {
                if m.is_empty() {
                    1.0
                } else {
                    m.iter().filter(|&&b| b).count() as f64 / m.len() as f64
                }
            });
            let teacher_logits = if cfg.alpha > 0.0 {
                let t = forward_batch(teacher, &inputs, cfg.batch_size)?;
                let rows = inputs.len();
                t.reshape(&[rows, student.config.vocab_size])?
            } else {
                Tensor::zeros(&[0])
            };

            let mut g = Graph::new();
            let opts = BindOptions {
                train_deltas: true,
                adapters: joint.then_some(&adapters),
                train_adapters: joint,
                adapter_dropout: cfg.lora_dropout,
                fallback: mask.as_deref().map(|m| (teacher, m)),
            };
            let (bound, vars) = out.bind_with(&mut g, &opts)?;
            let dropout: Option<&mut dyn RngCore> =
                if joint && cfg.lora_dropout > 0.0 { Some(&mut dropout_rng) } else { None };
            let trace = forward_graph(&mut g, &out.config, &bound, &inputs, cfg.batch_size, dropout)?;
            let loss = distill_loss_graph(&mut g, trace.logits, &teacher_logits, &tgts, cfg.alpha)?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NanLoss { step, lr });
            }
            g.backward(loss)?;
            let pair_grads = |pair: Option<&(Var, Var)>| -> [Option<Vec<f64>>; 2] {
                match pair {
                    Some(&(a, b)) => [g.grad(a).map(<[f64]>::to_vec), g.grad(b).map(<[f64]>::to_vec)],
                    None => [None, None],
                }
            };
            let mut grads: Vec<Option<Vec<f64>>> = targets
                .iter()
                .flat_map(|t| pair_grads(vars.deltas.get(t)))
                .chain(adapters.keys().flat_map(|s| pair_grads(vars.adapters.get(s))))
                .collect();
            drop(g);
            clip_grad_norm(&mut grads, GRAD_CLIP);
            let mut params: Vec<&mut [f64]> = out
                .deltas
                .values_mut()
                .chain(adapters.values_mut())
                .flat_map(|d| [d.a.data_mut(), d.b.data_mut()])
                .collect();
            adam.step(&mut params, &grads, lr);
            losses.push(loss_value);
            step += 1;
        }

        let val_ppl = if joint {
            perplexity(&WithAdapters { model: &out, adapters: &adapters }, val, cfg.seq_len, cfg.batch_size)?
        } else {
            perplexity(&out, val, cfg.seq_len, cfg.batch_size)?
        };
        let tenth = (losses.len() / 10).max(1);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let rec = EpochRecord {
            epoch,
            steps: steps_per_epoch,
            tokens: steps_per_epoch * cfg.tokens_per_step(),
            train_loss: mean(&losses),
            loss_start: mean(&losses[..tenth]),
            loss_end: mean(&losses[losses.len() - tenth..]),
            val_ppl,
            replacement_rate: rate_sum / steps_per_epoch as f64,
            lr,
        };
        on_epoch(&rec);
        report.epochs.push(rec);

        if let Some(s) = sched {
            if report.converged_epoch.is_none() && s.converged(step) {
                report.converged_epoch = Some(epoch);
            }
            if let (Some(c), Some(extra)) = (report.converged_epoch, s.extra_epochs) {
                if epoch >= c + extra {
                    break;
                }
            }
        }
    }
    if joint {
        merge_adapters(&mut out, &adapters)?;
    }
    report.finish();
    Ok((out, report))
}
