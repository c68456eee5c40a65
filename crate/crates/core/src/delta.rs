//! Cross-layer sharing with low-rank deltas.
//!
//! A target weight is stored as a reference to an earlier anchor weight plus a
//! low-rank module: `W_target ≈ W_anchor + s·A·B`, with `A: M×r`, `B: r×N`.
//! The exact difference `δ = W_target − W_anchor` seeds the module for the
//! SVD and QR initializers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{qr_decompose, truncated_svd};
use crate::model::{
    forward_graph, AdapterBinding, Backbone, Bound, LanguageModel, Model, ModelConfig, SiteBinding,
    WeightSite,
};
use crate::quant::{QuantPolicy, QuantizedTensor};
use crate::tensor::Tensor;

/// Activation rows sampled for data-driven initialization.
pub const EVA_SAMPLE_POSITIONS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStrategy {
    Sequential,
    Alternating,
    Similarity,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanEntry {
    pub target: WeightSite,
    pub anchor: WeightSite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub strategy: PlanStrategy,
    pub protected_blocks: BTreeSet<usize>,
    /// Sorted by target.
    pub entries: Vec<PlanEntry>,
}

/// First block and the last two.
pub fn default_protected(n_layers: usize) -> BTreeSet<usize> {
    [0, n_layers.wrapping_sub(2), n_layers.wrapping_sub(1)]
        .into_iter()
        .filter(|&b| b < n_layers)
        .collect()
}

impl SharingPlan {
    pub fn empty(n_layers: usize) -> Self {
        Self {
            strategy: PlanStrategy::Explicit,
            protected_blocks: default_protected(n_layers),
            entries: Vec::new(),
        }
    }

    pub fn new(
        strategy: PlanStrategy,
        protected_blocks: BTreeSet<usize>,
        mut entries: Vec<PlanEntry>,
    ) -> Self {
        entries.sort();
        Self { strategy, protected_blocks, entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn targets(&self) -> Vec<WeightSite> {
        self.entries.iter().map(|e| e.target).collect()
    }

    pub fn anchors(&self) -> BTreeSet<WeightSite> {
        self.entries.iter().map(|e| e.anchor).collect()
    }

    pub fn anchor_of(&self, target: WeightSite) -> Option<WeightSite> {
        self.entries.iter().find(|e| e.target == target).map(|e| e.anchor)
    }

    pub fn is_target(&self, site: WeightSite) -> bool {
        self.entries.iter().any(|e| e.target == site)
    }

    /// Distinct target blocks, shallowest first.
    pub fn target_blocks(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.entries.iter().map(|e| e.target.block).collect();
        set.into_iter().collect()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidPlan(m));
        let targets: BTreeSet<WeightSite> = self.entries.iter().map(|e| e.target).collect();
        if targets.len() != self.entries.len() {
            return bad("a target appears more than once".to_string());
        }
        for e in &self.entries {
            for s in [e.target, e.anchor] {
                if s.block >= config.n_layers {
                    return bad(format!("{s} is outside a {}-block model", config.n_layers));
                }
                if self.protected_blocks.contains(&s.block) {
                    return bad(format!("{s} lies in protected block {}", s.block));
                }
            }
            if e.anchor.role != e.target.role {
                return bad(format!("{} and {} have different roles", e.target, e.anchor));
            }
            if e.anchor.block >= e.target.block {
                return bad(format!("anchor {} does not precede target {}", e.anchor, e.target));
            }
            if targets.contains(&e.anchor) {
                return bad(format!("anchor {} is itself a target", e.anchor));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    /// `A ~ N(0, 1/r)`, `B = 0`, `s = α/r`.
    Gaussian,
    /// Principal singular triplets of `δ`.
    Svd,
    /// Leading QR factors of `δ`.
    Qr,
    /// Right-singular vectors of sampled input activations, `A = 0`.
    Eva,
}

/// Low-rank pair whose scaled product is the effective delta.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaModule {
    /// `M × r`
    pub a: Tensor,
    /// `r × N`
    pub b: Tensor,
    pub rank: usize,
    pub scaling: f64,
    pub init: InitMethod,
}

impl DeltaModule {
    pub fn shape(&self) -> [usize; 2] {
        [self.a.rows(), self.b.cols()]
    }

    /// `s·A·B`
    pub fn effective(&self) -> Tensor {
        self.a.matmul(&self.b).expect("consistent factors").scale(self.scaling)
    }

    pub fn param_count(&self) -> u64 {
        (self.a.len() + self.b.len()) as u64
    }
}

/// `δ = W_target − W_anchor`.
pub fn compute_delta(anchor: &Tensor, target: &Tensor) -> Result<Tensor> {
    target.sub(anchor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    /// LoRA-style numerator of the gaussian scaling `α/r`.
    pub alpha_lora: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { alpha_lora: 16.0 }
    }
}

/// Initializes a delta module for an `M × N` difference.
///
/// `activations` (`S × N`, one sample per row) is required for [`InitMethod::Eva`].
pub fn init_delta<R: Rng + ?Sized>(
    delta_full: &Tensor,
    rank: usize,
    method: InitMethod,
    activations: Option<&Tensor>,
    options: &InitOptions,
    rng: &mut R,
) -> Result<DeltaModule> {
    let (m, n) = (delta_full.rows(), delta_full.cols());
    if rank == 0 || rank > m.min(n) {
        return Err(Error::RankOutOfRange { rank, rows: m, cols: n });
    }
    let module = match method {
        InitMethod::Gaussian => DeltaModule {
            a: Tensor::randn(&[m, rank], 1.0 / libm::sqrt(rank as f64), rng),
            b: Tensor::zeros(&[rank, n]),
            rank,
            scaling: options.alpha_lora / rank as f64,
            init: method,
        },
        InitMethod::Svd => {
            let svd = truncated_svd(delta_full, rank)?;
            let mut a = svd.u;
            for i in 0..m {
                for j in 0..rank {
                    a.data_mut()[i * rank + j] *= svd.s[j];
                }
            }
            DeltaModule { a, b: svd.v.transpose(), rank, scaling: 1.0, init: method }
        }
        InitMethod::Qr => {
            let (q, r) = qr_decompose(delta_full)?;
            let k = q.cols();
            let mut a = Tensor::zeros(&[m, rank]);
            for i in 0..m {
                a.data_mut()[i * rank..(i + 1) * rank].copy_from_slice(&q.row(i)[..rank]);
            }
            let b = Tensor::new(&[rank, n], r.data()[..rank * n].to_vec())?;
            debug_assert!(rank <= k);
            DeltaModule { a, b, rank, scaling: 1.0, init: method }
        }
        InitMethod::Eva => {
            let acts = activations.ok_or(Error::MissingActivations)?;
            if acts.cols() != n {
                return Err(Error::Shape {
                    op: "eva activations",
                    lhs: acts.shape().to_vec(),
                    rhs: alloc::vec![n],
                });
            }
            if rank > acts.rows() {
                return Err(Error::RankOutOfRange { rank, rows: acts.rows(), cols: n });
            }
            let svd = truncated_svd(acts, rank)?;
            DeltaModule {
                a: Tensor::zeros(&[m, rank]),
                b: svd.v.transpose(),
                rank,
                scaling: 1.0,
                init: method,
            }
        }
    };
    Ok(module)
}

/// A base weight held either densely or quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredWeight {
    Dense(Tensor),
    Quantized(QuantizedTensor),
}

impl StoredWeight {
    pub fn to_dense(&self) -> Tensor {
        match self {
            StoredWeight::Dense(t) => t.clone(),
            StoredWeight::Quantized(q) => q.dequantize(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, StoredWeight::Quantized(_))
    }

    pub fn len(&self) -> usize {
        match self {
            StoredWeight::Dense(t) => t.len(),
            StoredWeight::Quantized(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 2] {
        match self {
            StoredWeight::Dense(t) => [t.rows(), t.cols()],
            StoredWeight::Quantized(q) => q.shape(),
        }
    }
}

/// A model whose plan targets hold no storage of their own.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// Anchors and untouched sites only.
    pub weights: BTreeMap<WeightSite, StoredWeight>,
    pub plan: SharingPlan,
    pub deltas: BTreeMap<WeightSite, DeltaModule>,
    pub quantization: Option<QuantPolicy>,
}

/// Rank of a delta: an explicit value or the full `min(M, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rank {
    Fixed(usize),
    #[serde(with = "full_rank")]
    Full,
}

mod full_rank {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("full")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = alloc::string::String::deserialize(d)?;
        if s == "full" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"full\" or an integer rank"))
        }
    }
}

impl Rank {
    pub fn resolve(self, shape: [usize; 2]) -> usize {
        match self {
            Rank::Fixed(r) => r,
            Rank::Full => shape[0].min(shape[1]),
        }
    }
}

/// Uniform rank with optional per-site overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMap {
    pub default: Rank,
    pub overrides: BTreeMap<WeightSite, Rank>,
}

impl RankMap {
    pub fn uniform(rank: Rank) -> Self {
        Self { default: rank, overrides: BTreeMap::new() }
    }

    pub fn rank_for(&self, site: WeightSite, shape: [usize; 2]) -> usize {
        self.overrides.get(&site).copied().unwrap_or(self.default).resolve(shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressOptions {
    pub ranks: RankMap,
    pub method: InitMethod,
    pub init: InitOptions,
    pub seed: u64,
}

/// Captures the input activation (`S × N`) of each requested site from `model`
/// over up to `positions` tokens of `calibration`.
pub fn capture_site_inputs(
    model: &Model,
    calibration: &[usize],
    sites: &[WeightSite],
    positions: usize,
) -> Result<BTreeMap<WeightSite, Tensor>> {
    let seq = model.config.max_seq_len;
    let usable = calibration.len().min(positions);
    if usable == 0 {
        return Err(Error::EmptySample);
    }
    let mut rows: BTreeMap<WeightSite, Vec<f64>> = sites.iter().map(|&s| (s, Vec::new())).collect();
    let mut taken = 0;
    for chunk in calibration[..usable].chunks(seq) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let trace = forward_graph(&mut g, &model.config, &bound, chunk, 1, None)?;
        for (site, buf) in rows.iter_mut() {
            let v = trace.site_inputs.get(site).ok_or(Error::UnknownSite(*site))?;
            buf.extend_from_slice(g.value(*v).data());
        }
        taken += chunk.len();
    }
    rows.into_iter()
        .map(|(site, data)| {
            let cols = data.len() / taken;
            Ok((site, Tensor::new(&[taken, cols], data)?))
        })
        .collect()
}

/// Replaces every plan target with a reference to its anchor plus a delta module.
pub fn compress(
    model: &Model,
    plan: &SharingPlan,
    options: &CompressOptions,
    calibration: Option<&[usize]>,
) -> Result<CompressedModel> {
    model.validate()?;
    plan.validate(&model.config)?;
    let targets = plan.targets();
    let activations = if options.method == InitMethod::Eva && !targets.is_empty() {
        let calib = calibration.ok_or(Error::MissingActivations)?;
        Some(capture_site_inputs(model, calib, &targets, EVA_SAMPLE_POSITIONS)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut deltas = BTreeMap::new();
    for e in &plan.entries {
        let anchor = model.weight(e.anchor)?;
        let target = model.weight(e.target)?;
        let delta = compute_delta(anchor, target)?;
        let rank = options.ranks.rank_for(e.target, [delta.rows(), delta.cols()]);
        let acts = activations.as_ref().and_then(|a| a.get(&e.target));
        let module = init_delta(&delta, rank, options.method, acts, &options.init, &mut rng)?;
        deltas.insert(e.target, module);
    }
    let weights = model
        .weights
        .iter()
        .filter(|(s, _)| !plan.is_target(**s))
        .map(|(&s, w)| (s, StoredWeight::Dense(w.clone())))
        .collect();
    Ok(CompressedModel {
        config: model.config,
        backbone: model.backbone.clone(),
        weights,
        plan: plan.clone(),
        deltas,
        quantization: None,
    })
}

/// `(original − compressed) / original`.
pub fn compression_ratio(original: u64, compressed: u64) -> Result<f64> {
    if original == 0 || compressed == 0 {
        return Err(Error::InvalidArgument("parameter counts must be positive".into()));
    }
    if compressed > original {
        return Err(Error::CompressedLarger { original, compressed });
    }
    Ok((original - compressed) as f64 / original as f64)
}

/// Graph handles of the trainable low-rank pairs created while binding.
#[derive(Debug, Clone, Default)]
pub struct LowRankVars {
    pub deltas: BTreeMap<WeightSite, (Var, Var)>,
    pub adapters: BTreeMap<WeightSite, (Var, Var)>,
}

/// Controls how a compressed model is laid into a graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct BindOptions<'a> {
    pub train_deltas: bool,
    /// Low-rank adapters on retained weights; a target inherits its anchor's adapter.
    pub adapters: Option<&'a BTreeMap<WeightSite, DeltaModule>>,
    pub train_adapters: bool,
    pub adapter_dropout: f64,
    /// Teacher weights for targets whose mask entry is false (`mask` follows
    /// `plan.targets()` order).
    pub fallback: Option<(&'a Model, &'a [bool])>,
}

impl CompressedModel {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.plan.validate(&self.config)?;
        for site in self.config.sites() {
            let shape = self.config.site_shape(site.role);
            if self.plan.is_target(site) {
                if self.weights.contains_key(&site) {
                    return Err(Error::InvalidPlan(format!("target {site} still holds storage")));
                }
                let d = self.deltas.get(&site).ok_or_else(|| {
                    Error::InvalidPlan(format!("target {site} has no delta module"))
                })?;
                if d.shape() != shape || d.a.cols() != d.rank || d.b.rows() != d.rank {
                    return Err(Error::InvalidPlan(format!("delta for {site} has the wrong shape")));
                }
            } else {
                let w = self.weights.get(&site).ok_or(Error::UnknownSite(site))?;
                if w.shape() != shape {
                    return Err(Error::InvalidPlan(format!("{site} has the wrong shape")));
                }
            }
        }
        if self.deltas.len() != self.plan.entries.len() {
            return Err(Error::InvalidPlan("delta modules outside the plan".into()));
        }
        Ok(())
    }

    /// Stored scalars: backbone, retained weights and delta factors.
    pub fn param_count(&self) -> u64 {
        self.backbone.param_count()
            + self.weights.values().map(|w| w.len() as u64).sum::<u64>()
            + self.delta_param_count()
    }

    pub fn delta_param_count(&self) -> u64 {
        self.deltas.values().map(DeltaModule::param_count).sum()
    }

    /// Payload bytes with floats stored at `float_bytes` each.
    pub fn storage_bytes(&self, float_bytes: usize) -> u64 {
        let dense_backbone = self.backbone.param_count() as usize * float_bytes;
        let weights: usize = self
            .weights
            .values()
            .map(|w| match w {
                StoredWeight::Dense(t) => t.len() * float_bytes,
                StoredWeight::Quantized(q) => q.storage_bytes(),
            })
            .sum();
        (dense_backbone + weights) as u64 + self.delta_param_count() * float_bytes as u64
    }

    pub fn stored_weight(&self, site: WeightSite) -> Result<&StoredWeight> {
        self.weights.get(&site).ok_or(Error::UnknownSite(site))
    }

    /// Effective weight at `site`: stored weight, or `anchor + s·A·B` for a target.
    pub fn reconstruct_weight(&self, site: WeightSite) -> Result<Tensor> {
        if site.block >= self.config.n_layers {
            return Err(Error::UnknownSite(site));
        }
        match self.plan.anchor_of(site) {
            None => Ok(self.stored_weight(site)?.to_dense()),
            Some(anchor) => {
                let base = self
                    .weights
                    .get(&anchor)
                    .ok_or(Error::DanglingAnchor { target: site, anchor })?
                    .to_dense();
                let delta = self.deltas.get(&site).ok_or(Error::UnknownSite(site))?;
                base.add(&delta.effective())
            }
        }
    }

    /// Fully materialized model with every target resolved.
    pub fn to_model(&self) -> Result<Model> {
        let weights = self
            .config
            .sites()
            .into_iter()
            .map(|s| Ok((s, self.reconstruct_weight(s)?)))
            .collect::<Result<_>>()?;
        Ok(Model { config: self.config, backbone: self.backbone.clone(), weights })
    }

    /// Lays effective weights into `g`.
    pub fn bind_with(&self, g: &mut Graph, opts: &BindOptions<'_>) -> Result<(Bound, LowRankVars)> {
        let targets = self.plan.targets();
        if let Some((_, mask)) = opts.fallback {
            if mask.len() != targets.len() {
                return Err(Error::MaskMismatch { expected: targets.len(), got: mask.len() });
            }
        }
        let backbone = bind_backbone(g, &self.backbone);
        let mut vars = LowRankVars::default();
        let mut base_vars: BTreeMap<WeightSite, Var> = BTreeMap::new();
        let mut sites = BTreeMap::new();

        let adapter_for = |g: &mut Graph, site: WeightSite, vars: &mut LowRankVars| {
            let ad = opts.adapters?.get(&site)?;
            let (a, b) = *vars.adapters.entry(site).or_insert_with(|| {
                if opts.train_adapters {
                    (g.variable(ad.a.clone()), g.variable(ad.b.clone()))
                } else {
                    (g.leaf(&ad.a), g.leaf(&ad.b))
                }
            });
            Some(AdapterBinding { a, b, scale: ad.scaling, dropout: opts.adapter_dropout })
        };

        for (&site, stored) in &self.weights {
            let w = match stored {
                StoredWeight::Dense(t) => g.leaf(t),
                StoredWeight::Quantized(q) => g.constant(q.dequantize()),
            };
            base_vars.insert(site, w);
            let adapter = adapter_for(g, site, &mut vars);
            sites.insert(site, SiteBinding { weight: w, adapter });
        }
        for (i, e) in self.plan.entries.iter().enumerate() {
            let use_student = opts.fallback.is_none_or(|(_, mask)| mask[i]);
            let binding = if use_student {
                let anchor = *base_vars
                    .get(&e.anchor)
                    .ok_or(Error::DanglingAnchor { target: e.target, anchor: e.anchor })?;
                let d = self.deltas.get(&e.target).ok_or(Error::UnknownSite(e.target))?;
                let (a, b) = if opts.train_deltas {
                    (g.variable(d.a.clone()), g.variable(d.b.clone()))
                } else {
                    (g.leaf(&d.a), g.leaf(&d.b))
                };
                vars.deltas.insert(e.target, (a, b));
                let ab = g.matmul(a, b)?;
                let ab = g.scale(ab, d.scaling);
                let weight = g.add(anchor, ab)?;
                let adapter = adapter_for(g, e.anchor, &mut vars);
                SiteBinding { weight, adapter }
            } else {
                let (teacher, _) = opts.fallback.expect("mask implies fallback");
                SiteBinding { weight: g.leaf(teacher.weight(e.target)?), adapter: None }
            };
            sites.insert(e.target, binding);
        }
        Ok((Bound { backbone, sites }, vars))
    }
}

fn bind_backbone(g: &mut Graph, b: &Backbone) -> crate::model::BoundBackbone {
    crate::model::BoundBackbone {
        embedding: g.leaf(&b.embedding),
        attn_norms: b.attn_norms.iter().map(|t| g.leaf(t)).collect(),
        mlp_norms: b.mlp_norms.iter().map(|t| g.leaf(t)).collect(),
        final_norm: g.leaf(&b.final_norm),
        output: g.leaf(&b.output),
    }
}

impl LanguageModel for CompressedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn bind(&self, g: &mut Graph) -> Result<Bound> {
        Ok(self.bind_with(g, &BindOptions::default())?.0)
    }
}
