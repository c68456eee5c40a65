//! Decoder-only transformer with addressable weight sites.
//!
//! Blocks are pre-norm: `x += Attn(RMSNorm(x))`, `x += MLP(RMSNorm(x))`, with
//! rotary positions, causal multi-head attention and a SiLU-gated MLP. Every
//! block matrix is stored `[out, in]` and keyed by a [`WeightSite`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 258,
            max_seq_len: 128,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return bad("d_model, n_heads and d_ffn must be >= 1".into());
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be >= 1".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad("head dimension must be even for rotary encoding".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `[out, in]` shape of a block matrix.
    pub fn site_shape(&self, role: Role) -> [usize; 2] {
        let (d, f) = (self.d_model, self.d_ffn);
        match role {
            Role::Q | Role::K | Role::V | Role::O => [d, d],
            Role::Gate | Role::Up => [f, d],
            Role::Down => [d, f],
        }
    }

    /// All weight sites in block-major, role order.
    pub fn sites(&self) -> Vec<WeightSite> {
        (0..self.n_layers)
            .flat_map(|block| Role::ALL.iter().map(move |&role| WeightSite { block, role }))
            .collect()
    }

    /// Closed-form count of stored scalars.
    pub fn param_count(&self) -> u64 {
        let (v, d, f, l) = (
            self.vocab_size as u64,
            self.d_model as u64,
            self.d_ffn as u64,
            self.n_layers as u64,
        );
        v * d + l * (2 * d + 4 * d * d + 3 * d * f) + d + d * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sublayer {
    Attention,
    Mlp,
}

impl Sublayer {
    pub fn roles(self) -> &'static [Role] {
        match self {
            Sublayer::Attention => &[Role::Q, Role::K, Role::V, Role::O],
            Sublayer::Mlp => &[Role::Gate, Role::Up, Role::Down],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sublayer::Attention => "attn",
            Sublayer::Mlp => "mlp",
        }
    }
}

/// Matrix role inside a block; the sublayer follows from the role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Q,
        Role::K,
        Role::V,
        Role::O,
        Role::Gate,
        Role::Up,
        Role::Down,
    ];

    pub fn sublayer(self) -> Sublayer {
        match self {
            Role::Q | Role::K | Role::V | Role::O => Sublayer::Attention,
            Role::Gate | Role::Up | Role::Down => Sublayer::Mlp,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::Gate => "gate",
            Role::Up => "up",
            Role::Down => "down",
        }
    }
}

/// A block matrix address, rendered as `blocks.{l}.{attn|mlp}.{role}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeightSite {
    pub block: usize,
    pub role: Role,
}

impl WeightSite {
    pub fn new(block: usize, role: Role) -> Self {
        Self { block, role }
    }

    pub fn sublayer(&self) -> Sublayer {
        self.role.sublayer()
    }

    /// Same role in another block.
    pub fn in_block(&self, block: usize) -> Self {
        Self { block, role: self.role }
    }
}

impl fmt::Display for WeightSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}.{}", self.block, self.sublayer().name(), self.role.name())
    }
}

impl FromStr for WeightSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::InvalidArgument(format!("malformed weight site `{s}`"));
        let mut parts = s.split('.');
        if parts.next() != Some("blocks") {
            return Err(err());
        }
        let block = parts.next().and_then(|b| b.parse().ok()).ok_or_else(err)?;
        let sub = parts.next().ok_or_else(err)?;
        let role_name = parts.next().ok_or_else(err)?;
        if parts.next().is_some() {
            return Err(err());
        }
        let role = Role::ALL
            .iter()
            .copied()
            .find(|r| r.name() == role_name && r.sublayer().name() == sub)
            .ok_or_else(err)?;
        Ok(Self { block, role })
    }
}

impl Serialize for WeightSite {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WeightSite {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters that are never shared or delta-compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    /// `[V, d]`
    pub embedding: Tensor,
    pub attn_norms: Vec<Tensor>,
    pub mlp_norms: Vec<Tensor>,
    pub final_norm: Tensor,
    /// `[V, d]`, untied from the embedding.
    pub output: Tensor,
}

impl Backbone {
    pub fn param_count(&self) -> u64 {
        let norms: usize = self.attn_norms.iter().chain(&self.mlp_norms).map(Tensor::len).sum();
        (self.embedding.len() + norms + self.final_norm.len() + self.output.len()) as u64
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        let mut put = |t: &Tensor| {
            if trainable {
                g.variable(t.clone())
            } else {
                g.leaf(t)
            }
        };
        BoundBackbone {
            embedding: put(&self.embedding),
            attn_norms: self.attn_norms.iter().map(&mut put).collect(),
            mlp_norms: self.mlp_norms.iter().map(&mut put).collect(),
            final_norm: put(&self.final_norm),
            output: put(&self.output),
        }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        core::iter::once(&mut self.embedding)
            .chain(self.attn_norms.iter_mut())
            .chain(self.mlp_norms.iter_mut())
            .chain(core::iter::once(&mut self.final_norm))
            .chain(core::iter::once(&mut self.output))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub weights: BTreeMap<WeightSite, Tensor>,
}

/// Builds a deterministically initialized model.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (config.vocab_size, config.d_model);
    let resid_std = INIT_STD / libm::sqrt(2.0 * config.n_layers.max(1) as f64);
    let embedding = Tensor::randn(&[v, d], INIT_STD, &mut rng);
    let mut weights = BTreeMap::new();
    for site in config.sites() {
        let std = match site.role {
            Role::O | Role::Down => resid_std,
            _ => INIT_STD,
        };
        weights.insert(site, Tensor::randn(&config.site_shape(site.role), std, &mut rng));
    }
    let output = Tensor::randn(&[v, d], INIT_STD, &mut rng);
    let ones = || Tensor::full(&[d], 1.0);
    let backbone = Backbone {
        embedding,
        attn_norms: (0..config.n_layers).map(|_| ones()).collect(),
        mlp_norms: (0..config.n_layers).map(|_| ones()).collect(),
        final_norm: ones(),
        output,
    };
    Ok(Model { config: *config, backbone, weights })
}

impl Model {
    /// Checks that every site implied by the config is present with the right shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let expect = |t: &Tensor, shape: &[usize], what: &str| {
            if t.shape() != shape {
                Err(Error::InvalidConfig(format!(
                    "{what} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        expect(&self.backbone.embedding, &[c.vocab_size, c.d_model], "embedding")?;
        expect(&self.backbone.output, &[c.vocab_size, c.d_model], "output")?;
        expect(&self.backbone.final_norm, &[c.d_model], "final_norm")?;
        if self.backbone.attn_norms.len() != c.n_layers || self.backbone.mlp_norms.len() != c.n_layers {
            return Err(Error::InvalidConfig("norm count differs from n_layers".into()));
        }
        for n in self.backbone.attn_norms.iter().chain(&self.backbone.mlp_norms) {
            expect(n, &[c.d_model], "block norm")?;
        }
        if self.weights.len() != c.n_layers * Role::ALL.len() {
            return Err(Error::InvalidConfig("unexpected number of weight sites".into()));
        }
        for site in c.sites() {
            let w = self.weights.get(&site).ok_or(Error::UnknownSite(site))?;
            expect(w, &c.site_shape(site.role), "weight site")?;
        }
        Ok(())
    }

    /// Stored scalar count.
    pub fn param_count(&self) -> u64 {
        self.backbone.param_count() + self.weights.values().map(|w| w.len() as u64).sum::<u64>()
    }

    pub fn weight(&self, site: WeightSite) -> Result<&Tensor> {
        self.weights.get(&site).ok_or(Error::UnknownSite(site))
    }

    /// Every parameter tensor, backbone first then sites in key order.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.backbone.tensors_mut().chain(self.weights.values_mut())
    }
}

/// Exact parameter count of a model (delta modules are not part of a `Model`).
pub fn count_params(model: &Model) -> u64 {
    model.param_count()
}

/// Graph handles for the backbone parameters.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub embedding: Var,
    pub attn_norms: Vec<Var>,
    pub mlp_norms: Vec<Var>,
    pub final_norm: Var,
    pub output: Var,
}

/// A low-rank adapter applied next to a weight: `scale · drop(x) · Bᵀ · Aᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct AdapterBinding {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SiteBinding {
    pub weight: Var,
    pub adapter: Option<AdapterBinding>,
}

/// All parameters of one forward pass, placed in a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub backbone: BoundBackbone,
    pub sites: BTreeMap<WeightSite, SiteBinding>,
}

/// Anything that can lay its effective weights into a graph.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;
    fn bind(&self, g: &mut Graph) -> Result<Bound>;
}

impl LanguageModel for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn bind(&self, g: &mut Graph) -> Result<Bound> {
        Ok(self.bind_with(g, false))
    }
}

impl Model {
    /// Binds parameters; with `trainable` every tensor becomes a gradient leaf.
    pub fn bind_with(&self, g: &mut Graph, trainable: bool) -> Bound {
        let backbone = self.backbone.bind(g, trainable);
        let sites = self
            .weights
            .iter()
            .map(|(&site, w)| {
                let weight = if trainable { g.variable(w.clone()) } else { g.leaf(w) };
                (site, SiteBinding { weight, adapter: None })
            })
            .collect();
        Bound { backbone, sites }
    }
}

/// Residual-stream checkpoints of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub input: Var,
    pub after_attn: Var,
    pub after_mlp: Var,
}

#[derive(Debug, Clone)]
pub struct Trace {
    /// `[B*T, V]`
    pub logits: Var,
    pub blocks: Vec<BlockTrace>,
    /// Input activation of each site's matrix, `[B*T, in]`.
    pub site_inputs: BTreeMap<WeightSite, Var>,
}

fn apply_site(
    g: &mut Graph,
    bound: &Bound,
    site: WeightSite,
    x: Var,
    trace: &mut BTreeMap<WeightSite, Var>,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<Var> {
    let b = bound.sites.get(&site).ok_or(Error::UnknownSite(site))?;
    trace.insert(site, x);
    let y = g.linear(x, b.weight)?;
    match b.adapter {
        None => Ok(y),
        Some(ad) => {
            let xin = match rng {
                Some(r) if ad.dropout > 0.0 => g.dropout(x, ad.dropout, *r),
                _ => x,
            };
            let low = g.linear(xin, ad.b)?;
            let up = g.linear(low, ad.a)?;
            let up = g.scale(up, ad.scale);
            g.add(y, up)
        }
    }
}

/// Validates a token batch: `batch` equal-length rows flattened in `tokens`.
pub fn check_tokens(config: &ModelConfig, tokens: &[usize], batch: usize) -> Result<usize> {
    if batch == 0 || !tokens.len().is_multiple_of(batch) {
        return Err(Error::InvalidArgument(format!(
            "{} tokens do not split into {batch} rows",
            tokens.len()
        )));
    }
    let seq = tokens.len() / batch;
    if seq > config.max_seq_len {
        return Err(Error::SequenceTooLong { len: seq, max: config.max_seq_len });
    }
    if seq == 0 {
        return Err(Error::SequenceTooShort { len: 0, min: 1 });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab: config.vocab_size });
    }
    Ok(seq)
}

/// Records a forward pass. `dropout_rng` enables adapter dropout.
pub fn forward_graph(
    g: &mut Graph,
    config: &ModelConfig,
    bound: &Bound,
    tokens: &[usize],
    batch: usize,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Trace> {
    let seq = check_tokens(config, tokens, batch)?;
    let h = config.n_heads;
    let mut site_inputs = BTreeMap::new();
    let mut blocks = Vec::with_capacity(config.n_layers);
    let mut x = g.embedding(bound.backbone.embedding, tokens)?;
    for l in 0..config.n_layers {
        let input = x;
        let site = |role| WeightSite::new(l, role);
        let hn = g.rms_norm(x, bound.backbone.attn_norms[l], config.norm_eps)?;
        let q = apply_site(g, bound, site(Role::Q), hn, &mut site_inputs, &mut dropout_rng)?;
        let k = apply_site(g, bound, site(Role::K), hn, &mut site_inputs, &mut dropout_rng)?;
        let v = apply_site(g, bound, site(Role::V), hn, &mut site_inputs, &mut dropout_rng)?;
        let q = g.rope(q, h, seq)?;
        let k = g.rope(k, h, seq)?;
        let att = g.causal_attention(q, k, v, batch, seq, h)?;
        let o = apply_site(g, bound, site(Role::O), att, &mut site_inputs, &mut dropout_rng)?;
        x = g.add(x, o)?;
        let after_attn = x;
        let hn = g.rms_norm(x, bound.backbone.mlp_norms[l], config.norm_eps)?;
        let gate = apply_site(g, bound, site(Role::Gate), hn, &mut site_inputs, &mut dropout_rng)?;
        let up = apply_site(g, bound, site(Role::Up), hn, &mut site_inputs, &mut dropout_rng)?;
        let act = g.silu(gate);
        let m = g.mul(act, up)?;
        let down = apply_site(g, bound, site(Role::Down), m, &mut site_inputs, &mut dropout_rng)?;
        x = g.add(x, down)?;
        blocks.push(BlockTrace { input, after_attn, after_mlp: x });
    }
    let xn = g.rms_norm(x, bound.backbone.final_norm, config.norm_eps)?;
    let logits = g.linear(xn, bound.backbone.output)?;
    Ok(Trace { logits, blocks, site_inputs })
}

/// Logits `[B, T, V]` for `batch` equal-length rows flattened in `tokens`.
pub fn forward_batch<M: LanguageModel + ?Sized>(model: &M, tokens: &[usize], batch: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let cfg = model.config();
    let trace = forward_graph(&mut g, cfg, &bound, tokens, batch, None)?;
    let seq = tokens.len() / batch;
    g.value(trace.logits).clone().reshape(&[batch, seq, cfg.vocab_size])
}

/// Logits `[B, T, V]` for a batch of equal-length sequences.
pub fn forward<M: LanguageModel + ?Sized>(model: &M, tokens: &[Vec<usize>]) -> Result<Tensor> {
    let seq = tokens.first().map_or(0, Vec::len);
    if tokens.iter().any(|r| r.len() != seq) {
        return Err(Error::InvalidArgument("ragged token batch".to_string()));
    }
    let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
    forward_batch(model, &flat, tokens.len())
}

/// Sum of `log p(token_t | prefix)` per row over positions `1..T`.
fn row_log_likelihoods(logits: &Tensor, tokens: &[usize], batch: usize) -> Vec<f64> {
    let seq = tokens.len() / batch;
    let vocab = logits.shape()[logits.shape().len() - 1];
    let data = logits.data();
    let mut out = vec![0.0; batch];
    for b in 0..batch {
        for t in 1..seq {
            let row = &data[(b * seq + t - 1) * vocab..(b * seq + t) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>());
            out[b] += row[tokens[b * seq + t]] - lse;
        }
    }
    out
}

/// Total log-likelihood of `tokens[1..]` given their prefixes, and the number of scored tokens.
pub fn score_sequence<M: LanguageModel + ?Sized>(model: &M, tokens: &[usize]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort { len: tokens.len(), min: 2 });
    }
    let logits = forward_batch(model, tokens, 1)?;
    Ok((row_log_likelihoods(&logits, tokens, 1)[0], tokens.len() - 1))
}

/// Scores a long token stream in non-overlapping windows of `window` predictions
/// (each window carries one token of left context), `batch` windows at a time.
/// Returns `(total_log_likelihood, scored_tokens)`.
pub fn score_stream<M: LanguageModel + ?Sized>(
    model: &M,
    stream: &[usize],
    window: usize,
    batch: usize,
) -> Result<(f64, usize)> {
    let cfg = model.config();
    let window = window.min(cfg.max_seq_len.saturating_sub(1)).max(1);
    if stream.len() < 2 {
        return Err(Error::SequenceTooShort { len: stream.len(), min: 2 });
    }
    let mut starts = Vec::new();
    let mut s = 0;
    while s + 1 < stream.len() {
        starts.push(s);
        s += window;
    }
    let mut total = 0.0;
    let mut count = 0;
    // Full-length windows are batched; the ragged tail is scored alone.
    let full: Vec<usize> = starts.iter().copied().filter(|&s| s + window < stream.len()).collect();
    for chunk in full.chunks(batch.max(1)) {
        let mut flat = Vec::with_capacity(chunk.len() * (window + 1));
        for &s in chunk {
            flat.extend_from_slice(&stream[s..s + window + 1]);
        }
        let logits = forward_batch(model, &flat, chunk.len())?;
        total += row_log_likelihoods(&logits, &flat, chunk.len()).iter().sum::<f64>();
        count += chunk.len() * window;
    }
    if let Some(&last) = starts.last() {
        if last + window >= stream.len() {
            let (ll, n) = score_sequence(model, &stream[last..])?;
            total += ll;
            count += n;
        }
    }
    Ok((total, count))
}

/// `exp(-mean log-likelihood)` of a stream.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, stream: &[usize], window: usize, batch: usize) -> Result<f64> {
    let (ll, n) = score_stream(model, stream, window, batch)?;
    Ok(libm::exp(-ll / n as f64))
}
