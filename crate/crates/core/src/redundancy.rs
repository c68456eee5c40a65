//! Redundancy scores and sharing-plan construction.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delta::{default_protected, PlanEntry, PlanStrategy, SharingPlan};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward_graph, LanguageModel, ModelConfig, Sublayer, WeightSite};

/// Positions scored by default.
pub const DEFAULT_SAMPLE_POSITIONS: usize = 8192;

/// Which sublayers a plan or report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SublayerChoice {
    #[default]
    Mlp,
    Attention,
    Both,
}

impl SublayerChoice {
    pub fn kinds(self) -> &'static [Sublayer] {
        match self {
            SublayerChoice::Mlp => &[Sublayer::Mlp],
            SublayerChoice::Attention => &[Sublayer::Attention],
            SublayerChoice::Both => &[Sublayer::Attention, Sublayer::Mlp],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteScore {
    pub block: usize,
    pub sublayer: Sublayer,
    /// Mean cosine similarity of the residual stream before and after the sublayer.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub corpus_id: String,
    pub positions: usize,
    pub scores: Vec<SiteScore>,
}

impl ImportanceReport {
    pub fn score(&self, block: usize, sublayer: Sublayer) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.block == block && s.sublayer == sublayer)
            .map(|s| s.score)
    }

    /// Entries by decreasing score, ties by lower block then attention first.
    pub fn ranked(&self) -> Vec<SiteScore> {
        let mut v = self.scores.clone();
        v.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.block.cmp(&b.block))
                .then(a.sublayer.cmp(&b.sublayer))
        });
        v
    }

    /// Tab-separated `site score n` rows with a header line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("site\tscore\tn\n");
        for s in &self.scores {
            let _ = writeln!(
                out,
                "blocks.{}.{}\t{:.6}\t{}",
                s.block,
                s.sublayer.name(),
                s.score,
                self.positions
            );
        }
        out
    }
}

/// `ceil(positions / seq_len)` windows of `seq_len` tokens at seeded random offsets.
pub fn sample_windows(stream: &[usize], positions: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if stream.is_empty() || positions == 0 || seq_len == 0 {
        return Err(Error::EmptySample);
    }
    if stream.len() <= seq_len {
        return Ok(alloc::vec![stream.to_vec()]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = positions.div_ceil(seq_len);
    Ok((0..n)
        .map(|_| {
            let s = rng.random_range(0..=stream.len() - seq_len);
            stream[s..s + seq_len].to_vec()
        })
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = libm::sqrt(aa * bb);
    if denom == 0.0 {
        return if aa == bb { 1.0 } else { 0.0 };
    }
    (ab / denom).clamp(-1.0, 1.0)
}

/// Mean input/output cosine similarity of every sublayer in `choice`, over all
/// positions of `sample` (equal-length windows).
pub fn layer_similarity<M: LanguageModel + ?Sized>(
    model: &M,
    sample: &[Vec<usize>],
    choice: SublayerChoice,
    corpus_id: &str,
) -> Result<ImportanceReport> {
    let cfg = model.config();
    let positions: usize = sample.iter().map(Vec::len).sum();
    if positions == 0 {
        return Err(Error::EmptySample);
    }
    let d = cfg.d_model;
    let kinds = choice.kinds();
    let mut sums = alloc::vec![0.0; cfg.n_layers * kinds.len()];
    for window in sample {
        if window.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let trace = forward_graph(&mut g, cfg, &bound, window, 1, None)?;
        for (l, bt) in trace.blocks.iter().enumerate() {
            for (ki, kind) in kinds.iter().enumerate() {
                let (before, after) = match kind {
                    Sublayer::Attention => (bt.input, bt.after_attn),
                    Sublayer::Mlp => (bt.after_attn, bt.after_mlp),
                };
                let (x, y) = (g.value(before).data(), g.value(after).data());
                let s: f64 = x.chunks(d).zip(y.chunks(d)).map(|(p, q)| cosine(p, q)).sum();
                sums[l * kinds.len() + ki] += s;
            }
        }
    }
    let scores = (0..cfg.n_layers)
        .flat_map(|l| kinds.iter().enumerate().map(move |(ki, &k)| (l, ki, k)))
        .map(|(l, ki, sublayer)| {
            let score = sums[l * kinds.len() + ki] / positions as f64;
            if !score.is_finite() {
                return Err(Error::NonFinite("similarity score"));
            }
            Ok(SiteScore { block: l, sublayer, score })
        })
        .collect::<Result<_>>()?;
    Ok(ImportanceReport { corpus_id: corpus_id.into(), positions, scores })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRequest {
    pub strategy: PlanStrategy,
    pub sublayer: SublayerChoice,
    /// Delta blocks (sequential, alternating) or delta sublayers (similarity).
    pub k: usize,
    pub protected_blocks: Option<BTreeSet<usize>>,
}

fn entries_for(target: usize, anchor: usize, kind: Sublayer) -> impl Iterator<Item = PlanEntry> {
    kind.roles().iter().map(move |&r| PlanEntry {
        target: WeightSite::new(target, r),
        anchor: WeightSite::new(anchor, r),
    })
}

/// Last `len` consecutive eligible blocks, if such a run exists.
fn latest_run(eligible: &[usize], len: usize) -> Option<usize> {
    (0..eligible.len().checked_sub(len - 1)?)
        .rev()
        .find(|&i| eligible[i + len - 1] - eligible[i] == len - 1)
        .map(|i| eligible[i])
}

pub fn build_plan(
    config: &ModelConfig,
    request: &PlanRequest,
    importance: Option<&ImportanceReport>,
) -> Result<SharingPlan> {
    let protected = request
        .protected_blocks
        .clone()
        .unwrap_or_else(|| default_protected(config.n_layers));
    let eligible: Vec<usize> = (0..config.n_layers).filter(|b| !protected.contains(b)).collect();
    let k = request.k;
    let mut entries = Vec::new();
    let kinds = request.sublayer.kinds();
    let too_many = |available| Error::TooManySites { requested: k, available };
    match request.strategy {
        _ if k == 0 && request.strategy != PlanStrategy::Explicit => {}
        PlanStrategy::Sequential => {
            let start = latest_run(&eligible, k + 1).ok_or(too_many(eligible.len().saturating_sub(1)))?;
            for t in start + 1..=start + k {
                for &kind in kinds {
                    entries.extend(entries_for(t, start, kind));
                }
            }
        }
        PlanStrategy::Alternating => {
            let start = latest_run(&eligible, 2 * k).ok_or(too_many(eligible.len() / 2))?;
            for i in 0..k {
                let anchor = start + 2 * i;
                for &kind in kinds {
                    entries.extend(entries_for(anchor + 1, anchor, kind));
                }
            }
        }
        PlanStrategy::Similarity => {
            let report = importance.ok_or(Error::MissingReport)?;
            let lowest = *eligible.first().ok_or(too_many(0))?;
            // The lowest eligible block of each kind always stays an anchor candidate,
            // so every chosen target has a non-target predecessor.
            let candidates: Vec<SiteScore> = report
                .ranked()
                .into_iter()
                .filter(|s| kinds.contains(&s.sublayer))
                .filter(|s| !protected.contains(&s.block) && s.block < config.n_layers)
                .filter(|s| s.block != lowest)
                .collect();
            if candidates.len() < k {
                return Err(too_many(candidates.len()));
            }
            let chosen = &candidates[..k];
            for c in chosen {
                let is_target = |b: usize| chosen.iter().any(|o| o.block == b && o.sublayer == c.sublayer);
                let anchor = eligible
                    .iter()
                    .rev()
                    .copied()
                    .find(|&b| b < c.block && !is_target(b))
                    .expect("lowest eligible block is never a target");
                entries.extend(entries_for(c.block, anchor, c.sublayer));
            }
        }
        PlanStrategy::Explicit => {
            return Err(Error::InvalidPlan("explicit plans are given as entries, not built".into()))
        }
    }
    let plan = SharingPlan::new(request.strategy, protected, entries);
    plan.validate(config)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> ModelConfig {
        ModelConfig { n_layers: n, ..ModelConfig::default() }
    }

    fn req(strategy: PlanStrategy, sublayer: SublayerChoice, k: usize) -> PlanRequest {
        PlanRequest { strategy, sublayer, k, protected_blocks: None }
    }

    #[test]
    fn sequential_twelve_blocks() {
        let p = build_plan(&cfg(12), &req(PlanStrategy::Sequential, SublayerChoice::Mlp, 3), None).unwrap();
        assert_eq!(p.target_blocks(), [7, 8, 9]);
        assert!(p.entries.iter().all(|e| e.anchor.block == 6));
        assert_eq!(p.entries.len(), 9);
    }

    #[test]
    fn alternating_pairs() {
        let p = build_plan(&cfg(12), &req(PlanStrategy::Alternating, SublayerChoice::Both, 3), None).unwrap();
        assert_eq!(p.target_blocks(), [5, 7, 9]);
        assert!(p.entries.iter().all(|e| e.anchor.block + 1 == e.target.block));
        assert_eq!(p.entries.len(), 3 * 7);
    }

    #[test]
    fn k_zero_and_too_large() {
        for s in [PlanStrategy::Sequential, PlanStrategy::Alternating] {
            assert!(build_plan(&cfg(8), &req(s, SublayerChoice::Mlp, 0), None).unwrap().is_empty());
        }
        assert!(matches!(
            build_plan(&cfg(8), &req(PlanStrategy::Sequential, SublayerChoice::Mlp, 5), None),
            Err(Error::TooManySites { .. })
        ));
        assert!(matches!(
            build_plan(&cfg(8), &req(PlanStrategy::Similarity, SublayerChoice::Mlp, 1), None),
            Err(Error::MissingReport)
        ));
    }

    #[test]
    fn similarity_argmax_and_order() {
        let mut scores: Vec<SiteScore> = (0..8)
            .map(|b| SiteScore { block: b, sublayer: Sublayer::Mlp, score: 0.5 })
            .collect();
        scores[4].score = 1.0;
        let mut report = ImportanceReport { corpus_id: "t".into(), positions: 1, scores };
        let r = req(PlanStrategy::Similarity, SublayerChoice::Mlp, 1);
        let p = build_plan(&cfg(8), &r, Some(&report)).unwrap();
        assert_eq!(p.target_blocks(), [4]);
        assert_eq!(p.entries[0].anchor.block, 3);
        report.scores.reverse();
        assert_eq!(build_plan(&cfg(8), &r, Some(&report)).unwrap(), p);
        // ties go to the lower block
        let r2 = req(PlanStrategy::Similarity, SublayerChoice::Mlp, 2);
        let p2 = build_plan(&cfg(8), &r2, Some(&report)).unwrap();
        assert_eq!(p2.target_blocks(), [2, 4]);
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    }
}
