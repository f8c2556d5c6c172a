//! Per-batch loss masks that take likely false negatives and duplicate texts
//! out of the contrastive normalizer.

use crate::data::{EmbeddingMatrix, PairDataset};
use crate::pack::BatchPlan;
use crate::surrogate::surrogate_score;
use crate::{par, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    ExactText,
    ExactId,
    Off,
}

impl std::str::FromStr for CollisionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_text" => Ok(Self::ExactText),
            "exact_id" => Ok(Self::ExactId),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!(
                "unknown collision mode {s:?} (exact_text|exact_id|off)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Absolute margin in surrogate-score units.
    pub epsilon: f64,
    pub enabled: bool,
    pub collision_mode: CollisionMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            enabled: true,
            collision_mode: CollisionMode::ExactText,
        }
    }
}

impl FilterConfig {
    pub fn disabled() -> Self {
        Self {
            epsilon: 0.0,
            enabled: false,
            collision_mode: CollisionMode::Off,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() {
            return Err(Error::Config(format!("filter.epsilon must be finite, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// `B×B` mask, query rows by document columns; `true` removes the cell from
/// the normalizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub size: usize,
    pub mask: Vec<bool>,
    pub masked_count: usize,
}

impl LossMask {
    pub fn none(size: usize) -> Self {
        Self {
            size,
            mask: vec![false; size * size],
            masked_count: 0,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.size + col]
    }

    fn set(&mut self, row: usize, col: usize) {
        if row != col && !self.mask[row * self.size + col] {
            self.mask[row * self.size + col] = true;
            self.masked_count += 1;
        }
    }
}

/// Candidates (by position in `scores`) scoring at least `epsilon` above gold.
pub fn equivalence_class(scores: &[f64], gold: usize, epsilon: f64) -> BTreeSet<usize> {
    let g = scores[gold];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != gold && s >= g + epsilon)
        .map(|(j, _)| j)
        .collect()
}

fn id_key(id: &str) -> &str {
    let base = id.rsplit_once(':').map_or(id, |(b, _)| b);
    base.split_once('#').map_or(base, |(b, _)| b)
}

/// In-batch `(row, col)` cells, `row ≠ col`, whose documents or queries match.
///
/// `ExactText` compares the texts without task prefixes. `ExactId` compares
/// record ids with the role suffix and any `#n` duplicate counter removed, so
/// `doc7#1:d` and `doc7#2:d` collide.
pub fn detect_collisions(batch: &[usize], dataset: &PairDataset, mode: CollisionMode) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    if mode == CollisionMode::Off {
        return out;
    }
    let key = |i: usize, doc: bool| -> &str {
        let p = &dataset.pairs[batch[i]];
        let r = if doc { &p.document } else { &p.query };
        match mode {
            CollisionMode::ExactText => r.text.as_str(),
            _ => id_key(&r.id),
        }
    };
    for i in 0..batch.len() {
        for j in 0..batch.len() {
            if i != j && (key(i, true) == key(j, true) || key(i, false) == key(j, false)) {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Union of equivalence-class and collision cells; the diagonal is never masked.
pub fn build_loss_mask(
    batch: &[usize],
    dataset: &PairDataset,
    phi: &EmbeddingMatrix,
    psi: &EmbeddingMatrix,
    cfg: &FilterConfig,
) -> Result<LossMask> {
    let b = batch.len();
    let mut mask = LossMask::none(b);
    if cfg.enabled {
        for i in 0..b {
            let q = psi.row(batch[i]);
            let scores = batch
                .iter()
                .map(|&j| surrogate_score(q, phi.row(j)))
                .collect::<Result<Vec<f64>>>()?;
            for j in equivalence_class(&scores, i, cfg.epsilon) {
                mask.set(i, j);
            }
        }
    }
    for (i, j) in detect_collisions(batch, dataset, cfg.collision_mode) {
        mask.set(i, j);
    }
    Ok(mask)
}

/// One mask per batch of the plan.
pub fn build_plan_masks(
    plan: &BatchPlan,
    dataset: &PairDataset,
    phi: &EmbeddingMatrix,
    psi: &EmbeddingMatrix,
    cfg: &FilterConfig,
) -> Result<Vec<LossMask>> {
    cfg.validate()?;
    par::map(&plan.batches, |bt| build_loss_mask(&bt.pair_indices, dataset, phi, psi, cfg))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub batches: usize,
    pub mean_masked_per_row: f64,
    pub collision_cells: usize,
}

pub fn mask_stats(plan: &BatchPlan, masks: &[LossMask], dataset: &PairDataset, mode: CollisionMode) -> MaskStats {
    let rows: usize = masks.iter().map(|m| m.size).sum();
    let masked: usize = masks.iter().map(|m| m.masked_count).sum();
    let collision_cells = plan
        .batches
        .iter()
        .map(|b| detect_collisions(&b.pair_indices, dataset, mode).len())
        .sum();
    MaskStats {
        batches: masks.len(),
        mean_masked_per_row: if rows == 0 { 0.0 } else { masked as f64 / rows as f64 },
        collision_cells,
    }
}
