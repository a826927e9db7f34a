//! Mask generation: the three patch strategies, the sigmoid soft mask,
//! hardening, and the vulnerability-ranked reconstruction order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Cell, Mask, PatchGrid, RealMap, SoftMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    Continuous,
    Scattered,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::Random,
        StrategyKind::Continuous,
        StrategyKind::Scattered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Continuous => "continuous",
            StrategyKind::Scattered => "scattered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStrategy {
    pub kind: StrategyKind,
    pub beta: f64,
}

impl MaskStrategy {
    pub fn new(kind: StrategyKind, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self { kind, beta })
    }

    pub fn create(&self, grid: &PatchGrid, rng: &mut Rng) -> Result<Mask> {
        match self.kind {
            StrategyKind::Random => create_random_mask(grid, self.beta, rng),
            StrategyKind::Continuous => create_continuous_mask(grid, self.beta, rng),
            StrategyKind::Scattered => create_scattered_mask(grid, self.beta, rng),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(invalid("beta", format!("{beta} is outside (0, 1)")))
    }
}

/// `round(beta * total)` with ties rounded up.
pub fn hidden_target(beta: f64, total: usize) -> usize {
    ((beta * total as f64) + 0.5).floor() as usize
}

pub fn create_random_mask(grid: &PatchGrid, beta: f64, rng: &mut Rng) -> Result<Mask> {
    check_beta(beta)?;
    let k = hidden_target(beta, grid.total());
    Ok(Mask::from_grid(grid, rng.sample_indices(grid.total(), k)))
}

/// Grows a 4-connected hidden region from a random seed patch, each step
/// hiding a uniformly chosen patch of the visible frontier.
pub fn create_continuous_mask(grid: &PatchGrid, beta: f64, rng: &mut Rng) -> Result<Mask> {
    check_beta(beta)?;
    let k = hidden_target(beta, grid.total());
    let mut hidden = vec![false; grid.total()];
    let mut frontier = BTreeSet::new();
    if k > 0 {
        let start = rng.index(grid.total());
        hidden[start] = true;
        frontier.extend(grid.neighbors(start));
    }
    for _ in 1..k {
        let pick = *frontier
            .iter()
            .nth(rng.index(frontier.len()))
            .expect("frontier is non-empty while visible cells remain");
        frontier.remove(&pick);
        hidden[pick] = true;
        frontier.extend(grid.neighbors(pick).filter(|n| !hidden[*n]));
    }
    Ok(Mask::from_grid(
        grid,
        hidden.iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| i),
    ))
}

const SCATTER_RESTARTS: usize = 256;
const SCATTER_MIX_STEPS: usize = 2_000;

/// Hidden patches form a 4-adjacency independent set.
///
/// Sequential uniform rejection with dead-end restarts is tried first. Dense
/// targets close to the independence number almost never survive that, so
/// after the restart budget the sampler starts from a random subset of a
/// maximum colour class and decorrelates it with random feasible moves.
pub fn create_scattered_mask(grid: &PatchGrid, beta: f64, rng: &mut Rng) -> Result<Mask> {
    check_beta(beta)?;
    let k = hidden_target(beta, grid.total());
    let max = grid.max_independent();
    if k > max {
        return Err(Error::InfeasibleScatter {
            beta,
            needed: k,
            max,
        });
    }
    for _ in 0..SCATTER_RESTARTS {
        if let Some(set) = scatter_attempt(grid, k, rng) {
            return Ok(Mask::from_grid(grid, set));
        }
    }
    let set = scatter_from_colour_class(grid, k, rng);
    debug_assert!(is_independent(grid, &set));
    if set.len() != k {
        return Err(Error::SamplingExhausted {
            attempts: SCATTER_RESTARTS,
        });
    }
    Ok(Mask::from_grid(grid, set))
}

fn scatter_attempt(grid: &PatchGrid, k: usize, rng: &mut Rng) -> Option<Vec<usize>> {
    let mut available: Vec<bool> = vec![true; grid.total()];
    let mut candidates: Vec<usize> = (0..grid.total()).collect();
    let mut chosen = Vec::with_capacity(k);
    while chosen.len() < k {
        candidates.retain(|c| available[*c]);
        if candidates.is_empty() {
            return None;
        }
        let pick = candidates[rng.index(candidates.len())];
        chosen.push(pick);
        available[pick] = false;
        for n in grid.neighbors(pick) {
            available[n] = false;
        }
    }
    Some(chosen)
}

fn scatter_from_colour_class(grid: &PatchGrid, k: usize, rng: &mut Rng) -> Vec<usize> {
    let class = |parity: usize| -> Vec<usize> {
        (0..grid.total())
            .filter(|i| (i % grid.cols + i / grid.cols) % 2 == parity)
            .collect()
    };
    let (even, odd) = (class(0), class(1));
    let pool = match (even.len() >= k, odd.len() >= k) {
        (true, true) => {
            if rng.coin() {
                even
            } else {
                odd
            }
        }
        (true, false) => even,
        _ => odd,
    };
    let mut in_set = vec![false; grid.total()];
    let mut set: Vec<usize> = rng
        .sample_indices(pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    for s in &set {
        in_set[*s] = true;
    }
    // random relocations that keep independence
    for _ in 0..SCATTER_MIX_STEPS {
        if set.is_empty() {
            break;
        }
        let slot = rng.index(set.len());
        let target = rng.index(grid.total());
        let from = set[slot];
        if in_set[target] {
            continue;
        }
        let blocked = grid
            .neighbors(target)
            .any(|n| n != from && in_set[n]);
        if !blocked && target != from {
            in_set[from] = false;
            in_set[target] = true;
            set[slot] = target;
        }
    }
    set
}

pub(crate) fn is_independent(grid: &PatchGrid, set: &[usize]) -> bool {
    let mut in_set = vec![false; grid.total()];
    for s in set {
        in_set[*s] = true;
    }
    set.iter()
        .all(|s| grid.neighbors(*s).all(|n| !in_set[n]))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `1 / (1 + exp(-gamma * logit))` element-wise.
pub fn soft_mask(logits: &RealMap, gamma: f64) -> Result<SoftMask> {
    if !(gamma > 0.0) {
        return Err(invalid("gamma", format!("{gamma} must be positive")));
    }
    let values = logits.values.iter().map(|l| sigmoid(gamma * l)).collect();
    SoftMask::new(logits.width, logits.height, values)
}

/// Values strictly above `threshold` become visible; ties are hidden.
pub fn harden(soft: &SoftMask, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid("threshold", format!("{threshold} is outside (0, 1)")));
    }
    Mask::new(
        soft.width(),
        soft.height(),
        crate::tensor::Granularity::Pixel,
        soft.values().iter().map(|v| (*v > threshold) as u8).collect(),
    )
}

/// Hidden cells ordered for reconstruction: first element first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionOrder(pub Vec<Cell>);

impl ReconstructionOrder {
    pub fn cells(&self) -> &[Cell] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reversed(&self) -> ReconstructionOrder {
        ReconstructionOrder(self.0.iter().rev().copied().collect())
    }

    /// Content hash of the sequence, for provenance.
    pub fn digest(&self) -> String {
        let bytes: Vec<u8> = self
            .0
            .iter()
            .flat_map(|c| [(c.x as u32).to_le_bytes(), (c.y as u32).to_le_bytes()].concat())
            .collect();
        crate::checkpoint::sha256_hex(&bytes)
    }
}

/// Hidden cells by score, highest first, so the lowest-score cell is
/// reconstructed last. Equal scores keep row-major order.
pub fn reconstruction_order(scores: &RealMap, mask: &Mask) -> Result<ReconstructionOrder> {
    if (scores.width, scores.height) != (mask.width(), mask.height()) {
        return Err(Error::ShapeMismatch(format!(
            "scores {}x{} vs mask {}x{}",
            scores.width,
            scores.height,
            mask.width(),
            mask.height()
        )));
    }
    if scores.values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidValue("NaN score".into()));
    }
    let mut cells = mask.hidden_cells();
    // stable sort keeps the row-major order of hidden_cells for ties
    cells.sort_by(|a, b| scores.get(b.x, b.y).total_cmp(&scores.get(a.x, a.y)));
    Ok(ReconstructionOrder(cells))
}
