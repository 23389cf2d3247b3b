//! Turning a size budget into per-layer ranks.
//!
//! Every layer keeps at least one basis, so at most `ΣR − L` bases can be
//! dropped. Equal scores are broken by `(layer, basis)` ascending.

use crate::error::{Error, Result};
use crate::network::NetworkModel;
use crate::tensor::SvdFactors;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Global ascending sort of singular values.
    #[default]
    Sv,
    /// Per-layer remaining-energy ratio `Σ_{k≥i} σ_k² / Σ_k σ_k²`.
    Energy,
    /// Same rank ratio in every layer.
    Uniform,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Sv => "sv",
            Criterion::Energy => "energy",
            Criterion::Uniform => "uniform",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sv" => Ok(Criterion::Sv),
            "energy" => Ok(Criterion::Energy),
            "uniform" => Ok(Criterion::Uniform),
            _ => Err(Error::InvalidInput(format!(
                "unknown criterion {s:?} (expected sv, energy or uniform)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Budget {
    /// Fraction `Z ∈ (0, 1]` of all bases to keep.
    RankRatio(f64),
    /// Maximum parameter count.
    Params(u64),
    /// Maximum multiply-accumulate count.
    Macs(u64),
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::RankRatio(z) => write!(f, "z={z}"),
            Budget::Params(p) => write!(f, "params={p}"),
            Budget::Macs(m) => write!(f, "macs={m}"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// `z=<ratio>`, `params=<count>` or `macs=<count>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidBudget(format!("cannot parse budget {s:?}"));
        let (key, value) = s.split_once('=').ok_or_else(bad)?;
        let count = || -> Result<u64> {
            let v: f64 = value.trim().parse().map_err(|_| bad())?;
            if v.is_nan() || v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
                return Err(bad());
            }
            Ok(v as u64)
        };
        let budget = match key.trim() {
            "z" => Budget::RankRatio(value.trim().parse().map_err(|_| bad())?),
            "params" => Budget::Params(count()?),
            "macs" => Budget::Macs(count()?),
            _ => return Err(bad()),
        };
        budget.validate()?;
        Ok(budget)
    }
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if let Budget::RankRatio(z) = *self {
            if !(z > 0.0 && z <= 1.0) {
                return Err(Error::InvalidBudget(format!(
                    "rank ratio must lie in (0, 1], got {z}"
                )));
            }
        }
        Ok(())
    }
}

/// Selection score of one basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisEntry {
    pub layer: usize,
    pub basis: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankAssignment {
    pub criterion: Criterion,
    pub budget: Option<Budget>,
    pub ranks: Vec<usize>,
    /// `ΣR − Σr`
    pub dropped: usize,
}

/// Shape data needed for parameter and MAC accounting of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Stored weight matrix is `m × n`.
    pub m: usize,
    pub n: usize,
    /// Output positions `H·W` before pooling; 1 for dense layers.
    pub positions: usize,
}

impl LayerCost {
    pub fn of_model(model: &NetworkModel) -> Vec<LayerCost> {
        model
            .layers()
            .iter()
            .map(|l| {
                let (m, n) = l.weight_shape();
                let (h, w) = l.output_hw();
                LayerCost {
                    m,
                    n,
                    positions: h * w,
                }
            })
            .collect()
    }
}

/// `(m + n)·r`, the size of the two factors of a rank-`r` layer.
pub fn factorized_params(m: usize, n: usize, r: usize) -> u64 {
    ((m + n) * r) as u64
}

/// Deployed size: factorized below the break-even rank `mn/(m+n)`, dense
/// `m·n` otherwise.
pub fn layer_params(m: usize, n: usize, r: usize) -> u64 {
    if r * (m + n) < m * n {
        factorized_params(m, n, r)
    } else {
        (m * n) as u64
    }
}

/// Total `(params, MACs)` of a rank assignment; weights only.
pub fn count_with(costs: &[LayerCost], ranks: &[usize]) -> (u64, u64) {
    costs.iter().zip(ranks).fold((0, 0), |(p, m), (c, &r)| {
        let lp = layer_params(c.m, c.n, r);
        (p + lp, m + lp * c.positions as u64)
    })
}

pub fn count_params_macs(model: &NetworkModel, ranks: &[usize]) -> Result<(u64, u64)> {
    model.check_ranks(ranks)?;
    Ok(count_with(&LayerCost::of_model(model), ranks))
}

/// Singular values and layer shapes of a model, frozen for selection.
#[derive(Clone, Debug, PartialEq)]
pub struct RankSelector {
    singular: Vec<Vec<f64>>,
    costs: Vec<LayerCost>,
}

impl RankSelector {
    pub fn new(singular: Vec<Vec<f64>>, costs: Vec<LayerCost>) -> Result<Self> {
        if singular.is_empty() || singular.len() != costs.len() {
            return Err(Error::InvalidInput(format!(
                "{} spectra for {} layers",
                singular.len(),
                costs.len()
            )));
        }
        for (i, (s, c)) in singular.iter().zip(&costs).enumerate() {
            if s.len() != c.m.min(c.n) || s.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "layer {i}: {} singular values for a {}x{} weight",
                    s.len(),
                    c.m,
                    c.n
                )));
            }
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "layer {i}: singular values must be finite and non-negative"
                )));
            }
        }
        Ok(Self { singular, costs })
    }

    pub fn from_model(model: &NetworkModel) -> Result<Self> {
        Self::from_spectra(model, &model.spectra()?)
    }

    pub fn from_spectra(model: &NetworkModel, spectra: &[SvdFactors]) -> Result<Self> {
        Self::new(
            spectra.iter().map(|f| f.s.clone()).collect(),
            LayerCost::of_model(model),
        )
    }

    pub fn singular_values(&self) -> &[Vec<f64>] {
        &self.singular
    }

    pub fn costs(&self) -> &[LayerCost] {
        &self.costs
    }

    pub fn full_ranks(&self) -> Vec<usize> {
        self.singular.iter().map(Vec::len).collect()
    }

    pub fn total_rank(&self) -> usize {
        self.singular.iter().map(Vec::len).sum()
    }

    /// Largest droppable count, `ΣR − L`.
    pub fn max_drop(&self) -> usize {
        self.total_rank() - self.singular.len()
    }

    pub fn cost(&self, ranks: &[usize]) -> (u64, u64) {
        count_with(&self.costs, ranks)
    }

    /// Scores of every basis; higher is more important.
    pub fn scores(&self, criterion: Criterion) -> Result<Vec<BasisEntry>> {
        let mut out = Vec::with_capacity(self.total_rank());
        for (layer, s) in self.singular.iter().enumerate() {
            match criterion {
                Criterion::Sv => {
                    out.extend(s.iter().enumerate().map(|(basis, &score)| BasisEntry {
                        layer,
                        basis,
                        score,
                    }))
                }
                Criterion::Energy => {
                    let total: f64 = s.iter().map(|v| v * v).sum();
                    let mut tail = total;
                    for (basis, v) in s.iter().enumerate() {
                        let score = if total > 0.0 { tail / total } else { 0.0 };
                        out.push(BasisEntry {
                            layer,
                            basis,
                            score,
                        });
                        tail = (tail - v * v).max(0.0);
                    }
                }
                Criterion::Uniform => {
                    return Err(Error::InvalidInput(
                        "the uniform criterion does not score bases".into(),
                    ))
                }
            }
        }
        Ok(out)
    }

    /// Droppable bases in drop order: ascending score, then `(layer, basis)`.
    /// The leading basis of every layer is never a candidate.
    pub fn drop_order(&self, criterion: Criterion) -> Result<Vec<BasisEntry>> {
        let mut entries: Vec<BasisEntry> = self
            .scores(criterion)?
            .into_iter()
            .filter(|e| e.basis > 0)
            .collect();
        entries.sort_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then(a.layer.cmp(&b.layer))
                .then(a.basis.cmp(&b.basis))
        });
        Ok(entries)
    }

    fn drop_ranks(&self, order: &[BasisEntry], d: usize) -> Vec<usize> {
        let mut ranks = self.full_ranks();
        for e in &order[..d] {
            ranks[e.layer] -= 1;
        }
        ranks
    }

    fn check_d(&self, d: usize) -> Result<()> {
        if d > self.max_drop() {
            return Err(Error::InvalidBudget(format!(
                "cannot drop {d} bases: at most {} can go while keeping one per layer",
                self.max_drop()
            )));
        }
        Ok(())
    }

    /// Drop `d` bases under a scoring criterion (sv or energy).
    pub fn select_by_drop(&self, criterion: Criterion, d: usize) -> Result<RankAssignment> {
        self.check_d(d)?;
        let order = self.drop_order(criterion)?;
        Ok(RankAssignment {
            criterion,
            budget: None,
            ranks: self.drop_ranks(&order, d),
            dropped: d,
        })
    }

    pub fn select_sv(&self, d: usize) -> Result<RankAssignment> {
        self.select_by_drop(Criterion::Sv, d)
    }

    pub fn select_energy(&self, d: usize) -> Result<RankAssignment> {
        self.select_by_drop(Criterion::Energy, d)
    }

    /// `r_ℓ = max(1, round(z·R_ℓ))`.
    pub fn select_uniform(&self, z: f64) -> Result<RankAssignment> {
        Budget::RankRatio(z).validate()?;
        let ranks = uniform_ranks(&self.full_ranks(), z);
        Ok(RankAssignment {
            criterion: Criterion::Uniform,
            budget: None,
            dropped: self.total_rank() - ranks.iter().sum::<usize>(),
            ranks,
        })
    }

    /// Number of bases to drop for a budget. Rank ratios map to
    /// `round((1−Z)·ΣR)`, capped at [`RankSelector::max_drop`]; size targets
    /// give the smallest `d` whose assignment fits.
    pub fn budget_to_d(&self, criterion: Criterion, budget: Budget) -> Result<usize> {
        budget.validate()?;
        if criterion == Criterion::Uniform {
            return Ok(self.select(criterion, budget)?.dropped);
        }
        match budget {
            Budget::RankRatio(z) => {
                let d = ((1.0 - z) * self.total_rank() as f64).round() as usize;
                Ok(d.min(self.max_drop()))
            }
            Budget::Params(_) | Budget::Macs(_) => {
                let order = self.drop_order(criterion)?;
                let fits = |d: usize| self.fits(&self.drop_ranks(&order, d), budget);
                if !fits(self.max_drop()) {
                    return Err(self.infeasible(budget));
                }
                // cost is non-increasing in d
                let (mut lo, mut hi) = (0, self.max_drop());
                while lo < hi {
                    let mid = (lo + hi) / 2;
                    if fits(mid) {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                Ok(lo)
            }
        }
    }

    pub fn select(&self, criterion: Criterion, budget: Budget) -> Result<RankAssignment> {
        budget.validate()?;
        let mut out = match (criterion, budget) {
            (Criterion::Uniform, Budget::RankRatio(z)) => self.select_uniform(z)?,
            (Criterion::Uniform, _) => self.uniform_for_target(budget)?,
            (c, b) => self.select_by_drop(c, self.budget_to_d(c, b)?)?,
        };
        out.budget = Some(budget);
        Ok(out)
    }

    fn fits(&self, ranks: &[usize], budget: Budget) -> bool {
        let (p, m) = self.cost(ranks);
        match budget {
            Budget::Params(t) => p <= t,
            Budget::Macs(t) => m <= t,
            Budget::RankRatio(_) => true,
        }
    }

    fn infeasible(&self, budget: Budget) -> Error {
        let (p, m) = self.cost(&vec![1; self.singular.len()]);
        Error::InvalidBudget(format!(
            "{budget} is below the smallest reachable model ({p} params, {m} MACs at rank 1 everywhere)"
        ))
    }

    /// Largest uniform ratio whose assignment fits a size target.
    fn uniform_for_target(&self, budget: Budget) -> Result<RankAssignment> {
        let full = self.full_ranks();
        // The rank vector only changes where some z·R_ℓ crosses k + ½, so the
        // midpoints between consecutive crossings cover every reachable vector.
        let mut cuts: Vec<f64> = full
            .iter()
            .flat_map(|&r| (0..r).map(move |k| (k as f64 + 0.5) / r as f64))
            .filter(|&z| z < 1.0)
            .collect();
        cuts.push(0.0);
        cuts.push(1.0);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut candidates: Vec<f64> = cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        candidates.push(1.0);
        for &z in candidates.iter().rev() {
            let ranks = uniform_ranks(&full, z);
            if self.fits(&ranks, budget) {
                return Ok(RankAssignment {
                    criterion: Criterion::Uniform,
                    budget: Some(budget),
                    dropped: self.total_rank() - ranks.iter().sum::<usize>(),
                    ranks,
                });
            }
        }
        Err(self.infeasible(budget))
    }
}

fn uniform_ranks(full: &[usize], z: f64) -> Vec<usize> {
    full.iter()
        .map(|&r| ((z * r as f64).round() as usize).clamp(1, r))
        .collect()
}
