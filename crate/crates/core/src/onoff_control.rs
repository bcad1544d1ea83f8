//! Weight-ordered on/off search over RF chains and phase shifters.
//!
//! Elements with the smallest beamforming weight are switched off first. Every
//! trial configuration is re-optimised through a caller supplied callback and
//! the configuration with the lowest exact total power wins. The starting
//! configuration is always a candidate, so a search never makes things worse.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::HybridDesign;
use crate::linalg::{CMatrix, C64};

/// Outcome of re-optimising one configuration.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub design: HybridDesign,
    /// Exact total power in watts.
    pub total_w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStage {
    Rf,
    Ps,
}

/// One evaluated trial, kept for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub stage: SearchStage,
    /// Number of elements switched off on top of the starting configuration.
    pub off: usize,
    /// Exact total power, `None` when the configuration was infeasible.
    pub total_w: Option<f64>,
}

/// Which prefix sizes the phase-shifter search evaluates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsSchedule {
    /// Powers of two, the count of zero-weight elements, then bisection around the best size.
    #[default]
    Geometric,
    /// Every prefix size.
    Exhaustive,
}

/// On/off state of the analog network together with the weights that ordered it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnOffMask {
    pub rf_on: Vec<bool>,
    /// `ps_on[i][j]`: element between antenna `i` and chain `j`.
    pub ps_on: Vec<Vec<bool>>,
    /// Per-chain digital power `v_n` in watts.
    pub rf_weights: Vec<f64>,
    /// `|F̄_ij|` of the pre-projection sample.
    pub ps_weights: Vec<Vec<f64>>,
}

impl OnOffMask {
    pub fn from_design(design: &HybridDesign, ps_weights: Option<&DMatrix<f64>>) -> Self {
        let n_tx = design.n_tx();
        let n_rf = design.n_rf();
        Self {
            rf_on: design.rf_on(),
            ps_on: design.ps_grid(),
            rf_weights: design.chain_power(),
            ps_weights: (0..n_tx)
                .map(|i| (0..n_rf).map(|j| ps_weights.map_or(design.f[(i, j)].norm(), |w| w[(i, j)])).collect())
                .collect(),
        }
    }

    /// Rows are antennas, columns are RF chains; `1` is on.
    pub fn to_grid(&self) -> String {
        let mut out = String::new();
        for row in &self.ps_on {
            out.extend(row.iter().map(|&on| if on { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }

    /// Parse a grid written by [`OnOffMask::to_grid`]; weights are left empty.
    pub fn from_grid(text: &str) -> Result<Self, String> {
        let ps_on: Vec<Vec<bool>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .chars()
                    .map(|c| match c {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        other => Err(format!("unexpected character {other:?} in mask grid")),
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        let n_rf = ps_on.first().map_or(0, |r| r.len());
        if ps_on.iter().any(|r| r.len() != n_rf) {
            return Err("mask grid rows have different lengths".into());
        }
        let rf_on = (0..n_rf).map(|j| ps_on.iter().any(|r| r[j])).collect();
        Ok(Self { rf_on, ps_on, rf_weights: Vec::new(), ps_weights: Vec::new() })
    }

    pub fn ps_off_count(&self) -> usize {
        self.ps_on.iter().flatten().filter(|&&on| !on).count()
    }

    pub fn rf_off_count(&self) -> usize {
        self.rf_on.iter().filter(|&&on| !on).count()
    }

    /// Zero the entries of `f` that this mask switches off.
    pub fn apply(&self, f: &CMatrix) -> CMatrix {
        CMatrix::from_fn(f.nrows(), f.ncols(), |i, j| {
            if self.ps_on[i][j] && self.rf_on[j] {
                f[(i, j)]
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }
}

impl fmt::Display for OnOffMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_grid())
    }
}

fn active_chains(f: &CMatrix) -> usize {
    (0..f.ncols()).filter(|&j| f.column(j).iter().any(|z| z.norm() != 0.0)).count()
}

/// Switch off the weakest RF chains, one more per trial, down to `k_min` active chains.
pub fn rf_onoff_search<F>(baseline: &TrialOutcome, k_min: usize, mut reopt: F, log: &mut Vec<CandidateRecord>) -> TrialOutcome
where
    F: FnMut(&CMatrix) -> Option<TrialOutcome>,
{
    let f0 = &baseline.design.f;
    let v = baseline.design.chain_power();
    let mut order: Vec<usize> = baseline.design.rf_on().iter().enumerate().filter(|(_, &on)| on).map(|(j, _)| j).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut best = baseline.clone();
    let max_off = order.len().saturating_sub(k_min.max(1));
    for t in 1..=max_off {
        let mut f = f0.clone();
        for &j in &order[..t] {
            f.column_mut(j).fill(C64::new(0.0, 0.0));
        }
        let out = reopt(&f);
        log.push(CandidateRecord { stage: SearchStage::Rf, off: t, total_w: out.as_ref().map(|o| o.total_w) });
        if let Some(o) = out {
            if o.total_w < best.total_w {
                best = o;
            }
        }
    }
    best
}

/// Prefix sizes tried before refinement.
fn initial_sizes(schedule: PsSchedule, max_off: usize, zero_count: usize) -> Vec<usize> {
    match schedule {
        PsSchedule::Exhaustive => (1..=max_off).collect(),
        PsSchedule::Geometric => {
            let mut sizes: Vec<usize> = std::iter::successors(Some(1usize), |s| s.checked_mul(2)).take_while(|&s| s < max_off).collect();
            sizes.push(max_off);
            if zero_count > 0 && zero_count <= max_off {
                sizes.push(zero_count);
            }
            sizes.retain(|&s| s >= 1);
            sizes.sort_unstable();
            sizes.dedup();
            sizes
        }
    }
}

/// Weights at or below this are treated as zero when counting zero-weight elements.
pub const ZERO_WEIGHT_TOL: f64 = 1e-6;

/// Switch off the phase shifters with the smallest weights `|F̄_ij|`.
///
/// Prefix sizes follow `schedule`; the geometric schedule refines by bisection
/// around the best size found so far. Configurations leaving fewer than `k_min`
/// active chains are skipped without a solve.
pub fn ps_onoff_search<F>(
    baseline: &TrialOutcome,
    weights: &DMatrix<f64>,
    schedule: PsSchedule,
    k_min: usize,
    mut reopt: F,
    log: &mut Vec<CandidateRecord>,
) -> TrialOutcome
where
    F: FnMut(&CMatrix) -> Option<TrialOutcome>,
{
    let f0 = &baseline.design.f;
    let n_rf = f0.ncols();
    let mut order: Vec<(usize, usize)> = (0..f0.nrows())
        .flat_map(|i| (0..n_rf).map(move |j| (i, j)))
        .filter(|&(i, j)| f0[(i, j)].norm() != 0.0)
        .collect();
    // Stable sort keeps index order among equal weights.
    order.sort_by(|a, b| weights[*a].total_cmp(&weights[*b]));
    let max_off = order.len().saturating_sub(k_min.max(1));
    if max_off == 0 {
        return baseline.clone();
    }
    let zero_count = order.iter().filter(|&&ij| weights[ij] <= ZERO_WEIGHT_TOL * weights.max().max(f64::MIN_POSITIVE)).count();

    let mut results: BTreeMap<usize, Option<f64>> = BTreeMap::new();
    results.insert(0, Some(baseline.total_w));
    let mut best = baseline.clone();
    let mut best_size = 0;
    let mut eval = |t: usize, best: &mut TrialOutcome, best_size: &mut usize, results: &mut BTreeMap<usize, Option<f64>>| {
        if results.contains_key(&t) {
            return;
        }
        let mut f = f0.clone();
        for &(i, j) in &order[..t] {
            f[(i, j)] = C64::new(0.0, 0.0);
        }
        let out = if active_chains(&f) < k_min.max(1) { None } else { reopt(&f) };
        let total = out.as_ref().map(|o| o.total_w);
        log.push(CandidateRecord { stage: SearchStage::Ps, off: t, total_w: total });
        results.insert(t, total);
        if let Some(o) = out {
            if o.total_w < best.total_w {
                *best = o;
                *best_size = t;
            }
        }
    };

    for t in initial_sizes(schedule, max_off, zero_count) {
        eval(t, &mut best, &mut best_size, &mut results);
    }
    if schedule == PsSchedule::Geometric {
        loop {
            let below = results.range(..best_size).next_back().map(|(&k, _)| k);
            let above = results.range(best_size + 1..).next().map(|(&k, _)| k);
            let mut fresh = Vec::new();
            if let Some(lo) = below {
                let mid = (lo + best_size) / 2;
                if mid > lo && !results.contains_key(&mid) {
                    fresh.push(mid);
                }
            }
            if let Some(hi) = above {
                let mid = (best_size + hi).div_ceil(2);
                if mid < hi && !results.contains_key(&mid) {
                    fresh.push(mid);
                }
            }
            if fresh.is_empty() {
                break;
            }
            for t in fresh {
                eval(t, &mut best, &mut best_size, &mut results);
            }
        }
    }
    best
}
