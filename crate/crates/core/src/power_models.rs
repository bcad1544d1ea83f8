//! Power-consumption and energy-harvesting models, in exact and relaxed form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::HybridDesign;
use crate::scenario::{HardwareConstants, Scenario};

/// Powers above this many watts count as "on".
pub const ACTIVATION_TOL: f64 = 1e-9;

/// Relative slack allowed on the per-antenna limit before it counts as a violation.
pub const ANTENNA_LIMIT_RTOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum PowerError {
    #[error("negative power {value:e} W at index {index}")]
    NegativePower { index: usize, value: f64 },
    #[error("antenna {index} radiates {power:e} W above its {limit:e} W limit")]
    AntennaLimit { index: usize, power: f64, limit: f64 },
    #[error("harvested target {gamma:e} W is not below the saturation level {m:e} W")]
    SaturationUnreachable { gamma: f64, m: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerBreakdown {
    pub p_pa: f64,
    pub p_rf: f64,
    pub p_ps: f64,
    pub p_sw: f64,
    pub p_static: f64,
    pub total: f64,
}

impl PowerBreakdown {
    pub fn new(p_pa: f64, p_rf: f64, p_ps: f64, p_sw: f64, p_static: f64) -> Self {
        let total = p_pa + p_rf + p_ps + p_sw + p_static;
        Self { p_pa, p_rf, p_ps, p_sw, p_static, total }
    }

    pub const CSV_HEADER: &'static str = "p_pa_w,p_rf_w,p_ps_w,p_sw_w,p_static_w,total_w";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.p_pa, self.p_rf, self.p_ps, self.p_sw, self.p_static, self.total
        )
    }
}

fn clean(values: &[f64], scale: f64) -> Result<Vec<f64>, PowerError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if v >= 0.0 {
                Ok(v)
            } else if v > -1e-12 * scale.max(1.0) {
                Ok(0.0)
            } else {
                Err(PowerError::NegativePower { index, value: v })
            }
        })
        .collect()
}

/// Power drawn by one amplifier delivering `p_out`.
pub fn pa_single(p_out: f64, hw: &HardwareConstants) -> f64 {
    if p_out <= 0.0 {
        return 0.0;
    }
    hw.p_ant_max.powf(hw.beta_pa) * p_out.powf(1.0 - hw.beta_pa) / hw.eta_max
}

/// Total amplifier draw for the given per-antenna output powers.
pub fn pa_power(per_antenna_out: &[f64], hw: &HardwareConstants) -> Result<f64, PowerError> {
    let p = clean(per_antenna_out, hw.p_ant_max)?;
    Ok(p.iter().map(|&x| pa_single(x, hw)).sum())
}

/// Smooth surrogate of the on/off indicator: `log(1+x/ε)/log(1+1/ε)`.
pub fn indicator_relax(x: f64, eps: f64) -> Result<f64, PowerError> {
    if !(eps > 0.0) {
        return Err(PowerError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let x = clean(&[x], 1.0)?[0];
    Ok((x / eps).ln_1p() / (1.0 / eps).ln_1p())
}

/// `p_rf` times the number of chains whose power exceeds [`ACTIVATION_TOL`].
pub fn rf_power_exact(chain_power: &[f64], p_rf: f64) -> f64 {
    p_rf * chain_power.iter().filter(|&&v| v > ACTIVATION_TOL).count() as f64
}

/// Relaxed on/off cost `unit/log(1+1/ε) · Σ log(1+w/ε)`; used for RF chains and phase shifters.
pub fn relaxed_onoff_power(weights: &[f64], unit_power: f64, eps: f64) -> f64 {
    let norm = (1.0 / eps).ln_1p();
    unit_power / norm * weights.iter().map(|&w| (w.max(0.0) / eps).ln_1p()).sum::<f64>()
}

pub fn rf_power_relaxed(chain_power: &[f64], hw: &HardwareConstants) -> f64 {
    relaxed_onoff_power(chain_power, hw.p_rf, hw.eps_indicator)
}

/// Relaxed phase-shifter cost; the weight of each element is its modulus.
pub fn ps_power_relaxed(moduli: &[f64], hw: &HardwareConstants) -> f64 {
    relaxed_onoff_power(moduli, hw.p_ps, hw.eps_indicator)
}

/// Switch-network draw for `n_rf` chains feeding `n_tx` antennas.
pub fn switch_power(n_tx: usize, n_rf: usize, p_sw: f64) -> f64 {
    p_sw * (n_rf + n_tx * n_rf) as f64
}

/// Harvested DC power for RF input `p_in`, logistic model shifted to pass through the origin.
pub fn eh_dc(p_in: f64, m: f64, a: f64, b: f64) -> f64 {
    let p = p_in.max(0.0);
    // Algebraically equal to (Ψ − MΩ)/(1 − Ω) but free of cancellation near zero.
    m * (-(-a * p).exp_m1()) / (1.0 + (a * (b - p)).exp())
}

/// RF input at which [`eh_dc`] returns exactly `gamma_dc`.
pub fn eh_threshold_invert(gamma_dc: f64, m: f64, a: f64, b: f64) -> Result<f64, PowerError> {
    if gamma_dc >= m {
        return Err(PowerError::SaturationUnreachable { gamma: gamma_dc, m });
    }
    if !(gamma_dc > 0.0) {
        return Err(PowerError::Invalid(format!("harvest target must be positive, got {gamma_dc}")));
    }
    let ab = a * b;
    let p = if ab < 30.0 {
        (gamma_dc * (1.0 + ab.exp()) / (m - gamma_dc)).ln_1p() / a
    } else {
        (ab + (gamma_dc + m * (-ab).exp()).ln() - (m - gamma_dc).ln()) / a
    };
    Ok(p)
}

/// Exact power breakdown of a design.
pub fn total_power(design: &HybridDesign, scn: &Scenario) -> Result<PowerBreakdown, PowerError> {
    let hw = &scn.hw;
    let p_out = design.per_antenna_power();
    for (index, &p) in p_out.iter().enumerate() {
        if p > hw.p_ant_max * (1.0 + ANTENNA_LIMIT_RTOL) {
            return Err(PowerError::AntennaLimit { index, power: p, limit: hw.p_ant_max });
        }
    }
    let p_pa = pa_power(&p_out, hw)?;
    let p_rf = hw.p_rf * design.rf_on().iter().filter(|&&on| on).count() as f64;
    let p_ps = hw.p_ps * design.ps_on_count() as f64;
    let p_sw = hw.p_sw * design.switch_count() as f64;
    Ok(PowerBreakdown::new(p_pa, p_rf, p_ps, p_sw, hw.p_static))
}

/// Which relaxed on/off costs enter the optimised objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub rf: bool,
    pub ps: bool,
}

impl ObjectiveTerms {
    pub const ALL: ObjectiveTerms = ObjectiveTerms { rf: true, ps: true };
    pub const NONE: ObjectiveTerms = ObjectiveTerms { rf: false, ps: false };
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        Self::ALL
    }
}

/// Objective minimised by the optimiser: amplifier draw plus the relaxed RF-chain
/// and phase-shifter costs selected by `terms`. Phase shifters are weighted by
/// `|F_ij|²`, the diagonal of the lifted analog covariance, so both stages see
/// the same value.
pub fn relaxed_objective(design: &HybridDesign, scn: &Scenario, terms: ObjectiveTerms) -> f64 {
    let hw = &scn.hw;
    let pa: f64 = design.per_antenna_power().iter().map(|&p| pa_single(p, hw)).sum();
    let rf = if terms.rf { rf_power_relaxed(&design.chain_power(), hw) } else { 0.0 };
    let ps = match design.arch {
        crate::design::Architecture::Hybrid if terms.ps => {
            let w: Vec<f64> = design.f.iter().map(|z| z.norm_sqr()).collect();
            relaxed_onoff_power(&w, hw.p_ps, hw.eps_indicator)
        }
        _ => 0.0,
    };
    pa + rf + ps
}
