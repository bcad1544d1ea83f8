//! A concrete transmit design and exact, from-scratch evaluation of every constraint.

use serde::{Deserialize, Serialize};

use crate::array_sensing::{build_fim, crb_trace, SteeringSet};
use crate::linalg::{outer, quad_form, CMatrix, CVector, C64};
use crate::power_models::{eh_dc, relaxed_objective, ObjectiveTerms};
use crate::scenario::Scenario;

/// Transmitter architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// RF chains drive every antenna through a phase-shifter network.
    Hybrid,
    /// One RF chain per antenna, no phase shifters.
    FullyDigital,
}

/// Analog beamformer `F`, digital beamformers `w_k` and sensing covariance `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridDesign {
    pub f: CMatrix,
    pub w: Vec<CVector>,
    pub s: CMatrix,
    pub arch: Architecture,
}

impl HybridDesign {
    pub fn n_tx(&self) -> usize {
        self.f.nrows()
    }

    pub fn n_rf(&self) -> usize {
        self.f.ncols()
    }

    /// `Σ w_k w_k^H + S` over the RF-chain space.
    pub fn baseband_covariance(&self) -> CMatrix {
        let mut q = self.s.clone();
        for w in &self.w {
            q += outer(w);
        }
        q
    }

    /// Transmit covariance `F (Σ w_k w_k^H + S) F^H`.
    pub fn tx_covariance(&self) -> CMatrix {
        &self.f * self.baseband_covariance() * self.f.adjoint()
    }

    pub fn per_antenna_power(&self) -> Vec<f64> {
        let r = self.tx_covariance();
        (0..r.nrows()).map(|i| r[(i, i)].re.max(0.0)).collect()
    }

    /// Per-chain digital power `v_n`.
    pub fn chain_power(&self) -> Vec<f64> {
        let q = self.baseband_covariance();
        (0..q.nrows()).map(|i| q[(i, i)].re.max(0.0)).collect()
    }

    /// RF chains that are switched on: those whose analog column is not all zero.
    pub fn rf_on(&self) -> Vec<bool> {
        (0..self.n_rf()).map(|j| self.f.column(j).iter().any(|z| *z != C64::new(0.0, 0.0))).collect()
    }

    /// Phase shifters that are switched on (nonzero entries of `F`).
    pub fn ps_grid(&self) -> Vec<Vec<bool>> {
        (0..self.n_tx())
            .map(|i| (0..self.n_rf()).map(|j| self.f[(i, j)] != C64::new(0.0, 0.0)).collect())
            .collect()
    }

    pub fn ps_on_count(&self) -> usize {
        match self.arch {
            Architecture::Hybrid => self.f.iter().filter(|z| **z != C64::new(0.0, 0.0)).count(),
            Architecture::FullyDigital => 0,
        }
    }

    /// Number of switches in the on/off network.
    pub fn switch_count(&self) -> usize {
        match self.arch {
            Architecture::Hybrid => self.n_rf() + self.n_tx() * self.n_rf(),
            Architecture::FullyDigital => self.n_tx(),
        }
    }

    /// Design with digital part scaled by `alpha` (`w → αw`, `S → α²S`).
    pub fn scaled(&self, alpha: f64) -> HybridDesign {
        let a = C64::new(alpha, 0.0);
        HybridDesign {
            f: self.f.clone(),
            w: self.w.iter().map(|w| w * a).collect(),
            s: &self.s * C64::new(alpha * alpha, 0.0),
            arch: self.arch,
        }
    }
}

/// Exact SINR of every IR.
pub fn sinr(scn: &Scenario, design: &HybridDesign) -> Vec<f64> {
    let k = scn.dims.k_ir;
    (0..k)
        .map(|i| {
            let g = design.f.adjoint() * &scn.h[i];
            let gains: Vec<f64> = design.w.iter().map(|w| (g.adjoint() * w)[(0, 0)].norm_sqr()).collect();
            let interf: f64 = gains.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum::<f64>()
                + quad_form(&design.s, &g);
            gains[i] / (interf + scn.noise_ir[i])
        })
        .collect()
}

/// RF power arriving at every ER.
pub fn eh_input(scn: &Scenario, design: &HybridDesign) -> Vec<f64> {
    let r = design.tx_covariance();
    scn.d.iter().map(|d| quad_form(&r, d)).collect()
}

/// Trace of the CRB for the design, or `None` if the FIM is singular.
pub fn crb(scn: &Scenario, design: &HybridDesign) -> Option<f64> {
    if scn.dims.k_s == 0 {
        return Some(0.0);
    }
    let ss = SteeringSet::from_scenario(scn);
    let fim = build_fim(&ss, &design.tx_covariance(), scn.dims.dwell, scn.noise_sense).ok()?;
    crb_trace(&fim).ok()
}

/// Constraint family, used for slack reports and infeasibility diagnoses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintClass {
    Sinr,
    Crb,
    Eh,
    Power,
    Modulus,
    Other,
}

impl std::fmt::Display for ConstraintClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConstraintClass::Sinr => "sinr",
            ConstraintClass::Crb => "crb",
            ConstraintClass::Eh => "eh",
            ConstraintClass::Power => "power",
            ConstraintClass::Modulus => "modulus",
            ConstraintClass::Other => "other",
        };
        f.write_str(s)
    }
}

/// Achieved versus required value of one constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slack {
    pub class: ConstraintClass,
    pub index: usize,
    pub achieved: f64,
    pub required: f64,
    /// Positive when satisfied; relative to the requirement.
    pub relative_slack: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub slacks: Vec<Slack>,
}

impl ConstraintReport {
    pub fn worst(&self) -> f64 {
        self.slacks.iter().map(|s| s.relative_slack).fold(f64::INFINITY, f64::min)
    }

    pub fn satisfied(&self, rtol: f64) -> bool {
        self.worst() >= -rtol
    }
}

/// Recompute every constraint of the design from scratch.
pub fn constraint_report(scn: &Scenario, design: &HybridDesign) -> ConstraintReport {
    let mut slacks = Vec::new();
    for (i, (&got, &need)) in sinr(scn, design).iter().zip(&scn.thresholds.sinr_min).enumerate() {
        slacks.push(Slack { class: ConstraintClass::Sinr, index: i, achieved: got, required: need, relative_slack: (got - need) / need });
    }
    if scn.dims.k_s > 0 {
        let need = scn.thresholds.crb_max;
        let got = crb(scn, design).unwrap_or(f64::INFINITY);
        slacks.push(Slack { class: ConstraintClass::Crb, index: 0, achieved: got, required: need, relative_slack: (need - got) / need });
    }
    for (j, p_in) in eh_input(scn, design).into_iter().enumerate() {
        let e = scn.eh_params[j];
        let need = scn.thresholds.eh_dc_min[j];
        let got = eh_dc(p_in, e.m, e.a, e.b);
        let rel = (got - need) / need;
        slacks.push(Slack { class: ConstraintClass::Eh, index: j, achieved: got, required: need, relative_slack: rel });
    }
    let pmax = scn.hw.p_ant_max;
    for (n, p) in design.per_antenna_power().into_iter().enumerate() {
        slacks.push(Slack { class: ConstraintClass::Power, index: n, achieved: p, required: pmax, relative_slack: (pmax - p) / pmax });
    }
    if design.arch == Architecture::Hybrid {
        let target = 1.0 / (design.n_tx() as f64).sqrt();
        let worst = design
            .f
            .iter()
            .filter(|z| z.norm() != 0.0)
            .map(|z| (z.norm() - target).abs() / target)
            .fold(0.0, f64::max);
        slacks.push(Slack { class: ConstraintClass::Modulus, index: 0, achieved: worst, required: 0.0, relative_slack: -worst });
    }
    ConstraintReport { slacks }
}

/// Scenario plus quantities derived from it once and shared by both stages.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub scn: Scenario,
    /// FIM coefficient matrices over the transmit covariance (packed order) and balancing factors.
    pub fim: Option<(Vec<CMatrix>, Vec<f64>)>,
    /// RF input power each ER needs to reach its DC target.
    pub eh_rf_target: Vec<f64>,
    pub terms: ObjectiveTerms,
}

impl ProblemData {
    pub fn new(scn: &Scenario) -> Result<Self, crate::power_models::PowerError> {
        let fim = if scn.dims.k_s > 0 {
            let ss = SteeringSet::from_scenario(scn);
            let coeffs = crate::array_sensing::fim_coefficients(&ss, scn.dims.dwell, scn.noise_sense);
            let balance = crate::array_sensing::fim_balancing(&ss, scn.dims.dwell, scn.noise_sense);
            Some((coeffs, balance))
        } else {
            None
        };
        let eh_rf_target = scn
            .eh_params
            .iter()
            .zip(&scn.thresholds.eh_dc_min)
            .map(|(e, &g)| crate::power_models::eh_threshold_invert(g, e.m, e.a, e.b))
            .collect::<Result<_, _>>()?;
        Ok(Self { scn: scn.clone(), fim, eh_rf_target, terms: ObjectiveTerms::ALL })
    }

    pub fn n_fim(&self) -> usize {
        3 * self.scn.dims.k_s
    }

    /// Relaxed objective of a design under this problem's cost terms.
    pub fn objective(&self, design: &HybridDesign) -> f64 {
        relaxed_objective(design, &self.scn, self.terms)
    }
}

/// Smallest and largest squared scale `α²` of the digital part (`w → αw`, `S → α²S`)
/// for which the design meets every constraint; `None` if no scale works.
///
/// SINR improves with `α` (noise is fixed), the CRB falls as `1/α²`, harvested RF
/// power and per-antenna power grow as `α²`.
pub fn feasible_scale_range(data: &ProblemData, design: &HybridDesign) -> Option<(f64, f64)> {
    let scn = &data.scn;
    let mut lo: f64 = 0.0;
    for k in 0..scn.dims.k_ir {
        let g = design.f.adjoint() * &scn.h[k];
        let gains: Vec<f64> = design.w.iter().map(|w| (g.adjoint() * w)[(0, 0)].norm_sqr()).collect();
        let interf: f64 =
            gains.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| v).sum::<f64>() + quad_form(&design.s, &g);
        let gamma = scn.thresholds.sinr_min[k];
        let margin = gains[k] - gamma * interf;
        if !(margin > 0.0) {
            return None;
        }
        lo = lo.max(gamma * scn.noise_ir[k] / margin);
    }
    if scn.dims.k_s > 0 {
        let c = crb(scn, design)?;
        lo = lo.max(c / scn.thresholds.crb_max);
    }
    for (p_in, target) in eh_input(scn, design).into_iter().zip(&data.eh_rf_target) {
        if !(p_in > 0.0) {
            return None;
        }
        lo = lo.max(target / p_in);
    }
    let hi = design
        .per_antenna_power()
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| scn.hw.p_ant_max / p)
        .fold(f64::INFINITY, f64::min);
    if lo.is_finite() && lo <= hi {
        Some((lo, hi))
    } else {
        None
    }
}

/// The design rescaled to the smallest feasible `α`; on failure, the worst relative violation.
pub fn rescale_to_feasible(data: &ProblemData, design: &HybridDesign, rtol: f64) -> Result<HybridDesign, f64> {
    match feasible_scale_range(data, design) {
        Some((lo, _)) => {
            let scaled = design.scaled(lo.sqrt());
            let rep = constraint_report(&data.scn, &scaled);
            if rep.satisfied(rtol) {
                Ok(scaled)
            } else {
                Err(-rep.worst())
            }
        }
        None => Err(-constraint_report(&data.scn, design).worst()),
    }
}

/// Zero the digital weights of chains whose analog column is entirely off.
pub fn canonicalize(design: &mut HybridDesign) {
    let zero = C64::new(0.0, 0.0);
    for j in 0..design.n_rf() {
        if design.f.column(j).iter().all(|z| *z == zero) {
            for w in design.w.iter_mut() {
                w[j] = zero;
            }
            for i in 0..design.n_rf() {
                design.s[(i, j)] = zero;
                design.s[(j, i)] = zero;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, Dimensions, Geometry};
    use proptest::prelude::*;

    fn desk_design(seed: u64, amp: f64) -> (Scenario, HybridDesign) {
        let scn = generate_scenario(seed, &Dimensions::desk(), &Geometry::default(), 3.0).unwrap();
        let m = 1.0 / 8f64.sqrt();
        let f = CMatrix::from_fn(8, 4, |i, j| C64::from_polar(m, 0.9 * (i * j) as f64 + 0.1 * seed as f64));
        // Matched beams through the pseudo-inverse direction of each IR.
        let w = (0..2)
            .map(|k| {
                let g = f.adjoint() * &scn.h[k];
                &g * C64::new(amp / g.norm(), 0.0)
            })
            .collect();
        let s = CMatrix::identity(4, 4) * C64::new(0.1 * amp * amp, 0.0);
        (scn, HybridDesign { f, w, s, arch: Architecture::Hybrid })
    }

    #[test]
    fn sinr_matches_direct_beam_formula() {
        let (scn, d) = desk_design(4, 0.5);
        let beams: Vec<CVector> = d.w.iter().map(|w| &d.f * w).collect();
        let sense = &d.f * &d.s * d.f.adjoint();
        for (k, got) in sinr(&scn, &d).into_iter().enumerate() {
            let h = &scn.h[k];
            let p = |b: &CVector| h.dotc(b).norm_sqr();
            let want = p(&beams[k]) / (p(&beams[1 - k]) + h.dotc(&(&sense * h)).re + scn.noise_ir[k]);
            assert!((got - want).abs() <= 1e-12 * want);
        }
        let total: f64 = d.per_antenna_power().iter().sum();
        let rx = d.tx_covariance();
        assert!((total - (0..8).map(|i| rx[(i, i)].re).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn scale_range_edges_are_binding() {
        use crate::digital_stage::{optimize_digital, DigitalContext};
        let (scn, d0) = desk_design(1, 1.0);
        let data = ProblemData::new(&scn).unwrap();
        let ctx = DigitalContext::connected(&data, &d0.f, Architecture::Hybrid);
        let d = optimize_digital(&ctx, None, &Default::default()).unwrap().design.scaled(0.5);
        let (lo, hi) = feasible_scale_range(&data, &d).expect("some scale is feasible");
        assert!((lo - 4.0).abs() < 1e-4, "optimised design rescaled by one half needs four times the power, got {lo}");
        assert!(lo > 0.0 && lo < hi);
        let at = |a2: f64| constraint_report(&scn, &d.scaled(a2.sqrt())).worst();
        // The modulus slack is never positive, so a satisfied design reports a worst slack of about zero.
        assert!(at(lo).abs() < 1e-9, "slack at the lower edge {}", at(lo));
        assert!(at(lo * 0.99) < -1e-4);
        assert!(at(lo * 1.01) > -1e-12 || lo * 1.01 > hi);
        assert!(at(hi) > -1e-9);
        assert!(at(hi * 1.01) < -1e-4);
        let fixed = rescale_to_feasible(&data, &d, 1e-9).unwrap();
        assert!(constraint_report(&scn, &fixed).satisfied(1e-9));
    }

    #[test]
    fn unusable_design_has_no_scale() {
        let (scn, mut d) = desk_design(1, 0.05);
        let data = ProblemData::new(&scn).unwrap();
        d.w[0] = CVector::zeros(4);
        assert!(feasible_scale_range(&data, &d).is_none());
        let err = rescale_to_feasible(&data, &d, 1e-6).unwrap_err();
        assert!(err > 0.0);
    }

    #[test]
    fn canonicalize_clears_dead_chains() {
        let (_, mut d) = desk_design(2, 1.0);
        d.f.column_mut(3).fill(C64::new(0.0, 0.0));
        d.f[(0, 1)] = C64::new(0.0, 0.0);
        canonicalize(&mut d);
        assert!(d.w.iter().all(|w| w[3] == C64::new(0.0, 0.0) && w[1] != C64::new(0.0, 0.0)));
        assert!((0..4).all(|i| d.s[(i, 3)] == C64::new(0.0, 0.0) && d.s[(3, i)] == C64::new(0.0, 0.0)));
        assert_eq!(d.rf_on(), vec![true, true, true, false]);
        assert_eq!(d.ps_on_count(), 32 - 8 - 1);
        assert_eq!(d.switch_count(), 4 + 32);
    }

    proptest! {
        #[test]
        fn sinr_and_harvest_grow_with_scale(seed in 0u64..20, a in 0.01..1.0f64, b in 1.0001..3.0f64) {
            let (scn, d) = desk_design(seed, 1.0);
            let (small, large) = (d.scaled(a), d.scaled(a * b));
            for (s, l) in sinr(&scn, &small).iter().zip(sinr(&scn, &large)) {
                prop_assert!(l >= *s);
            }
            for (s, l) in eh_input(&scn, &small).iter().zip(eh_input(&scn, &large)) {
                prop_assert!((l - s * b * b).abs() <= 1e-9 * l);
            }
            let (cs, cl) = (crb(&scn, &small).unwrap(), crb(&scn, &large).unwrap());
            prop_assert!((cs / cl - b * b).abs() <= 1e-6 * b * b);
        }
    }
}
