//! Problem instances: dimensions, channels, targets, thresholds and hardware constants.
//!
//! Channels are drawn from a ChaCha8 stream seeded by the instance seed. Each
//! random component uses its own ChaCha stream id, so changing one count does
//! not perturb the draws of the others.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array_sensing::steering;
use crate::linalg::{c64, dbm_to_watt, CVector, C64};

/// Name of the random generator, recorded in every output file.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9, stream-split per component)";

/// Angular range used when target or energy-receiver angles are drawn at random.
pub const ANGLE_RANGE_RAD: f64 = PI / 3.0;

const STREAM_IR: u64 = 1;
const STREAM_ER: u64 = 2;
const STREAM_TARGET: u64 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_rf: usize,
    pub k_ir: usize,
    pub k_er: usize,
    pub k_s: usize,
    pub dwell: usize,
}

impl Dimensions {
    /// Scaled-down default used by the command line and the test suite.
    pub fn desk() -> Self {
        Self { n_tx: 8, n_rx: 8, n_rf: 4, k_ir: 2, k_er: 1, k_s: 1, dwell: 10 }
    }

    pub fn full_size() -> Self {
        Self { n_tx: 32, n_rx: 32, n_rf: 16, k_ir: 6, k_er: 5, k_s: 5, dwell: 30 }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidDimensions(m.to_string()));
        if self.n_tx == 0 || self.n_rx == 0 || self.n_rf == 0 || self.dwell == 0 {
            return bad("n_tx, n_rx, n_rf and dwell must be at least 1");
        }
        if self.k_ir + self.k_er + self.k_s == 0 {
            return bad("at least one of k_ir, k_er, k_s must be positive");
        }
        if !(self.k_ir <= self.n_rf && self.n_rf <= self.n_tx && self.n_tx <= self.n_rx) {
            return bad("require k_ir <= n_rf <= n_tx <= n_rx");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Per-IR minimum SINR, linear.
    pub sinr_min: Vec<f64>,
    /// Bound on the trace of the CRB matrix.
    pub crb_max: f64,
    /// Per-ER minimum harvested DC power, watts.
    pub eh_dc_min: Vec<f64>,
}

impl Thresholds {
    pub fn uniform(dims: &Dimensions, sinr_db: f64, crb_max: f64, eh_dbm: f64) -> Self {
        Self {
            sinr_min: vec![crate::linalg::db_to_linear(sinr_db); dims.k_ir],
            crb_max,
            eh_dc_min: vec![dbm_to_watt(eh_dbm); dims.k_er],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareConstants {
    pub p_ant_max: f64,
    pub eta_max: f64,
    pub beta_pa: f64,
    pub p_rf: f64,
    pub p_ps: f64,
    pub p_sw: f64,
    pub p_static: f64,
    pub eps_indicator: f64,
}

impl Default for HardwareConstants {
    fn default() -> Self {
        Self {
            p_ant_max: 1.5,
            eta_max: 0.38,
            beta_pa: 0.5,
            p_rf: 0.5,
            p_ps: 0.042,
            p_sw: 1e-3,
            p_static: 10.0,
            eps_indicator: 1e-4,
        }
    }
}

impl HardwareConstants {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let parts = [self.p_ant_max, self.p_rf, self.p_ps, self.p_sw, self.p_static];
        if parts.iter().any(|v| !(*v >= 0.0)) {
            return Err(ScenarioError::Invalid("hardware powers must be nonnegative".into()));
        }
        if !(self.eta_max > 0.0 && self.eta_max <= 1.0) {
            return Err(ScenarioError::Invalid("eta_max must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_pa) {
            return Err(ScenarioError::Invalid("beta_pa must lie in [0, 1]".into()));
        }
        if !(self.eps_indicator > 0.0) {
            return Err(ScenarioError::Invalid("eps_indicator must be positive".into()));
        }
        Ok(())
    }
}

/// Logistic energy-harvesting parameters: saturation `m` (W), steepness `a` (1/W), midpoint `b` (W).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhParams {
    pub m: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for EhParams {
    fn default() -> Self {
        Self { m: 0.02, a: 6400.0, b: 0.003 }
    }
}

/// Receiver placement for scenario generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub ir_distance_m: f64,
    pub target_distance_m: f64,
    pub er_distance_m: f64,
    /// Explicit target angles in radians; drawn at random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_angles_rad: Option<Vec<f64>>,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { ir_distance_m: 50.0, target_distance_m: 50.0, er_distance_m: 10.0, target_angles_rad: None }
    }
}

/// One problem instance. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub rng_algorithm: String,
    pub dims: Dimensions,
    #[serde(with = "interleaved_vecs")]
    pub h: Vec<CVector>,
    #[serde(with = "interleaved_vecs")]
    pub d: Vec<CVector>,
    pub theta: Vec<f64>,
    #[serde(with = "interleaved")]
    pub beta_coeff: Vec<C64>,
    pub noise_ir: Vec<f64>,
    pub noise_sense: f64,
    pub thresholds: Thresholds,
    pub hw: HardwareConstants,
    pub eh_params: Vec<EhParams>,
}

/// Path loss in dB at distance `r` metres.
pub fn path_loss_db(r: f64) -> f64 {
    51.2 + 41.2 * r.log10()
}

/// Amplitude attenuation corresponding to [`path_loss_db`].
pub fn path_loss_amplitude(r: f64) -> f64 {
    10f64.powf(-path_loss_db(r) / 20.0)
}

/// Circularly symmetric complex Gaussian sample with unit variance.
pub fn cn01<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c64(s * re, s * im)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Default noise power for every receiver, −103 dBm.
pub const DEFAULT_NOISE_DBM: f64 = -103.0;

/// Default desk-scale thresholds: 6 dB SINR, a CRB bound and an EH target that bind at desk scale.
pub fn desk_thresholds(dims: &Dimensions) -> Thresholds {
    Thresholds::uniform(dims, 6.0, DESK_CRB_MAX, DESK_EH_DBM)
}

/// CRB bound used by the desk defaults.
pub const DESK_CRB_MAX: f64 = 2e-6;
/// Harvested DC target in dBm used by the desk defaults.
pub const DESK_EH_DBM: f64 = -120.0;

pub fn generate_scenario(
    seed: u64,
    dims: &Dimensions,
    geometry: &Geometry,
    rician_k_db: f64,
) -> Result<Scenario, ScenarioError> {
    dims.validate()?;
    for r in [geometry.ir_distance_m, geometry.target_distance_m, geometry.er_distance_m] {
        if !(r > 0.0) {
            return Err(ScenarioError::NonPositiveDistance(r));
        }
    }
    let n = dims.n_tx;

    let mut rng = stream(seed, STREAM_IR);
    let g_ir = path_loss_amplitude(geometry.ir_distance_m);
    let h = (0..dims.k_ir)
        .map(|_| CVector::from_fn(n, |_, _| cn01(&mut rng) * g_ir))
        .collect();

    let mut rng = stream(seed, STREAM_ER);
    let g_er = path_loss_amplitude(geometry.er_distance_m);
    let (w_los, w_nlos) = if rician_k_db.is_infinite() && rician_k_db > 0.0 {
        (1.0, 0.0)
    } else {
        let k = 10f64.powf(rician_k_db / 10.0);
        ((k / (k + 1.0)).sqrt(), (1.0 / (k + 1.0)).sqrt())
    };
    let d = (0..dims.k_er)
        .map(|_| {
            let phi = rng.random_range(-ANGLE_RANGE_RAD..ANGLE_RANGE_RAD);
            let los = steering(phi, n);
            let scatter = CVector::from_fn(n, |_, _| cn01(&mut rng));
            (los * c64(w_los, 0.0) + scatter * c64(w_nlos, 0.0)) * c64(g_er, 0.0)
        })
        .collect();

    let mut rng = stream(seed, STREAM_TARGET);
    let theta: Vec<f64> = match &geometry.target_angles_rad {
        Some(list) => {
            if list.len() != dims.k_s {
                return Err(ScenarioError::Invalid(format!(
                    "{} explicit target angles for k_s = {}",
                    list.len(),
                    dims.k_s
                )));
            }
            list.clone()
        }
        None => (0..dims.k_s).map(|_| rng.random_range(-ANGLE_RANGE_RAD..ANGLE_RANGE_RAD)).collect(),
    };
    let g_t = path_loss_amplitude(geometry.target_distance_m);
    let beta_coeff = (0..dims.k_s)
        .map(|_| C64::from_polar(g_t, rng.random_range(0.0..2.0 * PI)))
        .collect();

    let noise = dbm_to_watt(DEFAULT_NOISE_DBM);
    let scn = Scenario {
        seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        dims: dims.clone(),
        h,
        d,
        theta,
        beta_coeff,
        noise_ir: vec![noise; dims.k_ir],
        noise_sense: noise,
        thresholds: desk_thresholds(dims),
        hw: HardwareConstants::default(),
        eh_params: vec![EhParams::default(); dims.k_er],
    };
    scn.validate()?;
    Ok(scn)
}

/// Full-size instance with the published simulation constants.
pub fn full_size_scenario(seed: u64) -> Scenario {
    let dims = Dimensions::full_size();
    let mut scn = generate_scenario(seed, &dims, &Geometry::default(), 3.0)
        .expect("published dimensions are valid");
    scn.thresholds = Thresholds::uniform(&dims, 6.0, 0.1, -2.0);
    scn
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.dims.validate()?;
        self.hw.validate()?;
        let d = &self.dims;
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.h.len() != d.k_ir || self.d.len() != d.k_er || self.theta.len() != d.k_s {
            return bad("channel/target counts do not match dimensions".into());
        }
        if self.beta_coeff.len() != d.k_s || self.eh_params.len() != d.k_er {
            return bad("target coefficients or EH parameters do not match dimensions".into());
        }
        if self.h.iter().chain(self.d.iter()).any(|v| v.len() != d.n_tx) {
            return bad(format!("channel vectors must have length {}", d.n_tx));
        }
        if self.noise_ir.len() != d.k_ir || self.noise_ir.iter().any(|&s| !(s > 0.0)) {
            return bad("IR noise powers must be positive, one per IR".into());
        }
        if !(self.noise_sense > 0.0) {
            return bad("sensing noise power must be positive".into());
        }
        let t = &self.thresholds;
        if t.sinr_min.len() != d.k_ir || t.eh_dc_min.len() != d.k_er {
            return bad("threshold counts do not match dimensions".into());
        }
        if t.sinr_min.iter().chain(t.eh_dc_min.iter()).any(|&v| !(v > 0.0)) || !(t.crb_max > 0.0) {
            return bad("thresholds must be strictly positive".into());
        }
        Ok(())
    }

    /// Copy with a different PA efficiency exponent.
    pub fn with_beta_pa(&self, beta: f64) -> Scenario {
        let mut s = self.clone();
        s.hw.beta_pa = beta;
        s
    }
}

/// Complex scalars as a flat `[re, im, re, im, ...]` array.
pub mod interleaved {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn to_flat(v: &[C64]) -> Vec<f64> {
        v.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn from_flat(v: &[f64]) -> Result<Vec<C64>, String> {
        if v.len() % 2 != 0 {
            return Err(format!("interleaved complex array has odd length {}", v.len()));
        }
        Ok(v.chunks(2).map(|p| c64(p[0], p[1])).collect())
    }

    pub fn serialize<S: Serializer>(v: &[C64], s: S) -> Result<S::Ok, S::Error> {
        to_flat(v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<C64>, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        from_flat(&flat).map_err(serde::de::Error::custom)
    }
}

/// A list of complex vectors, each stored interleaved.
pub mod interleaved_vecs {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[CVector], s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<Vec<f64>> = v.iter().map(|x| interleaved::to_flat(x.as_slice())).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CVector>, D::Error> {
        let flat = Vec::<Vec<f64>>::deserialize(d)?;
        flat.iter()
            .map(|x| interleaved::from_flat(x).map(CVector::from_vec))
            .collect::<Result<_, _>>()
            .map_err(serde::de::Error::custom)
    }
}
