//! Deterministic synthetic etch simulator that stands in for fab
//! measurements and physics-based process simulation.
//!
//! Each step removes a Weibull-shaped increment whose parameters follow from
//! the step knobs:
//!
//! * ion dose `I = τ̂·P̂·g_e`, neutral dose `N = τ̂·F̂`
//! * lateral scale `λ = (λ0 + cp·p̂ + cN·N)`, times 1.05 at the wafer edge
//! * shape `k = k0 + ck·P̂`
//! * amplitude `A = a0·I / (1 + β·D)` where `D` is the center depth already
//!   etched (aspect-ratio-dependent slowdown, which makes step order matter)
//!
//! with `τ̂ = t/60 s`, `P̂ = P/1500 W`, `p̂ = p/80 mTorr` and `F̂ = F_etch/500 sccm`.
//! Measurement noise is multiplicative and applied only to the final profile.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{lateral_grid, weibull_increment, Profile, WeibullStepParams};
use crate::recipe::{Equipment, ProcessContext, Recipe, RecipeStep, WaferLocation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquipmentGains {
    #[serde(rename = "E1")]
    pub e1: f64,
    #[serde(rename = "E2")]
    pub e2: f64,
    #[serde(rename = "E3")]
    pub e3: f64,
    #[serde(rename = "E4")]
    pub e4: f64,
}

impl Default for EquipmentGains {
    fn default() -> Self {
        Self { e1: 0.90, e2: 0.95, e3: 1.00, e4: 1.05 }
    }
}

impl EquipmentGains {
    pub fn gain(&self, e: Equipment) -> f64 {
        match e {
            Equipment::E1 => self.e1,
            Equipment::E2 => self.e2,
            Equipment::E3 => self.e3,
            Equipment::E4 => self.e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub grid_size: usize,
    pub equipment_gains: EquipmentGains,
    pub k0: f64,
    pub ck: f64,
    pub lambda0: f64,
    pub c_pressure: f64,
    pub c_neutral: f64,
    /// Single-step center etch at full dose (μm).
    pub a0_um: f64,
    /// Aspect-ratio slowdown per μm of existing depth.
    pub beta_per_um: f64,
    pub edge_lambda_factor: f64,
    /// Relative standard deviation of the multiplicative measurement noise.
    pub sigma_meas: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            equipment_gains: EquipmentGains::default(),
            k0: 1.5,
            ck: 3.0,
            lambda0: 0.15,
            c_pressure: 0.5,
            c_neutral: 0.35,
            a0_um: 2.0,
            beta_per_um: 0.8,
            edge_lambda_factor: 1.05,
            sigma_meas: 0.02,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 8 {
            return Err(Error::invalid(format!("grid_size must be at least 8, got {}", self.grid_size)));
        }
        let g = &self.equipment_gains;
        let constants = [
            ("E1 gain", g.e1),
            ("E2 gain", g.e2),
            ("E3 gain", g.e3),
            ("E4 gain", g.e4),
            ("k0", self.k0),
            ("ck", self.ck),
            ("lambda0", self.lambda0),
            ("c_pressure", self.c_pressure),
            ("c_neutral", self.c_neutral),
            ("a0_um", self.a0_um),
            ("beta_per_um", self.beta_per_um),
            ("edge_lambda_factor", self.edge_lambda_factor),
            ("sigma_meas", self.sigma_meas),
        ];
        for (name, v) in constants {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("oracle constant {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Weibull parameters of one step given the center depth etched before it.
pub fn step_params(
    step: &RecipeStep,
    context: ProcessContext,
    depth_before_center_um: f64,
    cfg: &OracleConfig,
) -> Result<WeibullStepParams> {
    if !(step.duration_s > 0.0) {
        return Err(Error::invalid(format!("step duration must be positive, got {}", step.duration_s)));
    }
    if !(depth_before_center_um >= 0.0) {
        return Err(Error::invalid(format!(
            "depth before step must be non-negative, got {depth_before_center_um}"
        )));
    }
    let tau = step.duration_s / 60.0;
    let power = step.power_w / 1500.0;
    let pressure = step.pressure_mtorr / 80.0;
    let etch_flow = step.flow_etch_sccm / 500.0;

    let ion_dose = tau * power * cfg.equipment_gains.gain(context.equipment);
    let neutral_dose = tau * etch_flow;
    let location = match context.wafer_location {
        WaferLocation::Center => 1.0,
        WaferLocation::Edge => cfg.edge_lambda_factor,
    };
    let lambda = (cfg.lambda0 + cfg.c_pressure * pressure + cfg.c_neutral * neutral_dose) * location;
    let k = cfg.k0 + cfg.ck * power;
    let amplitude = cfg.a0_um * ion_dose / (1.0 + cfg.beta_per_um * depth_before_center_um);
    Ok(WeibullStepParams { k, lambda, amplitude })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub measured: Profile,
    pub clean: Profile,
    /// Accumulated profile after each step; the last entry equals `clean`.
    pub per_step: Vec<Profile>,
    pub step_params: Vec<WeibullStepParams>,
}

/// Runs `recipe` through the oracle. Noise, when requested, is drawn from an
/// rng seeded with `cfg.seed`.
pub fn simulate(recipe: &Recipe, cfg: &OracleConfig, with_noise: bool) -> Result<Simulation> {
    if with_noise {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        simulate_with_rng(recipe, cfg, Some(&mut rng))
    } else {
        simulate_with_rng::<ChaCha8Rng>(recipe, cfg, None)
    }
}

/// As [`simulate`], drawing measurement noise from `rng` when given.
pub fn simulate_with_rng<R: Rng>(
    recipe: &Recipe,
    cfg: &OracleConfig,
    rng: Option<&mut R>,
) -> Result<Simulation> {
    cfg.validate()?;
    recipe.validate()?;
    let grid = lateral_grid(cfg.grid_size);
    let context = recipe.context();

    let mut depth = vec![0.0; cfg.grid_size];
    let mut per_step = Vec::with_capacity(recipe.len());
    let mut params = Vec::with_capacity(recipe.len());
    for step in &recipe.steps {
        let p = step_params(step, context, depth[0], cfg)?;
        let inc = weibull_increment(&p, &grid)?;
        for (d, i) in depth.iter_mut().zip(&inc) {
            *d += i;
        }
        per_step.push(Profile { depths_um: depth.clone() });
        params.push(p);
    }

    let clean = Profile { depths_um: depth };
    let measured = match rng {
        Some(rng) => {
            let noise = Normal::new(0.0, cfg.sigma_meas)
                .map_err(|e| Error::invalid(format!("measurement noise: {e}")))?;
            Profile {
                depths_um: clean
                    .depths_um
                    .iter()
                    .map(|&d| d * (1.0 + noise.sample(rng)))
                    .collect(),
            }
        }
        None => clean.clone(),
    };
    Ok(Simulation { measured, clean, per_step, step_params: params })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn max_step() -> RecipeStep {
        RecipeStep {
            duration_s: 60.0,
            power_w: 1500.0,
            pressure_mtorr: 80.0,
            flow_passivation_sccm: 100.0,
            flow_etch_sccm: 500.0,
        }
    }

    fn ctx(equipment: Equipment) -> ProcessContext {
        ProcessContext { equipment, wafer_location: WaferLocation::Center }
    }

    fn recipe(steps: Vec<RecipeStep>, equipment: Equipment) -> Recipe {
        Recipe {
            id: "t".into(),
            steps,
            equipment,
            wafer_location: WaferLocation::Center,
        }
    }

    // Expected values below were evaluated by hand from the closed-form
    // mapping with the default constants.

    #[test]
    fn max_knob_step_parameters() {
        let p = step_params(&max_step(), ctx(Equipment::E3), 0.0, &OracleConfig::default()).unwrap();
        assert!((p.k - 4.5).abs() < 1e-9);
        assert!((p.lambda - 1.0).abs() < 1e-9);
        assert!((p.amplitude - 2.0).abs() < 1e-9);
    }

    #[test]
    fn aspect_ratio_divisor() {
        let p = step_params(&max_step(), ctx(Equipment::E3), 2.5, &OracleConfig::default()).unwrap();
        assert!((p.amplitude - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn two_step_center_depth() {
        let sim = simulate(&recipe(vec![max_step(); 2], Equipment::E3), &OracleConfig::default(), false)
            .unwrap();
        assert!((sim.clean.center() - 2.769230769230769).abs() < 1e-9);
        assert!((sim.clean.center() - (2.0 + 10.0 / 13.0)).abs() < 1e-9);
    }

    #[test]
    fn vanishing_duration_vanishes_amplitude() {
        let mut s = max_step();
        s.duration_s = 1e-12;
        let p = step_params(&s, ctx(Equipment::E3), 0.0, &OracleConfig::default()).unwrap();
        assert!(p.amplitude < 1e-12);
        s.duration_s = 0.0;
        assert!(step_params(&s, ctx(Equipment::E3), 0.0, &OracleConfig::default()).is_err());
    }

    #[test]
    fn single_step_profile_is_the_increment() {
        let cfg = OracleConfig::default();
        let sim = simulate(&recipe(vec![max_step()], Equipment::E3), &cfg, false).unwrap();
        let inc = weibull_increment(&sim.step_params[0], &lateral_grid(64)).unwrap();
        assert_eq!(sim.clean.depths_um, inc);
        assert_eq!(sim.per_step.len(), 1);
        assert_eq!(sim.measured, sim.clean);
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = OracleConfig { seed: 42, ..Default::default() };
        let r = recipe(vec![max_step(); 3], Equipment::E2);
        assert_eq!(simulate(&r, &cfg, false).unwrap(), simulate(&r, &cfg, false).unwrap());
        let a = simulate(&r, &cfg, true).unwrap();
        let b = simulate(&r, &cfg, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.measured, a.clean);
    }

    #[test]
    fn step_order_matters() {
        let cfg = OracleConfig::default();
        let mut weak = max_step();
        weak.duration_s = 10.0;
        weak.power_w = 400.0;
        let a = simulate(&recipe(vec![max_step(), weak], Equipment::E3), &cfg, false).unwrap();
        let b = simulate(&recipe(vec![weak, max_step()], Equipment::E3), &cfg, false).unwrap();
        assert_ne!(a.clean, b.clean);
    }

    #[test]
    fn rejects_invalid_configuration() {
        let cfg = OracleConfig { grid_size: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = OracleConfig { beta_per_um: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    fn arb_step() -> impl Strategy<Value = RecipeStep> {
        (5.0f64..=60.0, 200.0f64..=1500.0, 10.0f64..=80.0, 50.0f64..=300.0, 100.0f64..=500.0)
            .prop_map(|(a, b, c, d, e)| RecipeStep::from_knobs([a, b, c, d, e]))
    }

    fn arb_equipment() -> impl Strategy<Value = Equipment> {
        prop::sample::select(Equipment::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn clean_profiles_are_monotone(steps in prop::collection::vec(arb_step(), 1..12), e in arb_equipment()) {
            let sim = simulate(&recipe(steps, e), &OracleConfig::default(), false).unwrap();
            let mut prev = vec![0.0; 64];
            for partial in &sim.per_step {
                prop_assert!(partial.depths_um.iter().all(|&d| d >= 0.0));
                for w in partial.depths_um.windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
                for (p, d) in prev.iter().zip(&partial.depths_um) {
                    prop_assert!(d >= p);
                }
                prev = partial.depths_um.clone();
            }
        }

        #[test]
        fn longer_duration_never_etches_less(
            steps in prop::collection::vec(arb_step(), 1..10),
            which in 0usize..10,
            extra in 0.0f64..30.0,
        ) {
            let which = which % steps.len();
            let cfg = OracleConfig::default();
            let base = simulate(&recipe(steps.clone(), Equipment::E3), &cfg, false).unwrap();
            let mut longer = steps;
            longer[which].duration_s += extra;
            let more = simulate(&recipe(longer, Equipment::E3), &cfg, false).unwrap();
            prop_assert!(more.clean.center() >= base.clean.center());
        }

        #[test]
        fn higher_gain_equipment_raises_every_amplitude(steps in prop::collection::vec(arb_step(), 1..10)) {
            let cfg = OracleConfig::default();
            let lo = simulate(&recipe(steps.clone(), Equipment::E1), &cfg, false).unwrap();
            let hi = simulate(&recipe(steps, Equipment::E4), &cfg, false).unwrap();
            for (h, l) in hi.step_params.iter().zip(&lo.step_params) {
                prop_assert!(h.amplitude > l.amplitude);
            }
        }
    }
}
