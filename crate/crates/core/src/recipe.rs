//! Etch recipes: ordered process steps plus categorical process context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Process-tool identity. Nominally identical tools etch at slightly
/// different rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Equipment {
    E1,
    E2,
    E3,
    E4,
}

impl Equipment {
    pub const ALL: [Equipment; 4] = [Equipment::E1, Equipment::E2, Equipment::E3, Equipment::E4];

    pub fn name(self) -> &'static str {
        match self {
            Equipment::E1 => "E1",
            Equipment::E2 => "E2",
            Equipment::E3 => "E3",
            Equipment::E4 => "E4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaferLocation {
    Center,
    Edge,
}

impl WaferLocation {
    pub const ALL: [WaferLocation; 2] = [WaferLocation::Center, WaferLocation::Edge];

    pub fn name(self) -> &'static str {
        match self {
            WaferLocation::Center => "center",
            WaferLocation::Edge => "edge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessContext {
    pub equipment: Equipment,
    pub wafer_location: WaferLocation,
}

/// Knob settings of one etch step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeStep {
    pub duration_s: f64,
    pub power_w: f64,
    pub pressure_mtorr: f64,
    pub flow_passivation_sccm: f64,
    pub flow_etch_sccm: f64,
}

pub const KNOB_NAMES: [&str; 5] = [
    "duration_s",
    "power_w",
    "pressure_mtorr",
    "flow_passivation_sccm",
    "flow_etch_sccm",
];

impl RecipeStep {
    pub fn knobs(&self) -> [f64; 5] {
        [
            self.duration_s,
            self.power_w,
            self.pressure_mtorr,
            self.flow_passivation_sccm,
            self.flow_etch_sccm,
        ]
    }

    pub fn from_knobs(k: [f64; 5]) -> Self {
        Self {
            duration_s: k[0],
            power_w: k[1],
            pressure_mtorr: k[2],
            flow_passivation_sccm: k[3],
            flow_etch_sccm: k[4],
        }
    }
}

/// Closed `[min, max]` range of every knob, in `KNOB_NAMES` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnobRanges {
    pub duration_s: [f64; 2],
    pub power_w: [f64; 2],
    pub pressure_mtorr: [f64; 2],
    pub flow_passivation_sccm: [f64; 2],
    pub flow_etch_sccm: [f64; 2],
}

impl Default for KnobRanges {
    fn default() -> Self {
        Self {
            duration_s: [5.0, 60.0],
            power_w: [200.0, 1500.0],
            pressure_mtorr: [10.0, 80.0],
            flow_passivation_sccm: [50.0, 300.0],
            flow_etch_sccm: [100.0, 500.0],
        }
    }
}

impl KnobRanges {
    pub fn as_array(&self) -> [[f64; 2]; 5] {
        [
            self.duration_s,
            self.power_w,
            self.pressure_mtorr,
            self.flow_passivation_sccm,
            self.flow_etch_sccm,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in KNOB_NAMES.iter().zip(self.as_array()) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("knob range for {name} is empty: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Min-max normalization of every knob onto `[0, 1]` (unclamped).
    pub fn normalize(&self, step: &RecipeStep) -> [f64; 5] {
        let mut out = [0.0; 5];
        for ((o, v), [lo, hi]) in out.iter_mut().zip(step.knobs()).zip(self.as_array()) {
            *o = (v - lo) / (hi - lo);
        }
        out
    }

    /// Names of knobs outside their declared range.
    pub fn out_of_range(&self, step: &RecipeStep) -> Vec<&'static str> {
        KNOB_NAMES
            .iter()
            .zip(step.knobs())
            .zip(self.as_array())
            .filter(|&((_, v), [lo, hi])| !(lo..=hi).contains(&v))
            .map(|((name, _), _)| *name)
            .collect()
    }
}

pub const MAX_STEPS: usize = 16;

/// An ordered etch recipe. Step order matters: later steps etch an
/// already-deepened trench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    #[serde(default)]
    pub id: String,
    pub steps: Vec<RecipeStep>,
    pub equipment: Equipment,
    pub wafer_location: WaferLocation,
}

impl Recipe {
    pub fn context(&self) -> ProcessContext {
        ProcessContext {
            equipment: self.equipment,
            wafer_location: self.wafer_location,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Structural validity: 1..=16 steps with finite, strictly positive knobs.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.steps.len() > MAX_STEPS {
            return Err(Error::invalid(format!(
                "recipe `{}` has {} steps; expected 1..={MAX_STEPS}",
                self.id,
                self.steps.len()
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            for (name, v) in KNOB_NAMES.iter().zip(step.knobs()) {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::invalid(format!(
                        "recipe `{}` step {}: {name} must be finite and positive, got {v}",
                        self.id,
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(step index, knob name)` for every knob outside `ranges`.
    pub fn out_of_range(&self, ranges: &KnobRanges) -> Vec<(usize, &'static str)> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(i, s)| ranges.out_of_range(s).into_iter().map(move |n| (i, n)))
            .collect()
    }

    /// The first `t` steps as a recipe of their own.
    pub fn prefix(&self, t: usize) -> Recipe {
        Recipe {
            id: self.id.clone(),
            steps: self.steps[..t].to_vec(),
            equipment: self.equipment,
            wafer_location: self.wafer_location,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(k: [f64; 5]) -> RecipeStep {
        RecipeStep::from_knobs(k)
    }

    #[test]
    fn normalization_hits_range_boundaries() {
        let r = KnobRanges::default();
        assert_eq!(r.normalize(&step([5.0, 200.0, 10.0, 50.0, 100.0])), [0.0; 5]);
        assert_eq!(r.normalize(&step([60.0, 1500.0, 80.0, 300.0, 500.0])), [1.0; 5]);
    }

    #[test]
    fn out_of_range_knobs_are_flagged_not_rejected() {
        let r = KnobRanges::default();
        let recipe = Recipe {
            id: "x".into(),
            steps: vec![step([90.0, 1500.0, 80.0, 300.0, 20.0])],
            equipment: Equipment::E1,
            wafer_location: WaferLocation::Edge,
        };
        recipe.validate().unwrap();
        assert_eq!(recipe.out_of_range(&r), vec![(0, "duration_s"), (0, "flow_etch_sccm")]);
    }

    #[test]
    fn validation_rejects_bad_step_counts_and_knobs() {
        let mut recipe = Recipe {
            id: "x".into(),
            steps: vec![],
            equipment: Equipment::E1,
            wafer_location: WaferLocation::Center,
        };
        assert!(recipe.validate().is_err());
        recipe.steps = vec![step([10.0, 500.0, 20.0, 100.0, 200.0]); 17];
        assert!(recipe.validate().is_err());
        recipe.steps = vec![step([0.0, 500.0, 20.0, 100.0, 200.0])];
        assert!(recipe.validate().is_err());
    }

    #[test]
    fn recipe_json_uses_flat_context_fields() {
        let json = r#"{"steps":[{"duration_s":10,"power_w":500,"pressure_mtorr":20,
            "flow_passivation_sccm":100,"flow_etch_sccm":200}],"equipment":"E3","wafer_location":"edge"}"#;
        let r: Recipe = serde_json::from_str(json).unwrap();
        assert_eq!(r.equipment, Equipment::E3);
        assert_eq!(r.wafer_location, WaferLocation::Edge);
        assert!(serde_json::from_str::<Recipe>(&json.replace("E3", "E9")).is_err());
    }
}
