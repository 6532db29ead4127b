//! Synthetic dataset generation and the record-per-line file format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{simulate_with_rng, OracleConfig};
use crate::parallel;
use crate::profile::Profile;
use crate::recipe::{Equipment, KnobRanges, Recipe, RecipeStep, WaferLocation};

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(flatten)]
    pub recipe: Recipe,
    pub profile_measured_um: Vec<f64>,
    pub profile_clean_um: Vec<f64>,
    pub per_step_um: Vec<Vec<f64>>,
    pub grid_size: usize,
}

impl Record {
    pub fn measured(&self) -> Profile {
        Profile { depths_um: self.profile_measured_um.clone() }
    }

    pub fn clean(&self) -> Profile {
        Profile { depths_um: self.profile_clean_um.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_step_range: [usize; 2],
    pub test_step_range: [usize; 2],
    pub seed: u64,
    pub knob_ranges: KnobRanges,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            train_step_range: [5, 9],
            test_step_range: [10, 11],
            seed: 7,
            knob_ranges: KnobRanges::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::invalid("dataset split sizes must be positive"));
        }
        for (name, [lo, hi]) in [("train", self.train_step_range), ("test", self.test_step_range)] {
            if lo == 0 || lo > hi || hi > crate::recipe::MAX_STEPS {
                return Err(Error::invalid(format!("{name} step range [{lo}, {hi}] is invalid")));
            }
        }
        self.knob_ranges.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Record] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Samples a recipe uniformly: step count in `steps`, every knob in its
/// range, context uniform over its categories.
pub fn sample_recipe<R: Rng>(rng: &mut R, id: String, steps: [usize; 2], ranges: &KnobRanges) -> Recipe {
    let n = rng.random_range(steps[0]..=steps[1]);
    let steps = (0..n)
        .map(|_| {
            let mut k = [0.0; 5];
            for (v, [lo, hi]) in k.iter_mut().zip(ranges.as_array()) {
                *v = rng.random_range(lo..=hi);
            }
            RecipeStep::from_knobs(k)
        })
        .collect();
    let equipment = Equipment::ALL[rng.random_range(0..Equipment::ALL.len())];
    let wafer_location = WaferLocation::ALL[rng.random_range(0..WaferLocation::ALL.len())];
    Recipe { id, steps, equipment, wafer_location }
}

/// Builds every record in memory. Record `i` (counted across train, val and
/// test in that order) draws from its own rng seeded with `seed ^ i`, so the
/// result does not depend on how work is scheduled.
pub fn generate(spec: &DatasetSpec, cfg: &OracleConfig) -> Result<Dataset> {
    spec.validate()?;
    cfg.validate()?;
    let layout = [
        (Split::Train, spec.n_train, spec.train_step_range, 0),
        (Split::Val, spec.n_val, spec.train_step_range, spec.n_train),
        (Split::Test, spec.n_test, spec.test_step_range, spec.n_train + spec.n_val),
    ];
    let mut out = Vec::new();
    for (split, n, range, offset) in layout {
        let records = parallel::map_range(n, |i| {
            let global = (offset + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ global);
            let recipe = sample_recipe(&mut rng, format!("{}-{i:06}", split.name()), range, &spec.knob_ranges);
            let sim = simulate_with_rng(&recipe, cfg, Some(&mut rng))?;
            Ok(Record {
                recipe,
                profile_measured_um: sim.measured.depths_um,
                profile_clean_um: sim.clean.depths_um,
                per_step_um: sim.per_step.into_iter().map(|p| p.depths_um).collect(),
                grid_size: cfg.grid_size,
            })
        });
        out.push(records.into_iter().collect::<Result<Vec<_>>>()?);
    }
    let test = out.pop().unwrap_or_default();
    let val = out.pop().unwrap_or_default();
    let train = out.pop().unwrap_or_default();
    Ok(Dataset { train, val, test })
}

/// Generates the dataset and writes `train.jsonl`, `val.jsonl` and
/// `test.jsonl` under `dir`.
pub fn generate_dataset(spec: &DatasetSpec, cfg: &OracleConfig, dir: &Path) -> Result<Dataset> {
    let data = generate(spec, cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        write_records(&dir.join(split.file_name()), data.split(split))?;
    }
    Ok(data)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let lines = parallel::try_map(records, |r| serde_json::to_string(r))
        .map_err(|e| Error::invalid(format!("serializing record: {e}")))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_records(&dir.join(Split::Train.file_name()))?,
        val: read_records(&dir.join(Split::Val.file_name()))?,
        test: read_records(&dir.join(Split::Test.file_name()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_train: usize, seed: u64) -> DatasetSpec {
        DatasetSpec { n_train, n_val: 3, n_test: 4, seed, ..Default::default() }
    }

    #[test]
    fn splits_respect_step_ranges() {
        let d = generate(&small(10, 1), &OracleConfig::default()).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (10, 3, 4));
        assert!(d.train.iter().chain(&d.val).all(|r| (5..=9).contains(&r.recipe.len())));
        assert!(d.test.iter().all(|r| (10..=11).contains(&r.recipe.len())));
        for r in d.train.iter().chain(&d.val).chain(&d.test) {
            assert_eq!(r.per_step_um.len(), r.recipe.len());
            assert_eq!(r.per_step_um.last().unwrap(), &r.profile_clean_um);
            assert_eq!(r.grid_size, 64);
        }
    }

    #[test]
    fn single_train_record() {
        let d = generate(&small(1, 3), &OracleConfig::default()).unwrap();
        assert_eq!(d.train.len(), 1);
        assert!((5..=9).contains(&d.train[0].recipe.len()));
    }

    #[test]
    fn validation_split_is_distinct_from_train() {
        let d = generate(&small(5, 9), &OracleConfig::default()).unwrap();
        assert!(d.val.iter().all(|v| d.train.iter().all(|t| t.recipe.steps != v.recipe.steps)));
    }

    #[test]
    fn files_are_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = small(6, 11);
        generate_dataset(&spec, &OracleConfig::default(), a.path()).unwrap();
        generate_dataset(&spec, &OracleConfig::default(), b.path()).unwrap();
        for split in Split::ALL {
            let fa = fs::read(a.path().join(split.file_name())).unwrap();
            let fb = fs::read(b.path().join(split.file_name())).unwrap();
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn records_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let written = generate_dataset(&small(4, 5), &OracleConfig::default(), dir.path()).unwrap();
        let read = load_dataset(dir.path()).unwrap();
        assert_eq!(written, read);
    }

    #[test]
    fn record_schema_keys() {
        let d = generate(&small(1, 2), &OracleConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&d.train[0]).unwrap();
        for key in [
            "id",
            "steps",
            "equipment",
            "wafer_location",
            "profile_measured_um",
            "profile_clean_um",
            "per_step_um",
            "grid_size",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let r = generate_dataset(&small(1, 1), &OracleConfig::default(), &blocker.join("sub"));
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
