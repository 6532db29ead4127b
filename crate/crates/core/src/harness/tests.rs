use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{generate, sample_recipe, Dataset, DatasetSpec};
use crate::model::{Model, ModelConfig, Variant};
use crate::oracle::{simulate, OracleConfig};
use crate::recipe::{KnobRanges, Recipe};
use crate::training::Ensemble;

const G: usize = 8;

fn ensemble(variant: Variant, seeds: &[u64]) -> Ensemble {
    let cfg = ModelConfig { variant, d_model: 8, d_ffn: 16, grid_size: G, ..Default::default() };
    let mut members = Vec::new();
    for &s in seeds {
        let mut m = Model::init(cfg.clone(), s).unwrap();
        // Spread the head outputs so members visibly disagree.
        for t in m.params_mut().tensors_mut() {
            t.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i as f64 + s as f64).sin()));
        }
        members.push(m);
    }
    Ensemble::from_members(members).unwrap()
}

fn recipe(seed: u64, steps: usize) -> Recipe {
    sample_recipe(&mut ChaCha8Rng::seed_from_u64(seed), format!("p{seed}"), [steps, steps], &KnobRanges::default())
}

fn oracle() -> OracleConfig {
    OracleConfig { grid_size: G, ..Default::default() }
}

fn data() -> Dataset {
    let spec = DatasetSpec { n_train: 6, n_val: 2, n_test: 5, ..Default::default() };
    generate(&spec, &oracle()).unwrap()
}

#[test]
fn attention_rows_are_distributions() {
    let ens = ensemble(Variant::Baseline, &[1, 2]);
    let r = recipe(3, 6);
    let clean = simulate(&r, &oracle(), false).unwrap().clean.depths_um;
    let s = export_attention(&ens, &r, &clean, &BandConfig::default()).unwrap();
    assert_eq!(s.matrix.len(), G);
    for row in &s.matrix {
        assert_eq!(row.len(), 6);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!((s.top_band.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(s.bottom_band_points, vec![0]);
    // The outermost point is the shallowest for a monotone profile.
    assert!(s.top_band_points.contains(&(G - 1)));
    assert!(!s.top_band_points.contains(&0));
}

#[test]
fn attention_single_step_bands() {
    let ens = ensemble(Variant::Baseline, &[4]);
    let r = recipe(5, 1);
    let clean = simulate(&r, &oracle(), false).unwrap().clean.depths_um;
    let s = export_attention(&ens, &r, &clean, &BandConfig::default()).unwrap();
    assert_eq!(s.top_band, vec![1.0]);
    assert_eq!(s.bottom_band, vec![1.0]);
    assert!(s.bottom_peaks_at_last_step);
}

#[test]
fn attention_requires_baseline() {
    let ens = ensemble(Variant::Weibull, &[1]);
    let r = recipe(1, 3);
    let err = export_attention(&ens, &r, &[0.0; G], &BandConfig::default()).unwrap_err();
    assert!(matches!(err, crate::Error::VariantMismatch { .. }));
}

#[test]
fn percentile_interpolates() {
    assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 0.0), 1.0);
    assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 100.0), 4.0);
    assert!((percentile(&[4.0, 1.0, 3.0, 2.0], 25.0) - 1.75).abs() < 1e-15);
}

#[test]
fn single_step_trace_equals_prediction() {
    for v in Variant::ALL {
        let ens = ensemble(v, &[1, 2, 3]);
        let r = recipe(7, 1);
        let trace = uncertainty_trace(&ens, &r).unwrap();
        let full = ens.predict(&r).unwrap().mixture;
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].mean_um, full.mean_um);
        let sigma: Vec<f64> = full.variance_um2.iter().map(|v| v.sqrt()).collect();
        assert_eq!(trace.steps[0].sigma_um, sigma);
    }
}

#[test]
fn trace_member_variance_accumulates() {
    for v in [Variant::Weibull, Variant::AccumOnly] {
        let ens = ensemble(v, &[1, 2]);
        for s in 0..10 {
            let t = uncertainty_trace(&ens, &recipe(s, 8)).unwrap();
            assert!(t.member_variance_monotone);
            assert_eq!(t.steps.len(), 8);
        }
    }
}

#[test]
fn trace_mixture_sigma_dominates_members() {
    let ens = ensemble(Variant::Weibull, &[1, 2, 3]);
    let r = recipe(11, 6);
    let t = uncertainty_trace(&ens, &r).unwrap();
    let last = t.steps.last().unwrap();
    for g in 0..G {
        let mean_sigma = last.member_variance_um2.iter().map(|v| v[g].sqrt()).sum::<f64>() / 3.0;
        assert!(last.sigma_um[g] >= mean_sigma);
    }
}

#[test]
fn ablation_bundle_plumbing() {
    let w = ensemble(Variant::Weibull, &[1, 2]);
    let a = ensemble(Variant::AccumOnly, &[1, 2]);
    let probes: Vec<Recipe> = (0..4).map(|s| recipe(s, 5)).collect();
    let bundle = run_ablation(&probes, &w, &a, &oracle()).unwrap();
    assert_eq!(bundle.probes.len(), 4);
    assert!(bundle.partials_monotone);
    for (p, r) in bundle.probes.iter().zip(&probes) {
        let sim = simulate(r, &oracle(), false).unwrap();
        let expected: Vec<Vec<f64>> = sim.per_step.into_iter().map(|p| p.depths_um).collect();
        assert_eq!(p.oracle_partials_um, expected);
        assert_eq!(p.weibull_step_rmse_um.len(), 5);
    }
    assert!(matches!(run_ablation(&probes, &a, &w, &oracle()), Err(crate::Error::VariantMismatch { .. })));

    let dir = tempfile::tempdir().unwrap();
    write_ablation(&bundle, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ablation_partials.csv")).unwrap();
    assert!(csv.starts_with("recipe_id,step,x_norm,oracle_um,weibull_um,accum_only_um\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 5 * G);
}

#[test]
fn report_is_complete_and_reproducible() {
    let data = data();
    let base = ensemble(Variant::Baseline, &[1, 2]);
    let weib = ensemble(Variant::Weibull, &[1, 2]);
    let ctx = ReportContext { dataset_seed: Some(7), oracle_seed: Some(0), config: serde_json::json!({"k": 1}) };
    let opts = ReportOptions { overlay_recipes: 2, histogram_bins: 5 };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = generalization_report(&data, &[&base, &weib], &ctx, &opts, d1.path()).unwrap();
    generalization_report(&data, &[&base, &weib], &ctx, &opts, d2.path()).unwrap();
    for f in ["report.json", "profile_overlay.csv", "error_histogram.csv"] {
        let a = std::fs::read(d1.path().join(f)).unwrap();
        assert_eq!(a, std::fs::read(d2.path().join(f)).unwrap(), "{f}");
    }

    let b = r1.variants["baseline"].test;
    let w = r1.variants["weibull"].test;
    let imp = r1.improvement_vs_baseline["weibull"];
    assert_eq!(imp.rmse_measured_um, (b.rmse_measured_um - w.rmse_measured_um) / b.rmse_measured_um);
    assert_eq!(r1.test_records, 5);
    assert_eq!(r1.test_step_counts, vec![10, 11]);
    assert_eq!(r1.seeds.dataset, Some(7));

    let overlay = std::fs::read_to_string(d1.path().join("profile_overlay.csv")).unwrap();
    assert!(overlay.starts_with(
        "recipe_id,x_norm,clean_um,measured_um,baseline_mean_um,baseline_sigma_um,weibull_mean_um,weibull_sigma_um\n"
    ));
    assert_eq!(overlay.lines().count(), 1 + 2 * G);
    let hist = std::fs::read_to_string(d1.path().join("error_histogram.csv")).unwrap();
    let counts: usize = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, 5 * G);

    let err = generalization_report(&data, &[&weib], &ctx, &opts, d1.path());
    assert!(err.is_err());
}
