use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::autodiff::Tensor;

const KINDS15: [&str; 15] = [
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "glass_blur",
    "zoom_blur",
    "brightness",
    "snow",
    "frost",
    "fog",
    "contrast",
    "elastic_transform",
    "pixelate",
    "jpeg_compression",
];

const STANDARD: [f64; 15] = [
    19.90, 20.37, 27.44, 12.90, 23.26, 25.97, 71.08, 89.38, 71.21, 74.83, 45.69, 58.36, 17.54, 23.45, 45.06,
];

const RAND3_UPDATE: [f64; 15] = [
    26.27, 25.26, 31.08, 20.03, 31.89, 40.51, 88.19, 89.31, 71.52, 74.90, 51.65, 70.21, 19.66, 30.58, 43.43,
];

fn fixture_records() -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for (method, col) in [("standard", STANDARD), ("cvp_rand3_update", RAND3_UPDATE)] {
        for (k, v) in KINDS15.iter().zip(col) {
            out.push(EvalRecord::new(method, *k, 5, v / 100.0, 1));
        }
    }
    out
}

#[test]
fn per_kind_accuracy_table_averages() {
    let s = aggregate(&fixture_records(), Some("standard")).unwrap();
    let std = s.method("standard").unwrap();
    assert!((std.avg_acc - 41.76).abs() < 0.01, "{}", std.avg_acc);
    assert!((std.avg_error - 58.24).abs() < 0.01, "{}", std.avg_error);
    let cvp = s.method("cvp_rand3_update").unwrap();
    assert!((cvp.avg_acc - 47.63).abs() < 0.01, "{}", cvp.avg_acc);
    assert!((cvp.diff.unwrap() - -5.87).abs() < 0.01, "{:?}", cvp.diff);
    assert!(std.diff.is_none() && s.is_complete());
}

#[test]
fn per_severity_rows_average_to_the_same_overall() {
    let rows = [
        ("standard", [59.68, 47.88, 40.31, 32.75, 28.20]),
        ("cvp_rand3_update", [68.07, 54.73, 45.96, 37.79, 31.61]),
    ];
    let mut recs = Vec::new();
    for (m, vals) in rows {
        for (s, v) in vals.iter().enumerate() {
            recs.push(EvalRecord::new(m, "all", s as u8 + 1, v / 100.0, 1));
        }
    }
    let s = aggregate(&recs, None).unwrap();
    assert!((s.method("standard").unwrap().avg_acc - 41.76).abs() < 0.01);
    assert!((s.method("cvp_rand3_update").unwrap().avg_acc - 47.63).abs() < 0.01);
}

#[test]
fn single_record_summary_is_the_record() {
    let r = EvalRecord::new("cvp", "fog", 3, 0.625, 16);
    let s = aggregate(&[r], None).unwrap();
    assert_eq!(s.cell("cvp", "fog", 3), Some(62.5));
    assert_eq!(s.kind("cvp", "fog"), Some(62.5));
    assert_eq!(s.severity("cvp", 3), Some(62.5));
    assert_eq!(s.method("cvp").unwrap().avg_acc, 62.5);
}

#[test]
fn incomplete_grid_is_flagged_and_failed_cells_are_missing() {
    let mut bad = EvalRecord::new("cvp", "fog", 2, 0.0, 16);
    bad.failure = Some("restoration mismatch".into());
    let recs = vec![
        EvalRecord::new("standard", "fog", 1, 0.5, 16),
        EvalRecord::new("standard", "fog", 2, 0.25, 16),
        EvalRecord::new("cvp", "fog", 1, 0.75, 16),
        bad,
    ];
    let s = aggregate(&recs, Some("standard")).unwrap();
    assert!(!s.is_complete());
    assert_eq!(s.cell("cvp", "fog", 2), None);
    let cvp = s.method("cvp").unwrap();
    assert_eq!((cvp.cells_present, cvp.cells_expected), (1, 2));
    assert_eq!(cvp.avg_acc, 75.0);
}

#[test]
fn batches_are_image_weighted_within_a_cell() {
    let mut a = EvalRecord::new("m", "k", 1, 1.0, 16);
    a.batch_index = 0;
    let mut b = EvalRecord::new("m", "k", 1, 0.0, 8);
    b.batch_index = 1;
    let s = aggregate(&[a, b], None).unwrap();
    assert!((s.cell("m", "k", 1).unwrap() - 100.0 * 16.0 / 24.0).abs() < 1e-12);
}

#[test]
fn aggregate_rejects_empty_and_unknown_baseline() {
    assert!(aggregate(&[], None).is_err());
    assert!(aggregate(&[EvalRecord::new("a", "k", 1, 0.5, 1)], Some("b")).is_err());
}

#[test]
fn error_rate_counting() {
    let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
    assert_eq!(error_rate(&labels, &labels).unwrap(), 0.0);
    let wrong: Vec<usize> = labels.iter().map(|l| (l + 1) % 4).collect();
    assert_eq!(error_rate(&wrong, &labels).unwrap(), 1.0);
    let mut three = labels.clone();
    for i in [0, 5, 9] {
        three[i] = (three[i] + 2) % 4;
    }
    assert_eq!(error_rate(&three, &labels).unwrap(), 0.1875);
    assert!(error_rate(&[], &[]).is_err());
}

fn table(model: &str, vals: &[(&str, u8, f64)]) -> ErrorTable {
    let mut t = ErrorTable::new(model);
    for &(k, s, e) in vals {
        t.insert(k, s, e).unwrap();
    }
    t
}

#[test]
fn mce_fixed_points_and_hand_example() {
    let reference = table("ref", &[("a", 1, 0.4), ("a", 2, 0.6), ("b", 1, 0.2), ("b", 2, 0.3)]);
    assert_eq!(mce(&reference, &reference).unwrap(), 100.0);
    let half = table("half", &[("a", 1, 0.2), ("a", 2, 0.3), ("b", 1, 0.1), ("b", 2, 0.15)]);
    assert!((mce(&half, &reference).unwrap() - 50.0).abs() < 1e-12);
    // a: (0.1 + 0.3)/(0.4 + 0.6) = 0.4; b: (0.25 + 0.25)/(0.2 + 0.3) = 1.0
    let m = table("m", &[("a", 1, 0.1), ("a", 2, 0.3), ("b", 1, 0.25), ("b", 2, 0.25)]);
    assert!((mce(&m, &reference).unwrap() - 70.0).abs() < 1e-12);
}

#[test]
fn mce_halves_when_reference_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mut m = ErrorTable::new("m");
        let mut r = ErrorTable::new("r");
        let mut r2 = ErrorTable::new("r2");
        for k in ["a", "b", "c"] {
            for s in 1..=5 {
                m.insert(k, s, rng.random_range(0.0..1.0)).unwrap();
                let e: f64 = rng.random_range(0.01..0.5);
                r.insert(k, s, e).unwrap();
                r2.insert(k, s, 2.0 * e).unwrap();
            }
        }
        assert_eq!(mce(&m, &r2).unwrap() * 2.0, mce(&m, &r).unwrap());
    }
}

#[test]
fn mce_rejects_misaligned_and_degenerate_reference() {
    let a = table("a", &[("a", 1, 0.1)]);
    let b = table("b", &[("a", 2, 0.1)]);
    assert!(mce(&a, &b).is_err());
    let z = table("z", &[("a", 1, 0.0)]);
    assert!(mce(&a, &z).is_err());
}

fn gaussian_set(n: usize, d: usize, shift: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0f32, 1.0).unwrap();
    Tensor::from_fn(vec![n, d], |_| nd.sample(&mut rng) + shift)
}

#[test]
fn swd_identical_sets_and_point_masses() {
    let a = gaussian_set(64, 12, 0.0, 1);
    assert!(swd(&a, &a, 128, 2.0, 7).unwrap().mean < 1e-6);
    let zeros = Tensor::zeros(vec![10, 1]);
    let cs = Tensor::full(vec![10, 1], -2.5);
    let s = swd(&zeros, &cs, 16, 2.0, 0).unwrap();
    assert!((s.mean - 2.5).abs() < 1e-9 && s.std < 1e-9);
}

/// Quantile-function form of the 1-D distance: for equal-size samples the
/// i-th order statistics pair up; order statistics found by rank counting.
fn brute_1d(a: &[f64], b: &[f64], p: f64) -> f64 {
    let order = |v: &[f64]| {
        let mut out = vec![0.0; v.len()];
        for (i, &x) in v.iter().enumerate() {
            let rank = v.iter().enumerate().filter(|&(j, &y)| y < x || (y == x && j < i)).count();
            out[rank] = x;
        }
        out
    };
    let (oa, ob) = (order(a), order(b));
    (oa.iter().zip(&ob).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / a.len() as f64).powf(1.0 / p)
}

#[test]
fn swd_matches_brute_force_per_projection() {
    let (n, d) = (80, 6);
    let a = gaussian_set(n, d, 0.0, 11);
    let b = gaussian_set(n, d, 0.8, 12);
    let per = swd_per_projection(&a, &b, 32, 2.0, 5).unwrap();
    let dirs = projection_directions(d, 32, 5);
    for (dir, got) in dirs.iter().zip(&per) {
        let proj = |t: &Tensor| -> Vec<f64> { (0..n).map(|i| (0..d).map(|j| t.data()[i * d + j] as f64 * dir[j]).sum()).collect() };
        let want = brute_1d(&proj(&a), &proj(&b), 2.0);
        assert!((got - want).abs() <= 0.01 * want, "{got} vs {want}");
    }
}

#[test]
fn swd_symmetric_and_monotone_in_shift() {
    let a = gaussian_set(50, 8, 0.0, 21);
    let b = gaussian_set(50, 8, 0.3, 22);
    assert_eq!(swd(&a, &b, 64, 2.0, 1).unwrap(), swd(&b, &a, 64, 2.0, 1).unwrap());
    let mut last = 0.0;
    for shift in [0.0f32, 0.5, 1.0, 2.0, 4.0] {
        let s = swd(&a, &a.map(|v| v + shift), 64, 2.0, 1).unwrap().mean;
        assert!(s >= last, "{s} < {last} at shift {shift}");
        last = s;
    }
}

#[test]
fn swd_rejects_mismatch() {
    assert!(swd(&Tensor::zeros(vec![4, 3]), &Tensor::zeros(vec![4, 2]), 8, 2.0, 0).is_err());
    assert!(swd(&Tensor::zeros(vec![4, 3]), &Tensor::zeros(vec![4, 3]), 0, 2.0, 0).is_err());
}

fn textured(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![3, 24, 24], |i| {
        let (y, x) = ((i / 24) % 24, i % 24);
        (0.5 + 0.3 * ((x as f32 * 0.7).sin() * (y as f32 * 0.4).cos()) + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
    })
}

#[test]
fn ssim_identity_and_constant_closed_form() {
    let x = textured(1);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    let (a, b) = (0.5f64, 0.6f64);
    let c1 = 1e-4;
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let got = ssim(&Tensor::full(vec![3, 16, 16], 0.5), &Tensor::full(vec![3, 16, 16], 0.6)).unwrap();
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn ssim_decreases_with_noise_and_stays_bounded() {
    let x = textured(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base: Vec<f32> = (0..x.len()).map(|_| Normal::new(0.0f32, 1.0).unwrap().sample(&mut rng)).collect();
    let mut last = 1.0;
    for sigma in [0.02f32, 0.05, 0.1] {
        let y = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(&base)
                .map(|(&v, &n)| (v + sigma * n).clamp(0.0, 1.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let s = ssim(&x, &y).unwrap();
        assert!(s < last && (-1.0..=1.0).contains(&s), "{s} at σ={sigma}");
        last = s;
    }
    let inv = x.map(|v| 1.0 - v);
    assert!((-1.0..=1.0).contains(&ssim(&x, &inv).unwrap()));
}

#[test]
fn ssim_rejects_small_or_mismatched() {
    assert!(ssim(&Tensor::zeros(vec![1, 10, 10]), &Tensor::zeros(vec![1, 10, 10])).is_err());
    assert!(ssim(&Tensor::zeros(vec![1, 12, 12]), &Tensor::zeros(vec![1, 12, 13])).is_err());
}

#[test]
fn reversal_residual_fixed_points() {
    let clean = textured(3).reshape(vec![1, 3, 24, 24]).unwrap();
    let clean = crate::autodiff::Tensor::concat_outer(&[clean.clone(), clean]).unwrap();
    let delta = Tensor::from_fn(clean.shape().to_vec(), |i| ((i % 7) as f32 - 3.0) * 0.01);
    let corrupted = clean.zip_map(&delta, |a, d| a + d).unwrap();
    let perfect = corrupted.zip_map(&delta, |c, d| c - d).unwrap();
    assert!(reversal_residual(&clean, &perfect).unwrap() < 1e-6);
    let none = reversal_residual(&clean, &corrupted).unwrap();
    assert!((none - delta.l2_norm() / 2.0).abs() < 1e-6);
}
