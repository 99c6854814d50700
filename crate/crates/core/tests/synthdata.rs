//! Statistical properties of the generator and of annotation randomization.

use sanity_core::synthdata::{generate, randomize, GeneratorConfig, RandomizationSpec, CLASS_NAMES};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn permuted_labels_are_independent_of_shapes() {
    let scenes = generate(&GeneratorConfig {
        count: 600,
        seed: 21,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let noisy = randomize(
        &scenes,
        &RandomizationSpec {
            permute_labels: true,
            box_noise_stddev: 0.0,
            seed: 4,
        },
    )
    .unwrap();
    let k = CLASS_NAMES.len();
    let mut table = vec![vec![0.0f64; k]; k];
    for (s, r) in scenes.iter().zip(&noisy) {
        for (obj, ann) in s.objects.iter().zip(&r.annotations) {
            table[obj.kind.class_id()][ann.class_id] += 1.0;
        }
    }
    let n: f64 = table.iter().flatten().sum();
    assert!(n >= 1000.0, "only {n} objects");
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let expected = rows[i] * cols[j] / n;
            chi2 += (table[i][j] - expected).powi(2) / expected;
        }
    }
    let df = ((k - 1) * (k - 1)) as f64;
    let p = 1.0 - ChiSquared::new(df).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi-squared {chi2:.2} on {df} df, p = {p:.4}");

    let agreement = (0..k).map(|i| table[i][i]).sum::<f64>() / n;
    let sd = (1.0 / 3.0 * 2.0 / 3.0 / n).sqrt();
    assert!((agreement - 1.0 / 3.0).abs() < 4.0 * sd, "agreement {agreement:.3}");
}

#[test]
fn box_noise_displacement_matches_half_normal_mean() {
    let scenes = generate(&GeneratorConfig {
        count: 300,
        seed: 3,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let s = 2.0;
    let noisy = randomize(
        &scenes,
        &RandomizationSpec {
            permute_labels: false,
            box_noise_stddev: s,
            seed: 8,
        },
    )
    .unwrap();
    let size = scenes[0].width() as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for (a, b) in scenes.iter().zip(&noisy) {
        for (x, y) in a.annotations.iter().zip(&b.annotations) {
            assert_eq!(x.class_id, y.class_id);
            let pairs = [
                (x.bbox.x_min, y.bbox.x_min),
                (x.bbox.y_min, y.bbox.y_min),
                (x.bbox.x_max, y.bbox.x_max),
                (x.bbox.y_max, y.bbox.y_max),
            ];
            for (p, q) in pairs {
                // Clamping at the borders would bias the mean.
                if q > 0.0 && q < size && p > 3.0 * s && p < size - 3.0 * s {
                    total += (p - q).abs();
                    count += 1;
                }
            }
        }
    }
    let mean = total / count as f64;
    let expected = s * (2.0 / std::f64::consts::PI).sqrt();
    // Standard error of a half-normal mean: s * sqrt(1 - 2/pi) / sqrt(n).
    let se = s * (1.0 - 2.0 / std::f64::consts::PI).sqrt() / (count as f64).sqrt();
    assert!(
        (mean - expected).abs() < 4.0 * se,
        "mean displacement {mean:.4}, expected {expected:.4} (n = {count})"
    );
}
