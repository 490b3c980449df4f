use calibra::fusion::{combine, fuse_pixel, sharpen, FusionConfig};
use proptest::prelude::*;

fn unit_map(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

fn weights() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.01..2.0f64, 0.01..2.0f64, 0.01..2.0f64)
}

proptest! {
    #[test]
    fn outputs_lie_on_the_simplex(
        c in unit_map(16), s in unit_map(16), p in unit_map(16),
        (lambda, mu, nu) in weights(),
        temperature in 0.05..2.0f64,
        flags in (any::<bool>(), any::<bool>(), any::<bool>()),
    ) {
        let cfg = FusionConfig {
            lambda, mu, nu, temperature,
            sharpen: flags.0,
            renormalize_weights: flags.1,
            use_saliency: flags.2,
        };
        let out = combine(&c, &s, &p, 4, 4, &cfg).unwrap();
        for pair in &out.pairs {
            prop_assert!(pair[0] >= 0.0 && pair[1] >= 0.0);
            prop_assert!((pair[0] + pair[1] - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn sharpening_concentrates(a in 0.0..=1.0f64, temperature in 0.01..1.0f64) {
        let d = [a, 1.0 - a];
        let out = sharpen(&d, temperature);
        let before = d[0].max(d[1]);
        let after = out[0].max(out[1]);
        prop_assert!(after >= before - 1e-12);
        prop_assert!((out[0] + out[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn low_temperature_tends_to_one_hot(a in 0.0..=1.0f64) {
        prop_assume!((a - 0.5).abs() > 0.01);
        let out = sharpen(&[a, 1.0 - a], 1e-3);
        let hot = if a > 0.5 { 0 } else { 1 };
        prop_assert!(out[hot] > 1.0 - 1e-6);
    }

    #[test]
    fn swapping_class_channels_swaps_output(
        pairs in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 3),
        w in prop::collection::vec(0.01..1.0f64, 3),
        norm in 0.1..10.0f64,
        temperature in 0.1..1.0f64,
    ) {
        let direct: Vec<[f64; 2]> = pairs.iter().map(|&(a, b)| [a, b]).collect();
        let swapped: Vec<[f64; 2]> = pairs.iter().map(|&(a, b)| [b, a]).collect();
        let x = fuse_pixel(&direct, &w, norm, Some(temperature));
        let y = fuse_pixel(&swapped, &w, norm, Some(temperature));
        prop_assert!((x[0] - y[1]).abs() <= 1e-12 && (x[1] - y[0]).abs() <= 1e-12);
    }

    #[test]
    fn source_order_symmetry(
        c in unit_map(9), s in unit_map(9), p in unit_map(9),
        (lambda, mu, nu) in weights(),
    ) {
        let cfg = FusionConfig { lambda, mu, nu, ..FusionConfig::default() };
        let swapped = FusionConfig { lambda: mu, mu: lambda, ..cfg };
        let a = combine(&c, &s, &p, 3, 3, &cfg).unwrap();
        let b = combine(&s, &c, &p, 3, 3, &swapped).unwrap();
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            prop_assert!((x[0] - y[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn equal_sources_ignore_weights(
        m in unit_map(9),
        (lambda, mu, nu) in weights(),
    ) {
        prop_assume!(m.iter().any(|&v| v > 0.0));
        let a = combine(&m, &m, &m, 3, 3, &FusionConfig { lambda, mu, nu, ..FusionConfig::default() }).unwrap();
        let b = combine(&m, &m, &m, 3, 3, &FusionConfig::default()).unwrap();
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            prop_assert!((x[0] - y[0]).abs() <= 1e-12);
        }
    }
}

#[test]
fn weight_scale_is_irrelevant_after_renormalisation() {
    let c = [0.1, 0.9, 0.4, 0.6];
    let s = [0.3, 0.2, 0.8, 0.0];
    let p = [0.7, 0.5, 0.5, 1.0];
    let a = combine(&c, &s, &p, 2, 2, &FusionConfig::default()).unwrap();
    let exact = FusionConfig {
        lambda: 3.0 / 11.0,
        mu: 4.0 / 11.0,
        nu: 4.0 / 11.0,
        ..FusionConfig::default()
    };
    let b = combine(&c, &s, &p, 2, 2, &exact).unwrap();
    for (x, y) in a.pairs.iter().zip(&b.pairs) {
        assert!((x[0] - y[0]).abs() < 1e-12);
    }
    let w = a.provenance.effective_weights;
    assert!((w[0] - 0.27273).abs() < 1e-5 && (w[1] - 0.36364).abs() < 1e-5);
}

#[test]
fn pseudo_labels_keep_the_argmax_of_the_mixture() {
    // pair/norm with a whole-image norm squeezes every pixel towards 0.5;
    // the ordering of fused foreground values still follows the sources
    let c: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
    let out = combine(&c, &c, &c, 8, 8, &FusionConfig::default()).unwrap();
    let fg = out.foreground();
    assert!(fg.windows(2).all(|w| w[1] > w[0]));
    assert!(fg[0] < 0.5 && fg[63] > 0.5);
}
