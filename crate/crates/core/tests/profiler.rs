//! Closed-form cost accounting checked against the materialized network.

use amcrn::model::{Amcrn, AmcrnConfig, Structure};
use amcrn::profiler::*;

#[test]
fn count_matches_materialized_parameters() {
    let mut configs = vec![AmcrnConfig::tiny(10), AmcrnConfig::tiny(3).with_channels(32)];
    for (_, s) in Structure::variants() {
        configs.push(AmcrnConfig {
            structure: s,
            ..AmcrnConfig::tiny(7)
        });
    }
    configs.push(AmcrnConfig {
        pointwise_fusion: true,
        blstm_layers: 3,
        ..AmcrnConfig::tiny(5)
    });
    for c in configs {
        let m = Amcrn::new(c.clone(), 0).unwrap();
        assert_eq!(count_params(&c, false).unwrap(), m.num_params(false) as u64, "{c:?}");
        assert_eq!(count_params(&c, true).unwrap(), m.num_params(true) as u64, "{c:?}");
    }
}

#[test]
fn default_config_is_in_the_reported_range() {
    let n = count_params(&AmcrnConfig::default(), false).unwrap();
    assert!((8_000_000..=15_000_000).contains(&n), "{n}");
}

#[test]
fn macs_are_affine_in_frames() {
    let c = AmcrnConfig::default();
    let (a, b, d) = (
        count_macs(&c, 1.0).unwrap(),
        count_macs(&c, 2.0).unwrap(),
        count_macs(&c, 4.0).unwrap(),
    );
    // 100, 200 and 400 frames: the third point is predicted exactly
    let slope = (b - a) / 100;
    let intercept = a - slope * 100;
    assert_eq!(d, intercept + slope * 400);
    assert!(intercept > 0);
}

#[test]
fn duration_ratios() {
    for c in [AmcrnConfig::default(), AmcrnConfig::tiny(10)] {
        let m2 = count_macs(&c, 2.0).unwrap() as f64;
        let r3 = count_macs(&c, 3.0).unwrap() as f64 / m2;
        let r5 = count_macs(&c, 5.0).unwrap() as f64 / m2;
        assert!((r3 / 1.5 - 1.0).abs() < 0.02, "{r3}");
        assert!((r5 / 2.5 - 1.0).abs() < 0.02, "{r5}");
    }
}

#[test]
fn doubling_channels_quadruples_conv_macs() {
    let small = AmcrnConfig::tiny(10).with_channels(32);
    let big = AmcrnConfig::tiny(10).with_channels(64);
    let conv = |c: &AmcrnConfig| -> u64 {
        cost_report(c, 2.0)
            .unwrap()
            .layers
            .iter()
            .filter(|l| l.name.starts_with("mcb") && (l.name.ends_with("conv_in") || l.name.ends_with("conv_out") || l.name.contains("scale")))
            .map(|l| l.macs)
            .sum()
    };
    assert_eq!(conv(&big), 4 * conv(&small));
}

#[test]
fn reports_are_pure() {
    let c = AmcrnConfig::default();
    assert_eq!(
        emit_cost_report(&c, &DEFAULT_DURATIONS).unwrap(),
        emit_cost_report(&c, &DEFAULT_DURATIONS).unwrap()
    );
    assert_eq!(DEFAULT_DURATIONS, [2.0, 3.0, 5.0]);
}
