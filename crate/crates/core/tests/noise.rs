use chiral_core::fermion::{vortex_gap, VortexGap};
use chiral_core::lattice::{build_lattice, Geometry, PlaquetteKind};
use chiral_core::noise::*;
use chiral_core::transfer::DotOptions;
use proptest::prelude::*;

fn model(t: f64) -> NoiseModel {
    NoiseModel {
        temperature: t,
        species: vec![
            VortexSpecies { kind: PlaquetteKind::Triangle, gap: 0.17, count: 200 },
            VortexSpecies { kind: PlaquetteKind::Dodecagon, gap: 0.14, count: 100 },
        ],
        perimeter: 80.0,
        velocity: 0.25,
        lambda: 0.3,
        kappa_prime: 0.05,
        bath: Bath::Thermal,
        xi: 0.55,
    }
}

#[test]
fn thermal_correction_is_quadratic_in_temperature() {
    let m = model(0.0);
    let ts: Vec<f64> = (0..9).map(|i| 1e-3 * 2f64.powf(i as f64 * 0.5)).collect();
    let corr: Vec<f64> = ts.iter().map(|&t| decay_interaction(&m, 0.4, t).unwrap().correction).collect();
    let fit = power_fit(&ts, &corr).unwrap();
    assert!((fit.exponent - 2.0).abs() < 1e-9);
}

#[test]
fn suppression_uses_the_computed_pair_cost() {
    let lat = build_lattice(&Geometry::torus(12, 12)).unwrap();
    let gaps: Vec<VortexGap> = [PlaquetteKind::Triangle, PlaquetteKind::Dodecagon]
        .iter()
        .map(|&k| vortex_gap(&lat, 1.0, k, &[3, 4, 5, 6], 1.0).unwrap())
        .collect();
    let m = model(0.05).with_vortex_gaps(&lat, &gaps);
    let dv = gaps.iter().map(|g| g.gap).fold(f64::INFINITY, f64::min);
    assert_eq!(m.min_gap(), dv);
    let f = bulk_suppression(&m, 0.0).unwrap();
    assert!((f - (-2.0 * dv / 0.05).exp()).abs() < 1e-15 * f.max(1e-300));
    assert_eq!(m.species[0].count, lat.count_plaquettes(PlaquetteKind::Triangle));
}

#[test]
fn rate_table_layout() {
    let csv = rate_table(&model(0.0), &[0.1, 0.2], &[0.0, 0.01]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "p,T,gamma");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0.1,0,"));
}

#[test]
fn edge_vortex_spoils_a_calibrated_transfer() {
    let lat = build_lattice(&Geometry::droplet(8, 24)).unwrap();
    let bd = &lat.boundaries[0];
    let (a, b) = (bd.dangling[bd.dangling.len() / 8], bd.dangling[bd.dangling.len() / 2]);
    let base = SweepBase { kappa: 1.0, site_a: a, site_b: b, energy: 0.2, dot: DotOptions { ratio: 0.025, ..DotOptions::default() } };
    let seeds: Vec<u64> = (0..10).collect();
    let far = DisorderSpec { jitter: 0.05, vortex_pairs: 1, min_edge_distance: 2.75, stray_edge_vortex: false };
    let r = disorder_sweep(&lat, &base, &far, &seeds).unwrap();
    assert!(r.rows.iter().all(|x| x.vortices == 2));
    assert!(r.median_drop < 0.01, "{}", r.median_drop);
    let stray = DisorderSpec { jitter: 0.0, vortex_pairs: 0, min_edge_distance: 2.75, stray_edge_vortex: true };
    let r = disorder_sweep(&lat, &base, &stray, &seeds).unwrap();
    assert!(r.median_drop > 0.05, "{}", r.median_drop);
    let crowded = DisorderSpec { vortex_pairs: 20, ..far };
    assert!(disorder_sweep(&lat, &base, &crowded, &[0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rates_are_nonnegative_and_pure(t in 0.0f64..0.5, p in 1e-3f64..1.0, ell in 0.0f64..500.0, d in 0.0f64..20.0) {
        let m = model(t);
        let r = decay_interaction(&m, p, t).unwrap();
        prop_assert!(r.gamma >= 0.0 && r.correction >= 0.0);
        prop_assert_eq!(r, decay_interaction(&m, p, t).unwrap());
        prop_assert!(vortex_density(&m, t).unwrap() >= 0.0);
        let e = decay_edge_noise(&m, 0.2, t, ell).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(e.to_bits(), decay_edge_noise(&m, 0.2, t, ell).unwrap().to_bits());
        let s = bulk_suppression(&m, d).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn golden_rule_is_quadratic_in_coupling(l in 0.01f64..10.0, p in 0.01f64..1.0) {
        let a = golden_rule_numeric(1.0, 0.25, p, 1e-6).unwrap().gamma;
        let b = golden_rule_numeric(l, 0.25, p, 1e-6).unwrap().gamma;
        prop_assert!((b / a / (l * l) - 1.0).abs() < 1e-12);
    }
}
