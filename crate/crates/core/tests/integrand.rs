use filmrelax::integrand::{rank_one_factor, to_rows, Family, IntegrandError};
use filmrelax::*;
use proptest::prelude::*;

fn mat() -> impl Strategy<Value = Mat3> {
    proptest::array::uniform9(-2.0f64..2.0).prop_map(|a| Mat3::from_row_slice(&a))
}

fn families() -> Vec<StoredEnergyDensity> {
    let a = Mat3::new(0.3, 0.0, 0.0, -0.2, 0.0, 0.0, 0.5, 0.0, 0.0);
    let mut c = [[0.0; 9]; 9];
    for i in 0..9 {
        c[i][i] = 1.0 + 0.25 * i as f64;
        if i + 1 < 9 {
            c[i][i + 1] = 0.2;
            c[i + 1][i] = 0.2;
        }
    }
    vec![
        StoredEnergyDensity::squared_norm(),
        StoredEnergyDensity::p_norm(3.0, 0.7).unwrap(),
        StoredEnergyDensity::p_norm(1.5, 2.0).unwrap(),
        StoredEnergyDensity::anisotropic_quadratic(c, &Mat3::zeros()).unwrap(),
        StoredEnergyDensity::anisotropic_quadratic(c, &a).unwrap(),
        StoredEnergyDensity::two_well(&cell::symmetric_wells(&a), 1.5).unwrap(),
        StoredEnergyDensity::squared_norm()
            .with_modulation(Modulation::two_layer(1.0, 3.0))
            .unwrap(),
        StoredEnergyDensity::shifted_quadratic(&a)
            .unwrap()
            .with_modulation(Modulation::checkerboard(0.5, 0.5, 2.0))
            .unwrap(),
    ]
}

#[test]
fn derived_growth_constants_hold_on_quasi_random_samples() {
    for w in families() {
        let r = w.verify_growth(2000);
        assert!(r.passed(), "{:?}: {:?}", w.family(), r.violations.first());
    }
}

#[test]
fn laminate_family_is_composite_and_convex() {
    let w = &families()[6];
    assert_eq!(w.family(), Family::Composite);
    assert!(w.is_convex());
    assert!(!families()[5].is_convex());
    let g = w.growth();
    assert_eq!((g.beta_lower, g.beta_upper), (1.0, 3.0));
}

#[test]
fn points_outside_the_cylinder_are_rejected() {
    let w = StoredEnergyDensity::squared_norm();
    let x = MaterialPoint::new([0.5, 0.5], 1.5);
    assert!(matches!(
        w.evaluate(&x, &Mat3::identity()),
        Err(IntegrandError::OutsideDomain { .. })
    ));
}

#[test]
fn serde_roundtrip_keeps_hash() {
    for w in families() {
        let s = serde_json::to_string(&w).unwrap();
        let back: StoredEnergyDensity = serde_json::from_str(&s).unwrap();
        assert_eq!(back.hash(), w.hash());
    }
}

#[test]
fn two_well_fiber_infimum_finds_the_well() {
    // wells ±A with A = a ⊗ e3: the fiber over F̄ = 0 reaches zero at z = ±a
    let a = Vec3::new(0.2, -0.1, 0.4) * Vec3::z().transpose();
    let w = StoredEnergyDensity::two_well(&cell::symmetric_wells(&a), 1.0).unwrap();
    let fib = w.fiber_infimum(&MaterialPoint::new([0.5, 0.5], 0.0), &Mat3x2::zeros()).unwrap();
    assert!(fib.value.abs() < 1e-14);
    assert!((fib.z.abs() - a.column(2).abs()).norm() < 1e-7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stress_matches_central_differences(f in mat(), k in 0usize..8, x3 in -1.0f64..1.0) {
        let w = &families()[k];
        let x = MaterialPoint::new([0.3, 0.7], x3);
        let s = w.stress(&x, &f).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut fp = f;
                let mut fm = f;
                fp[(i, j)] += h;
                fm[(i, j)] -= h;
                let fd = (w.evaluate(&x, &fp).unwrap() - w.evaluate(&x, &fm).unwrap()) / (2.0 * h);
                prop_assert!((fd - s[(i, j)]).abs() <= 1e-6 * (1.0 + s.abs().max()));
            }
        }
    }

    #[test]
    fn join_split_are_inverse(f in mat()) {
        let (fb, z) = split(&f);
        prop_assert_eq!(join(&fb, &z), f);
    }

    #[test]
    fn fiber_infimum_is_below_every_start(f in mat(), k in 0usize..8) {
        let w = &families()[k];
        let (fb, _) = split(&f);
        let x = MaterialPoint::new([0.2, 0.9], 0.1);
        let fib = w.fiber_infimum(&x, &fb).unwrap();
        let at = |z: Vec3| w.evaluate(&x, &join(&fb, &z)).unwrap();
        prop_assert!(fib.value <= at(Vec3::zeros()) + 1e-12);
        prop_assert!((fib.value - at(fib.z)).abs() <= 1e-12 * fib.value.abs().max(1.0));
    }

    #[test]
    fn rank_one_factor_reconstructs(a in proptest::array::uniform3(-2.0f64..2.0),
                                    n in proptest::array::uniform3(-2.0f64..2.0)) {
        let (a, n) = (Vec3::from(a), Vec3::from(n));
        prop_assume!(a.norm() > 1e-3 && n.norm() > 1e-3);
        let d = a * n.transpose();
        let (fa, fnn) = rank_one_factor(&d).unwrap();
        prop_assert!((fa * fnn.transpose() - d).norm() <= 1e-10 * d.norm());
        prop_assert!((fnn.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn modulation_stays_within_bounds(x1 in 0.0f64..1.0, x2 in 0.0f64..1.0, x3 in -1.0f64..1.0) {
        let m = Modulation::Product {
            factors: vec![
                Modulation::checkerboard(0.25, 1.0, 2.0),
                Modulation::Sinusoid { mean: 2.0, amplitude: 0.5, wavevector: [1.0, 0.0, 0.5] },
            ],
        };
        let (lo, hi) = m.bounds();
        let v = m.value(&MaterialPoint::new([x1, x2], x3)).unwrap();
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}

#[test]
fn laminate_rows_are_reported_row_major() {
    let m = Mat3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0);
    assert_eq!(to_rows(&m)[1], [4.0, 5.0, 6.0]);
}
