use filmrelax::cell::*;
use filmrelax::tabulate::*;
use filmrelax::*;
use proptest::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};

fn template() -> CellProblemSpec {
    CellProblemSpec::new(MaterialPoint::new([0.5, 0.5], 0.0), Mat3x2::zeros())
        .with_cells(3)
        .unwrap()
}

fn base() -> Mat3x2 {
    Mat3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)
}

/// Stretches in `F11` and `F22` plus one transverse `z` axis.
fn stretch_grid() -> SampleGrid {
    SampleGrid::frozen([0.5, 0.5], &base())
        .with_axis(ParamAxis::f_entry(0, 0, -0.5, 0.5, 3))
        .with_axis(ParamAxis::f_entry(1, 1, -0.5, 0.5, 3))
        .with_axis(ParamAxis::z_entry(2, -1.0, 1.0, 3))
}

fn squared_table() -> DensityTable {
    let w = StoredEnergyDensity::squared_norm();
    DensityTable::build(&w, &stretch_grid(), TableKind::Cosserat, &template(), None, None).unwrap()
}

#[test]
fn one_point_grid_is_a_single_solve() {
    let w = StoredEnergyDensity::squared_norm()
        .with_modulation(Modulation::two_layer(1.0, 3.0))
        .unwrap();
    let f = Mat3x2::new(1.0, 0.2, -0.3, 0.8, 0.5, 0.1);
    let grid = SampleGrid::frozen([0.5, 0.5], &f);
    let t = DensityTable::build(&w, &grid, TableKind::Membrane, &template(), None, None).unwrap();
    let mut spec = template();
    spec.f_bar = f;
    let direct = membrane_density(&w, &spec).unwrap();
    assert_eq!(t.values(), &[direct.value]);
    assert_eq!(t.query([0.5, 0.5], &f, &Vec3::zeros()).unwrap(), direct.value);
}

#[test]
fn squared_norm_nodes_match_closed_form() {
    let t = squared_table();
    assert_eq!(t.invalid_count(), 0);
    for node in 0..t.values().len() {
        let (_, f, z) = t.grid().node_point(node);
        let expect = f.norm_squared() + z.norm_squared();
        assert!(within(t.values()[node], expect, 1e-4), "node {node}");
    }
    assert!(t.z_convexity_defects(2e-4).is_empty());
}

#[test]
fn off_node_queries_stay_within_the_interpolation_bound() {
    // piecewise-multilinear interpolation of a separable quadratic errs by at
    // most Σ_k h_k²/4 · |d_k|² per axis direction d_k
    let t = squared_table();
    let w = StoredEnergyDensity::squared_norm();
    let bound = 0.5f64.powi(2) / 4.0 * 2.0 + 1.0f64.powi(2) / 4.0;
    for (s1, s2, zz) in [(0.13, -0.31, 0.4), (-0.45, 0.2, -0.77), (0.01, 0.49, 0.05)] {
        let mut f = base();
        f[(0, 0)] += s1;
        f[(1, 1)] += s2;
        let z = Vec3::new(0.0, 0.0, zz);
        let q = t.query([0.5, 0.5], &f, &z).unwrap();
        let mut spec = template().with_z(z);
        spec.f_bar = f;
        let direct = cosserat_density(&w, &spec).unwrap().value;
        assert!(q >= direct - 1e-6 && q - direct <= bound, "{q} vs {direct}");
    }
}

#[test]
fn resumed_build_equals_fresh_build() {
    let dir = tempfile::tempdir().unwrap();
    let w = StoredEnergyDensity::p_norm(3.0, 1.0).unwrap();
    let grid = SampleGrid::frozen([0.5, 0.5], &base())
        .with_axis(ParamAxis::f_entry(2, 0, 0.0, 0.6, 4))
        .with_axis(ParamAxis::z_entry(0, -0.5, 0.5, 5));
    let fresh = DensityTable::build(&w, &grid, TableKind::Cosserat, &template(), None, None).unwrap();

    // a checkpoint with the second half of the nodes still pending
    let full = dir.path().join("full.tbl");
    fresh.save(&full).unwrap();
    let mut bytes = std::fs::read(&full).unwrap();
    let n = fresh.values().len();
    let status = bytes.len() - n;
    for b in &mut bytes[status + n / 2..] {
        *b = 0;
    }
    let partial = dir.path().join("partial.tbl");
    std::fs::write(&partial, &bytes).unwrap();
    let calls = AtomicUsize::new(0);
    let progress = |_: usize, _: usize| {
        calls.fetch_add(1, Ordering::Relaxed);
    };
    let resumed =
        DensityTable::build(&w, &grid, TableKind::Cosserat, &template(), Some(&partial), Some(&progress)).unwrap();
    assert_eq!(resumed, fresh);
    assert!(calls.load(Ordering::Relaxed) >= 1);
    assert_eq!(DensityTable::load(&partial, Some(&w.hash())).unwrap(), fresh);
}

#[test]
fn files_roundtrip_and_refuse_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let t = squared_table();
    let path = dir.path().join("t.tbl");
    t.save(&path).unwrap();
    let hash = StoredEnergyDensity::squared_norm().hash();
    let back = DensityTable::load(&path, Some(&hash)).unwrap();
    assert_eq!(back, t);
    assert!(back.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let other = StoredEnergyDensity::p_norm(3.0, 1.0).unwrap().hash();
    assert!(matches!(
        DensityTable::load(&path, Some(&other)),
        Err(TableError::HashMismatch { .. })
    ));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(DensityTable::load(&path, None), Err(TableError::Parse(_))));
}

#[test]
fn csv_export_lists_every_node() {
    let t = squared_table();
    let mut out = Vec::new();
    t.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("node,x1,x2,t0,t1,t2,F11"));
    assert_eq!(lines.count(), t.values().len());
}

#[test]
fn invalid_grids_are_rejected() {
    let w = StoredEnergyDensity::squared_norm();
    let grid = SampleGrid::frozen([0.5, 0.5], &base()).with_axis(ParamAxis::z_entry(0, 1.0, 1.0, 3));
    assert!(matches!(
        DensityTable::build(&w, &grid, TableKind::Cosserat, &template(), None, None),
        Err(TableError::Grid(_))
    ));
}

#[test]
fn in_plane_grid_tracks_heterogeneity() {
    let w = StoredEnergyDensity::squared_norm()
        .with_modulation(Modulation::checkerboard(0.5, 1.0, 2.0))
        .unwrap();
    let grid = SampleGrid {
        x: XSamples::Grid {
            x1: vec![0.25, 0.75],
            x2: vec![0.25, 0.75],
        },
        f_base: [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
        z_base: [0.0; 3],
        axes: vec![],
    };
    let t = DensityTable::build(&w, &grid, TableKind::Membrane, &template(), None, None).unwrap();
    let (_, f, _) = grid.node_point(0);
    let v: Vec<f64> = t.values().to_vec();
    assert!(within(v[0], f.norm_squared(), 1e-6));
    assert!(within(v[1], 2.0 * f.norm_squared(), 1e-6));
    assert!(t.query([1.0, 0.5], &f, &Vec3::zeros()).is_err());
    assert!(matches!(
        t.query([0.5, 0.5], &(f * 1.1), &Vec3::zeros()),
        Err(TableError::OffSlice { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn queries_lie_between_corner_values(s1 in -0.5f64..0.5, s2 in -0.5f64..0.5, zz in -1.0f64..1.0) {
        let t = squared_table();
        let mut f = base();
        f[(0, 0)] += s1;
        f[(1, 1)] += s2;
        let q = t.query([0.5, 0.5], &f, &Vec3::new(0.0, 0.0, zz)).unwrap();
        let lo = t.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = t.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(q >= lo - 1e-12 && q <= hi + 1e-12);
    }

    #[test]
    fn gradient_matches_differences_inside_cells(s1 in -0.45f64..0.45, zz in -0.9f64..0.9) {
        let t = squared_table();
        let mut f = base();
        f[(0, 0)] += s1;
        let z = Vec3::new(0.0, 0.0, zz);
        let (_, g) = t.query_gradient([0.5, 0.5], &f, &z).unwrap();
        let h = 1e-7;
        let mut fp = f;
        fp[(0, 0)] += h;
        let mut fm = f;
        fm[(0, 0)] -= h;
        let fd = (t.query([0.5, 0.5], &fp, &z).unwrap() - t.query([0.5, 0.5], &fm, &z).unwrap()) / (2.0 * h);
        // away from cell faces the interpolant is smooth
        prop_assume!((s1 / 0.5).fract().abs() > 1e-3 && (zz).abs() > 1e-3);
        prop_assert!((fd - g[(0, 0)]).abs() < 1e-5);
    }
}
