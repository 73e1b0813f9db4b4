//! Fixtures shared by the benchmarks.

use filmrelax::cell::CellProblemSpec;
use filmrelax::tabulate::ParamAxis;
use filmrelax::{
    BoundaryMode, CellMesh, DiscreteField, MaterialPoint, Mat3x2, Modulation, SampleGrid, StoredEnergyDensity, Vec3,
};

/// Two-layer laminate on |F|², the cheapest heterogeneous integrand.
pub fn laminate() -> StoredEnergyDensity {
    StoredEnergyDensity::squared_norm()
        .with_modulation(Modulation::two_layer(1.0, 3.0))
        .expect("two-layer modulation is valid")
}

pub fn f_bar() -> Mat3x2 {
    Mat3x2::new(1.1, 0.2, -0.3, 0.9, 0.4, 0.1)
}

pub fn spec(cells: usize) -> CellProblemSpec {
    CellProblemSpec::new(MaterialPoint::new([0.5, 0.5], 0.0), f_bar())
        .with_cells(cells)
        .expect("positive cell count")
}

/// A smooth non-affine field on the laterally clamped unit cell.
pub fn wavy_field(cells: usize) -> DiscreteField {
    let mesh = CellMesh::unit_cell(cells, BoundaryMode::LateralZero).expect("mesh");
    let vals = (0..mesh.node_count())
        .map(|i| {
            let p = mesh.node_coords(i);
            let s = (std::f64::consts::PI * p[0]).sin() * (std::f64::consts::PI * p[1]).sin();
            Vec3::new(0.1 * s, -0.05 * s * p[2], 0.2 * s)
        })
        .collect();
    let mut u = DiscreteField::from_values(&mesh, vals).expect("one value per node");
    u.project_boundary();
    u
}

/// Two in-plane stretch axes, offsets from `f_bar`.
pub fn stretch_grid(count: usize) -> SampleGrid {
    SampleGrid::frozen([0.5, 0.5], &f_bar())
        .with_axis(ParamAxis::f_entry(0, 0, -0.4, 0.4, count))
        .with_axis(ParamAxis::f_entry(1, 1, -0.4, 0.4, count))
}
