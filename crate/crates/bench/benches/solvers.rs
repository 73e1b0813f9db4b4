use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use filmrelax::cell::{membrane_density, membrane_density_periodic};
use filmrelax::field::{energy_gradient, XMode};
use filmrelax::{DensityTable, Mat3, TableKind, Vec3};
use filmrelax_bench::{f_bar, laminate, spec, stretch_grid, wavy_field};

fn assembly(c: &mut Criterion) {
    let w = laminate();
    let mut g = c.benchmark_group("energy_gradient");
    for cells in [4, 8, 16] {
        let u = wavy_field(cells);
        let xm = XMode::Frozen { x_alpha: [0.5, 0.5] };
        g.bench_with_input(BenchmarkId::from_parameter(cells), &u, |b, u| {
            b.iter(|| energy_gradient(&w, black_box(u), 2.0, 0.5, xm, Mat3::identity()).unwrap())
        });
    }
    g.finish();
}

fn cell_solve(c: &mut Criterion) {
    let w = laminate();
    let mut g = c.benchmark_group("cell_solve");
    g.sample_size(10);
    for cells in [4, 8] {
        let s = spec(cells);
        g.bench_with_input(BenchmarkId::new("membrane", cells), &s, |b, s| b.iter(|| membrane_density(&w, s).unwrap()));
        g.bench_with_input(BenchmarkId::new("periodic", cells), &s, |b, s| {
            b.iter(|| membrane_density_periodic(&w, s).unwrap())
        });
    }
    g.finish();
}

fn table_query(c: &mut Criterion) {
    let w = laminate();
    let table = DensityTable::build(&w, &stretch_grid(5), TableKind::Membrane, &spec(2), None, None).unwrap();
    let mut f = f_bar();
    f[(0, 0)] = 1.03;
    f[(1, 1)] = 0.77;
    let z = Vec3::zeros();
    c.bench_function("table_query", |b| b.iter(|| table.query([0.5, 0.5], black_box(&f), &z).unwrap()));
    c.bench_function("table_query_gradient", |b| {
        b.iter(|| table.query_gradient([0.5, 0.5], black_box(&f), &z).unwrap())
    });
}

criterion_group!(benches, assembly, cell_solve, table_query);
criterion_main!(benches);
