//! Rayon fan-out versus the sequential fallback on the two data-parallel
//! hot paths: strict-direction sampling and quadratic-form evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use parcon::foc::{detect_arcs, FocConfig};
use parcon::model::{reference_instance, Control};
use parcon::optim::adjoint_costate;
use parcon::pdesolve::solve_state;
use parcon::soc::{
    check_second_order, quadratic_form, sample_strict_critical, sample_strict_critical_seq,
};
use parcon::spectral::reference_solution;

struct Setup {
    spec: parcon::model::ValidatedSpec,
    grid: parcon::model::SpaceTimeGrid,
    u: Control,
    y: parcon::model::Field,
    arcs: parcon::foc::ArcStructure,
    p: parcon::model::Field,
}

fn setup() -> Setup {
    let spec = reference_instance(101, 600);
    let grid = spec.grid;
    let r = reference_solution();
    let u = Control::from_components(vec![(0..grid.n_t)
        .map(|k| r.control((k as f64 + 0.5) * 3.0 / grid.n_t as f64))
        .collect()]);
    let y = solve_state(&spec, &grid, &u).unwrap();
    let cfg = FocConfig::default();
    let eps_u = cfg.eps_u(&spec);
    let arcs = detect_arcs(&spec, &grid, &u, &y, &eps_u, &[1e-3]);
    let mu = parcon::model::MeasureWeights::zeros(1, grid.n_t);
    let (p, _) = adjoint_costate(&spec, &grid, &u, &mu).unwrap();
    Setup { spec, grid, u, y, arcs, p }
}

fn bench_sampling(c: &mut Criterion) {
    let s = setup();
    let mut group = c.benchmark_group("sample_strict_critical");
    for count in [16usize, 64] {
        group.bench_with_input(BenchmarkId::new("rayon", count), &count, |b, &count| {
            b.iter(|| {
                sample_strict_critical(&s.spec, &s.grid, &s.arcs, &s.y, &s.u, count, 42).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("sequential", count), &count, |b, &count| {
            b.iter(|| {
                sample_strict_critical_seq(&s.spec, &s.grid, &s.arcs, &s.y, &s.u, count, 42)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_q_evaluation(c: &mut Criterion) {
    let s = setup();
    let mut dirs =
        sample_strict_critical(&s.spec, &s.grid, &s.arcs, &s.y, &s.u, 64, 7).unwrap();
    for d in &mut dirs {
        d.quasi_radial = true; // screen already exercised elsewhere
    }
    let mut group = c.benchmark_group("quadratic_form_batch");
    group.bench_function("rayon", |b| {
        b.iter(|| check_second_order(&s.spec, &s.grid, &s.y, &s.p, &dirs, 1e-6))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            dirs.iter()
                .map(|d| quadratic_form(&s.spec, &s.grid, &s.y, &s.p, &d.z, &d.v).unwrap())
                .fold(f64::INFINITY, f64::min)
        })
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_sampling, bench_q_evaluation
}
criterion_main!(benches);
