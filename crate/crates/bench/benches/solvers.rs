use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use safe_lifelong::lifelong::{update_l_closed_form, update_s_closed_form};
use safe_lifelong::projection::{project_constrained, solve_sdp_l, solve_socp_s, spectral_clamp};
use safe_lifelong::ThetaKind;
use safe_lifelong_bench::Instance;

const SHAPES: [(usize, usize, usize); 3] = [(2, 2, 3), (3, 3, 5), (4, 2, 10)];

fn label(&(d, k, t): &(usize, usize, usize)) -> String {
    format!("d{d}_k{k}_t{t}")
}

fn closed_form(c: &mut Criterion) {
    let mut g = c.benchmark_group("closed_form");
    for shape in SHAPES {
        let inst = Instance::new(shape.0, shape.1, shape.2, 1);
        let (l, s) = (inst.theta_tilde.l(), inst.theta_tilde.s());
        g.bench_with_input(BenchmarkId::new("l_update", label(&shape)), &inst, |b, i| {
            b.iter(|| update_l_closed_form(&i.history, black_box(&s), 1e-3).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("s_update", label(&shape)), &inst, |b, i| {
            b.iter(|| update_s_closed_form(&i.history, black_box(&l), 1e-3, shape.2).unwrap())
        });
    }
    g.finish();
}

fn conic(c: &mut Criterion) {
    let mut g = c.benchmark_group("conic");
    for shape in SHAPES {
        let inst = Instance::new(shape.0, shape.1, shape.2, 2);
        let cons = inst.task_constraints();
        let pr = inst.params;
        let l = spectral_clamp(&inst.theta_tilde.l(), pr.p, pr.q);
        let s_tilde = inst.theta_tilde.s();
        let (s, slacks, _) = solve_socp_s(&l, &cons, pr.mu1, pr.c_max, &s_tilde).unwrap();
        g.bench_function(BenchmarkId::new("socp", label(&shape)), |b| {
            b.iter(|| solve_socp_s(black_box(&l), &cons, pr.mu1, pr.c_max, &s_tilde).unwrap())
        });
        g.bench_function(BenchmarkId::new("sdp", label(&shape)), |b| {
            b.iter(|| solve_sdp_l(black_box(&s), &slacks, &cons, pr.p, pr.q, pr.mu2, &l))
        });
    }
    g.finish();
}

fn projection(c: &mut Criterion) {
    let mut g = c.benchmark_group("projection");
    g.sample_size(10);
    for shape in SHAPES {
        let inst = Instance::new(shape.0, shape.1, shape.2, 3);
        let cons = inst.task_constraints();
        let anchor = inst.theta_tilde.clone().with_kind(ThetaKind::Constrained);
        g.bench_function(BenchmarkId::from_parameter(label(&shape)), |b| {
            b.iter(|| project_constrained(black_box(&inst.theta_tilde), &cons, &inst.params, &anchor).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, closed_form, conic, projection);
criterion_main!(benches);
