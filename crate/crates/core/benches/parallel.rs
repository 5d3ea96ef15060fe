//! Data-parallel stages on the rayon pool against a single worker thread.
//!
//! With default features each group runs twice: `parallel` on the global
//! pool and `sequential` inside a one-thread pool. Built with
//! `--no-default-features`, only the `sequential` variant runs and uses the
//! plain-loop fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossview::eval::{build_gt_projection, ProjectionConfig};
use crossview::pipeline::{ground_bev, solve, SolveConfig};
use crossview::refiner::{initial_similarity, normalize_doubly_stochastic};
use crossview::surface::{normalize_confidence, FusionConfig};
use crossview::synth::{flat_world_depth, generate_scene, render_inputs, RenderedInputs, SceneConfig, SyntheticScene};
use ndarray::Array2;
use std::hint::black_box;

fn scene() -> (SyntheticScene, RenderedInputs) {
    let s = generate_scene(&SceneConfig::default(), 1, 0.1).unwrap();
    let r = render_inputs(&s).unwrap();
    (s, r)
}

#[cfg(feature = "parallel")]
fn variants<F: Fn() -> R + Sync, R: Send>(c: &mut Criterion, group: &str, f: F) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(|| black_box(f())));
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| single.install(|| black_box(f())))
    });
    g.finish();
}

#[cfg(not(feature = "parallel"))]
fn variants<F: Fn() -> R + Sync, R: Send>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(|| black_box(f())));
    g.finish();
}

fn bench_similarity(c: &mut Criterion) {
    let (s, r) = scene();
    let (_, ground) = ground_bev(&r.volume, &r.conf_logits, 0.5, &FusionConfig::default()).unwrap();
    variants(c, "initial_similarity_n41", || initial_similarity(&ground, &r.aerial, 0.1).unwrap());
    let n2 = s.geometry.grid.num_cells() + 1;
    let m = Array2::from_shape_fn((n2, n2), |(i, j)| ((i * 31 + j * 17) % 97) as f64 / 9.7);
    variants(c, "normalize_1682", || normalize_doubly_stochastic(&m).unwrap());
}

fn bench_surface(c: &mut Criterion) {
    let (s, r) = scene();
    variants(c, "normalize_confidence_n41", || {
        normalize_confidence(&r.conf_logits, &s.geometry.layers).unwrap()
    });
}

fn bench_projection(c: &mut Criterion) {
    let (s, _) = scene();
    let depth = flat_world_depth(&s.geometry);
    let g = s.geometry;
    variants(c, "gt_projection_1024x512", || {
        build_gt_projection(&depth, &g.camera, &s.gt_pose, &g.aerial, &ProjectionConfig::default()).unwrap()
    });
}

fn bench_solve(c: &mut Criterion) {
    let (s, r) = scene();
    let cfg = SolveConfig::default();
    variants(c, "solve_n41", || {
        solve(&r.volume, &r.conf_logits, &r.aerial, &s.frame, None, &cfg).unwrap()
    });
}

criterion_group!(benches, bench_similarity, bench_surface, bench_projection, bench_solve);
criterion_main!(benches);
