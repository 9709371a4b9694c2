//! Parallel vs single-threaded timings of the data-parallel kernels.
//!
//! Each kernel is measured twice in the same binary: once on the rayon pool
//! and once inside `par::sequential`. Build with `--no-default-features` to
//! time the rayon-free fallback.

use std::hint::black_box;

use cognimap_core::geometry::ego_flow;
use cognimap_core::icp::{icp, IcpParams, KdTree};
use cognimap_core::motioncue::fit_gmm;
use cognimap_core::par;
use cognimap_core::pipeline::{build_problem, PipelineConfig};
use cognimap_core::posegraph::{solve, SolveParams};
use cognimap_core::synth::{generate, NoiseConfig, SceneConfig, SynthSequence};
use cognimap_core::{Grid, Pose};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;

fn scene(frames: usize) -> SynthSequence {
    generate(&SceneConfig {
        seed: 3,
        frames,
        noise: NoiseConfig {
            depth_rel: 0.005,
            rot: 0.5f64.to_radians(),
            trans: 0.03,
            flow: 0.2,
            keypoint: 0.0,
        },
        ..Default::default()
    })
    .unwrap()
}

fn both<F: Fn() -> R + Send + Sync, R: Send>(c: &mut Criterion, name: &str, f: F) {
    let mut g = c.benchmark_group(name);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", par::is_parallel()), |b| b.iter(|| black_box(f())));
    g.bench_function(BenchmarkId::new("sequential", par::is_parallel()), |b| {
        b.iter(|| par::sequential(|| black_box(f())))
    });
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let s = scene(20);
    let b = s.bundles();

    both(c, "ego_flow", || {
        ego_flow(&b[1].depth, &b[1].intrinsics, &b[0].intrinsics, &b[1].init_pose, &b[0].init_pose).unwrap()
    });

    let flow = b[1].flow_prev.clone().unwrap();
    let valid = Grid::filled(flow.width(), flow.height(), true);
    both(c, "fit_gmm", || fit_gmm(&flow, &valid, 3, 0).unwrap());

    let target: Vec<Vector3<f64>> = s.gt_static_cloud(0, 1).points;
    let tree = KdTree::new(&target);
    let src: Vec<Vector3<f64>> = s.gt_static_cloud(4, 1).points;
    let init = Pose::identity();
    let params = IcpParams::default();
    both(c, "icp", || icp(&src, &tree, &init, &params));

    let masks = s.gt_masks();
    let cfg = PipelineConfig::default();
    let problem = build_problem(&b, &masks, &cfg, s.scene.diameter(), None).unwrap();
    let sp = SolveParams::default();
    both(c, "solve", || solve(&problem, &sp).unwrap());

    both(c, "render", || scene(2));
}

criterion_group!(benches, kernels);
criterion_main!(benches);
