use criterion::{criterion_group, criterion_main, Criterion};

use frontal_bench::untrained_state;
use frontal_core::data::{build_manifest, SynthOptions, POSES};
use frontal_core::train::{ffwm_step, train_batch};

fn composite_step(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let mut g = c.benchmark_group("ffwm_step");
    g.sample_size(10);
    for res in [32usize, 64] {
        let opts = SynthOptions {
            resolution: res,
            illum_per_pose: 1,
        };
        let m = build_manifest(dir.path(), 6, &POSES, 1, opts).unwrap();
        let mut state = untrained_state(res);
        let batch = train_batch(&m, 0, 0, state.cfg.batch_size).unwrap();
        g.bench_function(format!("batch8_{res}"), |b| b.iter(|| ffwm_step(&mut state, &batch).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, composite_step);
criterion_main!(benches);
