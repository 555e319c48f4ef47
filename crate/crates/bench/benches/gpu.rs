use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lbsplat_bench::{fixture, preset};
use lbsplat_core::Camera;
use lbsplat_gpu::{Gpu, GpuAvatar};

fn gpu(c: &mut Criterion) {
    let gpu = match Gpu::new() {
        Ok(g) => g,
        Err(e) => {
            eprintln!("skipping GPU benches: {e}");
            return;
        }
    };
    let (name, config) = preset();
    let f = fixture(&config, 3);
    let cam = Camera::front(1920, 1080);
    let mut g = c.benchmark_group(format!("gpu/{name}"));
    g.sample_size(20);
    for (label, model) in [("dense", &f.dense), ("pruned", &f.pruned)] {
        let avatar = GpuAvatar::new(&gpu, model).unwrap();
        g.bench_with_input(BenchmarkId::new("decode", label), &avatar, |b, av| {
            b.iter(|| av.decode(&f.poses[4]).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("frame_1080p", label), &avatar, |b, av| {
            b.iter(|| av.render(&f.poses[4], &cam).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gpu);
criterion_main!(benches);
