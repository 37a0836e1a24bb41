use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geca_core::diffusion::{build_schedule, forward_noise, ScheduleKind};
use geca_core::grid::{init_grid, GridSeed};
use geca_core::rule::{evolve, theta_forward, LabelCond, ThetaParams};
use geca_core::sampler::{sample, InheritanceMode, MSchedule, SamplerConfig, StepVariant};
use geca_core::{ChannelLayout, Tensor};

fn params_and_grid(side: usize) -> (ThetaParams, geca_core::PixCellGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layout = ChannelLayout::with_defaults(1).unwrap();
    let mut params = ThetaParams::init(layout, 4, 128, 5, &mut rng).unwrap();
    params.mod_w = Tensor::rand_uniform(
        vec![params.cond_dim, 6 * layout.total()],
        -0.05,
        0.05,
        &mut rng,
    );
    let schedule = build_schedule(ScheduleKind::Linear, 250).unwrap();
    let clean = Tensor::rand_uniform(vec![side, side, 1], -1.0, 1.0, &mut rng);
    let (noisy, _) = forward_noise(&clean, 100, &schedule, &mut rng).unwrap();
    let grid = init_grid(&noisy, layout, GridSeed(7)).unwrap();
    (params, grid)
}

fn bench_rule(c: &mut Criterion) {
    let mut group = c.benchmark_group("rule");
    for side in [16usize, 32] {
        let (params, grid) = params_and_grid(side);
        group.bench_with_input(BenchmarkId::new("theta_forward", side), &side, |b, _| {
            b.iter(|| theta_forward(black_box(&grid), 100, &LabelCond::Null, &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("evolve_m12", side), &side, |b, _| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                evolve(black_box(&grid), 100, &LabelCond::Null, &params, 12, 0.5, &mut rng)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_sampler(c: &mut Criterion) {
    let (params, _) = params_and_grid(16);
    let schedule = build_schedule(ScheduleKind::Linear, 20).unwrap();
    let config = SamplerConfig {
        height: 16,
        width: 16,
        t_max: 20,
        m: MSchedule::Const(12),
        guidance_w: 1.0,
        mode: InheritanceMode::HOnly,
        variant: StepVariant::DdpmStandard,
        fire_rate: 0.5,
        seed: 0,
        force_dual_pass: false,
    };
    c.bench_function("sample_16x16_t20", |b| {
        b.iter(|| sample(&params, &LabelCond::Null, black_box(&config), &schedule).unwrap())
    });
}

criterion_group!(benches, bench_rule, bench_sampler);
criterion_main!(benches);
