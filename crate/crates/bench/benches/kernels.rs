use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use forge_bench::{text_batch, toy_target};
use forge_core::training::dynamic_loss_weights;
use forge_core::trajectory::{prediction_trajectory, FeedMode, KlForm, TrajectorySample, TransitionTolerances};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn forward(c: &mut Criterion) {
    let model = toy_target();
    let seqs = text_batch(8);
    let mut group = c.benchmark_group("forward_with_hidden");
    for seq in seqs.iter().take(2) {
        group.bench_with_input(BenchmarkId::from_parameter(seq.len()), &seq.token_ids, |b, ids| {
            b.iter(|| model.forward_with_hidden(black_box(ids), &[]).unwrap());
        });
    }
    group.finish();

    let samples: Vec<TrajectorySample> = seqs
        .iter()
        .map(|s| TrajectorySample {
            token_ids: s.token_ids.clone(),
            source: FeedMode::TeacherForced,
        })
        .collect();
    c.bench_function("prediction_trajectory/8", |b| {
        b.iter(|| prediction_trajectory(&model, black_box(&samples), TransitionTolerances::default(), KlForm::PositionSum).unwrap())
    });
    let prompt = &seqs[0].token_ids[..seqs[0].len() - 3];
    c.bench_function("generate_greedy/8", |b| b.iter(|| model.generate_greedy(black_box(prompt), &[], 8, None).unwrap()));
}

fn weights(c: &mut Criterion) {
    let lengths: Vec<usize> = (0..256).map(|i| 2 + (i * 7) % 60).collect();
    c.bench_function("dynamic_loss_weights/256", |b| b.iter(|| dynamic_loss_weights(black_box(&lengths), 0.5).unwrap()));
}

criterion_group!(benches, forward, weights);
criterion_main!(benches);
