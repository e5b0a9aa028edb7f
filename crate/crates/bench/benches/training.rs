use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use veil_core::data::{generate_synthetic, SyntheticTaskSpec, DESIRABLE};
use veil_core::layers::Mode;
use veil_core::mi::oracle_trials;
use veil_core::networks::{ArchitectureSpec, EncoderNetwork};
use veil_core::objectives::{EncoderObjective, PrivacyUpdateMode, Utility, DEFAULT_ALPHA};
use veil_core::seed::stream;
use veil_core::trainer::{TrainConfig, Trainer};

fn encoder() -> EncoderNetwork {
    let arch = ArchitectureSpec::desk_encoder([3, 32, 32], [8, 8, 8]);
    EncoderNetwork::build(&arch, &mut stream(0, "bench/encoder")).unwrap()
}

fn bench_encoder(c: &mut Criterion) {
    let data = generate_synthetic(&SyntheticTaskSpec::default(), 400).unwrap();
    let x = data.train.images.gather_rows(&(0..32).collect::<Vec<_>>()).unwrap();
    let mut enc = encoder();
    c.bench_function("encoder forward, batch 32", |b| b.iter(|| black_box(enc.encode_mut(&x, Mode::Train).unwrap())));
}

fn bench_steps(c: &mut Criterion) {
    let data = generate_synthetic(&SyntheticTaskSpec::default(), 400).unwrap();
    let objective = EncoderObjective {
        privacy: PrivacyUpdateMode::LabelFlip,
        utility: Utility::DesirableTasks(vec![DESIRABLE.into()]),
        alpha: DEFAULT_ALPHA,
    };
    let mut cfg = TrainConfig::desk(objective, 0);
    cfg.batch = 32;
    let mut tr = Trainer::new(cfg, encoder(), &data).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    c.bench_function("classifier step, batch 32", |b| b.iter(|| tr.classifier_step(&idx, 1e-4).unwrap()));
    c.bench_function("encoder step, batch 32", |b| b.iter(|| tr.encoder_step(&idx, 1e-6).unwrap()));
}

fn bench_oracle(c: &mut Criterion) {
    c.bench_function("oracle identities, 100 joints", |b| {
        b.iter_batched(
            || stream(0, "bench/joints"),
            |mut rng| black_box(oracle_trials(&mut rng, 100, true).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_encoder, bench_steps, bench_oracle);
criterion_main!(benches);
