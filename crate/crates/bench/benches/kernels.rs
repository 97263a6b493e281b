//! Hot kernels: log-mel frontend, encoder forward and backward, the
//! contrastive loss and the equal error rate sweep.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::Rng;
use vocalsim::audio::seconds_to_samples;
use vocalsim::encoder::{encode, project};
use vocalsim::eval::eer;
use vocalsim::mel::mel_spectrogram;
use vocalsim::seeding;
use vocalsim::train::{batch_loss_and_grads, contrastive_loss};
use vocalsim::{AudioBuffer, EncoderConfig, MelFrameMatrix, ModelState};

fn noise(rng: &mut seeding::Rng, len: usize) -> AudioBuffer {
    AudioBuffer::new((0..len).map(|_| rng.random_range(-0.3f32..0.3)).collect()).unwrap()
}

fn mels(rng: &mut seeding::Rng, n: usize) -> Vec<MelFrameMatrix> {
    (0..n)
        .map(|_| mel_spectrogram(&noise(rng, seconds_to_samples(1.0))).unwrap())
        .collect()
}

fn frontend(c: &mut Criterion) {
    let mut rng = seeding::stream(1, &[]);
    let excerpt = noise(&mut rng, seconds_to_samples(1.0));
    c.bench_function("mel_spectrogram_1s", |b| {
        b.iter(|| mel_spectrogram(black_box(&excerpt)).unwrap())
    });
}

fn encoder(c: &mut Criterion) {
    let mut rng = seeding::stream(2, &[]);
    let state = ModelState::<f32>::init(&EncoderConfig::default(), &mut rng).unwrap();
    let mel = mels(&mut rng, 1).remove(0);
    c.bench_function("encode_project_f32", |b| {
        b.iter(|| {
            let e = encode(black_box(&mel), &state).unwrap();
            project(e.view(), &state).unwrap()
        })
    });
    let (a, p) = (mels(&mut rng, 8), mels(&mut rng, 8));
    c.bench_function("batch_loss_and_grads_8_pairs_f32", |b| {
        b.iter(|| batch_loss_and_grads(black_box(&state), &a, &p).unwrap())
    });
}

fn loss(c: &mut Criterion) {
    let mut rng = seeding::stream(3, &[]);
    let mut m = |r, k| Array2::from_shape_fn((r, k), |_| rng.random_range(-1.0f64..1.0));
    let (y, z, w) = (m(32, 512), m(32, 512), m(512, 512));
    c.bench_function("contrastive_loss_32x512", |b| {
        b.iter(|| contrastive_loss(black_box(y.view()), z.view(), w.view()).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = seeding::stream(4, &[]);
    let pos: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..1.0) + 0.2).collect();
    let neg: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..1.0)).collect();
    c.bench_function("eer_5000_pairs", |b| {
        b.iter(|| eer(black_box(&pos), black_box(&neg)).unwrap())
    });
}

criterion_group!(benches, frontend, encoder, loss, metrics);
criterion_main!(benches);
