//! Hot-path kernels: dense matmul, the 2-D Fourier transform, one
//! transformer forward/backward pass and a full codec encode.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use fedprior_core::ar_transformer::{PriorModel, TransformerConfig};
use fedprior_core::imaging::{dft2, FftDirection};
use fedprior_core::numerics::{matmul, Binding, Tape, Tensor};
use fedprior_core::vq_codec::{CodecConfig, CodecModel, TokenPyramid};

fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let a = random_tensor(&[128, 128], 1);
    let b = random_tensor(&[128, 128], 2);
    c.bench_function("matmul_128", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
    });
}

fn bench_dft2(c: &mut Criterion) {
    let re = random_tensor(&[32 * 32 * 2], 3);
    let img = Tensor::from_vec(&[32, 32, 2], re.data().to_vec())
        .unwrap()
        .channels_to_complex();
    c.bench_function("dft2_32", |bench| {
        bench.iter(|| dft2(black_box(&img), FftDirection::Forward).unwrap())
    });
}

fn bench_prior_step(c: &mut Criterion) {
    let cfg = TransformerConfig::default();
    let model = PriorModel::new(cfg.clone(), 4).unwrap();
    let schedule = CodecConfig::default().schedule;
    let f = TokenPyramid {
        maps: schedule.iter().map(|&s| vec![0usize; s * s]).collect(),
        schedule,
    };
    c.bench_function("prior_loss_and_grad", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, &model.params, true);
            let loss = model.loss_on_tape(&mut tape, &bind, black_box(&f), 0).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn bench_codec_encode(c: &mut Criterion) {
    let model = CodecModel::new(CodecConfig::default(), 5).unwrap();
    let re = random_tensor(&[32 * 32 * 2], 6);
    let img = Tensor::from_vec(&[32, 32, 2], re.data().to_vec())
        .unwrap()
        .channels_to_complex();
    c.bench_function("codec_encode_32", |bench| {
        bench.iter(|| model.encode_multiscale(black_box(&img)).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_dft2, bench_prior_step, bench_codec_encode);
criterion_main!(benches);
