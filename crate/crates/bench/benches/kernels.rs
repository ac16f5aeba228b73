use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use modadc::iforce::{find_a_exhaustive, find_a_lll, if_gram, IfDecoder};
use modadc::modcore::encode_path;
use modadc::predict::{quantized_autocov, solve_predictor, NoiseModel};
use modadc::ringosc::{closed_form_output, simulate_states, AffineFrontend, RingOscProfile};
use modadc::rng::{trial_rng, StreamTag};
use modadc::signals::{autocov_from_model, gen_gaussian, ProcessModel};
use modadc::temporal::TemporalDecoder;
use modadc::{Dither, ModAdcParams};
use nalgebra::DMatrix;
use rand::Rng;

const FLAT: ProcessModel = ProcessModel::FlatBand {
    variance: 1.0,
    oversample_ratio: 3.0,
};

fn random_gram(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = trial_rng(seed, 0, StreamTag::Ensemble);
    let g = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    if_gram(&(&g * g.transpose()), 30.0)
}

fn levinson(c: &mut Criterion) {
    let cx = autocov_from_model(&FLAT, 65).unwrap();
    let cv = quantized_autocov(&cx, 40.0, NoiseModel::WhiteUniform, 64).unwrap();
    c.bench_function("levinson_p64", |b| {
        b.iter(|| solve_predictor(black_box(&cv), 64).unwrap())
    });
}

fn decode_step(c: &mut Criterion) {
    let p = 64;
    let alpha = 40.0;
    let cx = autocov_from_model(&FLAT, p + 1).unwrap();
    let f = solve_predictor(&quantized_autocov(&cx, alpha, NoiseModel::WhiteUniform, p).unwrap(), p)
        .unwrap()
        .with_mean(-0.5);
    let params = ModAdcParams::new(0.5 * (12.0 * f.error_var).log2() + 2.0, alpha, Dither::Subtractive).unwrap();
    let x = gen_gaussian(&FLAT, 4096, &mut trial_rng(1, 0, StreamTag::Source)).unwrap();
    let enc = encode_path(x.stream(0), &params, &mut trial_rng(1, 0, StreamTag::Dither)).unwrap();
    c.bench_function("temporal_decode_4096_p64", |b| {
        b.iter_batched(
            || {
                let mut d = TemporalDecoder::for_params(&f, &params).unwrap();
                d.init(&enc.unfolded[..p]).unwrap();
                d
            },
            |mut d| {
                for &y in &enc.folded[p..] {
                    black_box(d.decode_step(y).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
}

fn lattice(c: &mut Criterion) {
    let g4 = random_gram(4, 7);
    c.bench_function("lll_k4", |b| b.iter(|| find_a_lll(black_box(&g4)).unwrap()));
    let g3 = random_gram(3, 8);
    c.bench_function("exhaustive_k3_b4", |b| {
        b.iter(|| find_a_exhaustive(black_box(&g3), 4).unwrap())
    });
    let a = find_a_lll(&g3).unwrap();
    let dec = IfDecoder::new(&a, 8.0).unwrap();
    let codes = [17.25, 101.5, 64.0];
    c.bench_function("if_decode_k3", |b| b.iter(|| dec.decode(black_box(&codes))));
}

fn ring(c: &mut Criterion) {
    let profile = RingOscProfile::with_default_curve(17).unwrap();
    let fe = AffineFrontend::new(0.7, 0.05, 1.0);
    let x = gen_gaussian(&FLAT, 4096, &mut trial_rng(2, 0, StreamTag::Source)).unwrap();
    c.bench_function("ring_state_machine_4096", |b| {
        b.iter(|| simulate_states(black_box(x.stream(0)), &profile, &fe, 0.25).unwrap())
    });
    c.bench_function("ring_closed_form_4096", |b| {
        b.iter(|| closed_form_output(black_box(x.stream(0)), &profile, &fe, 0.25).unwrap())
    });
}

criterion_group!(benches, levinson, decode_step, lattice, ring);
criterion_main!(benches);
