use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use nn_emd_core::authority::Authority;
use nn_emd_core::dlog::{DlogMode, DlogSolver};
use nn_emd_core::encoding::{product_bound, FixedPointCodec};
use nn_emd_core::feip::{si_decrypt, si_derive_key, si_encrypt, si_setup};
use nn_emd_core::protocols::{s2phc_client_encrypt_int, s2phc_server_eval_int, ServerEvalConfig};
use nn_emd_core::GroupParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn group_exp(c: &mut Criterion) {
    let mut g = c.benchmark_group("exp_g");
    for name in ["test64", "demo512", "secure2048"] {
        let params = GroupParams::named(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = params.sample_scalar(&mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(name), &e, |b, e| {
            b.iter(|| params.exp_g(black_box(e)))
        });
    }
    g.finish();
}

fn dlog(c: &mut Criterion) {
    let params = GroupParams::named("demo512").unwrap();
    let mut g = c.benchmark_group("dlog_bsgs");
    g.sample_size(20);
    for bound in [100_000u64, 10_000_000] {
        let solver = DlogSolver::build(&params, bound, DlogMode::Bsgs).unwrap();
        let h = params.exp_g(&params.scalar_from_i64(-(bound as i64) / 2 - 17));
        g.bench_with_input(BenchmarkId::from_parameter(bound), &h, |b, h| {
            b.iter(|| solver.solve(black_box(h)).unwrap())
        });
    }
    g.finish();
}

fn si_decrypt_784(c: &mut Criterion) {
    let params = GroupParams::named("demo512").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eta = 784;
    let (pk, msk) = si_setup(&params, eta, &mut rng).unwrap();
    let x: Vec<i64> = (0..eta).map(|_| rng.gen_range(0..=100)).collect();
    let y: Vec<i64> = (0..eta).map(|_| rng.gen_range(-100..=100)).collect();
    let ct = si_encrypt(&pk, &x, 100, &mut rng).unwrap();
    let fk = si_derive_key(&msk, &y, 100).unwrap();
    let solver = DlogSolver::build(&params, 100 * 100 * eta as u64, DlogMode::Bsgs).unwrap();
    c.bench_function("si_decrypt_eta784", |b| {
        b.iter(|| si_decrypt(&pk, black_box(&ct), &fk, &solver).unwrap())
    });
}

fn secure_matmul(c: &mut Criterion) {
    let params = GroupParams::named("demo512").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, cols, out) = (8, 64, 16);
    let codec = FixedPointCodec::unit(2).unwrap();
    let mut authority = Authority::init(&params, cols, &[cols], 1, 2, 100, &mut rng).unwrap();
    let pk = authority.si_public_key().clone();
    let x = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-100..=100i64));
    let w = Array2::from_shape_fn((cols, out), |_| rng.gen_range(1..=100i64));
    let batch = s2phc_client_encrypt_int(&codec, &pk, x.view(), 1, &mut rng).unwrap();
    let solver = DlogSolver::build(&params, product_bound(&codec, &codec, cols), DlogMode::Bsgs).unwrap();
    let cfg = ServerEvalConfig {
        codec,
        solver: &solver,
        si_public: &pk,
        etas: vec![cols],
    };
    let mut g = c.benchmark_group("s2phc_eval");
    g.sample_size(10);
    g.bench_function("8x64_by_64x16", |b| {
        b.iter(|| s2phc_server_eval_int(std::slice::from_ref(&batch), w.view(), &cfg, &mut authority).unwrap())
    });
    g.finish();
}

criterion_group!(benches, group_exp, dlog, si_decrypt_784, secure_matmul);
criterion_main!(benches);
