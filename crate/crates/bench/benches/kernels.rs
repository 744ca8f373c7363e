use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use reactgen::autograd::Tape;
use reactgen::codec::quantize_residual;
use reactgen::generator::{MaskedArch, MaskedTransformer, Role};
use reactgen::metrics::{fid, relation_matrix};
use reactgen::nn::{normal_tensor, TransformerConfig};
use reactgen::refinement::{MixerBranch, ResidualArch, ResidualTransformer};
use reactgen::steering::{rmc_loss_batch, PrototypeSet, Rectifier, RectifierArch};
use reactgen_bench::{codebooks, features, latent, rng};

fn toy_transformer() -> TransformerConfig {
    TransformerConfig {
        model_dim: 64,
        layers: 2,
        heads: 4,
        ffn_dim: 256,
    }
}

fn bench_quantizer(c: &mut Criterion) {
    let books = codebooks(6, 64, 32, 0);
    let z = latent(6, 32, 1);
    let mut group = c.benchmark_group("quantize_residual");
    group.throughput(Throughput::Elements(z.codes.rows() as u64));
    group.bench_function("6x64_d32_n6", |b| {
        b.iter(|| black_box(quantize_residual(&z, &books).unwrap()));
    });
    group.finish();
}

fn bench_masked(c: &mut Criterion) {
    let arch = MaskedArch {
        transformer: toy_transformer(),
        codebook_size: 64,
        cond_dim: 32,
        max_len: 6,
    };
    let model = MaskedTransformer::new(Role::Motion, arch, 0).unwrap();
    let tokens: Vec<Vec<usize>> = (0..32).map(|i| (0..6).map(|j| (i * 7 + j) % 64).collect()).collect();
    let cond = features(32, 32, 2);
    c.bench_function("masked_forward_backward_b32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape, true);
            let cv = tape.constant(cond.clone());
            let logits = model.forward(&mut tape, &p, &tokens, cv).unwrap();
            let s = tape.sum(logits);
            tape.backward(s);
            black_box(model.params().grads(&tape, &p))
        });
    });
    c.bench_function("masked_decode_b32_10_steps", |b| {
        b.iter(|| {
            let lens = vec![6; 32];
            black_box(model.decode_batch(&cond, &lens, 10, 0.0, &mut rng(3)).unwrap())
        });
    });
}

fn bench_residual(c: &mut Criterion) {
    let arch = ResidualArch {
        transformer: toy_transformer(),
        codebook_size: 64,
        num_layers: 6,
        cond_dim: 32,
        mixer_hidden: 64,
        max_len: 6,
        per_layer_heads: false,
        branch: MixerBranch::Both,
    };
    let model = ResidualTransformer::new(arch, 0).unwrap();
    let layered: Vec<Vec<Vec<usize>>> = (0..32)
        .map(|i| (0..6).map(|l| (0..6).map(|j| (i + l * 5 + j) % 64).collect()).collect())
        .collect();
    let refs: Vec<&Vec<Vec<usize>>> = layered.iter().collect();
    let raw = features(32, 32, 4);
    c.bench_function("residual_predict_layer6_b32", |b| {
        b.iter(|| black_box(model.predict(&refs, &[6; 32], 6, &raw, &raw).unwrap()));
    });
}

fn bench_steering(c: &mut Criterion) {
    let arch = RectifierArch {
        obs_dim: 32,
        hidden_dim: 64,
        proto_dim: 64,
    };
    let r = Rectifier::new(arch, 0).unwrap();
    let obs = features(200, 32, 5);
    let mut protos = normal_tensor(&mut rng(6), 4, 64, 1.0);
    for k in 0..4 {
        let row = protos.row_mut(k);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let protos = PrototypeSet::from_unit_rows(protos).unwrap();
    let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
    c.bench_function("rectify_project_200", |b| {
        b.iter(|| black_box(r.project_rows(&obs).unwrap()));
    });
    let e = r.project_rows(&obs).unwrap();
    c.bench_function("rmc_loss_200", |b| {
        b.iter(|| black_box(rmc_loss_batch(&e, &labels, &protos, 30.0, 0.4).unwrap()));
    });
}

fn bench_metrics(c: &mut Criterion) {
    let a = features(200, 64, 7);
    let b2 = features(200, 64, 8);
    c.bench_function("fid_200x64", |b| {
        b.iter(|| black_box(fid(&a, &b2).unwrap()));
    });
    let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
    c.bench_function("relation_matrix_200x64_k4", |b| {
        b.iter(|| black_box(relation_matrix(&a, &labels, 4).unwrap()));
    });
}

criterion_group!(
    benches,
    bench_quantizer,
    bench_masked,
    bench_residual,
    bench_steering,
    bench_metrics
);
criterion_main!(benches);
