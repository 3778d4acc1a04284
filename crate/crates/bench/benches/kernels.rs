use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qfit_core::specfun::{i0e, log_i0, log_i0_series_lse, DEFAULT_SERIES_TERMS};
use qfit_core::{batch_loss, make_dataset, LossKind, ModelKind};

fn bessel(c: &mut Criterion) {
    let xs: Vec<f64> = (0..1000).map(|i| 0.05 * i as f64).collect();
    c.bench_function("i0e x1000", |b| {
        b.iter(|| xs.iter().map(|&x| i0e(black_box(x)).unwrap()).sum::<f64>())
    });
    c.bench_function("log_i0 x1000", |b| {
        b.iter(|| xs.iter().map(|&x| log_i0(black_box(x)).unwrap()).sum::<f64>())
    });
    c.bench_function("log_i0_series_lse x1000", |b| {
        b.iter(|| {
            xs.iter()
                .map(|&x| log_i0_series_lse(black_box(x), DEFAULT_SERIES_TERMS).unwrap())
                .sum::<f64>()
        })
    });
}

fn losses(c: &mut Criterion) {
    let kind = ModelKind::Ivim;
    let ds = make_dataset(kind, 10.0, 256, &kind.default_protocol(), 1).unwrap();
    let mut a = ds.signals.clone();
    for (mut row, t) in a.rows_mut().into_iter().zip(ds.truth.rows()) {
        ds.protocol.predict_into(t.as_slice().unwrap(), row.as_slice_mut().unwrap());
    }
    let mut group = c.benchmark_group("batch_loss 256x10");
    for loss in [LossKind::Mse, LossKind::Nlr] {
        group.bench_with_input(BenchmarkId::from_parameter(loss), &loss, |b, &loss| {
            b.iter(|| batch_loss(loss, ds.signals.view(), a.view(), 0.1).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bessel, losses);
criterion_main!(benches);
