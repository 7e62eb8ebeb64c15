//! Sequential vs rayon execution of the data-parallel hot paths.
//!
//! Build with `--no-default-features` to check that the parallel arm falls
//! back to the sequential code path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dbhdist::knn::{self, KnnConfig};
use dbhdist::par::Execution;
use dbhdist::pipeline::{self, Method, MethodSettings, ModelingRules};
use dbhdist::synth::{generate, SynthConfig};
use dbhdist::types::PlotRecord;
use dbhdist::{ppm, varsel};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn inventory(n_plots: usize) -> Vec<PlotRecord> {
    let config = SynthConfig {
        n_plots,
        seed: 7,
        ..Default::default()
    };
    generate(&config, Execution::Parallel).expect("valid config").plots
}

fn bench_synth(c: &mut Criterion) {
    let mut group = c.benchmark_group("synth_generate");
    group.sample_size(10);
    let config = SynthConfig {
        n_plots: 2000,
        ..Default::default()
    };
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, config.n_plots), |b| {
            b.iter(|| generate(black_box(&config), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_weibull_fits(c: &mut Criterion) {
    let plots = pipeline::modeling_set(&inventory(2000), &ModelingRules::default());
    let mut group = c.benchmark_group("weibull_fit_all");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, plots.len()), |b| {
            b.iter(|| ppm::fit_plots(black_box(&plots), exec))
        });
    }
    group.finish();
}

fn bench_knn_loo(c: &mut Criterion) {
    let plots: Vec<PlotRecord> = inventory(4000).into_iter().filter(|p| p.is_forest).collect();
    let vars = MethodSettings::default().knn_vars;
    let mut group = c.benchmark_group("knn_loo_impute");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, plots.len()), |b| {
            b.iter(|| knn::loo_impute(black_box(&plots), &vars, KnnConfig::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_ppm_loo(c: &mut Criterion) {
    let plots = pipeline::modeling_set(&inventory(1200), &ModelingRules::default());
    let settings = MethodSettings::default();
    let mut group = c.benchmark_group("ppm_loo");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, plots.len()), |b| {
            b.iter(|| pipeline::loo_histograms(black_box(&plots), Method::Ppm, &settings, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_sa_restarts(c: &mut Criterion) {
    let candidates: Vec<String> = (0..20).map(|i| format!("v{i:02}")).collect();
    let cost = |s: &[String]| -> dbhdist::Result<f64> {
        let mut acc = 0.0;
        for v in s {
            let i: f64 = v[1..].parse().unwrap();
            for k in 0..2000 {
                acc += ((i + k as f64) * 0.37).sin().abs();
            }
        }
        Ok(acc)
    };
    let config = varsel::SaConfig {
        min_temperature: 1e-2,
        ..Default::default()
    };
    let mut group = c.benchmark_group("sa_restarts");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, 8), |b| {
            b.iter(|| varsel::all_restarts(black_box(&candidates), cost, &config, 8, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_synth,
    bench_weibull_fits,
    bench_knn_loo,
    bench_ppm_loo,
    bench_sa_restarts
);
criterion_main!(benches);
