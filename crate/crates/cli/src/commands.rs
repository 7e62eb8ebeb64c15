use std::collections::BTreeSet;

use anyhow::{bail, Context, Result};
use dbhdist::estimation::ClassificationLayers;
use dbhdist::histogram::{class_midpoint, DbhHistogram, NUM_CLASSES};
use dbhdist::io;
use dbhdist::pipeline::{self, Method};
use dbhdist::types::{MetricMatrix, PlotRecord};
use dbhdist::varsel::{self, PpmTarget, SaResult};
use dbhdist::{glm, knn, par, ppm, synth, weibull};

use crate::config::{PipelineConfig, SelectTarget};
use crate::output::Staging;
use crate::InvalidInput;

const SNAPSHOT: &str = "resolved_config.toml";

fn stage(config: &PipelineConfig) -> Result<Staging> {
    let mut s = Staging::new(&config.data.output)?;
    s.write(SNAPSHOT, config.snapshot()?)?;
    Ok(s)
}

fn finish(staging: Staging) -> Result<()> {
    for p in staging.commit()? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn load(config: &PipelineConfig) -> Result<Vec<PlotRecord>> {
    config.require_inputs(false)?;
    let plots = io::read_dataset(&config.data.plots, &config.data.trees)?;
    if plots.is_empty() {
        bail!(InvalidInput(format!("{} holds no plots", config.data.plots.display())));
    }
    Ok(plots)
}

fn modeling(config: &PipelineConfig, plots: &[PlotRecord]) -> Result<Vec<PlotRecord>> {
    let set = pipeline::modeling_set(plots, &config.rules());
    if set.is_empty() {
        bail!(InvalidInput("no plot passes the modeling rules".into()));
    }
    Ok(set)
}

/// Named plot groups used for model fitting: one per species stratum, or a
/// single pooled group. Plots without a dominant species join every stratum.
fn groups(plots: &[PlotRecord], stratify: bool) -> Vec<(String, Vec<PlotRecord>)> {
    if !stratify {
        return vec![("all".into(), plots.to_vec())];
    }
    pipeline::strata(plots)
        .into_iter()
        .filter(|s| !s.members.is_empty())
        .map(|s| (s.species.to_string(), s.members.iter().map(|&i| plots[i].clone()).collect()))
        .collect()
}

fn csv(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    Ok(io::to_csv_bytes(&header, rows)?)
}

pub fn simulate(config: &PipelineConfig) -> Result<()> {
    let data = synth::generate(&config.simulate, config.exec())?;
    let mut out = stage(config)?;
    out.write("plots.csv", io::plots_csv(&data.plots)?)?;
    out.write("trees.csv", io::trees_csv(&data.plots)?)?;
    out.write("layers.csv", io::layers_csv(&data.layers)?)?;
    out.write("truth.csv", io::truth_csv(&data.truth)?)?;
    let trees: usize = data.plots.iter().map(|p| p.trees.len()).sum();
    println!("simulated {} plots, {trees} trees", data.plots.len());
    finish(out)
}

pub fn validate(config: &PipelineConfig) -> Result<()> {
    let plots = load(config)?;
    let summary = pipeline::validate_dataset(&plots, &config.rules())?;
    if let Some(path) = &config.data.layers {
        config.require_inputs(true)?;
        let layers = io::read_layers(path)?;
        let missing: Vec<&str> = plots
            .iter()
            .filter(|p| !layers.entries.contains_key(&p.plot_id))
            .map(|p| p.plot_id.as_str())
            .collect();
        if !missing.is_empty() {
            bail!(InvalidInput(format!(
                "{}: no layer entry for {} plot(s), first `{}`",
                path.display(),
                missing.len(),
                missing[0]
            )));
        }
    }
    let mut rows = vec![
        vec!["plots".into(), summary.plots.to_string()],
        vec!["forest_plots".into(), summary.forest_plots.to_string()],
        vec!["trees".into(), summary.trees.to_string()],
        vec!["estimation_plots".into(), summary.estimation_plots.to_string()],
        vec!["modeling_plots".into(), summary.modeling_plots.to_string()],
    ];
    for (rule, n) in &summary.exclusions {
        rows.push(vec![format!("excluded_{}", rule.as_str()), n.to_string()]);
    }
    for r in &rows {
        println!("{:<32} {}", r[0], r[1]);
    }
    let mut out = stage(config)?;
    out.write("validation.csv", csv(&["item", "count"], rows)?)?;
    finish(out)
}

pub fn fit_weibull(config: &PipelineConfig) -> Result<()> {
    let plots = modeling(config, &load(config)?)?;
    let fits = par::map(config.exec(), &plots, |p| weibull::fit_ml(&p.trees));
    let mut rows = Vec::with_capacity(plots.len());
    let mut failed = 0;
    for (p, f) in plots.iter().zip(&fits) {
        let base = vec![p.plot_id.clone(), p.trees.len().to_string()];
        let rest = match f {
            Ok(f) => vec![
                f.params.shape.to_string(),
                f.params.scale.to_string(),
                f.diagnostics.log_likelihood.to_string(),
                f.diagnostics.iterations.to_string(),
                f.diagnostics.converged.to_string(),
                "ok".into(),
            ],
            Err(e) => {
                failed += 1;
                vec![String::new(), String::new(), String::new(), String::new(), "false".into(), e.to_string()]
            }
        };
        rows.push(base.into_iter().chain(rest).collect());
    }
    if failed == plots.len() {
        bail!(dbhdist::Error::NotConverged(format!("all {failed} per-plot Weibull fits failed")));
    }
    println!("fitted {} plots, {failed} failed", plots.len() - failed);
    let mut out = stage(config)?;
    let header = ["plot_id", "n_trees", "shape", "scale", "log_likelihood", "iterations", "converged", "status"];
    out.write("weibull_fits.csv", csv(&header, rows)?)?;
    finish(out)
}

fn coefficient_rows(stratum: &str, parameter: &str, names: &[String], est: &[f64], se: &[f64]) -> Vec<Vec<String>> {
    names
        .iter()
        .zip(est)
        .zip(se)
        .map(|((n, e), s)| vec![stratum.into(), parameter.into(), n.clone(), e.to_string(), s.to_string()])
        .collect()
}

pub fn fit_ppm(config: &PipelineConfig) -> Result<()> {
    let plots = modeling(config, &load(config)?)?;
    let settings = config.settings().for_method(Method::Ppm);
    let mut coef = Vec::new();
    let mut var = Vec::new();
    for (label, group) in groups(&plots, config.run.stratify_by_species) {
        let fits = ppm::fit_plots(&group, config.exec());
        let m = ppm::train_from_fits(&group, &fits, &settings.scale_vars, &settings.shape_vars, None)
            .with_context(|| format!("PPM stratum {label}"))?;
        for (parameter, fit) in [("scale", &m.scale_fit), ("shape", &m.shape_fit)] {
            coef.extend(coefficient_rows(
                &label,
                parameter,
                &fit.coefficient_names(),
                &fit.fixed_coefficients,
                &fit.fixed_se,
            ));
            var.push(vec![
                label.clone(),
                parameter.into(),
                fit.sigma_b.to_string(),
                fit.sigma.to_string(),
                fit.n_obs.to_string(),
                fit.n_groups.to_string(),
                fit.reml_loglik.to_string(),
                fit.aic.to_string(),
            ]);
        }
        println!(
            "{label}: {} of {} plots used",
            m.report.plots_used, m.report.plots_supplied
        );
    }
    let mut out = stage(config)?;
    out.write("ppm_coefficients.csv", csv(&["stratum", "parameter", "term", "estimate", "se"], coef)?)?;
    let header = ["stratum", "parameter", "sigma_b", "sigma", "n_obs", "n_groups", "reml_loglik", "aic"];
    out.write("ppm_variance.csv", csv(&header, var)?)?;
    finish(out)
}

pub fn fit_glm(config: &PipelineConfig) -> Result<()> {
    let plots = modeling(config, &load(config)?)?;
    let settings = config.settings().for_method(Method::Glm);
    let options = glm::GlmOptions {
        intervals: true,
        ..settings.glm
    };
    let mut coef = Vec::new();
    let mut var = Vec::new();
    for (label, group) in groups(&plots, config.run.stratify_by_species) {
        let m = glm::train_with(&group, &settings.scale_vars, &settings.shape_vars, &options, None)
            .with_context(|| format!("GLM stratum {label}"))?;
        let with_intercept =
            |v: &[String]| std::iter::once(dbhdist::lmm::INTERCEPT.to_string()).chain(v.iter().cloned()).collect::<Vec<_>>();
        coef.extend(coefficient_rows(&label, "scale", &with_intercept(&m.scale_vars), &m.scale_coefficients, &m.scale_se));
        coef.extend(coefficient_rows(&label, "shape", &with_intercept(&m.shape_vars), &m.shape_coefficients, &m.shape_se));
        let ci = |c: Option<(f64, f64)>| c.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        for (parameter, sigma, interval) in [
            ("scale", m.sigma_b_scale, ci(m.sigma_ci_scale)),
            ("shape", m.sigma_b_shape, ci(m.sigma_ci_shape)),
        ] {
            var.push(vec![
                label.clone(),
                parameter.into(),
                sigma.to_string(),
                interval.0,
                interval.1,
                m.laplace_loglik.to_string(),
                m.n_plots.to_string(),
                m.n_trees.to_string(),
            ]);
        }
        println!("{label}: {} plots, {} trees", m.n_plots, m.n_trees);
    }
    let mut out = stage(config)?;
    out.write("glm_coefficients.csv", csv(&["stratum", "parameter", "term", "estimate", "se"], coef)?)?;
    let header = ["stratum", "parameter", "sigma_b", "ci_lower", "ci_upper", "laplace_loglik", "n_plots", "n_trees"];
    out.write("glm_variance.csv", csv(&header, var)?)?;
    finish(out)
}

pub fn fit_knn(config: &PipelineConfig) -> Result<()> {
    let plots = load(config)?;
    let forest: Vec<PlotRecord> = plots.into_iter().filter(|p| p.is_forest).collect();
    let settings = config.settings().base;
    let mut out = stage(config)?;
    for (label, group) in groups(&forest, config.run.stratify_by_species) {
        let model = knn::fit(&group, &settings.knn_vars, settings.knn).with_context(|| format!("k-NN stratum {label}"))?;
        let rho: Vec<String> = model.projection.lambda2.iter().map(|l| format!("{l:.3}")).collect();
        println!("{label}: {} references, squared canonical correlations [{}]", group.len(), rho.join(", "));
        model.save(&out.path(&format!("knn_{label}")))?;
    }
    finish(out)
}

fn candidates(config: &PipelineConfig, plots: &[PlotRecord]) -> Result<Vec<String>> {
    let available: BTreeSet<&String> = plots[0].metrics.keys().collect();
    if config.select.candidates.is_empty() {
        return Ok(available.into_iter().cloned().collect());
    }
    if let Some(m) = config.select.candidates.iter().find(|c| !available.contains(c)) {
        bail!(InvalidInput(format!("candidate `{m}` is not a metric column of the data")));
    }
    Ok(config.select.candidates.clone())
}

pub fn select_vars(config: &PipelineConfig) -> Result<()> {
    let plots = modeling(config, &load(config)?)?;
    let pool = candidates(config, &plots)?;
    let exec = config.exec();
    let restarts = config.select.restarts;
    let targets = config.selection_targets()?;
    let fits = if targets.contains(&SelectTarget::Knn) {
        Vec::new()
    } else {
        ppm::fit_plots(&plots, exec)
    };
    let mut runs: Vec<(SelectTarget, Vec<SaResult>)> = Vec::new();
    for &target in &targets {
        let results = match target {
            SelectTarget::Knn => {
                let sa = config.sa_config(config.select.knn_subset_size);
                let cost = varsel::knn_cost(&plots, config.settings().base.knn);
                varsel::all_restarts(&pool, cost, &sa, restarts, exec)?
            }
            SelectTarget::PpmScale | SelectTarget::PpmShape => {
                let sa = config.sa_config(config.select.ppm_subset_size);
                let which = if target == SelectTarget::PpmScale { PpmTarget::Scale } else { PpmTarget::Shape };
                let cost = varsel::ppm_cost(&plots, &fits, which);
                varsel::all_restarts(&pool, cost, &sa, restarts, exec)?
            }
        };
        runs.push((target, results));
    }

    let mut summary = Vec::new();
    let mut trace = Vec::new();
    for (target, results) in &runs {
        let best = results
            .iter()
            .enumerate()
            .fold(0, |b, (i, r)| if r.best_cost < results[b].best_cost { i } else { b });
        for (i, r) in results.iter().enumerate() {
            summary.push(vec![
                target.as_str().to_string(),
                r.seed.to_string(),
                r.best_cost.to_string(),
                r.best_subset.join(" "),
                r.evaluations.to_string(),
                (i == best).to_string(),
            ]);
        }
        for t in &results[best].trace {
            trace.push(vec![
                target.as_str().to_string(),
                t.iteration.to_string(),
                t.temperature.to_string(),
                t.subset.join(" "),
                t.cost.to_string(),
                t.delta.to_string(),
                t.u.to_string(),
                t.accepted.to_string(),
            ]);
        }
        let chosen = &results[best].best_subset;
        println!("{}: {} (cost {:.6})", target.as_str(), chosen.join(", "), results[best].best_cost);
        if !config.select.auto {
            match selection_summary(*target, &plots, &fits, chosen) {
                Ok(text) => print!("{text}"),
                Err(e) => println!("  fit summary unavailable: {e:#}"),
            }
        }
    }
    let mut out = stage(config)?;
    let header = ["target", "seed", "best_cost", "subset", "evaluations", "selected"];
    out.write("selected_vars.csv", csv(&header, summary)?)?;
    let header = ["target", "iteration", "temperature", "subset", "cost", "delta", "u", "accepted"];
    out.write("sa_trace.csv", csv(&header, trace)?)?;
    finish(out)
}

/// Fit of the selected subset, printed for review before the subset is
/// copied into the configuration.
fn selection_summary(target: SelectTarget, plots: &[PlotRecord], fits: &[ppm::PlotFit], vars: &[String]) -> Result<String> {
    use std::fmt::Write;
    let mut s = String::new();
    if target == SelectTarget::Knn {
        let x = MetricMatrix::from_plots(plots, vars)?;
        let projection = knn::fit_cca(&knn::response_matrix(plots)?, &x)?;
        let rho: Vec<String> = projection.lambda2.iter().map(|l| format!("{:.4}", l.sqrt())).collect();
        writeln!(s, "  canonical correlations: {}", rho.join(", "))?;
        return Ok(s);
    }
    let model = if target == SelectTarget::PpmScale {
        ppm::train_from_fits(plots, fits, vars, vars, None)?.scale_fit
    } else {
        ppm::train_from_fits(plots, fits, vars, vars, None)?.shape_fit
    };
    for ((name, b), se) in model.coefficient_names().iter().zip(&model.fixed_coefficients).zip(&model.fixed_se) {
        writeln!(s, "  {name:<16} {b:>12.5} (se {se:.5})")?;
    }
    writeln!(s, "  sigma_b {:.5}  sigma {:.5}  AIC {:.2}", model.sigma_b, model.sigma, model.aic)?;
    Ok(s)
}

fn histogram_cells(h: &DbhHistogram) -> impl Iterator<Item = String> + '_ {
    h.bins().map(|v| v.to_string())
}

pub fn evaluate(config: &PipelineConfig) -> Result<()> {
    let plots = modeling(config, &load(config)?)?;
    let settings = config.settings();
    let mut reports = Vec::new();
    let mut predictions = Vec::new();
    for name in &config.run.methods {
        let method = Method::parse(name)?;
        let s = settings.for_method(method);
        let hists = if config.run.stratify_by_species {
            pipeline::loo_histograms_stratified(&plots, method, &s, config.exec())?
        } else {
            pipeline::loo_histograms(&plots, method, &s, config.exec())?
        };
        let report = pipeline::evaluate(method, &plots, &hists)?;
        println!(
            "{method}: summed absolute residuals {:.0} stems (plot-wise {:.0})",
            report.summed_abs_residual, report.plotwise_abs_residual
        );
        for (p, h) in plots.iter().zip(&hists) {
            predictions.push(
                [method.to_string(), p.plot_id.clone()]
                    .into_iter()
                    .chain(histogram_cells(h))
                    .collect::<Vec<_>>(),
            );
        }
        reports.push(report);
    }
    let mut out = stage(config)?;
    out.write("loo_accuracy.csv", pipeline::evaluation_csv(&reports)?)?;
    out.write("residual_sums.csv", pipeline::residual_sums_csv(&reports)?)?;
    let mut header: Vec<String> = vec!["method".into(), "plot_id".into()];
    header.extend((0..NUM_CLASSES).map(|i| format!("n_{}", class_midpoint(i))));
    header.push("n_overflow".into());
    out.write("loo_predictions.csv", io::to_csv_bytes(&header, predictions)?)?;
    finish(out)
}

pub fn estimate(config: &PipelineConfig) -> Result<()> {
    let plots = load(config)?;
    let layers = match &config.data.layers {
        Some(path) => {
            config.require_inputs(true)?;
            io::read_layers(path)?
        }
        None => ClassificationLayers::truth(&plots),
    };
    if let Some(acc) = layers.mask_accuracy(&plots) {
        println!("forest mask agreement with field data: {:.1}%", 100.0 * acc);
    }
    let report = pipeline::run_estimation(
        &plots,
        &layers,
        &config.settings().base,
        config.run.stratify_by_species,
        config.exec(),
    )?;
    let table = pipeline::estimate_table(&report);
    print!("{table}");
    let mut out = stage(config)?;
    out.write("estimate.csv", pipeline::estimate_csv(&report)?)?;
    out.write("estimate.txt", table)?;
    finish(out)
}
