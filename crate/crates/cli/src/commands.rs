use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};

use dirireg::io::{read_dataset, write_table_file, Column};
use dirireg::ml::{fit_ml_regression_traced, MLConfig};
use dirireg::netball::{self, NetballConfig};
use dirireg::plotdata::{bayes_rows, ml_rows, reference_rows, write_plot_csv, PlotRow};
use dirireg::reference::{logit_lm, logit_mixed};
use dirireg::sampler::{self, parameter_names, summarize, write_chain_csv, FitSummary};
use dirireg::seeding::split_seed;
use dirireg::simstudy::{self, run_study, Method, ScenarioConfig, ScenarioKind, StudySettings};
use dirireg::{CompositionDataset, ModelConfig};

use crate::config::RunConfig;

const ML_INTERVAL_DRAWS: usize = 1000;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Readable labels in the order of `parameter_names`.
fn parameter_labels(ds: &CompositionDataset, re: bool) -> Vec<String> {
    let resp = ds.response_names();
    let mut out = Vec::new();
    for col in &ds.mean_design().names {
        out.extend(resp.iter().map(|r| format!("{r}:{col}")));
    }
    out.extend(ds.precision_design().names.iter().map(|c| format!("phi:{c}")));
    out.push("xi".into());
    out.push("xi_star".into());
    if re {
        for g in ds.group_labels() {
            out.extend(resp.iter().map(|r| format!("u:{g}:{r}")));
        }
        out.extend(resp.iter().map(|r| format!("sigma_u:{r}")));
    }
    out
}

fn write_fit_summary(path: &Path, summary: &FitSummary, labels: &[String]) -> Result<()> {
    let rows = summary.parameters.iter().enumerate().map(|(k, s)| {
        vec![
            s.name.clone(),
            labels.get(k).cloned().unwrap_or_default(),
            s.mean.to_string(),
            s.median.to_string(),
            s.lower.to_string(),
            s.upper.to_string(),
            opt(s.p_value),
            opt(s.rhat),
            s.ess.to_string(),
        ]
    });
    write_rows(path, &["parameter", "label", "mean", "median", "lower", "upper", "p_value", "rhat", "ess"], rows)
}

fn write_mu_intervals(
    path: &Path,
    ds: &CompositionDataset,
    mean: &nalgebra::DMatrix<f64>,
    lower: &nalgebra::DMatrix<f64>,
    upper: &nalgebra::DMatrix<f64>,
) -> Result<()> {
    let mut rows = Vec::new();
    for i in 0..ds.n() {
        for (j, name) in ds.response_names().iter().enumerate() {
            rows.push(vec![
                (i + 1).to_string(),
                name.clone(),
                mean[(i, j)].to_string(),
                lower[(i, j)].to_string(),
                upper[(i, j)].to_string(),
            ]);
        }
    }
    write_rows(path, &["row", "dimension", "mean", "lower", "upper"], rows)
}

fn reference_plot_rows(ds: &CompositionDataset) -> Result<Vec<PlotRow>> {
    let mut rows = reference_rows(ds, &logit_lm(ds)?);
    if ds.group().is_some() {
        rows.extend(reference_rows(ds, &logit_mixed(ds)?));
    }
    Ok(rows)
}

fn load(cfg: &RunConfig) -> Result<CompositionDataset> {
    let spec = cfg.load_spec()?;
    let input = cfg.input()?;
    let loaded = read_dataset(input, &spec).with_context(|| format!("loading {}", input.display()))?;
    if loaded.renormalized_rows > 0 {
        warn!("{} rows did not sum to one and were renormalized", loaded.renormalized_rows);
    }
    Ok(loaded.dataset)
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let ds = load(cfg)?;
    let out = cfg.out_dir()?;
    let re = cfg.random_effects();
    let model = ModelConfig { random_effects: re, ..ModelConfig::default() };
    let sc = cfg.sampler();
    sc.validate()?;
    info!("sampling {} chains of {} iterations", sc.n_chains, sc.n_iter);
    let chains = sampler::run(&ds, &model, &sc)?;
    let summary = summarize(&chains)?;
    // chain-level warnings were already logged by the sampler
    for w in summary.warnings.iter().filter(|w| !chains.iter().any(|c| c.warnings.contains(w))) {
        warn!("{w}");
    }
    let labels = parameter_labels(&ds, re);
    write_fit_summary(&out.join("fit_summary.csv"), &summary, &labels)?;
    let names = parameter_names(ds.q(), ds.p(), ds.r(), re.then(|| ds.n_groups()));
    for (c, chain) in chains.iter().enumerate() {
        write_chain_csv(&out.join(format!("chain_{}.csv", c + 1)), chain, &names)?;
    }
    write_mu_intervals(&out.join("mu_intervals.csv"), &ds, &summary.mu.mean, &summary.mu.lower, &summary.mu.upper)?;

    let mut plot = bayes_rows(&ds, &chains);
    let ml_cfg = MLConfig { seed: split_seed(cfg.seed(), 3), ..MLConfig::default() };
    match fit_ml_regression_traced(&ds, &ml_cfg).0 {
        Ok(fit) => {
            let iv = fit.intervals(&ds, ML_INTERVAL_DRAWS, split_seed(cfg.seed(), 4))?;
            plot.extend(ml_rows(&ds, &fit, &iv));
        }
        Err(e) => warn!("ML baseline failed, plot data has no Wald rows: {e}"),
    }
    if cfg.reference.unwrap_or(false) {
        plot.extend(reference_plot_rows(&ds)?);
    }
    write_plot_csv(&out.join("plotdata_intervals.csv"), &plot)?;

    println!("{:<28} {:>10} {:>10} {:>10} {:>9} {:>7}", "parameter", "mean", "2.5%", "97.5%", "p", "rhat");
    for (s, l) in summary.parameters.iter().zip(&labels) {
        if l.starts_with("u:") {
            continue;
        }
        println!(
            "{:<28} {:>10.4} {:>10.4} {:>10.4} {:>9} {:>7}",
            l,
            s.mean,
            s.lower,
            s.upper,
            s.p_value
                .map(|p| if p == 0.0 { format!("<{:.4}", summary.p_resolution) } else { format!("{p:.4}") })
                .unwrap_or_default(),
            s.rhat.map(|r| format!("{r:.3}")).unwrap_or_default()
        );
    }
    println!("wrote results to {}", out.display());
    Ok(())
}

pub fn cmd_fit_ml(cfg: &RunConfig) -> Result<()> {
    let ds = load(cfg)?;
    let out = cfg.out_dir()?;
    let ml_cfg = MLConfig { seed: cfg.seed(), ..MLConfig::default() };
    let (res, trace) = fit_ml_regression_traced(&ds, &ml_cfg);
    let fit = match res {
        Ok(f) => f,
        Err(e) => {
            let path = out.join("ml_trace.csv");
            let rows = trace.iter().map(|t| {
                vec![t.iteration.to_string(), t.value.to_string(), t.grad_norm.to_string(), t.step.to_string()]
            });
            write_rows(&path, &["iteration", "objective", "grad_norm", "step"], rows)?;
            bail!("ML fit failed: {e}; optimizer trace written to {}", path.display());
        }
    };
    for w in &fit.warnings {
        warn!("{w}");
    }
    let rows = fit.coefficients.iter().map(|c| {
        vec![
            c.name.clone(),
            format!("{:?}", c.kind).to_lowercase(),
            c.dimension.map(|d| ds.response_names()[d].clone()).unwrap_or_default(),
            c.estimate.to_string(),
            opt(c.std_error),
            opt(c.z),
            opt(c.p_value),
        ]
    });
    write_rows(
        &out.join("ml_coefficients.csv"),
        &["coefficient", "kind", "dimension", "estimate", "std_error", "z", "p_value"],
        rows,
    )?;
    let iv = fit.intervals(&ds, ML_INTERVAL_DRAWS, split_seed(cfg.seed(), 4))?;
    let mu = fit.mean_surface(ds.x());
    write_mu_intervals(&out.join("mu_intervals.csv"), &ds, &mu, &iv.mean_lower, &iv.mean_upper)?;
    let mut plot = ml_rows(&ds, &fit, &iv);
    if cfg.reference.unwrap_or(false) {
        plot.extend(reference_plot_rows(&ds)?);
    }
    write_plot_csv(&out.join("plotdata_intervals.csv"), &plot)?;

    println!("log-likelihood {:.6}", fit.log_likelihood);
    println!("{:<28} {:>10} {:>10} {:>10}", "coefficient", "estimate", "std.err", "p");
    for c in &fit.coefficients {
        println!(
            "{:<28} {:>10.4} {:>10} {:>10}",
            c.name,
            c.estimate,
            c.std_error.map(|v| format!("{v:.4}")).unwrap_or_default(),
            c.p_value.map(|v| format!("{v:.4}")).unwrap_or_default()
        );
    }
    println!("wrote results to {}", out.display());
    Ok(())
}

fn scenario(cfg: &RunConfig) -> Result<ScenarioConfig> {
    let name = cfg.scenario.as_deref().unwrap_or("A");
    let mut sc = match name {
        "A" | "a" => ScenarioConfig::scenario_a(),
        "B" | "b" => ScenarioConfig::scenario_b(),
        path if path.ends_with(".json") && Path::new(path).is_file() => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading scenario {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing scenario {path}"))?
        }
        other => bail!("unknown scenario `{other}`; valid options are A, B, or a path to a JSON scenario file"),
    };
    if let Some(phi) = cfg.phi {
        if sc.kind == ScenarioKind::B {
            bail!("--phi sets a constant precision and applies to scenario A only");
        }
        if !(phi > 0.0) {
            bail!("--phi must be positive");
        }
        sc = sc.with_phi(phi);
    }
    if let Some(r) = cfg.replicates {
        sc.replicates = r;
    }
    sc.seed = cfg.seed();
    sc.validate()?;
    Ok(sc)
}

pub fn cmd_study(cfg: &RunConfig) -> Result<()> {
    let sc = scenario(cfg)?;
    let out = cfg.out_dir()?;
    let sampler_cfg = cfg.sampler();
    sampler_cfg.validate()?;
    let settings = StudySettings::new(sampler_cfg);
    info!("running {} replicates", sc.replicates);
    let summary = run_study(&sc, &settings, &[Method::Baseline, Method::New])?;
    summary.write_summary_csv(&out.join("study_summary.csv"))?;
    summary.write_pvalues_csv(&out.join("pvalues.csv"))?;
    println!("{}", summary.render());
    println!("wrote results to {}", out.display());
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig, demo: Option<&str>) -> Result<()> {
    let out = cfg.out_dir()?;
    match demo {
        Some("netball") => {
            let d = netball::generate(&NetballConfig::default(), cfg.seed())?;
            let ds = &d.dataset;
            write_table_file(&out.join("netball.csv"), ds.response_names(), ds.responses(), &d.columns())?;
            let rows = (0..d.true_u.nrows()).map(|k| {
                let mut r = vec![ds.group_labels()[k].clone()];
                r.extend(d.true_u.row(k).iter().map(|v| v.to_string()));
                r
            });
            let mut header = vec!["player"];
            header.extend(netball::RESPONSES);
            write_rows(&out.join("netball_effects.csv"), &header, rows)?;
            println!("wrote {} rows to {}", ds.n(), out.join("netball.csv").display());
        }
        Some(other) => bail!("unknown demo `{other}`; the only demo is netball"),
        None => {
            let sc = scenario(cfg)?;
            let g = simstudy::generate(&sc, cfg.seed())?;
            let ds = &g.dataset;
            let mut cols = vec![Column::labels("level", g.level.iter().map(|l| (l + 1).to_string()).collect())];
            if let Some(x2) = &g.x2 {
                cols.push(Column::numeric("x2", x2.clone()));
            }
            write_table_file(&out.join("data.csv"), ds.response_names(), ds.responses(), &cols)?;
            let rows = (0..ds.n()).map(|i| {
                let mut r = vec![(i + 1).to_string()];
                r.extend(g.true_mu.row(i).iter().map(|v| v.to_string()));
                r.push(g.true_phi[i].to_string());
                r
            });
            let mu_names: Vec<String> = (1..=ds.p()).map(|j| format!("mu{j}")).collect();
            let mut header: Vec<&str> = vec!["row"];
            header.extend(mu_names.iter().map(String::as_str));
            header.push("phi");
            write_rows(&out.join("truth.csv"), &header, rows)?;
            println!("wrote {} rows to {}", ds.n(), out.join("data.csv").display());
        }
    }
    Ok(())
}

/// Generates the netball analogue and runs all four analyses on it.
pub fn cmd_demo(cfg: &RunConfig, name: &str) -> Result<()> {
    if name != "netball" {
        bail!("unknown demo `{name}`; the only demo is netball");
    }
    cmd_simulate(cfg, Some("netball"))?;
    let out = cfg.out_dir()?;
    let fit_cfg = RunConfig {
        input: Some(out.join("netball.csv")),
        response: Some(netball::RESPONSES.iter().map(|s| s.to_string()).collect()),
        mean_cols: Some(vec!["position".into()]),
        group: Some("player".into()),
        random_effects: Some(true),
        reference: Some(true),
        ..cfg.clone()
    };
    cmd_fit(&fit_cfg)
}
