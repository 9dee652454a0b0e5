//! certkit command line: load config and data, run the selected test
//! suites, emit machine- and human-readable certification reports.
//!
//! Exit codes: 0 = everything enabled passed, 1 = at least one suite
//! failed, 2 = configuration or adapter error.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use certkit::calibration::{certify_uncertainty_quantification, UqParams};
use certkit::data::model::{ModelAdapter, SubprocessAdapter};
use certkit::data::{load_dataset, write_dataset, CertDataset};
use certkit::elbo::{toy_train, ToyTrainConfig};
use certkit::generalization::{
    ensemble_disagreement_report, test_new_feature_combinations, test_no_feature_collapse,
    DisagreementParams, FeatureCombinationParams,
};
use certkit::head::{head_batch, HeadConfig};
use certkit::linear::{test_1_to_1_mapping, test_content_style_separation};
use certkit::lipschitz::{bilipschitz_bounds, LayerSpec};
use certkit::seeds::child_seed;
use certkit::simstudy::{
    compute_failure_table, gen_conditional_failure, gen_perfect_calibration,
    gen_time_varying_forecast, gen_toy_disentangled, ToyGenConfig,
};

use config::{load_config, RunConfig};
use report::{
    render_markdown, DisentanglementSuite, GeneralizationSuite, LipschitzSuite, OodSuite,
    PvalueRow, ReportDoc, ReportMeta, SimstudySuite, SuitesReport, REPORT_VERSION,
};

#[derive(Parser)]
#[command(name = "certkit", version, about = "Certification harness for probabilistic regression models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured certification suites and write reports.
    Certify {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo study of the calibration-test failure probability.
    Simstudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit the plottable data of a report as CSV bundles.
    ReportPlots {
        /// Path to a report.json produced by `certify`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, value_enum)]
        scenario: Scenario,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    /// Observations N(0,1), predictions N(0,1).
    PerfectCalibration,
    /// Marginally calibrated but conditionally wrong on the feature x.
    ConditionalFailure,
    /// Time-varying means with a constant forecast.
    TimeVarying,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Certify { config, seed, out } => cmd_certify(&config, seed, out),
        Command::Simstudy { config, seed, out } => cmd_simstudy(config.as_deref(), seed, out),
        Command::ReportPlots { report, out } => cmd_report_plots(&report, &out).map(|()| 0),
        Command::Gen { scenario, n, seed, out } => cmd_gen(scenario, n, seed, &out).map(|()| 0),
    }
}

fn cmd_gen(scenario: Scenario, n: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let dataset = match scenario {
        Scenario::PerfectCalibration => gen_perfect_calibration(n, seed)?,
        Scenario::ConditionalFailure => gen_conditional_failure(n, seed)?,
        Scenario::TimeVarying => gen_time_varying_forecast(n, seed)?,
    };
    write_dataset(&dataset, out)?;
    println!("wrote {} records to {}", dataset.len(), out.display());
    Ok(())
}

fn subprocess_backend(adapter: &ModelAdapter) -> anyhow::Result<SubprocessAdapter> {
    match adapter {
        ModelAdapter::Subprocess { command, workdir, timeout_secs } => Ok(SubprocessAdapter {
            command: command.clone(),
            workdir: workdir.clone(),
            timeout: std::time::Duration::from_secs_f64(*timeout_secs),
        }),
        ModelAdapter::Precomputed => {
            bail!("this suite needs a trainable (subprocess) adapter")
        }
    }
}

fn cmd_certify(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<i32> {
    let mut config = load_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.out_dir = o;
    }
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("cannot create {}", config.out_dir.display()))?;

    let dataset = match &config.dataset {
        Some(ds) => Some(load_dataset(&ds.path, None)?),
        None => None,
    };

    let mut suites = SuitesReport::default();
    let mut all_passed = true;

    if config.suites.calibration {
        let data = dataset.as_ref().context("calibration suite needs a dataset")?;
        let params = UqParams {
            eps: config.params.eps,
            n_min: config.params.n_min,
            p_fail: config.params.p_fail,
            thresh: config.params.thresh,
            pairwise_conditioning: config.params.pairwise_conditioning,
        };
        let cert = certify_uncertainty_quantification(data, &params)?;
        all_passed &= cert.certified;
        println!("suite calibration: {}", verdict(cert.certified));
        suites.calibration = Some(cert);
    }

    if config.suites.disentanglement {
        let suite = run_disentanglement_suite(&config, dataset.as_ref())?;
        all_passed &= suite.passed;
        println!("suite disentanglement: {}", verdict(suite.passed));
        suites.disentanglement = Some(suite);
    }

    if config.suites.generalization {
        let data = dataset.as_ref().context("generalization suite needs a dataset")?;
        let adapter = config.adapter.as_ref().context("generalization suite needs an adapter")?;
        let backend = subprocess_backend(adapter)?;
        let fc = test_new_feature_combinations(data, &backend, &FeatureCombinationParams {
            delta: config.params.delta,
            n_repeat: config.params.n_repeat,
            margin: config.params.margin,
            train_fraction: config.params.train_fraction,
            seed: child_seed(config.seed, 0x6E),
        })?;
        let mut passed = fc.outcome.passed;
        let feature_collapse = match config.params.collapse_content_index {
            Some(idx) => {
                let outcome = test_no_feature_collapse(data, &backend, idx)?;
                passed &= outcome.passed;
                Some(outcome)
            }
            None => None,
        };
        let disagreement = match config.params.disagreement_tau {
            Some(tau) if data.schema.ensemble_size >= 2 => {
                let rep = ensemble_disagreement_report(
                    data,
                    &DisagreementParams {
                        tau,
                        expected_fp_rate: config.params.expected_fp_rate,
                        expected_fn_rate: config.params.expected_fn_rate,
                    },
                    None,
                    None,
                )?;
                passed &= rep.outcome.passed;
                Some(rep)
            }
            _ => None,
        };
        all_passed &= passed;
        println!("suite generalization: {}", verdict(passed));
        suites.generalization = Some(GeneralizationSuite {
            passed,
            feature_combinations: fc,
            feature_collapse,
            disagreement,
        });
    }

    if config.suites.ood {
        let data = dataset.as_ref().context("ood suite needs a dataset")?;
        let range = config.range.as_ref().context("ood suite needs a range")?.to_range()?;
        let head_config = HeadConfig::unoriented(range);
        let rows = head_batch(data, &head_config, config.params.tau_ood)?;
        let batch_path = config.out_dir.join("ood_batch.jsonl");
        let mut text = String::new();
        for row in &rows {
            text.push_str(&serde_json::to_string(row)?);
            text.push('\n');
        }
        std::fs::write(&batch_path, text)?;
        let n_flagged = rows.iter().filter(|r| r.is_ood).count();
        let flagged_fraction = n_flagged as f64 / rows.len() as f64;
        let passed = flagged_fraction <= config.params.max_ood_fraction;
        all_passed &= passed;
        println!(
            "suite ood: {} ({n_flagged}/{} flagged, batch written to {})",
            verdict(passed),
            rows.len(),
            batch_path.display()
        );
        suites.ood = Some(OodSuite {
            passed,
            n_records: rows.len(),
            n_flagged,
            flagged_fraction,
            max_flagged_fraction: config.params.max_ood_fraction,
            tau_ood: config.params.tau_ood,
            flagged_ids: rows.iter().filter(|r| r.is_ood).map(|r| r.id.clone()).collect(),
            orientation_assumed: true,
        });
    }

    if config.suites.lipschitz {
        let lip = config.lipschitz.as_ref().context("lipschitz suite needs layers")?;
        let spec = LayerSpec::Composition { layers: lip.layers.clone() };
        let bounds = bilipschitz_bounds(&spec)?;
        let mut passed = true;
        if let Some(min_lower) = lip.min_lower {
            passed &= !bounds.vacuous_lower && bounds.lower >= min_lower;
        }
        if let Some(max_upper) = lip.max_upper {
            passed &= bounds.upper <= max_upper;
        }
        all_passed &= passed;
        println!(
            "suite lipschitz: {} (bounds [{}, {}])",
            verdict(passed),
            bounds.lower,
            bounds.upper
        );
        suites.lipschitz = Some(LipschitzSuite {
            passed,
            layers: lip.layers.clone(),
            bounds,
            min_lower: lip.min_lower,
            max_upper: lip.max_upper,
        });
    }

    if config.suites.simstudy {
        let suite = simstudy_suite(&config)?;
        println!("suite simstudy: {}", verdict(suite.passed));
        let csv_path = config.out_dir.join("failure_table.csv");
        std::fs::write(&csv_path, suite.table.to_csv())?;
        suites.simstudy = Some(suite);
    }

    let doc = ReportDoc {
        version: REPORT_VERSION,
        meta: ReportMeta {
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config: config_path.display().to_string(),
        },
        seed: config.seed,
        certified: all_passed,
        suites,
    };
    let json_path = config.out_dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc)?)?;
    std::fs::write(config.out_dir.join("report.md"), render_markdown(&doc))?;
    println!(
        "{}; report written to {}",
        if all_passed { "CERTIFIED" } else { "NOT CERTIFIED" },
        json_path.display()
    );
    Ok(if all_passed { 0 } else { 1 })
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "pass"
    } else {
        "FAIL"
    }
}

/// Disentanglement suite: verifies dataset latents, or trains the toy model
/// first when a [toy] section is configured.
fn run_disentanglement_suite(
    config: &RunConfig,
    dataset: Option<&CertDataset>,
) -> anyhow::Result<DisentanglementSuite> {
    let alpha = config.params.significance_level;
    let (latents, v_content, v_style, loss_trace) = match &config.toy {
        Some(toy) => {
            let mut gen_cfg = ToyGenConfig::new(
                toy.n_pairs,
                toy.content_dims,
                toy.style_dims,
                child_seed(config.seed, 0x70),
            );
            gen_cfg.input_dim = Some(toy.input_dim);
            gen_cfg.noise_sd = toy.noise_sd;
            let problem = gen_toy_disentangled(&gen_cfg)?;
            let latent_style = toy.latent_style_dims.unwrap_or(toy.style_dims);
            let latent_dim = toy.content_dims + latent_style;
            let trained = toy_train(&problem.batch, latent_dim, &ToyTrainConfig {
                epochs: toy.epochs,
                learning_rate: toy.learning_rate,
                seed: child_seed(config.seed, 0x71),
            })?;
            let n_eval = toy.n_eval.min(problem.batch.len());
            let mut latents = DMatrix::zeros(n_eval, latent_dim);
            let mut v_content = DMatrix::zeros(n_eval, toy.content_dims);
            let mut v_style = DMatrix::zeros(n_eval, toy.style_dims);
            for i in 0..n_eval {
                let (mu, _) = trained.encode_raw(&problem.batch.lhs[i]);
                for (j, m) in mu.iter().enumerate() {
                    latents[(i, j)] = *m;
                }
                for j in 0..toy.content_dims {
                    v_content[(i, j)] = problem.factors_lhs[i][j];
                }
                for j in 0..toy.style_dims {
                    v_style[(i, j)] = problem.factors_lhs[i][toy.content_dims + j];
                }
            }
            (latents, v_content, v_style, Some(trained.trace))
        }
        None => {
            let data = dataset.context("disentanglement suite needs a dataset or a [toy] section")?;
            if data.schema.ensemble_size < 1 {
                bail!("disentanglement suite needs latents in the dataset");
            }
            let n = data.len();
            let k = data.schema.content_dims;
            let l = data.schema.style_dims;
            // Member 0 is the verified encoder.
            let latents = DMatrix::from_fn(n, k + l, |i, j| {
                data.records[i].latents.as_ref().expect("validated")[0][j].mu
            });
            let v_content = DMatrix::from_fn(n, k, |i, j| data.records[i].v_content[j]);
            let style_cols = data.fully_labeled_style_features();
            let v_style = DMatrix::from_fn(n, style_cols.len(), |i, j| {
                data.records[i].v_style[style_cols[j]].expect("labeled")
            });
            (latents, v_content, v_style, None)
        }
    };

    let k = v_content.ncols();
    let one = test_1_to_1_mapping(&latents, &v_content, alpha)?;
    let latents_content = latents.columns(0, k).into_owned();
    let latents_style = latents.columns(k, latents.ncols() - k).into_owned();
    let sep = test_content_style_separation(&latents_content, &latents_style, &v_style, alpha)?;

    let mut pvalues = Vec::new();
    for r in &one.regressions {
        let n_latents = r.fit.betas.len() - 1;
        for j in 0..n_latents {
            pvalues.push(PvalueRow {
                factor: r.factor_index,
                latent_index: j,
                beta: r.fit.betas[j],
                p_value: r.fit.p_values[j],
            });
        }
    }

    let passed = one.outcome.passed && (sep.outcome.passed || sep.outcome.skipped);
    Ok(DisentanglementSuite {
        passed,
        one_to_one: one.outcome,
        separation: sep.outcome,
        pvalues,
        loss_trace,
    })
}

fn simstudy_suite(config: &RunConfig) -> anyhow::Result<SimstudySuite> {
    let s = &config.simstudy;
    let table = compute_failure_table(&s.n_grid, &s.eps_grid, s.n_trials, config.seed)?;
    let recommended_n = table.recommend_n(s.recommend_eps, s.target_failure);
    Ok(SimstudySuite {
        passed: true,
        table,
        recommend_eps: s.recommend_eps,
        target_failure: s.target_failure,
        recommended_n,
    })
}

fn cmd_simstudy(
    config_path: Option<&Path>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<i32> {
    let mut config = match config_path {
        Some(p) => load_config(p)?,
        None => toml::from_str("")?,
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.out_dir = o;
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let suite = simstudy_suite(&config)?;
    let csv_path = config.out_dir.join("failure_table.csv");
    std::fs::write(&csv_path, suite.table.to_csv())?;
    print!("{}", suite.table.to_csv());
    match suite.recommended_n {
        Some(n) => println!(
            "recommended N = {n} (failure <= {} at eps = {})",
            suite.target_failure, suite.recommend_eps
        ),
        None => println!("no n in the grid met the failure target"),
    }
    println!("table written to {}", csv_path.display());
    Ok(0)
}

fn cmd_report_plots(report_path: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(report_path)
        .with_context(|| format!("cannot read {}", report_path.display()))?;
    let doc: ReportDoc = serde_json::from_str(&text).context("cannot parse report")?;
    if doc.version != REPORT_VERSION {
        bail!("unknown report version {} (expected {})", doc.version, REPORT_VERSION);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut manifest: Vec<String> = Vec::new();

    if let Some(c) = &doc.suites.calibration {
        for m in &c.marginal {
            let name = format!("calibration_curve_output{}.csv", m.output_index);
            std::fs::write(out_dir.join(&name), m.curve.to_csv())?;
            manifest.push(name);

            let name = format!("pit_histogram_output{}.csv", m.output_index);
            let mut csv = String::from("bin_lo,bin_hi,count\n");
            for (lo, hi, count) in &m.pit_histogram {
                csv.push_str(&format!("{lo},{hi},{count}\n"));
            }
            std::fs::write(out_dir.join(&name), csv)?;
            manifest.push(name);
        }
    }

    if let Some(d) = &doc.suites.disentanglement {
        if !d.pvalues.is_empty() {
            let name = "disentanglement_pvalues.csv".to_string();
            let mut csv = String::from("factor,latent_index,beta,p_value\n");
            for row in &d.pvalues {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    row.factor, row.latent_index, row.beta, row.p_value
                ));
            }
            std::fs::write(out_dir.join(&name), csv)?;
            manifest.push(name);
        }
        if let Some(trace) = &d.loss_trace {
            let name = "loss_trace.csv".to_string();
            std::fs::write(out_dir.join(&name), certkit::elbo::loss_trace_csv(trace))?;
            manifest.push(name);
        }
    }

    if let Some(s) = &doc.suites.simstudy {
        let name = "simstudy_failure_table.csv".to_string();
        std::fs::write(out_dir.join(&name), s.table.to_csv())?;
        manifest.push(name);
    }

    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {} csv file(s) + manifest to {}", manifest.len(), out_dir.display());
    Ok(())
}
