use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use ndarray::Array2;
use qfit_core::eval::pearson_correlation;
use qfit_core::fitref::fit_dataset;
use qfit_core::net::derive_seed;
use qfit_core::specfun::{i0e, log_i0, log_i0_hankel, log_i0_reference, log_i0_series_lse, DEFAULT_SERIES_TERMS};
use qfit_core::{
    compute_metrics, make_dataset, select_common_init, train, Checkpoint, Estimator, EvalReport,
    FitResult, LossKind, VoxelDataset,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, SigmaSource};
use crate::manifest::RunDir;

const SPLITS: [&str; 3] = ["train", "val", "test"];
const LOSSES: [LossKind; 2] = [LossKind::Mse, LossKind::Nlr];

fn snr_label(snr: f64) -> String {
    format!("snr_{snr}")
}

/// Seeds are derived from the master seed and the SNR's position in the list.
struct Seeds {
    splits: [u64; 3],
    background: u64,
    init: u64,
    training: u64,
}

impl Seeds {
    fn for_snr(master: u64, index: usize) -> Self {
        let i = index as u64;
        Seeds {
            splits: [
                derive_seed(master, 10 * i),
                derive_seed(master, 10 * i + 1),
                derive_seed(master, 10 * i + 2),
            ],
            background: derive_seed(master, 10 * i + 3),
            init: derive_seed(master, 10 * i + 4),
            training: derive_seed(master, 10 * i + 5),
        }
    }
}

fn data_dir(config: &ExperimentConfig, snr: f64) -> PathBuf {
    config.model_dir().join("data").join(snr_label(snr))
}

fn train_dir(config: &ExperimentConfig, snr: f64) -> PathBuf {
    config.model_dir().join("train").join(snr_label(snr))
}

fn load_split(config: &ExperimentConfig, snr: f64, split: &str) -> Result<VoxelDataset> {
    let path = data_dir(config, snr).join(format!("{split}.csv"));
    let ds = VoxelDataset::load_csv(&path)
        .with_context(|| format!("loading {} (run `qfit simulate` first)", path.display()))?;
    if ds.model_kind != config.model_kind {
        bail!("{} holds {} data, config asks for {}", path.display(), ds.model_kind, config.model_kind);
    }
    Ok(ds)
}

fn load_checkpoint(config: &ExperimentConfig, snr: f64, name: &str, ds: &VoxelDataset) -> Result<Checkpoint> {
    let path = train_dir(config, snr).join(format!("{name}.json"));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {} (run `qfit train` first)", path.display()))?;
    if ck.model_kind != ds.model_kind || ck.network.input_width() != ds.protocol.len() {
        bail!(
            "{} is a {} network with {} inputs; the data are {} with {} b-values",
            path.display(),
            ck.model_kind,
            ck.network.input_width(),
            ds.model_kind,
            ds.protocol.len()
        );
    }
    Ok(ck)
}

fn noise_level(config: &ExperimentConfig, ds: &VoxelDataset) -> Result<f64> {
    match config.sigma_source {
        SigmaSource::True => Ok(ds.sigma_true),
        SigmaSource::Estimated => ds
            .sigma_estimated
            .ok_or_else(|| anyhow!("dataset carries no sigma estimate but sigma_source = \"estimated\"")),
    }
}

fn write_records<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(run: &mut RunDir, rel: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    let csv_path = run.file(rel.join(format!("{stem}.csv")))?;
    report.write_csv(BufWriter::new(File::create(&csv_path)?))?;
    let json_path = run.file(rel.join(format!("{stem}.json")))?;
    std::fs::write(json_path, report.to_json()? + "\n")?;
    Ok(())
}

fn finish(run: RunDir, command: &str, config: &ExperimentConfig) -> Result<()> {
    let root = run.root().to_path_buf();
    let manifest = run.finish(
        command,
        Some(config.model_kind.to_string()),
        Some(config.hash()?),
        Some(config.master_seed),
    )?;
    println!("{command}: wrote {} files under {}", manifest.files.len(), root.display());
    Ok(())
}

pub fn simulate(config: &ExperimentConfig) -> Result<()> {
    let mut run = RunDir::create(config.model_dir().join("data"))?;
    let protocol = config.model_kind.default_protocol();
    let sizes = [config.n_train, config.n_val, config.n_test];
    for (i, &snr) in config.snr_list.iter().enumerate() {
        let seeds = Seeds::for_snr(config.master_seed, i);
        let label = snr_label(snr);
        let mut sigma_estimated = None;
        for ((split, n), seed) in SPLITS.iter().zip(sizes).zip(seeds.splits) {
            let mut ds = make_dataset(config.model_kind, snr, n, &protocol, seed)?;
            match sigma_estimated {
                None => sigma_estimated = Some(ds.estimate_sigma_from_background(config.n_background, seeds.background)?),
                Some(s) => ds.sigma_estimated = Some(s),
            }
            ds.save_csv(run.file(Path::new(&label).join(format!("{split}.csv")))?)?;
            run.seed(format!("{label}/{split}"), seed);
        }
        run.seed(format!("{label}/background"), seeds.background);
        let est = sigma_estimated.expect("three splits written");
        println!(
            "{} SNR {snr}: sigma_true {} sigma_estimated {est} ({:+.3}%)",
            config.model_kind,
            1.0 / snr,
            100.0 * (est * snr - 1.0)
        );
    }
    finish(run, "simulate", config)
}

#[derive(Serialize)]
struct InitRow {
    repetition: usize,
    seed: u64,
    best_validation_loss: Option<f64>,
    chosen: bool,
}

#[derive(Serialize)]
struct InitHistoryRow {
    repetition: usize,
    epoch: usize,
    train_loss: f64,
    validation_loss: f64,
}

pub fn train_networks(config: &ExperimentConfig) -> Result<()> {
    let mut run = RunDir::create(config.model_dir().join("train"))?;
    let hash = config.hash()?;
    for (i, &snr) in config.snr_list.iter().enumerate() {
        let seeds = Seeds::for_snr(config.master_seed, i);
        let label = snr_label(snr);
        let rel = PathBuf::from(&label);
        let train_data = load_split(config, snr, "train")?;
        let val_data = load_split(config, snr, "val")?;
        let sigma = noise_level(config, &train_data)?;

        info!("{label}: {} initialisation runs", config.n_init_repetitions);
        let init_config = config.train.to_train_config(seeds.init, LossKind::Nlr);
        let init = select_common_init(&train_data, &val_data, &init_config, config.n_init_repetitions, sigma)
            .with_context(|| format!("{label}: common initialisation"))?;
        Checkpoint::new(init.network.clone(), config.model_kind, init.seeds[init.chosen], hash.clone())
            .save(run.file(rel.join("common_init.json"))?)?;
        write_records(
            &run.file(rel.join("common_init.csv"))?,
            init.validation_losses.iter().enumerate().map(|(r, v)| InitRow {
                repetition: r,
                seed: init.seeds[r],
                best_validation_loss: *v,
                chosen: r == init.chosen,
            }),
        )?;
        write_records(
            &run.file(rel.join("common_init_history.csv"))?,
            init.histories.iter().enumerate().flat_map(|(r, h)| {
                h.iter().map(move |e| InitHistoryRow {
                    repetition: r,
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    validation_loss: e.validation_loss,
                })
            }),
        )?;
        run.seed(format!("{label}/common_init"), seeds.init);
        run.seed(format!("{label}/training"), seeds.training);

        for loss in LOSSES {
            let cfg = config.train.to_train_config(seeds.training, loss);
            let result = match train(&train_data, &val_data, &init.network, &cfg, sigma) {
                Ok(r) => r,
                Err(qfit_core::Error::Diverged { epoch, reason, history }) => {
                    let path = run.file(rel.join(format!("history_{loss}.csv")))?;
                    write_records(&path, history.iter())?;
                    bail!("{label}: {loss} training diverged at epoch {epoch}: {reason} (history in {})", path.display());
                }
                Err(e) => return Err(e.into()),
            };
            Checkpoint::new(result.final_network, config.model_kind, seeds.training, hash.clone())
                .save(run.file(rel.join(format!("{loss}.json")))?)?;
            write_records(&run.file(rel.join(format!("history_{loss}.csv")))?, result.loss_history.iter())?;
            println!(
                "{} SNR {snr} {loss}: best validation loss {} at epoch {} of {}",
                config.model_kind, result.best_validation_loss, result.best_epoch, result.epochs_run
            );
        }
    }
    finish(run, "train", config)
}

fn diffusivity_summary(report: &EvalReport, config: &ExperimentConfig) -> String {
    let kind = config.model_kind;
    let name = kind.param_names()[kind.diffusivity_index()];
    let top = kind.param_ranges()[kind.diffusivity_index()].1;
    match (report.marginal_at(name, top), report.overall_for(name)) {
        (Ok(m), Ok(o)) => format!(
            "{name} bias at {name}={} is {:+.4} ({:+.2}%), overall {:+.4}",
            m.value,
            m.bias.mean,
            100.0 * m.bias.mean / m.value,
            o.bias
        ),
        _ => String::new(),
    }
}

pub fn evaluate(config: &ExperimentConfig) -> Result<()> {
    let mut run = RunDir::create(config.model_dir().join("evaluate"))?;
    let grid = config.model_kind.param_grid();
    for &snr in &config.snr_list {
        let label = snr_label(snr);
        let test = load_split(config, snr, "test")?;
        for loss in LOSSES {
            let ck = load_checkpoint(config, snr, &loss.to_string(), &test)?;
            let pred = ck.network.predict(config.model_kind, test.signals.view())?;
            let report = compute_metrics(pred.view(), test.truth.view(), &grid)?;
            write_report(&mut run, Path::new(&label), &format!("eval_{loss}"), &report)?;
            println!("{} SNR {snr} {loss}: {}", config.model_kind, diffusivity_summary(&report, config));
        }
    }
    finish(run, "evaluate", config)
}

#[derive(Serialize)]
struct Agreement {
    parameter: String,
    n_voxels: usize,
    pearson_r: f64,
    mean_abs_difference: f64,
}

fn fits_to_array(fits: &[FitResult], p: usize) -> Array2<f64> {
    let mut out = Array2::zeros((fits.len(), p));
    for (mut row, fit) in out.rows_mut().into_iter().zip(fits) {
        for (o, v) in row.iter_mut().zip(fit.params.to_vec()) {
            *o = v;
        }
    }
    out
}

pub fn fitref(config: &ExperimentConfig) -> Result<()> {
    let mut run = RunDir::create(config.model_dir().join("fitref"))?;
    let kind = config.model_kind;
    let grid = kind.param_grid();
    for &snr in &config.snr_list {
        let label = snr_label(snr);
        let rel = PathBuf::from(&label);
        let full = load_split(config, snr, "test")?;
        let test = full.slice(0, config.n_fitref_voxels.min(full.n_voxels()))?;
        let sigma = noise_level(config, &full)?;
        let mut mle = None;
        for (name, est) in [("mle", Estimator::Mle { sigma }), ("lsq", Estimator::Lsq)] {
            let fits = fit_dataset(test.signals.view(), &test.protocol, est)?;
            let pred = fits_to_array(&fits, kind.n_params());
            let report = compute_metrics(pred.view(), test.truth.view(), &grid)?;
            write_report(&mut run, &rel, &format!("fit_{name}"), &report)?;
            let not_converged = fits.iter().filter(|f| !f.converged).count();
            println!(
                "{kind} SNR {snr} {name} fit of {} voxels ({not_converged} not converged): {}",
                fits.len(),
                diffusivity_summary(&report, config)
            );
            if name == "mle" {
                mle = Some(pred);
            }
        }

        // Network against the likelihood fit, when an NLR network exists.
        let ck_path = train_dir(config, snr).join("nlr.json");
        if ck_path.exists() {
            let ck = load_checkpoint(config, snr, "nlr", &test)?;
            let net = ck.network.predict(kind, test.signals.view())?;
            let mle = mle.expect("mle fitted above");
            let d = kind.diffusivity_index();
            let a = net.column(d).to_vec();
            let b = mle.column(d).to_vec();
            let agreement = Agreement {
                parameter: kind.param_names()[d].to_string(),
                n_voxels: a.len(),
                pearson_r: pearson_correlation(&a, &b)?,
                mean_abs_difference: a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64,
            };
            println!(
                "{kind} SNR {snr} NLR network vs MLE {}: r = {:.4}, mean |diff| = {:.4}",
                agreement.parameter, agreement.pearson_r, agreement.mean_abs_difference
            );
            std::fs::write(
                run.file(rel.join("agreement_nlr_mle.json"))?,
                serde_json::to_string_pretty(&agreement)? + "\n",
            )?;
        }
    }
    finish(run, "fitref", config)
}

/// Points at which the `ln I0` implementations are compared.
pub const BESSEL_CHECK_POINTS: [f64; 18] = [
    1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1e3, 1e4, 1e5, 1e6, 1e8,
];

#[derive(Debug, Serialize)]
pub struct BesselRow {
    pub x: f64,
    pub reference: f64,
    pub proposed_rel_error: f64,
    pub hankel_rel_error: f64,
    pub series_lse_rel_error: f64,
    pub naive_rel_error: f64,
    /// Methods whose value is NaN or infinite, separated by `;`.
    pub non_finite: String,
}

fn rel_error(value: f64, reference: f64) -> f64 {
    if value.is_finite() {
        ((value - reference) / reference).abs()
    } else {
        f64::NAN
    }
}

pub fn bessel_table() -> Result<Vec<BesselRow>> {
    let mut rows = Vec::new();
    for &x in &BESSEL_CHECK_POINTS {
        let reference = log_i0_reference(x)?;
        let methods = [
            ("proposed", log_i0(x)?),
            ("hankel", log_i0_hankel(x)?),
            ("series_lse", log_i0_series_lse(x, DEFAULT_SERIES_TERMS)?),
            // Direct evaluation of I0 overflows past x ~ 713.
            ("naive", (i0e(x)? * x.exp()).ln()),
        ];
        let non_finite = methods
            .iter()
            .filter(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(";");
        rows.push(BesselRow {
            x,
            reference,
            proposed_rel_error: rel_error(methods[0].1, reference),
            hankel_rel_error: rel_error(methods[1].1, reference),
            series_lse_rel_error: rel_error(methods[2].1, reference),
            naive_rel_error: rel_error(methods[3].1, reference),
            non_finite,
        });
    }
    Ok(rows)
}

pub fn bessel_check(config: Option<&ExperimentConfig>) -> Result<()> {
    let rows = bessel_table()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "{:>10} {:>14} {:>10} {:>10} {:>10} {:>10}  non-finite", "x", "ln I0(x)", "proposed", "hankel", "series64", "naive")?;
    for r in &rows {
        writeln!(
            out,
            "{:>10.0e} {:>14.6e} {:>10.1e} {:>10.1e} {:>10.1e} {:>10.1e}  {}",
            r.x, r.reference, r.proposed_rel_error, r.hankel_rel_error, r.series_lse_rel_error, r.naive_rel_error, r.non_finite
        )?;
    }
    if let Some(config) = config {
        let mut run = RunDir::create(config.output_dir.join("bessel_check"))?;
        write_records(&run.file("bessel_check.csv")?, rows.iter())?;
        let root = run.root().to_path_buf();
        run.finish("bessel-check", None, Some(config.hash()?), None)?;
        println!("bessel-check: table written under {}", root.display());
    }
    Ok(())
}
