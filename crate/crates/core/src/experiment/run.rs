use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Analysis, DatasetSpec, ExperimentConfig};
use super::plot::{line_plot, Series};
use super::report::{Report, UnitMetrics};
use crate::attacks::{attack_suite, AttackConfig, Norm};
use crate::data::{self, inject_shortcut, load_cifar10, synth_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::linmap::{end_to_end_beta, saliency_beta, SaliencyTarget};
use crate::models::{train, EpochStats, Model, ModelSpec, TrainedModel};
use crate::rng;
use crate::spectral::{
    self, angular_profile, dft2_tensor, kappa_high_pooled, mean_magnitude_spectrum, pq_norm, radial_centroid,
    radial_profile, spearman, uncertainty_sweep, EnergyProfile,
};
use crate::tensor::Tensor;

/// One dataset variant for one trial.
pub struct PreparedData {
    pub variant: Option<String>,
    pub train: Dataset,
    pub test: Dataset,
    /// Fraction of pixels clamped by the injection, per split.
    pub clamped: Option<(f64, f64)>,
}

/// Seed of trial `t` under the experiment seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    rng::derive_str(rng::derive(seed, trial as u64), "trial")
}

fn base_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synth(s) => synth_dataset(s, rng::derive_str(seed, "data")),
        DatasetSpec::Cifar {
            path,
            grayscale,
            downsample,
            train_limit,
            test_limit,
        } => {
            let prep = |split: Split, limit: &Option<usize>| -> Result<Dataset> {
                let mut d = load_cifar10(path, split)?;
                if let Some(n) = limit {
                    d = d.head(*n);
                }
                if *grayscale {
                    d = d.to_grayscale()?;
                }
                if *downsample {
                    d = d.downsample_by_2()?;
                }
                Ok(d)
            };
            Ok((prep(Split::Train, train_limit)?, prep(Split::Test, test_limit)?))
        }
    }
}

/// Datasets of trial `trial`: the clean one, or one per injection variant.
/// Each variant draws its class patterns from its own seed mixed with the
/// trial, shared by both splits.
pub fn prepare_data(cfg: &ExperimentConfig, trial: usize) -> Result<Vec<PreparedData>> {
    let seed = trial_seed(cfg.seed, trial);
    let (train, test) = base_data(cfg, seed)?;
    if cfg.inject.is_empty() {
        return Ok(vec![PreparedData {
            variant: None,
            train,
            test,
            clamped: None,
        }]);
    }
    cfg.inject
        .iter()
        .map(|v| {
            let mut spec = v.spec.clone();
            spec.seed = rng::derive(spec.seed, trial as u64);
            let (tr, r1) = inject_shortcut(&train, &spec)?;
            let (te, r2) = inject_shortcut(&test, &spec)?;
            if r1.flagged || r2.flagged {
                log::warn!(
                    "{}: injection `{}` clamps {:.2}% / {:.2}% of pixels",
                    cfg.name,
                    v.name,
                    100.0 * r1.clamped_fraction,
                    100.0 * r2.clamped_fraction
                );
            }
            Ok(PreparedData {
                variant: Some(v.name.clone()),
                train: tr,
                test: te,
                clamped: Some((r1.clamped_fraction, r2.clamped_fraction)),
            })
        })
        .collect()
}

/// Sum over channels and bins of `|DFT|`.
pub fn spectral_l1(t: &Tensor) -> Result<f64> {
    Ok(dft2_tensor(t)?.iter().flat_map(|s| s.bins().iter()).map(|c| c.norm()).sum())
}

/// `||x_hat||_1 / ||x_hat||_2`: a scale-free spectral sparsity measure in
/// `[1, sqrt(bins)]`, 0 for a zero input.
pub fn spectral_spread(t: &Tensor) -> Result<f64> {
    let l2 = spectral_pq(t, 2.0)?;
    Ok(if l2 > 0.0 { spectral_l1(t)? / l2 } else { 0.0 })
}

/// `(sum |DFT|^p)^(1/p)` over channels and bins.
pub fn spectral_pq(t: &Tensor, p: f64) -> Result<f64> {
    let mags: Vec<f64> = dft2_tensor(t)?.iter().flat_map(|s| s.bins().iter()).map(|c| c.norm()).collect();
    pq_norm(&mags, p)
}

fn mean_of(items: &[Tensor], f: impl Fn(&Tensor) -> Result<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for t in items {
        acc += f(t)?;
    }
    Ok(acc / items.len().max(1) as f64)
}

/// The predictor viewed as input-space templates: the rows of the end-to-end
/// matrix for linear models, per-example top-logit input gradients otherwise.
pub fn predictor_templates(model: &Model, eval: &Dataset) -> Result<Vec<Tensor>> {
    if model.spec.is_linear() {
        end_to_end_beta(model, model.layers().len())?.row_images(model.spec.input)
    } else {
        let s = saliency_beta(model, eval, SaliencyTarget::TopLogit)?;
        Ok((0..eval.len()).map(|i| s.gradients.slice_outer(i)).collect())
    }
}

/// Centered energy grid of a mean magnitude spectrum.
fn energy(mean_mag: &Tensor) -> Tensor {
    mean_mag.map(|v| v * v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsPoint {
    pub epoch: usize,
    pub mean_spectrum: Tensor,
    pub radial: EnergyProfile,
    pub angular: EnergyProfile,
    pub radial_centroid: f64,
    pub delta_l2: f64,
    pub delta_linf: f64,
    pub success_rate: f64,
}

/// Attacks the weights of each requested checkpoint (every checkpoint when
/// `epochs` is `None`). Epochs without a checkpoint are skipped.
pub fn dynamics_track(
    trained: &TrainedModel,
    cfg: &AttackConfig,
    data: &Dataset,
    epochs: Option<&[usize]>,
) -> Result<Vec<DynamicsPoint>> {
    if trained.checkpoints.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "dynamics needs at least 2 checkpoints, got {}",
            trained.checkpoints.len()
        )));
    }
    let all: Vec<usize> = (0..trained.checkpoints.len()).collect();
    let mut out = Vec::new();
    for &e in epochs.unwrap_or(&all) {
        if e >= trained.checkpoints.len() {
            log::warn!("no checkpoint for epoch {e}; skipped");
            continue;
        }
        let model = trained.at_epoch(e)?;
        let run = attack_suite(&model, data, std::slice::from_ref(cfg)).remove(0);
        let deltas = run.deltas();
        if deltas.is_empty() {
            log::warn!("epoch {e}: every attack failed; skipped");
            continue;
        }
        let mean_spectrum = mean_magnitude_spectrum(&deltas)?;
        let en = energy(&mean_spectrum);
        out.push(DynamicsPoint {
            epoch: e,
            radial: radial_profile(&en)?,
            angular: angular_profile(&en)?,
            radial_centroid: radial_centroid(&en)?,
            delta_l2: mean_of(&deltas, |d| Ok(d.l2_norm()))?,
            delta_linf: mean_of(&deltas, |d| Ok(d.linf_norm()))?,
            success_rate: run.success_rate(),
            mean_spectrum,
        });
    }
    Ok(out)
}

struct Unit<'a> {
    label: String,
    spec: ModelSpec,
    entry: usize,
    trial: usize,
    data: &'a PreparedData,
    dir: PathBuf,
}

fn put(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn put_grid(dir: &Path, stem: &str, grid: &Tensor) -> Result<()> {
    put(&dir.join(format!("{stem}.csv")), spectral::export::grid_csv(grid)?)?;
    put(&dir.join(format!("{stem}.pgm")), spectral::export::pgm(grid, spectral::export::Scale::Linear)?)?;
    put(&dir.join(format!("{stem}_log.pgm")), spectral::export::pgm(grid, spectral::export::Scale::Log)?)
}

fn profile_csv(header: &str, p: &EnergyProfile) -> String {
    let mut s = format!("{header},energy\n");
    for (i, e) in p.bins.iter().enumerate() {
        s.push_str(&format!("{i},{e:?}\n"));
    }
    s
}

fn history_csv(h: &[EpochStats]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in h {
        w.serialize(s).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Attack labels, suffixed with their index when two configs share a norm.
pub fn attack_labels(attacks: &[AttackConfig]) -> Vec<String> {
    attacks
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if attacks.iter().filter(|b| b.norm == a.norm).count() > 1 {
                format!("{}_{i}", a.label())
            } else {
                a.label()
            }
        })
        .collect()
}

fn run_unit(cfg: &ExperimentConfig, u: &Unit) -> Result<Vec<(String, f64)>> {
    let has = |a: Analysis| cfg.analyses.contains(&a);
    let seed = trial_seed(cfg.seed, u.trial);
    let model = Model::build(&u.spec, rng::derive_str(seed, &format!("init/{}", u.spec.name)))?;
    let mut tc = cfg.models[u.entry].train_override().apply(&cfg.train);
    tc.seed = rng::derive_str(seed, &format!("train/{}", u.spec.name));
    let trained = train(&model, &u.data.train, Some(&u.data.test), &tc)?;
    let best = trained.best();
    put(&u.dir.join("history.csv"), history_csv(&trained.history)?)?;
    if cfg.settings.save_models {
        std::fs::create_dir_all(&u.dir)?;
        best.save(&u.dir.join("model"))?;
    }

    let mut m: Vec<(String, f64)> = Vec::new();
    if has(Analysis::Accuracy) {
        let s = &trained.history[trained.best_epoch];
        m.push(("train_accuracy".into(), s.train_accuracy));
        m.push(("test_accuracy".into(), s.test_accuracy));
        m.push(("best_epoch".into(), trained.best_epoch as f64));
        m.push(("epochs_run".into(), (trained.history.len() - 1) as f64));
        if let Some((a, b)) = u.data.clamped {
            m.push(("clamped_fraction_train".into(), a));
            m.push(("clamped_fraction_test".into(), b));
        }
    }

    let eval = match cfg.settings.attack_examples {
        Some(n) => u.data.test.head(n),
        None => u.data.test.clone(),
    };
    let need_beta = [Analysis::Spectra, Analysis::Norms, Analysis::Kappa, Analysis::Spearman]
        .iter()
        .any(|a| has(*a));
    let beta_mag = if need_beta {
        let templates = predictor_templates(&best, &eval)?;
        let mag = mean_magnitude_spectrum(&templates)?;
        if has(Analysis::Spectra) {
            put_grid(&u.dir, "beta_spectrum", &mag)?;
        }
        if has(Analysis::Norms) {
            m.push(("beta_hat_l1".into(), mean_of(&templates, spectral_l1)?));
            m.push(("beta_hat_l2".into(), mean_of(&templates, |t| spectral_pq(t, 2.0))?));
            m.push(("beta_hat_spread".into(), mean_of(&templates, spectral_spread)?));
            if best.spec.is_linear() {
                let p = 2.0 / best.spec.depth() as f64;
                m.push(("beta_hat_l2_over_depth".into(), mean_of(&templates, |t| spectral_pq(t, p))?));
            }
        }
        if has(Analysis::Kappa) {
            let (k, region) = (cfg.settings.kappa_k, cfg.settings.region);
            m.push(("kappa_high_beta".into(), mean_of(&templates, |t| kappa_high_pooled(t, k, region))?));
            if best.spec.is_linear() && best.layers().len() > 1 {
                let reports = uncertainty_sweep(&[&best], k, region)?;
                let mut s = String::from("layer,kappa_beta,kappa_w\n");
                for r in &reports {
                    m.push((format!("kappa_high/beta_{}", r.layer), r.kappa_beta));
                    m.push((format!("kappa_high/w_{}", r.layer), r.kappa_w));
                    s.push_str(&format!("{},{:?},{:?}\n", r.layer, r.kappa_beta, r.kappa_w));
                }
                put(&u.dir.join("kappa.csv"), s)?;
            }
        }
        Some(mag)
    } else {
        None
    };

    let labels = attack_labels(&cfg.attacks);
    let per_attack = [Analysis::Spectra, Analysis::Norms, Analysis::Spearman, Analysis::Profiles]
        .iter()
        .any(|a| has(*a));
    if per_attack {
        for (a, label) in cfg.attacks.iter().zip(&labels) {
            let run = attack_suite(&best, &eval, std::slice::from_ref(a)).remove(0);
            run.write(&u.dir.join(label))?;
            let deltas = run.deltas();
            if !run.failures.is_empty() {
                log::warn!("{} trial {}: {} attack failures", u.label, u.trial, run.failures.len());
            }
            if deltas.is_empty() {
                return Err(Error::InvalidArgument(format!("{label}: every example failed")));
            }
            let mag = mean_magnitude_spectrum(&deltas)?;
            let en = energy(&mag);
            if has(Analysis::Spectra) {
                put_grid(&u.dir, &format!("{label}_spectrum"), &mag)?;
            }
            if has(Analysis::Norms) {
                m.push((format!("{label}/success_rate"), run.success_rate()));
                m.push((format!("{label}/delta_l2"), mean_of(&deltas, |d| Ok(Norm::L2.of(d.data())))?));
                m.push((format!("{label}/delta_linf"), mean_of(&deltas, |d| Ok(Norm::Linf.of(d.data())))?));
                m.push((format!("{label}/delta_l1"), mean_of(&deltas, |d| Ok(Norm::L1.of(d.data())))?));
                m.push((format!("{label}/delta_hat_l1"), mean_of(&deltas, spectral_l1)?));
                m.push((format!("{label}/delta_hat_l2"), mean_of(&deltas, |t| spectral_pq(t, 2.0))?));
                m.push((format!("{label}/delta_hat_spread"), mean_of(&deltas, spectral_spread)?));
            }
            if has(Analysis::Profiles) {
                let radial = radial_profile(&en)?;
                let angular = angular_profile(&en)?;
                put(&u.dir.join(format!("{label}_radial.csv")), profile_csv("radius", &radial))?;
                put(&u.dir.join(format!("{label}_angular.csv")), profile_csv("degree", &angular))?;
                let pts = |p: &EnergyProfile| p.bins.iter().enumerate().map(|(i, e)| (i as f64, *e)).collect();
                put(
                    &u.dir.join(format!("{label}_radial.svg")),
                    line_plot(&format!("{} {label}", u.label), "radius", "energy", &[Series {
                        name: u.label.clone(),
                        points: pts(&radial),
                    }]),
                )?;
                put(
                    &u.dir.join(format!("{label}_angular.svg")),
                    line_plot(&format!("{} {label}", u.label), "degree", "energy", &[Series {
                        name: u.label.clone(),
                        points: pts(&angular),
                    }]),
                )?;
                m.push((format!("{label}/radial_centroid"), radial_centroid(&en)?));
            }
            if has(Analysis::Spearman) {
                let b = beta_mag.as_ref().expect("computed above");
                let rho = spearman(b.data(), mag.data())?.unwrap_or(f64::NAN);
                m.push((format!("{label}/spearman"), rho));
            }
        }
    }

    if has(Analysis::Dynamics) {
        let a = &cfg.attacks[cfg.settings.dynamics_attack];
        let pts = dynamics_track(&trained, a, &eval, cfg.settings.dynamics_epochs.as_deref())?;
        let mut s = String::from("epoch,radial_centroid,delta_l2,delta_linf,success_rate\n");
        for p in &pts {
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                p.epoch, p.radial_centroid, p.delta_l2, p.delta_linf, p.success_rate
            ));
            put_grid(&u.dir.join("dynamics"), &format!("epoch{}", p.epoch), &p.mean_spectrum)?;
            m.push((format!("dynamics/e{}/radial_centroid", p.epoch), p.radial_centroid));
            m.push((format!("dynamics/e{}/delta_l2", p.epoch), p.delta_l2));
            m.push((format!("dynamics/e{}/delta_linf", p.epoch), p.delta_linf));
        }
        put(&u.dir.join("dynamics.csv"), s)?;
        let series = |name: &str, f: &dyn Fn(&DynamicsPoint) -> f64| Series {
            name: name.into(),
            points: pts.iter().map(|p| (p.epoch as f64, f(p))).collect(),
        };
        put(
            &u.dir.join("dynamics_norms.svg"),
            line_plot(&format!("{} perturbation norms", u.label), "epoch", "mean norm", &[
                series("l2", &|p| p.delta_l2),
                series("linf", &|p| p.delta_linf),
            ]),
        )?;
        let radial: Vec<Series> = pts
            .iter()
            .map(|p| Series {
                name: format!("epoch {}", p.epoch),
                points: p.radial.bins.iter().enumerate().map(|(i, e)| (i as f64, *e)).collect(),
            })
            .collect();
        put(
            &u.dir.join("dynamics_radial.svg"),
            line_plot(&format!("{} radial energy by epoch", u.label), "radius", "energy", &radial),
        )?;
        let first = pts.first();
        let at_best = pts.iter().find(|p| p.epoch == trained.best_epoch).or(pts.last());
        if let (Some(f), Some(b)) = (first, at_best) {
            m.push(("dynamics/centroid_initial".into(), f.radial_centroid));
            m.push(("dynamics/centroid_best".into(), b.radial_centroid));
            m.push(("dynamics/delta_l2_initial".into(), f.delta_l2));
            m.push(("dynamics/delta_l2_best".into(), b.delta_l2));
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitStatus {
    pub id: usize,
    pub label: String,
    pub trial: usize,
    /// Relative to the artifact directory.
    pub dir: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitIndex {
    pub name: String,
    pub trials: usize,
    pub units: Vec<UnitStatus>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: Report,
    pub failed: Vec<UnitStatus>,
    pub emitted: EmitSummary,
}

const GENERATED: [&str; 6] = ["units", "analysis", "report.csv", "manifest.json", "units.json", "config.toml"];

/// Runs every model x trial (x variant) unit into `cfg.output_dir()`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_experiment_in(cfg, &cfg.output_dir())
}

pub fn run_experiment_in(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let specs = cfg.model_specs()?;
    std::fs::create_dir_all(dir)?;
    for g in GENERATED {
        let p = dir.join(g);
        if p.is_dir() {
            std::fs::remove_dir_all(&p)?;
        } else if p.exists() {
            std::fs::remove_file(&p)?;
        }
    }
    put(&dir.join("config.toml"), cfg.to_toml()?)?;

    let variants = cfg.inject.len().max(1);
    let (n_models, trials) = (specs.len(), cfg.trials);
    let mut statuses: Vec<UnitStatus> = Vec::new();
    let mut units_done: Vec<UnitMetrics> = Vec::new();
    for trial in 0..trials {
        let prepared = prepare_data(cfg, trial)?;
        for (v, data) in prepared.iter().enumerate() {
            for (mi, spec) in specs.iter().enumerate() {
                let id = (v * n_models + mi) * trials + trial;
                let label = match &data.variant {
                    Some(name) => format!("{name}/{}", spec.name),
                    None => spec.name.clone(),
                };
                let rel = format!("units/{label}/trial{trial}");
                let unit = Unit {
                    label: label.clone(),
                    spec: spec.clone(),
                    entry: mi,
                    trial,
                    data,
                    dir: dir.join(&rel),
                };
                log::info!("{}: unit {id} ({label}, trial {trial})", cfg.name);
                let (metrics, error) = match run_unit(cfg, &unit) {
                    Ok(m) => (Some(m), None),
                    Err(e) => {
                        log::warn!("{}: unit {id} ({label}, trial {trial}) failed: {e}", cfg.name);
                        (None, Some(e.to_string()))
                    }
                };
                if let Some(metrics) = metrics {
                    let um = UnitMetrics {
                        id,
                        label: label.clone(),
                        trial,
                        metrics,
                    };
                    put(&unit.dir.join("metrics.json"), serde_json::to_string_pretty(&um)?)?;
                    units_done.push(um);
                }
                statuses.push(UnitStatus {
                    id,
                    label,
                    trial,
                    dir: rel,
                    error,
                });
            }
        }
    }
    statuses.sort_by_key(|s| s.id);
    debug_assert_eq!(statuses.len(), variants * n_models * trials);
    let index = UnitIndex {
        name: cfg.name.clone(),
        trials,
        units: statuses,
    };
    put(&dir.join("units.json"), serde_json::to_string_pretty(&index)?)?;
    let emitted = emit_report(dir)?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        report: emitted.report.clone(),
        failed: index.units.into_iter().filter(|u| u.error.is_some()).collect(),
        emitted,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EmitSummary {
    pub report: Report,
    /// Files written by this call, relative to the artifact directory.
    pub written: Vec<String>,
    /// Expected artifacts that were absent.
    pub missing: Vec<String>,
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            files_under(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

fn read_profile(path: &Path) -> Option<Vec<f64>> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines().skip(1).map(|l| l.split(',').nth(1)?.parse().ok()).collect()
}

/// Merges unit metrics into `report.csv`, draws cross-model plots under
/// `analysis/`, and writes `manifest.json` with a hash of every file.
/// Missing unit artifacts are listed and skipped.
pub fn emit_report(dir: &Path) -> Result<EmitSummary> {
    let index: Option<UnitIndex> = match std::fs::read_to_string(dir.join("units.json")) {
        Ok(t) => Some(serde_json::from_str(&t)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let mut summary = EmitSummary::default();
    let mut units = Vec::new();
    if let Some(ix) = &index {
        for u in &ix.units {
            let path = format!("{}/metrics.json", u.dir);
            match std::fs::read_to_string(dir.join(&path)) {
                Ok(t) => units.push(serde_json::from_str::<UnitMetrics>(&t)?),
                Err(_) => summary.missing.push(path),
            }
        }
    } else {
        summary.missing.push("units.json".into());
    }
    let trials = index.as_ref().map_or(1, |i| i.trials);
    summary.report = Report::from_units(&units, trials);
    let analysis = dir.join("analysis");
    if analysis.is_dir() {
        std::fs::remove_dir_all(&analysis)?;
    }
    if !summary.report.rows.is_empty() {
        put(&dir.join("report.csv"), summary.report.to_csv()?)?;
        summary.written.push("report.csv".into());
    }

    // Radial profiles of every attack, averaged over trials, one model per line.
    if let Some(ix) = &index {
        let mut by_attack: std::collections::BTreeMap<String, Vec<Series>> = Default::default();
        let labels: Vec<String> = summary.report.models();
        for label in &labels {
            let dirs: Vec<&UnitStatus> = ix.units.iter().filter(|u| &u.label == label && u.error.is_none()).collect();
            let Some(first) = dirs.first() else { continue };
            let Ok(listing) = std::fs::read_dir(dir.join(&first.dir)) else { continue };
            let mut attacks: Vec<String> = listing
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str()?.strip_suffix("_radial.csv").map(String::from))
                .collect();
            attacks.sort();
            for atk in attacks {
                let profiles: Vec<Vec<f64>> = dirs
                    .iter()
                    .filter_map(|u| read_profile(&dir.join(&u.dir).join(format!("{atk}_radial.csv"))))
                    .collect();
                if profiles.is_empty() {
                    continue;
                }
                let n = profiles[0].len();
                let pts = (0..n)
                    .map(|i| (i as f64, profiles.iter().map(|p| p[i]).sum::<f64>() / profiles.len() as f64))
                    .collect();
                by_attack.entry(atk).or_default().push(Series {
                    name: label.clone(),
                    points: pts,
                });
            }
        }
        for (atk, series) in by_attack {
            let rel = format!("analysis/radial_{atk}.svg");
            put(&dir.join(&rel), line_plot(&format!("mean radial energy, {atk}"), "radius", "energy", &series))?;
            summary.written.push(rel);
        }
    }

    // Dynamics trajectories from the aggregate rows.
    let mut dyn_series: Vec<Series> = Vec::new();
    for label in summary.report.models() {
        let mut pts: Vec<(f64, f64)> = summary
            .report
            .rows
            .iter()
            .filter(|r| r.model == label && r.std.is_some())
            .filter_map(|r| {
                let e = r.metric.strip_prefix("dynamics/e")?.strip_suffix("/radial_centroid")?;
                Some((e.parse::<f64>().ok()?, r.value))
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if !pts.is_empty() {
            dyn_series.push(Series { name: label, points: pts });
        }
    }
    if !dyn_series.is_empty() {
        let rel = "analysis/dynamics_centroid.svg".to_string();
        put(&dir.join(&rel), line_plot("radial centroid of mean perturbation spectrum", "epoch", "centroid", &dyn_series))?;
        summary.written.push(rel);
    }

    let mut files = Vec::new();
    files_under(dir, dir, &mut files)?;
    files.retain(|f| f != "manifest.json");
    let hashes: Vec<serde_json::Value> = files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(dir.join(f))?;
            Ok(serde_json::json!({ "path": f, "sha256": data::hex(&Sha256::digest(&bytes)) }))
        })
        .collect::<Result<_>>()?;
    let config_hash = std::fs::read_to_string(dir.join("config.toml"))
        .ok()
        .and_then(|t| toml::from_str::<ExperimentConfig>(&t).ok())
        .map(|c| c.hash());
    let manifest = serde_json::json!({
        "name": index.as_ref().map(|i| i.name.clone()),
        "config_hash": config_hash,
        "version": env!("CARGO_PKG_VERSION"),
        "trials": trials,
        "units": index.as_ref().map(|i| &i.units),
        "missing": &summary.missing,
        "files": hashes,
    });
    put(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    summary.written.push("manifest.json".into());
    Ok(summary)
}
