//! Projected gradient attacks in the L-infinity, L2 and L1 balls.
//!
//! Each iteration ascends the cross-entropy of the clean prediction with a
//! step of size `rate * epsilon` (sign step for L-infinity, normalized
//! gradient otherwise), projects onto the epsilon ball and then onto the
//! pixel box `[0, 1]`. Success means the prediction at `x + delta` differs
//! from the prediction at `x`.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::io;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
    L1,
}

impl Norm {
    pub fn of(&self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
            Norm::L1 => "l1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    /// Step size as a fraction of `epsilon`.
    pub rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
    /// Freeze each example at its first adversarial iterate instead of
    /// ascending for the full step budget.
    #[serde(default)]
    pub stop_on_success: bool,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Config(format!("rate must be positive, got {}", self.rate)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("pgd_{}", self.norm.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub example: usize,
    /// `[C, H, W]`
    pub delta: Tensor,
    pub success: bool,
    /// Norm of `delta` in the attack's norm.
    pub norm: f64,
    pub clean_class: usize,
    pub adversarial_class: usize,
}

/// Euclidean projection onto the epsilon ball, in place.
pub fn project(v: &mut [f64], norm: Norm, eps: f64) {
    match norm {
        Norm::Linf => v.iter_mut().for_each(|x| *x = x.clamp(-eps, eps)),
        Norm::L2 => {
            let n = Norm::L2.of(v);
            if n > eps {
                let s = eps / n;
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
        Norm::L1 => project_l1(v, eps),
    }
}

/// Sorting-based projection onto the L1 ball: soft-threshold by the `theta`
/// that puts the magnitudes on the simplex of radius `eps`.
pub fn project_l1(v: &mut [f64], eps: f64) {
    if Norm::L1.of(v) <= eps {
        return;
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - eps) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = x.signum() * (x.abs() - theta).max(0.0);
    }
}

fn random_start(d: usize, norm: Norm, eps: f64, r: &mut rng::Rng) -> Vec<f64> {
    match norm {
        Norm::Linf => (0..d).map(|_| r.random_range(-eps..=eps)).collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
            let n = Norm::L2.of(&g).max(f64::MIN_POSITIVE);
            let radius = eps * r.random::<f64>().powf(1.0 / d as f64);
            g.iter().map(|v| v * radius / n).collect()
        }
        Norm::L1 => {
            // d + 1 exponentials normalized by their sum, first d kept, random signs.
            let e: Vec<f64> = (0..=d).map(|_| Exp1.sample(r)).collect();
            let s: f64 = e.iter().sum();
            e[..d]
                .iter()
                .map(|v| if r.random::<bool>() { eps * v / s } else { -eps * v / s })
                .collect()
        }
    }
}

/// Batched PGD against `labels` (usually the clean predictions). Returns the
/// final perturbations and the batch-mean loss at each iterate before its
/// step (`losses[0]` is the loss at the starting point).
pub fn pgd_traced(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<(Vec<Tensor>, Vec<f64>)> {
    cfg.validate()?;
    let b = x.shape()[0];
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!("{} labels for {b} examples", labels.len())));
    }
    let d = x.numel() / b.max(1);
    let y = Tensor::from_vec(labels.iter().map(|&l| l as f64).collect());
    let mut delta = vec![0.0; x.numel()];
    if cfg.random_start {
        let mut r = rng::rng(rng::derive_str(cfg.seed, "pgd-start"));
        for (i, chunk) in delta.chunks_mut(d).enumerate() {
            chunk.copy_from_slice(&random_start(d, cfg.norm, cfg.epsilon, &mut r));
            clip_to_box(chunk, &x.data()[i * d..(i + 1) * d]);
        }
    }
    let step = cfg.rate * cfg.epsilon;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut adv = x.clone();
    for _ in 0..cfg.steps {
        for (a, (xv, dv)) in adv.data_mut().iter_mut().zip(x.data().iter().zip(&delta)) {
            *a = xv + dv;
        }
        let (loss, g, logits) = model.input_grad(&adv, &y)?;
        losses.push(loss);
        let k = logits.numel() / b.max(1);
        for i in 0..b {
            if cfg.stop_on_success && Tensor::argmax(&logits.data()[i * k..(i + 1) * k]) != labels[i] {
                continue;
            }
            let gi = &g.data()[i * d..(i + 1) * d];
            let di = &mut delta[i * d..(i + 1) * d];
            match cfg.norm {
                Norm::Linf => {
                    for (dv, gv) in di.iter_mut().zip(gi) {
                        // sign(0) = 0: coordinates without gradient stay put.
                        if *gv != 0.0 {
                            *dv += step * gv.signum();
                        }
                    }
                }
                Norm::L2 | Norm::L1 => {
                    let n = cfg.norm.of(gi);
                    if n > 0.0 {
                        for (dv, gv) in di.iter_mut().zip(gi) {
                            *dv += step * gv / n;
                        }
                    }
                }
            }
            project(di, cfg.norm, cfg.epsilon);
            clip_to_box(di, &x.data()[i * d..(i + 1) * d]);
        }
    }
    let shape = &x.shape()[1..];
    let deltas = delta
        .chunks(d)
        .map(|c| Tensor::new(shape.to_vec(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((deltas, losses))
}

/// Keeps `x + delta` inside `[0, 1]`; only ever shrinks `|delta_i|`.
fn clip_to_box(delta: &mut [f64], x: &[f64]) {
    for (dv, xv) in delta.iter_mut().zip(x) {
        *dv = (xv + *dv).clamp(0.0, 1.0) - xv;
    }
}

/// PGD on a batch, scored against the model's clean predictions.
pub fn pgd(model: &Model, x: &Tensor, cfg: &AttackConfig) -> Result<Vec<Perturbation>> {
    let clean = model.predict(x)?;
    let (deltas, _) = pgd_traced(model, x, &clean, cfg)?;
    let adv_x = Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(deltas.iter().flat_map(|d| d.data().iter()))
            .map(|(a, b)| a + b)
            .collect(),
    )?;
    let adv = model.predict(&adv_x)?;
    Ok(deltas
        .into_iter()
        .enumerate()
        .map(|(i, delta)| Perturbation {
            example: i,
            norm: cfg.norm.of(delta.data()),
            delta,
            success: adv[i] != clean[i],
            clean_class: clean[i],
            adversarial_class: adv[i],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub attack: String,
    pub config: AttackConfig,
    pub attempted: usize,
    pub success_rate: f64,
    pub mean_l2: f64,
    pub mean_linf: f64,
    pub mean_l1: f64,
    /// `(example, message)` for examples whose attack raised an error.
    pub failures: Vec<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRun {
    pub config: AttackConfig,
    pub perturbations: Vec<Perturbation>,
    pub failures: Vec<(usize, String)>,
}

impl AttackRun {
    pub fn success_rate(&self) -> f64 {
        if self.perturbations.is_empty() {
            return 0.0;
        }
        self.perturbations.iter().filter(|p| p.success).count() as f64 / self.perturbations.len() as f64
    }

    pub fn deltas(&self) -> Vec<Tensor> {
        self.perturbations.iter().map(|p| p.delta.clone()).collect()
    }

    pub fn summary(&self) -> RunSummary {
        let n = self.perturbations.len().max(1) as f64;
        let mean = |norm: Norm| self.perturbations.iter().map(|p| norm.of(p.delta.data())).sum::<f64>() / n;
        RunSummary {
            attack: self.config.label(),
            config: self.config.clone(),
            attempted: self.perturbations.len() + self.failures.len(),
            success_rate: self.success_rate(),
            mean_l2: mean(Norm::L2),
            mean_linf: mean(Norm::Linf),
            mean_l1: mean(Norm::L1),
            failures: self.failures.clone(),
        }
    }

    /// `<stem>.fbt` with one `delta/<example>` tensor per perturbation, and a
    /// `<stem>.json` manifest with the config and per-example outcomes.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let names: Vec<String> = self.perturbations.iter().map(|p| format!("delta/{}", p.example)).collect();
        let entries: Vec<(&str, &Tensor)> = names
            .iter()
            .map(String::as_str)
            .zip(self.perturbations.iter().map(|p| &p.delta))
            .collect();
        std::fs::write(stem.with_extension("fbt"), io::encode_tensors(&entries))?;
        let outcomes: Vec<serde_json::Value> = self
            .perturbations
            .iter()
            .map(|p| {
                serde_json::json!({
                    "example": p.example,
                    "success": p.success,
                    "norm": p.norm,
                    "clean_class": p.clean_class,
                    "adversarial_class": p.adversarial_class,
                })
            })
            .collect();
        let manifest = serde_json::json!({ "summary": self.summary(), "examples": outcomes });
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

const BATCH: usize = 64;

/// Every config over every example of `data`. Errors are recorded per
/// example and never abort the suite.
pub fn attack_suite(model: &Model, data: &Dataset, configs: &[AttackConfig]) -> Vec<AttackRun> {
    configs
        .iter()
        .map(|cfg| {
            let mut run = AttackRun {
                config: cfg.clone(),
                perturbations: Vec::new(),
                failures: Vec::new(),
            };
            for start in (0..data.len()).step_by(BATCH) {
                let idx: Vec<usize> = (start..(start + BATCH).min(data.len())).collect();
                match pgd(model, &data.images.gather_outer(&idx), cfg) {
                    Ok(ps) => run.perturbations.extend(ps.into_iter().map(|mut p| {
                        p.example = idx[p.example];
                        p
                    })),
                    Err(_) => {
                        // Retry one by one so a single bad example is isolated.
                        for &i in &idx {
                            match pgd(model, &data.images.gather_outer(&[i]), cfg) {
                                Ok(mut ps) => {
                                    let mut p = ps.remove(0);
                                    p.example = i;
                                    run.perturbations.push(p);
                                }
                                Err(e) => run.failures.push((i, e.to_string())),
                            }
                        }
                    }
                }
            }
            run
        })
        .collect()
}
