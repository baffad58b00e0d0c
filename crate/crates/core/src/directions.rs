//! Personalized and neutral direction fitting.
//!
//! Each layer gets a pair of unit directions: `theta_p` captures what the
//! personalized activations have in common, `theta_n` separates neutral
//! from personalized activations. Directions come from the top singular
//! vector of a class matrix, from a contrast-consistent probe, or from a
//! mix of both (the default). Layers are ranked by probe loss.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, top_right_singular_vector, LinalgError, Matrix, Vector};

/// Fits at or above this loss are reported as weakly separated.
pub const WEAK_SEPARATION_LOSS: f64 = 0.2;

/// Default number of layers selected for editing.
pub const DEFAULT_LAYER_COUNT: usize = 3;

const SCALE_FLOOR: f64 = 1e-8;
const MAX_HALVINGS: u32 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DirectionsError {
    #[error("{method} needs at least {required} pairs, got {k}")]
    TooFewPairs {
        method: &'static str,
        k: usize,
        required: usize,
    },
    #[error("class matrices disagree: {0}")]
    ClassShape(String),
    #[error("invalid CCS config: {0}")]
    InvalidConfig(String),
    #[error("all {0} CCS restarts diverged")]
    AllRestartsFailed(usize),
    #[error("layer count m must be at least 1")]
    ZeroLayerCount,
    #[error("no layer reports to select from")]
    NoReports,
    #[error("layer {layer}: {source}")]
    Layer {
        layer: u32,
        #[source]
        source: Box<DirectionsError>,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Aligned personalized and neutral activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PairActivations {
    pub layer: u32,
    pub personalized: Matrix,
    pub neutral: Matrix,
}

impl PairActivations {
    pub fn new(layer: u32, personalized: Matrix, neutral: Matrix) -> Result<Self, DirectionsError> {
        if personalized.rows() != neutral.rows() || personalized.dim() != neutral.dim() {
            return Err(DirectionsError::ClassShape(format!(
                "personalized {}x{} vs neutral {}x{}",
                personalized.rows(),
                personalized.dim(),
                neutral.rows(),
                neutral.dim()
            )));
        }
        Ok(Self {
            layer,
            personalized,
            neutral,
        })
    }

    /// Number of pairs.
    pub fn k(&self) -> usize {
        self.personalized.rows()
    }

    pub fn dim(&self) -> usize {
        self.personalized.dim()
    }

    fn swapped(&self) -> Self {
        Self {
            layer: self.layer,
            personalized: self.neutral.clone(),
            neutral: self.personalized.clone(),
        }
    }
}

/// Logistic probe `g(v) = σ(θᵀv + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcsProbe {
    pub theta: Vector,
    pub bias: f64,
}

impl CcsProbe {
    pub fn score(&self, v: &[f64]) -> f64 {
        sigmoid(linalg::dot(self.theta.as_slice(), v) + self.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub consistency: f64,
    pub confidence: f64,
    pub total: f64,
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn pair_loss(g_n: f64, g_p: f64, squared_confidence: bool) -> (f64, f64) {
    let c = g_n - (1.0 - g_p);
    let m = g_n.min(g_p);
    (c * c, if squared_confidence { m * m } else { m })
}

/// Contrast-consistent loss with the unsquared confidence term.
pub fn ccs_loss(probe: &CcsProbe, acts: &PairActivations) -> Result<LossBreakdown, DirectionsError> {
    ccs_loss_with(probe, acts, false)
}

pub fn ccs_loss_with(
    probe: &CcsProbe,
    acts: &PairActivations,
    squared_confidence: bool,
) -> Result<LossBreakdown, DirectionsError> {
    if probe.theta.dim() != acts.dim() {
        return Err(LinalgError::DimMismatch {
            left: probe.theta.dim(),
            right: acts.dim(),
        }
        .into());
    }
    let k = acts.k() as f64;
    let (mut cons, mut conf) = (0.0, 0.0);
    for (n, p) in acts.neutral.iter_rows().zip(acts.personalized.iter_rows()) {
        let (a, b) = pair_loss(probe.score(n), probe.score(p), squared_confidence);
        cons += a;
        conf += b;
    }
    let (consistency, confidence) = (cons / k, conf / k);
    Ok(LossBreakdown {
        consistency,
        confidence,
        total: consistency + confidence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcsConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub squared_confidence: bool,
}

impl Default for CcsConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            steps: 1000,
            lr: 0.01,
            seed: 0,
            squared_confidence: false,
        }
    }
}

impl CcsConfig {
    pub fn validate(&self) -> Result<(), DirectionsError> {
        if self.restarts == 0 {
            return Err(DirectionsError::InvalidConfig("restarts must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(DirectionsError::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DirectionsError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Jointly standardized pair data, flattened for the training loop.
struct Standardized {
    k: usize,
    dim: usize,
    neutral: Vec<f64>,
    personalized: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardized {
    fn new(acts: &PairActivations) -> Self {
        let pooled = Matrix::vstack(&[&acts.personalized, &acts.neutral]).expect("validated shapes");
        let mean = pooled.column_mean().into_inner();
        let n = pooled.rows() as f64;
        let mut var = vec![0.0; acts.dim()];
        for row in pooled.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(SCALE_FLOOR)).collect();
        let transform = |m: &Matrix| -> Vec<f64> {
            m.iter_rows()
                .flat_map(|row| {
                    row.iter()
                        .zip(&mean)
                        .zip(&scale)
                        .map(|((v, mu), s)| (v - mu) / s)
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        Self {
            k: acts.k(),
            dim: acts.dim(),
            neutral: transform(&acts.neutral),
            personalized: transform(&acts.personalized),
            mean,
            scale,
        }
    }

    fn loss(&self, theta: &[f64], bias: f64, squared: bool) -> LossBreakdown {
        let (mut cons, mut conf) = (0.0, 0.0);
        for i in 0..self.k {
            let g_n = sigmoid(linalg::dot(theta, self.row(&self.neutral, i)) + bias);
            let g_p = sigmoid(linalg::dot(theta, self.row(&self.personalized, i)) + bias);
            let (a, b) = pair_loss(g_n, g_p, squared);
            cons += a;
            conf += b;
        }
        let k = self.k as f64;
        LossBreakdown {
            consistency: cons / k,
            confidence: conf / k,
            total: (cons + conf) / k,
        }
    }

    fn row<'a>(&self, data: &'a [f64], i: usize) -> &'a [f64] {
        &data[i * self.dim..(i + 1) * self.dim]
    }

    /// Gradient of the total loss with respect to `(theta, bias)`.
    fn gradient(&self, theta: &[f64], bias: f64, squared: bool) -> (Vec<f64>, f64) {
        let mut g_theta = vec![0.0; self.dim];
        let mut g_bias = 0.0;
        for i in 0..self.k {
            let vn = self.row(&self.neutral, i);
            let vp = self.row(&self.personalized, i);
            let g_n = sigmoid(linalg::dot(theta, vn) + bias);
            let g_p = sigmoid(linalg::dot(theta, vp) + bias);
            let c = 2.0 * (g_n + g_p - 1.0);
            let (mut d_n, mut d_p) = (c, c);
            let m = g_n.min(g_p);
            let dm = if squared { 2.0 * m } else { 1.0 };
            if g_n <= g_p {
                d_n += dm;
            } else {
                d_p += dm;
            }
            let a_n = d_n * g_n * (1.0 - g_n);
            let a_p = d_p * g_p * (1.0 - g_p);
            for ((g, x), y) in g_theta.iter_mut().zip(vn).zip(vp) {
                *g += a_n * x + a_p * y;
            }
            g_bias += a_n + a_p;
        }
        let k = self.k as f64;
        g_theta.iter_mut().for_each(|g| *g /= k);
        (g_theta, g_bias / k)
    }

    /// Maps a standardized-space probe back to raw activations.
    fn to_raw(&self, theta: &[f64], bias: f64) -> Result<CcsProbe, LinalgError> {
        let raw: Vec<f64> = theta.iter().zip(&self.scale).map(|(t, s)| t / s).collect();
        let raw_bias = bias - linalg::dot(&raw, &self.mean);
        let n = linalg::norm(&raw);
        if n == 0.0 || !n.is_finite() {
            return Err(LinalgError::ZeroDirection);
        }
        Ok(CcsProbe {
            theta: Vector::new(raw.iter().map(|t| t / n).collect())?,
            bias: raw_bias / n,
        })
    }
}

struct RestartOutcome {
    theta: Vec<f64>,
    bias: f64,
    loss: LossBreakdown,
}

fn run_restart(data: &Standardized, config: &CcsConfig, theta0: Vec<f64>) -> Option<RestartOutcome> {
    let squared = config.squared_confidence;
    let mut theta = theta0;
    let mut bias = 0.0;
    let mut loss = data.loss(&theta, bias, squared);
    if !loss.total.is_finite() {
        return None;
    }
    for _ in 0..config.steps {
        let (g_theta, g_bias) = data.gradient(&theta, bias, squared);
        if !g_bias.is_finite() || g_theta.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let mut lr = config.lr;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = theta.iter().zip(&g_theta).map(|(t, g)| t - lr * g).collect();
            let cand_bias = bias - lr * g_bias;
            let next = data.loss(&cand, cand_bias, squared);
            if !next.total.is_finite() {
                return None;
            }
            if next.total <= loss.total {
                theta = cand;
                bias = cand_bias;
                loss = next;
                break;
            }
            lr *= 0.5;
        }
    }
    Some(RestartOutcome { theta, bias, loss })
}

/// Trains a probe by seeded multi-restart gradient descent.
///
/// The returned loss is the best restart's final loss on the standardized
/// data; the probe is mapped back to raw coordinates with a unit `theta`.
pub fn train_ccs(acts: &PairActivations, config: &CcsConfig) -> Result<(CcsProbe, LossBreakdown), DirectionsError> {
    config.validate()?;
    if acts.k() < 2 {
        return Err(DirectionsError::TooFewPairs {
            method: "ccs",
            k: acts.k(),
            required: 2,
        });
    }
    let data = Standardized::new(acts);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, (1.0 / data.dim as f64).sqrt()).expect("valid std");
    let mut best: Option<RestartOutcome> = None;
    for r in 0..config.restarts {
        let theta0: Vec<f64> = (0..data.dim).map(|_| init.sample(&mut rng)).collect();
        match run_restart(&data, config, theta0) {
            Some(out) if best.as_ref().is_none_or(|b| out.loss.total < b.loss.total) => best = Some(out),
            Some(_) => {}
            None => log::warn!("layer {}: CCS restart {r} diverged", acts.layer),
        }
    }
    let best = best.ok_or(DirectionsError::AllRestartsFailed(config.restarts))?;
    let probe = data.to_raw(&best.theta, best.bias)?;
    Ok((probe, best.loss))
}

/// Top right singular vector of a class matrix.
pub fn fit_svd_direction(data: &Matrix) -> Result<Vector, DirectionsError> {
    Ok(top_right_singular_vector(data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionMethod {
    Svd,
    Ccs,
    #[default]
    Hybrid,
}

impl DirectionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DirectionMethod::Svd => "svd",
            DirectionMethod::Ccs => "ccs",
            DirectionMethod::Hybrid => "hybrid",
        }
    }
}

impl std::fmt::Display for DirectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DirectionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "svd" => Ok(DirectionMethod::Svd),
            "ccs" => Ok(DirectionMethod::Ccs),
            "hybrid" => Ok(DirectionMethod::Hybrid),
            other => Err(format!("unknown method {other:?} (expected svd, ccs or hybrid)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionPair {
    pub layer: u32,
    pub theta_p: Vector,
    pub theta_n: Vector,
    pub fit_loss: f64,
    #[serde(default)]
    pub method: DirectionMethod,
}

impl DirectionPair {
    pub fn dim(&self) -> usize {
        self.theta_p.dim()
    }

    pub fn weak_separation(&self) -> bool {
        self.fit_loss >= WEAK_SEPARATION_LOSS
    }

    pub fn validate(&self) -> Result<(), DirectionsError> {
        if self.theta_p.dim() != self.theta_n.dim() {
            return Err(LinalgError::DimMismatch {
                left: self.theta_p.dim(),
                right: self.theta_n.dim(),
            }
            .into());
        }
        for t in [&self.theta_p, &self.theta_n] {
            if (t.norm() - 1.0).abs() > 1e-8 {
                return Err(DirectionsError::ClassShape(format!(
                    "layer {} direction is not unit norm ({})",
                    self.layer,
                    t.norm()
                )));
            }
        }
        Ok(())
    }
}

/// Loss of a probe along `theta` with the bias that minimizes it.
fn best_bias_loss(theta: &Vector, acts: &PairActivations, squared: bool) -> Result<f64, DirectionsError> {
    let span = acts
        .personalized
        .iter_rows()
        .chain(acts.neutral.iter_rows())
        .map(|r| linalg::dot(theta.as_slice(), r).abs())
        .fold(0.0, f64::max)
        + 1.0;
    let eval = |b: f64| {
        ccs_loss_with(&CcsProbe { theta: theta.clone(), bias: b }, acts, squared).map(|l| l.total)
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-span, span);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (eval(x1)?, eval(x2)?);
    for _ in 0..100 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = eval(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = eval(x2)?;
        }
        if hi - lo < 1e-10 * span {
            break;
        }
    }
    Ok(f1.min(f2))
}

/// Fits both directions of one layer.
pub fn fit_direction_pair(
    acts: &PairActivations,
    method: DirectionMethod,
    config: &CcsConfig,
) -> Result<DirectionPair, DirectionsError> {
    let (theta_p, theta_n, fit_loss) = match method {
        DirectionMethod::Svd => {
            let p = fit_svd_direction(&acts.personalized)?;
            let n = fit_svd_direction(&acts.neutral)?;
            let loss = best_bias_loss(&n, acts, config.squared_confidence)?;
            (p, n, loss)
        }
        DirectionMethod::Ccs => {
            let (probe_n, loss) = train_ccs(acts, config)?;
            let (probe_p, _) = train_ccs(&acts.swapped(), config)?;
            (probe_p.theta, probe_n.theta, loss.total)
        }
        DirectionMethod::Hybrid => {
            if acts.k() < 2 {
                return Err(DirectionsError::TooFewPairs {
                    method: "hybrid",
                    k: acts.k(),
                    required: 2,
                });
            }
            let p = fit_svd_direction(&acts.personalized)?;
            let (probe_n, loss) = train_ccs(acts, config)?;
            (p, probe_n.theta, loss.total)
        }
    };
    let pair = DirectionPair {
        layer: acts.layer,
        theta_p,
        theta_n,
        fit_loss,
        method,
    };
    if pair.weak_separation() {
        log::warn!(
            "layer {}: weak separation (fit loss {:.4} >= {WEAK_SEPARATION_LOSS})",
            pair.layer,
            pair.fit_loss
        );
    }
    Ok(pair)
}

/// Fits every layer in parallel; layer `l` trains with seed `seed ^ l`.
pub fn fit_layers(
    layers: &[PairActivations],
    method: DirectionMethod,
    config: &CcsConfig,
) -> Result<Vec<DirectionPair>, DirectionsError> {
    layers
        .par_iter()
        .map(|acts| {
            let cfg = CcsConfig {
                seed: config.seed ^ u64::from(acts.layer),
                ..*config
            };
            fit_direction_pair(acts, method, &cfg).map_err(|e| DirectionsError::Layer {
                layer: acts.layer,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub selected: Vec<u32>,
    pub reports: BTreeMap<u32, f64>,
}

/// Picks the `m` layers with the lowest fit loss, ties to the lower layer.
pub fn select_layers(reports: &BTreeMap<u32, f64>, m: usize) -> Result<LayerSelection, DirectionsError> {
    if m == 0 {
        return Err(DirectionsError::ZeroLayerCount);
    }
    if reports.is_empty() {
        return Err(DirectionsError::NoReports);
    }
    let mut order: Vec<(u32, f64)> = reports.iter().map(|(&l, &v)| (l, v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(LayerSelection {
        selected: order.into_iter().take(m).map(|(l, _)| l).collect(),
        reports: reports.clone(),
    })
}
