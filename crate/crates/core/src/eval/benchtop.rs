//! Synthetic users with planted preference directions.
//!
//! Each user `u` owns a unit direction `d_u` and a neutral offset
//! `n_u = −c·d_u + √(1−c²)·g_u` with `g_u ⟂ d_u`. At the signal layer
//! personalized activations are `s·d_u + σξ`, neutral activations are
//! `s·d_u + 2s·n_u + σξ`, and queries with label `y = ±1` are
//! `y·s·d_u + 2s·n_u + σξ`. All other layers are pure noise. With `c = 1`
//! the two classes sit at `±s·d_u`.
//!
//! A query is answered correctly when `sign(⟨x, d_u⟩) = y`; editing helps
//! when it removes the neutral offset without destroying the label signal.
//! With `cohesion ρ > 0` users share a common component of `d_u` and
//! `g_u`, which is what makes pooling their pairs worthwhile.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::datagen::{CorpusMember, PreferenceCorpus, PreferencePair};
use crate::directions::{fit_layers, CcsConfig, DirectionMethod, PairActivations, DEFAULT_LAYER_COUNT};
use crate::editing::{apply_profile, ActRole, ActivationBatch, Bundle, CreatedFrom, EditMode, SteeringProfile};
use crate::group::aggregate_corpora;
use crate::linalg::{self, Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_users: usize,
    pub dim: usize,
    pub n_pairs: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub n_layers: u32,
    pub signal_layer: u32,
    /// `c`: how much of the neutral offset points against `d_u`.
    pub neutral_overlap: f64,
    /// `ρ`: share of each user's directions common to all users.
    pub cohesion: f64,
    pub n_queries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_users: 1,
            dim: 64,
            n_pairs: 200,
            separation: 4.0,
            noise_sigma: 1.0,
            n_layers: 4,
            signal_layer: 2,
            neutral_overlap: 1.0,
            cohesion: 0.0,
            n_queries: 100,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidWorld(m));
        if self.n_users == 0 || self.dim == 0 || self.n_pairs == 0 || self.n_layers == 0 || self.n_queries == 0 {
            return bad("users, dim, pairs, layers and queries must all be positive".into());
        }
        if self.signal_layer >= self.n_layers {
            return bad(format!("signal layer {} outside 0..{}", self.signal_layer, self.n_layers));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return bad(format!("separation must be finite and non-negative, got {}", self.separation));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return bad(format!("noise sigma must be positive, got {}", self.noise_sigma));
        }
        for (name, v) in [("neutral_overlap", self.neutral_overlap), ("cohesion", self.cohesion)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.neutral_overlap < 1.0 && self.dim < 2 {
            return bad("neutral_overlap < 1 needs dim >= 2".into());
        }
        Ok(())
    }
}

/// Ground truth of a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub planted: BTreeMap<String, Vector>,
    pub neutral_offsets: BTreeMap<String, Vector>,
}

impl SyntheticWorld {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn n_users(&self) -> usize {
        self.config.n_users
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn separation(&self) -> f64 {
        self.config.separation
    }

    pub fn noise_sigma(&self) -> f64 {
        self.config.noise_sigma
    }
}

/// One user's activations and query labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UserWorld {
    pub user_id: String,
    pub bundle: Bundle,
    pub labels: Vec<i8>,
}

impl UserWorld {
    pub fn pair_activations(&self) -> Vec<PairActivations> {
        pair_layers(&self.bundle)
    }

    pub fn queries(&self) -> Vec<ActivationBatch> {
        self.bundle.queries()
    }

    /// Placeholder corpus aligned row-for-row with the pair activations.
    pub fn corpus(&self) -> PreferenceCorpus {
        let k = self
            .bundle
            .batches
            .iter()
            .find(|((_, r), _)| *r == ActRole::Personalized)
            .map_or(0, |(_, b)| b.rows());
        let pairs = (0..k)
            .map(|i| PreferencePair {
                user_id: self.user_id.clone(),
                query_id: format!("q{i:05}"),
                personalized: format!("{} personalized {i}", self.user_id),
                neutral: format!("{} neutral {i}", self.user_id),
                raw_personalized: "p".into(),
                raw_neutral: "n".into(),
            })
            .collect();
        let mut c = PreferenceCorpus::new(self.user_id.clone(), pairs);
        c.members = vec![CorpusMember {
            user_id: self.user_id.clone(),
            k,
        }];
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldData {
    pub world: SyntheticWorld,
    pub users: Vec<UserWorld>,
}

impl WorldData {
    /// P/N activations of several users stacked in `user_id` order, the
    /// row order of their aggregated corpus.
    pub fn group_pairs(&self, user_ids: &[&str]) -> Result<Vec<PairActivations>, EvalError> {
        let mut ids: Vec<&str> = user_ids.to_vec();
        ids.sort_unstable();
        let users = ids
            .iter()
            .map(|id| {
                self.users
                    .iter()
                    .find(|u| u.user_id == *id)
                    .ok_or_else(|| EvalError::Recovery(format!("unknown user {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut bundle = Bundle::default();
        for l in 0..self.world.config.n_layers {
            for role in [ActRole::Personalized, ActRole::Neutral] {
                let parts: Vec<&Matrix> = users.iter().map(|u| &u.bundle.batches[&(l, role)].data).collect();
                let stacked = Matrix::vstack(&parts).map_err(|e| EvalError::Recovery(e.to_string()))?;
                bundle.insert(role, ActivationBatch::new(l, stacked));
            }
        }
        Ok(pair_layers(&bundle))
    }
}

fn pair_layers(bundle: &Bundle) -> Vec<PairActivations> {
    let mut out = Vec::new();
    for ((l, role), p) in &bundle.batches {
        if *role != ActRole::Personalized {
            continue;
        }
        if let Some(n) = bundle.batches.get(&(*l, ActRole::Neutral)) {
            out.push(PairActivations::new(*l, p.data.clone(), n.data.clone()).expect("generated shapes agree"));
        }
    }
    out
}

pub fn user_id(index: usize) -> String {
    format!("user{index:03}")
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = linalg::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn mix(shared: &[f64], own: &[f64], rho: f64) -> Vec<f64> {
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    unit(shared.iter().zip(own).map(|(s, o)| a * s + b * o).collect())
}

fn orthogonal_to(v: &[f64], d: &[f64]) -> Vec<f64> {
    let c = linalg::dot(v, d);
    unit(v.iter().zip(d).map(|(x, y)| x - c * y).collect())
}

/// Rows `centre + σξ`, rounded through `f32` like an exported dump.
fn sample_rows(rng: &mut ChaCha8Rng, centres: &[Vec<f64>], sigma: f64, layer: u32) -> ActivationBatch {
    let dim = centres[0].len();
    let values: Vec<f32> = centres
        .iter()
        .flat_map(|c| {
            c.iter()
                .map(|m| (m + sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    ActivationBatch::from_f32(layer, centres.len(), dim, &values).expect("finite samples")
}

fn query_labels(n: usize) -> Vec<i8> {
    (0..n).map(|j| if j % 2 == 0 { 1 } else { -1 }).collect()
}

/// Generates a world; output depends only on `config`.
pub fn gen_synthetic_world(config: &WorldConfig) -> Result<WorldData, EvalError> {
    config.validate()?;
    let dim = config.dim;
    let mut shared_rng = rng_for(config.seed, 0);
    let shared_d = unit(gaussian(&mut shared_rng, dim));
    let shared_g = unit(gaussian(&mut shared_rng, dim));
    let (s, sigma, c) = (config.separation, config.noise_sigma, config.neutral_overlap);

    let users: Vec<(UserWorld, Vec<f64>, Vec<f64>)> = (0..config.n_users)
        .into_par_iter()
        .map(|u| {
            let base = (u as u64 + 1) << 20;
            let mut rng = rng_for(config.seed, base);
            let d = mix(&shared_d, &unit(gaussian(&mut rng, dim)), config.cohesion);
            let g = orthogonal_to(&mix(&shared_g, &unit(gaussian(&mut rng, dim)), config.cohesion), &d);
            let n: Vec<f64> = d
                .iter()
                .zip(&g)
                .map(|(dv, gv)| -c * dv + (1.0 - c * c).max(0.0).sqrt() * gv)
                .collect();
            let p_centre: Vec<f64> = d.iter().map(|x| s * x).collect();
            let n_centre: Vec<f64> = p_centre.iter().zip(&n).map(|(p, o)| p + 2.0 * s * o).collect();
            let labels = query_labels(config.n_queries);
            let q_centres: Vec<Vec<f64>> = labels
                .iter()
                .map(|&y| d.iter().zip(&n).map(|(dv, o)| f64::from(y) * s * dv + 2.0 * s * o).collect())
                .collect();
            let zero = vec![0.0; dim];
            let mut bundle = Bundle::default();
            for layer in 0..config.n_layers {
                let mut lrng = rng_for(config.seed, base + 1 + u64::from(layer));
                let signal = layer == config.signal_layer;
                let repeat = |v: &Vec<f64>, k: usize| vec![v.clone(); k];
                let (pc, nc, qc) = if signal {
                    (repeat(&p_centre, config.n_pairs), repeat(&n_centre, config.n_pairs), q_centres.clone())
                } else {
                    (repeat(&zero, config.n_pairs), repeat(&zero, config.n_pairs), repeat(&zero, config.n_queries))
                };
                bundle.insert(ActRole::Personalized, sample_rows(&mut lrng, &pc, sigma, layer));
                bundle.insert(ActRole::Neutral, sample_rows(&mut lrng, &nc, sigma, layer));
                bundle.insert(ActRole::Query, sample_rows(&mut lrng, &qc, sigma, layer));
            }
            (
                UserWorld {
                    user_id: user_id(u),
                    bundle,
                    labels,
                },
                d,
                n,
            )
        })
        .collect();

    let mut planted = BTreeMap::new();
    let mut neutral_offsets = BTreeMap::new();
    let mut out = Vec::with_capacity(users.len());
    for (uw, d, n) in users {
        planted.insert(uw.user_id.clone(), Vector::new(d).expect("finite direction"));
        neutral_offsets.insert(uw.user_id.clone(), Vector::new(n).expect("finite direction"));
        out.push(uw);
    }
    Ok(WorldData {
        world: SyntheticWorld {
            config: config.clone(),
            planted,
            neutral_offsets,
        },
        users: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecovery {
    pub user_id: String,
    /// `|cos(θ^P, d_u)|` at the signal layer, when the profile fitted it.
    pub cos_p: Option<f64>,
    pub cos_n: Option<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub users: Vec<UserRecovery>,
    pub mean_accuracy_before: f64,
    pub mean_accuracy_after: f64,
    pub signal_layer_selected: bool,
}

/// Fraction of rows with `sign(⟨x, d⟩) = y`.
pub fn benchtop_accuracy(queries: &Matrix, d: &Vector, labels: &[i8]) -> f64 {
    let hits = queries
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| {
            let s = linalg::dot(row, d.as_slice());
            (s > 0.0 && y > 0) || (s < 0.0 && y < 0)
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Scores one profile against the given users of a world.
pub fn score_recovery(profile: &SteeringProfile, data: &WorldData, user_ids: &[&str]) -> Result<RecoveryReport, EvalError> {
    let world = &data.world;
    if profile.dim != world.dim() {
        return Err(EvalError::Recovery(format!(
            "profile dim {} does not match world dim {}",
            profile.dim,
            world.dim()
        )));
    }
    let signal = world.config.signal_layer;
    let pair = profile.pairs.get(&signal);
    let mut users = Vec::with_capacity(user_ids.len());
    for id in user_ids {
        let uw = data
            .users
            .iter()
            .find(|u| u.user_id == *id)
            .ok_or_else(|| EvalError::Recovery(format!("unknown user {id}")))?;
        let d = &world.planted[*id];
        let q = uw
            .bundle
            .batches
            .get(&(signal, ActRole::Query))
            .ok_or_else(|| EvalError::Recovery(format!("{id} has no signal-layer queries")))?;
        let edited = apply_profile(std::slice::from_ref(q), profile).map_err(|e| EvalError::Recovery(e.to_string()))?;
        let abs_cos = |t: &Vector| t.cosine(d).map(f64::abs).map_err(|e| EvalError::Recovery(e.to_string()));
        users.push(UserRecovery {
            user_id: (*id).to_owned(),
            cos_p: pair.map(|p| abs_cos(&p.theta_p)).transpose()?,
            cos_n: pair.map(|p| abs_cos(&p.theta_n)).transpose()?,
            accuracy_before: benchtop_accuracy(&q.data, d, &uw.labels),
            accuracy_after: benchtop_accuracy(&edited[0].data, d, &uw.labels),
        });
    }
    if users.is_empty() {
        return Err(EvalError::Recovery("no users to score".into()));
    }
    let n = users.len() as f64;
    Ok(RecoveryReport {
        mean_accuracy_before: users.iter().map(|u| u.accuracy_before).sum::<f64>() / n,
        mean_accuracy_after: users.iter().map(|u| u.accuracy_after).sum::<f64>() / n,
        signal_layer_selected: profile.is_selected(signal),
        users,
    })
}

/// How profiles are fitted during a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub method: DirectionMethod,
    pub ccs: CcsConfig,
    pub m_layers: usize,
    pub edit_mode: EditMode,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            method: DirectionMethod::Hybrid,
            ccs: CcsConfig::default(),
            m_layers: DEFAULT_LAYER_COUNT,
            edit_mode: EditMode::Both,
        }
    }
}

fn fit_profile(
    subject_id: &str,
    corpus: &PreferenceCorpus,
    layers: &[PairActivations],
    settings: &FitSettings,
) -> Result<SteeringProfile, EvalError> {
    let pairs = fit_layers(layers, settings.method, &settings.ccs).map_err(|e| EvalError::Recovery(e.to_string()))?;
    let created_from = CreatedFrom {
        layout_version: corpus.layout_version,
        k: corpus.k(),
    };
    SteeringProfile::build(subject_id, created_from, settings.method, settings.edit_mode, pairs, settings.m_layers)
        .map_err(|e| EvalError::Recovery(e.to_string()))
}

fn find_user<'a>(data: &'a WorldData, id: &str) -> Result<&'a UserWorld, EvalError> {
    data.users
        .iter()
        .find(|u| u.user_id == id)
        .ok_or_else(|| EvalError::Recovery(format!("unknown user {id}")))
}

/// Fits one user's profile from their own pairs.
pub fn fit_user_profile(data: &WorldData, user_id: &str, settings: &FitSettings) -> Result<SteeringProfile, EvalError> {
    let uw = find_user(data, user_id)?;
    fit_profile(user_id, &uw.corpus(), &uw.pair_activations(), settings)
}

/// Fits one profile from the aggregated pairs of several users.
pub fn fit_group_profile(
    data: &WorldData,
    user_ids: &[&str],
    group_id: &str,
    settings: &FitSettings,
) -> Result<SteeringProfile, EvalError> {
    let corpora = user_ids
        .iter()
        .map(|id| find_user(data, id).map(UserWorld::corpus))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = aggregate_corpora(&corpora, group_id).map_err(|e| EvalError::Recovery(e.to_string()))?;
    fit_profile(group_id, &corpus, &data.group_pairs(user_ids)?, settings)
}

/// Per-user and whole-group results of one simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub world: WorldConfig,
    pub settings: FitSettings,
    /// Every user scored against their own profile.
    pub individual: RecoveryReport,
    /// Every user scored against the profile fitted on all users.
    pub group: RecoveryReport,
}

pub const GROUP_ID: &str = "group";

/// Generates a world, fits per-user and group profiles, edits the query
/// activations and scores them.
pub fn simulate(config: &WorldConfig, settings: &FitSettings) -> Result<SimulationReport, EvalError> {
    let data = gen_synthetic_world(config)?;
    let ids: Vec<&str> = data.users.iter().map(|u| u.user_id.as_str()).collect();
    let per_user = ids
        .par_iter()
        .map(|id| {
            let profile = fit_user_profile(&data, id, settings)?;
            score_recovery(&profile, &data, &[id])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = per_user.len() as f64;
    let individual = RecoveryReport {
        mean_accuracy_before: per_user.iter().map(|r| r.mean_accuracy_before).sum::<f64>() / n,
        mean_accuracy_after: per_user.iter().map(|r| r.mean_accuracy_after).sum::<f64>() / n,
        signal_layer_selected: per_user.iter().all(|r| r.signal_layer_selected),
        users: per_user.into_iter().flat_map(|r| r.users).collect(),
    };
    let group_profile = fit_group_profile(&data, &ids, GROUP_ID, settings)?;
    let group = score_recovery(&group_profile, &data, &ids)?;
    Ok(SimulationReport {
        world: config.clone(),
        settings: settings.clone(),
        individual,
        group,
    })
}
