//! Activation edits and the on-disk formats they consume.
//!
//! An edit strengthens the component of an activation along `theta_p` and
//! then removes the component along `theta_n`. Activations travel as `.act`
//! files: the magic `CHAM`, four little-endian `u32` (version, layer, rows,
//! dim) and `rows × dim` little-endian `f32` in row-major order. A bundle is
//! a directory of `layer_{l}_{P|N|X}.act` files. Steering profiles are
//! canonical JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directions::{select_layers, DirectionMethod, DirectionPair, DirectionsError, LayerSelection, PairActivations};
use crate::json::to_canonical_string;
use crate::linalg::{self, LinalgError, Matrix, Vector};

pub const ACT_MAGIC: &[u8; 4] = b"CHAM";
pub const ACT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum EditError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("layer {layer}: activation dim {actual} does not match profile dim {expected}")]
    LayerDim { layer: u32, expected: usize, actual: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("bundle {path}: {message}")]
    Bundle { path: PathBuf, message: String },
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("malformed profile JSON: {0}")]
    ProfileParse(String),
    #[error(transparent)]
    Directions(#[from] DirectionsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EditError + '_ {
    move |source| EditError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `x + proj_θ(x)`: doubles the component of `x` along `theta_p`.
pub fn strengthen(x: &Vector, theta_p: &Vector) -> Result<Vector, EditError> {
    let c = linalg::projection_coefficient(x, theta_p)?;
    Ok(Vector::new(x.as_slice().iter().zip(theta_p.as_slice()).map(|(a, t)| a + c * t).collect())?)
}

/// `x − proj_θ(x)`: removes the component of `x` along `theta_n`.
pub fn suppress(x: &Vector, theta_n: &Vector) -> Result<Vector, EditError> {
    let c = linalg::projection_coefficient(x, theta_n)?;
    Ok(Vector::new(x.as_slice().iter().zip(theta_n.as_slice()).map(|(a, t)| a - c * t).collect())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    #[default]
    Both,
    PersonalizedOnly,
    NeutralOnly,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::Both => "both",
            EditMode::PersonalizedOnly => "personalized_only",
            EditMode::NeutralOnly => "neutral_only",
        }
    }
}

impl std::fmt::Display for EditMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EditMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "both" => Ok(EditMode::Both),
            "personalized_only" => Ok(EditMode::PersonalizedOnly),
            "neutral_only" => Ok(EditMode::NeutralOnly),
            other => Err(format!(
                "unknown edit mode {other:?} (expected both, personalized_only or neutral_only)"
            )),
        }
    }
}

pub fn apply_edit(x: &Vector, pair: &DirectionPair, mode: EditMode) -> Result<Vector, EditError> {
    match mode {
        EditMode::Both => suppress(&strengthen(x, &pair.theta_p)?, &pair.theta_n),
        EditMode::PersonalizedOnly => strengthen(x, &pair.theta_p),
        EditMode::NeutralOnly => suppress(x, &pair.theta_n),
    }
}

/// Rows of one layer's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub layer: u32,
    pub data: Matrix,
}

impl ActivationBatch {
    pub fn new(layer: u32, data: Matrix) -> Self {
        Self { layer, data }
    }

    /// Widens 32-bit activations.
    pub fn from_f32(layer: u32, rows: usize, dim: usize, values: &[f32]) -> Result<Self, LinalgError> {
        let data = Matrix::new(rows, dim, values.iter().map(|&v| f64::from(v)).collect())?;
        Ok(Self { layer, data })
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.values().iter().map(|&v| v as f32).collect()
    }

    /// Encodes in the `.act` layout, narrowing values to `f32`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.values().len());
        out.extend_from_slice(ACT_MAGIC);
        for v in [ACT_VERSION, self.layer, self.rows() as u32, self.dim() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.to_f32() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("truncated header ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != ACT_MAGIC {
            return Err("bad magic, expected CHAM".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let (version, layer, rows, dim) = (word(0), word(1), word(2) as usize, word(3) as usize);
        if version != ACT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or("rows × dim overflows")?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err(format!(
                "payload is {} bytes, header implies {expected} ({rows}×{dim})",
                body.len()
            ));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::from_f32(layer, rows, dim, &values).map_err(|e| e.to_string())
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EditError> {
    let name = path.file_name().ok_or_else(|| EditError::Format {
        path: path.to_path_buf(),
        message: "not a file path".into(),
    })?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn write_act(path: &Path, batch: &ActivationBatch) -> Result<(), EditError> {
    write_atomic(path, &batch.encode())
}

pub fn read_act(path: &Path) -> Result<ActivationBatch, EditError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    ActivationBatch::decode(&bytes).map_err(|message| EditError::Format {
        path: path.to_path_buf(),
        message,
    })
}

/// Which stream a bundle file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActRole {
    Personalized,
    Neutral,
    Query,
}

impl ActRole {
    pub fn tag(self) -> char {
        match self {
            ActRole::Personalized => 'P',
            ActRole::Neutral => 'N',
            ActRole::Query => 'X',
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "P" => Some(ActRole::Personalized),
            "N" => Some(ActRole::Neutral),
            "X" => Some(ActRole::Query),
            _ => None,
        }
    }
}

pub fn act_file_name(layer: u32, role: ActRole) -> String {
    format!("layer_{layer}_{}.act", role.tag())
}

/// Parses `layer_{l}_{P|N|X}.act`.
pub fn parse_act_file_name(name: &str) -> Option<(u32, ActRole)> {
    let stem = name.strip_prefix("layer_")?.strip_suffix(".act")?;
    let (layer, role) = stem.rsplit_once('_')?;
    if layer.is_empty() || !layer.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((layer.parse().ok()?, ActRole::from_tag(role)?))
}

/// Activation files of one directory, keyed by layer and role.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bundle {
    pub batches: BTreeMap<(u32, ActRole), ActivationBatch>,
}

impl Bundle {
    pub fn read(dir: &Path) -> Result<Self, EditError> {
        let mut batches = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let entry = entry.map_err(io_err(dir))?;
            let name = entry.file_name();
            let Some((layer, role)) = parse_act_file_name(&name.to_string_lossy()) else {
                continue;
            };
            let path = entry.path();
            let batch = read_act(&path)?;
            if batch.layer != layer {
                return Err(EditError::Format {
                    path,
                    message: format!("header layer {} disagrees with file name layer {layer}", batch.layer),
                });
            }
            batches.insert((layer, role), batch);
        }
        Ok(Self { batches })
    }

    pub fn write(&self, dir: &Path) -> Result<(), EditError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for ((layer, role), batch) in &self.batches {
            write_act(&dir.join(act_file_name(*layer, *role)), batch)?;
        }
        Ok(())
    }

    pub fn insert(&mut self, role: ActRole, batch: ActivationBatch) {
        self.batches.insert((batch.layer, role), batch);
    }

    /// Query-time batches in ascending layer order.
    pub fn queries(&self) -> Vec<ActivationBatch> {
        self.batches
            .iter()
            .filter(|((_, r), _)| *r == ActRole::Query)
            .map(|(_, b)| b.clone())
            .collect()
    }

    /// Aligned P/N pairs for every layer that has both files.
    pub fn pair_activations(&self, dir: &Path) -> Result<Vec<PairActivations>, EditError> {
        let layers: Vec<u32> = self
            .batches
            .keys()
            .filter(|(_, r)| *r != ActRole::Query)
            .map(|(l, _)| *l)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            let get = |role| {
                self.batches.get(&(l, role)).ok_or_else(|| EditError::Bundle {
                    path: dir.to_path_buf(),
                    message: format!("layer {l} is missing {}", act_file_name(l, role)),
                })
            };
            let (p, n) = (get(ActRole::Personalized)?, get(ActRole::Neutral)?);
            let acts = PairActivations::new(l, p.data.clone(), n.data.clone()).map_err(|e| EditError::Bundle {
                path: dir.to_path_buf(),
                message: format!("layer {l}: {e}"),
            })?;
            out.push(acts);
        }
        if out.is_empty() {
            return Err(EditError::Bundle {
                path: dir.to_path_buf(),
                message: "no layer_*_P.act / layer_*_N.act files".into(),
            });
        }
        Ok(out)
    }
}

/// Corpus that a profile was fitted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreatedFrom {
    pub layout_version: u32,
    pub k: usize,
}

/// Fitted directions for one subject plus how to apply them.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringProfile {
    pub subject_id: String,
    pub dim: usize,
    pub created_from: CreatedFrom,
    pub method: DirectionMethod,
    pub edit_mode: EditMode,
    pub pairs: BTreeMap<u32, DirectionPair>,
    pub selected_layers: LayerSelection,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    layer: u32,
    theta_p: Vector,
    theta_n: Vector,
    fit_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    subject_id: String,
    dim: usize,
    method: DirectionMethod,
    edit_mode: EditMode,
    layers: Vec<LayerRecord>,
    selected_layers: Vec<u32>,
    created_from: CreatedFrom,
}

impl SteeringProfile {
    /// Assembles a profile and selects the `m` lowest-loss layers.
    pub fn build(
        subject_id: impl Into<String>,
        created_from: CreatedFrom,
        method: DirectionMethod,
        edit_mode: EditMode,
        pairs: Vec<DirectionPair>,
        m: usize,
    ) -> Result<Self, EditError> {
        let dim = pairs.first().map(|p| p.dim()).ok_or_else(|| EditError::Profile("no fitted layers".into()))?;
        let pairs: BTreeMap<u32, DirectionPair> = pairs.into_iter().map(|p| (p.layer, p)).collect();
        let reports = pairs.iter().map(|(&l, p)| (l, p.fit_loss)).collect();
        let profile = Self {
            subject_id: subject_id.into(),
            dim,
            created_from,
            method,
            edit_mode,
            pairs,
            selected_layers: select_layers(&reports, m)?,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), EditError> {
        for (l, p) in &self.pairs {
            if p.layer != *l {
                return Err(EditError::Profile(format!("pair keyed {l} carries layer {}", p.layer)));
            }
            if p.dim() != self.dim || p.theta_n.dim() != self.dim {
                return Err(EditError::Profile(format!(
                    "layer {l} directions have dim {} / {}, profile dim {}",
                    p.theta_p.dim(),
                    p.theta_n.dim(),
                    self.dim
                )));
            }
            p.validate()?;
        }
        for l in &self.selected_layers.selected {
            if !self.pairs.contains_key(l) {
                return Err(EditError::Profile(format!("selected layer {l} has no direction pair")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let rec = ProfileRecord {
            subject_id: self.subject_id.clone(),
            dim: self.dim,
            method: self.method,
            edit_mode: self.edit_mode,
            layers: self
                .pairs
                .values()
                .map(|p| LayerRecord {
                    layer: p.layer,
                    theta_p: p.theta_p.clone(),
                    theta_n: p.theta_n.clone(),
                    fit_loss: p.fit_loss,
                })
                .collect(),
            selected_layers: self.selected_layers.selected.clone(),
            created_from: self.created_from,
        };
        let mut s = to_canonical_string(&rec).expect("profile serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EditError> {
        let rec: ProfileRecord = serde_json::from_str(text).map_err(|e| EditError::ProfileParse(e.to_string()))?;
        let pairs: BTreeMap<u32, DirectionPair> = rec
            .layers
            .into_iter()
            .map(|l| {
                (
                    l.layer,
                    DirectionPair {
                        layer: l.layer,
                        theta_p: l.theta_p,
                        theta_n: l.theta_n,
                        fit_loss: l.fit_loss,
                        method: rec.method,
                    },
                )
            })
            .collect();
        let profile = Self {
            subject_id: rec.subject_id,
            dim: rec.dim,
            created_from: rec.created_from,
            method: rec.method,
            edit_mode: rec.edit_mode,
            selected_layers: LayerSelection {
                selected: rec.selected_layers,
                reports: pairs.iter().map(|(&l, p)| (l, p.fit_loss)).collect(),
            },
            pairs,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn write(&self, path: &Path) -> Result<(), EditError> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, EditError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn is_selected(&self, layer: u32) -> bool {
        self.selected_layers.selected.contains(&layer)
    }
}

/// Edits one row of a batch.
fn edit_row(row: &[f64], pair: &DirectionPair, mode: EditMode) -> Result<Vec<f64>, EditError> {
    let x = Vector::new(row.to_vec())?;
    Ok(apply_edit(&x, pair, mode)?.into_inner())
}

/// Edits every row of every batch whose layer is selected; other batches
/// pass through unchanged. Output order matches input order.
pub fn apply_profile(batches: &[ActivationBatch], profile: &SteeringProfile) -> Result<Vec<ActivationBatch>, EditError> {
    batches
        .iter()
        .map(|b| {
            if b.dim() != profile.dim {
                return Err(EditError::LayerDim {
                    layer: b.layer,
                    expected: profile.dim,
                    actual: b.dim(),
                });
            }
            if !profile.is_selected(b.layer) {
                return Ok(b.clone());
            }
            let pair = &profile.pairs[&b.layer];
            let rows: Vec<Vec<f64>> = (0..b.rows())
                .into_par_iter()
                .map(|i| edit_row(b.data.row(i), pair, profile.edit_mode))
                .collect::<Result<_, _>>()?;
            Ok(ActivationBatch::new(b.layer, Matrix::from_rows(&rows)?))
        })
        .collect()
}
