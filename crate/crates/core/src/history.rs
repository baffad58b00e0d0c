//! User history embedding and representative-item selection.
//!
//! Items are embedded, the embedding matrix is reduced to its top principal
//! components, and items are ranked by the norm of their centered
//! projection onto those components.

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::json::{jsonl_lines, to_canonical_string};
use crate::linalg::{pca, LinalgError, Matrix, Vector};
use crate::llm::{hash_embedding, LanguageModel, LlmError};

/// Default number of selected items (and principal components).
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistoryError {
    #[error("user history is empty")]
    EmptyHistory,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid history item: {0}")]
    InvalidItem(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding item {item_id}: {source}")]
    Embedding {
        item_id: String,
        #[source]
        source: LlmError,
    },
    #[error("embedding matrix has {rows} rows for {items} items")]
    RowMismatch { rows: usize, items: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<String>,
}

impl HistoryItem {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Option<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub items: Vec<HistoryItem>,
}

impl UserHistory {
    pub fn new(user_id: impl Into<String>, items: Vec<HistoryItem>) -> Result<Self, HistoryError> {
        let h = Self {
            user_id: user_id.into(),
            items,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), HistoryError> {
        if self.items.is_empty() {
            return Err(HistoryError::EmptyHistory);
        }
        let mut seen = HashSet::new();
        for it in &self.items {
            if it.id.is_empty() {
                return Err(HistoryError::InvalidItem("empty id".into()));
            }
            if it.text.is_empty() {
                return Err(HistoryError::InvalidItem(format!("item {} has empty text", it.id)));
            }
            if !seen.insert(it.id.as_str()) {
                return Err(HistoryError::InvalidItem(format!("duplicate id {}", it.id)));
            }
        }
        Ok(())
    }

    /// Parses a history JSON Lines file. `user_id` may appear on a header
    /// line of its own or on every record; conflicting ids are rejected.
    pub fn from_jsonl(text: &str) -> Result<Self, HistoryError> {
        let mut user_id: Option<String> = None;
        let mut items = Vec::new();
        for (line, raw) in jsonl_lines(text) {
            let perr = |message: String| HistoryError::Parse { line, message };
            let v: Value = serde_json::from_str(raw).map_err(|e| perr(e.to_string()))?;
            let obj = v.as_object().ok_or_else(|| perr("expected a JSON object".into()))?;
            if let Some(uid) = obj.get("user_id") {
                let uid = uid
                    .as_str()
                    .ok_or_else(|| perr("user_id must be a string".into()))?;
                match &user_id {
                    Some(prev) if prev != uid => {
                        return Err(perr(format!("user_id {uid} conflicts with {prev}")))
                    }
                    _ => user_id = Some(uid.to_owned()),
                }
            }
            if !obj.contains_key("id") && !obj.contains_key("text") {
                continue;
            }
            let field = |name: &str| -> Result<String, HistoryError> {
                obj.get(name)
                    .and_then(Value::as_str)
                    .map(str::to_owned)
                    .ok_or_else(|| perr(format!("missing string field {name:?}")))
            };
            let label = match obj.get("label") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(Value::Number(n)) => Some(n.to_string()),
                Some(_) => return Err(perr("label must be a string or null".into())),
            };
            items.push(HistoryItem {
                id: field("id")?,
                text: field("text")?,
                label,
            });
        }
        let user_id = user_id.ok_or(HistoryError::Parse {
            line: 1,
            message: "no user_id found".into(),
        })?;
        Self::new(user_id, items)
    }
}

/// The top-ranked items of a history with their projection norms.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedHistory {
    pub user_id: String,
    pub items: Vec<HistoryItem>,
    pub projection_norms: Vector,
    /// Positions of the selected items in the source history.
    pub source_indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SelectedRecord {
    user_id: String,
    id: String,
    text: String,
    label: Option<String>,
    projection_norm: f64,
}

impl SelectedHistory {
    /// Keeps every item in its original order, for callers that skip
    /// selection.
    pub fn unranked(history: &UserHistory) -> Self {
        Self {
            user_id: history.user_id.clone(),
            items: history.items.clone(),
            projection_norms: Vector::zeros(history.items.len()),
            source_indices: (0..history.items.len()).collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (it, norm) in self.items.iter().zip(self.projection_norms.as_slice()) {
            let rec = SelectedRecord {
                user_id: self.user_id.clone(),
                id: it.id.clone(),
                text: it.text.clone(),
                label: it.label.clone(),
                projection_norm: *norm,
            };
            out.push_str(&to_canonical_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Source of sentence embeddings for history items.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn deterministic(&self) -> bool;
    fn embed(&self, text: &str) -> Result<Vector, LlmError>;
}

/// Offline provider backed by [`hash_embedding`].
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, text: &str) -> Result<Vector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::EmptyText);
        }
        Ok(hash_embedding(text, self.seed, self.dim))
    }
}

/// Provider that calls a model's embeddings endpoint.
pub struct ClientEmbedder {
    client: Arc<dyn LanguageModel>,
    model: String,
    dim: usize,
}

impl ClientEmbedder {
    /// Probes the endpoint once to learn the embedding width.
    pub fn connect(client: Arc<dyn LanguageModel>, model: impl Into<String>) -> Result<Self, LlmError> {
        let model = model.into();
        let dim = client.embed("dimension probe", &model)?.dim();
        Ok(Self { client, model, dim })
    }
}

impl EmbeddingProvider for ClientEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn embed(&self, text: &str) -> Result<Vector, LlmError> {
        self.client.embed(text, &self.model)
    }
}

/// Embeds every item, at most `concurrency` at a time, in item order.
pub fn embed_history(
    history: &UserHistory,
    provider: &dyn EmbeddingProvider,
    concurrency: usize,
) -> Result<Matrix, HistoryError> {
    if history.items.is_empty() {
        return Err(HistoryError::EmptyHistory);
    }
    let embed_one = |it: &HistoryItem| -> Result<Vec<f64>, HistoryError> {
        let v = provider.embed(&it.text).map_err(|source| HistoryError::Embedding {
            item_id: it.id.clone(),
            source,
        })?;
        if v.dim() != provider.dim() {
            return Err(HistoryError::Embedding {
                item_id: it.id.clone(),
                source: LlmError::Malformed(format!(
                    "embedding dim {} != provider dim {}",
                    v.dim(),
                    provider.dim()
                )),
            });
        }
        Ok(v.into_inner())
    };
    let rows: Vec<Vec<f64>> = if concurrency <= 1 || history.items.len() == 1 {
        history.items.iter().map(embed_one).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency)
            .build()
            .map_err(|e| HistoryError::InvalidItem(format!("thread pool: {e}")))?;
        pool.install(|| history.items.par_iter().map(embed_one).collect::<Result<_, _>>())?
    };
    Ok(Matrix::from_rows(&rows)?)
}

/// Ranks items by centered PCA projection norm and keeps the top `k`.
///
/// The number of components defaults to `k` and is clamped to the matrix
/// shape; `k_pca` overrides it.
pub fn select_top_k(
    history: &UserHistory,
    embeddings: &Matrix,
    k: usize,
    k_pca: Option<usize>,
) -> Result<SelectedHistory, HistoryError> {
    if k == 0 || k_pca == Some(0) {
        return Err(HistoryError::ZeroK);
    }
    if history.items.is_empty() {
        return Err(HistoryError::EmptyHistory);
    }
    if embeddings.rows() != history.items.len() {
        return Err(HistoryError::RowMismatch {
            rows: embeddings.rows(),
            items: history.items.len(),
        });
    }
    let comps = k_pca
        .unwrap_or(k)
        .min(embeddings.rows())
        .min(embeddings.dim());
    let basis = pca(embeddings, comps)?;
    let norms = embeddings
        .iter_rows()
        .map(|row| basis.project(row).map(|z| crate::linalg::norm(&z)))
        .collect::<Result<Vec<f64>, _>>()?;
    let order = rank_descending(&norms);
    let keep: Vec<usize> = order.into_iter().take(k.min(norms.len())).collect();
    Ok(SelectedHistory {
        user_id: history.user_id.clone(),
        items: keep.iter().map(|&i| history.items[i].clone()).collect(),
        projection_norms: Vector::new(keep.iter().map(|&i| norms[i]).collect())?,
        source_indices: keep,
    })
}

/// Indices sorted by descending value; values equal to within ~1e-9 of the
/// largest are treated as ties and ordered by ascending index.
fn rank_descending(values: &[f64]) -> Vec<usize> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let key = |v: f64| -> i64 {
        if scale == 0.0 {
            0
        } else {
            (v / scale * 1e9).round() as i64
        }
    };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| key(values[b]).cmp(&key(values[a])).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(n: usize) -> UserHistory {
        UserHistory::new(
            "u1",
            (0..n)
                .map(|i| HistoryItem::new(format!("h{i}"), format!("text number {i}"), None))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn three_point_selection() {
        let h = history(3);
        let e = Matrix::from_rows(&[[2.0, 0.0], [-2.0, 0.0], [0.0, 0.1]]).unwrap();
        let s = select_top_k(&h, &e, 2, None).unwrap();
        assert_eq!(s.source_indices, vec![0, 1]);
        let n = s.projection_norms.as_slice();
        assert!((n[0] - 2.0).abs() < 1e-3 && (n[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn single_item_with_large_k() {
        let h = history(1);
        let e = Matrix::from_rows(&[[0.3, 0.4]]).unwrap();
        let s = select_top_k(&h, &e, 10, None).unwrap();
        assert_eq!(s.items.len(), 1);
        assert_eq!(s.items[0].id, "h0");
    }

    #[test]
    fn identical_embeddings_tie_break_by_index() {
        let h = history(4);
        let e = Matrix::from_rows(&[[1.0, 1.0]; 4]).unwrap();
        let s = select_top_k(&h, &e, 2, None).unwrap();
        assert_eq!(s.source_indices, vec![0, 1]);
    }

    #[test]
    fn k_covering_everything_returns_sorted_full_history() {
        let h = history(4);
        let e = Matrix::from_rows(&[[0.0, 1.0], [3.0, 0.0], [1.0, 1.0], [-2.0, 0.5]]).unwrap();
        let s = select_top_k(&h, &e, 9, None).unwrap();
        assert_eq!(s.items.len(), 4);
        let n = s.projection_norms.as_slice();
        assert!(n.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    }

    #[test]
    fn errors() {
        let h = history(2);
        let e = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            select_top_k(&h, &e, 1, None),
            Err(HistoryError::RowMismatch { .. })
        ));
        assert_eq!(select_top_k(&h, &e, 0, None), Err(HistoryError::ZeroK));
        assert_eq!(UserHistory::new("u", vec![]), Err(HistoryError::EmptyHistory));
    }

    #[test]
    fn embed_history_shape_and_determinism() {
        let h = history(3);
        let p = HashEmbedder { dim: 64, seed: 9 };
        let a = embed_history(&h, &p, 4).unwrap();
        let b = embed_history(&h, &p, 1).unwrap();
        assert_eq!((a.rows(), a.dim()), (3, 64));
        assert_eq!(a, b);
    }

    struct Failing;
    impl EmbeddingProvider for Failing {
        fn dim(&self) -> usize {
            4
        }
        fn deterministic(&self) -> bool {
            true
        }
        fn embed(&self, text: &str) -> Result<Vector, LlmError> {
            if text.contains('2') {
                Err(LlmError::Malformed("boom".into()))
            } else {
                Ok(Vector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap())
            }
        }
    }

    #[test]
    fn provider_failure_names_item() {
        let err = embed_history(&history(3), &Failing, 2).unwrap_err();
        match err {
            HistoryError::Embedding { item_id, .. } => assert_eq!(item_id, "h2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_header_and_per_record_user_ids() {
        let header = "{\"user_id\":\"u7\"}\n{\"id\":\"a\",\"text\":\"x\",\"label\":\"comedy\"}\n{\"id\":\"b\",\"text\":\"y\",\"label\":null}\n";
        let h = UserHistory::from_jsonl(header).unwrap();
        assert_eq!(h.user_id, "u7");
        assert_eq!(h.items[0].label.as_deref(), Some("comedy"));
        assert_eq!(h.items[1].label, None);
        let per = "{\"user_id\":\"u7\",\"id\":\"a\",\"text\":\"x\"}\n{\"user_id\":\"u7\",\"id\":\"b\",\"text\":\"y\",\"label\":4}\n";
        let h2 = UserHistory::from_jsonl(per).unwrap();
        assert_eq!(h2.items[1].label.as_deref(), Some("4"));
        let clash = "{\"user_id\":\"a\",\"id\":\"1\",\"text\":\"x\"}\n{\"user_id\":\"b\",\"id\":\"2\",\"text\":\"y\"}";
        assert!(matches!(UserHistory::from_jsonl(clash), Err(HistoryError::Parse { line: 2, .. })));
        let dup = "{\"user_id\":\"a\"}\n{\"id\":\"1\",\"text\":\"x\"}\n{\"id\":\"1\",\"text\":\"y\"}";
        assert!(matches!(UserHistory::from_jsonl(dup), Err(HistoryError::InvalidItem(_))));
    }
}
