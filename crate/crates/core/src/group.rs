//! Group corpora: many users' preference pairs fitted as one subject.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{CorpusMember, PreferenceCorpus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("no corpora to aggregate")]
    Empty,
    #[error("group must list at least one user")]
    NoUsers,
    #[error("user {0} appears more than once")]
    DuplicateUser(String),
    #[error("mixed layout versions: {0:?}")]
    MixedLayouts(Vec<u32>),
    #[error("duplicate pair ({user_id}, {query_id}) across corpora")]
    DuplicatePair { user_id: String, query_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group_id: String,
    pub user_ids: Vec<String>,
}

impl GroupSpec {
    pub fn new(group_id: impl Into<String>, user_ids: Vec<String>) -> Result<Self, GroupError> {
        let spec = Self {
            group_id: group_id.into(),
            user_ids,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GroupError> {
        if self.user_ids.is_empty() {
            return Err(GroupError::NoUsers);
        }
        let mut seen = HashSet::new();
        for u in &self.user_ids {
            if !seen.insert(u) {
                return Err(GroupError::DuplicateUser(u.clone()));
            }
        }
        Ok(())
    }
}

/// Concatenates corpora under `group_id`, ordered by `(user_id, query_id)`.
///
/// Every input is recorded in the member list, including users that
/// contributed no pairs.
pub fn aggregate_corpora(corpora: &[PreferenceCorpus], group_id: &str) -> Result<PreferenceCorpus, GroupError> {
    let first = corpora.first().ok_or(GroupError::Empty)?;
    let mut versions: Vec<u32> = corpora.iter().map(|c| c.layout_version).collect();
    versions.sort_unstable();
    versions.dedup();
    if versions.len() > 1 {
        return Err(GroupError::MixedLayouts(versions));
    }
    let mut pairs: Vec<_> = corpora.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
    pairs.sort_by(|a, b| (&a.user_id, &a.query_id).cmp(&(&b.user_id, &b.query_id)));
    if let Some(w) = pairs.windows(2).find(|w| (&w[0].user_id, &w[0].query_id) == (&w[1].user_id, &w[1].query_id)) {
        return Err(GroupError::DuplicatePair {
            user_id: w[0].user_id.clone(),
            query_id: w[0].query_id.clone(),
        });
    }
    let mut members: Vec<CorpusMember> = corpora
        .iter()
        .flat_map(|c| {
            if c.members.is_empty() {
                vec![CorpusMember {
                    user_id: c.subject_id.clone(),
                    k: c.k(),
                }]
            } else {
                c.members.clone()
            }
        })
        .collect();
    members.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let mut out = PreferenceCorpus::new(group_id, pairs);
    out.layout_version = first.layout_version;
    out.members = members;
    if out.k() == 0 {
        out.warning = Some("no preference pairs retained".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::PreferencePair;

    fn corpus(user: &str, n: usize) -> PreferenceCorpus {
        let pairs = (0..n)
            .map(|i| PreferencePair {
                user_id: user.into(),
                query_id: format!("q{i}"),
                personalized: format!("{user} p{i}"),
                neutral: format!("{user} n{i}"),
                raw_personalized: "p".into(),
                raw_neutral: "n".into(),
            })
            .collect();
        let mut c = PreferenceCorpus::new(user, pairs);
        c.members = vec![CorpusMember { user_id: user.into(), k: n }];
        c
    }

    #[test]
    fn union_counts_and_order() {
        let g = aggregate_corpora(&[corpus("B", 2), corpus("A", 3)], "g").unwrap();
        assert_eq!(g.k(), 5);
        assert_eq!(g.subject_id, "g");
        let users: Vec<&str> = g.pairs.iter().map(|p| p.user_id.as_str()).collect();
        assert_eq!(users, ["A", "A", "A", "B", "B"]);
        assert_eq!(g.members.len(), 2);
    }

    #[test]
    fn single_user_keeps_pairs() {
        let c = corpus("A", 4);
        let g = aggregate_corpora(std::slice::from_ref(&c), "g").unwrap();
        assert_eq!(g.pairs, c.pairs);
        assert_eq!(g.subject_id, "g");
    }

    #[test]
    fn empty_member_is_recorded() {
        let g = aggregate_corpora(&[corpus("A", 2), corpus("Z", 0)], "g").unwrap();
        assert_eq!(g.k(), 2);
        assert!(g.members.iter().any(|m| m.user_id == "Z" && m.k == 0));
    }

    #[test]
    fn errors() {
        assert_eq!(aggregate_corpora(&[], "g"), Err(GroupError::Empty));
        let mut other = corpus("B", 1);
        other.layout_version = 2;
        assert_eq!(
            aggregate_corpora(&[corpus("A", 1), other], "g"),
            Err(GroupError::MixedLayouts(vec![1, 2]))
        );
        assert!(matches!(
            aggregate_corpora(&[corpus("A", 1), corpus("A", 1)], "g"),
            Err(GroupError::DuplicatePair { .. })
        ));
        assert_eq!(GroupSpec::new("g", vec![]), Err(GroupError::NoUsers));
        assert_eq!(
            GroupSpec::new("g", vec!["a".into(), "a".into()]),
            Err(GroupError::DuplicateUser("a".into()))
        );
    }

    #[test]
    fn aggregate_round_trips_through_jsonl() {
        let g = aggregate_corpora(&[corpus("A", 2), corpus("B", 1)], "g").unwrap();
        assert_eq!(PreferenceCorpus::from_jsonl(&g.to_jsonl()).unwrap(), g);
    }
}
