//! Self-generated preference data.
//!
//! For one user: select representative history, ask the model for a
//! personalized and a neutral insight, then answer every query twice (once
//! per insight). Pairs whose two answers are identical after trimming are
//! discarded; the rest form the user's preference corpus.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{
    embed_history, select_top_k, EmbeddingProvider, HistoryError, HistoryItem, SelectedHistory,
    UserHistory,
};
use crate::json::{jsonl_lines, to_canonical_string};
use crate::llm::{ChatMessage, CompletionParams, LanguageModel, LlmError};
use crate::task::Task;

/// Version of the pair-text layout `history + "\n" + query + "\n" + answer`.
pub const LAYOUT_VERSION: u32 = 1;

const HISTORY: &str = "[HISTORY]";
const QUERY: &str = "[QUERY]";
const INSIGHT: &str = "[INSIGHT]";
const OUTPUT: &str = "[OUTPUT]";

const LAMP2_TAGS: &str = "sci-fi, based on a book, comedy, action, twist ending, dystopia, dark comedy, classic, psychology, fantasy, romance, thought-provoking, social commentary, violence, true story";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("missing placeholder value for {0}")]
    MissingPlaceholder(&'static str),
    #[error("history item {item_id} has no label, required for {task}")]
    MissingLabel { item_id: String, task: Task },
    #[error("at least one query is required")]
    NoQueries,
    #[error("query {query_id}: {source}")]
    Query {
        query_id: String,
        #[source]
        source: LlmError,
    },
    #[error("insight generation: {0}")]
    Insight(#[source] LlmError),
    #[error("all {} queries failed; first: {}", .0.len(), .0.first().map(|f| f.error.as_str()).unwrap_or(""))]
    AllQueriesFailed(Vec<QueryFailure>),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Personalized,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task: Task,
    pub agent: Agent,
    pub body: String,
}

impl PromptTemplate {
    /// The fixed preference-generation template for `(task, agent)`.
    pub fn builtin(task: Task, agent: Agent) -> Self {
        let (preamble, framing) = match task {
            Task::Lamp2 => (
                format!(
                    "Suppose you are a user with the following user profile history of movie tagging:\n{HISTORY}\n\n\
                     Now, given a new description: {QUERY}\n\n\
                     Question: Which tag does this movie relate to among the following tags? Just answer with only ONE tag name without further explanation. tags: [{LAMP2_TAGS}]"
                ),
                match agent {
                    Agent::Personalized => format!(
                        "You are a helpfully personalized assistant. You try to predict the movie tagging that the user preferred based on their history. The user prefers {INSIGHT}. Answer only with one tag name ({LAMP2_TAGS})."
                    ),
                    Agent::Neutral => format!(
                        "You are a generic and impersonal assistant. You do not consider the user's preferences or profile history when responding. Your answer shoulds {INSIGHT}. Answer only with one tag name ({LAMP2_TAGS})."
                    ),
                },
            ),
            Task::Lamp3 => (
                format!(
                    "Suppose you are a user with the following user profile history of product rating based on the user's review of the product:\n{HISTORY}\n\n\
                     Now, given a new review by the user: {QUERY}\n\n\
                     Question: What is the rating score of the following review on a scale of 1 to 5? Just answer with 1, 2, 3, 4, or 5 without further explanation."
                ),
                match agent {
                    Agent::Personalized => format!(
                        "You are a helpfully personalized assistant. You try to predict the rating of the product based on the user history ratings. The user prefers {INSIGHT}. Just answer with 1, 2, 3, 4, or 5 without further explanation."
                    ),
                    Agent::Neutral => format!(
                        "You are a generic and impersonal assistant. You do not consider the user's preferences or profile history when responding. Your answer should {INSIGHT}."
                    ),
                },
            ),
            Task::Lamp7 => (
                format!(
                    "Suppose you are a twitter user with the following user profile history that shows their preferred way of speaking:\n{HISTORY}\n\n\
                     Now, given a new twitter post: {QUERY}\n\n\
                     Question: Paraphrase the tweet in the style the user likes without any explanation before or after it."
                ),
                match agent {
                    Agent::Personalized => format!(
                        "You are a helpfully personalized assistant. You try to paraphrase the tweet in the style the user likes based on the history. The user prefers {INSIGHT}."
                    ),
                    Agent::Neutral => format!(
                        "You are a generic and impersonal assistant. You do not consider the user's preferences or profile history when responding. Your answer should {INSIGHT}."
                    ),
                },
            ),
        };
        Self {
            task,
            agent,
            body: format!("{preamble}\n\n{framing}\n\nYour answer: {OUTPUT}"),
        }
    }
}

/// Numbered history block in the task's profile format.
pub fn format_history(task: Task, items: &[HistoryItem]) -> Result<String, DatagenError> {
    let mut lines = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let label = || {
            it.label.as_deref().ok_or_else(|| DatagenError::MissingLabel {
                item_id: it.id.clone(),
                task,
            })
        };
        let line = match task {
            Task::Lamp2 => format!("The tag for movie: \"{}\" is \"{}\".", it.text, label()?),
            Task::Lamp3 => format!("{} is the rating score for product: \"{}\".", label()?, it.text),
            Task::Lamp7 => it.text.clone(),
        };
        lines.push(format!("{}. {}", i + 1, line));
    }
    Ok(lines.join("\n"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    #[serde(default)]
    pub user_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

/// Parses queries from JSON Lines; records without `user_id` inherit
/// `default_user`.
pub fn parse_queries(text: &str, default_user: &str) -> Result<Vec<Query>, DatagenError> {
    let mut out: Vec<Query> = Vec::new();
    let mut seen = HashSet::new();
    for (line, raw) in jsonl_lines(text) {
        let mut q: Query = serde_json::from_str(raw).map_err(|e| DatagenError::Parse {
            line,
            message: e.to_string(),
        })?;
        if q.user_id.is_empty() {
            q.user_id = default_user.to_owned();
        }
        if !seen.insert((q.user_id.clone(), q.id.clone())) {
            return Err(DatagenError::Parse {
                line,
                message: format!("duplicate query id {}", q.id),
            });
        }
        out.push(q);
    }
    Ok(out)
}

pub fn render_prompt(
    template: &PromptTemplate,
    history: &SelectedHistory,
    query: &Query,
    insight: &str,
) -> Result<String, DatagenError> {
    if history.items.is_empty() {
        return Err(DatagenError::MissingPlaceholder(HISTORY));
    }
    if query.text.trim().is_empty() {
        return Err(DatagenError::MissingPlaceholder(QUERY));
    }
    if insight.trim().is_empty() {
        return Err(DatagenError::MissingPlaceholder(INSIGHT));
    }
    let block = format_history(template.task, &history.items)?;
    Ok(fill(&template.body, &block, &query.text, insight))
}

fn fill(body: &str, history: &str, query: &str, insight: &str) -> String {
    // Substitute in one left-to-right pass so placeholder-like text inside
    // values is never re-expanded.
    let mut out = String::with_capacity(body.len() + history.len() + query.len() + insight.len());
    let mut rest = body;
    while let Some(pos) = rest.find('[') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let (value, len) = [
            (HISTORY, history),
            (QUERY, query),
            (INSIGHT, insight),
            (OUTPUT, ""),
        ]
        .iter()
        .find(|(ph, _)| tail.starts_with(ph))
        .map_or(("[", 1), |(ph, v)| (*v, ph.len()));
        out.push_str(value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out.trim_end().to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightPair {
    pub user_id: String,
    pub personalized: String,
    pub neutral: String,
}

fn task_description(task: Task) -> &'static str {
    match task {
        Task::Lamp2 => "tagging movies given their descriptions",
        Task::Lamp3 => "rating products on a scale of 1 to 5 given the user's review",
        Task::Lamp7 => "paraphrasing tweets",
    }
}

pub fn insight_prompt(task: Task, agent: Agent, history: &SelectedHistory) -> Result<String, DatagenError> {
    let desc = task_description(task);
    Ok(match agent {
        Agent::Personalized => format!(
            "Here is the profile history of a user {desc}:\n{}\n\n\
             Based only on this history, describe the user's preferences, behaviors and style. \
             Reply with one or two sentences that complete the phrase \"The user prefers ...\", without repeating the phrase.",
            format_history(task, &history.items)?
        ),
        Agent::Neutral => format!(
            "Consider an assistant {desc} for any user. \
             Describe the characteristics of an impersonal, general response that ignores who the user is. \
             Reply with one or two sentences that complete the phrase \"Your answer should ...\", without repeating the phrase."
        ),
    })
}

/// One personalized and one neutral insight for the user.
pub fn generate_insights(
    task: Task,
    history: &SelectedHistory,
    client: &dyn LanguageModel,
    params: &CompletionParams,
) -> Result<InsightPair, DatagenError> {
    if history.items.is_empty() {
        return Err(DatagenError::History(HistoryError::EmptyHistory));
    }
    let ask = |agent| -> Result<String, DatagenError> {
        let prompt = insight_prompt(task, agent, history)?;
        client
            .complete(&[ChatMessage::user(prompt)], params)
            .map(|c| c.text)
            .map_err(DatagenError::Insight)
    };
    Ok(InsightPair {
        user_id: history.user_id.clone(),
        personalized: ask(Agent::Personalized)?,
        neutral: ask(Agent::Neutral)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub user_id: String,
    pub query_id: String,
    pub personalized: String,
    pub neutral: String,
    pub raw_personalized: String,
    pub raw_neutral: String,
}

/// Pair text for layout version 1.
pub fn pair_text(history_block: &str, query: &str, answer: &str) -> String {
    format!("{history_block}\n{query}\n{answer}")
}

fn clip(s: &str, max_chars: Option<usize>) -> &str {
    match max_chars {
        Some(n) => s.char_indices().nth(n).map_or(s, |(i, _)| &s[..i]),
        None => s,
    }
}

/// Answers `query` under both insights. Returns `None` when the two raw
/// answers are identical after trimming whitespace.
pub fn generate_preference_pair(
    task: Task,
    query: &Query,
    history: &SelectedHistory,
    insights: &InsightPair,
    client: &dyn LanguageModel,
    params: &CompletionParams,
    max_insight_chars: Option<usize>,
) -> Result<Option<PreferencePair>, DatagenError> {
    if insights.personalized.trim().is_empty() || insights.neutral.trim().is_empty() {
        return Err(DatagenError::MissingPlaceholder(INSIGHT));
    }
    let answer = |agent, insight: &str| -> Result<String, DatagenError> {
        let prompt = render_prompt(
            &PromptTemplate::builtin(task, agent),
            history,
            query,
            clip(insight, max_insight_chars),
        )?;
        client
            .complete(&[ChatMessage::user(prompt)], params)
            .map(|c| c.text)
            .map_err(|source| DatagenError::Query {
                query_id: query.id.clone(),
                source,
            })
    };
    let raw_p = answer(Agent::Personalized, &insights.personalized)?;
    let raw_n = answer(Agent::Neutral, &insights.neutral)?;
    if raw_p.trim() == raw_n.trim() {
        return Ok(None);
    }
    let block = format_history(task, &history.items)?;
    Ok(Some(PreferencePair {
        user_id: history.user_id.clone(),
        query_id: query.id.clone(),
        personalized: pair_text(&block, &query.text, &raw_p),
        neutral: pair_text(&block, &query.text, &raw_n),
        raw_personalized: raw_p,
        raw_neutral: raw_n,
    }))
}

/// Per-user pair count recorded in aggregated corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMember {
    pub user_id: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceCorpus {
    pub subject_id: String,
    pub layout_version: u32,
    pub pairs: Vec<PreferencePair>,
    pub members: Vec<CorpusMember>,
    pub warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    subject_id: String,
    layout_version: u32,
    k: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    members: Vec<CorpusMember>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
}

impl PreferenceCorpus {
    pub fn new(subject_id: impl Into<String>, pairs: Vec<PreferencePair>) -> Self {
        Self {
            subject_id: subject_id.into(),
            layout_version: LAYOUT_VERSION,
            pairs,
            members: Vec::new(),
            warning: None,
        }
    }

    /// Number of retained pairs.
    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !seen.insert((p.user_id.as_str(), p.query_id.as_str())) {
                return Err(DatagenError::InvalidCorpus(format!(
                    "duplicate pair ({}, {})",
                    p.user_id, p.query_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let header = CorpusHeader {
            subject_id: self.subject_id.clone(),
            layout_version: self.layout_version,
            k: self.k(),
            members: self.members.clone(),
            warning: self.warning.clone(),
        };
        let mut out = to_canonical_string(&header).expect("header serializes");
        out.push('\n');
        for p in &self.pairs {
            out.push_str(&to_canonical_string(p).expect("pair serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatagenError> {
        let mut lines = jsonl_lines(text);
        let (hl, hraw) = lines.next().ok_or(DatagenError::Parse {
            line: 1,
            message: "missing corpus header".into(),
        })?;
        let header: CorpusHeader = serde_json::from_str(hraw).map_err(|e| DatagenError::Parse {
            line: hl,
            message: format!("header: {e}"),
        })?;
        let pairs = lines
            .map(|(line, raw)| {
                serde_json::from_str::<PreferencePair>(raw).map_err(|e| DatagenError::Parse {
                    line,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if pairs.len() != header.k {
            return Err(DatagenError::InvalidCorpus(format!(
                "header says k={} but {} pairs follow",
                header.k,
                pairs.len()
            )));
        }
        let c = Self {
            subject_id: header.subject_id,
            layout_version: header.layout_version,
            pairs,
            members: header.members,
            warning: header.warning,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub task: Task,
    pub k: usize,
    pub k_pca: Option<usize>,
    pub params: CompletionParams,
    pub concurrency: usize,
    pub max_insight_chars: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub error: String,
    /// Whether the model service, rather than the request, failed.
    pub remote: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildReport {
    /// Queries whose two answers were identical.
    pub discarded: Vec<String>,
    pub failures: Vec<QueryFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBuild {
    pub corpus: PreferenceCorpus,
    pub selected: SelectedHistory,
    pub insights: InsightPair,
    pub report: BuildReport,
}

/// Runs selection, one insight round, and pair generation for every query.
pub fn build_corpus(
    user: &UserHistory,
    queries: &[Query],
    config: &CorpusConfig,
    embedder: &dyn EmbeddingProvider,
    client: &dyn LanguageModel,
) -> Result<CorpusBuild, DatagenError> {
    if queries.is_empty() {
        return Err(DatagenError::NoQueries);
    }
    let embeddings = embed_history(user, embedder, config.concurrency)?;
    let selected = select_top_k(user, &embeddings, config.k, config.k_pca)?;
    let insights = generate_insights(config.task, &selected, client, &config.params)?;

    let run = |q: &Query| -> Result<Option<PreferencePair>, DatagenError> {
        {
            generate_preference_pair(
                config.task,
                q,
                &selected,
                &insights,
                client,
                &config.params,
                config.max_insight_chars,
            )
        }
    };
    let outcomes: Vec<_> = if config.concurrency > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency)
            .build()
            .map_err(|e| DatagenError::InvalidCorpus(format!("thread pool: {e}")))?;
        pool.install(|| queries.par_iter().map(run).collect())
    } else {
        queries.iter().map(run).collect()
    };

    let mut pairs = Vec::new();
    let mut report = BuildReport::default();
    for (q, outcome) in queries.iter().zip(outcomes) {
        match outcome {
            Ok(Some(p)) => pairs.push(p),
            Ok(None) => report.discarded.push(q.id.clone()),
            Err(e) => report.failures.push(QueryFailure {
                query_id: q.id.clone(),
                remote: matches!(&e, DatagenError::Query { source, .. } if source.is_remote()),
                error: e.to_string(),
            }),
        }
    }
    if report.failures.len() == queries.len() {
        return Err(DatagenError::AllQueriesFailed(report.failures));
    }
    pairs.sort_by(|a, b| (&a.user_id, &a.query_id).cmp(&(&b.user_id, &b.query_id)));
    let mut corpus = PreferenceCorpus::new(user.user_id.clone(), pairs);
    corpus.members = vec![CorpusMember {
        user_id: user.user_id.clone(),
        k: corpus.k(),
    }];
    if corpus.k() == 0 {
        corpus.warning = Some("no preference pairs retained".into());
    }
    corpus.validate()?;
    Ok(CorpusBuild {
        corpus,
        selected,
        insights,
        report,
    })
}
