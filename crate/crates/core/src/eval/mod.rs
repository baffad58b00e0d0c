//! LaMP ingestion, task metrics and the synthetic benchtop.

pub mod benchtop;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::history::HistoryItem;
use crate::json::jsonl_lines;
use crate::task::Task;

pub use benchtop::{
    gen_synthetic_world, score_recovery, simulate, FitSettings, RecoveryReport, SimulationReport, SyntheticWorld, UserRecovery,
    WorldConfig, WorldData,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("record {record}: missing field `{field}`")]
    MissingField { record: String, field: String },
    #[error("predictions and golds differ in length ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no examples to score")]
    Empty,
    #[error("no prediction for gold id {0}")]
    MissingPrediction(String),
    #[error("gold rating {0:?} is not an integer in 1..=5")]
    BadGold(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid benchtop config: {0}")]
    InvalidWorld(String),
    #[error("benchtop scoring: {0}")]
    Recovery(String),
}

/// One LaMP example: an input, the user's profile and an optional gold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LampRecord {
    pub id: String,
    pub input: String,
    pub profile: Vec<HistoryItem>,
    pub task: Task,
    pub gold: Option<String>,
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn field(obj: &Value, name: &str, record: &str) -> Result<String, EvalError> {
    obj.get(name).and_then(scalar_string).ok_or_else(|| EvalError::MissingField {
        record: record.to_owned(),
        field: name.to_owned(),
    })
}

fn record_from_value(v: &Value, task: Task) -> Result<LampRecord, EvalError> {
    let id = v.get("id").and_then(scalar_string).ok_or_else(|| EvalError::MissingField {
        record: "<unknown>".into(),
        field: "id".into(),
    })?;
    let input = field(v, "input", &id)?;
    let entries = match v.get("profile") {
        Some(Value::Array(a)) => a.as_slice(),
        Some(Value::Null) | None => &[],
        Some(_) => {
            return Err(EvalError::MissingField {
                record: id,
                field: "profile (array)".into(),
            })
        }
    };
    let mut profile = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let ctx = format!("{id} profile[{i}]");
        let eid = e.get("id").and_then(scalar_string).unwrap_or_else(|| format!("{id}-{i}"));
        let item = match task {
            Task::Lamp2 => HistoryItem::new(eid, field(e, "description", &ctx)?, Some(field(e, "tag", &ctx)?)),
            Task::Lamp3 => HistoryItem::new(eid, field(e, "text", &ctx)?, Some(field(e, "score", &ctx)?)),
            Task::Lamp7 => HistoryItem::new(eid, field(e, "text", &ctx)?, None),
        };
        profile.push(item);
    }
    Ok(LampRecord {
        gold: v.get("output").and_then(scalar_string),
        id,
        input,
        profile,
        task,
    })
}

/// Parses one LaMP question object `{id, input, profile, [output]}`.
pub fn parse_lamp_record(json_text: &str, task: Task) -> Result<LampRecord, EvalError> {
    let v: Value = serde_json::from_str(json_text).map_err(|e| EvalError::Json(e.to_string()))?;
    record_from_value(&v, task)
}

/// Parses a LaMP questions file: a JSON array or JSON Lines.
pub fn parse_lamp_file(text: &str, task: Task) -> Result<Vec<LampRecord>, EvalError> {
    if text.trim_start().starts_with('[') {
        let v: Vec<Value> = serde_json::from_str(text).map_err(|e| EvalError::Json(e.to_string()))?;
        return v.iter().map(|r| record_from_value(r, task)).collect();
    }
    jsonl_lines(text)
        .map(|(line, raw)| {
            let v: Value = serde_json::from_str(raw).map_err(|e| EvalError::Parse {
                line,
                message: e.to_string(),
            })?;
            record_from_value(&v, task)
        })
        .collect()
}

/// Reads gold outputs from LaMP's `{"golds":[{id,output}]}` layout, a bare
/// array of `{id,output}`, or JSON Lines of the same.
pub fn parse_gold_file(text: &str) -> Result<BTreeMap<String, String>, EvalError> {
    let entries: Vec<Value> = match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(o)) => match o.get("golds") {
            Some(Value::Array(a)) => a.clone(),
            _ => vec![Value::Object(o)],
        },
        Ok(Value::Array(a)) => a,
        Ok(_) => return Err(EvalError::Json("expected an object or array".into())),
        Err(_) => jsonl_lines(text)
            .map(|(line, raw)| {
                serde_json::from_str(raw).map_err(|e| EvalError::Parse {
                    line,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?,
    };
    entries
        .iter()
        .map(|e| {
            let id = field(e, "id", "<gold>")?;
            let output = field(e, "output", &id)?;
            Ok((id, output))
        })
        .collect()
}

/// A generated output for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub output: String,
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, EvalError> {
    jsonl_lines(text)
        .map(|(line, raw)| {
            serde_json::from_str(raw).map_err(|e| EvalError::Parse {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

/// First standalone digit 1..=5, else `(3, false)`.
pub fn parse_rating(output: &str) -> (u8, bool) {
    let chars: Vec<char> = output.chars().collect();
    for (i, c) in chars.iter().enumerate() {
        let standalone = (i == 0 || !chars[i - 1].is_alphanumeric())
            && chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        if standalone && ('1'..='5').contains(c) {
            return (*c as u8 - b'0', true);
        }
    }
    (3, false)
}

fn check_lengths(preds: usize, golds: usize) -> Result<(), EvalError> {
    if preds != golds {
        return Err(EvalError::LengthMismatch { preds, golds });
    }
    if preds == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn norm_label(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn accuracy<S: AsRef<str>>(preds: &[S], golds: &[S]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| norm_label(p.as_ref()) == norm_label(g.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-label F1 over every label seen in either list.
pub fn macro_f1<S: AsRef<str>>(preds: &[S], golds: &[S]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let p: Vec<String> = preds.iter().map(|s| norm_label(s.as_ref())).collect();
    let g: Vec<String> = golds.iter().map(|s| norm_label(s.as_ref())).collect();
    let labels: BTreeSet<&String> = p.iter().chain(&g).collect();
    let mut sum = 0.0;
    for label in &labels {
        let tp = p.iter().zip(&g).filter(|(a, b)| a == label && b == label).count() as f64;
        let pred_n = p.iter().filter(|a| a == label).count() as f64;
        let gold_n = g.iter().filter(|b| b == label).count() as f64;
        let denom = pred_n + gold_n;
        sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(sum / labels.len() as f64)
}

pub fn mae(preds: &[i64], golds: &[i64]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let s: i64 = preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum();
    Ok(s as f64 / preds.len() as f64)
}

pub fn rmse(preds: &[i64], golds: &[i64]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let s: i64 = preds.iter().zip(golds).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((s as f64 / preds.len() as f64).sqrt())
}

/// Lowercased whitespace tokens with leading and trailing punctuation
/// stripped; tokens left empty are dropped.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn f1(overlap: f64, cand: usize, reference: usize) -> f64 {
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / cand as f64;
    let r = overlap / reference as f64;
    2.0 * p * r / (p + r)
}

fn empty_case(c: &[String], r: &[String]) -> Option<f64> {
    match (c.is_empty(), r.is_empty()) {
        (true, true) => Some(1.0),
        (true, false) | (false, true) => Some(0.0),
        _ => None,
    }
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    if let Some(v) = empty_case(&c, &r) {
        return v;
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for t in &c {
        counts.entry(t).or_default().0 += 1;
    }
    for t in &r {
        counts.entry(t).or_default().1 += 1;
    }
    let overlap: usize = counts.values().map(|(a, b)| a.min(b)).copied().sum();
    f1(overlap as f64, c.len(), r.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    if let Some(v) = empty_case(&c, &r) {
        return v;
    }
    f1(lcs_len(&c, &r) as f64, c.len(), r.len())
}

/// Scores for one task; metrics that do not apply to the task are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<f64>,
    #[serde(rename = "rougeL", skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    pub n: usize,
    pub parse_failures: usize,
}

/// Scores predictions against golds; every gold id needs a prediction.
pub fn evaluate(task: Task, preds: &[Prediction], golds: &BTreeMap<String, String>) -> Result<MetricReport, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let by_id: BTreeMap<&str, &str> = preds.iter().map(|p| (p.id.as_str(), p.output.as_str())).collect();
    let mut outs = Vec::with_capacity(golds.len());
    let mut refs = Vec::with_capacity(golds.len());
    for (id, gold) in golds {
        let out = by_id.get(id.as_str()).ok_or_else(|| EvalError::MissingPrediction(id.clone()))?;
        outs.push(*out);
        refs.push(gold.as_str());
    }
    let mut report = MetricReport {
        task,
        accuracy: None,
        macro_f1: None,
        mae: None,
        rmse: None,
        rouge1: None,
        rouge_l: None,
        n: golds.len(),
        parse_failures: 0,
    };
    match task {
        Task::Lamp2 => {
            report.accuracy = Some(accuracy(&outs, &refs)?);
            report.macro_f1 = Some(macro_f1(&outs, &refs)?);
        }
        Task::Lamp3 => {
            let mut p = Vec::with_capacity(outs.len());
            for o in &outs {
                let (r, ok) = parse_rating(o);
                report.parse_failures += usize::from(!ok);
                p.push(i64::from(r));
            }
            let g = refs
                .iter()
                .map(|s| match s.trim().parse::<i64>() {
                    Ok(v) if (1..=5).contains(&v) => Ok(v),
                    _ => Err(EvalError::BadGold((*s).to_owned())),
                })
                .collect::<Result<Vec<_>, _>>()?;
            report.mae = Some(mae(&p, &g)?);
            report.rmse = Some(rmse(&p, &g)?);
        }
        Task::Lamp7 => {
            let n = outs.len() as f64;
            report.rouge1 = Some(outs.iter().zip(&refs).map(|(c, r)| rouge1(c, r)).sum::<f64>() / n);
            report.rouge_l = Some(outs.iter().zip(&refs).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / n);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lamp_records() {
        let r2 = parse_lamp_record(
            r#"{"id":"110","input":"Which tag does this movie relate to? desc","profile":[{"id":"1","tag":"comedy","description":"d1"},{"id":"2","tag":"action","description":"d2"}]}"#,
            Task::Lamp2,
        )
        .unwrap();
        assert_eq!(r2.profile.len(), 2);
        assert_eq!(r2.profile[0].label.as_deref(), Some("comedy"));
        assert_eq!(r2.profile[1].text, "d2");
        let r3 = parse_lamp_record(r#"{"id":"3","input":"x","profile":[{"id":"a","text":"great","score":"5"}]}"#, Task::Lamp3).unwrap();
        assert_eq!(r3.profile[0].label.as_deref(), Some("5"));
        let n3 = parse_lamp_record(r#"{"id":"3","input":"x","profile":[{"id":"a","text":"great","score":4}]}"#, Task::Lamp3).unwrap();
        assert_eq!(n3.profile[0].label.as_deref(), Some("4"));
        let empty = parse_lamp_record(r#"{"id":"4","input":"x","profile":[]}"#, Task::Lamp7).unwrap();
        assert!(empty.profile.is_empty());
        let err = parse_lamp_record(r#"{"id":"5","input":"x","profile":[{"id":"a","text":"t"}]}"#, Task::Lamp3).unwrap_err();
        assert!(err.to_string().contains("score"), "{err}");
        assert!(parse_lamp_record(r#"{"id":"5"}"#, Task::Lamp7).unwrap_err().to_string().contains("input"));
    }

    #[test]
    fn lamp_files_and_golds() {
        let arr = r#"[{"id":"1","input":"a","profile":[]},{"id":"2","input":"b"}]"#;
        assert_eq!(parse_lamp_file(arr, Task::Lamp7).unwrap().len(), 2);
        let lines = "{\"id\":\"1\",\"input\":\"a\"}\n\n{\"id\":\"2\",\"input\":\"b\",\"output\":\"g\"}";
        let recs = parse_lamp_file(lines, Task::Lamp7).unwrap();
        assert_eq!(recs[1].gold.as_deref(), Some("g"));
        let g = parse_gold_file(r#"{"task":"LaMP_3","golds":[{"id":"1","output":"4"}]}"#).unwrap();
        assert_eq!(g["1"], "4");
        assert_eq!(parse_gold_file("{\"id\":\"1\",\"output\":\"a\"}\n{\"id\":\"2\",\"output\":\"b\"}").unwrap().len(), 2);
    }

    #[test]
    fn rating_parse() {
        assert_eq!(parse_rating("The score is 4."), (4, true));
        assert_eq!(parse_rating("five"), (3, false));
        assert_eq!(parse_rating("1 out of 5"), (1, true));
        assert_eq!(parse_rating("10 then 2"), (2, true));
        assert_eq!(parse_rating("rated 6/10, so 3"), (3, true));
        assert_eq!(parse_rating("v2 is 5"), (5, true));
        assert_eq!(parse_rating(""), (3, false));
    }

    #[test]
    fn classification_metrics() {
        let (p, g) = (["a", "a", "b"], ["a", "b", "b"]);
        assert!((accuracy(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((macro_f1(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(accuracy(&g, &g).unwrap(), 1.0);
        assert_eq!(macro_f1(&g, &g).unwrap(), 1.0);
        assert_eq!(accuracy(&["x", "y"], &["a", "b"]).unwrap(), 0.0);
        assert_eq!(accuracy(&[" Comedy "], &["comedy"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["a"], &["a", "b"]), Err(EvalError::LengthMismatch { preds: 1, golds: 2 }));
        assert_eq!(macro_f1::<&str>(&[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn regression_metrics() {
        assert!((mae(&[5, 3], &[4, 1]).unwrap() - 1.5).abs() < 1e-12);
        assert!((rmse(&[5, 3], &[4, 1]).unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!((mae(&[2, 4], &[2, 4]).unwrap(), rmse(&[2, 4], &[2, 4]).unwrap()), (0.0, 0.0));
        assert_eq!((mae(&[1], &[3]).unwrap(), rmse(&[1], &[3]).unwrap()), (2.0, 2.0));
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge1("a b c", "a b d") - 2.0 / 3.0).abs() < 1e-12);
        assert!((rouge_l("a c b", "a b c") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge1("Hello, world!", "hello world"), 1.0);
        assert_eq!(rouge_l("same words here", "same words here"), 1.0);
        assert_eq!(rouge1("", ""), 1.0);
        assert_eq!(rouge_l("", "x"), 0.0);
        assert_eq!(rouge1("a a a", "a"), 0.5);
        assert_eq!(rouge_tokens("  \"Quoted\" ... #tag! "), vec!["quoted", "tag"]);
    }

    fn preds(pairs: &[(&str, &str)]) -> Vec<Prediction> {
        pairs.iter().map(|(i, o)| Prediction { id: (*i).into(), output: (*o).into() }).collect()
    }

    fn golds(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(i, o)| ((*i).into(), (*o).into())).collect()
    }

    #[test]
    fn reports_carry_only_task_metrics() {
        let r2 = evaluate(Task::Lamp2, &preds(&[("1", "comedy"), ("2", "action")]), &golds(&[("1", "comedy"), ("2", "drama")])).unwrap();
        assert_eq!(r2.accuracy, Some(0.5));
        assert!(r2.mae.is_none() && r2.rouge1.is_none());
        let r3 = evaluate(Task::Lamp3, &preds(&[("1", "I give it 5"), ("2", "no idea")]), &golds(&[("1", "4"), ("2", "1")])).unwrap();
        assert_eq!(r3.parse_failures, 1);
        assert_eq!(r3.mae, Some(1.5));
        let r7 = evaluate(Task::Lamp7, &preds(&[("1", "a b c")]), &golds(&[("1", "a b d")])).unwrap();
        let json = serde_json::to_string(&r7).unwrap();
        assert!(json.contains("\"rougeL\"") && !json.contains("accuracy"));
        assert_eq!(
            evaluate(Task::Lamp7, &preds(&[]), &golds(&[("1", "x")])),
            Err(EvalError::MissingPrediction("1".into()))
        );
        assert!(matches!(
            evaluate(Task::Lamp3, &preds(&[("1", "4")]), &golds(&[("1", "4.5")])),
            Err(EvalError::BadGold(_))
        ));
    }
}
