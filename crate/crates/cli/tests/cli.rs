//! End-to-end tests of every subcommand through the built binary.

mod common;

use std::fs;

use chameleon_core::datagen::PreferenceCorpus;
use chameleon_core::editing::{act_file_name, read_act, ActRole, Bundle, SteeringProfile};
use chameleon_core::eval::WorldConfig;
use chameleon_core::linalg::Vector;
use common::*;
use serde_json::Value;

fn small_world(seed: u64) -> WorldConfig {
    WorldConfig {
        seed,
        dim: 16,
        n_pairs: 60,
        n_layers: 3,
        signal_layer: 1,
        n_queries: 20,
        ..WorldConfig::default()
    }
}

#[test]
fn select_history_single_item_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("h.jsonl");
    write(&input, "{\"user_id\":\"u\",\"id\":\"a\",\"text\":\"only item\"}\n");
    let out = dir.path().join("sel.jsonl");
    ok(&["select-history", "--input", p(&input), "--k", "10", "--provider", "mock", "--out", p(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);

    let (history, _) = lamp2_inputs(dir.path(), 1);
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for o in [&a, &b] {
        ok(&["select-history", "--input", p(&history), "--k", "3", "--provider", "mock", "--seed", "4", "--out", p(o)]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 3);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["projection_norm"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_input_exits_2_and_bad_k_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.jsonl");
    let r = run(&["select-history", "--input", "/nonexistent/h.jsonl", "--provider", "mock", "--out", p(&out)]);
    assert_eq!(code(&r), 2);
    let (history, _) = lamp2_inputs(dir.path(), 1);
    let r = run(&["select-history", "--input", p(&history), "--k", "0", "--provider", "mock", "--out", p(&out)]);
    assert_eq!(code(&r), 3);
    write(&dir.path().join("bad.jsonl"), "{not json\n");
    let r = run(&["select-history", "--input", p(&dir.path().join("bad.jsonl")), "--provider", "mock", "--out", p(&out)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn gen_prefs_discards_identical_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (history, queries) = lamp2_inputs(dir.path(), 5);
    let script = dir.path().join("script.json");
    write(&script, r#"[{"contains": "Query movie number 2 ", "response": "drama"}]"#);
    let out = dir.path().join("prefs.jsonl");
    ok(&[
        "gen-prefs", "--history", p(&history), "--queries", p(&queries), "--task", "lamp2", "--out", p(&out), "--mock",
        "--mock-script", p(&script), "--k", "3",
    ]);
    let corpus = PreferenceCorpus::from_jsonl(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(corpus.k(), 4);
    assert!(corpus.pairs.iter().all(|p| p.query_id != "q2"));
    assert!(corpus.warning.is_none());
}

#[test]
fn gen_prefs_all_duplicates_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let (history, queries) = lamp2_inputs(dir.path(), 3);
    let script = dir.path().join("script.json");
    write(&script, r#"[{"contains": "Your answer:", "response": "same"}]"#);
    let out = dir.path().join("prefs.jsonl");
    let r = run(&[
        "gen-prefs", "--history", p(&history), "--queries", p(&queries), "--task", "lamp2", "--out", p(&out), "--mock",
        "--mock-script", p(&script),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let corpus = PreferenceCorpus::from_jsonl(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(corpus.k(), 0);
    assert!(corpus.warning.is_some());
}

#[test]
fn recorded_run_replays_offline() {
    let dir = tempfile::tempdir().unwrap();
    let (history, queries) = lamp2_inputs(dir.path(), 4);
    let fixture = dir.path().join("fixture.jsonl");
    let (live, replayed) = (dir.path().join("live.jsonl"), dir.path().join("replayed.jsonl"));
    let common = ["--history", p(&history), "--queries", p(&queries), "--task", "lamp2", "--provider", "remote"];
    let mut args = vec!["gen-prefs", "--mock", "--record", p(&fixture), "--out", p(&live)];
    args.extend(common);
    ok(&args);
    let mut args = vec!["gen-prefs", "--replay", p(&fixture), "--out", p(&replayed)];
    args.extend(common);
    ok(&args);
    assert_eq!(fs::read(&live).unwrap(), fs::read(&replayed).unwrap());

    let sub = dir.path().join("other");
    fs::create_dir(&sub).unwrap();
    let (_, other_queries) = lamp2_inputs(&sub, 5);
    let r = run(&[
        "gen-prefs", "--replay", p(&fixture), "--history", p(&history), "--queries", p(&other_queries), "--task", "lamp2",
        "--provider", "remote", "--seed", "9", "--out", p(&dir.path().join("miss.jsonl")),
    ]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn unreachable_service_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (history, queries) = lamp2_inputs(dir.path(), 2);
    let cfg = dir.path().join("c.toml");
    write(&cfg, "[client]\nbase_url = \"http://127.0.0.1:9/v1\"\ntimeout_secs = 2\n[client.retry]\nmax_attempts = 1\ninitial_backoff_ms = 1\nmax_backoff_ms = 1\nmultiplier = 1.0\n");
    let r = run(&[
        "gen-prefs", "--config", p(&cfg), "--history", p(&history), "--queries", p(&queries), "--task", "lamp2",
        "--out", p(&dir.path().join("o.jsonl")),
    ]);
    assert_eq!(code(&r), 4, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn fit_selects_signal_layer_and_methods_share_theta_p() {
    let dir = tempfile::tempdir().unwrap();
    let (_, acts, prefs) = synthetic_user(dir.path(), &small_world(1));
    let cfg = quick_config(dir.path());
    let profile = |method: &str| {
        let out = dir.path().join(format!("{method}.json"));
        ok(&["fit", "--config", p(&cfg), "--prefs", p(&prefs), "--activations", p(&acts), "--method", method, "--m", "1", "--out", p(&out)]);
        SteeringProfile::read(&out).unwrap()
    };
    let hybrid = profile("hybrid");
    assert_eq!(hybrid.selected_layers.selected, vec![1]);
    assert_eq!(hybrid.created_from.k, 60);
    let svd = profile("svd");
    for (l, pair) in &hybrid.pairs {
        assert_eq!(pair.theta_p, svd.pairs[l].theta_p);
    }
    assert_ne!(hybrid.pairs[&1].theta_n, svd.pairs[&1].theta_n);
}

#[test]
fn fit_rejects_dim_mismatch_naming_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let (_, acts, prefs) = synthetic_user(dir.path(), &small_world(2));
    let other = chameleon_core::eval::gen_synthetic_world(&WorldConfig { dim: 8, ..small_world(2) }).unwrap();
    let mut bundle = Bundle::read(&acts).unwrap();
    for role in [ActRole::Personalized, ActRole::Neutral] {
        bundle.insert(role, other.users[0].bundle.batches[&(2, role)].clone());
    }
    bundle.write(&acts).unwrap();
    let r = run(&["fit", "--prefs", p(&prefs), "--activations", p(&acts), "--out", p(&dir.path().join("p.json"))]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("layer 2"));
}

#[test]
fn edit_passes_through_and_orthogonalizes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, acts, prefs) = synthetic_user(dir.path(), &small_world(3));
    let cfg = quick_config(dir.path());
    let profile = dir.path().join("profile.json");
    ok(&["fit", "--config", p(&cfg), "--prefs", p(&prefs), "--activations", p(&acts), "--m", "1", "--out", p(&profile)]);
    let out = dir.path().join("edited");
    ok(&["edit", "--activations", p(&acts), "--profile", p(&profile), "--out", p(&out)]);
    let prof = SteeringProfile::read(&profile).unwrap();
    for l in 0..3u32 {
        let name = act_file_name(l, ActRole::Query);
        if prof.is_selected(l) {
            let theta_n = &prof.pairs[&l].theta_n;
            let edited = read_act(&out.join(&name)).unwrap();
            for i in 0..edited.rows() {
                let x = edited.data.row_vector(i);
                let limit = 1e-5 * x.norm();
                assert!(x.dot(theta_n).unwrap().abs() <= limit, "row {i}: {}", x.dot(theta_n).unwrap());
            }
        } else {
            assert_eq!(fs::read(acts.join(&name)).unwrap(), fs::read(out.join(&name)).unwrap());
        }
    }

    let none = dir.path().join("unselected");
    let mut only0 = Bundle::default();
    only0.insert(ActRole::Query, Bundle::read(&acts).unwrap().batches[&(0, ActRole::Query)].clone());
    only0.write(&none).unwrap();
    let out2 = dir.path().join("edited2");
    ok(&["edit", "--activations", p(&none), "--profile", p(&profile), "--out", p(&out2)]);
    let name = act_file_name(0, ActRole::Query);
    assert_eq!(fs::read(none.join(&name)).unwrap(), fs::read(out2.join(&name)).unwrap());
}

#[test]
fn edit_rejects_malformed_profile() {
    let dir = tempfile::tempdir().unwrap();
    let (_, acts, _) = synthetic_user(dir.path(), &small_world(4));
    let profile = dir.path().join("p.json");
    write(&profile, "{\"truncated\":");
    let r = run(&["edit", "--activations", p(&acts), "--profile", p(&profile), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&r), 2);
}

#[test]
fn eval_reports_metrics_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gold) = (dir.path().join("pred.jsonl"), dir.path().join("gold.json"));
    write(&pred, "{\"id\":\"1\",\"output\":\"5\"}\n{\"id\":\"2\",\"output\":\"3\"}\n");
    write(&gold, r#"{"golds":[{"id":"1","output":"4"},{"id":"2","output":"1"}]}"#);
    let out = ok(&["eval", "--task", "lamp3", "--pred", p(&pred), "--gold", p(&gold)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["mae"].as_f64().unwrap() - 1.5).abs() < 1e-9);
    assert!((v["rmse"].as_f64().unwrap() - 2.5f64.sqrt()).abs() < 1e-9);

    write(&pred, "{\"id\":\"1\",\"output\":\"a b c\"}\n");
    write(&gold, r#"[{"id":"1","output":"a b d"}]"#);
    let out = ok(&["eval", "--task", "lamp7", "--pred", p(&pred), "--gold", p(&gold)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["rouge1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-9);
    assert!(v.get("rougeL").is_some());
}

#[test]
fn simulate_report_schema_and_group_of_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let out = dir.path().join("r.json");
    let args = ["simulate", "--config", p(&cfg), "--users", "1", "--dim", "16", "--pairs", "60", "--layers", "3", "--signal-layer", "1", "--queries", "20", "--seed", "5", "--out", p(&out)];
    ok(&args);
    let text = fs::read_to_string(&out).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["group", "individual", "settings", "world"]);
    assert_eq!(v["group"], v["individual"]);
    for key in ["mean_accuracy_after", "mean_accuracy_before", "signal_layer_selected", "users"] {
        assert!(v["group"].get(key).is_some(), "missing {key}");
    }
    let cos = v["individual"]["users"][0]["cos_p"].as_f64().unwrap();
    assert!(cos >= 0.95, "cos_p {cos}");
    ok(&args);
    assert_eq!(fs::read_to_string(&out).unwrap(), text);
}

#[test]
fn aggregate_concatenates_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let data = chameleon_core::eval::gen_synthetic_world(&WorldConfig { n_users: 2, ..small_world(6) }).unwrap();
    let paths: Vec<_> = data
        .users
        .iter()
        .map(|u| {
            let path = dir.path().join(format!("{}.jsonl", u.user_id));
            write(&path, &u.corpus().to_jsonl());
            path
        })
        .collect();
    let out = dir.path().join("g.jsonl");
    ok(&["aggregate", "--inputs", p(&paths[1]), p(&paths[0]), "--group-id", "team", "--out", p(&out)]);
    let g = PreferenceCorpus::from_jsonl(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!((g.subject_id.as_str(), g.k(), g.members.len()), ("team", 120, 2));
    assert_eq!(g.pairs[0].user_id, "user000");
    let r = run(&["aggregate", "--inputs", p(&paths[0]), p(&paths[0]), "--group-id", "team", "--out", p(&out)]);
    assert_eq!(code(&r), 3);
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (history, _) = lamp2_inputs(dir.path(), 1);
    let out = dir.path().join("sel.jsonl");
    let r = run_env(
        &["select-history", "--input", p(&history), "--k", "4", "--provider", "mock", "--out", p(&out)],
        &[("CHAMELEON_K", "2")],
    );
    assert!(r.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 2);
    let r = run_env(
        &["select-history", "--input", p(&history), "--provider", "mock", "--out", p(&out)],
        &[("CHAMELEON_METHOD", "magic")],
    );
    assert_eq!(code(&r), 3);
}

#[test]
fn serve_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, acts, prefs) = synthetic_user(dir.path(), &small_world(7));
    let profiles = dir.path().join("profiles");
    fs::create_dir(&profiles).unwrap();
    let cfg = quick_config(dir.path());
    ok(&["fit", "--config", p(&cfg), "--prefs", p(&prefs), "--activations", p(&acts), "--m", "1", "--out", p(&profiles.join("alice.json"))]);
    let server = Server::start(&profiles);
    let http = reqwest::blocking::Client::new();
    let url = format!("{}/v1/edit", server.url);
    let post = |body: String| http.post(&url).header("content-type", "application/json").body(body).send().unwrap();

    let r = post(r#"{"profile_id":"bob","layer":1,"vectors":[[1.0]]}"#.into());
    assert_eq!(r.status().as_u16(), 404);
    assert_eq!(post("{\"profile_id\":".into()).status().as_u16(), 400);
    assert_eq!(post(r#"{"profile_id":"alice","layer":1,"vectors":[[1.0, 2.0]]}"#.into()).status().as_u16(), 400);
    assert_eq!(post(r#"{"profile_id":"alice","layer":"one","vectors":[]}"#.into()).status().as_u16(), 400);

    let x: Vec<f32> = (0..16).map(|i| i as f32 * 0.25 - 1.0).collect();
    let r = post(serde_json::json!({"profile_id": "alice", "layer": 0, "vectors": [x]}).to_string());
    assert_eq!(r.status().as_u16(), 200);
    let v: Value = serde_json::from_str(&r.text().unwrap()).unwrap();
    let back: Vec<Vec<f32>> = serde_json::from_value(v["vectors"].clone()).unwrap();
    assert_eq!(back, vec![x.clone()]);

    let r = post(serde_json::json!({"profile_id": "alice", "layer": 1, "vectors": [x]}).to_string());
    let v: Value = serde_json::from_str(&r.text().unwrap()).unwrap();
    let back: Vec<Vec<f32>> = serde_json::from_value(v["vectors"].clone()).unwrap();
    let prof = SteeringProfile::read(&profiles.join("alice.json")).unwrap();
    let edited = Vector::from_f32(&back[0]).unwrap();
    assert!(edited.dot(&prof.pairs[&1].theta_n).unwrap().abs() < 1e-5);
}
