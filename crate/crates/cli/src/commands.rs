//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use chameleon_core::datagen::{build_corpus, parse_queries, CorpusConfig, PreferenceCorpus};
use chameleon_core::directions::fit_layers;
use chameleon_core::editing::{apply_profile, write_act, write_atomic, ActRole, Bundle, CreatedFrom, SteeringProfile};
use chameleon_core::eval::{evaluate, parse_gold_file, parse_predictions, simulate, FitSettings, WorldConfig};
use chameleon_core::group::{aggregate_corpora, GroupSpec};
use chameleon_core::history::{embed_history, select_top_k, ClientEmbedder, EmbeddingProvider, HashEmbedder, UserHistory};
use chameleon_core::json::to_canonical_string;
use chameleon_core::llm::{CompletionParams, HttpClient, LanguageModel, MockLlm, Recorder, ReplayClient, ScriptRule};

use crate::config::{Overrides, PipelineConfig};
use crate::error::{io_failure, precondition};
use crate::{Cli, Command, EmbedArgs, Provider, SimulateArgs};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Canonical JSON plus a trailing newline, to `out` or stdout.
fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = to_canonical_string(value)?;
    text.push('\n');
    match out {
        Some(p) => write_text(p, &text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

struct Session<'a> {
    cli: &'a Cli,
    config: PipelineConfig,
}

impl Session<'_> {
    /// The model behind generation and remote embeddings, honouring
    /// --replay and --record.
    fn client(&self, mock: Option<Vec<ScriptRule>>, mock_dim: usize) -> Result<Arc<dyn LanguageModel>> {
        let c = &self.config.client;
        let base: Arc<dyn LanguageModel> = if let Some(path) = &self.cli.replay {
            Arc::new(ReplayClient::open(path).map_err(|e| io_failure(e.to_string()))?)
        } else if let Some(rules) = mock {
            Arc::new(MockLlm::new(self.config.seed, mock_dim).with_rules(rules))
        } else {
            let key = std::env::var(&c.api_key_env).ok().filter(|k| !k.is_empty());
            Arc::new(HttpClient::new(
                c.base_url.clone(),
                key,
                c.retry.clone(),
                c.max_in_flight,
                Duration::from_secs(c.timeout_secs),
            )?)
        };
        match &self.cli.record {
            Some(path) => {
                let rec = Recorder::create(base, path).with_context(|| format!("creating {}", path.display()))?;
                Ok(Arc::new(rec))
            }
            None => Ok(base),
        }
    }

    fn embedder(
        &self,
        args: &EmbedArgs,
        mock_default: bool,
        client: impl FnOnce() -> Result<Arc<dyn LanguageModel>>,
    ) -> Result<Box<dyn EmbeddingProvider>> {
        let provider = args.provider.unwrap_or(if mock_default { Provider::Mock } else { Provider::Remote });
        Ok(match provider {
            Provider::Mock => {
                if args.embed_dim == 0 {
                    return Err(precondition("--embed-dim must be at least 1"));
                }
                Box::new(HashEmbedder {
                    dim: args.embed_dim,
                    seed: self.config.seed,
                })
            }
            Provider::Remote => Box::new(ClientEmbedder::connect(client()?, self.config.client.embedding_model.clone())?),
        })
    }

    fn params(&self) -> CompletionParams {
        let c = &self.config.client;
        CompletionParams::new(c.chat_model.clone(), c.temperature, c.max_tokens).with_seed(self.config.seed as i64)
    }
}

fn load_config(cli: &Cli, flags: Overrides) -> Result<PipelineConfig> {
    let flags = Overrides {
        seed: cli.seed,
        base_url: cli.base_url.clone(),
        ..flags
    };
    PipelineConfig::load(cli.config.as_deref(), &flags, |k| std::env::var(k).ok())
}

fn embed_overrides(e: &EmbedArgs) -> Overrides {
    Overrides {
        k: e.k,
        k_pca: e.k_pca,
        ..Overrides::default()
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let flags = match &cli.command {
        Command::SelectHistory { embed, .. } | Command::GenPrefs { embed, .. } => embed_overrides(embed),
        Command::Fit { method, m, edit_mode, .. }
        | Command::Simulate(SimulateArgs { method, m, edit_mode, .. }) => Overrides {
            method: *method,
            m_layers: *m,
            edit_mode: *edit_mode,
            ..Overrides::default()
        },
        _ => Overrides::default(),
    };
    let config = load_config(&cli, flags)?;
    let ctx = Session { cli: &cli, config };
    match &cli.command {
        Command::SelectHistory { input, embed, out } => select_history(&ctx, input, embed, out),
        Command::GenPrefs {
            history,
            queries,
            task,
            out,
            mock,
            mock_script,
            max_insight_chars,
            embed,
        } => {
            let rules = match (mock, mock_script) {
                (false, _) => None,
                (true, None) => Some(Vec::new()),
                (true, Some(p)) => Some(
                    serde_json::from_str::<Vec<ScriptRule>>(&read_text(p)?)
                        .with_context(|| format!("parsing mock script {}", p.display()))?,
                ),
            };
            gen_prefs(&ctx, history, queries, *task, out, rules, *max_insight_chars, embed)
        }
        Command::Fit { prefs, activations, out, .. } => fit(&ctx, prefs, activations, out),
        Command::Edit { activations, profile, out } => edit(activations, profile, out),
        Command::Eval { task, pred, gold, out } => {
            let preds = parse_predictions(&read_text(pred)?)?;
            let golds = parse_gold_file(&read_text(gold)?)?;
            emit_json(&evaluate(*task, &preds, &golds)?, out.as_deref())
        }
        Command::Simulate(args) => run_simulation(&ctx, args),
        Command::Serve { profiles, host, port } => crate::serve::serve(profiles, host, *port),
        Command::Aggregate { inputs, group_id, out } => aggregate(inputs, group_id, out),
    }
}

fn select_history(ctx: &Session, input: &Path, embed: &EmbedArgs, out: &Path) -> Result<()> {
    let history = UserHistory::from_jsonl(&read_text(input)?)?;
    let embedder = ctx.embedder(embed, false, || ctx.client(None, embed.embed_dim))?;
    let emb = embed_history(&history, embedder.as_ref(), ctx.config.client.max_in_flight)?;
    let selected = select_top_k(&history, &emb, ctx.config.k, ctx.config.k_pca)?;
    log::info!("selected {} of {} items for {}", selected.items.len(), history.items.len(), history.user_id);
    write_text(out, &selected.to_jsonl())
}

#[allow(clippy::too_many_arguments)]
fn gen_prefs(
    ctx: &Session,
    history: &Path,
    queries: &Path,
    task: chameleon_core::Task,
    out: &Path,
    mock: Option<Vec<ScriptRule>>,
    max_insight_chars: Option<usize>,
    embed: &EmbedArgs,
) -> Result<()> {
    let user = UserHistory::from_jsonl(&read_text(history)?)?;
    let queries = parse_queries(&read_text(queries)?, &user.user_id)?;
    if let Some(q) = queries.iter().find(|q| q.user_id != user.user_id) {
        return Err(precondition(format!(
            "query {} belongs to {}, not history user {}",
            q.id, q.user_id, user.user_id
        )));
    }
    let use_mock = mock.is_some();
    let client = ctx.client(mock, embed.embed_dim)?;
    let embedder = ctx.embedder(embed, use_mock, || Ok(client.clone()))?;
    let config = CorpusConfig {
        task,
        k: ctx.config.k,
        k_pca: ctx.config.k_pca,
        params: ctx.params(),
        concurrency: ctx.config.client.max_in_flight,
        max_insight_chars,
    };
    let build = build_corpus(&user, &queries, &config, embedder.as_ref(), client.as_ref())?;
    for f in &build.report.failures {
        log::warn!("query {} failed: {}", f.query_id, f.error);
    }
    if !build.report.discarded.is_empty() {
        log::info!("discarded {} identical pairs: {:?}", build.report.discarded.len(), build.report.discarded);
    }
    if let Some(w) = &build.corpus.warning {
        log::warn!("{}: {w}", build.corpus.subject_id);
    }
    log::info!("{}: K = {}", build.corpus.subject_id, build.corpus.k());
    write_text(out, &build.corpus.to_jsonl())
}

fn fit(ctx: &Session, prefs: &Path, activations: &Path, out: &Path) -> Result<()> {
    let corpus = PreferenceCorpus::from_jsonl(&read_text(prefs)?)?;
    let bundle = Bundle::read(activations)?;
    let layers = bundle.pair_activations(activations)?;
    if let Some(l) = layers.iter().find(|l| l.k() != corpus.k()) {
        return Err(precondition(format!(
            "layer {} has {} pair rows but the corpus has K = {}",
            l.layer,
            l.k(),
            corpus.k()
        )));
    }
    if let Some(l) = layers.iter().find(|l| l.dim() != layers[0].dim()) {
        return Err(precondition(format!(
            "layer {} has dim {} but layer {} has dim {}",
            l.layer,
            l.dim(),
            layers[0].layer,
            layers[0].dim()
        )));
    }
    let cfg = &ctx.config;
    let pairs = fit_layers(&layers, cfg.method, &cfg.ccs_config())?;
    let created_from = CreatedFrom {
        layout_version: corpus.layout_version,
        k: corpus.k(),
    };
    let profile = SteeringProfile::build(
        corpus.subject_id.clone(),
        created_from,
        cfg.method,
        cfg.edit_mode,
        pairs,
        cfg.m_layers,
    )?;
    for (l, loss) in &profile.selected_layers.reports {
        log::info!("layer {l}: fit loss {loss:.6}{}", if profile.is_selected(*l) { " (selected)" } else { "" });
    }
    profile.write(out)?;
    Ok(())
}

fn edit(activations: &Path, profile: &Path, out: &Path) -> Result<()> {
    let profile = SteeringProfile::read(profile)?;
    let bundle = Bundle::read(activations)?;
    let queries = bundle.queries();
    if queries.is_empty() {
        return Err(precondition(format!("{} has no layer_*_X.act files", activations.display())));
    }
    let edited = apply_profile(&queries, &profile)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for b in &edited {
        write_act(&out.join(chameleon_core::editing::act_file_name(b.layer, ActRole::Query)), b)?;
    }
    log::info!("edited {} of {} query layers", edited.iter().filter(|b| profile.is_selected(b.layer)).count(), edited.len());
    Ok(())
}

fn run_simulation(ctx: &Session, a: &SimulateArgs) -> Result<()> {
    let cfg = &ctx.config;
    let world = WorldConfig {
        seed: cfg.seed,
        n_users: a.users,
        dim: a.dim,
        n_pairs: a.pairs,
        separation: a.separation,
        noise_sigma: a.noise,
        n_layers: a.layers,
        signal_layer: a.signal_layer,
        neutral_overlap: a.overlap,
        cohesion: a.cohesion,
        n_queries: a.queries,
    };
    let settings = FitSettings {
        method: cfg.method,
        ccs: cfg.ccs_config(),
        m_layers: cfg.m_layers,
        edit_mode: cfg.edit_mode,
    };
    let report = simulate(&world, &settings)?;
    log::info!(
        "accuracy before {:.4}, individual {:.4}, group {:.4}",
        report.individual.mean_accuracy_before,
        report.individual.mean_accuracy_after,
        report.group.mean_accuracy_after
    );
    emit_json(&report, a.out.as_deref())
}

fn aggregate(inputs: &[std::path::PathBuf], group_id: &str, out: &Path) -> Result<()> {
    let corpora = inputs
        .iter()
        .map(|p| PreferenceCorpus::from_jsonl(&read_text(p)?).with_context(|| format!("parsing {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    GroupSpec::new(group_id, corpora.iter().map(|c| c.subject_id.clone()).collect())?;
    let group = aggregate_corpora(&corpora, group_id)?;
    if let Some(w) = &group.warning {
        log::warn!("{group_id}: {w}");
    }
    write_text(out, &group.to_jsonl())
}
