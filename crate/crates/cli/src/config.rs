//! Layered pipeline configuration: TOML file, then flags, then
//! `CHAMELEON_*` environment variables.

use std::path::Path;

use anyhow::{bail, Context, Result};
use chameleon_core::directions::{CcsConfig, DirectionMethod, DEFAULT_LAYER_COUNT};
use chameleon_core::editing::EditMode;
use chameleon_core::history::DEFAULT_K;
use chameleon_core::llm::RetryPolicy;
use serde::{Deserialize, Serialize};

use crate::error::{Failure, Kind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub base_url: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            chat_model: "mistral-7b-instruct".into(),
            embedding_model: "all-MiniLM-L6-v2".into(),
            temperature: 0.7,
            max_tokens: 256,
            max_in_flight: 4,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: usize,
    pub k_pca: Option<usize>,
    pub method: DirectionMethod,
    pub edit_mode: EditMode,
    pub m_layers: usize,
    pub seed: u64,
    pub ccs: CcsConfig,
    pub client: ClientConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            k_pca: None,
            method: DirectionMethod::Hybrid,
            edit_mode: EditMode::Both,
            m_layers: DEFAULT_LAYER_COUNT,
            seed: 0,
            ccs: CcsConfig::default(),
            client: ClientConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub k: Option<usize>,
    pub k_pca: Option<usize>,
    pub method: Option<DirectionMethod>,
    pub edit_mode: Option<EditMode>,
    pub m_layers: Option<usize>,
    pub seed: Option<u64>,
    pub base_url: Option<String>,
}

fn precondition(msg: String) -> anyhow::Error {
    Failure::new(Kind::Precondition, msg).into()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Failure::new(Kind::Io, format!("config: {e}")).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// File (or defaults), then flags, then environment.
    pub fn load(path: Option<&Path>, flags: &Overrides, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_flags(flags);
        cfg.apply_env(env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_flags(&mut self, f: &Overrides) {
        if let Some(v) = f.k {
            self.k = v;
        }
        if let Some(v) = f.k_pca {
            self.k_pca = Some(v);
        }
        if let Some(v) = f.method {
            self.method = v;
        }
        if let Some(v) = f.edit_mode {
            self.edit_mode = v;
        }
        if let Some(v) = f.m_layers {
            self.m_layers = v;
        }
        if let Some(v) = f.seed {
            self.seed = v;
        }
        if let Some(v) = &f.base_url {
            self.client.base_url = v.clone();
        }
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<()> {
        fn parsed<T: std::str::FromStr>(name: &str, raw: String) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            raw.trim()
                .parse()
                .map_err(|e| precondition(format!("{name}={raw:?}: {e}")))
        }
        let get = |name: &str| env(name).filter(|v| !v.is_empty());
        if let Some(v) = get("CHAMELEON_K") {
            self.k = parsed("CHAMELEON_K", v)?;
        }
        if let Some(v) = get("CHAMELEON_K_PCA") {
            self.k_pca = Some(parsed("CHAMELEON_K_PCA", v)?);
        }
        if let Some(v) = get("CHAMELEON_METHOD") {
            self.method = parsed("CHAMELEON_METHOD", v)?;
        }
        if let Some(v) = get("CHAMELEON_EDIT_MODE") {
            self.edit_mode = parsed("CHAMELEON_EDIT_MODE", v)?;
        }
        if let Some(v) = get("CHAMELEON_M_LAYERS") {
            self.m_layers = parsed("CHAMELEON_M_LAYERS", v)?;
        }
        if let Some(v) = get("CHAMELEON_SEED") {
            self.seed = parsed("CHAMELEON_SEED", v)?;
        }
        if let Some(v) = get("CHAMELEON_CCS_RESTARTS") {
            self.ccs.restarts = parsed("CHAMELEON_CCS_RESTARTS", v)?;
        }
        if let Some(v) = get("CHAMELEON_CCS_STEPS") {
            self.ccs.steps = parsed("CHAMELEON_CCS_STEPS", v)?;
        }
        if let Some(v) = get("CHAMELEON_CCS_LR") {
            self.ccs.lr = parsed("CHAMELEON_CCS_LR", v)?;
        }
        if let Some(v) = get("CHAMELEON_BASE_URL") {
            self.client.base_url = v;
        }
        if let Some(v) = get("CHAMELEON_CHAT_MODEL") {
            self.client.chat_model = v;
        }
        if let Some(v) = get("CHAMELEON_EMBEDDING_MODEL") {
            self.client.embedding_model = v;
        }
        if let Some(v) = get("CHAMELEON_TEMPERATURE") {
            self.client.temperature = parsed("CHAMELEON_TEMPERATURE", v)?;
        }
        if let Some(v) = get("CHAMELEON_MAX_IN_FLIGHT") {
            self.client.max_in_flight = parsed("CHAMELEON_MAX_IN_FLIGHT", v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k", self.k),
            ("m_layers", self.m_layers),
            ("client.max_in_flight", self.client.max_in_flight),
            ("client.max_tokens", self.client.max_tokens as usize),
            ("client.retry.max_attempts", self.client.retry.max_attempts as usize),
        ];
        for (name, v) in counts {
            if v == 0 {
                bail!(precondition(format!("{name} must be at least 1")));
            }
        }
        if self.k_pca == Some(0) {
            bail!(precondition("k_pca must be at least 1".into()));
        }
        self.ccs.validate().map_err(|e| precondition(e.to_string()))?;
        Ok(())
    }

    /// CCS settings carrying the pipeline seed.
    pub fn ccs_config(&self) -> CcsConfig {
        CcsConfig {
            seed: self.seed,
            ..self.ccs
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| ((*k).into(), (*v).into())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.k, c.m_layers, c.method, c.edit_mode), (10, 3, DirectionMethod::Hybrid, EditMode::Both));
        assert_eq!((c.ccs.restarts, c.ccs.steps, c.ccs.lr), (10, 1000, 0.01));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = PipelineConfig {
            k_pca: Some(4),
            ..PipelineConfig::default()
        };
        c.ccs.squared_confidence = true;
        c.client.retry.max_attempts = 2;
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn precedence_file_then_flags_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "k = 4\nm_layers = 2\nseed = 1\nmethod = \"svd\"\n").unwrap();
        let flags = Overrides { k: Some(6), seed: Some(2), ..Overrides::default() };
        let c = PipelineConfig::load(Some(&path), &flags, env(&[("CHAMELEON_SEED", "3")])).unwrap();
        assert_eq!((c.k, c.m_layers, c.seed, c.method), (6, 2, 3, DirectionMethod::Svd));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let flags = Overrides { k: Some(0), ..Overrides::default() };
        let err = PipelineConfig::load(None, &flags, env(&[])).unwrap_err();
        assert_eq!(crate::error::exit_code(&err), 3);
        let err = PipelineConfig::load(None, &Overrides::default(), env(&[("CHAMELEON_K", "ten")])).unwrap_err();
        assert_eq!(crate::error::exit_code(&err), 3);
        let err = PipelineConfig::load(None, &Overrides::default(), env(&[("CHAMELEON_CCS_LR", "-1")])).unwrap_err();
        assert_eq!(crate::error::exit_code(&err), 3);
    }
}
