//! JSON application config. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use duet_core::backends::{HashedEmbedder, HttpConfig, HttpEmbedder, HttpGenerator, MockGenerator, RetryPolicy};
use duet_core::prompting::TemplateSet;
use duet_core::referee::{Strategy, DEFAULT_DELTA};
use duet_core::{Embedder, Generator, PipelineConfig, RefereeConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub run_output: Option<PathBuf>,
    pub internal: Option<BackendSpec>,
    pub external: Option<BackendSpec>,
    pub judge: Option<BackendSpec>,
    pub embedder: Option<EmbedderSpec>,
    #[serde(default)]
    pub referee: RefereeSpec,
    pub retrieval_k: Option<usize>,
    pub char_budget: Option<usize>,
    pub per_arm_timeout_secs: Option<f64>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Mock {
        script: Option<PathBuf>,
        fallback: Option<String>,
        name: Option<String>,
    },
    Http(HttpSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSpec {
    #[serde(default)]
    pub base_url: String,
    pub model: String,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub max_concurrency: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderSpec {
    Hashed { dim: Option<usize> },
    Http(HttpSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefereeSpec {
    pub strategy: Strategy,
    pub delta: f64,
}

impl Default for RefereeSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Alignment,
            delta: DEFAULT_DELTA,
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: AppConfig =
            serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.index);
        fix(&mut self.templates);
        fix(&mut self.run_output);
        for spec in [&mut self.internal, &mut self.external, &mut self.judge].into_iter().flatten() {
            if let BackendSpec::Mock { script, .. } = spec {
                fix(script);
            }
        }
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        match &self.templates {
            Some(dir) => TemplateSet::load_dir(dir).with_context(|| format!("loading templates from {}", dir.display())),
            None => Ok(TemplateSet::default()),
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let internal = build_generator(self.internal.as_ref().context("config is missing `internal` backend")?)?;
        let external = build_generator(self.external.as_ref().context("config is missing `external` backend")?)?;
        let templates = self.templates()?;
        let referee = match self.referee.strategy {
            Strategy::Alignment => {
                let spec = self.embedder.clone().unwrap_or(EmbedderSpec::Hashed { dim: None });
                RefereeConfig::alignment(build_embedder(&spec)?, self.referee.delta)
            }
            Strategy::TextFeature => RefereeConfig::text_feature(self.referee.delta),
            Strategy::Summarize => {
                let judge = build_generator(self.judge.as_ref().context("summarize strategy needs a `judge` backend")?)?;
                let mut r = RefereeConfig::summarize(judge);
                r.delta = self.referee.delta;
                r
            }
        }
        .with_judge_template(templates.judge.clone());

        let mut cfg = PipelineConfig::new(internal, external, referee);
        cfg.templates = templates;
        if let Some(k) = self.retrieval_k {
            cfg.retrieval_k = k;
        }
        if let Some(b) = self.char_budget {
            cfg.char_budget = Some(b);
        }
        if let Some(secs) = self.per_arm_timeout_secs {
            cfg.per_arm_timeout = secs_to_duration(secs, "per_arm_timeout_secs")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn secs_to_duration(secs: f64, field: &str) -> Result<Duration> {
    if !(secs > 0.0 && secs.is_finite()) {
        bail!("{field} must be a positive number of seconds, got {secs}");
    }
    Ok(Duration::from_secs_f64(secs))
}

fn http_config(spec: &HttpSpec) -> Result<HttpConfig> {
    let mut cfg = HttpConfig::new(spec.base_url.clone(), spec.model.clone()).with_env();
    if cfg.base_url.is_empty() {
        bail!("http backend {:?} has no base_url and DUET_BASE_URL is unset", spec.model);
    }
    if let Some(t) = spec.timeout_secs {
        cfg.timeout = secs_to_duration(t, "timeout_secs")?;
    }
    if let Some(r) = spec.max_retries {
        cfg.retry = RetryPolicy {
            max_retries: r,
            ..cfg.retry
        };
    }
    if let Some(c) = spec.max_concurrency {
        cfg.max_concurrency = c;
    }
    Ok(cfg)
}

pub fn build_generator(spec: &BackendSpec) -> Result<Arc<dyn Generator>> {
    Ok(match spec {
        BackendSpec::Mock { script, fallback, name } => {
            let mut g = match script {
                Some(p) => MockGenerator::from_script_file(p)?,
                None => MockGenerator::new(Vec::new()),
            };
            if let Some(f) = fallback {
                g = g.with_fallback(f.clone());
            }
            if let Some(n) = name {
                g = g.with_name(n.clone());
            }
            Arc::new(g)
        }
        BackendSpec::Http(h) => Arc::new(HttpGenerator::new(http_config(h)?)?),
    })
}

pub fn build_embedder(spec: &EmbedderSpec) -> Result<Arc<dyn Embedder>> {
    Ok(match spec {
        EmbedderSpec::Hashed { dim } => {
            let dim = dim.unwrap_or(duet_core::backends::DEFAULT_EMBED_DIM);
            if dim == 0 {
                bail!("hashed embedder dim must be >= 1");
            }
            Arc::new(HashedEmbedder::new(dim))
        }
        EmbedderSpec::Http(h) => Arc::new(HttpEmbedder::new(http_config(h)?)?),
    })
}
