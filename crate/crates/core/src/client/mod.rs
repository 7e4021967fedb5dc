//! Querying models: prompt rendering, live and simulated backends, answer
//! matching, and the append-only response cache.

pub mod cache;
pub mod http;
pub mod limiter;
pub mod prompt;
pub mod simulator;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use cache::QueryCache;
pub use http::RetryPolicy;
pub use prompt::{default_templates, PromptTemplate, RenderedPrompt};
pub use simulator::{simulate_query, SimulatedModel, SimulatorLink};

use crate::corpus::{PrefixSample, TokenRule};
use crate::error::{ClientError, ConfigError, StorageError};
use http::Exchange;
use limiter::{InFlight, TokenBucket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Dense,
    Moe,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reference,
    #[default]
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedParams {
    pub pseudo_size: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    /// Base URL; `/chat/completions` is appended.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub credential_ref: Option<String>,
    /// Parameter count in billions, when public.
    #[serde(default)]
    pub known_size: Option<f64>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub role: Role,
    #[serde(default)]
    pub reasoning_disabled: bool,
    /// Extra top-level request fields, e.g. a provider's reasoning switch.
    #[serde(default)]
    pub extra_body: Option<serde_json::Value>,
    /// Answer from the built-in simulator instead of a live endpoint.
    #[serde(default)]
    pub simulated: Option<SimulatedParams>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let loc = || format!("models[{}]", self.model_id);
        if self.model_id.is_empty() {
            return Err(ConfigError::invalid("models", "empty model_id"));
        }
        if let Some(s) = self.known_size {
            if !(s.is_finite() && s > 0.0) {
                return Err(ConfigError::invalid(loc(), "known_size must be positive"));
            }
        }
        if self.role == Role::Reference {
            if self.known_size.is_none() {
                return Err(ConfigError::invalid(loc(), "reference models need known_size"));
            }
            if self.architecture != Architecture::Dense {
                return Err(ConfigError::invalid(loc(), "reference models must be dense"));
            }
        }
        match &self.simulated {
            Some(sim) if !(sim.pseudo_size.is_finite() && sim.pseudo_size > 0.0) => {
                Err(ConfigError::invalid(loc(), "simulated.pseudo_size must be positive"))
            }
            Some(_) => Ok(()),
            None if self.endpoint.is_none() => Err(ConfigError::invalid(loc(), "live models need an endpoint")),
            None => Ok(()),
        }
    }

    pub fn is_dense_reference(&self) -> bool {
        self.role == Role::Reference && self.architecture == Architecture::Dense && self.known_size.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryKey {
    pub model_id: String,
    pub text_id: String,
    pub position: usize,
    pub length: usize,
    pub template_id: u8,
}

impl fmt::Display for QueryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}@{}/l={}/t={}",
            self.model_id, self.text_id, self.position, self.length, self.template_id
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportStatus {
    Ok,
    Simulated,
    Failed,
}

/// One persisted exchange. Field order puts the key first in each JSONL line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub model_id: String,
    pub text_id: String,
    pub position: usize,
    pub length: usize,
    pub template_id: u8,
    pub raw_response: String,
    pub normalized_answer: String,
    pub correct: bool,
    /// Milliseconds since the Unix epoch; 0 for simulated answers.
    pub timestamp_ms: u64,
    pub transport_status: TransportStatus,
    pub attempts: u32,
}

impl QueryRecord {
    pub fn key(&self) -> QueryKey {
        QueryKey {
            model_id: self.model_id.clone(),
            text_id: self.text_id.clone(),
            position: self.position,
            length: self.length,
            template_id: self.template_id,
        }
    }

    pub fn from_response(
        key: QueryKey,
        raw: String,
        target: &str,
        status: TransportStatus,
        attempts: u32,
        timestamp_ms: u64,
        rule: &TokenRule,
    ) -> Self {
        let normalized_answer = normalize_answer(&raw, rule);
        let correct = answer_matches(&normalized_answer, target, rule);
        QueryRecord {
            model_id: key.model_id,
            text_id: key.text_id,
            position: key.position,
            length: key.length,
            template_id: key.template_id,
            raw_response: raw,
            normalized_answer,
            correct,
            timestamp_ms,
            transport_status: status,
            attempts,
        }
    }
}

/// First word of a response under the corpus normalization rule, or the
/// empty string when the response has no word.
pub fn normalize_answer(raw: &str, rule: &TokenRule) -> String {
    raw.split_whitespace()
        .map(|w| rule.normalize_word(w))
        .find(|w| !w.is_empty())
        .unwrap_or_default()
}

fn answer_matches(answer: &str, target: &str, rule: &TokenRule) -> bool {
    let answer = rule.normalize_word(answer);
    !answer.is_empty() && answer == rule.normalize_word(target)
}

/// A position counts as correct when any template's answer matches the target.
pub fn judge_correct(sample: &PrefixSample, answers: &[String], rule: &TokenRule) -> bool {
    answers.iter().any(|a| answer_matches(a, &sample.target, rule))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSettings {
    /// Output cap per completion.
    pub max_tokens: u32,
    pub retry: RetryPolicy,
    /// Concurrent requests allowed per endpoint.
    pub max_in_flight: usize,
    /// Token-bucket refill rate in requests/second; 0 disables pacing.
    pub rate_per_sec: f64,
    pub burst: u32,
    pub timeout_secs: u64,
    /// Re-send queries whose cached record is a terminal failure.
    pub retry_failed: bool,
}

impl Default for ClientSettings {
    fn default() -> Self {
        Self {
            max_tokens: 8,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            rate_per_sec: 0.0,
            burst: 1,
            timeout_secs: 60,
            retry_failed: false,
        }
    }
}

#[derive(Debug, Default)]
pub struct QueryStats {
    pub network_requests: AtomicU64,
    pub simulated_queries: AtomicU64,
    pub cache_hits: AtomicU64,
    pub failed: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub network_requests: u64,
    pub simulated_queries: u64,
    pub cache_hits: u64,
    pub failed: u64,
}

impl QueryStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            network_requests: self.network_requests.load(Ordering::Relaxed),
            simulated_queries: self.simulated_queries.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            failed: self.failed.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug)]
pub enum Responder {
    Live {
        url: String,
        api_key: Option<String>,
        extra_body: Option<serde_json::Value>,
        gate: Arc<InFlight>,
    },
    Simulated(Box<SimulatedModel>),
}

/// A model ready to be queried.
#[derive(Debug)]
pub struct BoundModel {
    pub spec: ModelSpec,
    responder: Responder,
}

impl BoundModel {
    pub fn id(&self) -> &str {
        &self.spec.model_id
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.responder, Responder::Simulated(_))
    }
}

/// Cache-first query executor shared by all workers.
#[derive(Debug)]
pub struct QueryEngine {
    cache: Mutex<QueryCache>,
    settings: ClientSettings,
    rule: TokenRule,
    offline: bool,
    bucket: TokenBucket,
    gates: Mutex<HashMap<String, Arc<InFlight>>>,
    http: OnceLock<reqwest::blocking::Client>,
    stats: QueryStats,
}

impl QueryEngine {
    pub fn new(cache: QueryCache, settings: ClientSettings, rule: TokenRule, offline: bool) -> Self {
        let bucket = TokenBucket::new(settings.burst, settings.rate_per_sec);
        Self {
            cache: Mutex::new(cache),
            settings,
            rule,
            offline,
            bucket,
            gates: Mutex::new(HashMap::new()),
            http: OnceLock::new(),
            stats: QueryStats::default(),
        }
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn rule(&self) -> &TokenRule {
        &self.rule
    }

    pub fn offline(&self) -> bool {
        self.offline
    }

    pub fn with_cache<R>(&self, f: impl FnOnce(&mut QueryCache) -> R) -> R {
        f(&mut self.cache.lock().expect("cache lock"))
    }

    pub fn into_cache(self) -> QueryCache {
        self.cache.into_inner().expect("cache lock")
    }

    /// Bind a model to its backend. Live models need reasoning disabled and,
    /// unless running offline, a credential present in the environment.
    pub fn bind(&self, spec: &ModelSpec, simulated: Option<SimulatedModel>) -> Result<BoundModel, ConfigError> {
        spec.validate()?;
        let responder = match simulated {
            Some(sim) => Responder::Simulated(Box::new(sim)),
            None => {
                if !spec.reasoning_disabled {
                    return Err(ConfigError::ReasoningEnabled {
                        model_id: spec.model_id.clone(),
                    });
                }
                let endpoint = spec
                    .endpoint
                    .clone()
                    .ok_or_else(|| ConfigError::invalid(format!("models[{}]", spec.model_id), "missing endpoint"))?;
                let api_key = match &spec.credential_ref {
                    Some(var) => match std::env::var(var) {
                        Ok(v) if !v.is_empty() => Some(v),
                        _ if self.offline => None,
                        _ => {
                            return Err(ConfigError::MissingCredential {
                                model_id: spec.model_id.clone(),
                                var: var.clone(),
                            })
                        }
                    },
                    None => None,
                };
                let gate = self
                    .gates
                    .lock()
                    .expect("gates lock")
                    .entry(endpoint.clone())
                    .or_insert_with(|| Arc::new(InFlight::new(self.settings.max_in_flight)))
                    .clone();
                Responder::Live {
                    url: http::completions_url(&endpoint),
                    api_key,
                    extra_body: spec.extra_body.clone(),
                    gate,
                }
            }
        };
        Ok(BoundModel {
            spec: spec.clone(),
            responder,
        })
    }

    fn http(&self) -> &reqwest::blocking::Client {
        self.http.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(self.settings.timeout_secs))
                .build()
                .expect("HTTP client")
        })
    }

    fn key(model: &BoundModel, sample: &PrefixSample, template: &PromptTemplate) -> QueryKey {
        QueryKey {
            model_id: model.spec.model_id.clone(),
            text_id: sample.text_id.clone(),
            position: sample.position,
            length: sample.length,
            template_id: template.template_id,
        }
    }

    fn lookup(&self, cache: &QueryCache, key: &QueryKey) -> Option<QueryRecord> {
        let rec = cache.get(key)?;
        if self.settings.retry_failed && rec.transport_status == TransportStatus::Failed && !self.offline {
            return None;
        }
        Some(rec.clone())
    }

    /// Answer without touching the cache.
    fn resolve(
        &self,
        model: &BoundModel,
        sample: &PrefixSample,
        template: &PromptTemplate,
    ) -> Result<QueryRecord, ClientError> {
        let key = Self::key(model, sample, template);
        match &model.responder {
            Responder::Simulated(sim) => {
                self.stats.simulated_queries.fetch_add(1, Ordering::Relaxed);
                Ok(simulate_query(sim, sample, template.template_id, &self.rule))
            }
            Responder::Live { .. } if self.offline => Err(ClientError::OfflineMiss {
                model_id: key.model_id,
                text_id: key.text_id,
                position: key.position,
                length: key.length,
                template_id: key.template_id,
            }),
            Responder::Live {
                url,
                api_key,
                extra_body,
                gate,
            } => {
                let prompt = template.render(&sample.prefix);
                let body = http::request_body(&model.spec.model_id, &prompt, self.settings.max_tokens, extra_body.as_ref());
                let _permit = gate.acquire();
                let exchange = http::send_with_retry(self.http(), url, api_key.as_deref(), &body, &self.settings.retry, &|| {
                    self.bucket.acquire();
                    self.stats.network_requests.fetch_add(1, Ordering::Relaxed);
                });
                let now = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0);
                match exchange {
                    Exchange::Answered { content, attempts } => Ok(QueryRecord::from_response(
                        key,
                        content,
                        &sample.target,
                        TransportStatus::Ok,
                        attempts,
                        now,
                        &self.rule,
                    )),
                    Exchange::Failed { error, attempts } => {
                        log::warn!("{key}: giving up after {attempts} attempts: {error}");
                        self.stats.failed.fetch_add(1, Ordering::Relaxed);
                        Ok(QueryRecord::from_response(
                            key,
                            String::new(),
                            &sample.target,
                            TransportStatus::Failed,
                            attempts,
                            now,
                            &self.rule,
                        ))
                    }
                    Exchange::Unreachable { error, .. } => Err(ClientError::Unreachable {
                        model_id: model.spec.model_id.clone(),
                        source: error,
                    }),
                }
            }
        }
    }

    /// Cache-first single query.
    pub fn query(
        &self,
        model: &BoundModel,
        sample: &PrefixSample,
        template: &PromptTemplate,
    ) -> Result<QueryRecord, ClientError> {
        let key = Self::key(model, sample, template);
        if let Some(rec) = self.with_cache(|c| self.lookup(c, &key)) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(rec);
        }
        let rec = self.resolve(model, sample, template)?;
        self.with_cache(|c| c.insert(rec.clone()).and_then(|_| c.flush()))?;
        Ok(rec)
    }

    /// Run a batch of queries. Misses are resolved concurrently for live
    /// models (bounded by the endpoint's in-flight cap) and appended to the
    /// cache in job order, so the cache file is independent of scheduling.
    pub fn query_batch(
        &self,
        model: &BoundModel,
        jobs: &[(&PrefixSample, &PromptTemplate)],
    ) -> Result<Vec<Result<QueryRecord, ClientError>>, StorageError> {
        let mut results: Vec<Option<Result<QueryRecord, ClientError>>> = Vec::with_capacity(jobs.len());
        let mut misses = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for (i, (sample, template)) in jobs.iter().enumerate() {
                match self.lookup(&cache, &Self::key(model, sample, template)) {
                    Some(rec) => results.push(Some(Ok(rec))),
                    None => {
                        results.push(None);
                        misses.push(i);
                    }
                }
            }
        }
        self.stats
            .cache_hits
            .fetch_add((jobs.len() - misses.len()) as u64, Ordering::Relaxed);
        if misses.is_empty() {
            return Ok(results.into_iter().map(|r| r.expect("filled")).collect());
        }

        let workers = match &model.responder {
            Responder::Live { gate, .. } if !self.offline => gate.limit().min(misses.len()),
            _ => 1,
        };
        let resolved: Vec<Result<QueryRecord, ClientError>> = if workers <= 1 {
            misses
                .iter()
                .map(|&i| self.resolve(model, jobs[i].0, jobs[i].1))
                .collect()
        } else {
            let next = AtomicUsize::new(0);
            let slots: Vec<Mutex<Option<Result<QueryRecord, ClientError>>>> =
                misses.iter().map(|_| Mutex::new(None)).collect();
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let m = next.fetch_add(1, Ordering::Relaxed);
                        if m >= misses.len() {
                            break;
                        }
                        let (sample, template) = jobs[misses[m]];
                        *slots[m].lock().expect("slot") = Some(self.resolve(model, sample, template));
                    });
                }
            });
            slots
                .into_iter()
                .map(|s| s.into_inner().expect("slot").expect("resolved"))
                .collect()
        };

        self.with_cache(|cache| {
            for r in resolved.iter().flatten() {
                cache.insert(r.clone())?;
            }
            cache.flush()
        })?;
        for (&i, r) in misses.iter().zip(resolved) {
            results[i] = Some(r);
        }
        Ok(results.into_iter().map(|r| r.expect("filled")).collect())
    }
}
