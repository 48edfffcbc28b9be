//! JSON-over-HTTP prompt generator client.

use std::time::Duration;

use brainroi_core::ipo::{validate_prompt, GeneratorConfig, PromptCandidate, PromptGenerator};
use brainroi_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize)]
pub struct GenerateRequest<'a> {
    pub instruction: &'a str,
    pub pool: Vec<&'a str>,
    pub k: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

#[derive(Debug, Deserialize)]
pub struct GenerateResponse {
    pub prompts: Vec<String>,
}

/// Asks a remote service for new prompts with a single POST per iteration.
pub struct HttpGenerator {
    endpoint: String,
    instruction: String,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(endpoint: impl Into<String>, instruction: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        HttpGenerator {
            endpoint: endpoint.into(),
            instruction: instruction.into(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

/// POST the pool to `endpoint` and validate the returned prompts.
pub fn http_generate(
    agent: &ureq::Agent,
    endpoint: &str,
    instruction: &str,
    pool: &[PromptCandidate],
    k: usize,
    cfg: &GeneratorConfig,
) -> Result<Vec<String>> {
    let body = GenerateRequest {
        instruction,
        pool: pool.iter().map(|c| c.text.as_str()).collect(),
        k,
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        max_new_tokens: cfg.max_new_tokens,
    };
    let transport = |what: &str, e: &dyn std::fmt::Display| Error::Transport(format!("{endpoint}: {what}: {e}"));
    let response = agent.post(endpoint).send_json(&body).map_err(|e| transport("request failed", &e))?;
    let parsed: GenerateResponse = response
        .into_body()
        .read_json()
        .map_err(|e| transport("malformed response", &e))?;
    if parsed.prompts.len() != k {
        return Err(Error::Protocol(format!("{endpoint} returned {} prompts, expected {k}", parsed.prompts.len())));
    }
    for p in &parsed.prompts {
        validate_prompt(p).map_err(|e| Error::Protocol(format!("{endpoint}: {e}")))?;
    }
    Ok(parsed.prompts)
}

impl PromptGenerator for HttpGenerator {
    fn generate(&mut self, pool: &[PromptCandidate], k: usize, cfg: &GeneratorConfig) -> Result<Vec<String>> {
        http_generate(&self.agent, &self.endpoint, &self.instruction, pool, k, cfg)
    }
}
