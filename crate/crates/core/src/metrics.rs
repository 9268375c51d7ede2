//! Success rate, Dist-n diversity, reference perplexity and report files.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::lm::MarkovLm;
use crate::vocab::TokenId;

/// Fraction of rewards at or above `threshold`.
pub fn success_rate(rewards: &[f64], threshold: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::InvalidInput("no generations to score".into()));
    }
    Ok(rewards.iter().filter(|&&r| r >= threshold).count() as f64 / rewards.len() as f64)
}

/// Mean over generations of `|distinct n-grams| / length`.
pub fn distinct_n(generations: &[Vec<TokenId>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("n-gram order must be at least 1".into()));
    }
    if generations.is_empty() {
        return Err(Error::InvalidInput("no generations".into()));
    }
    let mut total = 0.0;
    for g in generations {
        if g.len() < n {
            return Err(Error::InvalidInput(format!("generation of length {} is shorter than n = {n}", g.len())));
        }
        let distinct: HashSet<&[TokenId]> = g.windows(n).collect();
        total += distinct.len() as f64 / g.len() as f64;
    }
    Ok(total / generations.len() as f64)
}

/// [`distinct_n`] over the generations that have at least `n` tokens.
pub fn distinct_n_eligible(generations: &[Vec<TokenId>], n: usize) -> Result<f64> {
    let eligible: Vec<Vec<TokenId>> = generations.iter().filter(|g| g.len() >= n).cloned().collect();
    distinct_n(&eligible, n)
}

/// Corpus-level `exp(−Σ log p / Σ tokens)` of each continuation given its prompt.
pub fn perplexity(samples: &[(Vec<TokenId>, Vec<TokenId>)], reference: &MarkovLm) -> Result<f64> {
    let tokens: usize = samples.iter().map(|(_, g)| g.len()).sum();
    if tokens == 0 {
        return Err(Error::InvalidInput("no generated tokens to score".into()));
    }
    let logprob: f64 = samples
        .iter()
        .map(|(prompt, gen)| reference.conditional_logprob(prompt, gen))
        .sum();
    let ppl = (-logprob / tokens as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite {
            param: "perplexity".into(),
        });
    }
    Ok(ppl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub task: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub success: f64,
    pub ppl: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// Everything [`EvalReport::compute`] needs besides the generations.
#[derive(Debug, Clone)]
pub struct ReportLabels {
    pub model: String,
    pub task: String,
    pub k: usize,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn compute(
        labels: ReportLabels,
        samples: &[(Vec<TokenId>, Vec<TokenId>)],
        rewards: &[f64],
        reference: &MarkovLm,
        threshold: f64,
    ) -> Result<Self> {
        if samples.len() != rewards.len() {
            return Err(Error::Shape {
                expected: samples.len(),
                actual: rewards.len(),
            });
        }
        let gens: Vec<Vec<TokenId>> = samples.iter().map(|(_, g)| g.clone()).collect();
        Ok(EvalReport {
            model: labels.model,
            task: labels.task,
            k: labels.k,
            success: success_rate(rewards, threshold)?,
            ppl: perplexity(samples, reference)?,
            dist1: distinct_n_eligible(&gens, 1)?,
            dist2: distinct_n_eligible(&gens, 2)?,
            dist3: distinct_n_eligible(&gens, 3)?,
            n_samples: samples.len(),
            seed: labels.seed,
            config_digest: labels.config_digest,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// `.json` selects JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn reports_from_csv(text: &str) -> Result<Vec<EvalReport>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidInput(format!("csv: {e}")))
}

/// Writes one header row plus one row per report, or a JSON array.
pub fn emit_report(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => artifact::write_text(path, &reports_to_csv(reports)?),
        ReportFormat::Json => artifact::write_json(path, &reports),
    }
}
