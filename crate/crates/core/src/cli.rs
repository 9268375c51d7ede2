//! The `steerlm` command line.
//!
//! ```text
//! steerlm <command> --config FILE [--trace] [--unsteered] [--key VALUE | --section.key VALUE ...]
//! ```
//!
//! Exit status: 0 success, 1 usage or configuration, 2 I/O or incompatible
//! artifact, 3 numeric or check failure, 4 remote scorer failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::attribute::{DfaAttribute, LexiconScorer, RewardModel};
use crate::config::{derive_seed, RewardKind, RunConfig};
use crate::critic::{fit_epoch, prepare_episodes, steps_per_epoch, Critic, FeatureSpec, LossRecord, OptimizerState};
use crate::error::{Error, Result};
use crate::lm::{train_lm, LmCheckpoint, MarkovLm};
use crate::metrics::{emit_report, EvalReport, ReportFormat, ReportLabels};
use crate::oracle::{build_oracle, enumerate_check, ENUMERATION_CAPACITY};
use crate::rollout::{collect_rollouts, Trajectory};
use crate::steer::{generate_batch, steer_distribution, Generation, RenormMode, SteerConfig, ValueFn, ValueSource};
use crate::vocab::{build_vocab, load_corpus, tokenize, PromptSet, TokenSequence, Vocabulary};

pub const USAGE: &str = "usage: steerlm <train-lm|train-critic|generate|evaluate|oracle-check|sweep-k> \
--config FILE [--trace] [--unsteered] [--key VALUE | --section.key VALUE ...]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainLm,
    TrainCritic,
    Generate,
    Evaluate,
    OracleCheck,
    SweepK,
}

impl Command {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "train-lm" => Command::TrainLm,
            "train-critic" => Command::TrainCritic,
            "generate" => Command::Generate,
            "evaluate" => Command::Evaluate,
            "oracle-check" => Command::OracleCheck,
            "sweep-k" => Command::SweepK,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub trace: bool,
    pub unsteered: bool,
    pub overrides: Vec<(String, String)>,
}

/// Parses the arguments after the program name.
pub fn parse_args<S: AsRef<str>>(args: &[S]) -> Result<Invocation> {
    let usage = |msg: String| Error::InvalidInput(format!("{msg}\n{USAGE}"));
    let mut it = args.iter().map(AsRef::as_ref);
    let name = it.next().ok_or_else(|| usage("missing command".into()))?;
    let command = Command::parse(name).ok_or_else(|| usage(format!("unknown command `{name}`")))?;
    let mut config = None;
    let mut trace = false;
    let mut unsteered = false;
    let mut overrides = Vec::new();
    while let Some(arg) = it.next() {
        match arg {
            "--trace" => trace = true,
            "--unsteered" => unsteered = true,
            "--config" => config = Some(PathBuf::from(it.next().ok_or_else(|| usage("--config needs a value".into()))?)),
            flag if flag.len() > 2 && flag.starts_with("--") => {
                let value = it.next().ok_or_else(|| usage(format!("{flag} needs a value")))?;
                overrides.push((flag[2..].to_owned(), value.to_owned()));
            }
            other => return Err(usage(format!("unknown argument `{other}`"))),
        }
    }
    let config = config.ok_or_else(|| usage("--config is required".into()))?;
    Ok(Invocation {
        command,
        config,
        trace,
        unsteered,
        overrides,
    })
}

/// Runs one command and returns the process exit status. Errors go to stderr.
pub fn run_command<S: AsRef<str>>(args: &[S]) -> i32 {
    match parse_args(args).and_then(|inv| run(&inv)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(inv: &Invocation) -> Result<()> {
    let (cfg, digest) = RunConfig::load(&inv.config, &inv.overrides)?;
    let ctx = Context {
        cfg,
        digest,
        trace: inv.trace,
        unsteered: inv.unsteered,
    };
    match inv.command {
        Command::TrainLm => ctx.train_lm(),
        Command::TrainCritic => ctx.train_critic(),
        Command::Generate => ctx.generate(),
        Command::Evaluate => ctx.evaluate(),
        Command::OracleCheck => ctx.oracle_check(),
        Command::SweepK => ctx.sweep_k(),
    }
}

struct Context {
    cfg: RunConfig,
    digest: String,
    trace: bool,
    unsteered: bool,
}

#[derive(Serialize, Deserialize)]
struct RolloutRow {
    #[serde(flatten)]
    trajectory: Trajectory,
    config_digest: String,
}

#[derive(Serialize)]
struct LossRow<'a> {
    epoch: usize,
    step: usize,
    loss: f64,
    config_digest: &'a str,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    artifact::write_text(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::config(key, "required by this command"))
}

impl Context {
    fn save_lm(&self, lm: &MarkovLm, path: &Path) -> Result<()> {
        let mut ckpt = lm.to_checkpoint();
        ckpt.config_digest = Some(self.digest.clone());
        artifact::write_json(path, &ckpt)
    }

    fn load_lm(&self) -> Result<MarkovLm> {
        let ckpt: LmCheckpoint = artifact::read_json(&self.cfg.paths.lm_checkpoint)?;
        MarkovLm::from_checkpoint(ckpt)
    }

    fn load_reference(&self, vocab: &Vocabulary) -> Result<MarkovLm> {
        let reference = MarkovLm::from_checkpoint(artifact::read_json(&self.cfg.paths.reference_lm)?)?;
        if reference.vocab().hash() != vocab.hash() {
            return Err(Error::Incompatible(format!(
                "{}: reference LM vocabulary {} differs from {}",
                self.cfg.paths.reference_lm.display(),
                reference.vocab().hash(),
                vocab.hash()
            )));
        }
        Ok(reference)
    }

    fn prompts(&self, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
        Ok(PromptSet::load(required(&self.cfg.paths.prompts, "paths.prompts")?, vocab)?.prompts)
    }

    fn dfa(&self, vocab: &Vocabulary) -> Result<DfaAttribute> {
        DfaAttribute::load(required(&self.cfg.paths.dfa, "paths.dfa")?, vocab)
    }

    fn reward_model(&self, vocab: &Vocabulary) -> Result<RewardModel> {
        let r = &self.cfg.reward;
        Ok(match r.kind {
            RewardKind::Dfa => RewardModel::Dfa(self.dfa(vocab)?),
            RewardKind::Lexicon => RewardModel::Lexicon(LexiconScorer::load(
                required(&self.cfg.paths.lexicon_positive, "paths.lexicon_positive")?,
                required(&self.cfg.paths.lexicon_negative, "paths.lexicon_negative")?,
                vocab,
                r.lexicon_slope,
                r.lexicon_bias,
            )?),
            RewardKind::Remote => RewardModel::Remote(self.cfg.remote_config()?),
        })
    }

    fn train_lm(&self) -> Result<()> {
        let lines = load_corpus(required(&self.cfg.paths.corpus, "paths.corpus")?)?;
        let vocab = build_vocab(&lines, self.cfg.lm.min_count)?;
        let corpus: Vec<TokenSequence> = lines.iter().map(|l| tokenize(l, &vocab)).collect();
        let order = self.cfg.lm.order;
        let lm = train_lm(&corpus, &vocab, order, self.cfg.lm.smoothing_k)?;
        let reference = train_lm(&corpus, &vocab, order + 1, self.cfg.lm.smoothing_k)?;
        self.save_lm(&lm, &self.cfg.paths.lm_checkpoint)?;
        self.save_lm(&reference, &self.cfg.paths.reference_lm)?;
        println!(
            "trained order-{order} LM on {} lines, |V| = {}, vocab {} -> {}",
            lines.len(),
            vocab.len(),
            vocab.hash(),
            self.cfg.paths.lm_checkpoint.display()
        );
        Ok(())
    }

    fn train_critic(&self) -> Result<()> {
        let lm = self.load_lm()?;
        let vocab = lm.vocab();
        let prompts = self.prompts(vocab)?;
        let reward = self.reward_model(vocab)?;
        let spec = FeatureSpec::new(vocab, lm.order(), self.cfg.rollout.horizon)?;
        let mut critic = Critic::init(spec, self.cfg.critic.hidden_dim, derive_seed(self.cfg.seed, "critic", 0));
        let mut opt = OptimizerState::new(critic.num_params(), self.cfg.adam_config());
        let gae = self.cfg.gae_config();
        let train = self.cfg.train_config();
        let rounds = if self.cfg.rollout.fresh_per_epoch { train.epochs } else { 1 };
        let mut all_rollouts = Vec::new();
        let mut log: Vec<LossRecord> = Vec::new();
        let mut episodes = Vec::new();
        let mut step = 0;
        for epoch in 0..train.epochs {
            if epoch < rounds {
                let trajs = collect_rollouts(&lm, &prompts, &self.cfg.rollout_config(epoch as u64), &reward)?;
                episodes = prepare_episodes(critic.spec(), &trajs);
                all_rollouts.extend(trajs);
            }
            let total = steps_per_epoch(episodes.len(), train.batch_size) * train.epochs;
            let records = fit_epoch(&mut critic, &mut opt, &episodes, &gae, &train, epoch, step, total)?;
            step += records.len();
            let mean = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
            println!("epoch {epoch}: mean loss {mean:.6}");
            log.extend(records);
        }
        let rows: Vec<RolloutRow> = all_rollouts
            .into_iter()
            .map(|trajectory| RolloutRow {
                trajectory,
                config_digest: self.digest.clone(),
            })
            .collect();
        artifact::write_jsonl(&self.cfg.paths.rollouts, &rows)?;
        critic.save(&self.cfg.paths.critic_checkpoint, Some(&opt), Some(&self.digest))?;
        let loss_rows: Vec<LossRow> = log
            .iter()
            .map(|r| LossRow {
                epoch: r.epoch,
                step: r.step,
                loss: r.loss,
                config_digest: &self.digest,
            })
            .collect();
        write_csv(&self.cfg.paths.loss_curve, &loss_rows)?;
        println!(
            "critic trained on {} rollouts -> {}",
            rows.len(),
            self.cfg.paths.critic_checkpoint.display()
        );
        Ok(())
    }

    /// The configured value function, or `None` for plain decoding.
    fn value_fn(&self, lm: &MarkovLm) -> Result<Option<Box<dyn ValueFn>>> {
        if self.unsteered {
            return Ok(None);
        }
        Ok(Some(match self.cfg.steer.value_source {
            ValueSource::Critic => {
                let (critic, _) = Critic::load(&self.cfg.paths.critic_checkpoint, lm.vocab())?;
                Box::new(critic)
            }
            ValueSource::Oracle => Box::new(build_oracle(lm, &self.dfa(lm.vocab())?, self.cfg.decode.max_len, 1.0)?),
        }))
    }

    fn model_label(&self) -> &'static str {
        match (self.unsteered, self.cfg.steer.value_source) {
            (true, _) => "base",
            (false, ValueSource::Critic) => "critic",
            (false, ValueSource::Oracle) => "oracle",
        }
    }

    fn decode_all(&self, lm: &MarkovLm, value_fn: Option<&dyn ValueFn>, steer: &SteerConfig) -> Result<Vec<Generation>> {
        let prompts = self.prompts(lm.vocab())?;
        let mut rows = generate_batch(
            lm,
            value_fn,
            &prompts,
            self.cfg.decode.samples_per_prompt,
            steer,
            &self.cfg.decode_strategy(),
            self.trace,
        )?;
        for row in &mut rows {
            row.model = self.model_label().to_owned();
            row.config_digest = Some(self.digest.clone());
        }
        Ok(rows)
    }

    fn generate(&self) -> Result<()> {
        let lm = self.load_lm()?;
        let value_fn = self.value_fn(&lm)?;
        let rows = self.decode_all(&lm, value_fn.as_deref(), &self.cfg.steer)?;
        artifact::write_jsonl(&self.cfg.paths.generations, &rows)?;
        println!("{} generations -> {}", rows.len(), self.cfg.paths.generations.display());
        Ok(())
    }

    fn report(&self, lm: &MarkovLm, reference: &MarkovLm, rows: &[Generation], k: usize, model: &str) -> Result<EvalReport> {
        let reward = self.reward_model(lm.vocab())?;
        let texts: Vec<Vec<_>> = rows
            .iter()
            .map(|g| g.prompt_ids.iter().chain(&g.output_ids).copied().collect())
            .collect();
        let rewards = reward.score(&texts, lm.vocab())?;
        let samples: Vec<_> = rows.iter().map(|g| (g.prompt_ids.clone(), g.output_ids.clone())).collect();
        let labels = ReportLabels {
            model: model.to_owned(),
            task: self.cfg.task.clone(),
            k,
            seed: self.cfg.seed,
            config_digest: self.digest.clone(),
        };
        EvalReport::compute(labels, &samples, &rewards, reference, self.cfg.reward.threshold)
    }

    fn evaluate(&self) -> Result<()> {
        let lm = self.load_lm()?;
        let reference = self.load_reference(lm.vocab())?;
        let rows: Vec<Generation> = artifact::read_jsonl(&self.cfg.paths.generations)?;
        if rows.is_empty() {
            return Err(Error::InvalidInput("generation dump is empty".into()));
        }
        let models: BTreeSet<&str> = rows.iter().map(|g| g.model.as_str()).collect();
        let model = models.into_iter().collect::<Vec<_>>().join("+");
        let report = self.report(&lm, &reference, &rows, self.cfg.steer.k, &model)?;
        let path = &self.cfg.paths.report;
        emit_report(std::slice::from_ref(&report), path, ReportFormat::from_path(path))?;
        println!(
            "success {:.4}  ppl {:.4}  dist1/2/3 {:.4}/{:.4}/{:.4}  n {} -> {}",
            report.success,
            report.ppl,
            report.dist1,
            report.dist2,
            report.dist3,
            report.n_samples,
            path.display()
        );
        Ok(())
    }

    fn sweep_k(&self) -> Result<()> {
        let lm = self.load_lm()?;
        let reference = self.load_reference(lm.vocab())?;
        let value_fn = self.value_fn(&lm)?;
        let mut reports = Vec::new();
        for &k in &self.cfg.sweep.k_values {
            let k = if k == 0 { lm.vocab_size() } else { k };
            let steer = self.cfg.steer.with_k(k);
            let rows = self.decode_all(&lm, value_fn.as_deref(), &steer)?;
            let report = self.report(&lm, &reference, &rows, k, self.model_label())?;
            println!("K = {k:>3}: success {:.4}  ppl {:.4}", report.success, report.ppl);
            reports.push(report);
        }
        let path = &self.cfg.paths.sweep_report;
        emit_report(&reports, path, ReportFormat::from_path(path))?;
        println!("{} rows -> {}", reports.len(), path.display());
        Ok(())
    }

    fn oracle_check(&self) -> Result<()> {
        let lm = self.load_lm()?;
        let dfa = self.dfa(lm.vocab())?;
        let prompts = self.prompts(lm.vocab())?;
        let horizon = self.cfg.rollout.horizon;
        let summary = check_oracle(&lm, &dfa, &prompts, horizon, self.cfg.rollout.temperature, self.cfg.seed)?;
        for line in &summary.lines {
            println!("{line}");
        }
        if summary.failures > 0 {
            return Err(Error::Assertion(format!("{} oracle checks failed", summary.failures)));
        }
        println!("oracle-check: all {} checks passed", summary.checks);
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct OracleCheckSummary {
    pub checks: usize,
    pub failures: usize,
    pub lines: Vec<String>,
}

/// Cross-checks the table against enumeration at prompt starts and at
/// prefixes of sampled rollouts, for both the rollout temperature and T = 1.
pub fn check_oracle(
    lm: &MarkovLm,
    dfa: &DfaAttribute,
    prompts: &[TokenSequence],
    horizon: usize,
    rollout_temperature: f64,
    seed: u64,
) -> Result<OracleCheckSummary> {
    let mut summary = OracleCheckSummary::default();
    let record = |summary: &mut OracleCheckSummary, name: String, worst: f64, tol: f64| {
        summary.checks += 1;
        let ok = worst <= tol;
        if !ok {
            summary.failures += 1;
        }
        summary
            .lines
            .push(format!("{} {name}: max error {worst:.3e} (tolerance {tol:.0e})", if ok { "PASS" } else { "FAIL" }));
    };
    let model = RewardModel::Dfa(dfa.clone());
    let v = lm.vocab_size();
    for temperature in [rollout_temperature, 1.0] {
        let table = build_oracle(lm, dfa, horizon, temperature)?;
        record(&mut summary, format!("T={temperature} martingale"), table.martingale_residual(), 1e-12);
        let states = sample_states(lm, prompts, horizon, temperature, seed, &model)?;
        let mut value_err: f64 = 0.0;
        let mut cond_err: f64 = 0.0;
        let mut steer_err: f64 = 0.0;
        let mut compared = 0;
        // Zero values are clamped up to ε, so exactness holds to O(ε / V).
        let epsilon = table.min_positive_value().map_or(1e-15, |w| (w / 2.0).min(1e-15));
        let steer = SteerConfig {
            k: v,
            epsilon,
            renorm_mode: RenormMode::SubsetOnly,
            value_source: ValueSource::Oracle,
        };
        for (prompt, generated) in &states {
            let depth = horizon - generated.len();
            if (v as u128).checked_pow(depth as u32).is_none_or(|n| n > ENUMERATION_CAPACITY) {
                continue;
            }
            compared += 1;
            let e = enumerate_check(lm, dfa, horizon, temperature, prompt, generated)?;
            value_err = value_err.max((table.value(prompt, generated) - e.value).abs());
            let Some(cond) = e.conditional else { continue };
            let exact = table.exact_conditional(prompt, generated)?;
            cond_err = cond_err.max(max_abs_diff(exact.probs(), cond.probs()));
            let base = lm.policy(prompt, generated, temperature)?;
            let (steered, _) = steer_distribution(&base, prompt, generated, &table, &steer)?;
            steer_err = steer_err.max(max_abs_diff(steered.probs(), cond.probs()));
        }
        summary.lines.push(format!(
            "T={temperature}: {compared} of {} sampled states small enough to enumerate",
            states.len()
        ));
        record(&mut summary, format!("T={temperature} value vs enumeration"), value_err, 1e-12);
        record(&mut summary, format!("T={temperature} conditional vs enumeration"), cond_err, 1e-12);
        record(&mut summary, format!("T={temperature} steered K=|V| vs enumeration"), steer_err, 1e-9);
    }
    Ok(summary)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

type State = (Vec<u32>, Vec<u32>);

/// Every prompt start plus the distinct non-terminal prefixes of a few rollouts.
fn sample_states(
    lm: &MarkovLm,
    prompts: &[TokenSequence],
    horizon: usize,
    temperature: f64,
    seed: u64,
    model: &RewardModel,
) -> Result<Vec<State>> {
    let cfg = crate::rollout::RolloutConfig {
        temperature,
        horizon,
        episodes_per_prompt: 20,
        seed: derive_seed(seed, "oracle-check", 0),
    };
    let trajs = collect_rollouts(lm, prompts, &cfg, model)?;
    let eos = lm.vocab().eos();
    let mut states = BTreeSet::new();
    for p in prompts {
        states.insert((p.ids.clone(), Vec::new()));
    }
    for t in &trajs {
        for i in 1..t.generated.len() {
            if t.generated[i - 1] != eos {
                states.insert((t.prompt.clone(), t.generated[..i].to_vec()));
            }
        }
    }
    Ok(states.into_iter().collect())
}
