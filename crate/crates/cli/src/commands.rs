use std::borrow::Cow;
use std::path::PathBuf;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use priodiff::corpus::{
    count_frequencies, parse_corpus, synth_continuous_corpus, synth_grammar_corpus, write_corpus, ContinuousSequence,
    CorpusRecord, TokenSequence, Vocab,
};
use priodiff::denoiser::{generate, Denoiser, train_tabular, TabularCheckpoint, TabularDenoiser};
use priodiff::priority::{
    decode_full, dynamic_scores, token_entropy, train_ordering_agent, PriorityScores, ScoreRecord, TableDecoder,
    TokenDecoder,
};
use priodiff::quantizer::{train_toy_vq, usage_report};
use priodiff::rng::seeded;
use priodiff::schedule::{
    apply_priority, linear_base_schedule, priority_band_curves, write_band_csv, CachedSchedules, ScheduleProvider,
    ScheduleTable, StaticPrioritySchedule,
};
use priodiff::verify::{run_suite, suite_passed};

use crate::artifacts::Artifacts;
use crate::config::{ConfigError, PriorityMode, RunConfig};

/// One line of continuous.jsonl.
#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    id: String,
    width: usize,
    data: Vec<f64>,
}

fn input_path(out: &Artifacts, explicit: &Option<PathBuf>, default: &str, producer: &str) -> anyhow::Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    let p = out.path(default);
    if !p.is_file() {
        return Err(ConfigError(format!("{} not found; run `priodiff {producer}` first or set the path", p.display())).into());
    }
    Ok(p)
}

fn load_tokens(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<Vec<TokenSequence>> {
    let path = input_path(out, &cfg.paths.corpus, "corpus.jsonl", "synth")?;
    let bytes = out.read_input(&path)?;
    let corpus = parse_corpus(bytes.as_slice(), Vocab::new(cfg.categories)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    if corpus.is_empty() {
        bail!("{} holds no sequences", path.display());
    }
    Ok(corpus)
}

fn load_continuous(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<Vec<ContinuousSequence>> {
    let path = input_path(out, &cfg.paths.continuous, "continuous.jsonl", "synth")?;
    let bytes = out.read_input(&path)?;
    let text = std::str::from_utf8(&bytes)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let r: FrameRecord = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
            Ok(ContinuousSequence::new(r.width, r.data)?)
        })
        .collect()
}

fn load_decoder(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<TableDecoder> {
    let path = input_path(out, &cfg.paths.decoder, "vq_model/decoder.json", "quantize")?;
    let decoder: TableDecoder = serde_json::from_slice(&out.read_input(&path)?)?;
    if decoder.categories() != cfg.categories {
        return Err(ConfigError(format!(
            "decoder maps {} categories but categories = {}",
            decoder.categories(),
            cfg.categories
        ))
        .into());
    }
    Ok(decoder)
}

fn base_schedule(cfg: &RunConfig) -> anyhow::Result<ScheduleTable> {
    Ok(linear_base_schedule(
        cfg.steps,
        cfg.categories,
        cfg.schedule.gamma_end,
        1.0 - cfg.schedule.gamma_end,
    )?)
}

/// Per-sequence priority scores under the configured mode.
fn priority_scores(out: &mut Artifacts, cfg: &RunConfig, corpus: &[TokenSequence]) -> anyhow::Result<Vec<PriorityScores>> {
    match cfg.priority {
        PriorityMode::None => Ok(corpus
            .iter()
            .map(|s| PriorityScores::uniform(s.len()))
            .collect::<priodiff::Result<_>>()?),
        PriorityMode::Static => {
            let provider = StaticPrioritySchedule {
                base: base_schedule(cfg)?,
                entropy: token_entropy(&count_frequencies(corpus)?)?,
            };
            Ok(corpus.iter().map(|s| provider.scores(s)).collect::<priodiff::Result<_>>()?)
        }
        PriorityMode::Dynamic => {
            let decoder = load_decoder(out, cfg)?;
            let (policy, trace) = train_ordering_agent(corpus, &decoder, &cfg.agent)?;
            out.write_json("agent.json", &policy.to_checkpoint(&cfg.agent))?;
            out.write_json("agent_trace.json", &trace)?;
            corpus
                .iter()
                .map(|s| Ok(dynamic_scores(s, &policy, &decoder, &decode_full(&decoder, s)?)?))
                .collect()
        }
    }
}

fn schedule_provider(
    out: &mut Artifacts,
    cfg: &RunConfig,
    corpus: &[TokenSequence],
) -> anyhow::Result<Box<dyn ScheduleProvider>> {
    let base = base_schedule(cfg)?;
    Ok(match cfg.priority {
        PriorityMode::None => Box::new(base),
        PriorityMode::Static => Box::new(StaticPrioritySchedule {
            base,
            entropy: token_entropy(&count_frequencies(corpus)?)?,
        }),
        PriorityMode::Dynamic => {
            let scores = priority_scores(out, cfg, corpus)?;
            let mut cache = CachedSchedules::new(cfg.steps, None);
            for (seq, f) in corpus.iter().zip(&scores) {
                cache.by_id.insert(seq.id().to_string(), apply_priority(&base, f)?);
            }
            Box::new(cache)
        }
    })
}

pub fn synth(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus = synth_grammar_corpus(cfg.seed, &cfg.corpus)?;
    out.write_with("corpus.jsonl", |w| write_corpus(w, &corpus))?;
    let continuous = synth_continuous_corpus(cfg.seed, &cfg.continuous)?;
    let records: Vec<FrameRecord> = continuous
        .iter()
        .enumerate()
        .map(|(i, s)| FrameRecord {
            id: format!("cont-{i:05}"),
            width: s.width(),
            data: s.data().to_vec(),
        })
        .collect();
    out.write_jsonl("continuous.jsonl", &records)?;
    println!("synth: {} token sequences, {} continuous sequences", corpus.len(), continuous.len());
    Ok(())
}

pub fn stats(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus = load_tokens(out, cfg)?;
    let stats = count_frequencies(&corpus)?;
    out.write_with("stats.csv", |w| stats.write_csv(w))?;
    let entropy = token_entropy(&stats)?;
    let mut csv = String::from("category,frequency,entropy\n");
    for (k, h) in entropy.iter().enumerate() {
        csv.push_str(&format!("{k},{},{h}\n", stats.frequency(k)));
    }
    out.write("entropy.csv", csv.as_bytes())?;
    let used = stats.counts.iter().filter(|&&c| c > 0).count();
    println!("stats: {} tokens, {used}/{} categories used", stats.total, cfg.categories);
    Ok(())
}

#[derive(Serialize)]
struct VqSummary<'a> {
    trace: &'a [priodiff::quantizer::VqLossReport],
    usage_fraction: f64,
    usage_entropy: f64,
}

pub fn quantize(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<()> {
    let data = load_continuous(out, cfg)?;
    let trained = train_toy_vq(&data, &cfg.vq)?;
    let model = &trained.model;
    out.write_json("codebook.json", &model.codebook.to_file())?;
    out.write_json("vq_model/decoder.json", &TableDecoder::from_vq(model)?)?;
    let vocab = model.codebook.vocab();
    let quantized = data
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let codes = model.codebook.assign(&model.encode(s)?)?;
            TokenSequence::new(format!("q-{i:05}"), codes, None, vocab)
        })
        .collect::<priodiff::Result<Vec<_>>>()?;
    out.write_with("quantized.jsonl", |w| write_corpus(w, &quantized))?;
    let usage = usage_report(&model.codebook, &quantized);
    out.write_with("usage.csv", |w| usage.write_csv(w))?;
    out.write_json(
        "vq_trace.json",
        &VqSummary {
            trace: &trained.trace,
            usage_fraction: usage.fraction,
            usage_entropy: usage.entropy,
        },
    )?;
    let last = trained.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "quantize: final objective {last:.6}, usage {:.3} of {} codes, entropy {:.4} nats",
        usage.fraction,
        model.codebook.len(),
        usage.entropy
    );
    Ok(())
}

pub fn score(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus = load_tokens(out, cfg)?;
    let scores = priority_scores(out, cfg, &corpus)?;
    let records: Vec<ScoreRecord> = corpus
        .iter()
        .zip(&scores)
        .map(|(s, f)| ScoreRecord {
            sequence_id: s.id().to_string(),
            scores: f.scores().to_vec(),
        })
        .collect();
    out.write_jsonl("scores.jsonl", &records)?;
    println!("score: {} sequences scored ({:?})", records.len(), cfg.priority);
    Ok(())
}

#[derive(Serialize)]
struct ScheduleSummary {
    sequence_id: String,
    priority: PriorityMode,
    midpoint: usize,
    base_gamma_bar: f64,
    mean_gamma_bar: f64,
    deviation: f64,
    /// Positions whose modulated corruption hit the retention cap, which breaks the mean identity.
    capped_positions: usize,
}

pub fn schedule(out: &mut Artifacts, cfg: &RunConfig, sequence: Option<&str>) -> anyhow::Result<()> {
    let corpus = load_tokens(out, cfg)?;
    let scores = priority_scores(out, cfg, &corpus)?;
    let index = match sequence {
        None => 0,
        Some(id) => corpus
            .iter()
            .position(|s| s.id() == id)
            .ok_or_else(|| ConfigError(format!("sequence {id} is not in the corpus")))?,
    };
    let base = base_schedule(cfg)?;
    let table = apply_priority(&base, &scores[index])?;
    out.write_with("base.csv", |w| base.write_csv(w))?;
    out.write_with("schedule.csv", |w| table.write_csv(w))?;
    let curves = priority_band_curves(&table, &scores[index], &cfg.schedule.band_edges)?;
    out.write_with("bands.csv", |w| write_band_csv(&curves, w))?;

    let mid = cfg.steps / 2;
    let n = scores[index].len();
    let mean = table.rows()[..n].iter().map(|r| r.gamma_bar[mid]).sum::<f64>() / n as f64;
    let b = base.row(0);
    let capped = scores[index]
        .scores()
        .iter()
        .filter(|&&f| {
            let s = (mid as f64 * std::f64::consts::PI / cfg.steps as f64).sin() * f;
            (1.0 - b.alpha_bar[mid]) * s > 1.0 - priodiff::schedule::MIN_INTERIOR_RETENTION
        })
        .count();
    let summary = ScheduleSummary {
        sequence_id: corpus[index].id().to_string(),
        priority: cfg.priority,
        midpoint: mid,
        base_gamma_bar: b.gamma_bar[mid],
        mean_gamma_bar: mean,
        deviation: (mean - b.gamma_bar[mid]).abs(),
        capped_positions: capped,
    };
    out.write_json("schedule_summary.json", &summary)?;
    println!(
        "schedule: {} at t={mid}: mean gamma_bar {:.12} vs base {:.12} ({} capped)",
        summary.sequence_id, summary.mean_gamma_bar, summary.base_gamma_bar, capped
    );
    Ok(())
}

pub fn train(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus = load_tokens(out, cfg)?;
    if corpus.len() < 2 {
        bail!("training needs at least two sequences");
    }
    let heldout = ((corpus.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, corpus.len() - 1);
    let (train_set, heldout_set) = corpus.split_at(corpus.len() - heldout);
    let provider = schedule_provider(out, cfg, &corpus)?;
    let (model, trace) = train_tabular(train_set, heldout_set, provider.as_ref(), &cfg.denoiser)?;
    out.write_json("denoiser.json", &model.to_checkpoint())?;
    out.write_json("trace.json", &trace)?;
    println!(
        "train: {} train / {} held out, VLB {:.4} -> {:.4} nats",
        train_set.len(),
        heldout_set.len(),
        trace.untrained_vlb,
        trace.heldout_vlb.last().copied().unwrap_or(trace.untrained_vlb)
    );
    Ok(())
}

pub fn generate_cmd(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<()> {
    let path = input_path(out, &cfg.paths.checkpoint, "denoiser.json", "train")?;
    let ckpt: TabularCheckpoint = serde_json::from_slice(&out.read_input(&path)?)?;
    let model = TabularDenoiser::from_checkpoint(ckpt)?;
    if model.categories() != cfg.categories || model.steps() != cfg.steps {
        return Err(ConfigError(format!(
            "checkpoint has K={}, T={} but the config asks for K={}, T={}",
            model.categories(),
            model.steps(),
            cfg.categories,
            cfg.steps
        ))
        .into());
    }
    let vocab = Vocab::new(cfg.categories)?;
    let references = match cfg.priority {
        PriorityMode::None => None,
        _ => Some(load_tokens(out, cfg)?),
    };
    let provider = match &references {
        None => Box::new(base_schedule(cfg)?) as Box<dyn ScheduleProvider>,
        Some(corpus) => schedule_provider(out, cfg, corpus)?,
    };
    let base = base_schedule(cfg)?;
    let mut rng = seeded(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.generate.count);
    let mut trajectories: Vec<CorpusRecord> = Vec::new();
    for j in 0..cfg.generate.count {
        let (table, length, condition): (Cow<'_, ScheduleTable>, usize, Option<i64>) = match &references {
            None => (Cow::Borrowed(&base), cfg.generate.length, cfg.generate.condition),
            Some(corpus) => {
                let r = &corpus[j % corpus.len()];
                (provider.schedule_for(r)?, r.len(), cfg.generate.condition.or(r.condition()))
            }
        };
        let g = generate(&model, &table, length, condition, &mut rng)?;
        let id = format!("gen-{j:05}");
        if j < cfg.generate.trajectories {
            let steps = g.trajectory.len() - 1;
            for (i, x) in g.trajectory.iter().enumerate() {
                let mut rec = x.to_record();
                rec.id = id.clone();
                rec.t = Some(steps - i);
                trajectories.push(rec);
            }
        }
        samples.push(TokenSequence::new(id, g.sequence.tokens().to_vec(), condition, vocab)?);
    }
    out.write_with("generated.jsonl", |w| write_corpus(w, &samples))?;
    out.write_jsonl("trajectories.jsonl", &trajectories)?;
    println!("generate: {} sequences", samples.len());
    Ok(())
}

#[derive(Serialize)]
struct CheckRecord<'a> {
    name: &'a str,
    passed: bool,
    advisory: bool,
    detail: &'a str,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    passed: bool,
    checks: Vec<CheckRecord<'a>>,
}

/// Runs the suite; returns whether every non-advisory check passed.
pub fn verify(out: &mut Artifacts, cfg: &RunConfig) -> anyhow::Result<bool> {
    let results = run_suite(&cfg.verify);
    for r in &results {
        let status = match (r.passed, r.advisory) {
            (true, _) => "PASS",
            (false, true) => "ADVISORY-FAIL",
            (false, false) => "FAIL",
        };
        println!("{status:<13} {:<52} {:>6.2}s  {}", r.name, r.elapsed_secs, r.detail);
    }
    let passed = suite_passed(&results);
    let report = VerifyReport {
        passed,
        checks: results
            .iter()
            .map(|r| CheckRecord {
                name: &r.name,
                passed: r.passed,
                advisory: r.advisory,
                detail: &r.detail,
            })
            .collect(),
    };
    out.write_json("verify.json", &report)?;
    let total: f64 = results.iter().map(|r| r.elapsed_secs).sum();
    println!("verify: {} in {total:.1}s", if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}
