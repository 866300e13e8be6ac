//! Stage orchestration behind the CLI: each stage consumes the previous
//! stage's artifacts by path, writes its own, and copies the exact resolved
//! run configuration next to them. Identical configs and inputs reproduce
//! byte-identical artifacts; wall-clock timings go to a separate
//! `timing.txt` that is not part of the canonical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::align::{sft_train, sudo_align, AlignConfig, SftConfig, TrainReport};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, SplitMode};
use crate::corpus::{
    build_world, make_preference_dataset, make_sft_dataset, read_world_jsonl, split_knowledge,
    write_preference_jsonl, write_world_jsonl, FactRecord, KnowledgeSplit, RefusalBank, World,
};
use crate::error::{Error, Result};
use crate::eval::{
    key_guess_attack, run_access_eval, run_utility_eval, AnchorPolicy, AttackTable,
    EvalComposition, EvalReport, ModelResponder, VanillaPolicy,
};
use crate::key::SudoKey;
use crate::model::{ModelConfig, ModelParams};
use crate::tokenizer::Vocabulary;

/// Artifact paths inside a run directory.
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Artifacts {
        Artifacts { dir: dir.to_path_buf() }
    }

    pub fn run_config(&self) -> PathBuf {
        self.dir.join("run_config.json")
    }
    pub fn key(&self) -> PathBuf {
        self.dir.join("key.txt")
    }
    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.tsv")
    }
    pub fn world(&self) -> PathBuf {
        self.dir.join("world.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.dir.join("split.json")
    }
    pub fn preference(&self) -> PathBuf {
        self.dir.join("preference.jsonl")
    }
    pub fn sft_ckpt(&self) -> PathBuf {
        self.dir.join("sft.ckpt")
    }
    pub fn sft_report(&self) -> PathBuf {
        self.dir.join("sft_report.jsonl")
    }
    pub fn aligned_ckpt(&self) -> PathBuf {
        self.dir.join("aligned.ckpt")
    }
    pub fn align_report(&self) -> PathBuf {
        self.dir.join("align_report.jsonl")
    }
    pub fn align_summary(&self) -> PathBuf {
        self.dir.join("align_summary.json")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.dir.join("eval_report.json")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.dir.join("verdicts.csv")
    }
    pub fn utility(&self) -> PathBuf {
        self.dir.join("utility.json")
    }
    pub fn attack(&self) -> PathBuf {
        self.dir.join("attack.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.txt")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_timing(arts: &Artifacts, stage: &str, secs: f64) {
    // best effort; timings are diagnostics, not artifacts
    let line = format!("{stage}: {secs:.2}s\n");
    let existing = std::fs::read_to_string(arts.timing()).unwrap_or_default();
    let _ = std::fs::write(arts.timing(), existing + &line);
}

fn prepare_dir(cfg: &RunConfig) -> Result<Artifacts> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let arts = Artifacts::new(&cfg.out_dir);
    write_text(&arts.run_config(), &cfg.to_canonical_json())?;
    Ok(arts)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn load_vocab(arts: &Artifacts) -> Result<Vocabulary> {
    Vocabulary::read_file(&require(arts.vocab())?)
}

fn load_key(arts: &Artifacts) -> Result<SudoKey> {
    SudoKey::read_file(&require(arts.key())?)
}

fn load_split(arts: &Artifacts) -> Result<KnowledgeSplit> {
    let path = require(arts.split())?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("split: {e}"),
    })
}

/// Loads the world facts and reattaches entity names when the artifact
/// matches the config's synthetic world; otherwise treats it as imported.
fn load_world(cfg: &RunConfig, arts: &Artifacts) -> Result<World> {
    let facts = read_world_jsonl(&require(arts.world())?)?;
    let seeds = cfg.stage_seeds();
    if let Ok(regen) = build_world(seeds.world, cfg.world.n_entities, cfg.world.attrs_per_entity) {
        if regen.facts() == facts.as_slice() {
            return Ok(regen);
        }
    }
    Ok(World::from_imported(facts))
}

fn refusal_bank(cfg: &RunConfig) -> RefusalBank {
    match cfg.split.mode {
        SplitMode::Record => RefusalBank::record(),
        SplitMode::Domain => RefusalBank::domain(),
    }
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        n_layers: cfg.model.n_layers,
        n_heads: cfg.model.n_heads,
        d_model: cfg.model.d_model,
        d_ff: cfg.model.d_ff,
        context_len: cfg.model.context_len,
        vocab_size: vocab.size() as usize,
        seed: cfg.stage_seeds().model,
    }
}

fn load_checkpoint_for(path: PathBuf, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = checkpoint::load(&require(path)?)?;
    checkpoint::verify_vocab_hash(&ckpt, vocab)?;
    Ok(ckpt)
}

// ── Stages ─────────────────────────────────────────────────────────────

/// Writes the run's sudo key. The key seed derives from the global seed.
pub fn run_keygen(cfg: &RunConfig) -> Result<PathBuf> {
    let arts = prepare_dir(cfg)?;
    let key = SudoKey::generate(cfg.stage_seeds().key, cfg.key.length)?;
    key.write_file(&arts.key())?;
    Ok(arts.key())
}

/// Generates the world, vocabulary, and knowledge split.
pub fn run_world(cfg: &RunConfig) -> Result<()> {
    let start = std::time::Instant::now();
    let arts = prepare_dir(cfg)?;
    let seeds = cfg.stage_seeds();
    let world = build_world(seeds.world, cfg.world.n_entities, cfg.world.attrs_per_entity)?;
    let vocab = Vocabulary::build(&crate::corpus::vocab_word_set())?;
    let split = split_knowledge(&world, &cfg.split.spec(), seeds.split)?;
    write_world_jsonl(&world, &arts.world())?;
    vocab.write_file(&arts.vocab())?;
    write_text(
        &arts.split(),
        &serde_json::to_string_pretty(&split).expect("split serializes"),
    )?;
    append_timing(&arts, "world", start.elapsed().as_secs_f64());
    Ok(())
}

/// Supervised fine-tuning on the world's question-answer pairs. The
/// resulting checkpoint becomes the frozen reference for alignment.
pub fn run_sft(cfg: &RunConfig) -> Result<TrainReport> {
    let start = std::time::Instant::now();
    let arts = prepare_dir(cfg)?;
    let vocab = load_vocab(&arts)?;
    let world = load_world(cfg, &arts)?;
    let dataset = make_sft_dataset(&world, &vocab)?;
    let seeds = cfg.stage_seeds();
    let mut params = ModelParams::init(model_config(cfg, &vocab))?;
    let report = sft_train(
        &mut params,
        &dataset,
        &SftConfig {
            epochs: cfg.sft.epochs,
            lr: cfg.sft.lr,
            batch_size: cfg.sft.batch_size,
            seed: seeds.sft,
        },
    )?;
    checkpoint::save(&arts.sft_ckpt(), &params, None, vocab.file_hash())?;
    write_text(&arts.sft_report(), &report.epochs_jsonl())?;
    append_timing(&arts, "sft", start.elapsed().as_secs_f64());
    Ok(report)
}

/// Gated preference alignment starting from the SFT checkpoint, which also
/// serves as the frozen reference.
pub fn run_align(cfg: &RunConfig) -> Result<TrainReport> {
    let start = std::time::Instant::now();
    let arts = prepare_dir(cfg)?;
    let vocab = load_vocab(&arts)?;
    let world = load_world(cfg, &arts)?;
    let split = load_split(&arts)?;
    let key = load_key(&arts)?;
    let reference = load_checkpoint_for(arts.sft_ckpt(), &vocab)?.params;
    let seeds = cfg.stage_seeds();

    let dataset = make_preference_dataset(
        &world,
        &split,
        &key,
        &refusal_bank(cfg),
        &vocab,
        seeds.data,
    )?;
    write_preference_jsonl(&dataset, &arts.preference())?;

    let mut policy = reference.clone();
    let report = sudo_align(
        &mut policy,
        &reference,
        &dataset,
        &AlignConfig {
            epochs: cfg.align.epochs,
            lr: cfg.align.lr,
            beta: cfg.align.beta,
            batch_size: cfg.align.batch_size,
            seed: seeds.align,
            holdout_fraction: cfg.align.holdout_fraction,
        },
    )?;
    checkpoint::save(&arts.aligned_ckpt(), &policy, None, vocab.file_hash())?;
    write_text(&arts.align_report(), &report.epochs_jsonl())?;
    let summary = serde_json::json!({
        "seed": report.seed,
        "config_hash": report.config_hash,
        "initial_loss": report.initial_loss,
        "holdout_pair_accuracy": report.holdout_pair_accuracy,
        "single_subset_warning": report.single_subset_warning,
    });
    write_text(
        &arts.align_summary(),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    append_timing(&arts, "align", start.elapsed().as_secs_f64());
    Ok(report)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct UtilityReport {
    pub aligned_with_key: f64,
    pub aligned_without_key: f64,
    /// SFT baseline with the key prefixed (same condition as
    /// `aligned_with_key`).
    pub sft_with_key: f64,
    /// SFT baseline without the key.
    pub sft_without_key: f64,
}

/// Access-control evaluation of the aligned model (or an explicit
/// checkpoint) plus the utility comparison against the SFT baseline.
pub fn run_eval(cfg: &RunConfig, checkpoint_override: Option<&Path>) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let arts = prepare_dir(cfg)?;
    let vocab = load_vocab(&arts)?;
    let world = load_world(cfg, &arts)?;
    let split = load_split(&arts)?;
    let key = load_key(&arts)?;
    let target_path = checkpoint_override
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| arts.aligned_ckpt());
    let target = load_checkpoint_for(target_path, &vocab)?.params;

    let n_priv_avail = world.facts().iter().filter(|f| split.is_privileged(f)).count();
    let n_pub_avail = world.facts().len() - n_priv_avail;
    let comp = EvalComposition {
        n_priv: cfg.eval.n_priv.unwrap_or(n_priv_avail),
        n_pub: cfg.eval.n_pub.unwrap_or(n_pub_avail),
        keyed_public: cfg.eval.keyed_public,
    };
    let responder = ModelResponder {
        params: &target,
        vocab: &vocab,
        max_new: cfg.eval.max_new,
    };
    let report = run_access_eval(&responder, &world, &split, &key, &comp)?;
    write_text(&arts.eval_report(), &report.to_json())?;
    write_text(&arts.verdicts(), &report.verdicts_csv())?;

    // Utility: aligned model with and without the key, against the SFT
    // baseline in its natural (unkeyed) condition.
    if arts.sft_ckpt().exists() {
        let sft = load_checkpoint_for(arts.sft_ckpt(), &vocab)?.params;
        let sft_responder = ModelResponder {
            params: &sft,
            vocab: &vocab,
            max_new: cfg.eval.max_new,
        };
        let utility = UtilityReport {
            aligned_with_key: run_utility_eval(&responder, &world, &split, Some(&key))?,
            aligned_without_key: run_utility_eval(&responder, &world, &split, None)?,
            sft_with_key: run_utility_eval(&sft_responder, &world, &split, Some(&key))?,
            sft_without_key: run_utility_eval(&sft_responder, &world, &split, None)?,
        };
        write_text(
            &arts.utility(),
            &serde_json::to_string_pretty(&utility).expect("utility serializes"),
        )?;
    }
    append_timing(&arts, "eval", start.elapsed().as_secs_f64());
    Ok(report)
}

/// Key-guessing attack against the aligned model.
pub fn run_attack(cfg: &RunConfig) -> Result<AttackTable> {
    let start = std::time::Instant::now();
    let arts = prepare_dir(cfg)?;
    let vocab = load_vocab(&arts)?;
    let world = load_world(cfg, &arts)?;
    let split = load_split(&arts)?;
    let key = load_key(&arts)?;
    let target = load_checkpoint_for(arts.aligned_ckpt(), &vocab)?.params;
    let responder = ModelResponder {
        params: &target,
        vocab: &vocab,
        max_new: cfg.attack.max_new,
    };
    let table = key_guess_attack(
        &responder,
        &world,
        &split,
        &key,
        &cfg.attack.lengths,
        cfg.attack.keys_per_length,
        cfg.stage_seeds().attack,
    )?;
    write_text(&arts.attack(), &table.to_csv())?;
    append_timing(&arts, "attack", start.elapsed().as_secs_f64());
    Ok(table)
}

fn fmt_metric(m: Option<f64>) -> String {
    match m {
        Some(v) => format!("{v:.2}"),
        None => "undefined".into(),
    }
}

/// Renders the eval report, utility comparison, and attack table into one
/// human-readable text summary with oracle baseline rows for scale.
pub fn run_report(cfg: &RunConfig) -> Result<String> {
    let arts = prepare_dir(cfg)?;
    let world = load_world(cfg, &arts)?;
    let split = load_split(&arts)?;
    let key = load_key(&arts)?;

    let eval_path = require(arts.eval_report())?;
    let text = std::fs::read_to_string(&eval_path).map_err(|e| Error::io(&eval_path, e))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("eval report: {e}"),
    })?;

    // Oracle rows under the same composition, from pure text policies.
    let n_priv = report.verdicts.iter().filter(|v| v.is_privileged && v.has_key).count();
    let n_pub_unkeyed = report
        .verdicts
        .iter()
        .filter(|v| !v.is_privileged && !v.has_key)
        .count();
    let comp = EvalComposition {
        n_priv,
        n_pub: n_pub_unkeyed,
        keyed_public: report.verdicts.iter().any(|v| !v.is_privileged && v.has_key),
    };
    let vanilla = run_access_eval(&VanillaPolicy, &world, &split, &key, &comp)?;
    let anchor = AnchorPolicy {
        refusal: refusal_bank(cfg).templates()[0].clone(),
    };
    let anchor = run_access_eval(&anchor, &world, &split, &key, &comp)?;

    let mut out = String::new();
    let _ = writeln!(out, "access control ({} privileged x2, {} public queries)", comp.n_priv, comp.n_pub);
    let _ = writeln!(out, "{:<10} {:>9} {:>9} {:>9} {:>9}", "model", "acc", "prec", "recall", "f1");
    for (name, r) in [("vanilla", &vanilla), ("anchor", &anchor), ("aligned", &report)] {
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>9} {:>9} {:>9}",
            name,
            fmt_metric(r.accuracy),
            fmt_metric(r.precision),
            fmt_metric(r.recall),
            fmt_metric(r.f1)
        );
    }
    let _ = writeln!(out);

    if arts.utility().exists() {
        let upath = arts.utility();
        let text = std::fs::read_to_string(&upath).map_err(|e| Error::io(&upath, e))?;
        let utility: UtilityReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("utility report: {e}"),
        })?;
        let _ = writeln!(out, "public-qa exact match");
        let _ = writeln!(out, "{:<26} {:>8.2}", "sft with key", 100.0 * utility.sft_with_key);
        let _ = writeln!(out, "{:<26} {:>8.2}", "sft without key", 100.0 * utility.sft_without_key);
        let _ = writeln!(out, "{:<26} {:>8.2}", "aligned with key", 100.0 * utility.aligned_with_key);
        let _ = writeln!(out, "{:<26} {:>8.2}", "aligned without key", 100.0 * utility.aligned_without_key);
        let _ = writeln!(out);
    }

    if arts.attack().exists() {
        let apath = arts.attack();
        let text = std::fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
        let _ = writeln!(out, "key guessing (avg refusal rate per guessed-key length)");
        let mut by_length: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for line in text.lines().skip(1) {
            let mut parts = line.split(',');
            let (Some(len), Some(_), Some(rate)) = (parts.next(), parts.next(), parts.next())
            else {
                continue;
            };
            let len: usize = len.parse().map_err(|_| Error::Parse {
                line: 1,
                msg: format!("attack csv: bad length {len:?}"),
            })?;
            let rate: f64 = rate.parse().map_err(|_| Error::Parse {
                line: 1,
                msg: format!("attack csv: bad rate {rate:?}"),
            })?;
            let e = by_length.entry(len).or_insert((0.0, 0));
            e.0 += rate;
            e.1 += 1;
        }
        for (len, (sum, n)) in by_length {
            let avg = sum / n as f64;
            let mark = if avg == 1.0 { "fully refused" } else { "LEAKED" };
            let _ = writeln!(out, "  length {len:>3}: {:>7.2}% ({mark})", 100.0 * avg);
        }
    }

    write_text(&arts.report(), &out)?;
    Ok(out)
}

/// The full flow: keygen, world, SFT, alignment, access eval, attack,
/// report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<()> {
    run_keygen(cfg)?;
    run_world(cfg)?;
    run_sft(cfg)?;
    run_align(cfg)?;
    run_eval(cfg, None)?;
    run_attack(cfg)?;
    run_report(cfg)?;
    Ok(())
}

/// Convenience for tests: everything a finished pipeline run produced.
pub fn load_world_and_split(cfg: &RunConfig) -> Result<(World, KnowledgeSplit, SudoKey, Vocabulary)> {
    let arts = Artifacts::new(&cfg.out_dir);
    Ok((
        load_world(cfg, &arts)?,
        load_split(&arts)?,
        load_key(&arts)?,
        load_vocab(&arts)?,
    ))
}

/// Facts loaded straight from a world artifact (tooling convenience).
pub fn load_world_facts(path: &Path) -> Result<Vec<FactRecord>> {
    read_world_jsonl(path)
}
