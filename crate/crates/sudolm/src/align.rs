//! Training procedures: supervised fine-tuning to instill the world's
//! facts, then gated preference alignment against a frozen reference.
//!
//! The pairwise objective for one record is
//!
//! ```text
//! loss = -log sigmoid( beta * [ (lp_policy(y_w) - lp_ref(y_w))
//!                             - (lp_policy(y_l) - lp_ref(y_l)) ] )
//! ```
//!
//! with `lp` the response-only sequence log-probability and the key tokens,
//! when present, part of the prompt conditioning exactly as stored in the
//! record. With the policy equal to the reference, every margin is zero
//! and the loss is exactly `ln 2`.
//!
//! The alignment objective is the mean over the shuffled union of the
//! privileged and public subsets; the reported subset losses are weighted
//! by subset share so that their sum equals the overall mean.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, NodeId, Tape, Tensor};
use crate::corpus::{PreferenceRecord, SftPair};
use crate::error::{Error, Result};
use crate::model::{forward_batch, response_mask, ModelParams, TapedParams};
use crate::rng::SplitMix64;
use crate::tokenizer::fnv1a64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignConfig {
    pub epochs: usize,
    pub lr: f32,
    pub beta: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of records excluded from gradient updates and scored after
    /// training.
    pub holdout_fraction: f64,
}

/// Loss and diagnostics for a batch of preference pairs.
#[derive(Debug, Clone)]
pub struct DpoBatchLoss {
    pub loss: f32,
    /// Mean of `beta * (lp_policy(y_w) - lp_ref(y_w))`.
    pub mean_chosen_margin: f32,
    /// Mean of `beta * (lp_policy(y_l) - lp_ref(y_l))`.
    pub mean_rejected_margin: f32,
    /// Fraction of pairs whose chosen reward strictly exceeds the rejected.
    pub accuracy: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub kind: String,
    pub seed: u64,
    pub config_hash: u64,
    pub epoch: usize,
    /// SFT: mean cross-entropy in nats per response token.
    /// Alignment: mean pair loss over the epoch (`loss_priv + loss_pub`).
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_priv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_pub: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: String,
    pub seed: u64,
    pub config_hash: u64,
    pub epochs: Vec<EpochRecord>,
    /// Mean pair loss over the training slice before any update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_pair_accuracy: Option<f64>,
    #[serde(default)]
    pub single_subset_warning: bool,
    /// Not serialized: wall clock is inherently nondeterministic, so it is
    /// reported separately from the canonical artifacts.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Line-delimited JSON, one object per epoch.
    pub fn epochs_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch serializes"));
            out.push('\n');
        }
        out
    }
}

fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    fnv1a64(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

// ── Batch packing ──────────────────────────────────────────────────────

const PAD_ID: u32 = 0;

struct PackedBatch {
    ids: Vec<u32>,
    targets: Vec<u32>,
    mask: Vec<f32>,
    batch: usize,
    seq: usize,
    n_response_tokens: f32,
}

/// Rows are `prompt || response`, right-padded to the batch maximum.
/// Trailing pads sit after every scored position, so with causal masking
/// they cannot influence the loss.
fn pack_rows(rows: &[(&[u32], &[u32])]) -> PackedBatch {
    let batch = rows.len();
    let seq = rows.iter().map(|(p, r)| p.len() + r.len()).max().unwrap_or(0);
    let mut ids = vec![PAD_ID; batch * seq];
    let mut targets = vec![0u32; batch * seq];
    let mut mask = vec![0.0f32; batch * seq];
    let mut n_response_tokens = 0.0;
    for (b, (prompt, response)) in rows.iter().enumerate() {
        let total = prompt.len() + response.len();
        let row = &mut ids[b * seq..b * seq + total];
        row[..prompt.len()].copy_from_slice(prompt);
        row[prompt.len()..].copy_from_slice(response);
        let row = ids[b * seq..(b + 1) * seq].to_vec();
        response_mask(
            prompt.len(),
            total,
            seq,
            &row,
            &mut targets[b * seq..(b + 1) * seq],
            &mut mask[b * seq..(b + 1) * seq],
        );
        n_response_tokens += response.len() as f32;
    }
    PackedBatch {
        ids,
        targets,
        mask,
        batch,
        seq,
        n_response_tokens,
    }
}

fn check_context(packed: &PackedBatch, params: &ModelParams) -> Result<()> {
    if packed.seq > params.config.context_len {
        return Err(Error::ContextOverflow {
            len: packed.seq,
            max: params.config.context_len,
        });
    }
    Ok(())
}

/// `log p(response | prompt)` for each row, batched; no gradients.
fn batch_logprobs(params: &ModelParams, rows: &[(&[u32], &[u32])]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(32) {
        let packed = pack_rows(chunk);
        check_context(&packed, params)?;
        let mut tape = Tape::new();
        let tp = TapedParams::insert(&mut tape, params);
        let logits = forward_batch(
            &mut tape,
            &tp,
            &params.config,
            &packed.ids,
            packed.batch,
            packed.seq,
        )?;
        let nll = tape.row_nll(logits, &packed.targets, &packed.mask)?;
        out.extend(tape.value(nll).data().iter().map(|&v| -v));
    }
    Ok(out)
}

fn apply_grads(
    params: &mut ModelParams,
    tape: &Tape,
    tp: &TapedParams,
    state: &mut AdamState,
    opt: &AdamConfig,
) -> Result<()> {
    let grads: Vec<(String, Tensor)> = tp
        .named()
        .into_iter()
        .map(|(name, id)| {
            let g = tape
                .grad(id)
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()));
            (name, g)
        })
        .collect();
    let mut named = params.named_mut();
    state.step_all(
        opt,
        named.iter_mut().zip(&grads).map(|((name, param), (gname, grad))| {
            debug_assert_eq!(name, gname);
            (name.as_str(), &mut **param, grad)
        }),
    )
}

// ── Supervised fine-tuning ─────────────────────────────────────────────

/// Minimizes response-masked cross-entropy with Adam. Deterministic
/// shuffling by the config seed; zero epochs leave the parameters
/// bit-identical. The caller freezes the result as the reference model.
pub fn sft_train(
    params: &mut ModelParams,
    dataset: &[SftPair],
    cfg: &SftConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("SFT dataset is empty".into()));
    }
    if cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    let start = std::time::Instant::now();
    let hash = config_hash(cfg);
    let opt = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_nats = 0.0f64;
        let mut epoch_tokens = 0.0f64;
        for (batch_ix, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<(&[u32], &[u32])> = batch_ids
                .iter()
                .map(|&i| {
                    (
                        dataset[i].prompt_ids.as_slice(),
                        dataset[i].answer_ids.as_slice(),
                    )
                })
                .collect();
            let packed = pack_rows(&rows);
            check_context(&packed, params)?;
            let mut tape = Tape::new();
            let tp = TapedParams::insert(&mut tape, params);
            let logits = forward_batch(
                &mut tape,
                &tp,
                &params.config,
                &packed.ids,
                packed.batch,
                packed.seq,
            )?;
            let ce_sum = tape.cross_entropy(logits, &packed.targets, &packed.mask)?;
            let loss = tape.scale(ce_sum, 1.0 / packed.n_response_tokens)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite SFT loss at epoch {epoch} batch {batch_ix}"
                )));
            }
            tape.backward(loss)?;
            apply_grads(params, &tape, &tp, &mut state, &opt)?;
            epoch_nats += (loss_val * packed.n_response_tokens) as f64;
            epoch_tokens += packed.n_response_tokens as f64;
        }
        epochs.push(EpochRecord {
            kind: "sft".into(),
            seed: cfg.seed,
            config_hash: hash,
            epoch,
            loss: epoch_nats / epoch_tokens,
            loss_priv: None,
            loss_pub: None,
            pair_accuracy: None,
        });
    }
    Ok(TrainReport {
        kind: "sft".into(),
        seed: cfg.seed,
        config_hash: hash,
        epochs,
        initial_loss: None,
        holdout_pair_accuracy: None,
        single_subset_warning: false,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

// ── Pairwise preference loss ───────────────────────────────────────────

struct DpoGraph {
    loss: NodeId,
    /// Per-record loss values `-log sigmoid(margin)`.
    per_record: Vec<f32>,
    margins: Vec<f32>,
    stats: DpoBatchLoss,
}

/// Builds the pairwise loss over `records` on `tape` with the policy
/// already registered. Reference log-probabilities enter as constants.
fn build_dpo_graph(
    tape: &mut Tape,
    tp: &TapedParams,
    policy_cfg: &crate::model::ModelConfig,
    records: &[&PreferenceRecord],
    ref_lps: &[(f32, f32)],
    beta: f32,
) -> Result<DpoGraph> {
    let r = records.len();
    let mut rows: Vec<(&[u32], &[u32])> = Vec::with_capacity(2 * r);
    for rec in records {
        rows.push((rec.prompt_ids.as_slice(), rec.chosen_ids.as_slice()));
    }
    for rec in records {
        rows.push((rec.prompt_ids.as_slice(), rec.rejected_ids.as_slice()));
    }
    let packed = pack_rows(&rows);
    if packed.seq > policy_cfg.context_len {
        return Err(Error::ContextOverflow {
            len: packed.seq,
            max: policy_cfg.context_len,
        });
    }
    let logits = forward_batch(tape, tp, policy_cfg, &packed.ids, packed.batch, packed.seq)?;
    let nll = tape.row_nll(logits, &packed.targets, &packed.mask)?; // [2R]
    let lp = tape.scale(nll, -1.0)?;
    let lp_chosen = tape.slice(lp, 0, 0, r)?;
    let lp_rejected = tape.slice(lp, 0, r, r)?;

    let ref_chosen = tape.leaf(Tensor::from_vec(
        &[r],
        ref_lps.iter().map(|&(c, _)| c).collect(),
    )?);
    let ref_rejected = tape.leaf(Tensor::from_vec(
        &[r],
        ref_lps.iter().map(|&(_, l)| l).collect(),
    )?);

    let delta_chosen = tape.sub(lp_chosen, ref_chosen)?;
    let delta_rejected = tape.sub(lp_rejected, ref_rejected)?;
    let margin_raw = tape.sub(delta_chosen, delta_rejected)?;
    let margin = tape.scale(margin_raw, beta)?;
    let log_sig = tape.log_sigmoid(margin)?;
    let mean = tape.mean_all(log_sig)?;
    let loss = tape.scale(mean, -1.0)?;

    let margins = tape.value(margin).data().to_vec();
    let dc = tape.value(delta_chosen).data().to_vec();
    let dr = tape.value(delta_rejected).data().to_vec();
    let per_record: Vec<f32> = tape.value(log_sig).data().iter().map(|&v| -v).collect();
    let rf = r as f32;
    let stats = DpoBatchLoss {
        loss: tape.value(loss).item(),
        mean_chosen_margin: beta * dc.iter().sum::<f32>() / rf,
        mean_rejected_margin: beta * dr.iter().sum::<f32>() / rf,
        accuracy: margins.iter().filter(|&&m| m > 0.0).count() as f32 / rf,
    };
    Ok(DpoGraph {
        loss,
        per_record,
        margins,
        stats,
    })
}

/// Pairwise loss for one record, evaluated (no gradients). The reference
/// model is frozen; its log-probabilities are constants in the objective.
pub fn dpo_pair_loss(
    policy: &ModelParams,
    reference: &ModelParams,
    record: &PreferenceRecord,
    beta: f32,
) -> Result<DpoBatchLoss> {
    Ok(dpo_eval_losses(policy, reference, &[record.clone()], beta)?.1)
}

/// Per-record losses plus aggregate stats for a slice of records.
pub fn dpo_eval_losses(
    policy: &ModelParams,
    reference: &ModelParams,
    records: &[PreferenceRecord],
    beta: f32,
) -> Result<(Vec<f32>, DpoBatchLoss)> {
    if beta <= 0.0 {
        return Err(Error::InvalidArgument("beta must be positive".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    let mut per_record = Vec::with_capacity(records.len());
    let mut n_correct = 0usize;
    let mut sum_dc = 0.0f64;
    let mut sum_dr = 0.0f64;
    for chunk in records.chunks(16) {
        let refs = reference_logprobs(reference, chunk)?;
        let rows: Vec<&PreferenceRecord> = chunk.iter().collect();
        let mut tape = Tape::new();
        let tp = TapedParams::insert(&mut tape, policy);
        let graph = build_dpo_graph(&mut tape, &tp, &policy.config, &rows, &refs, beta)?;
        per_record.extend_from_slice(&graph.per_record);
        n_correct += graph.margins.iter().filter(|&&m| m > 0.0).count();
        sum_dc += graph.stats.mean_chosen_margin as f64 * rows.len() as f64;
        sum_dr += graph.stats.mean_rejected_margin as f64 * rows.len() as f64;
    }
    let n = records.len() as f32;
    let loss = (per_record.iter().map(|&l| l as f64).sum::<f64>() / n as f64) as f32;
    Ok((
        per_record.clone(),
        DpoBatchLoss {
            loss,
            mean_chosen_margin: (sum_dc / n as f64) as f32,
            mean_rejected_margin: (sum_dr / n as f64) as f32,
            accuracy: n_correct as f32 / n,
        },
    ))
}

/// Reference `(lp(chosen), lp(rejected))` pairs for a chunk of records.
fn reference_logprobs(
    reference: &ModelParams,
    records: &[PreferenceRecord],
) -> Result<Vec<(f32, f32)>> {
    let mut rows: Vec<(&[u32], &[u32])> = Vec::with_capacity(2 * records.len());
    for rec in records {
        rows.push((rec.prompt_ids.as_slice(), rec.chosen_ids.as_slice()));
    }
    for rec in records {
        rows.push((rec.prompt_ids.as_slice(), rec.rejected_ids.as_slice()));
    }
    let lps = batch_logprobs(reference, &rows)?;
    let n = records.len();
    Ok((0..n).map(|i| (lps[i], lps[n + i])).collect())
}

// ── Gated alignment ────────────────────────────────────────────────────

/// Optimizes the mean pairwise loss over the shuffled union of privileged
/// and public records against the frozen reference. Reference
/// log-probabilities are computed once up front (the reference never
/// changes). Reports subset-weighted losses so that
/// `loss = loss_priv + loss_pub` per epoch.
pub fn sudo_align(
    policy: &mut ModelParams,
    reference: &ModelParams,
    dataset: &[PreferenceRecord],
    cfg: &AlignConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("preference dataset is empty".into()));
    }
    if cfg.beta <= 0.0 || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument("beta and lr must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::InvalidArgument(
            "holdout fraction must be in [0, 1)".into(),
        ));
    }
    let start = std::time::Instant::now();
    let hash = config_hash(cfg);
    let has_priv = dataset.iter().any(|r| r.is_privileged);
    let has_pub = dataset.iter().any(|r| !r.is_privileged);
    let single_subset_warning = !(has_priv && has_pub);

    let mut rng = SplitMix64::new(cfg.seed);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut indices);
    let n_holdout = (cfg.holdout_fraction * dataset.len() as f64).floor() as usize;
    let holdout_ix = indices[..n_holdout].to_vec();
    let mut train_ix = indices[n_holdout..].to_vec();
    if train_ix.is_empty() {
        return Err(Error::InvalidArgument("holdout leaves no training data".into()));
    }

    // The reference is frozen, so its log-probabilities are computed once.
    let ref_lps_all: Vec<(f32, f32)> = {
        let mut out = Vec::with_capacity(dataset.len());
        for chunk in dataset.chunks(64) {
            out.extend(reference_logprobs(reference, chunk)?);
        }
        out
    };

    // Mean loss before any update (equals ln 2 when the policy starts from
    // the reference). A fixed-size sample keeps this diagnostic cheap on
    // large datasets.
    let initial_loss = {
        let sample: Vec<PreferenceRecord> = train_ix
            .iter()
            .take(256)
            .map(|&i| dataset[i].clone())
            .collect();
        let (per, _) = dpo_eval_losses(policy, reference, &sample, cfg.beta)?;
        per.iter().map(|&l| l as f64).sum::<f64>() / per.len() as f64
    };

    let opt = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut train_ix);
        let mut sum_priv = 0.0f64;
        let mut sum_pub = 0.0f64;
        let mut correct = 0.0f64;
        for (batch_ix, batch_ids) in train_ix.chunks(cfg.batch_size).enumerate() {
            let records: Vec<&PreferenceRecord> =
                batch_ids.iter().map(|&i| &dataset[i]).collect();
            let refs: Vec<(f32, f32)> = batch_ids.iter().map(|&i| ref_lps_all[i]).collect();
            let mut tape = Tape::new();
            let tp = TapedParams::insert(&mut tape, policy);
            let graph = build_dpo_graph(&mut tape, &tp, &policy.config, &records, &refs, cfg.beta)?;
            if !graph.stats.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite alignment loss at epoch {epoch} batch {batch_ix}"
                )));
            }
            tape.backward(graph.loss)?;
            apply_grads(policy, &tape, &tp, &mut state, &opt)?;
            for (rec, &l) in records.iter().zip(&graph.per_record) {
                if rec.is_privileged {
                    sum_priv += l as f64;
                } else {
                    sum_pub += l as f64;
                }
            }
            correct += (graph.stats.accuracy * records.len() as f32) as f64;
        }
        let n = train_ix.len() as f64;
        let loss_priv = sum_priv / n;
        let loss_pub = sum_pub / n;
        epochs.push(EpochRecord {
            kind: "align".into(),
            seed: cfg.seed,
            config_hash: hash,
            epoch,
            loss: loss_priv + loss_pub,
            loss_priv: Some(loss_priv),
            loss_pub: Some(loss_pub),
            pair_accuracy: Some(correct / n),
        });
    }

    let holdout_pair_accuracy = if holdout_ix.is_empty() {
        None
    } else {
        let holdout: Vec<PreferenceRecord> =
            holdout_ix.iter().map(|&i| dataset[i].clone()).collect();
        let (_, stats) = dpo_eval_losses(policy, reference, &holdout, cfg.beta)?;
        Some(stats.accuracy as f64)
    };

    Ok(TrainReport {
        kind: "align".into(),
        seed: cfg.seed,
        config_hash: hash,
        epochs,
        initial_loss: Some(initial_loss),
        holdout_pair_accuracy,
        single_subset_warning,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Plumbing for the out-of-crate gradient-check suite.
#[doc(hidden)]
pub mod test_support {
    use super::*;
    use std::collections::BTreeMap;

    /// Analytic gradients of the batch pairwise loss with respect to every
    /// policy parameter.
    pub fn dpo_grads_for_test(
        policy: &ModelParams,
        reference: &ModelParams,
        records: &[PreferenceRecord],
        beta: f32,
    ) -> BTreeMap<String, Tensor> {
        let refs = reference_logprobs(reference, records).expect("reference logprobs");
        let rows: Vec<&PreferenceRecord> = records.iter().collect();
        let mut tape = Tape::new();
        let tp = TapedParams::insert(&mut tape, policy);
        let graph = build_dpo_graph(&mut tape, &tp, &policy.config, &rows, &refs, beta)
            .expect("dpo graph");
        tape.backward(graph.loss).expect("backward");
        tp.named()
            .into_iter()
            .map(|(n, id)| {
                let g = tape
                    .grad(id)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()));
                (n, g)
            })
            .collect()
    }
}
