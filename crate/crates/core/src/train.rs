//! Freeze-masked continual pretraining: next-token cross entropy with
//! AdamW, cosine schedule, global-norm clipping, and hard guarantees
//! that frozen tensors never change and never get optimizer state.
//!
//! Per-sequence gradients inside a batch are computed by the parallel
//! map and summed sequentially in window order, so the loss curve
//! replays bit for bit under any thread count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{frozen_digests, Checkpoint, FreezeMask};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::loss_graph;
use crate::optim::{adamw_step, cosine_lr, LrSchedule, OptimizerState};
use crate::par;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub batch: usize,
    pub seq_len: usize,
    pub max_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    /// Cap on total optimizer steps (also fixes the schedule length).
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub shuffle_seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            batch: 32,
            seq_len: 256,
            max_lr: 2e-4,
            warmup_ratio: 0.02,
            weight_decay: 0.1,
            clip_norm: 1.0,
            epochs: 2,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            shuffle_seed: 0,
        }
    }
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub steps: usize,
    /// Mean nats per predicted token, one entry per step.
    pub loss_curve: Vec<f64>,
    pub lr_curve: Vec<f64>,
    pub hyper: Hyper,
    /// Per-tensor FNV digests of the frozen set, as hex strings.
    pub frozen_digest_before: BTreeMap<String, String>,
    pub frozen_digest_after: BTreeMap<String, String>,
    pub n_trainable_tensors: usize,
    pub all_frozen: bool,
}

impl TrainRunRecord {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_curve.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().copied()
    }

    pub fn frozen_digests_match(&self) -> bool {
        self.frozen_digest_before == self.frozen_digest_after
    }

    /// `step,loss,lr` CSV of the curves.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for (i, (loss, lr)) in self.loss_curve.iter().zip(&self.lr_curve).enumerate() {
            s.push_str(&format!("{i},{loss},{lr}\n"));
        }
        s
    }
}

/// Non-overlapping training windows of `seq_len + 1` tokens over the
/// concatenated corpus stream.
fn windows(corpus: &Corpus, seq_len: usize) -> Vec<Vec<u32>> {
    let stream: Vec<u32> = corpus.sequences.iter().flatten().copied().collect();
    let w = seq_len + 1;
    stream.chunks_exact(w).map(|c| c.to_vec()).collect()
}

fn sequence_grads(
    ckpt: &Checkpoint,
    tokens: &[u32],
    trainable: &(dyn Fn(&str) -> bool + Sync),
    scale: f32,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let lg = loss_graph::<f32>(ckpt, tokens, &|n| trainable(n))?;
    let loss = lg.graph.value(lg.loss).item() as f64;
    let mut grads = lg.graph.backward_scaled(lg.loss, scale)?;
    let mut out = BTreeMap::new();
    for (name, var) in lg.leaves {
        if trainable(&name) {
            if let Some(g) = grads.take(var) {
                out.insert(name, g);
            }
        }
    }
    Ok((loss, out))
}

/// Train `ckpt` on `corpus` under `mask`. Returns the tuned checkpoint
/// and the run record; the input checkpoint is untouched. A non-finite
/// loss aborts with the last good checkpoint carried in the error.
pub fn cpt_train(
    ckpt: &Checkpoint,
    mask: &FreezeMask,
    corpus: &Corpus,
    hyper: &Hyper,
) -> Result<(Checkpoint, TrainRunRecord)> {
    mask.validate_against(ckpt)?;
    let cfg = ckpt.config();
    if hyper.seq_len == 0 || hyper.seq_len > cfg.max_seq_len {
        return Err(Error::InvalidConfig {
            field: "seq_len",
            reason: format!("must be in 1..={}", cfg.max_seq_len),
        });
    }
    if hyper.batch == 0 {
        return Err(Error::InvalidConfig {
            field: "batch",
            reason: "must be positive".to_string(),
        });
    }

    let trainable_names: Vec<String> = ckpt
        .canonical_names()
        .into_iter()
        .filter(|n| mask.is_trainable(n))
        .collect();
    let digest_before: BTreeMap<String, String> = frozen_digests(ckpt, mask)
        .into_iter()
        .map(|(k, v)| (k, hex(v)))
        .collect();

    if trainable_names.is_empty() {
        let record = TrainRunRecord {
            steps: 0,
            loss_curve: vec![],
            lr_curve: vec![],
            hyper: hyper.clone(),
            frozen_digest_before: digest_before.clone(),
            frozen_digest_after: digest_before,
            n_trainable_tensors: 0,
            all_frozen: true,
        };
        return Ok((ckpt.clone(), record));
    }

    let all_windows = windows(corpus, hyper.seq_len);
    let steps_per_epoch = all_windows.len() / hyper.batch;
    if steps_per_epoch == 0 {
        return Err(Error::InvalidConfig {
            field: "batch",
            reason: format!(
                "corpus yields only {} windows of {} tokens, fewer than one batch of {}",
                all_windows.len(),
                hyper.seq_len + 1,
                hyper.batch
            ),
        });
    }
    let natural_steps = steps_per_epoch * hyper.epochs;
    let total_steps = hyper.max_steps.map_or(natural_steps, |m| m.min(natural_steps));

    let schedule = LrSchedule {
        max_lr: hyper.max_lr,
        warmup_ratio: hyper.warmup_ratio,
        total_steps,
    };
    let mut state = OptimizerState::new(
        hyper.beta1,
        hyper.beta2,
        hyper.adam_eps,
        hyper.weight_decay,
        schedule,
    );

    let mut work = ckpt.clone();
    let mut loss_curve = Vec::with_capacity(total_steps);
    let mut lr_curve = Vec::with_capacity(total_steps);
    let trainable = |name: &str| mask.is_trainable(name);

    let mut step = 0usize;
    'epochs: for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..all_windows.len()).collect();
        Rng::derive(hyper.shuffle_seed, &format!("epoch.{epoch}")).shuffle(&mut order);
        for chunk in order.chunks_exact(hyper.batch) {
            if step >= total_steps {
                break 'epochs;
            }
            let scale = 1.0f32 / (hyper.batch * hyper.seq_len) as f32;
            let batch_windows: Vec<&Vec<u32>> = chunk.iter().map(|&i| &all_windows[i]).collect();
            let work_ref = &work;
            let partials = par::map_ordered(&batch_windows, |tokens| {
                sequence_grads(work_ref, tokens, &trainable, scale)
            });

            let mut loss_sum = 0.0f64;
            let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
            for p in partials {
                let (loss, grads) = p?;
                loss_sum += loss;
                for (name, g) in grads {
                    match grad_acc.get_mut(&name) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *v;
                            }
                        }
                        None => {
                            grad_acc.insert(name, g);
                        }
                    }
                }
            }
            let mean_loss = loss_sum / (hyper.batch * hyper.seq_len) as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(work),
                });
            }
            lr_curve.push(cosine_lr(state.step, &state.lr_schedule));
            loss_curve.push(mean_loss);

            // Pull trainable tensors out, update, put back. adamw_step
            // validates every gradient before touching anything, so on
            // error the reinserted tensors are unchanged.
            let mut params: Vec<(String, Tensor)> = Vec::with_capacity(trainable_names.len());
            for name in &trainable_names {
                params.push((name.clone(), work.take_tensor(name)?));
            }
            let step_result = adamw_step(&mut params, &grad_acc, &mut state, hyper.clip_norm);
            for (name, t) in params {
                work.put_tensor(name, t);
            }
            if let Err(e) = step_result {
                return Err(match e {
                    Error::NonFiniteGradient { .. } => Error::Diverged {
                        step,
                        last_good: Box::new(work),
                    },
                    other => other,
                });
            }
            step += 1;
        }
    }

    debug_assert_eq!(state.tracked_tensors(), trainable_names.len());
    let digest_after: BTreeMap<String, String> = frozen_digests(&work, mask)
        .into_iter()
        .map(|(k, v)| (k, hex(v)))
        .collect();
    let record = TrainRunRecord {
        steps: step,
        loss_curve,
        lr_curve,
        hyper: hyper.clone(),
        frozen_digest_before: digest_before,
        frozen_digest_after: digest_after,
        n_trainable_tensors: trainable_names.len(),
        all_frozen: false,
    };
    Ok((work, record))
}
