//! Perplexity and multiple-choice evaluation, and the paired
//! injection-vs-forgetting report.
//!
//! Per-example work fans out over the parallel map; accumulation is
//! always sequential in example order, in f64, so results are
//! bit-identical regardless of thread count.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, McqTask, Split};
use crate::error::{Error, Result};
use crate::model::forward;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PplResult {
    /// Mean next-token cross entropy, nats per token.
    pub nats: f64,
    /// `exp(nats)`.
    pub ppl: f64,
    pub n_positions: usize,
}

/// Stable f64 log-sum-exp of one f32 logits row.
fn lse_f64(row: &[f32]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        let v = v as f64;
        if v > m {
            m = v;
        }
    }
    let mut z = 0.0f64;
    for &v in row {
        z += (v as f64 - m).exp();
    }
    m + z.ln()
}

/// Sum of next-token nats over one token window (first token is context
/// only), plus the number of scored positions.
fn window_nats(ckpt: &Checkpoint, window: &[u32]) -> Result<(f64, usize)> {
    let inputs = &window[..window.len() - 1];
    let targets = &window[1..];
    let out = forward(ckpt, inputs, false)?;
    let mut nats = 0.0f64;
    for (i, &tgt) in targets.iter().enumerate() {
        let row = out.logits.row(i);
        if tgt as usize >= row.len() {
            return Err(Error::TokenOutOfRange {
                position: i + 1,
                id: tgt,
                vocab: row.len(),
            });
        }
        nats += lse_f64(row) - row[tgt as usize] as f64;
    }
    Ok((nats, targets.len()))
}

/// Mean nats/token over arbitrary sequences. Sequences longer than the
/// model context are scored in windows that overlap by one token, so
/// every transition is predicted exactly once.
pub fn mean_nats(ckpt: &Checkpoint, sequences: &[Vec<u32>]) -> Result<(f64, usize)> {
    let max = ckpt.config().max_seq_len;
    let mut windows: Vec<&[u32]> = Vec::new();
    for seq in sequences {
        let mut start = 0;
        while start + 1 < seq.len() {
            let end = (start + max + 1).min(seq.len());
            windows.push(&seq[start..end]);
            start = end - 1;
        }
    }
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let partials = par::map_ordered(&windows, |w| window_nats(ckpt, w));
    let mut nats = 0.0f64;
    let mut count = 0usize;
    for p in partials {
        let (n, c) = p?;
        nats += n;
        count += c;
    }
    Ok((nats / count as f64, count))
}

/// Corpus perplexity. The corpus must be a heldout split.
pub fn perplexity(ckpt: &Checkpoint, corpus: &Corpus) -> Result<PplResult> {
    if corpus.split != Split::Heldout {
        return Err(Error::WrongSplit {
            id: corpus.id.clone(),
            expected: Split::Heldout,
            actual: corpus.split,
        });
    }
    if corpus.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (nats, n_positions) = mean_nats(ckpt, &corpus.sequences)?;
    Ok(PplResult {
        nats,
        ppl: nats.exp(),
        n_positions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McqResult {
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_tasks: usize,
}

/// Length-normalized log-likelihood of `choice` continuing `prompt`,
/// nats per choice token.
pub fn choice_logprob(ckpt: &Checkpoint, prompt: &[u32], choice: &[u32]) -> Result<f64> {
    debug_assert!(!prompt.is_empty() && !choice.is_empty());
    let mut full = Vec::with_capacity(prompt.len() + choice.len());
    full.extend_from_slice(prompt);
    full.extend_from_slice(choice);
    // Only rows prompt-1 .. end-1 are needed; scoring the full window
    // keeps the code simple at desk scale.
    let out = forward(ckpt, &full[..full.len() - 1], false)?;
    let mut lp = 0.0f64;
    for (j, &tok) in choice.iter().enumerate() {
        let row = out.logits.row(prompt.len() - 1 + j);
        lp += row[tok as usize] as f64 - lse_f64(row);
    }
    Ok(lp / choice.len() as f64)
}

/// Accuracy of argmax choice scoring; ties break to the lowest index.
pub fn mcq_accuracy(ckpt: &Checkpoint, tasks: &[McqTask]) -> Result<McqResult> {
    if tasks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let outcomes = par::map_ordered(tasks, |task| -> Result<bool> {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (i, choice) in task.choices.iter().enumerate() {
            let score = choice_logprob(ckpt, &task.prompt, choice)?;
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        Ok(best == task.answer_index)
    });
    let mut n_correct = 0usize;
    for o in outcomes {
        if o? {
            n_correct += 1;
        }
    }
    Ok(McqResult {
        accuracy: n_correct as f64 / tasks.len() as f64,
        n_correct,
        n_tasks: tasks.len(),
    })
}

/// One suite's metrics for a single checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteMetrics {
    pub nats: f64,
    pub ppl: f64,
    pub accuracy: f64,
}

pub fn eval_suite(ckpt: &Checkpoint, corpus: &Corpus, tasks: &[McqTask]) -> Result<SuiteMetrics> {
    if corpus.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (nats, _) = mean_nats(ckpt, &corpus.sequences)?;
    let mcq = mcq_accuracy(ckpt, tasks)?;
    Ok(SuiteMetrics {
        nats,
        ppl: nats.exp(),
        accuracy: mcq.accuracy,
    })
}

/// One row of the forgetting report. Deltas are improvement-positive:
/// `base - tuned` for nats/ppl (lower is better), `tuned - base` for
/// accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgettingRow {
    pub suite: String,
    pub metric: String,
    pub base: f64,
    pub tuned: f64,
    pub delta: f64,
}

pub fn forgetting_report(
    base: &Checkpoint,
    tuned: &Checkpoint,
    general_corpus: &Corpus,
    domain_corpus: &Corpus,
    general_tasks: &[McqTask],
    domain_tasks: &[McqTask],
) -> Result<Vec<ForgettingRow>> {
    let mut rows = Vec::with_capacity(6);
    for (suite, corpus, tasks) in [
        ("general", general_corpus, general_tasks),
        ("domain", domain_corpus, domain_tasks),
    ] {
        let b = eval_suite(base, corpus, tasks)?;
        let t = eval_suite(tuned, corpus, tasks)?;
        rows.push(ForgettingRow {
            suite: suite.to_string(),
            metric: "nats".to_string(),
            base: b.nats,
            tuned: t.nats,
            delta: b.nats - t.nats,
        });
        rows.push(ForgettingRow {
            suite: suite.to_string(),
            metric: "ppl".to_string(),
            base: b.ppl,
            tuned: t.ppl,
            delta: b.ppl - t.ppl,
        });
        rows.push(ForgettingRow {
            suite: suite.to_string(),
            metric: "accuracy".to_string(),
            base: b.accuracy,
            tuned: t.accuracy,
            delta: t.accuracy - b.accuracy,
        });
    }
    Ok(rows)
}

pub fn forgetting_csv(rows: &[ForgettingRow]) -> String {
    let mut s = String::from("suite,metric,base,tuned,delta\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.suite, r.metric, r.base, r.tuned, r.delta
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, gen_domain_mcq, CorpusKind};
    use crate::model::{init_model, ModelConfig};
    use crate::tensor::Tensor;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 256,
            max_seq_len: 64,
            norm_eps: 1e-5,
            seed: 3,
        }
    }

    #[test]
    fn uniform_logit_model_scores_ln_vocab() {
        let mut ckpt = init_model(&cfg()).unwrap();
        // zero head -> all logits identical -> uniform distribution
        ckpt.replace("head", Tensor::zeros(&[16, 256])).unwrap();
        let corpus = gen_corpus(CorpusKind::General, 11, 2000, Split::Heldout).unwrap();
        let r = perplexity(&ckpt, &corpus).unwrap();
        assert!((r.nats - 256f64.ln()).abs() < 1e-9, "nats {}", r.nats);
        assert!((r.ppl - 256.0).abs() < 1e-6);
    }

    #[test]
    fn perplexity_requires_heldout_split() {
        let ckpt = init_model(&cfg()).unwrap();
        let corpus = gen_corpus(CorpusKind::General, 11, 1000, Split::Train).unwrap();
        assert!(matches!(
            perplexity(&ckpt, &corpus).unwrap_err(),
            Error::WrongSplit { .. }
        ));
    }

    #[test]
    fn perplexity_is_bitwise_reproducible() {
        let ckpt = init_model(&cfg()).unwrap();
        let corpus = gen_corpus(CorpusKind::Domain, 4, 3000, Split::Heldout).unwrap();
        let a = perplexity(&ckpt, &corpus).unwrap();
        let b = perplexity(&ckpt, &corpus).unwrap();
        assert_eq!(a.nats.to_bits(), b.nats.to_bits());
    }

    #[test]
    fn long_sequences_are_windowed_not_rejected() {
        let ckpt = init_model(&cfg()).unwrap();
        let long: Vec<u32> = (0..300).map(|i| (i % 250) as u32).collect();
        let (nats, count) = mean_nats(&ckpt, &[long]).unwrap();
        assert_eq!(count, 299, "every transition scored once");
        assert!(nats.is_finite());
    }

    #[test]
    fn random_model_mcq_accuracy_near_chance() {
        let ckpt = init_model(&cfg()).unwrap();
        let tasks = gen_domain_mcq(9, 1000).unwrap();
        let r = mcq_accuracy(&ckpt, &tasks).unwrap();
        assert!(
            (r.accuracy - 0.25).abs() <= 0.05,
            "accuracy {} outside [0.20, 0.30]",
            r.accuracy
        );
    }

    #[test]
    fn forced_single_task_is_scored_correctly() {
        // Construct a model that always predicts token 7: identity
        // blocks, constant positive embedding, head weight only in
        // column 7.
        let mut ckpt = init_model(&cfg()).unwrap();
        for i in 0..2 {
            ckpt.replace(&format!("block.{i}.wo"), Tensor::zeros(&[16, 16]))
                .unwrap();
            ckpt.replace(&format!("block.{i}.wdown"), Tensor::zeros(&[32, 16]))
                .unwrap();
        }
        ckpt.replace("embed", Tensor::from_vec(&[256, 16], vec![0.1; 256 * 16]).unwrap())
            .unwrap();
        let mut head = vec![0.0f32; 16 * 256];
        for i in 0..16 {
            head[i * 256 + 7] = 5.0;
        }
        ckpt.replace("head", Tensor::from_vec(&[16, 256], head).unwrap())
            .unwrap();
        let task = McqTask::new(
            vec![1, 2],
            vec![vec![7, 7], vec![8, 8], vec![9, 9], vec![10, 10]],
            0,
        )
        .unwrap();
        let r = mcq_accuracy(&ckpt, &[task]).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn scoring_is_invariant_to_choice_padding() {
        let ckpt = init_model(&cfg()).unwrap();
        let plain = McqTask::new(
            vec![1, 2, 3],
            vec![vec![4, 5], vec![6], vec![7, 8, 9], vec![10]],
            1,
        )
        .unwrap();
        let padded = McqTask::from_padded(
            vec![1, 2, 3],
            vec![
                (vec![4, 5, 0, 0], 2),
                (vec![6, 0, 0, 0], 1),
                (vec![7, 8, 9, 0], 3),
                (vec![10, 0, 0, 0], 1),
            ],
            1,
        )
        .unwrap();
        for i in 0..4 {
            let a = choice_logprob(&ckpt, &plain.prompt, &plain.choices[i]).unwrap();
            let b = choice_logprob(&ckpt, &padded.prompt, &padded.choices[i]).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "choice {i}");
        }
    }

    #[test]
    fn identical_checkpoints_give_zero_deltas() {
        let ckpt = init_model(&cfg()).unwrap();
        let gen_h = gen_corpus(CorpusKind::General, 5, 1500, Split::Heldout).unwrap();
        let dom_h = gen_corpus(CorpusKind::Domain, 6, 1500, Split::Heldout).unwrap();
        let gt = crate::corpus::gen_general_mcq(7, 20).unwrap();
        let dt = gen_domain_mcq(8, 20).unwrap();
        let rows = forgetting_report(&ckpt, &ckpt, &gen_h, &dom_h, &gt, &dt).unwrap();
        assert_eq!(rows.len(), 6);
        for r in rows {
            assert_eq!(r.delta, 0.0, "{}/{}", r.suite, r.metric);
        }
    }
}
