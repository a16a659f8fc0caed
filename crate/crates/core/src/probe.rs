//! Layer-importance probes: the per-boundary angular-distance profile,
//! and removal/insertion probes that measure metric deltas against the
//! intact baseline. Probes never mutate the input checkpoint; every
//! surgical variant is materialized as its own copy, so per-layer
//! evaluations are free to run in parallel.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, McqTask};
use crate::error::{Error, Result};
use crate::eval::{eval_suite, SuiteMetrics};
use crate::model::forward;
use crate::par;
use crate::surgery::{insert_block, remove_block, InitMode};

/// Which residual-stream positions feed the angular distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePosition {
    /// The final token of each sequence (the position that determines
    /// next-token prediction).
    #[default]
    LastToken,
    /// Mean of the per-token distances over all positions.
    AllTokens,
}

/// Angular distance in [0, 1]: `arccos(cos) / pi` with the cosine of the
/// two vectors clamped to [-1, 1] before `arccos`. Accumulates in f64.
pub fn angular_distance(x: &[f32], y: &[f32]) -> Result<f64> {
    debug_assert_eq!(x.len(), y.len());
    let mut dot = 0.0f64;
    let mut nx = 0.0f64;
    let mut ny = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 {
        return Err(Error::ZeroNormVector { operand: "first" });
    }
    if ny == 0.0 {
        return Err(Error::ZeroNormVector { operand: "second" });
    }
    // sqrt(nx * ny) rather than sqrt(nx) * sqrt(ny): for bitwise-equal
    // inputs dot == nx == ny and sqrt(fl(nx^2)) == nx exactly, so equal
    // vectors report a distance of exactly zero.
    let cos = (dot / (nx * ny).sqrt()).clamp(-1.0, 1.0);
    Ok(cos.acos() / std::f64::consts::PI)
}

/// Per-boundary angular distances for one captured trace.
fn trace_distances(
    boundaries: &[crate::tensor::Tensor],
    capture: CapturePosition,
) -> Result<Vec<f64>> {
    let l = boundaries.len() - 1;
    let mut out = Vec::with_capacity(l);
    for i in 0..l {
        let (a, b) = (&boundaries[i], &boundaries[i + 1]);
        let t = a.shape()[0];
        let dist = match capture {
            CapturePosition::LastToken => angular_distance(a.row(t - 1), b.row(t - 1))?,
            CapturePosition::AllTokens => {
                let mut sum = 0.0;
                for p in 0..t {
                    sum += angular_distance(a.row(p), b.row(p))?;
                }
                sum / t as f64
            }
        };
        out.push(dist);
    }
    Ok(out)
}

/// Mean angular distance per block boundary over a corpus. Sequences
/// longer than the model context are truncated to it; empty sequences
/// are skipped.
pub fn angular_profile(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    capture: CapturePosition,
) -> Result<Vec<f64>> {
    let max = ckpt.config().max_seq_len;
    let usable: Vec<&Vec<u32>> = corpus.sequences.iter().filter(|s| !s.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_seq = par::map_ordered(&usable, |seq| -> Result<Vec<f64>> {
        let tokens = &seq[..seq.len().min(max)];
        let out = forward(ckpt, tokens, true)?;
        let trace = out.trace.expect("capture requested");
        trace_distances(&trace.boundaries, capture)
    });
    let l = ckpt.n_layers();
    let mut sums = vec![0.0f64; l];
    let mut n = 0usize;
    for r in per_seq {
        let dists = r?;
        for (acc, d) in sums.iter_mut().zip(&dists) {
            *acc += d;
        }
        n += 1;
    }
    for s in &mut sums {
        *s /= n as f64;
    }
    Ok(sums)
}

/// Metric deltas of one surgical variant vs. the intact baseline, in
/// nats (mean next-token loss) and accuracy fraction. Raw differences:
/// positive `d_nats` means the variant is worse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricDelta {
    pub d_nats: f64,
    pub d_accuracy: f64,
}

fn delta(variant: &SuiteMetrics, baseline: &SuiteMetrics) -> MetricDelta {
    MetricDelta {
        d_nats: variant.nats - baseline.nats,
        d_accuracy: variant.accuracy - baseline.accuracy,
    }
}

/// Evaluate the model with block `i` removed, for every `i`. The input
/// checkpoint is untouched; deltas are ordered by layer.
pub fn removal_probe(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    tasks: &[McqTask],
    baseline: &SuiteMetrics,
) -> Result<Vec<MetricDelta>> {
    let results = par::map_range(ckpt.n_layers(), |i| -> Result<MetricDelta> {
        let removed = remove_block(ckpt, i)?;
        let m = eval_suite(&removed, corpus, tasks)?;
        Ok(delta(&m, baseline))
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InsertionProbe {
    pub deltas: Vec<MetricDelta>,
    /// Slots where weight averaging has no next block and fell back to
    /// identity copy (only ever the last slot).
    pub fallback_slots: Vec<usize>,
}

/// Evaluate the model with one block inserted after slot `i`, for every
/// `i`, under the given init mode.
pub fn insertion_probe(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    tasks: &[McqTask],
    baseline: &SuiteMetrics,
    mode: InitMode,
) -> Result<InsertionProbe> {
    let l = ckpt.n_layers();
    let results = par::map_range(l, |i| -> Result<(MetricDelta, bool)> {
        let (grown, fell_back) = match insert_block(ckpt, i, mode) {
            Ok(g) => (g, false),
            Err(Error::WeightAverageAtLastSlot { .. }) => {
                (insert_block(ckpt, i, InitMode::IdentityCopy)?, true)
            }
            Err(e) => return Err(e),
        };
        let m = eval_suite(&grown, corpus, tasks)?;
        Ok((delta(&m, baseline), fell_back))
    });
    let mut deltas = Vec::with_capacity(l);
    let mut fallback_slots = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (d, fell_back) = r?;
        deltas.push(d);
        if fell_back {
            fallback_slots.push(i);
        }
    }
    Ok(InsertionProbe {
        deltas,
        fallback_slots,
    })
}

/// The full importance report: angular profile plus removal and
/// insertion probes under both non-destructive init modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub eval_set_id: String,
    /// FNV digest of the probed checkpoint's payload, hex.
    pub checkpoint_digest: String,
    pub n_examples: usize,
    pub capture_position: CapturePosition,
    pub baseline: SuiteMetrics,
    pub angular: Vec<f64>,
    pub removal: Vec<MetricDelta>,
    pub insert_identity: Vec<MetricDelta>,
    pub insert_avg: Vec<MetricDelta>,
    pub avg_fallback_slots: Vec<usize>,
}

pub fn importance_report(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    tasks: &[McqTask],
    capture: CapturePosition,
) -> Result<ImportanceReport> {
    if corpus.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let baseline = eval_suite(ckpt, corpus, tasks)?;
    let angular = angular_profile(ckpt, corpus, capture)?;
    let removal = removal_probe(ckpt, corpus, tasks, &baseline)?;
    let insert_identity =
        insertion_probe(ckpt, corpus, tasks, &baseline, InitMode::IdentityCopy)?;
    let insert_avg = insertion_probe(ckpt, corpus, tasks, &baseline, InitMode::WeightAverage)?;
    Ok(ImportanceReport {
        eval_set_id: corpus.id.clone(),
        checkpoint_digest: format!("{:016x}", ckpt.payload_digest()),
        n_examples: corpus.sequences.len(),
        capture_position: capture,
        baseline,
        angular,
        removal,
        insert_identity: insert_identity.deltas,
        insert_avg: insert_avg.deltas,
        avg_fallback_slots: insert_avg.fallback_slots,
    })
}

impl ImportanceReport {
    /// CSV with one row per layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,angular_distance,removal_dppl,removal_dacc,insert_identity_dppl,\
             insert_identity_dacc,insert_avg_dppl,insert_avg_dacc\n",
        );
        for i in 0..self.angular.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                i,
                self.angular[i],
                self.removal[i].d_nats,
                self.removal[i].d_accuracy,
                self.insert_identity[i].d_nats,
                self.insert_identity[i].d_accuracy,
                self.insert_avg[i].d_nats,
                self.insert_avg[i].d_accuracy,
            ));
        }
        s
    }

    /// JSON sidecar with run metadata.
    pub fn metadata_json(&self, seed: u64) -> Result<String> {
        #[derive(Serialize)]
        struct Meta<'a> {
            seed: u64,
            eval_set_id: &'a str,
            checkpoint_digest: &'a str,
            n_examples: usize,
            capture_position: CapturePosition,
            baseline: SuiteMetrics,
            avg_fallback_slots: &'a [usize],
        }
        Ok(serde_json::to_string_pretty(&Meta {
            seed,
            eval_set_id: &self.eval_set_id,
            checkpoint_digest: &self.checkpoint_digest,
            n_examples: self.n_examples,
            capture_position: self.capture_position,
            baseline: self.baseline,
            avg_fallback_slots: &self.avg_fallback_slots,
        })?)
    }
}
