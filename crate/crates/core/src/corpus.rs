//! Synthetic byte-level corpora and multiple-choice tasks.
//!
//! Two deliberately disjoint template families: "general" text is
//! templated natural-ish sentences, "domain" text is arithmetic and tiny
//! assignment programs. Injecting the domain corpus into a model
//! pretrained on the general corpus gives a measurable
//! injection-vs-forgetting signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    General,
    Domain,
}

impl std::fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CorpusKind::General => f.write_str("general"),
            CorpusKind::Domain => f.write_str("domain"),
        }
    }
}

/// Token sequences plus enough provenance to regenerate them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub id: String,
    pub sequences: Vec<Vec<u32>>,
    pub provenance: String,
    pub split: Split,
}

impl Corpus {
    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// Newline-delimited text ingested as raw bytes, one sequence per
    /// non-empty line.
    pub fn from_text(id: &str, text: &str, split: Split, provenance: &str) -> Result<Self> {
        let sequences: Vec<Vec<u32>> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.bytes().map(u32::from).collect())
            .collect();
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Corpus {
            id: id.to_string(),
            sequences,
            provenance: provenance.to_string(),
            split,
        })
    }

    pub fn load_file(path: &std::path::Path, id: &str, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(id, &text, split, &format!("file:{}", path.display()))
    }
}

/// Documents are capped at this many tokens so they fit desk-scale
/// context windows without chunking.
const DOC_TOKENS: usize = 128;

const SUBJECTS: [&str; 12] = [
    "the cat", "the dog", "a bird", "the river", "the old man", "a child", "the moon",
    "the ship", "a fox", "the tree", "the wind", "a stranger",
];
const VERBS: [&str; 10] = [
    "watches", "follows", "crosses", "remembers", "finds", "carries", "leaves", "reaches",
    "holds", "hears",
];
const OBJECTS: [&str; 10] = [
    "the garden", "the shore", "a quiet road", "the bridge", "an open door", "the valley",
    "a warm light", "the harbor", "a long path", "the meadow",
];
const ADVERBS: [&str; 6] = ["slowly", "quietly", "at dawn", "again", "at night", "alone"];

fn general_sentence(rng: &mut Rng) -> String {
    let s = SUBJECTS[rng.below(SUBJECTS.len())];
    let v = VERBS[rng.below(VERBS.len())];
    match rng.below(3) {
        0 => format!("{s} {v} {}. ", OBJECTS[rng.below(OBJECTS.len())]),
        1 => format!("{s} {v} {}. ", ADVERBS[rng.below(ADVERBS.len())]),
        _ => format!(
            "{s} {v} {} {}. ",
            OBJECTS[rng.below(OBJECTS.len())],
            ADVERBS[rng.below(ADVERBS.len())]
        ),
    }
}

fn domain_statement(rng: &mut Rng) -> String {
    match rng.below(3) {
        0 => {
            let a = rng.below(90) + 10;
            let b = rng.below(90) + 10;
            format!("{a}+{b}={};", a + b)
        }
        1 => {
            let a = rng.below(90) + 10;
            let b = rng.below(a.max(1));
            format!("{a}-{b}={};", a - b)
        }
        _ => {
            let a = rng.below(12) + 2;
            let b = rng.below(12) + 2;
            format!("x={a};y={b};x*y={};", a * b)
        }
    }
}

/// Deterministic corpus of at least `n_tokens` byte tokens (the final
/// document may run a little over).
pub fn gen_corpus(kind: CorpusKind, seed: u64, n_tokens: usize, split: Split) -> Result<Corpus> {
    if n_tokens == 0 {
        return Err(Error::InvalidConfig {
            field: "n_tokens",
            reason: "must be positive".to_string(),
        });
    }
    let mut rng = Rng::derive(seed, &format!("corpus.{kind}"));
    let mut sequences = Vec::new();
    let mut total = 0usize;
    while total < n_tokens {
        let mut doc = String::new();
        while doc.len() < DOC_TOKENS - 24 {
            match kind {
                CorpusKind::General => doc.push_str(&general_sentence(&mut rng)),
                CorpusKind::Domain => doc.push_str(&domain_statement(&mut rng)),
            }
        }
        doc.truncate(DOC_TOKENS);
        let tokens: Vec<u32> = doc.bytes().map(u32::from).collect();
        total += tokens.len();
        sequences.push(tokens);
    }
    Ok(Corpus {
        id: format!("{kind}-{seed}"),
        sequences,
        provenance: format!("gen:{kind}:{seed}:{n_tokens}"),
        split,
    })
}

/// Interleave two corpora at a token ratio (default 5:2 domain:general
/// for injection runs). Documents are taken in order from each source;
/// at every step the stream that lags its target share goes next, so
/// the result is deterministic.
pub fn mix_corpora(primary: &Corpus, secondary: &Corpus, ratio: (u64, u64)) -> Result<Corpus> {
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::InvalidConfig {
            field: "ratio",
            reason: "both parts must be positive".to_string(),
        });
    }
    if primary.sequences.is_empty() || secondary.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut sequences = Vec::with_capacity(primary.sequences.len() + secondary.sequences.len());
    let (mut ip, mut is) = (0usize, 0usize);
    let (mut tp, mut ts) = (0u64, 0u64);
    // All of `primary` is used; `secondary` documents are woven in only
    // while they stay at or below their ratio share.
    loop {
        let secondary_lags = ts * ratio.0 < tp * ratio.1;
        if is < secondary.sequences.len() && secondary_lags {
            let seq = &secondary.sequences[is];
            ts += seq.len() as u64;
            sequences.push(seq.clone());
            is += 1;
        } else if ip < primary.sequences.len() {
            let seq = &primary.sequences[ip];
            tp += seq.len() as u64;
            sequences.push(seq.clone());
            ip += 1;
        } else {
            break;
        }
    }
    Ok(Corpus {
        id: format!("{}+{}@{}:{}", primary.id, secondary.id, ratio.0, ratio.1),
        sequences,
        provenance: format!(
            "mix:{}:{}:{}:{}",
            primary.provenance, secondary.provenance, ratio.0, ratio.1
        ),
        split: primary.split,
    })
}

/// A 4-way multiple-choice task over token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqTask {
    pub prompt: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub answer_index: usize,
}

impl McqTask {
    pub fn new(prompt: Vec<u32>, choices: Vec<Vec<u32>>, answer_index: usize) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::InvalidConfig {
                field: "prompt",
                reason: "must be non-empty".to_string(),
            });
        }
        if choices.len() != 4 || choices.iter().any(|c| c.is_empty()) {
            return Err(Error::InvalidConfig {
                field: "choices",
                reason: "exactly four non-empty choices required".to_string(),
            });
        }
        for i in 0..choices.len() {
            for j in i + 1..choices.len() {
                if choices[i] == choices[j] {
                    return Err(Error::InvalidConfig {
                        field: "choices",
                        reason: format!("choices {i} and {j} are identical"),
                    });
                }
            }
        }
        if answer_index >= 4 {
            return Err(Error::InvalidConfig {
                field: "answer_index",
                reason: "must be in 0..4".to_string(),
            });
        }
        Ok(McqTask {
            prompt,
            choices,
            answer_index,
        })
    }

    /// Build from storage-padded choices: each choice carries its
    /// effective length; pad tokens beyond it are dropped before
    /// scoring, which is what makes length-normalized scoring invariant
    /// to padding.
    pub fn from_padded(
        prompt: Vec<u32>,
        padded: Vec<(Vec<u32>, usize)>,
        answer_index: usize,
    ) -> Result<Self> {
        let choices = padded
            .into_iter()
            .map(|(mut c, len)| {
                c.truncate(len);
                c
            })
            .collect();
        McqTask::new(prompt, choices, answer_index)
    }
}

fn bytes_of(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

fn gibberish(rng: &mut Rng, len: usize) -> String {
    const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwxz";
    (0..len)
        .map(|_| CONSONANTS[rng.below(CONSONANTS.len())] as char)
        .collect()
}

/// General tasks: a templated sentence prefix with the true continuation
/// against gibberish and word-scrambled continuations.
pub fn gen_general_mcq(seed: u64, n_tasks: usize) -> Result<Vec<McqTask>> {
    let mut rng = Rng::derive(seed, "mcq.general");
    let mut tasks = Vec::with_capacity(n_tasks);
    while tasks.len() < n_tasks {
        let s = SUBJECTS[rng.below(SUBJECTS.len())];
        let v = VERBS[rng.below(VERBS.len())];
        let o = OBJECTS[rng.below(OBJECTS.len())];
        let prompt = bytes_of(&format!("{s} {v} "));
        let correct = bytes_of(&format!("{o}. "));
        // One distractor with in-distribution words in scrambled order,
        // the rest gibberish.
        let scrambled: Vec<&str> = {
            let other = OBJECTS[rng.below(OBJECTS.len())];
            other.split(' ').rev().collect()
        };
        let mut choices = vec![correct.clone()];
        let salad = bytes_of(&format!("{}. ", scrambled.join(" ")));
        if salad != correct {
            choices.push(salad);
        }
        while choices.len() < 4 {
            let g = bytes_of(&format!("{} . ", gibberish(&mut rng, o.len().saturating_sub(2))));
            if !choices.contains(&g) {
                choices.push(g);
            }
        }
        let answer = rng.below(4);
        choices.swap(0, answer);
        if let Ok(task) = McqTask::new(prompt, choices, answer) {
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// Domain tasks: `ab+cd=` with the true sum against three wrong sums.
pub fn gen_domain_mcq(seed: u64, n_tasks: usize) -> Result<Vec<McqTask>> {
    let mut rng = Rng::derive(seed, "mcq.domain");
    let mut tasks = Vec::with_capacity(n_tasks);
    while tasks.len() < n_tasks {
        let a = rng.below(90) + 10;
        let b = rng.below(90) + 10;
        let sum = a + b;
        let prompt = bytes_of(&format!("{a}+{b}="));
        let correct = bytes_of(&format!("{sum};"));
        let mut seen = vec![sum];
        let mut choices = vec![correct];
        while choices.len() < 4 {
            let delta = rng.below(30) + 1;
            let wrong = if rng.below(2) == 0 && sum > delta {
                sum - delta
            } else {
                sum + delta
            };
            if !seen.contains(&wrong) {
                seen.push(wrong);
                choices.push(bytes_of(&format!("{wrong};")));
            }
        }
        let answer = rng.below(4);
        choices.swap(0, answer);
        if let Ok(task) = McqTask::new(prompt, choices, answer) {
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// Copy-task corpus: lines of `span:span` over a small alphabet, for
/// training models that can echo a prompt.
pub fn gen_copy_corpus(seed: u64, n_tokens: usize, span_len: usize) -> Result<Corpus> {
    if n_tokens == 0 || span_len == 0 {
        return Err(Error::InvalidConfig {
            field: "n_tokens",
            reason: "must be positive".to_string(),
        });
    }
    const ALPHABET: &[u8] = b"abcdefgh";
    let mut rng = Rng::derive(seed, "corpus.copy");
    let mut sequences = Vec::new();
    let mut total = 0;
    while total < n_tokens {
        let span: String = (0..span_len)
            .map(|_| ALPHABET[rng.below(ALPHABET.len())] as char)
            .collect();
        let line = format!("{span}:{span}.");
        let tokens: Vec<u32> = line.bytes().map(u32::from).collect();
        total += tokens.len();
        sequences.push(tokens);
    }
    Ok(Corpus {
        id: format!("copy-{seed}"),
        sequences,
        provenance: format!("gen:copy:{seed}:{n_tokens}"),
        split: Split::Train,
    })
}

/// Copy tasks: the correct choice is the prompt's span echoed verbatim.
pub fn gen_copy_mcq(seed: u64, n_tasks: usize, span_len: usize) -> Result<Vec<McqTask>> {
    const ALPHABET: &[u8] = b"abcdefgh";
    let mut rng = Rng::derive(seed, "mcq.copy");
    let mut tasks = Vec::with_capacity(n_tasks);
    while tasks.len() < n_tasks {
        let span: String = (0..span_len)
            .map(|_| ALPHABET[rng.below(ALPHABET.len())] as char)
            .collect();
        let prompt = bytes_of(&format!("{span}:"));
        let correct = bytes_of(&format!("{span}."));
        let mut choices = vec![correct];
        while choices.len() < 4 {
            let other: String = (0..span_len)
                .map(|_| ALPHABET[rng.below(ALPHABET.len())] as char)
                .collect();
            let cand = bytes_of(&format!("{other}."));
            if !choices.contains(&cand) {
                choices.push(cand);
            }
        }
        let answer = rng.below(4);
        choices.swap(0, answer);
        if let Ok(task) = McqTask::new(prompt, choices, answer) {
            tasks.push(task);
        }
    }
    Ok(tasks)
}
