//! Checkpoint-level block surgery: removal, insertion under three init
//! modes, and expansion plans written in a compact notation.
//!
//! Plan notation, e.g. `(2+1)x8|13|1~!2` on a 32-block model:
//!
//! * `(a+1)xk` — k segments of `a` untouched blocks, each capped by one
//!   inserted (trainable) block
//! * bare integer — a run of untouched blocks
//! * trailing `|1` — the final surviving block is trainable and gets
//!   reinitialized from the deleted blocks (requires `!D`)
//! * `~` — inserted blocks average their two neighbors; `=` — inserted
//!   blocks copy a source block with zeroed output projections (exactly
//!   output-preserving); no suffix — plain identity copy
//! * `!D` — the D deepest blocks are deleted first
//!
//! Elements describe the model after deletion, so the block counts must
//! sum to `L - D`. The expanded model has `L + N - D` blocks.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, FreezeMask};
use crate::error::{Error, Result};
use crate::model::{params_per_block, params_total, tensor_specs, ModelConfig, BLOCK_ROLES};
use crate::tensor::Tensor;

/// Initialization of an inserted block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Duplicate the source block's weights.
    IdentityCopy,
    /// Elementwise mean of the two blocks adjacent to the insertion
    /// point.
    WeightAverage,
    /// Duplicate the source block, then zero `wo` and `wdown` so the new
    /// block contributes an exactly-zero residual.
    ZeroResidual,
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InitMode::IdentityCopy => "identity_copy",
            InitMode::WeightAverage => "weight_average",
            InitMode::ZeroResidual => "zero_residual",
        };
        f.write_str(s)
    }
}

/// Which block a non-averaging insertion duplicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePolicy {
    /// The first block of the segment the insertion caps.
    #[default]
    Foremost,
    /// The block immediately before the insertion point.
    Preceding,
}

/// How the final-block reinitialization averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReinitAveraging {
    /// Mean of the deleted blocks only (the default reading).
    #[default]
    DiscardedOnly,
    /// Mean of the deleted blocks and the surviving final block.
    IncludeSurvivor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanElement {
    /// `(span+1)xcount`
    Group { span: usize, count: usize },
    /// Bare run of untouched blocks.
    Run(usize),
    /// Trailing `|1`: trainable, reinitialized final block.
    FinalTrainable,
}

/// An expansion recipe relative to an `l_original`-block model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub l_original: usize,
    pub elements: Vec<PlanElement>,
    pub init_mode: InitMode,
    pub delete_count: usize,
    #[serde(default)]
    pub source_policy: SourcePolicy,
}

/// One planned insertion: new block goes after post-deletion original
/// block `after`; `source` is the duplicated block for identity/zero
/// modes (averaging always uses `after` and `after + 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Insertion {
    pub after: usize,
    pub source: usize,
}

impl ExpansionPlan {
    /// Identity plan: no insertions, no deletions, nothing trainable.
    pub fn identity(l_original: usize) -> Self {
        ExpansionPlan {
            l_original,
            elements: vec![PlanElement::Run(l_original)],
            init_mode: InitMode::IdentityCopy,
            delete_count: 0,
            source_policy: SourcePolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_original == 0 {
            return Err(Error::PlanInvalid {
                reason: "plan for a zero-layer model".into(),
            });
        }
        if self.delete_count * 2 >= self.l_original && self.delete_count > 0 {
            return Err(Error::PlanInvalid {
                reason: format!(
                    "delete_count {} reaches into the first half of {} layers",
                    self.delete_count, self.l_original
                ),
            });
        }
        if self.elements.is_empty() {
            return Err(Error::PlanInvalid {
                reason: "plan has no elements".into(),
            });
        }
        for (i, el) in self.elements.iter().enumerate() {
            match el {
                PlanElement::Group { span, count } => {
                    if *span == 0 || *count == 0 {
                        return Err(Error::PlanInvalid {
                            reason: format!("group {i} has zero span or count"),
                        });
                    }
                }
                PlanElement::Run(0) => {
                    return Err(Error::PlanInvalid {
                        reason: format!("run {i} has zero length"),
                    });
                }
                PlanElement::Run(_) => {}
                PlanElement::FinalTrainable => {
                    if i + 1 != self.elements.len() {
                        return Err(Error::PlanInvalid {
                            reason: "trainable final block must be the last element".into(),
                        });
                    }
                    if self.delete_count == 0 {
                        return Err(Error::PlanInvalid {
                            reason: "trainable final block requires deletions (!D) to \
                                     reinitialize from"
                                .into(),
                        });
                    }
                }
            }
        }
        let covered = self.covered_originals();
        let expected = self.l_original - self.delete_count;
        if covered != expected {
            return Err(Error::PlanArithmetic {
                msg: format!(
                    "elements cover {covered} original blocks, but L - D = {} - {} = {expected}",
                    self.l_original, self.delete_count
                ),
            });
        }
        Ok(())
    }

    fn covered_originals(&self) -> usize {
        self.elements
            .iter()
            .map(|el| match el {
                PlanElement::Group { span, count } => span * count,
                PlanElement::Run(n) => *n,
                PlanElement::FinalTrainable => 1,
            })
            .sum()
    }

    pub fn n_insertions(&self) -> usize {
        self.elements
            .iter()
            .map(|el| match el {
                PlanElement::Group { count, .. } => *count,
                _ => 0,
            })
            .sum()
    }

    pub fn final_reinit(&self) -> bool {
        matches!(self.elements.last(), Some(PlanElement::FinalTrainable))
    }

    /// Resulting block count `L + N - D`.
    pub fn resulting_blocks(&self) -> usize {
        self.l_original + self.n_insertions() - self.delete_count
    }

    /// Insertions in shallow-to-deep order, with `after`/`source` given
    /// in post-deletion original indices.
    pub fn insertions(&self) -> Vec<Insertion> {
        let mut out = Vec::with_capacity(self.n_insertions());
        let mut cursor = 0usize;
        for el in &self.elements {
            match el {
                PlanElement::Group { span, count } => {
                    for _ in 0..*count {
                        let after = cursor + span - 1;
                        let source = match self.source_policy {
                            SourcePolicy::Foremost => cursor,
                            SourcePolicy::Preceding => after,
                        };
                        out.push(Insertion { after, source });
                        cursor += span;
                    }
                }
                PlanElement::Run(n) => cursor += n,
                PlanElement::FinalTrainable => cursor += 1,
            }
        }
        out
    }

    /// Original-block indices the insertions go after.
    pub fn insertion_slots(&self) -> Vec<usize> {
        self.insertions().iter().map(|ins| ins.after).collect()
    }

    /// Trainable flag per resulting block, shallow to deep.
    pub fn block_trainable(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.resulting_blocks());
        for el in &self.elements {
            match el {
                PlanElement::Group { span, count } => {
                    for _ in 0..*count {
                        out.extend(std::iter::repeat(false).take(*span));
                        out.push(true);
                    }
                }
                PlanElement::Run(n) => out.extend(std::iter::repeat(false).take(*n)),
                PlanElement::FinalTrainable => out.push(true),
            }
        }
        out
    }

    pub fn n_trainable_blocks(&self) -> usize {
        self.n_insertions() + usize::from(self.final_reinit())
    }

    /// All insertions land within the first half of the original stack.
    pub fn is_shallow_only(&self) -> bool {
        self.insertion_slots()
            .iter()
            .all(|&s| (s + 1) * 2 <= self.l_original)
    }

    /// Canonical notation. `parse_plan(render(..), l)` reproduces the
    /// plan exactly (source policy is not part of the notation).
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, el) in self.elements.iter().enumerate() {
            if i > 0 {
                s.push('|');
            }
            match el {
                PlanElement::Group { span, count } => {
                    s.push_str(&format!("({span}+1)x{count}"));
                }
                PlanElement::Run(n) => s.push_str(&n.to_string()),
                PlanElement::FinalTrainable => s.push('1'),
            }
        }
        match self.init_mode {
            InitMode::IdentityCopy => {}
            InitMode::WeightAverage => s.push('~'),
            InitMode::ZeroResidual => s.push('='),
        }
        if self.delete_count > 0 {
            s.push_str(&format!("!{}", self.delete_count));
        }
        s
    }
}

impl std::fmt::Display for ExpansionPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

/// Build the segmented shallow-expansion plan: split the first half of
/// `l` blocks into `n` segments of `l_n`, cap each with an insertion,
/// delete the `d` deepest blocks, and (when `d > 0`) mark the surviving
/// final block trainable for reinitialization.
pub fn build_s_plan(
    l: usize,
    l_n: usize,
    n: usize,
    d: usize,
    init_mode: InitMode,
) -> Result<ExpansionPlan> {
    if n == 0 {
        if d != 0 {
            return Err(Error::PlanInvalid {
                reason: "deletion without insertions is not an S-plan".into(),
            });
        }
        if l == 0 {
            return Err(Error::PlanInvalid {
                reason: "zero-layer model".into(),
            });
        }
        return Ok(ExpansionPlan {
            l_original: l,
            elements: vec![PlanElement::Run(l)],
            init_mode,
            delete_count: 0,
            source_policy: SourcePolicy::default(),
        });
    }
    if l < 4 || l % 2 != 0 {
        return Err(Error::PlanInvalid {
            reason: format!("S-plan requires an even layer count of at least 4, got {l}"),
        });
    }
    if n * l_n != l / 2 {
        return Err(Error::PlanArithmetic {
            msg: format!(
                "N x L_N = {n} x {l_n} = {} must equal L/2 = {}",
                n * l_n,
                l / 2
            ),
        });
    }
    if d * 2 >= l {
        return Err(Error::PlanInvalid {
            reason: format!("D = {d} reaches into the first half of {l} layers"),
        });
    }
    let mut elements = vec![PlanElement::Group { span: l_n, count: n }];
    let deep = l - d - l / 2;
    if d > 0 {
        if deep > 1 {
            elements.push(PlanElement::Run(deep - 1));
        }
        elements.push(PlanElement::FinalTrainable);
    } else if deep > 0 {
        elements.push(PlanElement::Run(deep));
    }
    let plan = ExpansionPlan {
        l_original: l,
        elements,
        init_mode,
        delete_count: d,
        source_policy: SourcePolicy::default(),
    };
    plan.validate()?;
    Ok(plan)
}

/// Parse plan notation against a model of `l_original` blocks. Errors
/// carry the byte position of the offending character.
pub fn parse_plan(text: &str, l_original: usize) -> Result<ExpansionPlan> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut pos = 0usize;
    let err = |pos: usize, msg: &str| Error::PlanParse {
        pos: chars.get(pos).map(|&(b, _)| b).unwrap_or(text.len()),
        text: text.to_string(),
        msg: msg.to_string(),
    };
    let peek = |pos: usize| chars.get(pos).map(|&(_, c)| c);

    let parse_int = |pos: &mut usize| -> Result<usize> {
        let start = *pos;
        let mut value = 0usize;
        while let Some(c) = peek(*pos) {
            if let Some(digit) = c.to_digit(10) {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add(digit as usize))
                    .ok_or_else(|| err(start, "integer too large"))?;
                *pos += 1;
            } else {
                break;
            }
        }
        if *pos == start {
            return Err(err(start, "expected an integer"));
        }
        Ok(value)
    };

    let mut elements: Vec<PlanElement> = Vec::new();
    loop {
        match peek(pos) {
            Some('(') => {
                pos += 1;
                let span = parse_int(&mut pos)?;
                if span == 0 {
                    return Err(err(pos - 1, "group span must be at least 1"));
                }
                for expected in ['+', '1', ')'] {
                    if peek(pos) != Some(expected) {
                        return Err(err(pos, &format!("expected `{expected}` in `(a+1)xk` group")));
                    }
                    pos += 1;
                }
                match peek(pos) {
                    Some('x') | Some('\u{d7}') => pos += 1,
                    _ => return Err(err(pos, "expected `x` after `(a+1)`")),
                }
                let count = parse_int(&mut pos)?;
                if count == 0 {
                    return Err(err(pos - 1, "group count must be at least 1"));
                }
                elements.push(PlanElement::Group { span, count });
            }
            Some(c) if c.is_ascii_digit() => {
                let run = parse_int(&mut pos)?;
                if run == 0 {
                    return Err(err(pos - 1, "run length must be at least 1"));
                }
                elements.push(PlanElement::Run(run));
            }
            _ => return Err(err(pos, "expected `(a+1)xk` group or block count")),
        }
        if peek(pos) == Some('|') {
            pos += 1;
            continue;
        }
        break;
    }

    let init_mode = match peek(pos) {
        Some('~') => {
            pos += 1;
            InitMode::WeightAverage
        }
        Some('=') => {
            pos += 1;
            InitMode::ZeroResidual
        }
        _ => InitMode::IdentityCopy,
    };
    let delete_count = if peek(pos) == Some('!') {
        pos += 1;
        let d = parse_int(&mut pos)?;
        if d == 0 {
            return Err(err(pos - 1, "deletion count must be at least 1"));
        }
        d
    } else {
        0
    };
    if pos != chars.len() {
        return Err(err(pos, "unexpected trailing characters"));
    }

    // A trailing bare `1` after other elements is the trainable final
    // block marker.
    if elements.len() >= 2 && elements.last() == Some(&PlanElement::Run(1)) {
        *elements.last_mut().unwrap() = PlanElement::FinalTrainable;
    }

    let plan = ExpansionPlan {
        l_original,
        elements,
        init_mode,
        delete_count,
        source_policy: SourcePolicy::default(),
    };
    plan.validate()?;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Single-block surgery
// ---------------------------------------------------------------------------

fn copy_globals(src: &Checkpoint, dst: &mut Checkpoint) -> Result<()> {
    for name in ["embed", "final_norm", "head"] {
        dst.insert(name.to_string(), src.tensor(name)?.clone())?;
    }
    Ok(())
}

fn copy_block(src: &Checkpoint, src_idx: usize, dst: &mut Checkpoint, dst_idx: usize) -> Result<()> {
    for role in BLOCK_ROLES {
        dst.insert(
            format!("block.{dst_idx}.{role}"),
            src.block_tensor(src_idx, role)?.clone(),
        )?;
    }
    Ok(())
}

fn mean_tensor(parts: &[&Tensor]) -> Tensor {
    debug_assert!(!parts.is_empty());
    let inv = 1.0f32 / parts.len() as f32;
    let mut data = parts[0].data().to_vec();
    for t in &parts[1..] {
        for (acc, &v) in data.iter_mut().zip(t.data()) {
            *acc += v;
        }
    }
    for v in &mut data {
        *v *= inv;
    }
    Tensor::from_vec(parts[0].shape(), data).expect("mean shape")
}

/// New checkpoint with block `i` removed; deeper blocks shift down.
pub fn remove_block(ckpt: &Checkpoint, i: usize) -> Result<Checkpoint> {
    let cfg = ckpt.config();
    if i >= cfg.n_layers {
        return Err(Error::LayerOutOfRange {
            index: i,
            n_layers: cfg.n_layers,
        });
    }
    if cfg.n_layers < 2 {
        return Err(Error::PlanInvalid {
            reason: "cannot remove the only block".into(),
        });
    }
    let mut new_cfg = cfg.clone();
    new_cfg.n_layers -= 1;
    let mut out = Checkpoint::empty(new_cfg);
    copy_globals(ckpt, &mut out)?;
    let mut dst = 0;
    for src in 0..cfg.n_layers {
        if src == i {
            continue;
        }
        copy_block(ckpt, src, &mut out, dst)?;
        dst += 1;
    }
    out.validate()?;
    Ok(out)
}

/// New checkpoint with one block inserted after block `slot`.
///
/// Identity copy duplicates block `slot` (the block before the insertion
/// point); weight averaging means blocks `slot` and `slot + 1` and
/// errors at the last slot; zero-residual duplicates block `slot` with
/// `wo`/`wdown` zeroed, which leaves all model outputs bitwise unchanged.
pub fn insert_block(ckpt: &Checkpoint, slot: usize, mode: InitMode) -> Result<Checkpoint> {
    match mode {
        InitMode::WeightAverage => {
            insert_block_avg(ckpt, slot)
        }
        InitMode::IdentityCopy | InitMode::ZeroResidual => {
            insert_block_from(ckpt, slot, slot, mode)
        }
    }
}

/// Insertion with an explicit source block (plan application uses this
/// to duplicate a segment's foremost block).
pub fn insert_block_from(
    ckpt: &Checkpoint,
    slot: usize,
    source: usize,
    mode: InitMode,
) -> Result<Checkpoint> {
    let cfg = ckpt.config();
    if slot >= cfg.n_layers {
        return Err(Error::LayerOutOfRange {
            index: slot,
            n_layers: cfg.n_layers,
        });
    }
    if source >= cfg.n_layers {
        return Err(Error::LayerOutOfRange {
            index: source,
            n_layers: cfg.n_layers,
        });
    }
    if mode == InitMode::WeightAverage {
        return insert_block_avg(ckpt, slot);
    }
    let mut new_cfg = cfg.clone();
    new_cfg.n_layers += 1;
    let mut out = Checkpoint::empty(new_cfg);
    copy_globals(ckpt, &mut out)?;
    for src in 0..=slot {
        copy_block(ckpt, src, &mut out, src)?;
    }
    for role in BLOCK_ROLES {
        let src_t = ckpt.block_tensor(source, role)?;
        let t = if mode == InitMode::ZeroResidual && (role == "wo" || role == "wdown") {
            Tensor::zeros(src_t.shape())
        } else {
            src_t.clone()
        };
        out.insert(format!("block.{}.{role}", slot + 1), t)?;
    }
    for src in slot + 1..cfg.n_layers {
        copy_block(ckpt, src, &mut out, src + 1)?;
    }
    out.validate()?;
    Ok(out)
}

fn insert_block_avg(ckpt: &Checkpoint, slot: usize) -> Result<Checkpoint> {
    let cfg = ckpt.config();
    if slot >= cfg.n_layers {
        return Err(Error::LayerOutOfRange {
            index: slot,
            n_layers: cfg.n_layers,
        });
    }
    if slot + 1 >= cfg.n_layers {
        return Err(Error::WeightAverageAtLastSlot {
            slot,
            n_layers: cfg.n_layers,
        });
    }
    let mut new_cfg = cfg.clone();
    new_cfg.n_layers += 1;
    let mut out = Checkpoint::empty(new_cfg);
    copy_globals(ckpt, &mut out)?;
    for src in 0..=slot {
        copy_block(ckpt, src, &mut out, src)?;
    }
    for role in BLOCK_ROLES {
        let a = ckpt.block_tensor(slot, role)?;
        let b = ckpt.block_tensor(slot + 1, role)?;
        out.insert(format!("block.{}.{role}", slot + 1), mean_tensor(&[a, b]))?;
    }
    for src in slot + 1..cfg.n_layers {
        copy_block(ckpt, src, &mut out, src + 1)?;
    }
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Plan application
// ---------------------------------------------------------------------------

/// Apply a plan with the default final-block reinitialization (mean of
/// the discarded blocks only).
pub fn apply_plan(ckpt: &Checkpoint, plan: &ExpansionPlan) -> Result<(Checkpoint, FreezeMask)> {
    apply_plan_with(ckpt, plan, ReinitAveraging::DiscardedOnly)
}

pub fn apply_plan_with(
    ckpt: &Checkpoint,
    plan: &ExpansionPlan,
    reinit: ReinitAveraging,
) -> Result<(Checkpoint, FreezeMask)> {
    plan.validate()?;
    let cfg = ckpt.config();
    if plan.l_original != cfg.n_layers {
        return Err(Error::PlanInvalid {
            reason: format!(
                "plan is for {} layers, checkpoint has {}",
                plan.l_original, cfg.n_layers
            ),
        });
    }
    let kept = cfg.n_layers - plan.delete_count;
    let insertions = plan.insertions();
    if plan.init_mode == InitMode::WeightAverage {
        for ins in &insertions {
            if ins.after + 1 >= kept {
                return Err(Error::WeightAverageAtLastSlot {
                    slot: ins.after,
                    n_layers: kept,
                });
            }
        }
    }

    let mut new_cfg = cfg.clone();
    new_cfg.n_layers = plan.resulting_blocks();
    let mut out = Checkpoint::empty(new_cfg.clone());
    copy_globals(ckpt, &mut out)?;

    // Walk the post-deletion originals shallow to deep, inserting after
    // the planned slots. Sources always reference original tensors.
    let mut dst = 0usize;
    let mut ins_iter = insertions.iter().peekable();
    for orig in 0..kept {
        copy_block(ckpt, orig, &mut out, dst)?;
        dst += 1;
        while ins_iter.peek().map(|ins| ins.after) == Some(orig) {
            let ins = ins_iter.next().unwrap();
            for role in BLOCK_ROLES {
                let t = match plan.init_mode {
                    InitMode::IdentityCopy => ckpt.block_tensor(ins.source, role)?.clone(),
                    InitMode::ZeroResidual => {
                        let src = ckpt.block_tensor(ins.source, role)?;
                        if role == "wo" || role == "wdown" {
                            Tensor::zeros(src.shape())
                        } else {
                            src.clone()
                        }
                    }
                    InitMode::WeightAverage => {
                        let a = ckpt.block_tensor(ins.after, role)?;
                        let b = ckpt.block_tensor(ins.after + 1, role)?;
                        mean_tensor(&[a, b])
                    }
                };
                out.insert(format!("block.{dst}.{role}"), t)?;
            }
            dst += 1;
        }
    }
    debug_assert_eq!(dst, new_cfg.n_layers);

    if plan.final_reinit() {
        let final_idx = new_cfg.n_layers - 1;
        for role in BLOCK_ROLES {
            let mut parts: Vec<&Tensor> = Vec::with_capacity(plan.delete_count + 1);
            for deleted in kept..cfg.n_layers {
                parts.push(ckpt.block_tensor(deleted, role)?);
            }
            let survivor;
            if reinit == ReinitAveraging::IncludeSurvivor {
                survivor = ckpt.block_tensor(kept - 1, role)?;
                parts.push(survivor);
            }
            out.replace(&format!("block.{final_idx}.{role}"), mean_tensor(&parts))?;
        }
    }

    out.validate()?;
    let mask = freeze_mask_for(plan, &new_cfg)?;
    Ok((out, mask))
}

/// Per-tensor mask from a plan's per-block trainable flags. Embedding,
/// head and the final norm are always frozen.
pub fn freeze_mask_for(plan: &ExpansionPlan, result_cfg: &ModelConfig) -> Result<FreezeMask> {
    let flags = plan.block_trainable();
    if flags.len() != result_cfg.n_layers {
        return Err(Error::PlanInvalid {
            reason: format!(
                "plan yields {} blocks, config has {}",
                flags.len(),
                result_cfg.n_layers
            ),
        });
    }
    let mut map = std::collections::BTreeMap::new();
    for (name, _) in tensor_specs(result_cfg) {
        let trainable = name
            .strip_prefix("block.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|idx| idx.parse::<usize>().ok())
            .map(|idx| flags[idx])
            .unwrap_or(false);
        map.insert(name, trainable);
    }
    Ok(FreezeMask::from_map(map))
}

/// Closed-form block and parameter accounting for a plan, without
/// materializing any tensors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanSummary {
    pub notation: String,
    pub init_mode: InitMode,
    pub blocks_before: usize,
    pub blocks_after: usize,
    pub n_insertions: usize,
    pub delete_count: usize,
    pub deleted_layers: Vec<usize>,
    pub final_reinit: bool,
    pub trainable_blocks: usize,
    pub trainable_block_indices: Vec<usize>,
    pub params_before: u64,
    pub params_after: u64,
    pub trainable_params: u64,
}

pub fn summarize_plan(plan: &ExpansionPlan, config: &ModelConfig) -> Result<PlanSummary> {
    plan.validate()?;
    if plan.l_original != config.n_layers {
        return Err(Error::PlanInvalid {
            reason: format!(
                "plan is for {} layers, config has {}",
                plan.l_original, config.n_layers
            ),
        });
    }
    let mut result_cfg = config.clone();
    result_cfg.n_layers = plan.resulting_blocks();
    let flags = plan.block_trainable();
    let trainable_block_indices: Vec<usize> = flags
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| t.then_some(i))
        .collect();
    Ok(PlanSummary {
        notation: plan.render(),
        init_mode: plan.init_mode,
        blocks_before: config.n_layers,
        blocks_after: plan.resulting_blocks(),
        n_insertions: plan.n_insertions(),
        delete_count: plan.delete_count,
        deleted_layers: (config.n_layers - plan.delete_count..config.n_layers).collect(),
        final_reinit: plan.final_reinit(),
        trainable_blocks: plan.n_trainable_blocks(),
        trainable_block_indices,
        params_before: params_total(config),
        params_after: params_total(&result_cfg),
        trainable_params: plan.n_trainable_blocks() as u64 * params_per_block(config),
    })
}
