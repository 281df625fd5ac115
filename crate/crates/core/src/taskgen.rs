//! Procedural generation of symbolic Raven-style matrix puzzles.
//!
//! A puzzle is a 3x3 grid of panels where the last panel is missing. Each
//! panel holds a fixed number of slots (depending on the task configuration)
//! and each slot carries a (shape, size, color) attribute triple. One rule
//! per attribute governs how values evolve along each row; the solver must
//! pick the choice panel that completes the third row.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Attribute domains: shape in 0..5, size in 0..6, color in 0..10.
pub const SHAPE_DOMAIN: u8 = 5;
pub const SIZE_DOMAIN: u8 = 6;
pub const COLOR_DOMAIN: u8 = 10;

/// Largest slot count over all task configurations.
pub const MAX_SLOTS: usize = 9;
/// Width of a one-hot slot block: shape + size + color domains.
pub const SLOT_BLOCK: usize =
    (SHAPE_DOMAIN + SIZE_DOMAIN + COLOR_DOMAIN) as usize;
/// Fixed panel feature dimension: 9 slot blocks plus a 7-way config one-hot.
pub const PANEL_DIM: usize = MAX_SLOTS * SLOT_BLOCK + 7;

pub const NUM_CONTEXT: usize = 8;
pub const NUM_CHOICES: usize = 8;

/// The seven task configurations. Each one defines a continual-learning task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Center,
    TwoByTwoGrid,
    ThreeByThreeGrid,
    LeftRight,
    UpDown,
    OutInCenter,
    OutInGrid,
}

impl TaskKind {
    /// Canonical enumeration order, used for stable indexing and pooling.
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Center,
        TaskKind::TwoByTwoGrid,
        TaskKind::ThreeByThreeGrid,
        TaskKind::LeftRight,
        TaskKind::UpDown,
        TaskKind::OutInCenter,
        TaskKind::OutInGrid,
    ];

    /// Number of slots a panel of this configuration carries.
    pub fn slot_count(self) -> usize {
        match self {
            TaskKind::Center => 1,
            TaskKind::TwoByTwoGrid => 4,
            TaskKind::ThreeByThreeGrid => 9,
            TaskKind::LeftRight => 2,
            TaskKind::UpDown => 2,
            TaskKind::OutInCenter => 2,
            TaskKind::OutInGrid => 5,
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Center => "center",
            TaskKind::TwoByTwoGrid => "two_by_two_grid",
            TaskKind::ThreeByThreeGrid => "three_by_three_grid",
            TaskKind::LeftRight => "left_right",
            TaskKind::UpDown => "up_down",
            TaskKind::OutInCenter => "out_in_center",
            TaskKind::OutInGrid => "out_in_grid",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One slot of a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub shape: u8,
    pub size: u8,
    pub color: u8,
}

/// A panel: `slot_count` attribute triples for the owning configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Panel {
    pub slots: Vec<Slot>,
}

/// The three attributes a rule can act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attr {
    Shape,
    Size,
    Color,
}

impl Attr {
    pub const ALL: [Attr; 3] = [Attr::Shape, Attr::Size, Attr::Color];

    fn idx(self) -> usize {
        match self {
            Attr::Shape => 0,
            Attr::Size => 1,
            Attr::Color => 2,
        }
    }

    pub fn domain(self) -> u8 {
        match self {
            Attr::Shape => SHAPE_DOMAIN,
            Attr::Size => SIZE_DOMAIN,
            Attr::Color => COLOR_DOMAIN,
        }
    }

    fn get(self, slot: &Slot) -> u8 {
        match self {
            Attr::Shape => slot.shape,
            Attr::Size => slot.size,
            Attr::Color => slot.color,
        }
    }

    fn set(self, slot: &mut Slot, value: u8) {
        match self {
            Attr::Shape => slot.shape = value,
            Attr::Size => slot.size = value,
            Attr::Color => slot.color = value,
        }
    }
}

/// Row-wise rule for a single attribute. Progression and Arithmetic wrap
/// modulo the attribute domain, so every draw yields a valid row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrRule {
    Constant,
    Progression { step: i8 },
    Arithmetic { plus: bool },
    /// Rows are permutations of one fixed triple of distinct values.
    DistributeThree { triple: [u8; 3] },
}

/// One rule per attribute, applied identically to all three rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleSpec {
    pub shape: AttrRule,
    pub size: AttrRule,
    pub color: AttrRule,
}

impl RuleSpec {
    pub fn rule_for(&self, attr: Attr) -> AttrRule {
        match attr {
            Attr::Shape => self.shape,
            Attr::Size => self.size,
            Attr::Color => self.color,
        }
    }
}

/// One puzzle: 8 context panels, 8 choice panels, the answer index and the
/// rules that generated it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RpmProblem {
    pub kind: TaskKind,
    pub context: Vec<Panel>,
    pub choices: Vec<Panel>,
    pub answer: usize,
    pub rules: RuleSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
        }
    }
}

/// A generated problem set. Regenerating with the same seed reproduces it
/// bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: TaskKind,
    pub split: Split,
    pub seed: u64,
    pub problems: Vec<RpmProblem>,
}

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("could not build a unique choice set after {0} retries (degenerate rule/domain combination)")]
    DegenerateChoices(usize),
    #[error("expected exactly one rule-consistent choice, found {matches}")]
    AmbiguousSolution { matches: usize },
    #[error("dataset file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Applies one attribute rule to the first two values of a row and returns
/// the third. Arithmetic and Progression wrap modulo the domain.
pub fn apply_rule(rule: AttrRule, first: u8, second: u8, domain: u8) -> u8 {
    let d = domain as i16;
    match rule {
        AttrRule::Constant => first,
        AttrRule::Progression { step } => {
            (second as i16 + step as i16).rem_euclid(d) as u8
        }
        AttrRule::Arithmetic { plus } => {
            let raw = if plus {
                first as i16 + second as i16
            } else {
                first as i16 - second as i16
            };
            raw.rem_euclid(d) as u8
        }
        AttrRule::DistributeThree { triple } => triple
            .iter()
            .copied()
            .find(|v| *v != first && *v != second)
            .unwrap_or(triple[2]),
    }
}

/// Each configuration draws its attribute values from its own contiguous
/// window of the domain. Distant configurations share few values, so their
/// rule instances exercise different parts of the value space; rule outputs
/// still wrap modulo the full domain.
pub fn attr_window(kind: TaskKind, attr: Attr) -> (u8, u8) {
    let domain = attr.domain();
    let width = match attr {
        Attr::Shape => 3,
        Attr::Size => 3,
        Attr::Color => 5,
    };
    let span = (domain - width) as u16;
    let start = (kind.index() as u16 * span / 6) as u8;
    (start, width)
}

fn draw_window_value(kind: TaskKind, attr: Attr, rng: &mut StdRng) -> u8 {
    let (start, width) = attr_window(kind, attr);
    start + rng.gen_range(0..width)
}

/// Draws a non-constant rule for the problem's active attribute.
fn draw_active_rule(kind: TaskKind, attr: Attr, rng: &mut StdRng) -> AttrRule {
    match rng.gen_range(0..3u8) {
        0 => {
            let step = *[-2i8, -1, 1, 2].choose(rng).unwrap();
            AttrRule::Progression { step }
        }
        1 => AttrRule::Arithmetic { plus: rng.gen::<bool>() },
        _ => {
            let (start, width) = attr_window(kind, attr);
            let mut values: Vec<u8> = (start..start + width).collect();
            values.shuffle(rng);
            AttrRule::DistributeThree { triple: [values[0], values[1], values[2]] }
        }
    }
}

/// Fills one row of three values for an attribute. Start values come from
/// the configuration's window; rule outputs wrap modulo the full domain.
fn draw_row(rule: AttrRule, kind: TaskKind, attr: Attr, rng: &mut StdRng) -> [u8; 3] {
    let domain = attr.domain();
    match rule {
        AttrRule::Constant => {
            let a = draw_window_value(kind, attr, rng);
            [a, a, a]
        }
        AttrRule::Progression { step } => {
            let a = draw_window_value(kind, attr, rng) as i16;
            let d = domain as i16;
            let s = step as i16;
            [a as u8, (a + s).rem_euclid(d) as u8, (a + 2 * s).rem_euclid(d) as u8]
        }
        AttrRule::Arithmetic { plus } => {
            let a = draw_window_value(kind, attr, rng);
            let b = draw_window_value(kind, attr, rng);
            [a, b, apply_rule(AttrRule::Arithmetic { plus }, a, b, domain)]
        }
        AttrRule::DistributeThree { triple } => {
            let mut order = [0usize, 1, 2];
            order.shuffle(rng);
            [triple[order[0]], triple[order[1]], triple[order[2]]]
        }
    }
}

/// Generates one problem. Distractors perturb 1-3 attribute values of the
/// answer panel; uniqueness is enforced by resampling, and the whole draw is
/// retried from scratch if a choice set cannot be completed.
pub fn generate_problem(kind: TaskKind, rng: &mut StdRng) -> Result<RpmProblem, TaskGenError> {
    const MAX_RETRIES: usize = 100;
    for _ in 0..MAX_RETRIES {
        if let Some(problem) = try_generate(kind, rng) {
            debug_assert_eq!(solve_by_rules(&problem).ok(), Some(problem.answer));
            return Ok(problem);
        }
    }
    Err(TaskGenError::DegenerateChoices(MAX_RETRIES))
}

/// How many attributes per problem carry a non-constant rule.
const ACTIVE_ATTRS: usize = 2;

fn try_generate(kind: TaskKind, rng: &mut StdRng) -> Option<RpmProblem> {
    let slots = kind.slot_count();

    // A fixed number of attributes carry non-constant rules shared by every
    // slot; the rest stay Constant with per-slot values. Every slot of
    // every panel satisfies its attribute rule row-wise.
    let mut attrs = Attr::ALL;
    attrs.shuffle(rng);
    let active = &attrs[..ACTIVE_ATTRS];
    let pick = |attr: Attr, rng: &mut StdRng| {
        if active.contains(&attr) {
            draw_active_rule(kind, attr, rng)
        } else {
            AttrRule::Constant
        }
    };
    let rules = RuleSpec {
        shape: pick(Attr::Shape, rng),
        size: pick(Attr::Size, rng),
        color: pick(Attr::Color, rng),
    };

    // grid[row][col] holds the full 3x3 panel grid; the answer is grid[2][2].
    let empty = Panel { slots: vec![Slot { shape: 0, size: 0, color: 0 }; slots] };
    let mut grid = vec![[empty.clone(), empty.clone(), empty.clone()]; 3];
    for row in 0..3 {
        let mut row_values = [[0u8; 3]; 3];
        for attr in Attr::ALL {
            let rule = rules.rule_for(attr);
            if rule != AttrRule::Constant {
                row_values[attr.idx()] = draw_row(rule, kind, attr, rng);
            }
        }
        for slot in 0..slots {
            for attr in Attr::ALL {
                let values = if rules.rule_for(attr) != AttrRule::Constant {
                    row_values[attr.idx()]
                } else {
                    draw_row(AttrRule::Constant, kind, attr, rng)
                };
                for col in 0..3 {
                    attr.set(&mut grid[row][col].slots[slot], values[col]);
                }
            }
        }
    }

    let answer_panel = grid[2][2].clone();
    let mut taken: HashSet<Panel> = HashSet::new();
    taken.insert(answer_panel.clone());

    let mut distractors = Vec::with_capacity(NUM_CHOICES - 1);
    for _ in 0..NUM_CHOICES - 1 {
        let mut ok = false;
        for _ in 0..100 {
            let candidate = perturb_panel(&answer_panel, kind, rng);
            if taken.insert(candidate.clone()) {
                distractors.push(candidate);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }

    let answer = rng.gen_range(0..NUM_CHOICES);
    let mut choices = Vec::with_capacity(NUM_CHOICES);
    let mut rest = distractors.into_iter();
    for i in 0..NUM_CHOICES {
        if i == answer {
            choices.push(answer_panel.clone());
        } else {
            choices.push(rest.next().unwrap());
        }
    }

    let mut context = Vec::with_capacity(NUM_CONTEXT);
    for (row, row_panels) in grid.iter().enumerate() {
        for (col, panel) in row_panels.iter().enumerate() {
            if row == 2 && col == 2 {
                continue;
            }
            context.push(panel.clone());
        }
    }

    Some(RpmProblem { kind, context, choices, answer, rules })
}

/// Changes 1-3 attribute values of a panel, each to a different value drawn
/// from the configuration's palette.
fn perturb_panel(panel: &Panel, kind: TaskKind, rng: &mut StdRng) -> Panel {
    let slots = panel.slots.len();
    let positions = slots * 3;
    let n = rng.gen_range(1..=3usize.min(positions));
    let mut picked: Vec<usize> = (0..positions).collect();
    picked.shuffle(rng);
    let mut out = panel.clone();
    for &pos in picked.iter().take(n) {
        let slot = pos / 3;
        let attr = Attr::ALL[pos % 3];
        let current = attr.get(&out.slots[slot]);
        let (start, width) = attr_window(kind, attr);
        let mut idx = rng.gen_range(0..width);
        if start + idx == current {
            idx = (idx + 1) % width;
        }
        attr.set(&mut out.slots[slot], start + idx);
    }
    out
}

/// Rule-based oracle: finds the unique choice whose every slot attribute
/// matches the rule applied to the third row's first two panels.
pub fn solve_by_rules(problem: &RpmProblem) -> Result<usize, TaskGenError> {
    let slots = problem.kind.slot_count();
    let left = &problem.context[6];
    let mid = &problem.context[7];

    let mut expected = Panel { slots: vec![Slot { shape: 0, size: 0, color: 0 }; slots] };
    for slot in 0..slots {
        for attr in Attr::ALL {
            let value = apply_rule(
                problem.rules.rule_for(attr),
                attr.get(&left.slots[slot]),
                attr.get(&mid.slots[slot]),
                attr.domain(),
            );
            attr.set(&mut expected.slots[slot], value);
        }
    }

    let matches: Vec<usize> = problem
        .choices
        .iter()
        .enumerate()
        .filter(|(_, choice)| **choice == expected)
        .map(|(i, _)| i)
        .collect();
    match matches.as_slice() {
        [only] => Ok(*only),
        other => Err(TaskGenError::AmbiguousSolution { matches: other.len() }),
    }
}

/// Indices of the active dimensions in the fixed 196-dim panel encoding.
pub fn panel_feature_indices(panel: &Panel, kind: TaskKind) -> Vec<u16> {
    let mut idx = Vec::with_capacity(panel.slots.len() * 3 + 1);
    for (slot_i, slot) in panel.slots.iter().enumerate() {
        let base = slot_i * SLOT_BLOCK;
        idx.push((base + slot.shape as usize) as u16);
        idx.push((base + SHAPE_DOMAIN as usize + slot.size as usize) as u16);
        idx.push((base + (SHAPE_DOMAIN + SIZE_DOMAIN) as usize + slot.color as usize) as u16);
    }
    idx.push((MAX_SLOTS * SLOT_BLOCK + kind.index()) as u16);
    idx
}

/// Dense one-hot encoding of a panel; dimension is always [`PANEL_DIM`].
pub fn encode_panel(panel: &Panel, kind: TaskKind) -> Vec<f64> {
    let mut v = vec![0.0; PANEL_DIM];
    for i in panel_feature_indices(panel, kind) {
        v[i as usize] = 1.0;
    }
    v
}

/// Generates disjoint train/test datasets for one configuration.
/// Deterministic in (kind, sizes, seed).
pub fn generate_dataset(
    kind: TaskKind,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), TaskGenError> {
    let mut rng = StdRng::seed_from_u64(crate::config::mix_seed(seed, kind.index() as u64));
    let mut seen: HashSet<RpmProblem> = HashSet::new();
    let mut draw = |rng: &mut StdRng, n: usize| -> Result<Vec<RpmProblem>, TaskGenError> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = generate_problem(kind, rng)?;
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        Ok(out)
    };
    let train = draw(&mut rng, n_train)?;
    let test = draw(&mut rng, n_test)?;
    Ok((
        Dataset { kind, split: Split::Train, seed, problems: train },
        Dataset { kind, split: Split::Test, seed, problems: test },
    ))
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema: u32,
    kind: TaskKind,
    split: Split,
    seed: u64,
    count: usize,
}

const DATASET_SCHEMA: u32 = 1;

impl Dataset {
    /// Writes the dataset as line-delimited JSON: a header record followed by
    /// one problem per line. Round-trips bit-exactly.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TaskGenError> {
        let header = DatasetHeader {
            schema: DATASET_SCHEMA,
            kind: self.kind,
            split: self.split,
            seed: self.seed,
            count: self.problems.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for p in &self.problems {
            writeln!(w, "{}", serde_json::to_string(p).expect("problem serializes"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TaskGenError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, TaskGenError> {
        let fmt = |reason: String| TaskGenError::Format {
            path: path.display().to_string(),
            reason,
        };
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| fmt("missing header line".into()))??;
        let header: DatasetHeader =
            serde_json::from_str(&header_line).map_err(|e| fmt(format!("bad header: {e}")))?;
        if header.schema != DATASET_SCHEMA {
            return Err(fmt(format!(
                "unsupported schema {} (expected {DATASET_SCHEMA})",
                header.schema
            )));
        }
        let mut problems = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let p: RpmProblem =
                serde_json::from_str(&line).map_err(|e| fmt(format!("bad problem record: {e}")))?;
            problems.push(p);
        }
        if problems.len() != header.count {
            return Err(fmt(format!(
                "header count {} does not match {} records",
                header.count,
                problems.len()
            )));
        }
        Ok(Dataset { kind: header.kind, split: header.split, seed: header.seed, problems })
    }
}
