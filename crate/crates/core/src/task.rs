//! Synthetic staged-reasoning task over 3x3 digit grids.
//!
//! Each example is a grid "image" plus a question. The gold response has four
//! stages, each opened by a reserved delimiter:
//!
//! ```text
//! [SUMMARY] qtype operands [CAPTION] g0..g8 [REASONING] steps.. [ANSWER] d1 d0 [EOS]
//! ```
//!
//! Reasoning steps by question type:
//! * row/column sum: `cell, partial sum (2 digits)` three times
//! * grid max: the running maximum after each of the 9 cells
//! * cell compare: both cell values, then `<`, `=` or `>`
//!
//! Answers are always two digit tokens (sums top out at 27).

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Token = u32;

pub mod vocab {
    use super::Token;

    pub const PAD: Token = 10;
    pub const BOS: Token = 11;
    pub const EOS: Token = 12;
    pub const IMAGE: Token = 13;
    pub const SEP: Token = 14;
    /// Correction instruction marker appended after a previous attempt.
    pub const CORRECT: Token = 15;
    pub const Q_ROW_SUM: Token = 16;
    pub const Q_COL_SUM: Token = 17;
    pub const Q_GRID_MAX: Token = 18;
    pub const Q_CELL_CMP: Token = 19;
    pub const SUMMARY: Token = 20;
    pub const CAPTION: Token = 21;
    pub const REASONING: Token = 22;
    pub const ANSWER: Token = 23;
    pub const LESS: Token = 24;
    pub const EQUAL: Token = 25;
    pub const GREATER: Token = 26;

    pub const SIZE: usize = 27;

    /// Stage delimiters in order.
    pub const STAGES: [Token; 4] = [SUMMARY, CAPTION, REASONING, ANSWER];

    pub fn digit(d: u8) -> Token {
        debug_assert!(d < 10);
        Token::from(d)
    }

    pub fn is_digit(t: Token) -> bool {
        t < 10
    }

    pub fn name(t: Token) -> String {
        match t {
            0..=9 => t.to_string(),
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            IMAGE => "<image>".into(),
            SEP => "<sep>".into(),
            CORRECT => "<correct>".into(),
            Q_ROW_SUM => "<row_sum>".into(),
            Q_COL_SUM => "<col_sum>".into(),
            Q_GRID_MAX => "<grid_max>".into(),
            Q_CELL_CMP => "<cell_cmp>".into(),
            SUMMARY => "<summary>".into(),
            CAPTION => "<caption>".into(),
            REASONING => "<reasoning>".into(),
            ANSWER => "<answer>".into(),
            LESS => "<".into(),
            EQUAL => "=".into(),
            GREATER => ">".into(),
            _ => format!("<unk:{t}>"),
        }
    }

    /// `(id, name)` for every token, for the table written next to datasets.
    pub fn table() -> Vec<(Token, String)> {
        (0..SIZE as Token).map(|t| (t, name(t))).collect()
    }

    pub fn render(tokens: &[Token]) -> String {
        tokens.iter().map(|&t| name(t)).collect::<Vec<_>>().join(" ")
    }
}

pub const GRID_CELLS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    RowSum(u8),
    ColSum(u8),
    GridMax,
    CellCompare(u8, u8),
}

impl TaskKind {
    pub fn type_index(self) -> usize {
        match self {
            TaskKind::RowSum(_) => 0,
            TaskKind::ColSum(_) => 1,
            TaskKind::GridMax => 2,
            TaskKind::CellCompare(..) => 3,
        }
    }

    /// Question tokens: type tag followed by operands.
    pub fn tokens(self) -> Vec<Token> {
        match self {
            TaskKind::RowSum(r) => vec![vocab::Q_ROW_SUM, vocab::digit(r)],
            TaskKind::ColSum(c) => vec![vocab::Q_COL_SUM, vocab::digit(c)],
            TaskKind::GridMax => vec![vocab::Q_GRID_MAX],
            TaskKind::CellCompare(p, q) => {
                vec![vocab::Q_CELL_CMP, vocab::digit(p), vocab::digit(q)]
            }
        }
    }

    pub fn parse(tokens: &[Token]) -> Option<Self> {
        let operand = |i: usize, max: Token| {
            tokens
                .get(i)
                .copied()
                .filter(|&t| t < max)
                .map(|t| t as u8)
        };
        match (tokens.first().copied()?, tokens.len()) {
            (vocab::Q_ROW_SUM, 2) => Some(TaskKind::RowSum(operand(1, 3)?)),
            (vocab::Q_COL_SUM, 2) => Some(TaskKind::ColSum(operand(1, 3)?)),
            (vocab::Q_GRID_MAX, 1) => Some(TaskKind::GridMax),
            (vocab::Q_CELL_CMP, 3) => Some(TaskKind::CellCompare(operand(1, 9)?, operand(2, 9)?)),
            _ => None,
        }
    }
}

/// Relative weights of row-sum, column-sum, grid-max and cell-compare questions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMix(pub [f64; 4]);

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix([1.0; 4])
    }
}

impl TaskMix {
    pub fn validate(&self) -> Result<(), crate::Error> {
        let ok = self.0.iter().all(|w| w.is_finite() && *w >= 0.0) && self.0.iter().sum::<f64>() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid task mix {:?}", self.0)))
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        let total: f64 = self.0.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in self.0.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        // only reachable through rounding at the top end
        self.0.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

/// The model-visible part of an example: grid image and question, no gold labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    /// Image marker followed by the 9 grid digits.
    pub image: Vec<Token>,
    /// Question type tag followed by operands.
    pub question: Vec<Token>,
}

impl Question {
    pub fn new(grid: [u8; GRID_CELLS], kind: TaskKind) -> Self {
        let mut image = Vec::with_capacity(GRID_CELLS + 1);
        image.push(vocab::IMAGE);
        image.extend(grid.iter().map(|&d| vocab::digit(d)));
        Self {
            image,
            question: kind.tokens(),
        }
    }

    pub fn grid_tokens(&self) -> &[Token] {
        &self.image[1..]
    }

    /// `BOS ⊕ image ⊕ question`, the input `x` of every context layout.
    pub fn input_tokens(&self) -> Vec<Token> {
        let mut x = Vec::with_capacity(1 + self.image.len() + self.question.len());
        x.push(vocab::BOS);
        x.extend_from_slice(&self.image);
        x.extend_from_slice(&self.question);
        x
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(flatten)]
    pub question: Question,
    pub gold_response: Vec<Token>,
    pub gold_answer: Vec<Token>,
    pub seed: u64,
}

pub fn solve(grid: &[u8; GRID_CELLS], kind: TaskKind) -> u8 {
    match kind {
        TaskKind::RowSum(r) => (0..3).map(|j| grid[3 * r as usize + j]).sum(),
        TaskKind::ColSum(c) => (0..3).map(|i| grid[3 * i + c as usize]).sum(),
        TaskKind::GridMax => *grid.iter().max().expect("nine cells"),
        TaskKind::CellCompare(p, q) => grid[p as usize].max(grid[q as usize]),
    }
}

pub fn encode_answer(value: u8) -> Vec<Token> {
    debug_assert!(value < 100);
    vec![vocab::digit(value / 10), vocab::digit(value % 10)]
}

pub fn decode_answer(tokens: &[Token]) -> Option<u8> {
    match tokens {
        [a, b] if vocab::is_digit(*a) && vocab::is_digit(*b) => Some((a * 10 + b) as u8),
        _ => None,
    }
}

fn reasoning_steps(grid: &[u8; GRID_CELLS], kind: TaskKind) -> Vec<Token> {
    let mut steps = Vec::new();
    let running_sum = |cells: [usize; 3], steps: &mut Vec<Token>| {
        let mut acc = 0u8;
        for c in cells {
            acc += grid[c];
            steps.push(vocab::digit(grid[c]));
            steps.extend(encode_answer(acc));
        }
    };
    match kind {
        TaskKind::RowSum(r) => {
            let r = r as usize;
            running_sum([3 * r, 3 * r + 1, 3 * r + 2], &mut steps);
        }
        TaskKind::ColSum(c) => {
            let c = c as usize;
            running_sum([c, c + 3, c + 6], &mut steps);
        }
        TaskKind::GridMax => {
            let mut m = 0;
            for &g in grid {
                m = m.max(g);
                steps.push(vocab::digit(m));
            }
        }
        TaskKind::CellCompare(p, q) => {
            let (a, b) = (grid[p as usize], grid[q as usize]);
            steps.push(vocab::digit(a));
            steps.push(vocab::digit(b));
            steps.push(match a.cmp(&b) {
                std::cmp::Ordering::Less => vocab::LESS,
                std::cmp::Ordering::Equal => vocab::EQUAL,
                std::cmp::Ordering::Greater => vocab::GREATER,
            });
        }
    }
    steps
}

/// The deterministic four-stage gold response for `(grid, kind)`.
pub fn gold_response(grid: &[u8; GRID_CELLS], kind: TaskKind) -> Vec<Token> {
    let mut out = vec![vocab::SUMMARY];
    out.extend(kind.tokens());
    out.push(vocab::CAPTION);
    out.extend(grid.iter().map(|&d| vocab::digit(d)));
    out.push(vocab::REASONING);
    out.extend(reasoning_steps(grid, kind));
    out.push(vocab::ANSWER);
    out.extend(encode_answer(solve(grid, kind)));
    out.push(vocab::EOS);
    out
}

pub fn example_from_parts(grid: [u8; GRID_CELLS], kind: TaskKind, seed: u64) -> Example {
    let gold_response = gold_response(&grid, kind);
    Example {
        question: Question::new(grid, kind),
        gold_answer: encode_answer(solve(&grid, kind)),
        gold_response,
        seed,
    }
}

/// Draws one example; `seed` is recorded on the example for provenance.
pub fn generate_example(rng: &mut impl Rng, mix: &TaskMix, seed: u64) -> Example {
    let mut grid = [0u8; GRID_CELLS];
    for g in &mut grid {
        *g = rng.gen_range(0..10);
    }
    let kind = match mix.draw(rng) {
        0 => TaskKind::RowSum(rng.gen_range(0..3)),
        1 => TaskKind::ColSum(rng.gen_range(0..3)),
        2 => TaskKind::GridMax,
        _ => {
            let p = rng.gen_range(0..9u8);
            let mut q = rng.gen_range(0..8u8);
            if q >= p {
                q += 1;
            }
            TaskKind::CellCompare(p, q)
        }
    };
    example_from_parts(grid, kind, seed)
}

/// Deterministic dataset: example `k` is drawn from its own stream of `seed`.
pub fn generate_dataset(seed: u64, n: usize, mix: &TaskMix) -> Vec<Example> {
    (0..n)
        .map(|k| {
            let s = crate::rng::derive_seed(seed, "example", k as u64);
            let mut rng = crate::rng::stream(s);
            generate_example(&mut rng, mix, s)
        })
        .collect()
}

/// Delimiter positions of a well-formed response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLayout {
    /// Index of each stage delimiter.
    pub delimiters: [usize; 4],
    /// Index of the end-of-sequence token.
    pub eos: usize,
}

impl StageLayout {
    /// Parses a response, ignoring anything after the first EOS. Well-formed
    /// means: starts with the summary delimiter, all four delimiters appear
    /// exactly once and in order, and an EOS terminates the answer stage.
    pub fn parse(response: &[Token]) -> Option<Self> {
        let eos = response.iter().position(|&t| t == vocab::EOS)?;
        let body = &response[..eos];
        let mut delimiters = [0usize; 4];
        for (k, &d) in vocab::STAGES.iter().enumerate() {
            let mut hits = body.iter().enumerate().filter(|(_, &t)| t == d);
            let (pos, _) = hits.next()?;
            if hits.next().is_some() {
                return None;
            }
            delimiters[k] = pos;
        }
        if delimiters[0] != 0 || delimiters.windows(2).any(|w| w[0] >= w[1]) {
            return None;
        }
        Some(Self { delimiters, eos })
    }

    /// Payload of stage `k` (0-based), delimiter excluded.
    pub fn stage(&self, response: &[Token], k: usize) -> std::ops::Range<usize> {
        let start = self.delimiters[k] + 1;
        let end = if k + 1 < 4 { self.delimiters[k + 1] } else { self.eos };
        let _ = response;
        start..end
    }
}

thread_local! {
    static ORACLE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of answer-oracle invocations on the current thread, for audits that
/// a code path never consults gold labels.
pub fn oracle_calls() -> u64 {
    ORACLE_CALLS.with(Cell::get)
}

/// Stage-4 payload of a well-formed response, if non-empty.
pub fn extract_answer(response: &[Token]) -> Option<Vec<Token>> {
    let layout = StageLayout::parse(response)?;
    let payload = &response[layout.stage(response, 3)];
    (!payload.is_empty()).then(|| payload.to_vec())
}

/// The oracle verifier: exact token match of the extracted answer.
pub fn check_answer(example: &Example, response: &[Token]) -> bool {
    ORACLE_CALLS.with(|c| c.set(c.get() + 1));
    extract_answer(response).is_some_and(|a| a == example.gold_answer)
}
