//! Modular-arithmetic trial items of the form `ab ≡ cd (mod e)`.
//!
//! Participants judge whether `ab - cd` is divisible by `e`; the reasoning
//! agent is trained on the harder task of producing the remainder itself.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters of the canonical render, indexed by one-hot column.
pub const DICTIONARY: [char; 17] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '≡', '(', 'm', 'o', 'd', ')', ' ',
];
pub const DICT_LEN: usize = DICTIONARY.len();
/// Every canonical render is exactly this many characters long.
pub const SEQ_LEN: usize = 11;
/// Flattened length of an [`EncodedQuestion`].
pub const ENCODED_LEN: usize = SEQ_LEN * DICT_LEN;
/// Largest possible remainder (`e <= 9`).
pub const MAX_ANSWER: u8 = 8;
/// Closed-form size of the question space: 9 * 9 * 7 * sum_{b=2..9}(b - 1).
pub const QUESTION_COUNT: usize = 20_412;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MathQuestion {
    a: u8,
    b: u8,
    c: u8,
    d: u8,
    e: u8,
}

impl MathQuestion {
    pub fn new(a: u8, b: u8, c: u8, d: u8, e: u8) -> Result<Self> {
        let ok = (1..=9).contains(&a)
            && (2..=9).contains(&b)
            && (1..=9).contains(&c)
            && d >= 1
            && d < b
            && (3..=9).contains(&e);
        if !ok {
            return Err(Error::invalid(format!(
                "digits out of range: a={a} b={b} c={c} d={d} e={e}"
            )));
        }
        Ok(Self { a, b, c, d, e })
    }

    /// Builds a study-space question from its three numbers, e.g. `(34, 12, 3)`.
    pub fn from_numbers(num1: u32, num2: u32, num3: u32) -> Result<Self> {
        let q = Self::unconstrained(num1, num2, num3)?;
        Self::new(q.a, q.b, q.c, q.d, q.e)
    }

    /// Builds a question that only respects the two-digit/two-digit/one-digit
    /// format, bypassing the study-space digit ranges. `61 ≡ 26 (mod 4)` is
    /// such a question: its units digits violate `2 <= b` and `d < b`.
    pub fn unconstrained(num1: u32, num2: u32, num3: u32) -> Result<Self> {
        if !(10..100).contains(&num1) || !(10..100).contains(&num2) || !(1..=9).contains(&num3) {
            return Err(Error::invalid(format!(
                "numbers out of format: {num1}, {num2}, {num3}"
            )));
        }
        Ok(Self {
            a: (num1 / 10) as u8,
            b: (num1 % 10) as u8,
            c: (num2 / 10) as u8,
            d: (num2 % 10) as u8,
            e: num3 as u8,
        })
    }

    /// Whether the digits satisfy the study-space ranges.
    pub fn in_study_space(&self) -> bool {
        Self::new(self.a, self.b, self.c, self.d, self.e).is_ok()
    }

    pub fn digits(&self) -> [u8; 5] {
        [self.a, self.b, self.c, self.d, self.e]
    }

    pub fn num1(&self) -> i32 {
        10 * self.a as i32 + self.b as i32
    }

    pub fn num2(&self) -> i32 {
        10 * self.c as i32 + self.d as i32
    }

    pub fn num3(&self) -> i32 {
        self.e as i32
    }

    /// Non-negative remainder of `num1 - num2` modulo `num3`.
    pub fn answer(&self) -> u8 {
        (self.num1() - self.num2()).rem_euclid(self.num3()) as u8
    }

    pub fn is_divisible(&self) -> bool {
        self.answer() == 0
    }

    /// Canonical 11-character render, e.g. `61≡26(mod4)`.
    pub fn render(&self) -> String {
        format!(
            "{}{}≡{}{}(mod{})",
            self.a, self.b, self.c, self.d, self.e
        )
    }

    pub fn encode(&self) -> EncodedQuestion {
        let mut rows = [[0u8; DICT_LEN]; SEQ_LEN];
        for (row, ch) in rows.iter_mut().zip(self.render().chars()) {
            row[dict_index(ch).expect("render only uses dictionary characters")] = 1;
        }
        EncodedQuestion { rows }
    }

    /// Uniform draw over the full question space.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // d is constrained by b, so draw (b, d) jointly to stay uniform.
        let (b, d) = nth_bd_pair(rng.gen_range(0..36u8)).expect("36 (b, d) pairs");
        Self {
            a: rng.gen_range(1..=9),
            b,
            c: rng.gen_range(1..=9),
            d,
            e: rng.gen_range(3..=9),
        }
    }
}

fn nth_bd_pair(mut n: u8) -> Option<(u8, u8)> {
    for b in 2..=9u8 {
        if n < b - 1 {
            return Some((b, n + 1));
        }
        n -= b - 1;
    }
    None
}

impl fmt::Display for MathQuestion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for MathQuestion {
    type Err = Error;

    /// Parses the canonical render. Spaces are ignored so that the spaced
    /// form `61 ≡ 26 (mod 4)` is accepted too. Only the format is enforced;
    /// check [`MathQuestion::in_study_space`] where the ranges matter.
    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| *c != ' ').collect();
        let bad = || Error::invalid(format!("not a question string: {s:?}"));
        let (lhs, rest) = compact.split_once('≡').ok_or_else(bad)?;
        let (mid, tail) = rest.split_once("(mod").ok_or_else(bad)?;
        let e = tail.strip_suffix(')').ok_or_else(bad)?;
        let parse = |t: &str| t.parse::<u32>().map_err(|_| bad());
        if lhs.len() != 2 || mid.len() != 2 || e.len() != 1 {
            return Err(bad());
        }
        Self::unconstrained(parse(lhs)?, parse(mid)?, parse(e)?)
    }
}

pub fn dict_index(ch: char) -> Option<usize> {
    DICTIONARY.iter().position(|&c| c == ch)
}

/// Every valid question in lexicographic `(a, b, c, d, e)` order.
pub fn enumerate_all() -> Vec<MathQuestion> {
    let mut out = Vec::with_capacity(QUESTION_COUNT);
    for a in 1..=9 {
        for b in 2..=9 {
            for c in 1..=9 {
                for d in 1..b {
                    for e in 3..=9 {
                        out.push(MathQuestion { a, b, c, d, e });
                    }
                }
            }
        }
    }
    out
}

/// One-hot `11 x 17` matrix of a canonical render.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedQuestion {
    rows: [[u8; DICT_LEN]; SEQ_LEN],
}

impl EncodedQuestion {
    pub fn rows(&self) -> &[[u8; DICT_LEN]; SEQ_LEN] {
        &self.rows
    }

    /// Column of the hot entry in each row.
    pub fn indices(&self) -> [usize; SEQ_LEN] {
        let mut out = [0; SEQ_LEN];
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().position(|&v| v == 1).unwrap_or(DICT_LEN - 1);
        }
        out
    }

    /// Row-major flattening into `out`, which must hold [`ENCODED_LEN`] values.
    pub fn write_flat<T: num_traits::Float>(&self, out: &mut [T]) {
        assert_eq!(out.len(), ENCODED_LEN);
        for (chunk, row) in out.chunks_mut(DICT_LEN).zip(&self.rows) {
            for (o, &v) in chunk.iter_mut().zip(row) {
                *o = if v == 1 { T::one() } else { T::zero() };
            }
        }
    }

    pub fn flat<T: num_traits::Float>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); ENCODED_LEN];
        self.write_flat(&mut v);
        v
    }

    pub fn decode(&self) -> String {
        self.indices().iter().map(|&i| DICTIONARY[i]).collect()
    }
}

/// CSV row for question exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRow {
    pub num1: i32,
    pub num2: i32,
    pub num3: i32,
    pub answer: u8,
    pub divisible: bool,
}

impl From<&MathQuestion> for QuestionRow {
    fn from(q: &MathQuestion) -> Self {
        Self {
            num1: q.num1(),
            num2: q.num2(),
            num3: q.num3(),
            answer: q.answer(),
            divisible: q.is_divisible(),
        }
    }
}

pub fn write_questions_csv<W: std::io::Write>(questions: &[MathQuestion], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for q in questions {
        wtr.serialize(QuestionRow::from(q))?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
