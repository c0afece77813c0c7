//! Item generators and answer recomputation for the three tasks.
//!
//! Addition scratchpad, e.g. `27+35=` → `7+5=12,c1;2+3+1=6;=62`:
//! columns run from least significant digit; column `i` is written
//! `a_i+b_i` (plus `+c` with the incoming carry for `i > 0`, even when it
//! is 0), then `=` and the column sum, then `,c` and the outgoing carry for
//! every column but the last. Columns are joined by `;` and the response ends
//! with `;=` and the full sum. Both operands have exactly `difficulty` digits.
//!
//! Reversal: `abc|` → `cba`; difficulty is the string length.
//!
//! Modular arithmetic, e.g. `(3+4)*2 mod 5=` → `3+4=7;7*2=14;14 mod 5=4;=4`:
//! a left-deep chain of `difficulty` operations over single digits, with the
//! left operand parenthesized once it contains an operator, reduced modulo
//! `m ∈ [2, 9]`. Each step is `lhs op rhs=value`; the reduction uses the
//! non-negative remainder.

use rand::Rng;

use crate::error::{LabError, Result};

/// One generated item: prompt and response text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub prompt: String,
    pub response: String,
}

fn digits(rng: &mut impl Rng, count: u32) -> u64 {
    let lo = 10u64.pow(count - 1);
    rng.random_range(lo..lo * 10)
}

pub fn addition(rng: &mut impl Rng, difficulty: u32) -> Item {
    let a = digits(rng, difficulty);
    let b = digits(rng, difficulty);
    Item {
        prompt: format!("{a}+{b}="),
        response: addition_scratchpad(a, b, difficulty as usize),
    }
}

pub fn addition_scratchpad(a: u64, b: u64, width: usize) -> String {
    let (da, db) = (a.to_string(), b.to_string());
    let col = |s: &str, i: usize| -> u64 {
        let bytes = s.as_bytes();
        if i < bytes.len() {
            (bytes[bytes.len() - 1 - i] - b'0') as u64
        } else {
            0
        }
    };
    let mut parts = Vec::with_capacity(width + 1);
    let mut carry = 0;
    for i in 0..width {
        let (x, y) = (col(&da, i), col(&db, i));
        let sum = x + y + carry;
        let mut step = if i == 0 {
            format!("{x}+{y}={sum}")
        } else {
            format!("{x}+{y}+{carry}={sum}")
        };
        carry = sum / 10;
        if i + 1 < width {
            step.push_str(&format!(",c{carry}"));
        }
        parts.push(step);
    }
    parts.push(format!("={}", a + b));
    parts.join(";")
}

pub fn reversal(rng: &mut impl Rng, difficulty: u32) -> Item {
    let s: String = (0..difficulty)
        .map(|_| (b'a' + rng.random_range(0..26u8)) as char)
        .collect();
    Item {
        prompt: format!("{s}|"),
        response: s.chars().rev().collect(),
    }
}

const OPS: [char; 3] = ['+', '-', '*'];

fn apply(op: char, a: i64, b: i64) -> i64 {
    match op {
        '+' => a + b,
        '-' => a - b,
        _ => a * b,
    }
}

pub fn modular(rng: &mut impl Rng, difficulty: u32) -> Item {
    let modulus: i64 = rng.random_range(2..=9);
    let mut value: i64 = rng.random_range(0..=9);
    let mut expr = value.to_string();
    let mut steps = Vec::new();
    for k in 0..difficulty {
        let op = OPS[rng.random_range(0..OPS.len())];
        let rhs: i64 = rng.random_range(0..=9);
        let next = apply(op, value, rhs);
        steps.push(format!("{value}{op}{rhs}={next}"));
        expr = if k == 0 {
            format!("{expr}{op}{rhs}")
        } else {
            format!("({expr}){op}{rhs}")
        };
        value = next;
    }
    let answer = value.rem_euclid(modulus);
    steps.push(format!("{value} mod {modulus}={answer}"));
    steps.push(format!("={answer}"));
    Item {
        prompt: format!("{expr} mod {modulus}="),
        response: steps.join(";"),
    }
}

/// Expected final answer for an addition prompt `A+B=`.
pub fn addition_answer(prompt: &str) -> Result<String> {
    let body = prompt
        .strip_suffix('=')
        .ok_or_else(|| bad_prompt(prompt))?;
    let (a, b) = body.split_once('+').ok_or_else(|| bad_prompt(prompt))?;
    let a: u64 = a.parse().map_err(|_| bad_prompt(prompt))?;
    let b: u64 = b.parse().map_err(|_| bad_prompt(prompt))?;
    Ok((a + b).to_string())
}

pub fn reversal_answer(prompt: &str) -> Result<String> {
    let body = prompt.strip_suffix('|').ok_or_else(|| bad_prompt(prompt))?;
    Ok(body.chars().rev().collect())
}

/// Expected answer for `EXPR mod M=`, evaluating EXPR with the usual
/// precedence.
pub fn modular_answer(prompt: &str) -> Result<String> {
    let body = prompt.strip_suffix('=').ok_or_else(|| bad_prompt(prompt))?;
    let (expr, m) = body.rsplit_once(" mod ").ok_or_else(|| bad_prompt(prompt))?;
    let m: i64 = m.parse().map_err(|_| bad_prompt(prompt))?;
    if m < 1 {
        return Err(bad_prompt(prompt));
    }
    let mut p = Parser {
        s: expr.as_bytes(),
        pos: 0,
    };
    let v = p.expr().ok_or_else(|| bad_prompt(prompt))?;
    if p.pos != p.s.len() {
        return Err(bad_prompt(prompt));
    }
    Ok(v.rem_euclid(m).to_string())
}

fn bad_prompt(prompt: &str) -> LabError {
    LabError::InvalidInput(format!("malformed prompt {prompt:?}"))
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn expr(&mut self) -> Option<i64> {
        let mut v = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let r = self.term()?;
            v = apply(op as char, v, r);
        }
        Some(v)
    }

    fn term(&mut self) -> Option<i64> {
        let mut v = self.atom()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            v = v.checked_mul(self.atom()?)?;
        }
        Some(v)
    }

    fn atom(&mut self) -> Option<i64> {
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let v = self.expr()?;
            if self.peek() != Some(b')') {
                return None;
            }
            self.pos += 1;
            return Some(v);
        }
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos]).ok()?.parse().ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scratchpad_examples() {
        assert_eq!(addition_scratchpad(27, 35, 2), "7+5=12,c1;2+3+1=6;=62");
        assert_eq!(addition_scratchpad(75, 35, 2), "5+5=10,c1;7+3+1=11;=110");
        assert_eq!(addition_scratchpad(12, 34, 2), "2+4=6,c0;1+3+0=4;=46");
    }

    #[test]
    fn modular_answers() {
        assert_eq!(modular_answer("(3+4)*2 mod 5=").unwrap(), "4");
        assert_eq!(modular_answer("((3-7)*2)+1 mod 5=").unwrap(), "3");
        assert!(modular_answer("3+ mod 5=").is_err());
        assert!(modular_answer("3+4 mod 0=").is_err());
    }

    #[test]
    fn generated_modular_items_are_consistent() {
        let mut rng = crate::seed::rng_for(1, "t");
        for d in 1..=3 {
            for _ in 0..200 {
                let item = modular(&mut rng, d);
                let ans = modular_answer(&item.prompt).unwrap();
                assert!(item.response.ends_with(&format!(";={ans}")), "{item:?}");
                assert_eq!(item.response.matches(';').count(), d as usize + 1);
            }
        }
    }
}
