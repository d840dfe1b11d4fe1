//! Integer/rational expression evaluator backing the arithmetic tool.
//!
//! Accepts +, -, *, / (also the unicode forms) with parentheses over
//! integers. Division is exact: results print as integers when the
//! denominator reduces to 1, otherwise as `p/q` in lowest terms. The tool
//! never fails a rollout — every problem becomes an `ERROR: ...` line on
//! stdout.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rational {
    num: i128,
    den: i128, // always > 0
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Rational {
    fn int(n: i128) -> Self {
        Self { num: n, den: 1 }
    }

    fn reduced(num: i128, den: i128) -> Result<Self, EvalError> {
        if den == 0 {
            return Err(EvalError::DivisionByZero);
        }
        let g = gcd(num, den).max(1);
        let sign = if den < 0 { -1 } else { 1 };
        Ok(Self { num: sign * num / g, den: sign * den / g })
    }

    fn add(self, other: Self) -> Result<Self, EvalError> {
        let num = self
            .num
            .checked_mul(other.den)
            .and_then(|a| other.num.checked_mul(self.den).and_then(|b| a.checked_add(b)))
            .ok_or(EvalError::Overflow)?;
        let den = self.den.checked_mul(other.den).ok_or(EvalError::Overflow)?;
        Self::reduced(num, den)
    }

    fn sub(self, other: Self) -> Result<Self, EvalError> {
        self.add(Self { num: -other.num, den: other.den })
    }

    fn mul(self, other: Self) -> Result<Self, EvalError> {
        let num = self.num.checked_mul(other.num).ok_or(EvalError::Overflow)?;
        let den = self.den.checked_mul(other.den).ok_or(EvalError::Overflow)?;
        Self::reduced(num, den)
    }

    fn div(self, other: Self) -> Result<Self, EvalError> {
        if other.num == 0 {
            return Err(EvalError::DivisionByZero);
        }
        let num = self.num.checked_mul(other.den).ok_or(EvalError::Overflow)?;
        let den = self.den.checked_mul(other.num).ok_or(EvalError::Overflow)?;
        Self::reduced(num, den)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
enum EvalError {
    DivisionByZero,
    Overflow,
    Parse(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::DivisionByZero => write!(f, "division by zero"),
            EvalError::Overflow => write!(f, "overflow"),
            EvalError::Parse(msg) => write!(f, "{msg}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Int(i128),
    Plus,
    Minus,
    Star,
    Slash,
    Open,
    Close,
}

fn lex(expr: &str) -> Result<Vec<Tok>, EvalError> {
    let mut toks = Vec::new();
    let mut chars = expr.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                chars.next();
            }
            '+' => {
                chars.next();
                toks.push(Tok::Plus);
            }
            '-' | '\u{2212}' => {
                chars.next();
                toks.push(Tok::Minus);
            }
            '*' | '\u{00d7}' => {
                chars.next();
                toks.push(Tok::Star);
            }
            '/' | '\u{00f7}' => {
                chars.next();
                toks.push(Tok::Slash);
            }
            '(' => {
                chars.next();
                toks.push(Tok::Open);
            }
            ')' => {
                chars.next();
                toks.push(Tok::Close);
            }
            '0'..='9' => {
                let mut n: i128 = 0;
                while let Some(&d) = chars.peek() {
                    if let Some(v) = d.to_digit(10) {
                        n = n
                            .checked_mul(10)
                            .and_then(|n| n.checked_add(i128::from(v)))
                            .ok_or(EvalError::Overflow)?;
                        chars.next();
                    } else {
                        break;
                    }
                }
                toks.push(Tok::Int(n));
            }
            other => return Err(EvalError::Parse(format!("unexpected character {other:?}"))),
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.peek();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Rational, EvalError> {
        let mut acc = self.term()?;
        while let Some(op) = self.peek() {
            match op {
                Tok::Plus => {
                    self.next();
                    acc = acc.add(self.term()?)?;
                }
                Tok::Minus => {
                    self.next();
                    acc = acc.sub(self.term()?)?;
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Rational, EvalError> {
        let mut acc = self.factor()?;
        while let Some(op) = self.peek() {
            match op {
                Tok::Star => {
                    self.next();
                    acc = acc.mul(self.factor()?)?;
                }
                Tok::Slash => {
                    self.next();
                    acc = acc.div(self.factor()?)?;
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Rational, EvalError> {
        match self.next() {
            Some(Tok::Int(n)) => Ok(Rational::int(n)),
            Some(Tok::Minus) => Ok(self.factor()?.mul(Rational::int(-1))?),
            Some(Tok::Open) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Tok::Close) => Ok(inner),
                    _ => Err(EvalError::Parse("missing closing parenthesis".into())),
                }
            }
            Some(t) => Err(EvalError::Parse(format!("unexpected token {t:?}"))),
            None => Err(EvalError::Parse("unexpected end of expression".into())),
        }
    }
}

/// Evaluates an arithmetic expression, returning the tool's stdout. Problems
/// are reported in-band: `ERROR: <reason>`.
pub fn execute_arithmetic(expr: &str) -> String {
    let result = lex(expr).and_then(|toks| {
        let mut p = Parser { toks: &toks, pos: 0 };
        let value = p.expr()?;
        if p.pos != toks.len() {
            return Err(EvalError::Parse("trailing input".into()));
        }
        Ok(value)
    });
    match result {
        Ok(v) => v.to_string(),
        Err(e) => format!("ERROR: {e}"),
    }
}
