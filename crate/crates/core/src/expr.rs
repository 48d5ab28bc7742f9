//! Arithmetic expressions over named inputs, used to state measurement
//! functions in configuration files.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := unary (("*" | "/") unary)*
//! unary  := ("-" | "+") unary | power
//! power  := atom ("^" unary)?          right associative
//! atom   := number | name | func "(" expr ")" | "(" expr ")"
//! func   := exp | ln | sin | cos
//! ```
//!
//! `×`, `÷` and `−` are accepted as aliases of `*`, `/` and `-`. Numbers take
//! an optional fraction and exponent (`1.5e-3`). Names start with a letter or
//! underscore. Error positions are zero-based character offsets; running off
//! the end reports the input length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Function {
    Exp,
    Ln,
    Sin,
    Cos,
}

impl Function {
    fn from_name(name: &str) -> Option<Self> {
        match name {
            "exp" => Some(Function::Exp),
            "ln" => Some(Function::Ln),
            "sin" => Some(Function::Sin),
            "cos" => Some(Function::Cos),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Number(f64),
    Var(usize),
    Neg(Box<Expr>),
    Call(Function, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '+' | '-' | '*' | '/' | '^' => {
                out.push((i, Token::Op(c)));
                i += 1;
            }
            '×' => {
                out.push((i, Token::Op('*')));
                i += 1;
            }
            '÷' => {
                out.push((i, Token::Op('/')));
                i += 1;
            }
            '−' => {
                out.push((i, Token::Op('-')));
                i += 1;
            }
            '(' => {
                out.push((i, Token::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Token::RParen));
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let value = text.parse::<f64>().map_err(|_| Error::Parse {
                    position: start,
                    message: format!("malformed number {text:?}"),
                })?;
                out.push((start, Token::Number(value)));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push((start, Token::Ident(chars[start..i].iter().collect())));
            }
            other => {
                return Err(Error::Parse {
                    position: i,
                    message: format!("unexpected character {other:?}"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
    inputs: &'a [String],
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn position(&self) -> usize {
        self.tokens.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.position(),
            message: message.into(),
        })
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinaryOp::Add } else { BinaryOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinaryOp::Mul } else { BinaryOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Token::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Token::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinaryOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some(token) = self.peek().cloned() else {
            return self.fail("expected an operand, found end of input");
        };
        match token {
            Token::Number(v) => {
                self.pos += 1;
                Ok(Expr::Number(v))
            }
            Token::LParen => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Token::Ident(name) => {
                if let Some(func) = Function::from_name(&name) {
                    self.pos += 1;
                    if self.peek() != Some(&Token::LParen) {
                        return self.fail(format!("expected '(' after {name}"));
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                match self.inputs.iter().position(|n| *n == name) {
                    Some(idx) => {
                        self.pos += 1;
                        Ok(Expr::Var(idx))
                    }
                    None => self.fail(format!("unknown input {name:?}")),
                }
            }
            Token::RParen => self.fail("expected an operand, found ')'"),
            Token::Op(c) => self.fail(format!("expected an operand, found '{c}'")),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        if self.peek() == Some(&Token::RParen) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail("expected ')'")
        }
    }
}

/// Parsed expression bound to an ordered list of input names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub source: String,
    pub inputs: Vec<String>,
    pub tree: Expr,
}

impl Expression {
    pub fn parse(source: &str, inputs: &[String]) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            end: source.chars().count(),
            inputs,
        };
        let tree = parser.expr()?;
        if parser.pos < parser.tokens.len() {
            return parser.fail("unexpected trailing input");
        }
        Ok(Self {
            source: source.to_string(),
            inputs: inputs.to_vec(),
            tree,
        })
    }

    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        eval(&self.tree, x)
    }

    /// Exact gradient by forward-mode differentiation, one pass per input.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|i| eval_dual(&self.tree, x, i).1).collect()
    }
}

fn eval(e: &Expr, x: &[f64]) -> f64 {
    match e {
        Expr::Number(v) => *v,
        Expr::Var(i) => x[*i],
        Expr::Neg(a) => -eval(a, x),
        Expr::Call(f, a) => {
            let v = eval(a, x);
            match f {
                Function::Exp => v.exp(),
                Function::Ln => v.ln(),
                Function::Sin => v.sin(),
                Function::Cos => v.cos(),
            }
        }
        Expr::Binary(op, a, b) => {
            let (p, q) = (eval(a, x), eval(b, x));
            match op {
                BinaryOp::Add => p + q,
                BinaryOp::Sub => p - q,
                BinaryOp::Mul => p * q,
                BinaryOp::Div => p / q,
                BinaryOp::Pow => p.powf(q),
            }
        }
    }
}

/// Value and derivative with respect to input `wrt`.
fn eval_dual(e: &Expr, x: &[f64], wrt: usize) -> (f64, f64) {
    match e {
        Expr::Number(v) => (*v, 0.0),
        Expr::Var(i) => (x[*i], if *i == wrt { 1.0 } else { 0.0 }),
        Expr::Neg(a) => {
            let (v, d) = eval_dual(a, x, wrt);
            (-v, -d)
        }
        Expr::Call(f, a) => {
            let (v, d) = eval_dual(a, x, wrt);
            match f {
                Function::Exp => (v.exp(), v.exp() * d),
                Function::Ln => (v.ln(), d / v),
                Function::Sin => (v.sin(), v.cos() * d),
                Function::Cos => (v.cos(), -v.sin() * d),
            }
        }
        Expr::Binary(op, a, b) => {
            let (p, dp) = eval_dual(a, x, wrt);
            let (q, dq) = eval_dual(b, x, wrt);
            match op {
                BinaryOp::Add => (p + q, dp + dq),
                BinaryOp::Sub => (p - q, dp - dq),
                BinaryOp::Mul => (p * q, dp * q + p * dq),
                BinaryOp::Div => (p / q, (dp * q - p * dq) / (q * q)),
                BinaryOp::Pow => {
                    let v = p.powf(q);
                    let mut d = if dp != 0.0 { q * p.powf(q - 1.0) * dp } else { 0.0 };
                    if dq != 0.0 {
                        d += v * p.ln() * dq;
                    }
                    (v, d)
                }
            }
        }
    }
}
