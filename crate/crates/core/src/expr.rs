//! Closed-form scalar expressions in the coordinates `x1, x2, x3`.
//!
//! The grammar is intentionally small: arithmetic, `^`, comparisons (which
//! evaluate to `1` or `0` and so double as indicators), the constant `pi`, and
//! the functions `sin cos tan exp ln sqrt abs floor min max step if`.
//!
//! ```
//! use filmrelax::expr::Expr;
//! let e = Expr::parse("if(x3 < 0, 1, 3) * (1 + x1^2)").unwrap();
//! assert_eq!(e.eval([2.0, 0.0, 0.5]), 15.0);
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unexpected character '{ch}' at offset {pos} in \"{src}\"")]
    UnexpectedChar { src: String, pos: usize, ch: char },
    #[error("unexpected end of expression \"{0}\"")]
    UnexpectedEnd(String),
    #[error("unexpected token at offset {pos} in \"{src}\"")]
    UnexpectedToken { src: String, pos: usize },
    #[error("unknown identifier '{name}' in \"{src}\"")]
    UnknownIdent { src: String, name: String },
    #[error("function '{name}' takes {expected} argument(s), got {got}")]
    Arity { name: String, expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Floor,
    Step,
    Min,
    Max,
    If,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "tan" => (Func::Tan, 1),
            "exp" => (Func::Exp, 1),
            "ln" | "log" => (Func::Ln, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "floor" => (Func::Floor, 1),
            "step" => (Func::Step, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            "if" => (Func::If, 3),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    fn eval(&self, x: &[f64; 3]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(i) => x[*i],
            Node::Neg(a) => -a.eval(x),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(x), b.eval(x));
                let truth = |t: bool| if t { 1.0 } else { 0.0 };
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                    BinOp::Lt => truth(a < b),
                    BinOp::Le => truth(a <= b),
                    BinOp::Gt => truth(a > b),
                    BinOp::Ge => truth(a >= b),
                }
            }
            Node::Call(f, args) => {
                let a = args[0].eval(x);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tan => a.tan(),
                    Func::Exp => a.exp(),
                    Func::Ln => a.ln(),
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                    Func::Floor => a.floor(),
                    Func::Step => {
                        if a >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Func::Min => a.min(args[1].eval(x)),
                    Func::Max => a.max(args[1].eval(x)),
                    Func::If => {
                        if a != 0.0 {
                            args[1].eval(x)
                        } else {
                            args[2].eval(x)
                        }
                    }
                }
            }
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Node::Num(_) => true,
            Node::Var(_) => false,
            Node::Neg(a) => a.is_constant(),
            Node::Bin(_, a, b) => a.is_constant() && b.is_constant(),
            Node::Call(_, args) => args.iter().all(Node::is_constant),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    Le,
    Ge,
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let bytes: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == '.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == 'e' || bytes[i] == 'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == '+' || bytes[j] == '-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = bytes[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| ExprError::UnexpectedChar {
                src: src.to_string(),
                pos: start,
                ch: c,
            })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                i += 1;
            }
            out.push((start, Tok::Ident(bytes[start..i].iter().collect())));
        } else {
            let tok = match c {
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                '<' | '>' if bytes.get(i + 1) == Some(&'=') => {
                    i += 1;
                    if c == '<' {
                        Tok::Le
                    } else {
                        Tok::Ge
                    }
                }
                '+' | '-' | '*' | '/' | '^' | '<' | '>' => Tok::Op(c),
                _ => {
                    return Err(ExprError::UnexpectedChar {
                        src: src.to_string(),
                        pos: i,
                        ch: c,
                    })
                }
            };
            out.push((i, tok));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn next(&mut self) -> Result<Tok, ExprError> {
        let t = self
            .toks
            .get(self.pos)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| ExprError::UnexpectedEnd(self.src.to_string()))?;
        self.pos += 1;
        Ok(t)
    }

    fn unexpected(&self) -> ExprError {
        match self.toks.get(self.pos) {
            Some((p, _)) => ExprError::UnexpectedToken {
                src: self.src.to_string(),
                pos: *p,
            },
            None => ExprError::UnexpectedEnd(self.src.to_string()),
        }
    }

    fn expect(&mut self, want: Tok) -> Result<(), ExprError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected())
        }
    }

    fn comparison(&mut self) -> Result<Node, ExprError> {
        let lhs = self.sum()?;
        let op = match self.peek() {
            Some(Tok::Op('<')) => BinOp::Lt,
            Some(Tok::Op('>')) => BinOp::Gt,
            Some(Tok::Le) => BinOp::Le,
            Some(Tok::Ge) => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.sum()?;
        Ok(Node::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn sum(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op('+')) => BinOp::Add,
                Some(Tok::Op('-')) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn product(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op('*')) => BinOp::Mul,
                Some(Tok::Op('/')) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Op('^')) {
            self.pos += 1;
            // right associative, binds tighter than unary minus on the left
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        match self.next()? {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::LParen => {
                let inner = self.comparison()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Tok::Ident(name) => match name.as_str() {
                "x1" => Ok(Node::Var(0)),
                "x2" => Ok(Node::Var(1)),
                "x3" => Ok(Node::Var(2)),
                "pi" => Ok(Node::Num(std::f64::consts::PI)),
                _ => {
                    let (func, arity) =
                        Func::lookup(&name).ok_or_else(|| ExprError::UnknownIdent {
                            src: self.src.to_string(),
                            name: name.clone(),
                        })?;
                    self.expect(Tok::LParen)?;
                    let mut args = vec![self.comparison()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        args.push(self.comparison()?);
                    }
                    self.expect(Tok::RParen)?;
                    if args.len() != arity {
                        return Err(ExprError::Arity {
                            name,
                            expected: arity,
                            got: args.len(),
                        });
                    }
                    Ok(Node::Call(func, args))
                }
            },
            _ => {
                self.pos -= 1;
                Err(self.unexpected())
            }
        }
    }
}

/// A parsed expression that keeps its source text for serialization.
#[derive(Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let toks = tokenize(src)?;
        let mut p = Parser { src, toks, pos: 0 };
        let root = p.comparison()?;
        if p.pos != p.toks.len() {
            return Err(p.unexpected());
        }
        Ok(Self {
            source: src.to_string(),
            root,
        })
    }

    pub fn constant(v: f64) -> Self {
        Self {
            source: format!("{v:?}"),
            root: Node::Num(v),
        }
    }

    pub fn eval(&self, x: [f64; 3]) -> f64 {
        self.root.eval(&x)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// True when the expression does not reference any coordinate.
    pub fn is_constant(&self) -> bool {
        self.root.is_constant()
    }

    pub fn is_zero(&self) -> bool {
        self.is_constant() && self.root.eval(&[0.0; 3]) == 0.0
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl FromStr for Expr {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse(s)
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let src = String::deserialize(d)?;
        Expr::parse(&src).map_err(serde::de::Error::custom)
    }
}
