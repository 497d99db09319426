//! Runtime-defined theory functions.
//!
//! A theory is a single infix expression over the time `t`, parameters
//! `p[m[k]]`, function values `f[m[k]]`, numeric literals, `+ - * / ^`,
//! parentheses and a fixed library of functions. Parameter and function
//! accesses always go through the map array `m`, so one expression can be
//! shared by many datasets that differ only in their map.
//!
//! Source text is parsed into an AST and compiled to a small stack bytecode.
//! [`TheoryExpr::bind`] resolves the map once per dataset; the resulting
//! [`BoundTheory`] evaluates in time linear in the expression size without
//! any bounds checks on the map.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("`{name}` at position {pos} takes {expected} argument(s), got {got}")]
    Arity { pos: usize, name: String, expected: usize, got: usize },
    #[error("map subscript at position {pos} must be a non-negative integer, got `{text}`")]
    NonIntegerSubscript { pos: usize, text: String },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::Syntax { pos, .. }
            | ParseError::UnknownIdentifier { pos, .. }
            | ParseError::Arity { pos, .. }
            | ParseError::NonIntegerSubscript { pos, .. } => *pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("map slot {slot} is not present (map has {len} entries)")]
    MissingMapSlot { slot: usize, len: usize },
    #[error("map slot {slot} -> parameter {index}, but only {len} parameters exist")]
    ParamOutOfRange { slot: usize, index: usize, len: usize },
    #[error("map slot {slot} -> function value {index}, but only {len} function values exist")]
    FuncOutOfRange { slot: usize, index: usize, len: usize },
}

/// Built-in functions available in theory expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Exp,
    Log,
    Cos,
    Sin,
    Sqrt,
    Pow,
    /// Simple exponential relaxation `exp(-λt)`.
    Se,
    /// Generalised (stretched) exponential `exp(-(λt)^β)`.
    Ge,
    /// Gaussian relaxation `exp(-(σt)²/2)`.
    Sg,
    /// Static Gaussian Kubo-Toyabe.
    Stg,
    /// Precession `cos(2πνt + φ·π/180)`, φ in degrees.
    Tf,
}

impl Builtin {
    const ALL: [Builtin; 11] = [
        Builtin::Exp,
        Builtin::Log,
        Builtin::Cos,
        Builtin::Sin,
        Builtin::Sqrt,
        Builtin::Pow,
        Builtin::Se,
        Builtin::Ge,
        Builtin::Sg,
        Builtin::Stg,
        Builtin::Tf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Exp => "exp",
            Builtin::Log => "log",
            Builtin::Cos => "cos",
            Builtin::Sin => "sin",
            Builtin::Sqrt => "sqrt",
            Builtin::Pow => "pow",
            Builtin::Se => "se",
            Builtin::Ge => "ge",
            Builtin::Sg => "sg",
            Builtin::Stg => "stg",
            Builtin::Tf => "tf",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Exp | Builtin::Log | Builtin::Cos | Builtin::Sin | Builtin::Sqrt => 1,
            Builtin::Pow | Builtin::Se | Builtin::Sg | Builtin::Stg => 2,
            Builtin::Ge | Builtin::Tf => 3,
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|b| b.name() == name)
    }

    fn apply(self, args: &[f64]) -> f64 {
        match self {
            Builtin::Exp => args[0].exp(),
            Builtin::Log => args[0].ln(),
            Builtin::Cos => args[0].cos(),
            Builtin::Sin => args[0].sin(),
            Builtin::Sqrt => args[0].sqrt(),
            Builtin::Pow => args[0].powf(args[1]),
            Builtin::Se => se(args[0], args[1]),
            Builtin::Ge => ge(args[0], args[1], args[2]),
            Builtin::Sg => sg(args[0], args[1]),
            Builtin::Stg => stg(args[0], args[1]),
            Builtin::Tf => tf(args[0], args[1], args[2]),
        }
    }
}

pub fn se(t: f64, lambda: f64) -> f64 {
    (-lambda * t).exp()
}

pub fn ge(t: f64, lambda: f64, beta: f64) -> f64 {
    (-(lambda * t).powf(beta)).exp()
}

pub fn sg(t: f64, sigma: f64) -> f64 {
    let x = sigma * t;
    (-0.5 * (x * x)).exp()
}

pub fn stg(t: f64, sigma: f64) -> f64 {
    let x = sigma * t;
    let sq = x * x;
    1.0 / 3.0 + (2.0 / 3.0) * (1.0 - sq) * (-0.5 * sq).exp()
}

pub fn tf(t: f64, phase_deg: f64, freq_mhz: f64) -> f64 {
    (2.0 * PI * freq_mhz * t + phase_deg * PI / 180.0).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Pow => a.powf(b),
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Time,
    /// `p[m[slot]]`
    Param(usize),
    /// `f[m[slot]]`
    Func(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Builtin, Vec<Node>),
}

/// Canonical, fully parenthesised rendering. Parsing the output yields a
/// tree that evaluates identically.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) => write!(f, "{v:?}"),
            Node::Time => f.write_str("t"),
            Node::Param(k) => write!(f, "p[m[{k}]]"),
            Node::Func(k) => write!(f, "f[m[{k}]]"),
            Node::Neg(x) => write!(f, "(-{x})"),
            Node::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(b, args) => {
                write!(f, "{}(", b.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Time,
    Param(usize),
    Func(usize),
    Neg,
    Bin(BinOp),
    Call(Builtin),
}

/// A parsed and compiled theory function. Immutable; evaluation is pure.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryExpr {
    source: String,
    ast: Node,
    code: Vec<Op>,
    max_stack: usize,
    param_slots: BTreeSet<usize>,
    func_slots: BTreeSet<usize>,
}

/// The per-dataset map array `m` and function-value array `f`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TheoryBinding {
    pub map: Vec<usize>,
    pub function_values: Vec<f64>,
}

impl TheoryBinding {
    pub fn new(map: Vec<usize>, function_values: Vec<f64>) -> Self {
        Self { map, function_values }
    }
}

impl TheoryExpr {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        let tokens = lex(source)?;
        let mut parser = Parser { tokens: &tokens, at: 0 };
        let ast = parser.expr()?;
        let tok = parser.peek();
        if tok.kind != Tok::Eof {
            return Err(ParseError::Syntax { pos: tok.pos, msg: format!("unexpected {}", tok.kind.describe()) });
        }
        let mut code = Vec::new();
        let mut param_slots = BTreeSet::new();
        let mut func_slots = BTreeSet::new();
        compile(&ast, &mut code, &mut param_slots, &mut func_slots);
        let max_stack = stack_depth(&code);
        Ok(Self { source: source.to_owned(), ast, code, max_stack, param_slots, func_slots })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Node {
        &self.ast
    }

    /// Canonical source text; see [`Node`]'s `Display`.
    pub fn print(&self) -> String {
        self.ast.to_string()
    }

    pub fn referenced_param_slots(&self) -> &BTreeSet<usize> {
        &self.param_slots
    }

    pub fn referenced_func_slots(&self) -> &BTreeSet<usize> {
        &self.func_slots
    }

    /// Resolves every map access against `binding` for a parameter vector of
    /// length `n_params`.
    pub fn bind(&self, binding: &TheoryBinding, n_params: usize) -> Result<BoundTheory, EvalError> {
        let map_len = binding.map.len();
        let lookup =
            |slot: usize| binding.map.get(slot).copied().ok_or(EvalError::MissingMapSlot { slot, len: map_len });
        let mut ops = Vec::with_capacity(self.code.len());
        for op in &self.code {
            let bound = match *op {
                Op::Param(slot) => {
                    let index = lookup(slot)?;
                    if index >= n_params {
                        return Err(EvalError::ParamOutOfRange { slot, index, len: n_params });
                    }
                    Op::Param(index)
                }
                Op::Func(slot) => {
                    let index = lookup(slot)?;
                    let v = binding.function_values.get(index).copied().ok_or(EvalError::FuncOutOfRange {
                        slot,
                        index,
                        len: binding.function_values.len(),
                    })?;
                    Op::Const(v)
                }
                other => other,
            };
            ops.push(bound);
        }
        Ok(BoundTheory { ops, max_stack: self.max_stack })
    }

    pub fn evaluate(&self, t: f64, p: &[f64], binding: &TheoryBinding) -> Result<f64, EvalError> {
        Ok(self.bind(binding, p.len())?.eval(t, p))
    }
}

/// A theory expression with its map resolved. `Param` ops hold global
/// parameter indices, function values are folded into constants.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTheory {
    ops: Vec<Op>,
    max_stack: usize,
}

impl BoundTheory {
    /// Evaluates at time `t`. `p` must be at least as long as the parameter
    /// vector the theory was bound against.
    pub fn eval(&self, t: f64, p: &[f64]) -> f64 {
        let mut stack: SmallVec<[f64; 24]> = SmallVec::with_capacity(self.max_stack);
        for op in &self.ops {
            match *op {
                Op::Const(v) => stack.push(v),
                Op::Time => stack.push(t),
                Op::Param(i) => stack.push(p[i]),
                Op::Func(_) => unreachable!("function slots are folded by bind"),
                Op::Neg => {
                    let top = stack.last_mut().expect("stack underflow");
                    *top = -*top;
                }
                Op::Bin(b) => {
                    let rhs = stack.pop().expect("stack underflow");
                    let lhs = stack.last_mut().expect("stack underflow");
                    *lhs = b.apply(*lhs, rhs);
                }
                Op::Call(f) => {
                    let base = stack.len() - f.arity();
                    let v = f.apply(&stack[base..]);
                    stack.truncate(base);
                    stack.push(v);
                }
            }
        }
        stack[0]
    }
}

fn compile(node: &Node, code: &mut Vec<Op>, ps: &mut BTreeSet<usize>, fs: &mut BTreeSet<usize>) {
    match node {
        Node::Num(v) => code.push(Op::Const(*v)),
        Node::Time => code.push(Op::Time),
        Node::Param(k) => {
            ps.insert(*k);
            code.push(Op::Param(*k));
        }
        Node::Func(k) => {
            fs.insert(*k);
            code.push(Op::Func(*k));
        }
        Node::Neg(x) => {
            compile(x, code, ps, fs);
            code.push(Op::Neg);
        }
        Node::Bin(op, a, b) => {
            compile(a, code, ps, fs);
            compile(b, code, ps, fs);
            code.push(Op::Bin(*op));
        }
        Node::Call(b, args) => {
            for a in args {
                compile(a, code, ps, fs);
            }
            code.push(Op::Call(*b));
        }
    }
}

fn stack_depth(code: &[Op]) -> usize {
    let mut depth = 0usize;
    let mut max = 0usize;
    for op in code {
        match op {
            Op::Const(_) | Op::Time | Op::Param(_) | Op::Func(_) => depth += 1,
            Op::Neg => {}
            Op::Bin(_) => depth -= 1,
            Op::Call(b) => depth = depth + 1 - b.arity(),
        }
        max = max.max(depth);
    }
    max
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64, String),
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(_, s) => format!("number `{s}`"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    pos: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let single = match c {
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b'[' => Some(Tok::LBracket),
            b']' => Some(Tok::RBracket),
            b',' => Some(Tok::Comma),
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            b'^' => Some(Tok::Caret),
            _ => None,
        };
        if let Some(kind) = single {
            out.push(Token { kind, pos: start });
            i += 1;
        } else if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let value: f64 = text
                .parse()
                .map_err(|_| ParseError::Syntax { pos: start, msg: format!("malformed number `{text}`") })?;
            if !value.is_finite() {
                return Err(ParseError::Syntax { pos: start, msg: format!("number `{text}` is out of range") });
            }
            out.push(Token { kind: Tok::Num(value, text.to_owned()), pos: start });
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { kind: Tok::Ident(src[start..i].to_owned()), pos: start });
        } else {
            let ch = src[start..].chars().next().unwrap_or('?');
            return Err(ParseError::Syntax { pos: start, msg: format!("unexpected character `{ch}`") });
        }
    }
    out.push(Token { kind: Tok::Eof, pos: src.len() });
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    at: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &'a Token {
        &self.tokens[self.at]
    }

    fn bump(&mut self) -> &'a Token {
        let t = &self.tokens[self.at];
        if t.kind != Tok::Eof {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<&'a Token, ParseError> {
        let t = self.peek();
        if t.kind == want {
            Ok(self.bump())
        } else {
            Err(ParseError::Syntax {
                pos: t.pos,
                msg: format!("expected {}, found {}", want.describe(), t.kind.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.power()?;
        loop {
            let op = match self.peek().kind {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.power()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // Right-associative; unary minus binds tighter, so `-2^2` is `(-2)^2`.
    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.unary()?;
        if self.peek().kind == Tok::Caret {
            self.bump();
            let exp = self.power()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.peek().kind == Tok::Minus {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let tok = self.bump();
        match &tok.kind {
            Tok::Num(v, _) => Ok(Node::Num(*v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Tok::Ident(name) => match name.as_str() {
                "t" => Ok(Node::Time),
                "p" | "f" if self.peek().kind == Tok::LBracket => {
                    let slot = self.map_access()?;
                    Ok(if name == "p" { Node::Param(slot) } else { Node::Func(slot) })
                }
                _ => {
                    let Some(builtin) = Builtin::from_name(name) else {
                        return Err(ParseError::UnknownIdentifier { pos: tok.pos, name: name.clone() });
                    };
                    self.expect(Tok::LParen)?;
                    let mut args = Vec::new();
                    if self.peek().kind != Tok::RParen {
                        loop {
                            args.push(self.expr()?);
                            if self.peek().kind == Tok::Comma {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(Tok::RParen)?;
                    if args.len() != builtin.arity() {
                        return Err(ParseError::Arity {
                            pos: tok.pos,
                            name: name.clone(),
                            expected: builtin.arity(),
                            got: args.len(),
                        });
                    }
                    Ok(Node::Call(builtin, args))
                }
            },
            other => Err(ParseError::Syntax {
                pos: tok.pos,
                msg: format!("expected an operand, found {}", other.describe()),
            }),
        }
    }

    /// `[ m [ <integer> ] ]`, after the `p` or `f`.
    fn map_access(&mut self) -> Result<usize, ParseError> {
        self.expect(Tok::LBracket)?;
        let m = self.bump();
        if m.kind != Tok::Ident("m".into()) {
            return Err(ParseError::Syntax {
                pos: m.pos,
                msg: format!("expected map access `m[...]`, found {}", m.kind.describe()),
            });
        }
        self.expect(Tok::LBracket)?;
        let sub = self.bump();
        let slot = match &sub.kind {
            Tok::Num(_, text) if text.bytes().all(|b| b.is_ascii_digit()) => text
                .parse::<usize>()
                .map_err(|_| ParseError::NonIntegerSubscript { pos: sub.pos, text: text.clone() })?,
            Tok::Num(_, text) => return Err(ParseError::NonIntegerSubscript { pos: sub.pos, text: text.clone() }),
            Tok::Minus => return Err(ParseError::NonIntegerSubscript { pos: sub.pos, text: "-".into() }),
            other => {
                return Err(ParseError::Syntax {
                    pos: sub.pos,
                    msg: format!("expected map index, found {}", other.describe()),
                })
            }
        };
        self.expect(Tok::RBracket)?;
        self.expect(Tok::RBracket)?;
        Ok(slot)
    }
}
