//! Scalar expressions in `q1..qn` with symbolic differentiation.
//!
//! Grammar (whitespace is ignored):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'pi' | 'q'<index> | func '(' expr ')' | '(' expr ')'
//! func  := 'sin' | 'cos' | 'tanh' | 'exp'
//! ```
//!
//! Exponents must be constant. `-q1^2` parses as `-(q1^2)` and `^` is
//! right-associative.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tanh => x.tanh(),
            Func::Exp => x.exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based coordinate index (`q1` is `Var(0)`).
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

fn bx(e: Expr) -> Box<Expr> {
    Box::new(e)
}

impl Expr {
    pub fn eval(&self, q: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => q[*i],
            Expr::Neg(a) => -a.eval(q),
            Expr::Add(a, b) => a.eval(q) + b.eval(q),
            Expr::Sub(a, b) => a.eval(q) - b.eval(q),
            Expr::Mul(a, b) => a.eval(q) * b.eval(q),
            Expr::Div(a, b) => a.eval(q) / b.eval(q),
            Expr::Pow(a, b) => {
                let base = a.eval(q);
                match b.as_ref() {
                    Expr::Const(p) if p.fract() == 0.0 && p.abs() < 64.0 => base.powi(*p as i32),
                    other => base.powf(other.eval(q)),
                }
            }
            Expr::Call(f, a) => f.apply(a.eval(q)),
        }
    }

    /// Largest variable index referenced, plus one.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) | Expr::Call(_, a) => a.arity(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.arity().max(b.arity()),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.arity() == 0
    }

    /// Symbolic partial derivative with respect to `Var(var)`, simplified.
    pub fn diff(&self, var: usize) -> Expr {
        let d = match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => Expr::Neg(bx(a.diff(var))),
            Expr::Add(a, b) => Expr::Add(bx(a.diff(var)), bx(b.diff(var))),
            Expr::Sub(a, b) => Expr::Sub(bx(a.diff(var)), bx(b.diff(var))),
            Expr::Mul(a, b) => Expr::Add(
                bx(Expr::Mul(bx(a.diff(var)), b.clone())),
                bx(Expr::Mul(a.clone(), bx(b.diff(var)))),
            ),
            Expr::Div(a, b) => Expr::Div(
                bx(Expr::Sub(
                    bx(Expr::Mul(bx(a.diff(var)), b.clone())),
                    bx(Expr::Mul(a.clone(), bx(b.diff(var)))),
                )),
                bx(Expr::Pow(b.clone(), bx(Expr::Const(2.0)))),
            ),
            Expr::Pow(a, b) => {
                // exponents are constant (enforced by the parser)
                let p = b.eval(&[]);
                Expr::Mul(
                    bx(Expr::Mul(
                        bx(Expr::Const(p)),
                        bx(Expr::Pow(a.clone(), bx(Expr::Const(p - 1.0)))),
                    )),
                    bx(a.diff(var)),
                )
            }
            Expr::Call(f, a) => {
                let outer = match f {
                    Func::Sin => Expr::Call(Func::Cos, a.clone()),
                    Func::Cos => Expr::Neg(bx(Expr::Call(Func::Sin, a.clone()))),
                    Func::Tanh => Expr::Sub(
                        bx(Expr::Const(1.0)),
                        bx(Expr::Pow(
                            bx(Expr::Call(Func::Tanh, a.clone())),
                            bx(Expr::Const(2.0)),
                        )),
                    ),
                    Func::Exp => Expr::Call(Func::Exp, a.clone()),
                };
                Expr::Mul(bx(outer), bx(a.diff(var)))
            }
        };
        d.simplify()
    }

    /// Constant folding and removal of additive/multiplicative identities.
    pub fn simplify(self) -> Expr {
        use Expr::*;
        match self {
            Const(_) | Var(_) => self,
            Neg(a) => match a.simplify() {
                Const(c) => Const(-c),
                Neg(inner) => *inner,
                s => Neg(bx(s)),
            },
            Add(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x + y),
                (Const(z), s) | (s, Const(z)) if z == 0.0 => s,
                (x, y) => Add(bx(x), bx(y)),
            },
            Sub(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x - y),
                (s, Const(z)) if z == 0.0 => s,
                (Const(z), s) if z == 0.0 => Neg(bx(s)),
                (x, y) => Sub(bx(x), bx(y)),
            },
            Mul(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x * y),
                (Const(z), _) | (_, Const(z)) if z == 0.0 => Const(0.0),
                (Const(o), s) | (s, Const(o)) if o == 1.0 => s,
                (x, y) => Mul(bx(x), bx(y)),
            },
            Div(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x / y),
                (Const(z), _) if z == 0.0 => Const(0.0),
                (s, Const(o)) if o == 1.0 => s,
                (x, y) => Div(bx(x), bx(y)),
            },
            Pow(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x.powf(y)),
                (_, Const(z)) if z == 0.0 => Const(1.0),
                (s, Const(o)) if o == 1.0 => s,
                (x, y) => Pow(bx(x), bx(y)),
            },
            Call(f, a) => match a.simplify() {
                Const(x) => Const(f.apply(x)),
                s => Call(f, bx(s)),
            },
        }
    }

    /// Growth exponents `[e0, e1, e2]`: the k-th derivative grows at most like
    /// `|q|^e_k` for large `|q|`. `-inf` means identically zero, `+inf` means
    /// no polynomial bound is known. A bounded second derivative needs `e2 <= 0`.
    pub fn growth(&self) -> [f64; 3] {
        const ZERO: f64 = f64::NEG_INFINITY;
        fn add(a: f64, b: f64) -> f64 {
            if a == ZERO || b == ZERO {
                ZERO
            } else {
                a + b
            }
        }
        fn mul(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
            [
                add(a[0], b[0]),
                add(a[1], b[0]).max(add(a[0], b[1])),
                add(a[2], b[0])
                    .max(add(a[1], b[1]))
                    .max(add(a[0], b[2])),
            ]
        }
        fn max3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
            [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])]
        }
        let constant = [0.0, ZERO, ZERO];
        if self.is_constant() {
            return constant;
        }
        match self {
            Expr::Const(_) => constant,
            Expr::Var(_) => [1.0, 0.0, ZERO],
            Expr::Neg(a) => a.growth(),
            Expr::Add(a, b) | Expr::Sub(a, b) => max3(a.growth(), b.growth()),
            Expr::Mul(a, b) => mul(a.growth(), b.growth()),
            Expr::Div(a, b) => {
                if b.is_constant() {
                    a.growth()
                } else {
                    [f64::INFINITY; 3]
                }
            }
            Expr::Pow(a, b) => {
                let p = b.eval(&[]);
                if p >= 0.0 && p.fract() == 0.0 && p <= 64.0 {
                    let g = a.growth();
                    (0..p as usize).fold(constant, |acc, _| mul(acc, g))
                } else {
                    [f64::INFINITY; 3]
                }
            }
            Expr::Call(f, a) => {
                let g = a.growth();
                if *f == Func::Exp && g[0] > 0.0 {
                    return [f64::INFINITY; 3];
                }
                // bounded outer function with bounded derivatives
                [0.0, g[1], (2.0 * g[1]).max(g[2])]
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, child: &Expr, min_prec: u8) -> fmt::Result {
    if child.precedence() < min_prec {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(i) => write!(f, "q{}", i + 1),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, 3)
            }
            Expr::Add(a, b) => {
                write_child(f, a, 1)?;
                write!(f, " + ")?;
                write_child(f, b, 2)
            }
            Expr::Sub(a, b) => {
                write_child(f, a, 1)?;
                write!(f, " - ")?;
                write_child(f, b, 2)
            }
            Expr::Mul(a, b) => {
                write_child(f, a, 2)?;
                write!(f, " * ")?;
                write_child(f, b, 3)
            }
            Expr::Div(a, b) => {
                write_child(f, a, 2)?;
                write!(f, " / ")?;
                write_child(f, b, 3)
            }
            Expr::Pow(a, b) => {
                write_child(f, a, 5)?;
                write!(f, "^")?;
                write_child(f, b, 3)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<(Token, usize)>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
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
                column,
                message: format!("malformed number `{text}`"),
            })?;
            out.push((Token::Num(value), column));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Token::Ident(chars[start..i].iter().collect()), column));
        } else if "+-*/^".contains(c) {
            out.push((Token::Op(c), column));
            i += 1;
        } else if c == '(' {
            out.push((Token::LParen, column));
            i += 1;
        } else if c == ')' {
            out.push((Token::RParen, column));
            i += 1;
        } else {
            return Err(Error::Parse {
                column,
                message: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end_column: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn column(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(_, c)| *c)
            .unwrap_or(self.end_column)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            column: self.column(),
            message: message.into(),
        })
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::Add(bx(lhs), bx(rhs))
            } else {
                Expr::Sub(bx(lhs), bx(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::Mul(bx(lhs), bx(rhs))
            } else {
                Expr::Div(bx(lhs), bx(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(bx(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let column = self.column();
            let exponent = self.unary()?;
            if !exponent.is_constant() {
                return Err(Error::Parse {
                    column,
                    message: "exponent must be a constant".into(),
                });
            }
            return Ok(Expr::Pow(bx(base), bx(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let column = self.column();
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "tanh" => Some(Func::Tanh),
                    "exp" => Some(Func::Exp),
                    _ => None,
                };
                if let Some(func) = func {
                    if self.peek() != Some(&Token::LParen) {
                        return self.err(format!("expected `(` after `{name}`"));
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Expr::Call(func, bx(arg)));
                }
                if name == "pi" {
                    return Ok(Expr::Const(std::f64::consts::PI));
                }
                if let Some(idx) = name.strip_prefix('q').and_then(|s| s.parse::<usize>().ok()) {
                    if idx >= 1 {
                        return Ok(Expr::Var(idx - 1));
                    }
                }
                Err(Error::Parse {
                    column,
                    message: format!("unknown identifier `{name}`"),
                })
            }
            Some(tok) => self.err(format!("unexpected token {tok:?}")),
            None => self.err("unexpected end of expression"),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        if self.peek() == Some(&Token::RParen) {
            self.pos += 1;
            Ok(())
        } else {
            self.err("expected `)`")
        }
    }
}

/// Parses an expression. Column numbers in errors are 1-based.
pub fn parse(src: &str) -> Result<Expr> {
    let tokens = tokenize(src)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end_column: src.chars().count() + 1,
    };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return p.err("trailing input");
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn precedence_and_associativity() {
        let e = parse("-q1^2").unwrap();
        assert_eq!(e.eval(&[3.0]), -9.0);
        let e = parse("2^3^2").unwrap();
        assert_eq!(e.eval(&[]), 512.0);
        let e = parse("1 - 2 - 3").unwrap();
        assert_eq!(e.eval(&[]), -4.0);
        let e = parse("8 / 4 / 2").unwrap();
        assert_eq!(e.eval(&[]), 1.0);
        let e = parse("2*pi*q2 + 1.5e-1").unwrap();
        assert!((e.eval(&[0.0, 1.0]) - (2.0 * std::f64::consts::PI + 0.15)).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_columns() {
        match parse("q1 + $") {
            Err(Error::Parse { column, .. }) => assert_eq!(column, 6),
            other => panic!("unexpected {other:?}"),
        }
        match parse("sin q1") {
            Err(Error::Parse { column, .. }) => assert_eq!(column, 5),
            other => panic!("unexpected {other:?}"),
        }
        match parse("q1^q2") {
            Err(Error::Parse { column, message }) => {
                assert_eq!(column, 4);
                assert!(message.contains("constant"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("(q1"), Err(Error::Parse { column: 4, .. })));
        assert!(matches!(parse("foo(q1)"), Err(Error::Parse { .. })));
        assert!(matches!(parse("q0"), Err(Error::Parse { .. })));
    }

    #[test]
    fn derivatives_of_elementary_functions() {
        let e = parse("sin(2*q1) + exp(q2) * q1 - tanh(q1)").unwrap();
        let x = [0.3, -0.7];
        let d1 = e.diff(0).eval(&x);
        let want = 2.0 * (0.6f64).cos() + (-0.7f64).exp() - (1.0 - 0.3f64.tanh().powi(2));
        assert!((d1 - want).abs() < 1e-14);
        let d22 = e.diff(1).diff(1).eval(&x);
        assert!((d22 - (-0.7f64).exp() * 0.3).abs() < 1e-14);
    }

    #[test]
    fn growth_classifies_curvature() {
        let bounded = ["0.5*q1^2", "cos(q1)", "q1*q2", "exp(sin(q1))", "-3*cos(q1 - q2)"];
        for s in bounded {
            assert!(parse(s).unwrap().growth()[2] <= 0.0, "{s}");
        }
        let unbounded = ["q1^4", "q1^3", "sin(q1^2)", "q1^2*cos(q1)", "exp(q1)", "1/(1+q1^2)"];
        for s in unbounded {
            assert!(parse(s).unwrap().growth()[2] > 0.0, "{s}");
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-5.0f64..5.0).prop_map(Expr::Const),
            (0usize..2).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(bx(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(bx(a), bx(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(bx(a), bx(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(bx(a), bx(b))),
                (inner.clone(), (0u8..4))
                    .prop_map(|(a, p)| Expr::Pow(bx(a), bx(Expr::Const(p as f64)))),
                (inner.clone(), prop_oneof![Just(Func::Sin), Just(Func::Cos), Just(Func::Tanh)])
                    .prop_map(|(a, f)| Expr::Call(f, bx(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn pretty_print_reparses(e in arb_expr(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let printed = e.to_string();
            let back = parse(&printed).unwrap();
            let (a, b) = (e.eval(&[x, y]), back.eval(&[x, y]));
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{printed}: {a} vs {b}");
        }
    }
}
