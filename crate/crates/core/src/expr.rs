//! A small expression language over a single variable `x`.
//!
//! Grammar (usual precedence, left associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | atom
//! atom   := number | 'x' | 'pi' | '(' expr ')' | func '(' args ')'
//! func   := sin | cos | exp | sqr | sqrt | abs | tanh | min | max | clamp
//! ```
//!
//! Expressions can be differentiated symbolically, which is how diffusion
//! coefficients loaded from config obtain their first and second derivatives.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    X,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    /// Derivative of a piecewise function: evaluates the derivative of whichever
    /// argument is active at `x`.
    Branch(Func, Vec<Expr>, Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqr,
    Sqrt,
    Abs,
    Tanh,
    Min,
    Max,
    Clamp,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqr" => Func::Sqr,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            "clamp" => Func::Clamp,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqr => "sqr",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
            Func::Clamp => "clamp",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Clamp => 3,
            _ => 1,
        }
    }
}

fn bx(e: Expr) -> Box<Expr> {
    Box::new(e)
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Parse(format!(
                "unexpected trailing input in `{src}` at token {}",
                p.pos
            )));
        }
        Ok(e)
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::X => x,
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Call(f, args) => {
                let a = args[0].eval(x);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Sqr => a * a,
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                    Func::Tanh => a.tanh(),
                    Func::Min => a.min(args[1].eval(x)),
                    Func::Max => a.max(args[1].eval(x)),
                    Func::Clamp => {
                        let lo = args[1].eval(x);
                        let hi = args[2].eval(x);
                        a.max(lo).min(hi)
                    }
                }
            }
            Expr::Branch(f, orig, der) => {
                let a = orig[0].eval(x);
                match f {
                    Func::Abs => {
                        if a >= 0.0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    Func::Min => {
                        if a <= orig[1].eval(x) {
                            der[0].eval(x)
                        } else {
                            der[1].eval(x)
                        }
                    }
                    Func::Max => {
                        if a >= orig[1].eval(x) {
                            der[0].eval(x)
                        } else {
                            der[1].eval(x)
                        }
                    }
                    Func::Clamp => {
                        if a < orig[1].eval(x) {
                            der[1].eval(x)
                        } else if a > orig[2].eval(x) {
                            der[2].eval(x)
                        } else {
                            der[0].eval(x)
                        }
                    }
                    _ => unreachable!("branch node only built for piecewise functions"),
                }
            }
        }
    }

    /// Symbolic derivative with respect to `x`. Piecewise functions
    /// (`abs`, `min`, `max`, `clamp`) differentiate branch-wise.
    pub fn derivative(&self) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::X => Expr::Const(1.0),
            Expr::Neg(a) => Expr::Neg(bx(a.derivative())),
            Expr::Add(a, b) => Expr::Add(bx(a.derivative()), bx(b.derivative())),
            Expr::Sub(a, b) => Expr::Sub(bx(a.derivative()), bx(b.derivative())),
            Expr::Mul(a, b) => Expr::Add(
                bx(Expr::Mul(bx(a.derivative()), b.clone())),
                bx(Expr::Mul(a.clone(), bx(b.derivative()))),
            ),
            Expr::Div(a, b) => Expr::Div(
                bx(Expr::Sub(
                    bx(Expr::Mul(bx(a.derivative()), b.clone())),
                    bx(Expr::Mul(a.clone(), bx(b.derivative()))),
                )),
                bx(Expr::Call(Func::Sqr, vec![(**b).clone()])),
            ),
            Expr::Call(f, args) => {
                let a = &args[0];
                let da = a.derivative();
                let chain = |outer: Expr| Expr::Mul(bx(outer), bx(da.clone()));
                match f {
                    Func::Sin => chain(Expr::Call(Func::Cos, vec![a.clone()])),
                    Func::Cos => chain(Expr::Neg(bx(Expr::Call(Func::Sin, vec![a.clone()])))),
                    Func::Exp => chain(self.clone()),
                    Func::Sqr => chain(Expr::Mul(bx(Expr::Const(2.0)), bx(a.clone()))),
                    Func::Sqrt => chain(Expr::Div(bx(Expr::Const(0.5)), bx(self.clone()))),
                    Func::Abs => Expr::Mul(bx(Expr::Branch(Func::Abs, vec![a.clone()], vec![])), bx(da.clone())),
                    Func::Tanh => chain(Expr::Sub(
                        bx(Expr::Const(1.0)),
                        bx(Expr::Call(Func::Sqr, vec![self.clone()])),
                    )),
                    Func::Min | Func::Max | Func::Clamp => {
                        Expr::Branch(*f, args.clone(), args.iter().map(Expr::derivative).collect())
                    }
                }
            }
            Expr::Branch(Func::Abs, ..) => Expr::Const(0.0),
            Expr::Branch(f, orig, der) => Expr::Branch(*f, orig.clone(), der.iter().map(Expr::derivative).collect()),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::X => write!(f, "x"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Call(func, args) | Expr::Branch(func, args, _) => {
                if matches!(self, Expr::Branch(..)) {
                    write!(f, "d_")?;
                }
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, e.g. 1e-3
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
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number `{text}`")))?;
            out.push(Token::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/(),".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else {
            return Err(Error::Parse(format!("unexpected character `{c}` in `{src}`")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat_op(&mut self, op: char) -> bool {
        if self.peek() == Some(&Token::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: char) -> Result<()> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(Error::Parse(format!(
                "expected `{op}` at token {}, found {:?}",
                self.pos,
                self.peek()
            )))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = Expr::Add(bx(lhs), bx(self.term()?));
            } else if self.eat_op('-') {
                lhs = Expr::Sub(bx(lhs), bx(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = Expr::Mul(bx(lhs), bx(self.unary()?));
            } else if self.eat_op('/') {
                lhs = Expr::Div(bx(lhs), bx(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat_op('-') {
            return Ok(Expr::Neg(bx(self.unary()?)));
        }
        if self.eat_op('+') {
            return self.unary();
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Token::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "x" => Ok(Expr::X),
                    "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                    _ => {
                        let func =
                            Func::from_name(&name).ok_or_else(|| Error::Parse(format!("unknown function `{name}`")))?;
                        self.expect_op('(')?;
                        let mut args = vec![self.expr()?];
                        while self.eat_op(',') {
                            args.push(self.expr()?);
                        }
                        self.expect_op(')')?;
                        if args.len() != func.arity() {
                            return Err(Error::Parse(format!(
                                "`{name}` takes {} argument(s), got {}",
                                func.arity(),
                                args.len()
                            )));
                        }
                        Ok(Expr::Call(func, args))
                    }
                }
            }
            other => Err(Error::Parse(format!(
                "unexpected token {other:?} at position {}",
                self.pos
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: f64) -> f64 {
        Expr::parse(src).unwrap().eval(x)
    }

    #[test]
    fn precedence_and_unary_minus() {
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("(1 + 2) * 3", 0.0), 9.0);
        assert_eq!(ev("-x * 2", 3.0), -6.0);
        assert_eq!(ev("8 / 4 / 2", 0.0), 1.0);
        assert_eq!(ev("2 - 3 - 4", 0.0), -5.0);
        assert_eq!(ev("1e-3 * x", 2.0), 2e-3);
    }

    #[test]
    fn functions() {
        assert_eq!(ev("sqr(x)", 3.0), 9.0);
        assert_eq!(ev("clamp(3*sqr(x), 0.5, 50)", 0.0), 0.5);
        assert_eq!(ev("clamp(3*sqr(x), 0.5, 50)", 10.0), 50.0);
        assert_eq!(ev("clamp(3*sqr(x), 0.5, 50)", 1.0), 3.0);
        assert!((ev("sin(x)", 1.0) - 1f64.sin()).abs() < 1e-15);
        assert_eq!(ev("max(x, 2)", 1.0), 2.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Expr::parse("2 +").is_err());
        assert!(Expr::parse("foo(x)").is_err());
        assert!(Expr::parse("clamp(x, 1)").is_err());
        assert!(Expr::parse("x $ 2").is_err());
        assert!(Expr::parse("(x").is_err());
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let cases = [
            "0.5*x",
            "2",
            "sin(x)*x",
            "exp(-sqr(x)/4)",
            "1/(1+sqr(x))",
            "sqrt(1 + sqr(x))",
            "tanh(2*x) - cos(x)",
            "clamp(3*sqr(x), 0.5, 50)",
            "abs(x) * x",
        ];
        for src in cases {
            let e = Expr::parse(src).unwrap();
            let d = e.derivative();
            let dd = d.derivative();
            for &x in &[-2.3, -0.7, 0.4, 1.9] {
                let h = 1e-5;
                let fd = (e.eval(x + h) - e.eval(x - h)) / (2.0 * h);
                assert!((d.eval(x) - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{src} at {x}");
                let fdd = (d.eval(x + h) - d.eval(x - h)) / (2.0 * h);
                assert!((dd.eval(x) - fdd).abs() < 1e-5 * (1.0 + fdd.abs()), "{src}'' at {x}");
            }
        }
    }
}
