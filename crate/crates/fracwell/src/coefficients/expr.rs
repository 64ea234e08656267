//! Small arithmetic expression language for user-defined coefficients.
//! Grammar: `+ - * /`, `sin cos exp abs`, numeric literals, `pi`, and the
//! variables `t x1 x2 y1 y2`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("unexpected character `{0}` at byte {1}")]
    UnexpectedChar(char, usize),
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unknown identifier `{0}`")]
    UnknownIdent(String),
    #[error("trailing input starting at token {0}")]
    TrailingInput(usize),
    #[error("malformed number literal `{0}`")]
    BadNumber(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X1,
    X2,
    Y1,
    Y2,
}

/// Evaluation point: time plus the two spatial arguments of a kernel.
#[derive(Debug, Clone, Copy)]
pub struct Vars {
    pub t: f64,
    pub x1: f64,
    pub x2: f64,
    pub y1: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Abs(Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(ExprError::TrailingInput(p.pos));
        }
        Ok(e)
    }

    pub fn eval(&self, v: &Vars) -> f64 {
        match self {
            Expr::Num(c) => *c,
            Expr::Var(Var::T) => v.t,
            Expr::Var(Var::X1) => v.x1,
            Expr::Var(Var::X2) => v.x2,
            Expr::Var(Var::Y1) => v.y1,
            Expr::Var(Var::Y2) => v.y2,
            Expr::Neg(a) => -a.eval(v),
            Expr::Add(a, b) => a.eval(v) + b.eval(v),
            Expr::Sub(a, b) => a.eval(v) - b.eval(v),
            Expr::Mul(a, b) => a.eval(v) * b.eval(v),
            Expr::Div(a, b) => a.eval(v) / b.eval(v),
            Expr::Sin(a) => a.eval(v).sin(),
            Expr::Cos(a) => a.eval(v).cos(),
            Expr::Exp(a) => a.eval(v).exp(),
            Expr::Abs(a) => a.eval(v).abs(),
        }
    }

    pub fn uses(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == var,
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) | Expr::Abs(a) => a.uses(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.uses(var) || b.uses(var)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Tok>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    let exp_sign = (d == '+' || d == '-')
                        && i > start
                        && matches!(bytes[i - 1] as char, 'e' | 'E');
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let text = &src[start..i];
                let val: f64 = text
                    .parse()
                    .map_err(|_| ExprError::BadNumber(text.to_string()))?;
                out.push(Tok::Num(val));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Tok::Ident(src[start..i].to_string()));
            }
            _ => return Err(ExprError::UnexpectedChar(c, i)),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Result<Tok, ExprError> {
        let t = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or(ExprError::UnexpectedEnd)?;
        self.pos += 1;
        Ok(t)
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek() {
            match op {
                Tok::Plus => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        while let Some(op) = self.peek() {
            match op {
                Tok::Star => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Tok::Slash => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ExprError> {
        match self.next()? {
            Tok::Minus => Ok(Expr::Neg(Box::new(self.factor()?))),
            Tok::Plus => self.factor(),
            Tok::Num(c) => Ok(Expr::Num(c)),
            Tok::LParen => {
                let inner = self.expr()?;
                match self.next()? {
                    Tok::RParen => Ok(inner),
                    _ => Err(ExprError::UnexpectedEnd),
                }
            }
            Tok::Ident(name) => match name.as_str() {
                "t" => Ok(Expr::Var(Var::T)),
                "x1" => Ok(Expr::Var(Var::X1)),
                "x2" => Ok(Expr::Var(Var::X2)),
                "y1" => Ok(Expr::Var(Var::Y1)),
                "y2" => Ok(Expr::Var(Var::Y2)),
                "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                "sin" | "cos" | "exp" | "abs" => {
                    match self.next()? {
                        Tok::LParen => {}
                        _ => return Err(ExprError::UnexpectedEnd),
                    }
                    let arg = Box::new(self.expr()?);
                    match self.next()? {
                        Tok::RParen => {}
                        _ => return Err(ExprError::UnexpectedEnd),
                    }
                    Ok(match name.as_str() {
                        "sin" => Expr::Sin(arg),
                        "cos" => Expr::Cos(arg),
                        "exp" => Expr::Exp(arg),
                        _ => Expr::Abs(arg),
                    })
                }
                _ => Err(ExprError::UnknownIdent(name)),
            },
            tok => Err(ExprError::UnexpectedChar(
                match tok {
                    Tok::Star => '*',
                    Tok::Slash => '/',
                    Tok::RParen => ')',
                    _ => '?',
                },
                self.pos,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn at(t: f64, x1: f64, x2: f64, y1: f64, y2: f64) -> Vars {
        Vars { t, x1, x2, y1, y2 }
    }

    #[test]
    fn arithmetic_and_precedence() {
        let e = Expr::parse("1 + 2 * 3 - 4 / 2").unwrap();
        assert_relative_eq!(e.eval(&at(0.0, 0.0, 0.0, 0.0, 0.0)), 5.0);
        let e = Expr::parse("(1 + 2) * 3").unwrap();
        assert_relative_eq!(e.eval(&at(0.0, 0.0, 0.0, 0.0, 0.0)), 9.0);
    }

    #[test]
    fn functions_and_variables() {
        let e = Expr::parse("1 + 0.25 * sin(t)").unwrap();
        assert_relative_eq!(
            e.eval(&at(0.5, 0.0, 0.0, 0.0, 0.0)),
            1.0 + 0.25 * 0.5f64.sin()
        );
        assert!(e.uses(Var::T));
        assert!(!e.uses(Var::X1));
        let e = Expr::parse("abs(x1 - y1) + cos(pi * x2) * exp(-y2)").unwrap();
        let v = at(0.0, 0.3, 1.0, 0.7, 2.0);
        assert_relative_eq!(
            e.eval(&v),
            (0.3f64 - 0.7).abs() + (std::f64::consts::PI).cos() * (-2.0f64).exp()
        );
    }

    #[test]
    fn unary_minus_chains() {
        let e = Expr::parse("--2").unwrap();
        assert_relative_eq!(e.eval(&at(0.0, 0.0, 0.0, 0.0, 0.0)), 2.0);
        let e = Expr::parse("-sin(t) * -1").unwrap();
        assert_relative_eq!(e.eval(&at(1.0, 0.0, 0.0, 0.0, 0.0)), 1.0f64.sin());
    }

    #[test]
    fn scientific_literals() {
        let e = Expr::parse("1e-3 + 2.5E+1").unwrap();
        assert_relative_eq!(e.eval(&at(0.0, 0.0, 0.0, 0.0, 0.0)), 25.001);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(Expr::parse("1 +"), Err(ExprError::UnexpectedEnd)));
        assert!(matches!(
            Expr::parse("foo(t)"),
            Err(ExprError::UnknownIdent(_))
        ));
        assert!(matches!(
            Expr::parse("1 # 2"),
            Err(ExprError::UnexpectedChar('#', _))
        ));
        assert!(matches!(
            Expr::parse("1 2"),
            Err(ExprError::TrailingInput(_))
        ));
        assert!(matches!(
            Expr::parse("sin t"),
            Err(ExprError::UnexpectedEnd)
        ));
    }
}
