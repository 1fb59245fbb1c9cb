//! Infix expression syntax used inside attribute values.
//!
//! Precedence, loosest first: `or`/`||`, `and`/`&&`, `not`/`!`, comparisons
//! (non-associative), `&`, `+ -`, `* /`, unary `-`.

use super::ast::{BinOp, Expr, ExprKind, Ident, Span};
use super::syntax::advance;
use super::SyntaxError;

const MAX_NESTING: usize = 96;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Name(String),
    Sym(&'static str),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

const SYMBOLS: [&str; 19] =
    ["&&", "||", "==", "!=", "<=", ">=", "<", ">", "!", "&", "+", "-", "*", "/", "(", ")", "[", "]", ","];

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(n) => format!("number {n}"),
        Tok::Name(s) => format!("'{s}'"),
        Tok::Sym(s) => format!("'{s}'"),
        Tok::End => "end of expression".into(),
    }
}

fn lex(text: &str, base: Span) -> Result<Vec<Token>, SyntaxError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let mut span = base;
    let step = |span: &mut Span, s: &str| *span = advance(*span, s);
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            step(&mut span, &c.to_string());
            i += 1;
            continue;
        }
        let start = span;
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let mut j = i;
            let value;
            if c == '0' && matches!(chars.get(i + 1), Some('x' | 'X')) {
                j += 2;
                while j < chars.len() && chars[j].is_ascii_hexdigit() {
                    j += 1;
                }
                let digits: String = chars[i + 2..j].iter().collect();
                value = u64::from_str_radix(&digits, 16).ok().map(|v| v as f64);
            } else {
                while j < chars.len() && (chars[j].is_ascii_digit() || chars[j] == '.') {
                    j += 1;
                }
                if j < chars.len() && matches!(chars[j], 'e' | 'E') {
                    let mut k = j + 1;
                    if k < chars.len() && matches!(chars[k], '+' | '-') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        while k < chars.len() && chars[k].is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                let s: String = chars[i..j].iter().collect();
                value = s.parse::<f64>().ok().filter(|v| v.is_finite());
            }
            let s: String = chars[i..j].iter().collect();
            let Some(v) = value else {
                return Err(SyntaxError {
                    line: start.line,
                    col: start.col,
                    message: format!("malformed number '{s}'"),
                    expected: vec!["number".into()],
                });
            };
            if j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                return Err(SyntaxError {
                    line: start.line,
                    col: start.col,
                    message: format!("malformed number '{s}{}'", chars[j]),
                    expected: vec!["operator".into()],
                });
            }
            step(&mut span, &s);
            out.push(Token { tok: Tok::Num(v), span: start });
            i = j;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_' || chars[j] == '.') {
                j += 1;
            }
            let s: String = chars[i..j].iter().collect();
            step(&mut span, &s);
            out.push(Token { tok: Tok::Name(s), span: start });
            i = j;
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
        match SYMBOLS.iter().find(|s| rest.starts_with(**s)) {
            Some(sym) => {
                step(&mut span, sym);
                out.push(Token { tok: Tok::Sym(sym), span: start });
                i += sym.len();
            }
            None => {
                return Err(SyntaxError {
                    line: start.line,
                    col: start.col,
                    message: format!("unexpected character '{c}' in expression"),
                    expected: vec!["operand".into(), "operator".into()],
                })
            }
        }
    }
    out.push(Token { tok: Tok::End, span });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    nesting: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(&self.peek().tok, Tok::Sym(x) if *x == s)
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(&self.peek().tok, Tok::Name(x) if x == w)
    }

    fn err(&self, expected: &[&str]) -> SyntaxError {
        let t = self.peek();
        SyntaxError {
            line: t.span.line,
            col: t.span.col,
            message: format!("unexpected {} in expression", describe(&t.tok)),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), SyntaxError> {
        if self.is_sym(s) {
            self.next();
            Ok(())
        } else {
            Err(self.err(&[s]))
        }
    }

    fn enter(&mut self) -> Result<(), SyntaxError> {
        self.nesting += 1;
        if self.nesting > MAX_NESTING {
            let t = self.peek();
            return Err(SyntaxError {
                line: t.span.line,
                col: t.span.col,
                message: "expression nested too deeply".into(),
                expected: vec![],
            });
        }
        Ok(())
    }

    fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        let span = a.span;
        Expr { kind: ExprKind::Binary(op, Box::new(a), Box::new(b)), span }
    }

    fn or(&mut self) -> Result<Expr, SyntaxError> {
        self.enter()?;
        let mut lhs = self.and()?;
        while self.is_word("or") || self.is_sym("||") {
            self.next();
            let rhs = self.and()?;
            lhs = Self::binary(BinOp::Or, lhs, rhs);
        }
        self.nesting -= 1;
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.not()?;
        while self.is_word("and") || self.is_sym("&&") {
            self.next();
            let rhs = self.not()?;
            lhs = Self::binary(BinOp::And, lhs, rhs);
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, SyntaxError> {
        if self.is_word("not") || self.is_sym("!") {
            let t = self.next();
            self.enter()?;
            let inner = self.not()?;
            self.nesting -= 1;
            return Ok(Expr { kind: ExprKind::Not(Box::new(inner)), span: t.span });
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, SyntaxError> {
        let lhs = self.bit()?;
        let op = match &self.peek().tok {
            Tok::Sym("==") => BinOp::Eq,
            Tok::Sym("!=") => BinOp::Ne,
            Tok::Sym("<") => BinOp::Lt,
            Tok::Sym("<=") => BinOp::Le,
            Tok::Sym(">") => BinOp::Gt,
            Tok::Sym(">=") => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.next();
        let rhs = self.bit()?;
        if matches!(&self.peek().tok, Tok::Sym("==" | "!=" | "<" | "<=" | ">" | ">=")) {
            let t = self.peek();
            return Err(SyntaxError {
                line: t.span.line,
                col: t.span.col,
                message: "comparisons cannot be chained; use parentheses".into(),
                expected: vec!["and".into(), "or".into(), ")".into()],
            });
        }
        Ok(Self::binary(op, lhs, rhs))
    }

    fn bit(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.add()?;
        while self.is_sym("&") {
            self.next();
            let rhs = self.add()?;
            lhs = Self::binary(BinOp::BitAnd, lhs, rhs);
        }
        Ok(lhs)
    }

    fn add(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.mul()?;
        loop {
            let op = if self.is_sym("+") {
                BinOp::Add
            } else if self.is_sym("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            self.next();
            let rhs = self.mul()?;
            lhs = Self::binary(op, lhs, rhs);
        }
    }

    fn mul(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.is_sym("*") {
                BinOp::Mul
            } else if self.is_sym("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Self::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, SyntaxError> {
        if self.is_sym("-") {
            let t = self.next();
            self.enter()?;
            let inner = self.unary()?;
            self.nesting -= 1;
            let kind = match inner.kind {
                ExprKind::Number(n) => ExprKind::Number(-n),
                other => ExprKind::Neg(Box::new(Expr { kind: other, span: inner.span })),
            };
            return Ok(Expr { kind, span: t.span });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, SyntaxError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Num(n) => {
                self.next();
                Ok(Expr { kind: ExprKind::Number(n), span: t.span })
            }
            Tok::Sym("(") => {
                self.next();
                let inner = self.or()?;
                self.expect(")")?;
                Ok(inner)
            }
            Tok::Name(ref name) if matches!(name.as_str(), "and" | "or" | "not") => Err(self.err(&["operand"])),
            Tok::Name(name) => {
                self.next();
                match name.as_str() {
                    "true" => return Ok(Expr { kind: ExprKind::Bool(true), span: t.span }),
                    "false" => return Ok(Expr { kind: ExprKind::Bool(false), span: t.span }),
                    _ => {}
                }
                if self.is_sym("(") {
                    self.next();
                    let mut args = Vec::new();
                    if !self.is_sym(")") {
                        loop {
                            args.push(self.or()?);
                            if self.is_sym(",") {
                                self.next();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(")")?;
                    return Ok(Expr { kind: ExprKind::Call(name, args), span: t.span });
                }
                if self.is_sym("[") {
                    self.next();
                    let mut items = Vec::new();
                    loop {
                        let it = self.next();
                        match it.tok {
                            Tok::Name(s) => items.push(Ident::new(s, it.span)),
                            Tok::Num(n) if n >= 0.0 && n.fract() == 0.0 => {
                                items.push(Ident::new(format!("{n}"), it.span))
                            }
                            _ => {
                                self.pos -= 1;
                                return Err(self.err(&["name", "index"]));
                            }
                        }
                        if self.is_sym(",") {
                            self.next();
                        } else {
                            break;
                        }
                    }
                    self.expect("]")?;
                    return Ok(Expr { kind: ExprKind::Index(name, items), span: t.span });
                }
                Ok(Expr { kind: ExprKind::Name(name), span: t.span })
            }
            _ => Err(self.err(&["number", "name", "("])),
        }
    }
}

/// Parse an expression whose first character is located at `base`.
pub fn parse_expr(text: &str, base: Span) -> Result<Expr, SyntaxError> {
    let toks = lex(text, base)?;
    let mut p = Parser { toks, pos: 0, nesting: 0 };
    if matches!(p.peek().tok, Tok::End) {
        return Err(SyntaxError {
            line: base.line,
            col: base.col,
            message: "empty expression".into(),
            expected: vec!["expression".into()],
        });
    }
    let e = p.or()?;
    if !matches!(p.peek().tok, Tok::End) {
        return Err(p.err(&["operator", "end of expression"]));
    }
    Ok(e)
}
