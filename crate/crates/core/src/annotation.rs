//! Canonical forms of type annotations.
//!
//! Annotations are parsed from their source text into a tiny expression
//! tree, aliases are resolved at constructor positions and the tree is
//! printed back with fixed spacing: no spaces inside brackets, one space
//! after each comma, ` | ` between union members.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unparsable annotation `{text}`: {reason}")]
pub struct UnparsableAnnotation {
    pub text: String,
    pub reason: String,
}

/// A normalized annotation and its outermost constructor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CanonicalType {
    pub canonical: String,
    pub base: String,
}

impl CanonicalType {
    /// Builds a type from an already-canonical string without re-parsing.
    pub fn from_canonical(canonical: impl Into<String>) -> Self {
        let canonical = canonical.into();
        let base = base_of(&canonical).to_string();
        Self { canonical, base }
    }

    pub fn is_any_or_none(&self) -> bool {
        matches!(self.canonical.as_str(), "Any" | "None")
    }
}

impl fmt::Display for CanonicalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

fn base_of(canonical: &str) -> &str {
    canonical.split('[').next().unwrap_or(canonical)
}

/// Name aliases resolved wherever a name appears as a type constructor.
pub const NAME_ALIASES: &[(&str, &str)] = &[
    ("List", "List"),
    ("Text", "str"),
    ("dict", "Dict"),
    ("list", "List"),
    ("set", "Set"),
    ("tuple", "Tuple"),
];

const TYPING_PREFIX: &str = "typing.";

fn resolve_name(name: &str) -> String {
    let name = name.strip_prefix(TYPING_PREFIX).unwrap_or(name);
    NAME_ALIASES
        .iter()
        .find(|(from, _)| *from == name)
        .map_or_else(|| name.to_string(), |(_, to)| (*to).to_string())
}

pub fn normalize_annotation(raw: &str) -> Result<CanonicalType, UnparsableAnnotation> {
    let expr = Parser::new(raw).parse_all()?;
    let mut canonical = String::new();
    render(&expr, true, &mut canonical);
    Ok(CanonicalType::from_canonical(canonical))
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Name(String),
    /// Quoted literal kept verbatim (with normalized double quotes), only
    /// inside `Literal[...]`.
    StrLiteral(String),
    Number(String),
    Ellipsis,
    Subscript(Box<Expr>, Vec<Expr>),
    List(Vec<Expr>),
    EmptyDict,
    Tuple(Vec<Expr>),
    Union(Vec<Expr>),
}

fn render(expr: &Expr, top: bool, out: &mut String) {
    match expr {
        Expr::Name(n) => out.push_str(&resolve_name(n)),
        Expr::StrLiteral(s) => {
            out.push('"');
            out.push_str(s);
            out.push('"');
        }
        Expr::Number(n) => out.push_str(n),
        Expr::Ellipsis => out.push_str("..."),
        Expr::Subscript(head, args) => {
            render(head, top, out);
            render_list(args, out);
        }
        Expr::List(items) if items.is_empty() && top => out.push_str("List"),
        Expr::List(items) if top => {
            out.push_str("List");
            render_list(items, out);
        }
        Expr::List(items) => render_list(items, out),
        Expr::EmptyDict if top => out.push_str("Dict"),
        Expr::EmptyDict => out.push_str("{}"),
        Expr::Tuple(items) => {
            out.push('(');
            render_items(items, out);
            out.push(')');
        }
        Expr::Union(members) => {
            for (i, m) in members.iter().enumerate() {
                if i > 0 {
                    out.push_str(" | ");
                }
                render(m, top, out);
            }
        }
    }
}

fn render_list(items: &[Expr], out: &mut String) {
    out.push('[');
    render_items(items, out);
    out.push(']');
}

fn render_items(items: &[Expr], out: &mut String) {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        render(item, false, out);
    }
}

struct Parser<'a> {
    text: &'a str,
    chars: Vec<char>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            text,
            chars: text.chars().collect(),
            pos: 0,
        }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, UnparsableAnnotation> {
        Err(UnparsableAnnotation {
            text: self.text.to_string(),
            reason: reason.into(),
        })
    }

    fn parse_all(mut self) -> Result<Expr, UnparsableAnnotation> {
        self.skip_ws();
        if self.pos == self.chars.len() {
            return self.fail("empty annotation");
        }
        let expr = self.parse_union(false)?;
        self.skip_ws();
        if self.pos != self.chars.len() {
            return self.fail(format!("unexpected `{}`", self.chars[self.pos]));
        }
        Ok(expr)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn parse_union(&mut self, in_literal: bool) -> Result<Expr, UnparsableAnnotation> {
        let first = self.parse_postfix(in_literal)?;
        let mut members = vec![first];
        while self.eat('|') {
            members.push(self.parse_postfix(in_literal)?);
        }
        Ok(if members.len() == 1 {
            members.pop().unwrap()
        } else {
            Expr::Union(members)
        })
    }

    fn parse_postfix(&mut self, in_literal: bool) -> Result<Expr, UnparsableAnnotation> {
        let mut expr = self.parse_atom(in_literal)?;
        loop {
            self.skip_ws();
            if self.peek() != Some('[') {
                return Ok(expr);
            }
            if !matches!(expr, Expr::Name(_) | Expr::Subscript(..)) {
                return self.fail("subscript on a non-name");
            }
            self.pos += 1;
            let literal = matches!(&expr, Expr::Name(n) if resolve_name(n) == "Literal");
            let args = self.parse_items(']', literal)?;
            if args.is_empty() {
                return self.fail("empty subscript");
            }
            expr = Expr::Subscript(Box::new(expr), args);
        }
    }

    /// Comma-separated items up to `close`; the opening bracket is
    /// already consumed.
    fn parse_items(&mut self, close: char, in_literal: bool) -> Result<Vec<Expr>, UnparsableAnnotation> {
        let mut items = Vec::new();
        loop {
            if self.eat(close) {
                return Ok(items);
            }
            items.push(self.parse_union(in_literal)?);
            if self.eat(',') {
                continue;
            }
            if self.eat(close) {
                return Ok(items);
            }
            return self.fail(format!("expected `,` or `{close}`"));
        }
    }

    fn parse_atom(&mut self, in_literal: bool) -> Result<Expr, UnparsableAnnotation> {
        self.skip_ws();
        let Some(c) = self.peek() else {
            return self.fail("unexpected end");
        };
        match c {
            '[' => {
                self.pos += 1;
                Ok(Expr::List(self.parse_items(']', false)?))
            }
            '(' => {
                self.pos += 1;
                let mut items = self.parse_items(')', in_literal)?;
                if items.len() == 1 {
                    Ok(items.pop().unwrap())
                } else {
                    Ok(Expr::Tuple(items))
                }
            }
            '{' => {
                self.pos += 1;
                if self.eat('}') {
                    Ok(Expr::EmptyDict)
                } else {
                    self.fail("non-empty dict literal")
                }
            }
            '\'' | '"' => {
                let body = self.parse_string(c)?;
                if in_literal {
                    Ok(Expr::StrLiteral(body))
                } else {
                    // Forward reference: the quoted text is itself an annotation.
                    Parser::new(&body).parse_all().or_else(|e| self.fail(e.reason))
                }
            }
            '.' => {
                if self.chars[self.pos..].starts_with(&['.', '.', '.']) {
                    self.pos += 3;
                    Ok(Expr::Ellipsis)
                } else {
                    self.fail("stray `.`")
                }
            }
            '-' | '0'..='9' => self.parse_number(),
            c if c.is_alphabetic() || c == '_' => self.parse_dotted(),
            other => self.fail(format!("unexpected `{other}`")),
        }
    }

    fn parse_string(&mut self, quote: char) -> Result<String, UnparsableAnnotation> {
        self.pos += 1;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == quote {
                let body: String = self.chars[start..self.pos].iter().collect();
                self.pos += 1;
                return Ok(body);
            }
            if c == '\\' || c == '"' {
                return self.fail("unsupported character in string");
            }
            self.pos += 1;
        }
        self.fail("unterminated string")
    }

    fn parse_number(&mut self) -> Result<Expr, UnparsableAnnotation> {
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return self.fail("expected digits");
        }
        Ok(Expr::Number(self.chars[start..self.pos].iter().collect()))
    }

    fn parse_dotted(&mut self) -> Result<Expr, UnparsableAnnotation> {
        let mut name = self.parse_ident()?;
        loop {
            let save = self.pos;
            self.skip_ws();
            if self.peek() == Some('.') && !self.chars[self.pos..].starts_with(&['.', '.', '.']) {
                self.pos += 1;
                self.skip_ws();
                name.push('.');
                name.push_str(&self.parse_ident()?);
            } else {
                self.pos = save;
                return Ok(Expr::Name(name));
            }
        }
    }

    fn parse_ident(&mut self) -> Result<String, UnparsableAnnotation> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_alphanumeric() || c == '_')
        {
            self.pos += 1;
        }
        if self.pos == start || self.chars[start].is_numeric() {
            return self.fail("expected identifier");
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }
}
