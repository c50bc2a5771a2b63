use std::fmt;

use super::{Atom, Consequent, FolRule, Formula, Quantifier, Term, KEYWORDS};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Number(String),
    Str(String),
    Keyword(&'static str),
    LParen,
    RParen,
    Comma,
    Arrow,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Number(s) => format!("number `{s}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Keyword(k) => format!("`{k}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Arrow => "`->`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

/// Syntax error with a 1-based source location and the set of tokens that
/// would have been accepted there.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub found: String,
    pub expected: Vec<String>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syntax error at line {}, column {}: found {}", self.line, self.column, self.found)?;
        if !self.expected.is_empty() {
            write!(f, ", expected one of: {}", self.expected.join(", "))?;
        }
        Ok(())
    }
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, column, found: String, expected: &[&str]| ParseError {
        line,
        column,
        found,
        expected: expected.iter().map(|s| s.to_string()).collect(),
    };
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let push = |out: &mut Vec<Spanned>, tok| out.push(Spanned { tok, line: start_line, column: start_col });
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        match c {
            '(' => push(&mut out, Tok::LParen),
            ')' => push(&mut out, Tok::RParen),
            ',' => push(&mut out, Tok::Comma),
            '∀' => push(&mut out, Tok::Keyword("FORALL")),
            '∃' => push(&mut out, Tok::Keyword("EXISTS")),
            '∧' => push(&mut out, Tok::Keyword("AND")),
            '∨' => push(&mut out, Tok::Keyword("OR")),
            '¬' => push(&mut out, Tok::Keyword("NOT")),
            '→' | '⇒' => push(&mut out, Tok::Arrow),
            _ => {}
        }
        if matches!(c, '(' | ')' | ',' | '∀' | '∃' | '∧' | '∨' | '¬' | '→' | '⇒') {
            i += 1;
            col += 1;
            continue;
        }
        if c == '-' && chars.get(i + 1) == Some(&'>') {
            push(&mut out, Tok::Arrow);
            i += 2;
            col += 2;
            continue;
        }
        if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            col += i - start;
            push(&mut out, Tok::Number(chars[start..i].iter().collect()));
            continue;
        }
        if c == '"' {
            let mut s = String::new();
            i += 1;
            col += 1;
            loop {
                match chars.get(i) {
                    None | Some('\n') => {
                        return Err(err(start_line, start_col, "unterminated string".into(), &["`\"`"]))
                    }
                    Some('"') => {
                        i += 1;
                        col += 1;
                        break;
                    }
                    Some('\\') => {
                        let escaped = match chars.get(i + 1) {
                            Some('"') => '"',
                            Some('\\') => '\\',
                            Some('n') => '\n',
                            other => {
                                return Err(err(
                                    line,
                                    col,
                                    format!("bad escape {:?}", other.map(|c| c.to_string()).unwrap_or_default()),
                                    &["`\\\"`", "`\\\\`", "`\\n`"],
                                ))
                            }
                        };
                        s.push(escaped);
                        i += 2;
                        col += 2;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        i += 1;
                        col += 1;
                    }
                }
            }
            push(&mut out, Tok::Str(s));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            let word: String = chars[start..i].iter().collect();
            let tok = match KEYWORDS.iter().find(|k| **k == word) {
                Some(k) => Tok::Keyword(k),
                None => Tok::Ident(word),
            };
            push(&mut out, tok);
            continue;
        }
        return Err(err(line, col, format!("unexpected character {c:?}"), &[]));
    }
    out.push(Spanned { tok: Tok::Eof, line, column: col });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

const FACTOR_START: &[&str] = &["`FORALL`", "`EXISTS`", "`NOT`", "identifier", "`(`"];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> ParseError {
        let sp = &self.toks[self.pos];
        ParseError {
            line: sp.line,
            column: sp.column,
            found: sp.tok.describe(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expect(&mut self, tok: Tok, label: &str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(&[label]))
        }
    }

    fn expr(&mut self) -> Result<Formula, ParseError> {
        let mut terms = vec![self.term()?];
        while *self.peek() == Tok::Keyword("OR") {
            self.bump();
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Formula::Or(terms) })
    }

    fn term(&mut self) -> Result<Formula, ParseError> {
        let mut factors = vec![self.factor()?];
        while *self.peek() == Tok::Keyword("AND") {
            self.bump();
            factors.push(self.factor()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { Formula::And(factors) })
    }

    fn factor(&mut self) -> Result<Formula, ParseError> {
        match self.peek().clone() {
            Tok::Keyword(k @ ("FORALL" | "EXISTS")) => {
                self.bump();
                let variable = match self.peek().clone() {
                    Tok::Ident(v) => {
                        self.bump();
                        v
                    }
                    _ => return Err(self.error(&["variable name"])),
                };
                let quantifier = if k == "FORALL" { Quantifier::ForAll } else { Quantifier::Exists };
                let body = self.factor()?;
                Ok(Formula::Quantified { quantifier, variable, body: Box::new(body) })
            }
            Tok::Keyword("NOT") => {
                self.bump();
                Ok(Formula::Not(Box::new(self.factor()?)))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                self.expect(Tok::LParen, "`(`")?;
                let mut args = Vec::new();
                if *self.peek() != Tok::RParen {
                    loop {
                        args.push(self.argument()?);
                        match self.peek() {
                            Tok::Comma => {
                                self.bump();
                            }
                            Tok::RParen => break,
                            _ => return Err(self.error(&["`,`", "`)`"])),
                        }
                    }
                }
                self.bump();
                Ok(Formula::Atom(Atom { predicate: name, args }))
            }
            _ => Err(self.error(FACTOR_START)),
        }
    }

    fn argument(&mut self) -> Result<Term, ParseError> {
        match self.peek().clone() {
            Tok::Ident(v) => {
                self.bump();
                Ok(Term::Var(v))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Term::Str(s))
            }
            Tok::Number(n) => match n.parse::<i64>() {
                Ok(i) => {
                    self.bump();
                    Ok(Term::Int(i))
                }
                Err(_) => Err(self.error(&["integer within 64-bit range"])),
            },
            _ => Err(self.error(&["variable", "string", "integer"])),
        }
    }

    fn label_id(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) | Tok::Number(s) | Tok::Str(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.error(&["label identifier"])),
        }
    }

    fn labelled(&mut self, keyword: &'static str) -> Result<String, ParseError> {
        self.expect(Tok::Keyword(keyword), &format!("`{keyword}`"))?;
        self.expect(Tok::LParen, "`(`")?;
        let id = self.label_id()?;
        self.expect(Tok::RParen, "`)`")?;
        Ok(id)
    }

    fn consequent(&mut self) -> Result<Consequent, ParseError> {
        let article = self.labelled("ARTICLE")?;
        Ok(match self.peek() {
            Tok::Keyword("CHARGE") => Consequent::ArticleCharge { article, charge: self.labelled("CHARGE")? },
            Tok::Keyword("TERM") => {
                Consequent::ArticlePrisonTerm { article, prison_term: self.labelled("TERM")? }
            }
            _ => Consequent::Article { article },
        })
    }

    fn finish(&self) -> Result<(), ParseError> {
        if *self.peek() == Tok::Eof {
            Ok(())
        } else {
            Err(self.error(&["end of input"]))
        }
    }
}

/// Parses a bare antecedent formula (no `->`).
pub fn parse_formula(src: &str) -> Result<Formula, ParseError> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let f = p.expr()?;
    p.finish()?;
    Ok(f)
}

/// Parses `antecedent -> consequent`.
pub fn parse_rule_parts(src: &str) -> Result<(Formula, Consequent), ParseError> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let antecedent = p.expr()?;
    if *p.peek() != Tok::Arrow {
        return Err(p.error(&["`->`", "`AND`", "`OR`"]));
    }
    p.bump();
    let consequent = p.consequent()?;
    p.finish()?;
    Ok((antecedent, consequent))
}

/// Parses rule text into a version-0 rule whose id is derived from the consequent.
pub fn parse_rule(src: &str) -> Result<FolRule, ParseError> {
    let (antecedent, target) = parse_rule_parts(src)?;
    Ok(FolRule::new(format!("{}/0", target.key()), target, antecedent))
}
