//! Boolean predicate expressions over named base predicates.
//!
//! Grammar (keywords are case-insensitive):
//!
//! ```text
//! expr   := term (OR term)*
//! term   := factor (AND factor)*
//! factor := NOT factor | '(' expr ')' | identifier
//! ```
//!
//! An expression is evaluated two ways: exactly, over oracle labels, and
//! approximately, over proxy scores. The score calculus substitutes `1 - s` for
//! negation, the product for conjunction and the maximum for disjunction. It is
//! a syntactic substitution, so identities such as De Morgan's laws do not carry
//! over to scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AbaeError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PredicateExpr {
    Base(String),
    Not(Box<PredicateExpr>),
    /// At least two children.
    And(Vec<PredicateExpr>),
    /// At least two children.
    Or(Vec<PredicateExpr>),
}

impl PredicateExpr {
    pub fn base(name: impl Into<String>) -> Self {
        PredicateExpr::Base(name.into())
    }

    pub fn negate(self) -> Self {
        PredicateExpr::Not(Box::new(self))
    }

    /// Distinct base predicate names, sorted.
    pub fn base_names(&self) -> Vec<String> {
        let mut out = BTreeSet::new();
        self.collect_bases(&mut out);
        out.into_iter().map(str::to_owned).collect()
    }

    fn collect_bases<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            PredicateExpr::Base(name) => {
                out.insert(name);
            }
            PredicateExpr::Not(child) => child.collect_bases(out),
            PredicateExpr::And(children) | PredicateExpr::Or(children) => {
                for c in children {
                    c.collect_bases(out);
                }
            }
        }
    }

    /// Resolves every base name to its position in `names`.
    pub fn bind(&self, names: &[String]) -> Result<BoundPredicate> {
        let root = bind_node(self, names)?;
        let mut bases: Vec<usize> = Vec::new();
        root.collect(&mut bases);
        bases.sort_unstable();
        bases.dedup();
        Ok(BoundPredicate { root, bases })
    }

    /// Proxy-score calculus. `scores` returns `None` for unbound names.
    pub fn score_with<F>(&self, scores: &F) -> Result<f64>
    where
        F: Fn(&str) -> Option<f64>,
    {
        Ok(match self {
            PredicateExpr::Base(name) => {
                scores(name).ok_or_else(|| AbaeError::Unbound(name.clone()))?
            }
            PredicateExpr::Not(child) => 1.0 - child.score_with(scores)?,
            PredicateExpr::And(children) => {
                let mut acc = 1.0;
                for c in children {
                    acc *= c.score_with(scores)?;
                }
                acc
            }
            PredicateExpr::Or(children) => {
                let mut acc = f64::NEG_INFINITY;
                for c in children {
                    acc = acc.max(c.score_with(scores)?);
                }
                acc
            }
        })
    }

    pub fn eval_with<F>(&self, labels: &F) -> Result<bool>
    where
        F: Fn(&str) -> Option<bool>,
    {
        Ok(match self {
            PredicateExpr::Base(name) => {
                labels(name).ok_or_else(|| AbaeError::Unbound(name.clone()))?
            }
            PredicateExpr::Not(child) => !child.eval_with(labels)?,
            PredicateExpr::And(children) => {
                let mut acc = true;
                for c in children {
                    acc &= c.eval_with(labels)?;
                }
                acc
            }
            PredicateExpr::Or(children) => {
                let mut acc = false;
                for c in children {
                    acc |= c.eval_with(labels)?;
                }
                acc
            }
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            PredicateExpr::Or(_) => 0,
            PredicateExpr::And(_) => 1,
            PredicateExpr::Not(_) | PredicateExpr::Base(_) => 2,
        }
    }
}

/// Combines per-predicate proxy scores into one score in `[0, 1]`.
pub fn combine_scores(expr: &PredicateExpr, scores: &BTreeMap<String, f64>) -> Result<f64> {
    for (name, &s) in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(AbaeError::config(format!(
                "score for `{name}` is outside [0, 1]: {s}"
            )));
        }
    }
    expr.score_with(&|name| scores.get(name).copied())
}

pub fn eval_oracle_expr(expr: &PredicateExpr, labels: &BTreeMap<String, bool>) -> Result<bool> {
    expr.eval_with(&|name| labels.get(name).copied())
}

fn bind_node(expr: &PredicateExpr, names: &[String]) -> Result<BoundNode> {
    Ok(match expr {
        PredicateExpr::Base(name) => BoundNode::Base(
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| AbaeError::Unbound(name.clone()))?,
        ),
        PredicateExpr::Not(child) => BoundNode::Not(Box::new(bind_node(child, names)?)),
        PredicateExpr::And(children) => BoundNode::And(
            children
                .iter()
                .map(|c| bind_node(c, names))
                .collect::<Result<_>>()?,
        ),
        PredicateExpr::Or(children) => BoundNode::Or(
            children
                .iter()
                .map(|c| bind_node(c, names))
                .collect::<Result<_>>()?,
        ),
    })
}

#[derive(Debug, Clone)]
enum BoundNode {
    Base(usize),
    Not(Box<BoundNode>),
    And(Vec<BoundNode>),
    Or(Vec<BoundNode>),
}

impl BoundNode {
    fn collect(&self, out: &mut Vec<usize>) {
        match self {
            BoundNode::Base(i) => out.push(*i),
            BoundNode::Not(c) => c.collect(out),
            BoundNode::And(cs) | BoundNode::Or(cs) => cs.iter().for_each(|c| c.collect(out)),
        }
    }

    fn eval(&self, labels: &impl Fn(usize) -> bool) -> bool {
        match self {
            BoundNode::Base(i) => labels(*i),
            BoundNode::Not(c) => !c.eval(labels),
            BoundNode::And(cs) => cs.iter().all(|c| c.eval(labels)),
            BoundNode::Or(cs) => cs.iter().any(|c| c.eval(labels)),
        }
    }

    fn score(&self, scores: &impl Fn(usize) -> f64) -> f64 {
        match self {
            BoundNode::Base(i) => scores(*i),
            BoundNode::Not(c) => 1.0 - c.score(scores),
            BoundNode::And(cs) => cs.iter().map(|c| c.score(scores)).product(),
            BoundNode::Or(cs) => cs
                .iter()
                .map(|c| c.score(scores))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// A predicate whose base names have been resolved to column positions.
#[derive(Debug, Clone)]
pub struct BoundPredicate {
    root: BoundNode,
    bases: Vec<usize>,
}

impl BoundPredicate {
    /// Distinct column positions touched by the expression, ascending.
    pub fn bases(&self) -> &[usize] {
        &self.bases
    }

    pub fn eval(&self, labels: impl Fn(usize) -> bool) -> bool {
        self.root.eval(&labels)
    }

    pub fn score(&self, scores: impl Fn(usize) -> f64) -> f64 {
        self.root.score(&scores)
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    And,
    Or,
    Not,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '(' {
            tokens.push((pos, Token::LParen));
            chars.next();
        } else if c == ')' {
            tokens.push((pos, Token::RParen));
            chars.next();
        } else if c.is_ascii_alphabetic() || c == '_' {
            let mut word = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    word.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            let tok = match word.to_ascii_uppercase().as_str() {
                "AND" => Token::And,
                "OR" => Token::Or,
                "NOT" => Token::Not,
                _ => Token::Ident(word),
            };
            tokens.push((pos, tok));
        } else {
            return Err(AbaeError::Syntax {
                position: pos,
                message: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    cursor: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.cursor).map(|(_, t)| t)
    }

    fn position(&self) -> usize {
        self.tokens.get(self.cursor).map_or(self.end, |(p, _)| *p)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(AbaeError::Syntax {
            position: self.position(),
            message: message.into(),
        })
    }

    fn expr(&mut self) -> Result<PredicateExpr> {
        let mut terms = vec![self.term()?];
        while self.peek() == Some(&Token::Or) {
            self.cursor += 1;
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            PredicateExpr::Or(terms)
        })
    }

    fn term(&mut self) -> Result<PredicateExpr> {
        let mut factors = vec![self.factor()?];
        while self.peek() == Some(&Token::And) {
            self.cursor += 1;
            factors.push(self.factor()?);
        }
        Ok(if factors.len() == 1 {
            factors.pop().unwrap()
        } else {
            PredicateExpr::And(factors)
        })
    }

    fn factor(&mut self) -> Result<PredicateExpr> {
        match self.peek().cloned() {
            Some(Token::Not) => {
                self.cursor += 1;
                Ok(self.factor()?.negate())
            }
            Some(Token::LParen) => {
                self.cursor += 1;
                let inner = self.expr()?;
                if self.peek() != Some(&Token::RParen) {
                    return self.error("expected `)`");
                }
                self.cursor += 1;
                Ok(inner)
            }
            Some(Token::Ident(name)) => {
                self.cursor += 1;
                Ok(PredicateExpr::Base(name))
            }
            Some(tok) => self.error(format!("unexpected token {tok:?}")),
            None => self.error("unexpected end of expression"),
        }
    }
}

pub fn parse_predicate(text: &str) -> Result<PredicateExpr> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        cursor: 0,
        end: text.len(),
    };
    let expr = parser.expr()?;
    if parser.cursor != parser.tokens.len() {
        return parser.error("trailing input");
    }
    Ok(expr)
}

impl std::str::FromStr for PredicateExpr {
    type Err = AbaeError;

    fn from_str(s: &str) -> Result<Self> {
        parse_predicate(s)
    }
}

// Prints with the minimum parentheses needed for `parse_predicate` to rebuild
// the same tree. A child at the same n-ary level as its parent is bracketed so
// the parser does not flatten it.
impl fmt::Display for PredicateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, c: &PredicateExpr, parent: u8) -> fmt::Result {
            if c.precedence() <= parent {
                write!(f, "({c})")
            } else {
                write!(f, "{c}")
            }
        }
        match self {
            PredicateExpr::Base(name) => f.write_str(name),
            PredicateExpr::Not(c) => {
                f.write_str("NOT ")?;
                if c.precedence() < 2 {
                    write!(f, "({c})")
                } else {
                    write!(f, "{c}")
                }
            }
            PredicateExpr::And(cs) | PredicateExpr::Or(cs) => {
                let sep = if matches!(self, PredicateExpr::And(_)) {
                    " AND "
                } else {
                    " OR "
                };
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    child(f, c, self.precedence())?;
                }
                Ok(())
            }
        }
    }
}

impl Serialize for PredicateExpr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PredicateExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_predicate(&text).map_err(serde::de::Error::custom)
    }
}
