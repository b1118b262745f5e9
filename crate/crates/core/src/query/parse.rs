//! Query text grammar:
//!
//! ```text
//! exec   := "summary" | "rank" | "rank(" lo "-" hi [":" stride] ")" | "rank(" id {"," id} ")"
//! ctx    := "*" | "function(" glob ")" | "path(" glob {"->" glob} ")"
//! metric := name ":" ("sum" | "prop") " (" ("i" | "e") ")"
//! ```

use std::fmt;

use thiserror::Error;

use super::{CtxSelector, ExecSelector, MetricSelector, QuerySpec, Variant};
use crate::store::Scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryField {
    Exec,
    Ctx,
    Metric,
    Window,
}

impl fmt::Display for QueryField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryField::Exec => "exec",
            QueryField::Ctx => "ctx",
            QueryField::Metric => "metric",
            QueryField::Window => "window",
        })
    }
}

/// Malformed query text; `offset` is a byte offset into the field's text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field} selector, byte {offset}: {message}")]
pub struct ParseError {
    pub field: QueryField,
    pub offset: usize,
    pub message: String,
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
    field: QueryField,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str, field: QueryField) -> Self {
        Cursor { s, pos: 0, field }
    }

    fn err(&self, at: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            field: self.field,
            offset: at,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), ParseError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.err(self.pos, format!("expected {lit:?}")))
        }
    }

    fn number(&mut self) -> Result<u32, ParseError> {
        let start = self.pos;
        let len = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if len == 0 {
            return Err(self.err(start, "expected a non-negative integer"));
        }
        self.pos += len;
        self.s[start..self.pos]
            .parse()
            .map_err(|_| self.err(start, "integer out of range"))
    }

    fn end(&self) -> Result<(), ParseError> {
        if self.pos == self.s.len() {
            Ok(())
        } else {
            Err(self.err(self.pos, "unexpected trailing text"))
        }
    }
}

pub fn parse_exec(s: &str) -> Result<ExecSelector, ParseError> {
    let mut c = Cursor::new(s, QueryField::Exec);
    if c.eat("summary") {
        c.end()?;
        return Ok(ExecSelector::Summary);
    }
    if !c.eat("rank") {
        return Err(c.err(0, "expected \"summary\" or \"rank\""));
    }
    if c.pos == s.len() {
        return Ok(ExecSelector::AllRanks);
    }
    c.expect("(")?;
    let lo_at = c.pos;
    let first = c.number()?;
    let sel = if c.eat("-") {
        let hi = c.number()?;
        if first > hi {
            return Err(c.err(lo_at, format!("inverted range {first}-{hi}")));
        }
        let stride = if c.eat(":") {
            let at = c.pos;
            let st = c.number()?;
            if st == 0 {
                return Err(c.err(at, "stride must be at least 1"));
            }
            st
        } else {
            1
        };
        ExecSelector::RankRange { lo: first, hi, stride }
    } else {
        let mut ids = vec![first];
        while c.eat(",") {
            ids.push(c.number()?);
        }
        ExecSelector::RankList(ids)
    };
    c.expect(")")?;
    c.end()?;
    Ok(sel)
}

fn glob_at(c: &Cursor, text: &str, at: usize) -> Result<String, ParseError> {
    if text.is_empty() {
        return Err(c.err(at, "empty pattern"));
    }
    Ok(text.to_string())
}

pub fn parse_ctx(s: &str) -> Result<CtxSelector, ParseError> {
    let c = Cursor::new(s, QueryField::Ctx);
    if s == "*" {
        return Ok(CtxSelector::All);
    }
    let (prefix, is_path) = if s.starts_with("function(") {
        ("function(", false)
    } else if s.starts_with("path(") {
        ("path(", true)
    } else {
        return Err(c.err(0, "expected \"*\", \"function(...)\" or \"path(...)\""));
    };
    if !s.ends_with(')') || s.len() == prefix.len() {
        return Err(c.err(s.len(), "expected closing \")\""));
    }
    let body = &s[prefix.len()..s.len() - 1];
    if !is_path {
        return Ok(CtxSelector::FunctionGlob(glob_at(&c, body, prefix.len())?));
    }
    let mut at = prefix.len();
    let mut parts = Vec::new();
    for part in body.split("->") {
        parts.push(glob_at(&c, part, at)?);
        at += part.len() + 2;
    }
    Ok(CtxSelector::Path(parts))
}

pub fn parse_metric(s: &str) -> Result<MetricSelector, ParseError> {
    let mut c = Cursor::new(s, QueryField::Metric);
    let Some(colon) = s.find(':') else {
        return Err(c.err(s.len(), "expected \":\" after metric name"));
    };
    if colon == 0 {
        return Err(c.err(0, "empty metric name"));
    }
    c.pos = colon + 1;
    let variant = if c.eat("sum") {
        Variant::Sum
    } else if c.eat("prop") {
        Variant::Prop
    } else {
        return Err(c.err(c.pos, "expected \"sum\" or \"prop\""));
    };
    c.expect(" (")?;
    let scope = if c.eat("i") {
        Scope::Inclusive
    } else if c.eat("e") {
        Scope::Exclusive
    } else {
        return Err(c.err(c.pos, "expected \"i\" or \"e\""));
    };
    c.expect(")")?;
    c.end()?;
    Ok(MetricSelector {
        name: s[..colon].to_string(),
        variant,
        scope,
    })
}

pub fn parse_query(
    exec: &str,
    ctx: &str,
    metric: &str,
    window: Option<(u64, u64)>,
) -> Result<QuerySpec, ParseError> {
    if let Some((t0, t1)) = window {
        if t0 > t1 {
            return Err(ParseError {
                field: QueryField::Window,
                offset: 0,
                message: format!("window start {t0} after end {t1}"),
            });
        }
    }
    Ok(QuerySpec {
        exec: parse_exec(exec)?,
        ctx: parse_ctx(ctx)?,
        metric: parse_metric(metric)?,
        time_window: window,
    })
}

impl fmt::Display for ExecSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecSelector::Summary => f.write_str("summary"),
            ExecSelector::AllRanks => f.write_str("rank"),
            ExecSelector::RankRange { lo, hi, stride: 1 } => write!(f, "rank({lo}-{hi})"),
            ExecSelector::RankRange { lo, hi, stride } => write!(f, "rank({lo}-{hi}:{stride})"),
            ExecSelector::RankList(ids) => {
                let ids: Vec<String> = ids.iter().map(u32::to_string).collect();
                write!(f, "rank({})", ids.join(","))
            }
        }
    }
}

impl fmt::Display for CtxSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CtxSelector::All => f.write_str("*"),
            CtxSelector::FunctionGlob(g) => write!(f, "function({g})"),
            CtxSelector::Path(p) => write!(f, "path({})", p.join("->")),
        }
    }
}

impl fmt::Display for MetricSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.variant {
            Variant::Sum => "sum",
            Variant::Prop => "prop",
        };
        let s = match self.scope {
            Scope::Inclusive => "i",
            Scope::Exclusive => "e",
        };
        write!(f, "{}:{v} ({s})", self.name)
    }
}
