//! Deep-dive filter expressions: `client-type = 1 AND client-version > 134`.
//!
//! ```text
//! expr    := clause ("AND" clause)*
//! clause  := NAME OP LITERAL
//! OP      := = | != | < | <= | > | >=
//! LITERAL := digits ["." digits] | "quoted text"
//! ```
//!
//! Names are checked against the catalog when binding, not when parsing.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use super::{EngineError, TableSource};
use crate::bsi::CmpOp;
use crate::model::{Catalog, Date, PartitionKey};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Literal {
    /// Decimal text as written; kept verbatim so printing is exact.
    Number(String),
    Text(String),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => f.write_str(n),
            Literal::Text(t) => {
                f.write_str("\"")?;
                for c in t.chars() {
                    if c == '"' || c == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("\"")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clause {
    pub name: String,
    pub op: CmpOp,
    pub literal: Literal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateExpr {
    pub clauses: Vec<Clause>,
}

impl fmt::Display for PredicateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{} {} {}", c.name, c.op, c.literal)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PredicateErrorKind {
    Empty,
    ExpectedName,
    ExpectedOperator,
    UnknownOperator(String),
    ExpectedLiteral,
    ExpectedAnd,
    UnterminatedString,
    BadNumber,
}

/// Syntax error at byte offset `pos`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateError {
    pub pos: usize,
    pub kind: PredicateErrorKind,
}

impl fmt::Display for PredicateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "predicate syntax error at column {}: ", self.pos + 1)?;
        match &self.kind {
            PredicateErrorKind::Empty => f.write_str("empty expression"),
            PredicateErrorKind::ExpectedName => f.write_str("expected a dimension name"),
            PredicateErrorKind::ExpectedOperator => f.write_str("expected an operator"),
            PredicateErrorKind::UnknownOperator(op) => write!(f, "unknown operator `{op}`"),
            PredicateErrorKind::ExpectedLiteral => f.write_str("expected a number or quoted string"),
            PredicateErrorKind::ExpectedAnd => f.write_str("expected AND"),
            PredicateErrorKind::UnterminatedString => f.write_str("unterminated string"),
            PredicateErrorKind::BadNumber => f.write_str("malformed number"),
        }
    }
}

impl core::error::Error for PredicateError {}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.src.len()
    }

    fn err<T>(&self, kind: PredicateErrorKind) -> Result<T, PredicateError> {
        Err(PredicateError { pos: self.pos, kind })
    }

    fn word(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return None,
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') {
                self.pos += 1;
            } else {
                break;
            }
        }
        Some(&self.src[start..self.pos])
    }

    fn name(&mut self) -> Result<String, PredicateError> {
        let start = self.pos;
        match self.word() {
            Some(w) if !w.eq_ignore_ascii_case("AND") => Ok(w.into()),
            _ => {
                self.pos = start;
                self.skip_ws();
                self.err(PredicateErrorKind::ExpectedName)
            }
        }
    }

    fn op(&mut self) -> Result<CmpOp, PredicateError> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if matches!(c, '=' | '!' | '<' | '>') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = &self.src[start..self.pos];
        let op = match text {
            "" => None,
            "=" => Some(CmpOp::Eq),
            "!=" => Some(CmpOp::Ne),
            "<" => Some(CmpOp::Lt),
            "<=" => Some(CmpOp::Le),
            ">" => Some(CmpOp::Gt),
            ">=" => Some(CmpOp::Ge),
            other => {
                self.pos = start;
                return self.err(PredicateErrorKind::UnknownOperator(other.into()));
            }
        };
        match op {
            Some(op) => Ok(op),
            None => self.err(PredicateErrorKind::ExpectedOperator),
        }
    }

    fn literal(&mut self) -> Result<Literal, PredicateError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(q @ ('"' | '\'')) => {
                self.pos += 1;
                let mut text = String::new();
                let mut escaped = false;
                while let Some(c) = self.peek() {
                    self.pos += c.len_utf8();
                    if escaped {
                        text.push(c);
                        escaped = false;
                    } else if c == '\\' {
                        escaped = true;
                    } else if c == q {
                        return Ok(Literal::Text(text));
                    } else {
                        text.push(c);
                    }
                }
                self.pos = start;
                self.err(PredicateErrorKind::UnterminatedString)
            }
            Some(c) if c.is_ascii_digit() => {
                let digits = |lx: &mut Self| {
                    let s = lx.pos;
                    while lx.peek().is_some_and(|c| c.is_ascii_digit()) {
                        lx.pos += 1;
                    }
                    lx.pos - s
                };
                digits(self);
                if self.peek() == Some('.') {
                    self.pos += 1;
                    if digits(self) == 0 {
                        return self.err(PredicateErrorKind::BadNumber);
                    }
                }
                if self.peek().is_some_and(|c| c.is_alphanumeric() || c == '.' || c == '_') {
                    return self.err(PredicateErrorKind::BadNumber);
                }
                Ok(Literal::Number(self.src[start..self.pos].into()))
            }
            _ => self.err(PredicateErrorKind::ExpectedLiteral),
        }
    }
}

pub fn parse_predicate(text: &str) -> Result<PredicateExpr, PredicateError> {
    let mut lx = Lexer { src: text, pos: 0 };
    if lx.at_end() {
        return lx.err(PredicateErrorKind::Empty);
    }
    let mut clauses = Vec::new();
    loop {
        let name = lx.name()?;
        let op = lx.op()?;
        let literal = lx.literal()?;
        clauses.push(Clause { name, op, literal });
        if lx.at_end() {
            return Ok(PredicateExpr { clauses });
        }
        let at = lx.pos;
        match lx.word() {
            Some(w) if w.eq_ignore_ascii_case("AND") => {}
            _ => {
                lx.pos = at;
                return lx.err(PredicateErrorKind::ExpectedAnd);
            }
        }
    }
}

/// Per-clause test on stored (scaled, coded) values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Test {
    Cmp(CmpOp, u64),
    /// Matches every unit that has a value.
    Present,
    Never,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundClause {
    pub name: String,
    pub test: Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundPredicate {
    pub clauses: Vec<BoundClause>,
}

impl BoundPredicate {
    pub(crate) fn require<S: TableSource + ?Sized>(&self, src: &S, date: Date) -> Result<(), EngineError> {
        let mut missing: Vec<PartitionKey> = Vec::new();
        for c in &self.clauses {
            let key = PartitionKey::Dimension(c.name.clone(), date);
            if !src.has_dimension(&c.name, date) && !missing.contains(&key) {
                missing.push(key);
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(EngineError::MissingPartitions(missing))
        }
    }
}

/// `value * scale` for decimal text, as `(floor, exact)`. `None` when the
/// floor does not fit in 64 bits.
pub(crate) fn scale_decimal(text: &str, scale: u64) -> Option<(u64, bool)> {
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    let mut num: u128 = 0;
    for b in int.bytes().chain(frac.bytes()) {
        num = num.checked_mul(10)?.checked_add(u128::from(b - b'0'))?;
    }
    let num = num.checked_mul(u128::from(scale))?;
    let den = 10u128.checked_pow(frac.len() as u32)?;
    let floor = u64::try_from(num / den).ok()?;
    Some((floor, num % den == 0))
}

fn numeric_test(op: CmpOp, text: &str, scale: u64) -> Test {
    match scale_decimal(text, scale) {
        None => match op {
            CmpOp::Lt | CmpOp::Le | CmpOp::Ne => Test::Present,
            CmpOp::Gt | CmpOp::Ge | CmpOp::Eq => Test::Never,
        },
        Some((k, true)) => Test::Cmp(op, k),
        // k < literal < k + 1
        Some((k, false)) => match op {
            CmpOp::Eq => Test::Never,
            CmpOp::Ne => Test::Present,
            CmpOp::Lt | CmpOp::Le => Test::Cmp(CmpOp::Le, k),
            CmpOp::Gt | CmpOp::Ge => Test::Cmp(CmpOp::Gt, k),
        },
    }
}

/// Resolves names against the catalog and converts literals to stored
/// units: numbers are scaled, categories become dictionary codes.
pub fn bind(expr: &PredicateExpr, catalog: &Catalog) -> Result<BoundPredicate, EngineError> {
    let mut clauses = Vec::with_capacity(expr.clauses.len());
    for c in &expr.clauses {
        let spec = catalog
            .dimensions
            .get(&c.name)
            .ok_or_else(|| EngineError::UnknownDimension(c.name.clone()))?;
        let test = match (&c.literal, &spec.categories) {
            (Literal::Number(n), None) => numeric_test(c.op, n, spec.scale),
            (Literal::Text(t), Some(_)) => {
                if !matches!(c.op, CmpOp::Eq | CmpOp::Ne) {
                    return Err(EngineError::CategoryOrdering(c.name.clone()));
                }
                match (spec.code_of(t), c.op) {
                    (Some(code), op) => Test::Cmp(op, code),
                    (None, CmpOp::Eq) => Test::Never,
                    (None, _) => Test::Present,
                }
            }
            (Literal::Text(_), None) => {
                return Err(EngineError::LiteralType {
                    name: c.name.clone(),
                    expected: "numeric",
                })
            }
            (Literal::Number(_), Some(_)) => {
                return Err(EngineError::LiteralType {
                    name: c.name.clone(),
                    expected: "quoted category",
                })
            }
        };
        clauses.push(BoundClause {
            name: c.name.clone(),
            test,
        });
    }
    Ok(BoundPredicate { clauses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DimensionSpec, HashConfig};
    use alloc::string::ToString;
    use proptest::prelude::*;

    #[test]
    fn parses_a_conjunction() {
        let e = parse_predicate("client-type = 1 AND client-version > 134").unwrap();
        assert_eq!(e.clauses.len(), 2);
        assert_eq!(e.clauses[0].name, "client-type");
        assert_eq!(e.clauses[1].op, CmpOp::Gt);
        assert_eq!(e.clauses[1].literal, Literal::Number("134".into()));
        assert_eq!(e.to_string(), "client-type = 1 AND client-version > 134");
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let e = parse_predicate("x = ").unwrap_err();
        assert_eq!(e.kind, PredicateErrorKind::ExpectedLiteral);
        assert_eq!(e.pos, 4);
        let e = parse_predicate("x == 1").unwrap_err();
        assert_eq!((e.pos, e.kind), (2, PredicateErrorKind::UnknownOperator("==".into())));
        let e = parse_predicate("x = 1 y = 2").unwrap_err();
        assert_eq!((e.pos, e.kind), (6, PredicateErrorKind::ExpectedAnd));
        assert_eq!(parse_predicate("  ").unwrap_err().kind, PredicateErrorKind::Empty);
        assert_eq!(parse_predicate("= 1").unwrap_err().kind, PredicateErrorKind::ExpectedName);
        assert_eq!(parse_predicate("x 1").unwrap_err().kind, PredicateErrorKind::ExpectedOperator);
        assert_eq!(parse_predicate("x = 'ab").unwrap_err().kind, PredicateErrorKind::UnterminatedString);
        assert_eq!(parse_predicate("x = 1.").unwrap_err().kind, PredicateErrorKind::BadNumber);
        assert_eq!(parse_predicate("x = -1").unwrap_err().kind, PredicateErrorKind::ExpectedLiteral);
        assert!(parse_predicate("x = 1 AND").is_err());
    }

    #[test]
    fn quoted_text_round_trips() {
        let e = parse_predicate(r#"os = "i\"os" and os != 'x'"#).unwrap();
        assert_eq!(e.clauses[0].literal, Literal::Text("i\"os".into()));
        assert_eq!(e.to_string(), r#"os = "i\"os" AND os != "x""#);
    }

    #[test]
    fn decimal_scaling() {
        assert_eq!(scale_decimal("2.5", 10), Some((25, true)));
        assert_eq!(scale_decimal("1.55", 10), Some((15, false)));
        assert_eq!(scale_decimal("134", 1), Some((134, true)));
        assert_eq!(scale_decimal("0.50", 1), Some((0, false)));
        assert_eq!(scale_decimal("99999999999999999999", 1), None);
    }

    #[test]
    fn binding_converts_literals() {
        let mut cat = Catalog::new(HashConfig::default());
        cat.dimensions.insert("v".into(), DimensionSpec { scale: 10, categories: None });
        let mut os = DimensionSpec::categorical();
        os.categories.as_mut().unwrap().push("ios".into());
        cat.dimensions.insert("os".into(), os);

        let b = bind(&parse_predicate("v > 1.55 AND v = 1.5 AND os = \"ios\"").unwrap(), &cat).unwrap();
        let tests: Vec<Test> = b.clauses.iter().map(|c| c.test).collect();
        assert_eq!(tests, [Test::Cmp(CmpOp::Gt, 15), Test::Cmp(CmpOp::Eq, 15), Test::Cmp(CmpOp::Eq, 1)]);

        let b = bind(&parse_predicate("os != \"web\" AND os = \"web\"").unwrap(), &cat).unwrap();
        assert_eq!(b.clauses[0].test, Test::Present);
        assert_eq!(b.clauses[1].test, Test::Never);

        assert_eq!(
            bind(&parse_predicate("nope = 1").unwrap(), &cat),
            Err(EngineError::UnknownDimension("nope".into()))
        );
        assert!(matches!(
            bind(&parse_predicate("os < \"ios\"").unwrap(), &cat),
            Err(EngineError::CategoryOrdering(_))
        ));
        assert!(matches!(
            bind(&parse_predicate("v = \"a\"").unwrap(), &cat),
            Err(EngineError::LiteralType { .. })
        ));
    }

    fn arb_clause() -> impl Strategy<Value = Clause> {
        let name = "[a-z_][a-z0-9_.-]{0,12}".prop_filter("keyword", |n| !n.eq_ignore_ascii_case("and"));
        let op = prop::sample::select(CmpOp::ALL.to_vec());
        let lit = prop_oneof![
            (0u64..1_000_000, prop::option::of(0u32..1000))
                .prop_map(|(i, f)| Literal::Number(match f {
                    Some(f) => alloc::format!("{i}.{f}"),
                    None => i.to_string(),
                })),
            "[ -~]{0,10}".prop_map(Literal::Text),
        ];
        (name, op, lit).prop_map(|(name, op, literal)| Clause { name, op, literal })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(clauses in prop::collection::vec(arb_clause(), 1..6)) {
            let expr = PredicateExpr { clauses };
            let text = expr.to_string();
            let back = parse_predicate(&text).unwrap();
            prop_assert_eq!(&back, &expr);
            prop_assert_eq!(back.to_string(), text);
        }
    }
}
