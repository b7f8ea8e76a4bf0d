//! Operator requirement language.
//!
//! ```text
//! WHEN time=day AND weather=clear REQUIRE DETECT_WITHIN 8 M RATE >= 0.99
//! WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 1.0
//! ```
//!
//! Keywords are case-insensitive and whitespace is free. A bare level such
//! as `night` or `fog` stands for its tag equality; `sunny` expands to
//! `time=day AND weather=clear`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ObstacleKind, SceneParams, TimeOfDay, Weather};

/// Ground-truth or inferred condition tags of an episode or sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionTags {
    pub time_of_day: TimeOfDay,
    pub weather: Weather,
    pub obstacle_kind: ObstacleKind,
}

impl ConditionTags {
    pub fn of(params: &SceneParams) -> Self {
        Self {
            time_of_day: params.time_of_day,
            weather: params.weather,
            obstacle_kind: params.obstacle_kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "tag", content = "level", rename_all = "lowercase")]
pub enum TagEq {
    Time(TimeOfDay),
    Weather(Weather),
    Obstacle(ObstacleKind),
}

impl TagEq {
    fn tag_name(&self) -> &'static str {
        match self {
            TagEq::Time(_) => "time",
            TagEq::Weather(_) => "weather",
            TagEq::Obstacle(_) => "obstacle",
        }
    }

    pub fn matches(&self, tags: &ConditionTags) -> bool {
        match *self {
            TagEq::Time(t) => tags.time_of_day == t,
            TagEq::Weather(w) => tags.weather == w,
            TagEq::Obstacle(o) => tags.obstacle_kind == o,
        }
    }
}

impl fmt::Display for TagEq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagEq::Time(t) => write!(f, "time={t}"),
            TagEq::Weather(w) => write!(f, "weather={w}"),
            TagEq::Obstacle(o) => write!(f, "obstacle={o}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    /// Conjunction of tag equalities in canonical order; empty is `*`.
    pub predicate: Vec<TagEq>,
    pub threshold_m: f64,
    pub min_rate: f64,
}

impl Requirement {
    pub fn new(mut predicate: Vec<TagEq>, threshold_m: f64, min_rate: f64) -> Result<Self> {
        if !(threshold_m.is_finite() && threshold_m > 0.0) {
            return Err(Error::Semantic(format!(
                "detection threshold must be positive, got {threshold_m}"
            )));
        }
        if !(min_rate > 0.0 && min_rate <= 1.0) {
            return Err(Error::Semantic(format!("rate must lie in (0, 1], got {min_rate}")));
        }
        predicate.sort();
        for w in predicate.windows(2) {
            if w[0].tag_name() == w[1].tag_name() {
                return Err(Error::Semantic(format!(
                    "tag '{}' constrained twice",
                    w[0].tag_name()
                )));
            }
        }
        Ok(Self {
            predicate,
            threshold_m,
            min_rate,
        })
    }

    pub fn is_wildcard(&self) -> bool {
        self.predicate.is_empty()
    }

    pub fn matches(&self, tags: &ConditionTags) -> bool {
        self.predicate.iter().all(|p| p.matches(tags))
    }
}

/// Canonical text form, accepted back by [`parse_requirement`].
pub fn format_requirement(req: &Requirement) -> String {
    let predicate = if req.is_wildcard() {
        "*".to_string()
    } else {
        req.predicate
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" AND ")
    };
    format!(
        "WHEN {predicate} REQUIRE DETECT_WITHIN {} M RATE >= {}",
        req.threshold_m, req.min_rate
    )
}

impl fmt::Display for Requirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_requirement(self))
    }
}

impl FromStr for Requirement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_requirement(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Word(&'a str),
    Number(f64),
    Eq,
    Ge,
    Star,
    End,
}

impl Tok<'_> {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("'{w}'"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Eq => "'='".into(),
            Tok::Ge => "'>='".into(),
            Tok::Star => "'*'".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok<'_>)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Word(&text[start..i])));
        } else if c.is_ascii_digit() || c == b'.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            let n = text[start..i].parse().map_err(|_| Error::Syntax {
                offset: start,
                message: format!("malformed number '{}'", &text[start..i]),
            })?;
            out.push((start, Tok::Number(n)));
        } else if c == b'=' {
            out.push((i, Tok::Eq));
            i += 1;
        } else if c == b'>' && bytes.get(i + 1) == Some(&b'=') {
            out.push((i, Tok::Ge));
            i += 2;
        } else if c == b'*' {
            out.push((i, Tok::Star));
            i += 1;
        } else {
            let ch = text[i..].chars().next().expect("in bounds");
            return Err(Error::Syntax {
                offset: i,
                message: format!("unexpected character '{ch}'"),
            });
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok<'a>)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &(usize, Tok<'a>) {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> (usize, Tok<'a>) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, offset: usize, message: String) -> Result<T> {
        Err(Error::Syntax { offset, message })
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        match self.next() {
            (_, Tok::Word(w)) if w.eq_ignore_ascii_case(kw) => Ok(()),
            (off, t) => self.fail(off, format!("expected {kw}, found {}", t.describe())),
        }
    }

    fn number(&mut self, what: &str) -> Result<f64> {
        match self.next() {
            (_, Tok::Number(n)) => Ok(n),
            (off, t) => self.fail(off, format!("expected {what}, found {}", t.describe())),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek().1, Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn term(&mut self, out: &mut Vec<TagEq>) -> Result<()> {
        let (off, tok) = self.next();
        let Tok::Word(word) = tok else {
            return self.fail(off, format!("expected a condition tag, found {}", tok.describe()));
        };
        if self.peek().1 != Tok::Eq {
            return shorthand(word)
                .map(|terms| out.extend(terms))
                .ok_or(Error::Syntax {
                    offset: off,
                    message: format!("unknown condition level '{word}'"),
                });
        }
        self.next();
        let (level_off, level_tok) = self.next();
        let Tok::Word(level) = level_tok else {
            return self.fail(
                level_off,
                format!("expected a level after '=', found {}", level_tok.describe()),
            );
        };
        let bad_level = |tag: &str| Error::Syntax {
            offset: level_off,
            message: format!("unknown {tag} level '{level}'"),
        };
        let term = match word.to_ascii_lowercase().as_str() {
            "time" | "time_of_day" => TagEq::Time(level.parse().map_err(|_| bad_level("time"))?),
            "weather" => TagEq::Weather(level.parse().map_err(|_| bad_level("weather"))?),
            "obstacle" | "obstacle_kind" | "kind" => {
                TagEq::Obstacle(level.parse().map_err(|_| bad_level("obstacle"))?)
            }
            _ => return self.fail(off, format!("unknown condition tag '{word}'")),
        };
        out.push(term);
        Ok(())
    }

    fn requirement(&mut self) -> Result<Requirement> {
        self.keyword("WHEN")?;
        let mut predicate = Vec::new();
        if self.peek().1 == Tok::Star {
            self.next();
        } else {
            self.term(&mut predicate)?;
            while self.is_keyword("AND") {
                self.next();
                self.term(&mut predicate)?;
            }
        }
        self.keyword("REQUIRE")?;
        self.keyword("DETECT_WITHIN")?;
        let threshold = self.number("a distance")?;
        self.keyword("M")?;
        self.keyword("RATE")?;
        match self.next() {
            (_, Tok::Ge) => {}
            (off, t) => return self.fail(off, format!("expected '>=', found {}", t.describe())),
        }
        let rate = self.number("a rate")?;
        match self.peek() {
            (_, Tok::End) => Requirement::new(predicate, threshold, rate),
            (off, t) => self.fail(*off, format!("trailing input {}", t.describe())),
        }
    }
}

fn shorthand(word: &str) -> Option<Vec<TagEq>> {
    if word.eq_ignore_ascii_case("sunny") {
        return Some(vec![TagEq::Time(TimeOfDay::Day), TagEq::Weather(Weather::Clear)]);
    }
    if let Ok(t) = word.parse() {
        return Some(vec![TagEq::Time(t)]);
    }
    if let Ok(w) = word.parse() {
        return Some(vec![TagEq::Weather(w)]);
    }
    word.parse().ok().map(|o| vec![TagEq::Obstacle(o)])
}

pub fn parse_requirement(text: &str) -> Result<Requirement> {
    Parser {
        toks: lex(text)?,
        pos: 0,
    }
    .requirement()
}

/// One requirement per line; `#` starts a comment. Error offsets are
/// relative to the whole file.
pub fn parse_requirements(text: &str) -> Result<Vec<Requirement>> {
    let mut out = Vec::new();
    let mut line_start = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("");
        if !body.trim().is_empty() {
            out.push(parse_requirement(body).map_err(|e| match e {
                Error::Syntax { offset, message } => Error::Syntax {
                    offset: offset + line_start,
                    message,
                },
                other => other,
            })?);
        }
        line_start += line.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sunny_requirement() {
        let r = parse_requirement("WHEN time=day AND weather=clear REQUIRE DETECT_WITHIN 8 M RATE >= 0.99")
            .unwrap();
        assert_eq!(
            r.predicate,
            vec![TagEq::Time(TimeOfDay::Day), TagEq::Weather(Weather::Clear)]
        );
        assert_eq!((r.threshold_m, r.min_rate), (8.0, 0.99));
        let short = parse_requirement("when sunny require detect_within 8 m rate>=0.99").unwrap();
        assert_eq!(short, r);
    }

    #[test]
    fn wildcard_boundary_rate() {
        let r = parse_requirement("WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 1.0").unwrap();
        assert!(r.is_wildcard());
        assert_eq!(r.min_rate, 1.0);
        assert_eq!(format_requirement(&r), "WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 1");
    }

    #[test]
    fn missing_require_clause() {
        let text = "WHEN time=day RATE >= 0.99";
        match parse_requirement(text) {
            Err(Error::Syntax { offset, message }) => {
                assert_eq!(offset, text.find("RATE").unwrap());
                assert!(message.contains("REQUIRE"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors() {
        for bad in [
            "WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 0",
            "WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 1.5",
            "WHEN * REQUIRE DETECT_WITHIN 0 M RATE >= 0.9",
            "WHEN night AND time=day REQUIRE DETECT_WITHIN 8 M RATE >= 0.9",
        ] {
            assert!(matches!(parse_requirement(bad), Err(Error::Semantic(_))), "{bad}");
        }
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        let cases = [
            ("WHEN dusky REQUIRE DETECT_WITHIN 8 M RATE >= 0.9", 5),
            ("WHEN time=noon REQUIRE DETECT_WITHIN 8 M RATE >= 0.9", 10),
            ("WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 0.9 extra", 45),
            ("WHEN * REQUIRE DETECT_WITHIN 8 M RATE => 0.9", 39),
            ("WHEN * REQUIRE DETECT_WITHIN 8 KM RATE >= 0.9", 31),
        ];
        for (text, at) in cases {
            match parse_requirement(text) {
                Err(Error::Syntax { offset, .. }) => assert_eq!(offset, at, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn file_with_comments() {
        let text = "# operator requirements\nWHEN sunny REQUIRE DETECT_WITHIN 8 M RATE >= 0.99\n\nWHEN fog REQUIRE DETECT_WITHIN 10 M RATE >= 0.9 # fog\n";
        let reqs = parse_requirements(text).unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].predicate, vec![TagEq::Weather(Weather::Fog)]);
        let bad = "WHEN * REQUIRE DETECT_WITHIN 8 M RATE >= 0.9\nWHEN ? REQUIRE";
        match parse_requirements(bad) {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, bad.find('?').unwrap()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matching() {
        let r = parse_requirement("WHEN night AND barrel REQUIRE DETECT_WITHIN 8 M RATE >= 0.9").unwrap();
        let mut tags = ConditionTags {
            time_of_day: TimeOfDay::Night,
            weather: Weather::Rain,
            obstacle_kind: ObstacleKind::Barrel,
        };
        assert!(r.matches(&tags));
        tags.obstacle_kind = ObstacleKind::Wall;
        assert!(!r.matches(&tags));
    }
}
