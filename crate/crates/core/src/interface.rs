//! Response grammar: `<think>…</think><answer>…</answer>` with `<rg>` region
//! and `<ins>` instance expressions inside the answer, and the format reward
//! built on top of it.
//!
//! Scanning is a single left-to-right pass over tag tokens of the form
//! `<name>` / `</name>` (ASCII letters only). Anything else, including a bare
//! `<`, is text.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SEMANTIC_PREFIX: &str = "[semantic]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sod,
    Sis,
    Cosod,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Sod, TaskKind::Sis, TaskKind::Cosod];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Sod => "sod",
            TaskKind::Sis => "sis",
            TaskKind::Cosod => "cosod",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sod" => Ok(TaskKind::Sod),
            "sis" => Ok(TaskKind::Sis),
            "cosod" => Ok(TaskKind::Cosod),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionKind {
    Region,
    Instance,
}

impl ExpressionKind {
    fn tag(self) -> Tag {
        match self {
            ExpressionKind::Region => Tag::Rg,
            ExpressionKind::Instance => Tag::Ins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReferringExpression {
    pub kind: ExpressionKind,
    pub text: String,
    pub semantic: bool,
}

impl ReferringExpression {
    pub fn region(text: impl Into<String>) -> Self {
        Self {
            kind: ExpressionKind::Region,
            text: text.into(),
            semantic: false,
        }
    }

    pub fn semantic_region(text: impl Into<String>) -> Self {
        Self {
            kind: ExpressionKind::Region,
            text: text.into(),
            semantic: true,
        }
    }

    pub fn instance(text: impl Into<String>) -> Self {
        Self {
            kind: ExpressionKind::Instance,
            text: text.into(),
            semantic: false,
        }
    }

    /// Canonical tag form, e.g. `<rg>[semantic] duck</rg>`.
    pub fn render(&self) -> String {
        let tag = self.kind.tag().name();
        if self.semantic {
            format!("<{tag}>{SEMANTIC_PREFIX} {}</{tag}>", self.text)
        } else {
            format!("<{tag}>{}</{tag}>", self.text)
        }
    }
}

/// A structurally valid response.
#[derive(Debug, Clone, PartialEq)]
pub struct CotResponse {
    pub think_text: String,
    pub answer_text: String,
    /// Well-formed expressions of the answer, in order of appearance.
    pub expressions: Vec<ReferringExpression>,
    /// Problems inside the answer block; these never affect structure.
    pub answer_diagnostics: Vec<Diagnostic>,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Think,
    Answer,
    Rg,
    Ins,
}

impl Tag {
    pub fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Answer => "answer",
            Tag::Rg => "rg",
            Tag::Ins => "ins",
        }
    }

    fn from_name(name: &str) -> Option<Tag> {
        match name {
            "think" => Some(Tag::Think),
            "answer" => Some(Tag::Answer),
            "rg" => Some(Tag::Rg),
            "ins" => Some(Tag::Ins),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Diagnostic {
    MissingBlock(Tag),
    DuplicatedBlock(Tag),
    UnclosedTag(Tag),
    NestedTag(Tag),
    UnmatchedClose(Tag),
    AnswerBeforeThink,
    /// `<rg><ins></rg></ins>` style crossings.
    InterleavedTags,
    UnknownTag(String),
    StrayText,
    EmptyExpression,
    MalformedSemantic,
    SemanticOnInstance,
    MissingAnswerBlock,
    NoExpressions,
    IncorrectTagType,
    MissingSemanticPrefix,
    ExpectedSingleRegion,
}

impl Diagnostic {
    /// Stable short identifier for summaries.
    pub fn code(&self) -> &'static str {
        match self {
            Diagnostic::MissingBlock(_) => "missing_block",
            Diagnostic::DuplicatedBlock(_) => "duplicated_block",
            Diagnostic::UnclosedTag(_) => "unclosed_tag",
            Diagnostic::NestedTag(_) => "nested_tag",
            Diagnostic::UnmatchedClose(_) => "unmatched_close",
            Diagnostic::AnswerBeforeThink => "answer_before_think",
            Diagnostic::InterleavedTags => "interleaved_tags",
            Diagnostic::UnknownTag(_) => "unknown_tag",
            Diagnostic::StrayText => "stray_text",
            Diagnostic::EmptyExpression => "empty_expression",
            Diagnostic::MalformedSemantic => "malformed_semantic",
            Diagnostic::SemanticOnInstance => "semantic_on_instance",
            Diagnostic::MissingAnswerBlock => "missing_answer_block",
            Diagnostic::NoExpressions => "no_expressions",
            Diagnostic::IncorrectTagType => "incorrect_tag_type",
            Diagnostic::MissingSemanticPrefix => "missing_semantic_prefix",
            Diagnostic::ExpectedSingleRegion => "expected_single_region",
        }
    }

    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            Diagnostic::MissingBlock(Tag::Think | Tag::Answer)
                | Diagnostic::DuplicatedBlock(Tag::Think | Tag::Answer)
                | Diagnostic::UnclosedTag(Tag::Think | Tag::Answer)
                | Diagnostic::NestedTag(Tag::Think | Tag::Answer)
                | Diagnostic::UnmatchedClose(Tag::Think | Tag::Answer)
                | Diagnostic::AnswerBeforeThink
        )
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::MissingBlock(t) => write!(f, "missing {}", t.name()),
            Diagnostic::DuplicatedBlock(t) => write!(f, "duplicated {}", t.name()),
            Diagnostic::UnclosedTag(t) => write!(f, "unclosed {}", t.name()),
            Diagnostic::NestedTag(t) => write!(f, "nested {}", t.name()),
            Diagnostic::UnmatchedClose(t) => write!(f, "unmatched </{}>", t.name()),
            Diagnostic::AnswerBeforeThink => f.write_str("answer before think"),
            Diagnostic::InterleavedTags => f.write_str("interleaved tags"),
            Diagnostic::UnknownTag(n) => write!(f, "unknown tag <{n}>"),
            Diagnostic::StrayText => f.write_str("text outside expression tags"),
            Diagnostic::EmptyExpression => f.write_str("empty expression"),
            Diagnostic::MalformedSemantic => f.write_str("malformed [semantic] annotation"),
            Diagnostic::SemanticOnInstance => f.write_str("[semantic] on instance"),
            Diagnostic::MissingAnswerBlock => f.write_str("no isolated answer block"),
            Diagnostic::NoExpressions => f.write_str("missing tags"),
            Diagnostic::IncorrectTagType => f.write_str("incorrect tag type"),
            Diagnostic::MissingSemanticPrefix => f.write_str("missing [semantic] prefix"),
            Diagnostic::ExpectedSingleRegion => f.write_str("expected exactly one region"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatVerdict {
    pub r_struct: f64,
    pub r_tag: f64,
    pub diagnostics: Vec<Diagnostic>,
}

impl FormatVerdict {
    pub fn r_fmt(&self) -> f64 {
        self.r_struct + self.r_tag
    }
}

#[derive(Debug, Clone, Copy)]
struct TagToken<'a> {
    start: usize,
    end: usize,
    name: &'a str,
    closing: bool,
}

/// All `<name>` / `</name>` tokens in `s`.
fn tag_tokens(s: &str) -> Vec<TagToken<'_>> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'<' {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        let closing = b.get(j) == Some(&b'/');
        if closing {
            j += 1;
        }
        let name_start = j;
        while j < b.len() && b[j].is_ascii_alphabetic() {
            j += 1;
        }
        if j > name_start && b.get(j) == Some(&b'>') {
            out.push(TagToken {
                start: i,
                end: j + 1,
                name: &s[name_start..j],
                closing,
            });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Parses the block structure and, when it holds, the answer's expressions.
pub fn parse_response(raw: &str) -> std::result::Result<CotResponse, Diagnostic> {
    enum State {
        Outside,
        InThink(usize),
        InAnswer(usize),
    }
    let tokens = tag_tokens(raw);
    let mut state = State::Outside;
    let mut think: Option<(usize, usize)> = None;
    let mut answer: Option<(usize, usize)> = None;

    for (k, tok) in tokens.iter().enumerate() {
        let Some(tag @ (Tag::Think | Tag::Answer)) = Tag::from_name(tok.name) else {
            continue;
        };
        state = match (state, tag, tok.closing) {
            (State::Outside, Tag::Think, false) => {
                if think.is_some() {
                    return Err(Diagnostic::DuplicatedBlock(Tag::Think));
                }
                if answer.is_some() {
                    return Err(Diagnostic::AnswerBeforeThink);
                }
                State::InThink(tok.end)
            }
            (State::Outside, Tag::Answer, false) => {
                if answer.is_some() {
                    return Err(Diagnostic::DuplicatedBlock(Tag::Answer));
                }
                if think.is_none() {
                    let later_think = tokens[k..].iter().any(|t| t.name == "think" && !t.closing);
                    return Err(if later_think {
                        Diagnostic::AnswerBeforeThink
                    } else {
                        Diagnostic::MissingBlock(Tag::Think)
                    });
                }
                State::InAnswer(tok.end)
            }
            (State::Outside, t, true) => return Err(Diagnostic::UnmatchedClose(t)),
            (State::InThink(_), Tag::Think, false) => return Err(Diagnostic::NestedTag(Tag::Think)),
            (State::InThink(start), Tag::Think, true) => {
                think = Some((start, tok.start));
                State::Outside
            }
            // tags inside the reasoning are free text
            (s @ State::InThink(_), Tag::Answer, _) => s,
            (State::InAnswer(_), Tag::Answer, false) => return Err(Diagnostic::NestedTag(Tag::Answer)),
            (State::InAnswer(start), Tag::Answer, true) => {
                answer = Some((start, tok.start));
                State::Outside
            }
            (State::InAnswer(_), Tag::Think, _) => return Err(Diagnostic::DuplicatedBlock(Tag::Think)),
            _ => unreachable!("only think/answer tags reach the state machine"),
        };
    }
    match state {
        State::InThink(_) => return Err(Diagnostic::UnclosedTag(Tag::Think)),
        State::InAnswer(_) => return Err(Diagnostic::UnclosedTag(Tag::Answer)),
        State::Outside => {}
    }
    let (ts, te) = think.ok_or(Diagnostic::MissingBlock(Tag::Think))?;
    let (as_, ae) = answer.ok_or(Diagnostic::MissingBlock(Tag::Answer))?;
    let answer_text = &raw[as_..ae];
    let (expressions, answer_diagnostics) = parse_answer_body(answer_text);
    Ok(CotResponse {
        think_text: raw[ts..te].trim().to_string(),
        answer_text: answer_text.to_string(),
        expressions,
        answer_diagnostics,
        raw: raw.to_string(),
    })
}

/// The body of the only `<answer>…</answer>` pair in `raw`, regardless of the
/// surrounding structure. `None` unless there is exactly one opening and one
/// closing answer tag, in that order.
pub fn isolated_answer(raw: &str) -> Option<&str> {
    let answers: Vec<_> = tag_tokens(raw).into_iter().filter(|t| t.name == "answer").collect();
    match answers.as_slice() {
        [open, close] if !open.closing && close.closing => Some(&raw[open.end..close.start]),
        _ => None,
    }
}

fn expression_from_body(kind: ExpressionKind, body: &str) -> std::result::Result<ReferringExpression, Diagnostic> {
    let trimmed = body.trim();
    if trimmed.is_empty() {
        return Err(Diagnostic::EmptyExpression);
    }
    let Some(rest) = trimmed.strip_prefix(SEMANTIC_PREFIX) else {
        return Ok(ReferringExpression {
            kind,
            text: trimmed.to_string(),
            semantic: false,
        });
    };
    if kind == ExpressionKind::Instance {
        return Err(Diagnostic::SemanticOnInstance);
    }
    let text = rest.trim();
    if !rest.starts_with(char::is_whitespace) || text.is_empty() {
        return Err(Diagnostic::MalformedSemantic);
    }
    Ok(ReferringExpression::semantic_region(text))
}

/// Extracts the well-formed expressions of an answer body together with every
/// problem found. The expression list is the parseable subset.
pub fn parse_answer_body(body: &str) -> (Vec<ReferringExpression>, Vec<Diagnostic>) {
    let mut exprs = Vec::new();
    let mut diags = Vec::new();
    let mut open: Option<(ExpressionKind, usize)> = None;
    let mut cursor = 0;

    let note = |d: Diagnostic, diags: &mut Vec<Diagnostic>| {
        if !diags.contains(&d) {
            diags.push(d);
        }
    };

    for tok in tag_tokens(body) {
        if open.is_none() && !body[cursor..tok.start].trim().is_empty() {
            note(Diagnostic::StrayText, &mut diags);
        }
        let kind = match Tag::from_name(tok.name) {
            Some(Tag::Rg) => ExpressionKind::Region,
            Some(Tag::Ins) => ExpressionKind::Instance,
            _ => {
                note(Diagnostic::UnknownTag(tok.name.to_string()), &mut diags);
                if open.is_none() {
                    cursor = tok.end;
                }
                continue;
            }
        };
        match (open, tok.closing) {
            (None, false) => open = Some((kind, tok.end)),
            (None, true) => note(Diagnostic::UnmatchedClose(kind.tag()), &mut diags),
            (Some((k, _)), false) if k == kind => note(Diagnostic::NestedTag(kind.tag()), &mut diags),
            (Some(_), false) => note(Diagnostic::InterleavedTags, &mut diags),
            (Some((k, start)), true) if k == kind => {
                match expression_from_body(kind, &body[start..tok.start]) {
                    Ok(e) => exprs.push(e),
                    Err(d) => note(d, &mut diags),
                }
                open = None;
            }
            (Some(_), true) => {
                note(Diagnostic::InterleavedTags, &mut diags);
                open = None;
            }
        }
        if open.is_none() {
            cursor = tok.end;
        }
    }
    match open {
        Some((k, _)) => note(Diagnostic::UnclosedTag(k.tag()), &mut diags),
        None if !body[cursor..].trim().is_empty() => note(Diagnostic::StrayText, &mut diags),
        None => {}
    }
    (exprs, diags)
}

/// Task-specific expression rules. Returns the violations; empty means valid.
pub fn validate_answer(expressions: &[ReferringExpression], task: TaskKind) -> Vec<Diagnostic> {
    let regions: Vec<_> = expressions.iter().filter(|e| e.kind == ExpressionKind::Region).collect();
    let instances = expressions.len() - regions.len();
    let mut out = Vec::new();
    match task {
        TaskKind::Sod => {
            if instances > 0 {
                out.push(Diagnostic::IncorrectTagType);
            }
            if regions.is_empty() {
                out.push(Diagnostic::NoExpressions);
            }
        }
        TaskKind::Sis => {
            if !regions.is_empty() {
                out.push(Diagnostic::IncorrectTagType);
            }
            if instances == 0 {
                out.push(Diagnostic::NoExpressions);
            }
        }
        TaskKind::Cosod => {
            if instances > 0 {
                out.push(Diagnostic::IncorrectTagType);
            }
            match regions.as_slice() {
                [] => out.push(Diagnostic::NoExpressions),
                [only] if !only.semantic => out.push(Diagnostic::MissingSemanticPrefix),
                [_] => {}
                _ => out.push(Diagnostic::ExpectedSingleRegion),
            }
        }
    }
    out
}

/// `r_struct` (0.5 iff the block structure parses) plus `r_tag` (0.5 iff an
/// isolated answer block is well formed and satisfies the task rules). The
/// two halves are assessed independently.
pub fn format_reward(raw: &str, task: TaskKind) -> FormatVerdict {
    let mut diagnostics = Vec::new();
    let parsed = parse_response(raw);
    let r_struct = match &parsed {
        Ok(_) => 0.5,
        Err(d) => {
            diagnostics.push(d.clone());
            0.0
        }
    };
    let body = match &parsed {
        Ok(resp) => Some(resp.answer_text.as_str()),
        Err(_) => isolated_answer(raw),
    };
    let r_tag = match body {
        None => {
            diagnostics.push(Diagnostic::MissingAnswerBlock);
            0.0
        }
        Some(body) => {
            let (exprs, mut problems) = parse_answer_body(body);
            problems.extend(validate_answer(&exprs, task));
            let ok = problems.is_empty();
            diagnostics.extend(problems);
            if ok {
                0.5
            } else {
                0.0
            }
        }
    };
    FormatVerdict {
        r_struct,
        r_tag,
        diagnostics,
    }
}

/// One serialized expression, as handed to a segmenter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub id: String,
    pub kind: ExpressionKind,
    pub text: String,
    pub semantic: bool,
    pub index: usize,
}

impl From<&ExpressionRecord> for ReferringExpression {
    fn from(r: &ExpressionRecord) -> Self {
        Self {
            kind: r.kind,
            text: r.text.clone(),
            semantic: r.semantic,
        }
    }
}

/// Records for a response that is valid for `task`; ids are
/// `{response_id}#{index}`.
pub fn serialize_expressions(resp: &CotResponse, task: TaskKind, response_id: &str) -> Result<Vec<ExpressionRecord>> {
    let mut problems = resp.answer_diagnostics.clone();
    problems.extend(validate_answer(&resp.expressions, task));
    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(ToString::to_string).collect();
        return Err(Error::Format(format!(
            "response {response_id:?} is not valid for {task}: {}",
            list.join(", ")
        )));
    }
    Ok(resp
        .expressions
        .iter()
        .enumerate()
        .map(|(index, e)| ExpressionRecord {
            id: format!("{response_id}#{index}"),
            kind: e.kind,
            text: e.text.clone(),
            semantic: e.semantic,
            index,
        })
        .collect())
}

/// Rebuilds `<answer>…</answer>` from expressions.
pub fn render_answer<'a>(expressions: impl IntoIterator<Item = &'a ReferringExpression>) -> String {
    let mut out = String::from("<answer>");
    for e in expressions {
        out.push_str(&e.render());
    }
    out.push_str("</answer>");
    out
}
