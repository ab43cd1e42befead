//! Structured-label extraction from free-form model output.
//!
//! Models are asked for a four-key JSON report but routinely wrap it in
//! prose or code fences, drop keys, or answer in plain text. [`parse`]
//! never fails: the [`ParseStatus`] records how much was recovered.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::labels::{Birads, Density, FindingFlags, Suspicion, HEALTHY_SENTINEL};

const EXCERPT_CHARS: usize = 512;
const BIRADS_WINDOW: usize = 8;
const NEGATION_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseStatus {
    Parsed,
    PartialParse,
    ParseFailure,
}

/// Labels recovered from one model answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReport {
    pub status: ParseStatus,
    pub density_class: Option<Density>,
    pub birads_class: Option<Birads>,
    pub suspicion: Option<Suspicion>,
    pub findings_text: Option<String>,
    pub flags: Option<FindingFlags>,
    /// Raw text of the density field, scored against the reference density text.
    #[serde(default)]
    pub density_text: Option<String>,
    /// Raw text of the BI-RADS field, scored against the reference BI-RADS text.
    #[serde(default)]
    pub birads_text: Option<String>,
    pub raw_excerpt: String,
}

fn birads_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bbi[\s\-_.]*rads").unwrap())
}

fn density_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:acr|density)[\s:_\-]*([abcd])\b").unwrap())
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n?(.*?)```").unwrap())
}

/// Return the first balanced `{...}` span that parses as a JSON object.
///
/// Fenced blocks are searched before the surrounding text.
pub fn extract_object(text: &str) -> Option<String> {
    for caps in fence_re().captures_iter(text) {
        if let Some(found) = first_object_span(caps.get(1).map_or("", |m| m.as_str())) {
            return Some(found);
        }
    }
    first_object_span(text)
}

fn first_object_span(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(close) = matching_brace(bytes, open) {
            let span = &text[open..=close];
            if parses_as_object(span) {
                return Some(span.to_string());
            }
            let repaired = strip_trailing_commas(span);
            if repaired != span && parses_as_object(&repaired) {
                return Some(repaired);
            }
        }
        start = open + 1;
    }
    None
}

fn parses_as_object(span: &str) -> bool {
    matches!(
        serde_json::from_str::<serde_json::Value>(span),
        Ok(serde_json::Value::Object(_))
    )
}

/// Index of the brace closing the one at `open`, honouring JSON strings.
fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drop commas that directly precede `}` or `]` outside of strings.
fn strip_trailing_commas(span: &str) -> String {
    let chars: Vec<char> = span.chars().collect();
    let mut out = String::with_capacity(span.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Find a BI-RADS category mentioned in running text.
///
/// Accepts `BI-RADS`, `BIRADS` and `BI RADS` in any case, followed within
/// eight characters by a digit 1 to 5. The first valid mention wins.
pub fn normalize_birads(text: &str) -> Option<Birads> {
    for m in birads_token_re().find_iter(text) {
        let tail: Vec<char> = text[m.end()..].chars().collect();
        let window = &tail[..tail.len().min(BIRADS_WINDOW)];
        if let Some(pos) = window.iter().position(|c| c.is_ascii_digit()) {
            let followed_by_digit = tail.get(pos + 1).is_some_and(|c| c.is_ascii_digit());
            if followed_by_digit {
                continue;
            }
            let digit = window[pos].to_digit(10).unwrap() as u8;
            if let Some(b) = Birads::new(digit) {
                return Some(b);
            }
        }
    }
    None
}

/// BI-RADS from the schema's BI-RADS field, which may start with a bare digit.
pub fn normalize_birads_field(text: &str) -> Option<Birads> {
    normalize_birads(text).or_else(|| {
        let t = text.trim_start();
        let mut chars = t.chars();
        let first = chars.next()?.to_digit(10)? as u8;
        if chars.next().is_some_and(|c| c.is_ascii_digit()) {
            return None;
        }
        Birads::new(first)
    })
}

/// Find an ACR density letter (`ACR B`, `Density C`, `DENSITY D -`).
pub fn normalize_density(text: &str) -> Option<Density> {
    density_re()
        .captures(text)
        .and_then(|c| c.get(1))
        .and_then(|m| m.as_str().chars().next())
        .and_then(Density::from_letter)
}

/// Keyword match with priority suspicious > benign > healthy.
pub fn normalize_suspicion(text: &str) -> Option<Suspicion> {
    let lower = text.to_lowercase();
    [Suspicion::Suspicious, Suspicion::Benign, Suspicion::Healthy]
        .into_iter()
        .find(|s| lower.contains(s.as_str()))
}

/// Presence flags for mass, calcification and asymmetry in a findings sentence.
///
/// A stem counts unless one of `no`, `without`, `absent` appears within the
/// three preceding tokens of the same clause. Clauses end at `; , . : ! ?`.
pub fn extract_flags(findings_text: &str) -> FindingFlags {
    let mut flags = FindingFlags::default();
    if findings_text.trim().eq_ignore_ascii_case(HEALTHY_SENTINEL) {
        return flags;
    }
    let lower = findings_text.to_lowercase();
    for clause in lower.split([';', ',', '.', ':', '!', '?', '\n']) {
        let tokens: Vec<&str> = clause
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        for (i, token) in tokens.iter().enumerate() {
            let negated = tokens[i.saturating_sub(NEGATION_WINDOW)..i]
                .iter()
                .any(|t| matches!(*t, "no" | "without" | "absent"));
            if negated {
                continue;
            }
            flags.mass |= token.contains("mass");
            flags.calcification |= token.contains("calcification");
            flags.asymmetry |= token.contains("asymmetr");
        }
    }
    flags
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SchemaKey {
    Density,
    Birads,
    Findings,
    Suspicion,
}

fn schema_key(key: &str) -> Option<SchemaKey> {
    let k: String = key
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    match k.as_str() {
        "breastdensity" | "density" | "acrdensity" => Some(SchemaKey::Density),
        "birads" | "biradscategory" | "biradsscore" => Some(SchemaKey::Birads),
        "findings" | "finding" => Some(SchemaKey::Findings),
        "suspicion" => Some(SchemaKey::Suspicion),
        _ => None,
    }
}

fn value_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        serde_json::Value::Array(items) => {
            let parts: Vec<String> = items.iter().filter_map(value_text).collect();
            (!parts.is_empty()).then(|| parts.join("; "))
        }
        _ => None,
    }
}

#[derive(Default)]
struct Fields {
    density: Option<String>,
    birads: Option<String>,
    findings: Option<String>,
    suspicion: Option<String>,
}

impl Fields {
    fn slot(&mut self, key: SchemaKey) -> &mut Option<String> {
        match key {
            SchemaKey::Density => &mut self.density,
            SchemaKey::Birads => &mut self.birads,
            SchemaKey::Findings => &mut self.findings,
            SchemaKey::Suspicion => &mut self.suspicion,
        }
    }
}

fn fields_from_object(object_text: &str) -> Fields {
    let mut fields = Fields::default();
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(object_text) {
        for (k, v) in &map {
            if let Some(key) = schema_key(k) {
                let slot = fields.slot(key);
                if slot.is_none() {
                    *slot = value_text(v);
                }
            }
        }
    }
    fields
}

fn scrape_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#""([A-Za-z_\- ]{3,24})"\s*:\s*"((?:[^"\\]|\\.)*)""#).unwrap()
    })
}

/// Pull `"key": "value"` pairs out of JSON-ish text that failed to parse.
fn scrape_fields(text: &str, fields: &mut Fields) {
    for caps in scrape_re().captures_iter(text) {
        if let Some(key) = schema_key(&caps[1]) {
            let slot = fields.slot(key);
            if slot.is_none() {
                let raw = &caps[2];
                let value = serde_json::from_str::<String>(&format!("\"{raw}\""))
                    .unwrap_or_else(|_| raw.to_string());
                *slot = Some(value);
            }
        }
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(EXCERPT_CHARS).collect()
}

/// Parse a model answer into structured labels.
pub fn parse(raw: &str) -> ParsedReport {
    let mut fields = extract_object(raw)
        .map(|o| fields_from_object(&o))
        .unwrap_or_default();
    scrape_fields(raw, &mut fields);

    let density_class = fields
        .density
        .as_deref()
        .and_then(normalize_density)
        .or_else(|| normalize_density(raw));
    let birads_class = fields
        .birads
        .as_deref()
        .and_then(normalize_birads_field)
        .or_else(|| normalize_birads(raw));
    let suspicion = fields
        .suspicion
        .as_deref()
        .and_then(normalize_suspicion)
        .or_else(|| normalize_suspicion(raw));
    let findings_text = fields
        .findings
        .as_ref()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let flags = findings_text.as_deref().map(extract_flags);

    let found = [
        density_class.is_some(),
        birads_class.is_some(),
        suspicion.is_some(),
        findings_text.is_some(),
    ];
    let status = match found.iter().filter(|f| **f).count() {
        4 => ParseStatus::Parsed,
        0 => ParseStatus::ParseFailure,
        _ => ParseStatus::PartialParse,
    };

    ParsedReport {
        status,
        density_class,
        birads_class,
        suspicion,
        findings_text,
        flags,
        density_text: fields.density,
        birads_text: fields.birads,
        raw_excerpt: excerpt(raw),
    }
}
