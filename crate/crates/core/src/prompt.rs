//! Prompt templates and rendering for the four prompting regimes.
//!
//! Templates are plain UTF-8 assets with three placeholders:
//! `{image_description}`, `{schema_block}` and `{examples_block}`. The
//! built-in set is compiled in; a directory holding `zero_shot.txt`,
//! `few_shot.txt` and `cot.txt` overrides it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ReportJson;

pub const EXAMPLES_PLACEHOLDER: &str = "{examples_block}";
pub const SCHEMA_PLACEHOLDER: &str = "{schema_block}";
pub const IMAGE_PLACEHOLDER: &str = "{image_description}";

/// Number of fixed exemplars in few-shot mode.
pub const FEW_SHOT_COUNT: usize = 5;
/// Upper bound on retrieved exemplars in RAG mode.
pub const MAX_RETRIEVED: usize = 5;

const ZERO_SHOT: &str = include_str!("../assets/zero_shot.txt");
const FEW_SHOT: &str = include_str!("../assets/few_shot.txt");
const COT: &str = include_str!("../assets/cot.txt");
const SCHEMA_BLOCK: &str = include_str!("../assets/schema_block.txt");
const FEW_SHOT_EXEMPLARS: &str = include_str!("../assets/few_shot_exemplars.jsonl");

const FOUR_VIEW_DESCRIPTION: &str = "I am providing you with a mammogram image. The image has all 4 breast views of a patient shown together. The upper two views are the craniocaudal (CC) views of each breast, right and left, and the lower two views are the mediolateral oblique (MLO) views of each breast, right and left.";
const SINGLE_VIEW_DESCRIPTION: &str = "I am providing you with a mammogram image. The image shows a single mammographic view of one breast.";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{mode} expects {expected} exemplars, got {got}")]
    WrongExemplarCount {
        mode: PromptMode,
        expected: String,
        got: usize,
    },
    #[error("template for {mode} lacks placeholder {placeholder}")]
    MissingPlaceholder {
        mode: PromptMode,
        placeholder: &'static str,
    },
    #[error("retrieval returned no exemplars")]
    EmptyRetrieval,
    #[error("unknown prompt mode {0:?}")]
    UnknownMode(String),
    #[error("exemplar {id}: {reason}")]
    BadExemplar { id: String, reason: String },
    #[error("reading {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    ZeroShot,
    FewShot,
    CoT,
    RagFewShot,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::ZeroShot,
        PromptMode::FewShot,
        PromptMode::CoT,
        PromptMode::RagFewShot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero-shot",
            PromptMode::FewShot => "few-shot",
            PromptMode::CoT => "cot",
            PromptMode::RagFewShot => "rag",
        }
    }

    /// Asset file the mode's template is read from.
    pub fn asset_file(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero_shot.txt",
            PromptMode::FewShot | PromptMode::RagFewShot => "few_shot.txt",
            PromptMode::CoT => "cot.txt",
        }
    }

    fn needs_examples(self) -> bool {
        matches!(self, PromptMode::FewShot | PromptMode::RagFewShot)
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "zeroshot" => Ok(PromptMode::ZeroShot),
            "fewshot" => Ok(PromptMode::FewShot),
            "cot" | "chainofthought" => Ok(PromptMode::CoT),
            "rag" | "ragfewshot" => Ok(PromptMode::RagFewShot),
            _ => Err(PromptError::UnknownMode(s.to_string())),
        }
    }
}

/// How the query image is described to the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewLayout {
    #[default]
    FourView,
    SingleView,
}

impl ViewLayout {
    pub fn description(self) -> &'static str {
        match self {
            ViewLayout::FourView => FOUR_VIEW_DESCRIPTION,
            ViewLayout::SingleView => SINGLE_VIEW_DESCRIPTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub mode: PromptMode,
    pub body: String,
    pub schema_block: String,
}

impl PromptTemplate {
    pub fn new(mode: PromptMode, body: String, schema_block: String) -> Result<Self, PromptError> {
        if !body.contains(SCHEMA_PLACEHOLDER) {
            return Err(PromptError::MissingPlaceholder {
                mode,
                placeholder: SCHEMA_PLACEHOLDER,
            });
        }
        if mode.needs_examples() && !body.contains(EXAMPLES_PLACEHOLDER) {
            return Err(PromptError::MissingPlaceholder {
                mode,
                placeholder: EXAMPLES_PLACEHOLDER,
            });
        }
        Ok(Self {
            mode,
            body,
            schema_block,
        })
    }

    /// Canonical text the digest is computed over.
    fn canonical(&self) -> String {
        format!(
            "mode={}\n--body--\n{}\n--schema--\n{}",
            self.mode, self.body, self.schema_block
        )
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

/// The loaded templates for every mode. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::from_texts(ZERO_SHOT, FEW_SHOT, COT, SCHEMA_BLOCK).expect("built-in templates are valid")
    }

    pub fn from_texts(zero_shot: &str, few_shot: &str, cot: &str, schema: &str) -> Result<Self, PromptError> {
        let schema = schema.trim_end().to_string();
        let templates = PromptMode::ALL
            .into_iter()
            .map(|mode| {
                let body = match mode {
                    PromptMode::ZeroShot => zero_shot,
                    PromptMode::FewShot | PromptMode::RagFewShot => few_shot,
                    PromptMode::CoT => cot,
                };
                PromptTemplate::new(mode, body.trim_end().to_string(), schema.clone())
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { templates })
    }

    /// Load template assets from a directory; a missing `schema_block.txt` falls back to the built-in schema.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path,
                message: e.to_string(),
            })
        };
        let schema = match read("schema_block.txt") {
            Ok(s) => s,
            Err(_) => SCHEMA_BLOCK.to_string(),
        };
        Self::from_texts(&read("zero_shot.txt")?, &read("few_shot.txt")?, &read("cot.txt")?, &schema)
    }

    pub fn template(&self, mode: PromptMode) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.mode == mode)
            .expect("every mode has a template")
    }

    pub fn template_digest(&self, mode: PromptMode) -> String {
        self.template(mode).digest()
    }

    /// Digest for a mode given by name, as stored in run configuration.
    pub fn template_digest_for(&self, mode: &str) -> Result<String, PromptError> {
        Ok(self.template_digest(mode.parse()?))
    }

    pub fn render(
        &self,
        mode: PromptMode,
        query_image: Attachment,
        exemplars: &[Exemplar],
        options: &RenderOptions,
    ) -> Result<RenderedPrompt, PromptError> {
        let count = exemplars.len();
        let wrong = |expected: &str| PromptError::WrongExemplarCount {
            mode,
            expected: expected.to_string(),
            got: count,
        };
        match mode {
            PromptMode::ZeroShot | PromptMode::CoT if count != 0 => return Err(wrong("0")),
            PromptMode::FewShot if count != FEW_SHOT_COUNT => return Err(wrong("5")),
            PromptMode::RagFewShot if count == 0 => return Err(PromptError::EmptyRetrieval),
            PromptMode::RagFewShot if count > MAX_RETRIEVED => return Err(wrong("1..=5")),
            _ => {}
        }
        let template = self.template(mode);
        let examples_block = exemplars
            .iter()
            .enumerate()
            .map(|(i, e)| e.render_block(i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        let text = template
            .body
            .replace(IMAGE_PLACEHOLDER, options.layout.description())
            .replace(SCHEMA_PLACEHOLDER, &template.schema_block)
            .replace(EXAMPLES_PLACEHOLDER, &examples_block);

        let mut attachments = Vec::new();
        if options.attach_exemplar_images {
            for e in exemplars {
                if let Some(img) = &e.image {
                    attachments.push(img.clone());
                }
            }
        }
        attachments.push(query_image);
        Ok(RenderedPrompt {
            text,
            attachments,
            mode,
            exemplar_ids: exemplars.iter().map(|e| e.image_id.clone()).collect(),
        })
    }

    /// RAG prompt: the retrieved exemplars, in retrieval order, fill the examples block.
    pub fn render_rag(
        &self,
        query_image: Attachment,
        retrieved: &[Exemplar],
        options: &RenderOptions,
    ) -> Result<RenderedPrompt, PromptError> {
        self.render(PromptMode::RagFewShot, query_image, retrieved, options)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub attach_exemplar_images: bool,
    pub layout: ViewLayout,
}

/// An image sent with a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub id: String,
    pub png: Vec<u8>,
}

/// A worked example shown to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub image_id: String,
    report: ReportJson,
    pub image_ref: Option<PathBuf>,
    pub image: Option<Attachment>,
}

impl Exemplar {
    /// Validate report text: it must be a JSON object with all five schema keys.
    pub fn new(image_id: impl Into<String>, report_json: &str) -> Result<Self, PromptError> {
        let image_id = image_id.into();
        let report: ReportJson = serde_json::from_str(report_json).map_err(|e| PromptError::BadExemplar {
            id: image_id.clone(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            image_id,
            report,
            image_ref: None,
            image: None,
        })
    }

    pub fn from_report(report: ReportJson) -> Self {
        Self {
            image_id: report.image_id.clone(),
            report,
            image_ref: None,
            image: None,
        }
    }

    pub fn with_image_ref(mut self, path: PathBuf) -> Self {
        self.image_ref = Some(path);
        self
    }

    pub fn with_image(mut self, image: Attachment) -> Self {
        self.image = Some(image);
        self
    }

    pub fn report(&self) -> &ReportJson {
        &self.report
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes")
    }

    fn render_block(&self, index: usize) -> String {
        format!("Example {index}:\n{}\n", self.report_json())
    }
}

/// Parse an exemplar JSONL file (one report object per line).
pub fn parse_exemplars(jsonl: &str) -> Result<Vec<Exemplar>, PromptError> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let report: ReportJson = serde_json::from_str(line).map_err(|e| PromptError::BadExemplar {
                id: format!("line {}", i + 1),
                reason: e.to_string(),
            })?;
            Ok(Exemplar::from_report(report))
        })
        .collect()
}

/// The five fixed few-shot exemplars shipped with the crate.
pub fn builtin_few_shot_exemplars() -> Vec<Exemplar> {
    parse_exemplars(FEW_SHOT_EXEMPLARS).expect("built-in exemplars are valid")
}

/// Prompt text plus the ordered images that accompany it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Query image is always last.
    pub attachments: Vec<Attachment>,
    pub mode: PromptMode,
    pub exemplar_ids: Vec<String>,
}
