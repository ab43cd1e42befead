//! Closed label vocabularies shared by ingestion, parsing and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Laterality {
    Right,
    Left,
}

impl Laterality {
    pub fn word(self) -> &'static str {
        match self {
            Laterality::Right => "right",
            Laterality::Left => "left",
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Laterality::Right => Laterality::Left,
            Laterality::Left => Laterality::Right,
        }
    }
}

impl FromStr for Laterality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R" | "RIGHT" => Ok(Laterality::Right),
            "L" | "LEFT" => Ok(Laterality::Left),
            other => Err(format!("unknown laterality {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewKind {
    CC,
    MLO,
}

impl ViewKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::CC => "CC",
            ViewKind::MLO => "MLO",
        }
    }
}

impl FromStr for ViewKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CC" => Ok(ViewKind::CC),
            "MLO" => Ok(ViewKind::MLO),
            other => Err(format!("unknown view {other:?}")),
        }
    }
}

/// One cell of the 2x2 view grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ViewCell {
    pub laterality: Laterality,
    pub view: ViewKind,
}

impl ViewCell {
    pub const fn new(laterality: Laterality, view: ViewKind) -> Self {
        Self { laterality, view }
    }

    /// Reading order used for findings sentences: right CC, right MLO, left CC, left MLO.
    pub const READING_ORDER: [ViewCell; 4] = [
        ViewCell::new(Laterality::Right, ViewKind::CC),
        ViewCell::new(Laterality::Right, ViewKind::MLO),
        ViewCell::new(Laterality::Left, ViewKind::CC),
        ViewCell::new(Laterality::Left, ViewKind::MLO),
    ];
}

impl fmt::Display for ViewCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.laterality.word(), self.view.as_str())
    }
}

/// ACR breast density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Density {
    A,
    B,
    C,
    D,
}

impl Density {
    pub const ALL: [Density; 4] = [Density::A, Density::B, Density::C, Density::D];

    pub fn letter(self) -> char {
        match self {
            Density::A => 'A',
            Density::B => 'B',
            Density::C => 'C',
            Density::D => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(Density::A),
            'B' => Some(Density::B),
            'C' => Some(Density::C),
            'D' => Some(Density::D),
            _ => None,
        }
    }

    /// Reference phrasing used in synthesized reports.
    pub fn report_text(self) -> &'static str {
        match self {
            Density::A => "Density A - Almost all fatty tissue.",
            Density::B => "Density B - Scattered areas of dense glandular and fibrous tissue.",
            Density::C => "Density C - Heterogeneously Dense. More of the breast is made of dense glandular and fibrous tissue. This can make it hard to see small masses in or around the dense tissue, which also appear as white areas.",
            Density::D => "Density D - Extremely Dense. Hard to see masses or other findings that may appear as white areas on the mammogram.",
        }
    }
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Density {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let t = t
            .strip_prefix("DENSITY_")
            .or_else(|| t.strip_prefix("DENSITY "))
            .or_else(|| t.strip_prefix("ACR "))
            .unwrap_or(t);
        let mut chars = t.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Density::from_letter(c).ok_or_else(|| format!("unknown density {s:?}")),
            _ => Err(format!("unknown density {s:?}")),
        }
    }
}

/// BI-RADS assessment restricted to categories 1 through 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Birads(u8);

impl Birads {
    pub const ALL: [Birads; 5] = [Birads(1), Birads(2), Birads(3), Birads(4), Birads(5)];

    pub fn new(value: u8) -> Option<Self> {
        (1..=5).contains(&value).then_some(Birads(value))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn suspicion(self) -> Suspicion {
        match self.0 {
            1 => Suspicion::Healthy,
            2 | 3 => Suspicion::Benign,
            _ => Suspicion::Suspicious,
        }
    }

    pub fn report_text(self) -> &'static str {
        match self.0 {
            1 => "BI-RADS 1 - Negative. Healthy Breast.",
            2 => "BI-RADS 2 - Benign (non-cancerous) finding",
            3 => "BI-RADS 3 - Probably benign (short-term follow-up recommended)",
            4 => "BI-RADS 4 - Suspicious abnormality (biopsy needed)",
            _ => "BI-RADS 5 - Highly suggestive of malignancy (high probability of cancer)",
        }
    }
}

impl TryFrom<u8> for Birads {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Birads::new(value).ok_or_else(|| format!("BI-RADS {value} outside 1..5"))
    }
}

impl From<Birads> for u8 {
    fn from(b: Birads) -> u8 {
        b.0
    }
}

impl fmt::Display for Birads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Birads {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let t = t
            .strip_prefix("BI-RADS_")
            .or_else(|| t.strip_prefix("BI-RADS "))
            .unwrap_or(t);
        let n: u8 = t.trim().parse().map_err(|_| format!("unknown BI-RADS {s:?}"))?;
        Birads::try_from(n)
    }
}

/// Radiologic suspicion derived from BI-RADS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suspicion {
    Healthy,
    Benign,
    Suspicious,
}

impl Suspicion {
    pub const ALL: [Suspicion; 3] = [Suspicion::Healthy, Suspicion::Benign, Suspicion::Suspicious];

    pub fn as_str(self) -> &'static str {
        match self {
            Suspicion::Healthy => "healthy",
            Suspicion::Benign => "benign",
            Suspicion::Suspicious => "suspicious",
        }
    }
}

impl fmt::Display for Suspicion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Map a BI-RADS category to the three-way suspicion label.
pub fn derive_suspicion(birads: Birads) -> Suspicion {
    birads.suspicion()
}

/// Finding categories listed in the zero-shot instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Finding {
    Mass,
    SuspiciousCalcification,
    ArchitecturalDistortion,
    Asymmetry,
    FocalAsymmetry,
    GlobalAsymmetry,
    SuspiciousLymphNodes,
    NippleRetraction,
    SkinRetraction,
    SkinThickening,
}

impl Finding {
    pub const ALL: [Finding; 10] = [
        Finding::Mass,
        Finding::SuspiciousCalcification,
        Finding::ArchitecturalDistortion,
        Finding::Asymmetry,
        Finding::FocalAsymmetry,
        Finding::GlobalAsymmetry,
        Finding::SuspiciousLymphNodes,
        Finding::NippleRetraction,
        Finding::SkinRetraction,
        Finding::SkinThickening,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Finding::Mass => "Mass",
            Finding::SuspiciousCalcification => "Suspicious Calcification",
            Finding::ArchitecturalDistortion => "Architectural Distortion",
            Finding::Asymmetry => "Asymmetry",
            Finding::FocalAsymmetry => "Focal Asymmetry",
            Finding::GlobalAsymmetry => "Global Asymmetry",
            Finding::SuspiciousLymphNodes => "Suspicious Lymph Nodes",
            Finding::NippleRetraction => "Nipple Retraction",
            Finding::SkinRetraction => "Skin Retraction",
            Finding::SkinThickening => "Skin Thickening",
        }
    }

    pub fn is_mass(self) -> bool {
        self == Finding::Mass
    }

    pub fn is_calcification(self) -> bool {
        self == Finding::SuspiciousCalcification
    }

    pub fn is_asymmetry(self) -> bool {
        matches!(
            self,
            Finding::Asymmetry | Finding::FocalAsymmetry | Finding::GlobalAsymmetry
        )
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Finding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Finding::ALL
            .into_iter()
            .find(|f| {
                f.name()
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric())
                    .collect::<String>()
                    .to_ascii_lowercase()
                    == key
            })
            .ok_or_else(|| format!("unknown finding {s:?}"))
    }
}

/// Presence flags for the three binary classification tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FindingFlags {
    pub mass: bool,
    pub calcification: bool,
    pub asymmetry: bool,
}

impl FindingFlags {
    pub fn from_findings<'a>(findings: impl IntoIterator<Item = &'a Finding>) -> Self {
        let mut flags = FindingFlags::default();
        for f in findings {
            flags.mass |= f.is_mass();
            flags.calcification |= f.is_calcification();
            flags.asymmetry |= f.is_asymmetry();
        }
        flags
    }
}

/// Sentence used for studies with no findings.
pub const HEALTHY_SENTINEL: &str = "Healthy Breast. No Findings";
