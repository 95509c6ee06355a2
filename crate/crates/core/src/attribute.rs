//! Forensic attribute categories, ground-truth records, predicted descriptions
//! and the text/unit normalization that runs before any distance is computed.
//!
//! Numerical categories are brought to a canonical unit (years, centimeters,
//! kilograms) and rounded to two decimals. String categories are lowercased,
//! stripped of punctuation, whitespace-collapsed and passed through a
//! [`SynonymTable`]. Answers that carry no information ("unknown", "n/a",
//! "not visible", empty) become values with `known() == false`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

pub const CM_PER_INCH: f64 = 2.54;
pub const CM_PER_FOOT: f64 = 30.48;
pub const KG_PER_POUND: f64 = 0.453592;

/// Normalized surface forms that mean "no information".
pub const UNKNOWN_MARKERS: [&str; 4] = ["unknown", "n a", "not visible", ""];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Gender,
    Age,
    EthnicGroup,
    HairColor,
    IrisColor,
    Height,
    Weight,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Gender,
        Category::Age,
        Category::EthnicGroup,
        Category::HairColor,
        Category::IrisColor,
        Category::Height,
        Category::Weight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, Category::Age | Category::Height | Category::Weight)
    }

    /// Key used in dataset and report files.
    pub fn key(self) -> &'static str {
        match self {
            Category::Gender => "gender",
            Category::Age => "age",
            Category::EthnicGroup => "ethnic_group",
            Category::HairColor => "hair_color",
            Category::IrisColor => "iris_color",
            Category::Height => "height",
            Category::Weight => "weight",
        }
    }

    /// Plain-language name, as used in questions.
    pub fn term(self) -> &'static str {
        match self {
            Category::Gender => "gender",
            Category::Age => "age",
            Category::EthnicGroup => "ethnic group",
            Category::HairColor => "hair color",
            Category::IrisColor => "iris color",
            Category::Height => "height",
            Category::Weight => "weight",
        }
    }

    /// Canonical unit of a numerical category.
    pub fn unit(self) -> Option<&'static str> {
        match self {
            Category::Age => Some("years"),
            Category::Height => Some("cm"),
            Category::Weight => Some("kg"),
            _ => None,
        }
    }

    pub fn from_key(key: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.key() == key)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.term())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Normalized {
    Number(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeValue {
    pub category: Category,
    pub raw: String,
    /// Present if and only if the value is known.
    pub normalized: Option<Normalized>,
}

impl AttributeValue {
    pub fn unknown(category: Category, raw: impl Into<String>) -> Self {
        AttributeValue {
            category,
            raw: raw.into(),
            normalized: None,
        }
    }

    pub fn is_known(&self) -> bool {
        self.normalized.is_some()
    }

    pub fn number(&self) -> Option<f64> {
        match self.normalized {
            Some(Normalized::Number(v)) => Some(v),
            _ => None,
        }
    }

    pub fn label(&self) -> Option<&str> {
        match &self.normalized {
            Some(Normalized::Label(s)) => Some(s),
            _ => None,
        }
    }

    /// Canonical text form; normalizing it again yields the same value.
    pub fn canonical_text(&self) -> Option<String> {
        match &self.normalized {
            Some(Normalized::Label(s)) => Some(s.clone()),
            Some(Normalized::Number(v)) => Some(match self.category {
                Category::Height => format!("{v} cm"),
                Category::Weight => format!("{v} kg"),
                _ => format!("{v}"),
            }),
            None => None,
        }
    }
}

/// Exactly one [`AttributeValue`] per [`Category`], indexed by category.
#[derive(Debug, Clone, PartialEq)]
pub struct Attributes([AttributeValue; 7]);

impl Attributes {
    /// Builds the set from values given in any order. Fails on a missing or
    /// repeated category.
    pub fn from_values(values: impl IntoIterator<Item = AttributeValue>) -> Result<Self> {
        let mut slots: [Option<AttributeValue>; 7] = Default::default();
        for v in values {
            let slot = &mut slots[v.category.index()];
            if slot.is_some() {
                return Err(Error::Validation(format!(
                    "category {} given more than once",
                    v.category
                )));
            }
            *slot = Some(v);
        }
        let mut out = Vec::with_capacity(7);
        for (cat, slot) in Category::ALL.into_iter().zip(slots) {
            out.push(slot.ok_or_else(|| Error::Validation(format!("missing category {cat}")))?);
        }
        Ok(Attributes(out.try_into().expect("seven categories")))
    }

    pub fn get(&self, category: Category) -> &AttributeValue {
        &self.0[category.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &AttributeValue> {
        self.0.iter()
    }
}

impl Serialize for Attributes {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(7))?;
        for v in &self.0 {
            map.serialize_entry(v.category.key(), v)?;
        }
        map.end()
    }
}

/// Which image variant a description was obtained from.
///
/// Declaration order is the row order of the cohort accuracy table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Maxim,
    Srgan,
    #[serde(alias = "tvd")]
    TvDenoise,
    Generated,
}

impl Provenance {
    pub const ALL: [Provenance; 5] = [
        Provenance::Original,
        Provenance::Maxim,
        Provenance::Srgan,
        Provenance::TvDenoise,
        Provenance::Generated,
    ];

    /// Row label used in cohort tables.
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Original => "Original",
            Provenance::Maxim => "MAXIM",
            Provenance::Srgan => "SRGAN",
            Provenance::TvDenoise => "TVD",
            Provenance::Generated => "Generated",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Maxim => "maxim",
            Provenance::Srgan => "srgan",
            Provenance::TvDenoise => "tvdenoise",
            Provenance::Generated => "generated",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Ground truth for one person of interest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub attributes: Attributes,
    /// Paths as written in the dataset file (relative to its directory).
    pub reference_images: Vec<PathBuf>,
    /// Free-text hair length; not a scored category, only used in prompts.
    pub hair_length: Option<String>,
    /// Aging pairs: images of the subject young and old.
    pub young_images: Vec<PathBuf>,
    pub old_images: Vec<PathBuf>,
}

/// Attribute values predicted for one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeDescription {
    pub subject_id: String,
    pub source_image: PathBuf,
    pub provenance: Provenance,
    pub attributes: Attributes,
}

/// Ordered surface-form rewrites per string category.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymTable {
    rules: BTreeMap<Category, Vec<(Vec<String>, String)>>,
}

impl Default for SynonymTable {
    fn default() -> Self {
        let mut t = SynonymTable::empty();
        for (cat, from, to) in [
            (Category::EthnicGroup, "caucasian", "white"),
            (Category::HairColor, "grey", "gray"),
            (Category::HairColor, "blond", "blonde"),
            (Category::IrisColor, "grey", "gray"),
        ] {
            t.add(cat, from, to).expect("default synonyms are consistent");
        }
        t
    }
}

impl SynonymTable {
    pub fn empty() -> Self {
        SynonymTable {
            rules: BTreeMap::new(),
        }
    }

    /// Adds a rewrite. Both sides are text-normalized first; a rewrite whose
    /// target would itself be rewritten is rejected so the table stays
    /// idempotent.
    pub fn add(&mut self, category: Category, from: &str, to: &str) -> Result<()> {
        if category.is_numeric() {
            return Err(Error::Config(format!(
                "synonyms only apply to string categories, not {category}"
            )));
        }
        let from_tokens: Vec<String> = normalize_text(from)
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect();
        let to = normalize_text(to);
        if from_tokens.is_empty() {
            return Err(Error::Config("synonym surface form is empty".into()));
        }
        let rules = self.rules.entry(category).or_default();
        let mut candidate = rules.clone();
        candidate.push((from_tokens, to));
        for (_, target) in &candidate {
            let target_tokens: Vec<&str> = target.split(' ').filter(|s| !s.is_empty()).collect();
            for (src, _) in &candidate {
                if contains_seq(&target_tokens, src) {
                    return Err(Error::Config(format!(
                        "synonym target `{target}` contains rewritten form `{}`",
                        src.join(" ")
                    )));
                }
            }
        }
        *rules = candidate;
        Ok(())
    }

    /// Rewrites an already text-normalized label.
    pub fn apply(&self, category: Category, label: &str) -> String {
        let Some(rules) = self.rules.get(&category) else {
            return label.to_owned();
        };
        let tokens: Vec<&str> = label.split(' ').filter(|s| !s.is_empty()).collect();
        let mut out: Vec<&str> = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            // longest surface form wins; earlier rules win among equals
            let mut hit: Option<&(Vec<String>, String)> = None;
            for rule in rules.iter().filter(|(src, _)| tokens[i..].starts_with_str(src)) {
                if hit.is_none_or(|h| rule.0.len() > h.0.len()) {
                    hit = Some(rule);
                }
            }
            match hit {
                Some((src, target)) => {
                    out.extend(target.split(' ').filter(|s| !s.is_empty()));
                    i += src.len();
                }
                None => {
                    out.push(tokens[i]);
                    i += 1;
                }
            }
        }
        out.join(" ")
    }
}

trait StartsWithStr {
    fn starts_with_str(&self, prefix: &[String]) -> bool;
}

impl StartsWithStr for [&str] {
    fn starts_with_str(&self, prefix: &[String]) -> bool {
        self.len() >= prefix.len() && self.iter().zip(prefix).all(|(a, b)| *a == b)
    }
}

fn contains_seq(haystack: &[&str], needle: &[String]) -> bool {
    (0..haystack.len()).any(|i| haystack[i..].starts_with_str(needle))
}

/// Lowercases, turns punctuation into spaces and collapses whitespace.
pub fn normalize_text(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn is_unknown_marker(normalized: &str) -> bool {
    UNKNOWN_MARKERS.contains(&normalized)
}

pub fn normalize_string_value(
    category: Category,
    raw: &str,
    synonyms: &SynonymTable,
) -> Result<AttributeValue> {
    if category.is_numeric() {
        return Err(Error::Usage(format!(
            "{category} is numerical; use normalize_numeric_value"
        )));
    }
    let text = normalize_text(raw);
    if is_unknown_marker(&text) {
        return Ok(AttributeValue::unknown(category, raw));
    }
    let label = synonyms.apply(category, &text);
    Ok(AttributeValue {
        category,
        raw: raw.to_owned(),
        normalized: Some(Normalized::Label(label)),
    })
}

pub fn normalize_numeric_value(category: Category, raw: &str) -> Result<AttributeValue> {
    if !category.is_numeric() {
        return Err(Error::Usage(format!(
            "{category} is a string category; use normalize_string_value"
        )));
    }
    let value = parse_quantity(category, raw)
        .filter(|v| v.is_finite() && *v > 0.0)
        .map(round2)
        .filter(|v| *v > 0.0);
    Ok(AttributeValue {
        category,
        raw: raw.to_owned(),
        normalized: value.map(Normalized::Number),
    })
}

/// Dispatches on the category kind; never fails.
pub fn normalize_value(category: Category, raw: &str, synonyms: &SynonymTable) -> AttributeValue {
    let v = if category.is_numeric() {
        normalize_numeric_value(category, raw)
    } else {
        normalize_string_value(category, raw, synonyms)
    };
    v.expect("dispatch matches category kind")
}

pub fn inches_to_cm(inches: f64) -> f64 {
    inches * CM_PER_INCH
}

pub fn cm_to_inches(cm: f64) -> f64 {
    cm / CM_PER_INCH
}

pub fn pounds_to_kg(lb: f64) -> f64 {
    lb * KG_PER_POUND
}

pub fn kg_to_pounds(kg: f64) -> f64 {
    kg / KG_PER_POUND
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

static FEET_INCHES: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(\d+(?:\.\d+)?)\s*(?:'|ft\b\.?|feet\b|foot\b)\s*(?:(\d+(?:\.\d+)?)\s*(?:"|''|in\b|inch\b|inches\b)?)?"#,
    )
    .unwrap()
});

static QUANTITY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(\d+(?:\.\d+)?)(?:\s*(?:-|to)\s*(\d+(?:\.\d+)?))?\s*([a-z]+|")?"#).unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unit {
    None,
    Years,
    Cm,
    M,
    Inch,
    Kg,
    Lb,
}

fn parse_unit(word: Option<&str>) -> Option<Unit> {
    Some(match word {
        None => Unit::None,
        Some(w) => match w {
            "y" | "yo" | "yr" | "yrs" | "year" | "years" => Unit::Years,
            "cm" | "cms" | "centimeter" | "centimeters" | "centimetre" | "centimetres" => Unit::Cm,
            "m" | "meter" | "meters" | "metre" | "metres" => Unit::M,
            "\"" | "in" | "inch" | "inches" => Unit::Inch,
            "kg" | "kgs" | "kilo" | "kilos" | "kilogram" | "kilograms" => Unit::Kg,
            "lb" | "lbs" | "pound" | "pounds" => Unit::Lb,
            _ => return None,
        },
    })
}

fn parse_quantity(category: Category, raw: &str) -> Option<f64> {
    let text = raw
        .to_lowercase()
        .replace(['\u{2019}', '\u{2032}', '\u{00b4}'], "'")
        .replace(['\u{201d}', '\u{2033}'], "\"")
        .replace(['\u{2013}', '\u{2014}'], "-");
    if is_unknown_marker(&normalize_text(&text)) {
        return None;
    }
    if category == Category::Height {
        if let Some(c) = FEET_INCHES.captures(&text) {
            let feet: f64 = c[1].parse().ok()?;
            let inches: f64 = c.get(2).map_or(Ok(0.0), |m| m.as_str().parse()).ok()?;
            return Some(feet * CM_PER_FOOT + inches * CM_PER_INCH);
        }
    }
    let c = QUANTITY.captures(&text)?;
    let lo: f64 = c[1].parse().ok()?;
    let value = match c.get(2) {
        Some(hi) => (lo + hi.as_str().parse::<f64>().ok()?) / 2.0,
        None => lo,
    };
    let unit = parse_unit(c.get(3).map(|m| m.as_str()))?;
    match (category, unit) {
        (Category::Age, Unit::None | Unit::Years) => Some(value),
        (Category::Height, Unit::Cm) => Some(value),
        (Category::Height, Unit::M) => Some(value * 100.0),
        (Category::Height, Unit::Inch) => Some(inches_to_cm(value)),
        // bare numbers below 3 can only be meters
        (Category::Height, Unit::None) if value < 3.0 => Some(value * 100.0),
        (Category::Height, Unit::None) => Some(value),
        (Category::Weight, Unit::None | Unit::Kg) => Some(value),
        (Category::Weight, Unit::Lb) => Some(pounds_to_kg(value)),
        _ => None,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    subject_id: String,
    attributes: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    reference_images: Vec<PathBuf>,
    #[serde(default)]
    hair_length: Option<String>,
    #[serde(default)]
    young_images: Vec<PathBuf>,
    #[serde(default)]
    old_images: Vec<PathBuf>,
}

pub fn load_subject_records(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    load_subject_records_with(path, &SynonymTable::default())
}

pub fn load_subject_records_with(
    path: impl AsRef<Path>,
    synonyms: &SynonymTable,
) -> Result<Vec<SubjectRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_subject_records(&text, synonyms)
}

/// Parses and validates a subject records document.
pub fn parse_subject_records(text: &str, synonyms: &SynonymTable) -> Result<Vec<SubjectRecord>> {
    let items: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Ingestion {
        index: 0,
        field: "<document>".into(),
        reason: format!("expected a JSON array of records: {e}"),
    })?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(items.len());
    for (index, item) in items.into_iter().enumerate() {
        let raw: RawRecord = serde_json::from_value(item).map_err(|e| Error::Ingestion {
            index,
            field: "<record>".into(),
            reason: e.to_string(),
        })?;
        if raw.subject_id.trim().is_empty() {
            return Err(Error::Ingestion {
                index,
                field: "subject_id".into(),
                reason: "empty identifier".into(),
            });
        }
        if !seen.insert(raw.subject_id.clone()) {
            return Err(Error::Ingestion {
                index,
                field: "subject_id".into(),
                reason: format!("duplicate subject_id `{}`", raw.subject_id),
            });
        }
        for key in raw.attributes.keys() {
            if Category::from_key(key).is_none() {
                return Err(Error::Ingestion {
                    index,
                    field: format!("attributes.{key}"),
                    reason: "unknown category".into(),
                });
            }
        }
        let mut values = Vec::with_capacity(7);
        for cat in Category::ALL {
            let v = raw
                .attributes
                .get(cat.key())
                .ok_or_else(|| Error::missing_category(index, cat))?;
            let text = value_text(v).ok_or_else(|| Error::Ingestion {
                index,
                field: format!("attributes.{}", cat.key()),
                reason: "expected a string or number".into(),
            })?;
            values.push(normalize_value(cat, &text, synonyms));
        }
        records.push(SubjectRecord {
            subject_id: raw.subject_id,
            attributes: Attributes::from_values(values)?,
            reference_images: raw.reference_images,
            hair_length: raw.hair_length,
            young_images: raw.young_images,
            old_images: raw.old_images,
        });
    }
    Ok(records)
}

fn value_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Null => Some(String::new()),
        _ => None,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescription {
    subject_id: String,
    source_image: PathBuf,
    provenance: Provenance,
    #[serde(default)]
    attributes: BTreeMap<String, serde_json::Value>,
}

/// Builds a description from raw per-category answers; categories without
/// an answer become unknown.
pub fn describe_from_answers(
    subject_id: impl Into<String>,
    source_image: impl Into<PathBuf>,
    provenance: Provenance,
    answers: &BTreeMap<Category, String>,
    synonyms: &SynonymTable,
) -> AttributeDescription {
    let values = Category::ALL.map(|cat| match answers.get(&cat) {
        Some(raw) => normalize_value(cat, raw, synonyms),
        None => AttributeValue::unknown(cat, ""),
    });
    AttributeDescription {
        subject_id: subject_id.into(),
        source_image: source_image.into(),
        provenance,
        attributes: Attributes(values),
    }
}

/// Parses a JSON array of predicted descriptions with raw attribute text.
pub fn parse_descriptions(text: &str, synonyms: &SynonymTable) -> Result<Vec<AttributeDescription>> {
    let items: Vec<serde_json::Value> = serde_json::from_str(text)?;
    let mut out = Vec::with_capacity(items.len());
    for (index, item) in items.into_iter().enumerate() {
        let raw: RawDescription = serde_json::from_value(item).map_err(|e| Error::Ingestion {
            index,
            field: "<description>".into(),
            reason: e.to_string(),
        })?;
        let mut answers = BTreeMap::new();
        for (key, v) in &raw.attributes {
            let cat = Category::from_key(key).ok_or_else(|| Error::Ingestion {
                index,
                field: format!("attributes.{key}"),
                reason: "unknown category".into(),
            })?;
            let text = value_text(v).ok_or_else(|| Error::Ingestion {
                index,
                field: format!("attributes.{key}"),
                reason: "expected a string or number".into(),
            })?;
            answers.insert(cat, text);
        }
        out.push(describe_from_answers(
            raw.subject_id,
            raw.source_image,
            raw.provenance,
            &answers,
            synonyms,
        ));
    }
    Ok(out)
}

pub fn load_descriptions(path: impl AsRef<Path>, synonyms: &SynonymTable) -> Result<Vec<AttributeDescription>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_descriptions(&text, synonyms)
}
