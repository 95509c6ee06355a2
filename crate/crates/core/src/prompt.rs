//! Prompt construction for the describer and the image generator.
//!
//! Generation prompts carry only the features that keep a generated mugshot
//! frontal and whole: gender, age, ethnic group, hair length and hair color.
//! Anything mentioning the exclusion terms (eyes, nose, ears, facial hair,
//! clothing and the like) is removed clause by clause before rendering.
//!
//! Wording lives in versioned template files under `templates/`; the
//! defaults are compiled in and [`PromptTemplates::load_dir`] swaps them.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribute::{normalize_text, AttributeDescription, Attributes, Category, SubjectRecord};
use crate::error::{Error, Result};

/// Character budget of a rendered positive prompt, about 77 CLIP tokens.
pub const DEFAULT_MAX_LENGTH: usize = 77 * 4;

/// Target age from which aging prompts ask for wrinkles.
pub const WRINKLES_FROM_AGE: f64 = 60.0;

pub const DEFAULT_EXCLUDE_TERMS: [&str; 9] = [
    "eyes",
    "nose",
    "ears",
    "facial hair",
    "beard",
    "mustache",
    "clothing",
    "teeth",
    "expression",
];

const CLAUSE_BREAKS: [&str; 3] = ["with", "and", "plus"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub generation: String,
    pub negative: String,
    pub question: String,
    pub age: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            generation: include_str!("../templates/generation_v1.txt").trim().to_owned(),
            negative: include_str!("../templates/negative_v1.txt").trim().to_owned(),
            question: include_str!("../templates/question_v1.txt").trim().to_owned(),
            age: include_str!("../templates/age_v1.txt").trim().to_owned(),
        }
    }
}

impl PromptTemplates {
    /// Reads `generation_v1.txt`, `negative_v1.txt`, `question_v1.txt` and
    /// `age_v1.txt` from `dir`; missing files keep the built-in wording.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut t = PromptTemplates::default();
        for (name, slot) in [
            ("generation_v1.txt", &mut t.generation),
            ("negative_v1.txt", &mut t.negative),
            ("question_v1.txt", &mut t.question),
            ("age_v1.txt", &mut t.age),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(&path, e))?
                    .trim()
                    .to_owned();
            }
        }
        Ok(t)
    }
}

/// Replaces every `{key}`; leftover placeholders are a configuration error.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> Result<String> {
    let mut out = template.to_owned();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    if let Some(start) = out.find('{') {
        if out[start..].contains('}') {
            return Err(Error::Config(format!("unfilled placeholder in template `{template}`")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VlmQuestion {
    pub category: Category,
    pub text: String,
}

pub fn build_vlm_questions() -> Vec<VlmQuestion> {
    build_vlm_questions_with(&PromptTemplates::default()).expect("built-in template is complete")
}

pub fn build_vlm_questions_with(templates: &PromptTemplates) -> Result<Vec<VlmQuestion>> {
    Category::ALL
        .into_iter()
        .map(|category| {
            let hint = match category {
                Category::Age => " in years",
                Category::Height => " in centimeters",
                Category::Weight => " in kilograms",
                _ => "",
            };
            let text = fill_template(&templates.question, &[("category", category.term()), ("hint", hint)])?;
            Ok(VlmQuestion { category, text })
        })
        .collect()
}

/// Features a generation prompt may mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFeature {
    Gender,
    Age,
    EthnicGroup,
    HairLength,
    HairColor,
}

impl PromptFeature {
    pub const ALL: [PromptFeature; 5] = [
        PromptFeature::Gender,
        PromptFeature::Age,
        PromptFeature::EthnicGroup,
        PromptFeature::HairLength,
        PromptFeature::HairColor,
    ];

    pub fn term(self) -> &'static str {
        match self {
            PromptFeature::Gender => "gender",
            PromptFeature::Age => "age",
            PromptFeature::EthnicGroup => "ethnic group",
            PromptFeature::HairLength => "hair length",
            PromptFeature::HairColor => "hair color",
        }
    }
}

impl FromStr for PromptFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = normalize_text(s);
        PromptFeature::ALL
            .into_iter()
            .find(|f| f.term() == n)
            .ok_or_else(|| Error::Config(format!("unknown prompt feature `{s}`")))
    }
}

impl fmt::Display for PromptFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.term())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRules {
    include: BTreeSet<PromptFeature>,
    exclude_terms: Vec<String>,
}

impl Default for FeatureRules {
    fn default() -> Self {
        FeatureRules::new(
            PromptFeature::ALL,
            DEFAULT_EXCLUDE_TERMS.iter().map(|s| s.to_string()),
        )
        .expect("default rules are disjoint")
    }
}

impl FeatureRules {
    /// Exclusion terms are text-normalized; a term naming an included
    /// feature is rejected.
    pub fn new(
        include: impl IntoIterator<Item = PromptFeature>,
        exclude_terms: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let include: BTreeSet<_> = include.into_iter().collect();
        let mut terms: Vec<String> = Vec::new();
        for t in exclude_terms {
            let t = normalize_text(&t);
            if t.is_empty() {
                return Err(Error::Config("empty exclusion term".into()));
            }
            if let Some(f) = include.iter().find(|f| f.term() == t) {
                return Err(Error::Config(format!("`{t}` is both included and excluded ({f})")));
            }
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
        Ok(FeatureRules {
            include,
            exclude_terms: terms,
        })
    }

    pub fn includes(&self, feature: PromptFeature) -> bool {
        self.include.contains(&feature)
    }

    pub fn exclude_terms(&self) -> &[String] {
        &self.exclude_terms
    }

    pub fn with_extra_excludes(&self, extra: impl IntoIterator<Item = String>) -> Result<Self> {
        FeatureRules::new(
            self.include.iter().copied(),
            self.exclude_terms.iter().cloned().chain(extra),
        )
    }

    pub fn with_include(&self, include: impl IntoIterator<Item = PromptFeature>) -> Result<Self> {
        FeatureRules::new(include, self.exclude_terms.iter().cloned())
    }
}

/// Role of a positive token; decides which tokens go first when the
/// rendered prompt is over budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Frame,
    Gender,
    Age,
    Aging,
    Ethnicity,
    Hair,
}

impl TokenRole {
    /// Lower values are dropped first; `None` is never dropped.
    fn drop_rank(self) -> Option<u8> {
        match self {
            TokenRole::Hair => Some(0),
            TokenRole::Ethnicity => Some(1),
            TokenRole::Aging => Some(2),
            TokenRole::Age => Some(3),
            TokenRole::Gender | TokenRole::Frame => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptToken {
    pub text: String,
    pub role: TokenRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSpec {
    pub positive: Vec<PromptToken>,
    pub negative: Vec<String>,
    pub max_length: usize,
    /// Terms that must never appear in `positive`.
    pub excluded: Vec<String>,
}

impl PromptSpec {
    pub fn render_positive(&self) -> String {
        self.positive.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(", ")
    }

    pub fn render_negative(&self) -> String {
        self.negative.join(", ")
    }

    pub fn has_role(&self, role: TokenRole) -> bool {
        self.positive.iter().any(|t| t.role == role)
    }

    /// Terms from `excluded` that occur in the positive tokens.
    pub fn exclusion_violations(&self) -> Vec<&str> {
        self.excluded
            .iter()
            .filter(|term| self.positive.iter().any(|t| mentions(&t.text, term)))
            .map(String::as_str)
            .collect()
    }

    /// Drops the lowest-priority tokens until the rendering fits.
    fn fit_budget(&mut self) -> Result<()> {
        while self.render_positive().chars().count() > self.max_length {
            let victim = self
                .positive
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.role.drop_rank().map(|r| (r, std::cmp::Reverse(i))))
                .min()
                .map(|(_, std::cmp::Reverse(i))| i);
            match victim {
                Some(i) => {
                    self.positive.remove(i);
                }
                None => {
                    return Err(Error::Prompt(format!(
                        "prompt does not fit in {} characters even without optional features",
                        self.max_length
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Whole-word containment of a (possibly multi-word) term.
fn mentions(text: &str, term: &str) -> bool {
    let text = normalize_text(text);
    let words: Vec<&str> = text.split(' ').collect();
    let needle: Vec<&str> = term.split(' ').collect();
    !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Keeps the clauses of a value that avoid every excluded term. Clauses are
/// separated by "with", "and" or "plus"; a kept clause keeps the connector
/// in front of it unless it ends up first.
pub fn strip_excluded(value: &str, excluded: &[String]) -> Option<String> {
    let text = normalize_text(value);
    let mut clauses: Vec<(Option<&str>, Vec<&str>)> = vec![(None, Vec::new())];
    for w in text.split(' ').filter(|w| !w.is_empty()) {
        if CLAUSE_BREAKS.contains(&w) {
            clauses.push((Some(w), Vec::new()));
        } else {
            clauses.last_mut().expect("non-empty").1.push(w);
        }
    }
    let mut kept: Vec<&str> = Vec::new();
    for (connector, words) in &clauses {
        if words.is_empty() {
            continue;
        }
        let clause = words.join(" ");
        if excluded.iter().any(|t| mentions(&clause, t)) {
            continue;
        }
        if let (Some(c), false) = (connector, kept.is_empty()) {
            kept.push(c);
        }
        kept.extend(words.iter().copied());
    }
    (!kept.is_empty()).then(|| kept.join(" "))
}

/// What a generation prompt can be built from.
#[derive(Debug, Clone, Copy)]
pub enum PromptSource<'a> {
    Record(&'a SubjectRecord),
    Description(&'a AttributeDescription),
}

impl<'a> From<&'a SubjectRecord> for PromptSource<'a> {
    fn from(r: &'a SubjectRecord) -> Self {
        PromptSource::Record(r)
    }
}

impl<'a> From<&'a AttributeDescription> for PromptSource<'a> {
    fn from(d: &'a AttributeDescription) -> Self {
        PromptSource::Description(d)
    }
}

impl PromptSource<'_> {
    fn attributes(&self) -> &Attributes {
        match self {
            PromptSource::Record(r) => &r.attributes,
            PromptSource::Description(d) => &d.attributes,
        }
    }

    fn subject_id(&self) -> &str {
        match self {
            PromptSource::Record(r) => &r.subject_id,
            PromptSource::Description(d) => &d.subject_id,
        }
    }

    fn hair_length(&self) -> Option<&str> {
        match self {
            PromptSource::Record(r) => r.hair_length.as_deref(),
            PromptSource::Description(_) => None,
        }
    }
}

fn gender_word(label: &str) -> String {
    match label {
        "male" | "man" | "m" => "man".into(),
        "female" | "woman" | "f" => "woman".into(),
        other => other.into(),
    }
}

fn age_text(templates: &PromptTemplates, years: f64) -> Result<String> {
    fill_template(&templates.age, &[("age", &format!("{years}"))])
}

pub fn build_generation_prompt<'a>(source: impl Into<PromptSource<'a>>, rules: &FeatureRules) -> Result<PromptSpec> {
    build_generation_prompt_with(source, rules, &PromptTemplates::default(), DEFAULT_MAX_LENGTH)
}

pub fn build_generation_prompt_with<'a>(
    source: impl Into<PromptSource<'a>>,
    rules: &FeatureRules,
    templates: &PromptTemplates,
    max_length: usize,
) -> Result<PromptSpec> {
    let source = source.into();
    let attrs = source.attributes();
    let excluded = rules.exclude_terms();
    let gender = attrs.get(Category::Gender).label().ok_or_else(|| {
        Error::Prompt(format!("subject {}: gender is unknown", source.subject_id()))
    })?;

    let mut features: Vec<PromptToken> = Vec::new();
    let mut push = |role, text: Option<String>| {
        if let Some(text) = text.and_then(|t| strip_excluded(&t, excluded)) {
            features.push(PromptToken { text, role });
        }
    };
    if rules.includes(PromptFeature::Gender) {
        push(TokenRole::Gender, Some(gender_word(gender)));
    }
    if rules.includes(PromptFeature::Age) {
        if let Some(age) = attrs.get(Category::Age).number() {
            push(TokenRole::Age, Some(age_text(templates, age)?));
        }
    }
    if rules.includes(PromptFeature::EthnicGroup) {
        push(TokenRole::Ethnicity, attrs.get(Category::EthnicGroup).label().map(str::to_owned));
    }
    let length = rules
        .includes(PromptFeature::HairLength)
        .then(|| source.hair_length().and_then(|l| strip_excluded(l, excluded)))
        .flatten();
    let color = rules
        .includes(PromptFeature::HairColor)
        .then(|| {
            attrs
                .get(Category::HairColor)
                .label()
                .and_then(|c| strip_excluded(c, excluded))
        })
        .flatten();
    let hair = match (length, color) {
        (None, None) => None,
        (l, c) => Some(
            [l, c, Some("hair".to_owned())]
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
                .join(" "),
        ),
    };
    push(TokenRole::Hair, hair);

    let frame = fill_template(&templates.generation, &[("features", "\u{0}")])?;
    let mut positive = Vec::new();
    for part in frame.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part == "\u{0}" {
            positive.append(&mut features);
        } else if !excluded.iter().any(|t| mentions(part, t)) {
            positive.push(PromptToken {
                text: part.to_owned(),
                role: TokenRole::Frame,
            });
        }
    }
    let negative = templates
        .negative
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();

    let mut spec = PromptSpec {
        positive,
        negative,
        max_length,
        excluded: excluded.to_vec(),
    };
    spec.fit_budget()?;
    debug_assert!(spec.exclusion_violations().is_empty());
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgingDirection {
    Age,
    Deage,
}

impl AgingDirection {
    pub fn label(self) -> &'static str {
        match self {
            AgingDirection::Age => "aging",
            AgingDirection::Deage => "de-aging",
        }
    }
}

impl FromStr for AgingDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "age" | "aging" => Ok(AgingDirection::Age),
            "deage" | "de-age" | "de-aging" | "deaging" => Ok(AgingDirection::Deage),
            _ => Err(Error::Config(format!("unknown aging direction `{s}`"))),
        }
    }
}

pub fn build_aging_prompt(base: &PromptSpec, target_age: f64, direction: AgingDirection) -> Result<PromptSpec> {
    build_aging_prompt_with(base, target_age, direction, &PromptTemplates::default())
}

/// States the target age in place of the current one and injects the aging
/// terms: "wrinkles" when aging to 60 or more, "child" and "baby" as
/// negatives when aging, "wrinkles" as a negative when de-aging.
pub fn build_aging_prompt_with(
    base: &PromptSpec,
    target_age: f64,
    direction: AgingDirection,
    templates: &PromptTemplates,
) -> Result<PromptSpec> {
    if !(target_age.is_finite() && target_age > 0.0) {
        return Err(Error::Usage(format!("target age must be > 0, got {target_age}")));
    }
    let mut spec = base.clone();
    let age_token = PromptToken {
        text: age_text(templates, target_age)?,
        role: TokenRole::Age,
    };
    match spec.positive.iter().position(|t| t.role == TokenRole::Age) {
        Some(i) => spec.positive[i] = age_token,
        None => {
            let at = spec
                .positive
                .iter()
                .position(|t| t.role == TokenRole::Gender)
                .map_or(spec.positive.len(), |i| i + 1);
            spec.positive.insert(at, age_token);
        }
    }
    spec.positive.retain(|t| t.role != TokenRole::Aging);

    let mut add_negative = |term: &str| {
        if !spec.negative.iter().any(|n| n == term) {
            spec.negative.push(term.to_owned());
        }
    };
    match direction {
        AgingDirection::Age => {
            add_negative("child");
            add_negative("baby");
        }
        AgingDirection::Deage => add_negative("wrinkles"),
    }
    if direction == AgingDirection::Age
        && target_age >= WRINKLES_FROM_AGE
        && !spec.excluded.iter().any(|t| mentions("wrinkles", t))
    {
        let at = spec
            .positive
            .iter()
            .position(|t| t.role == TokenRole::Age)
            .map_or(spec.positive.len(), |i| i + 1);
        spec.positive.insert(
            at,
            PromptToken {
                text: "wrinkles".into(),
                role: TokenRole::Aging,
            },
        );
    }
    spec.fit_budget()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::{parse_subject_records, SynonymTable};

    fn record(gender: &str, hair: &str, iris: &str, hair_length: Option<&str>) -> SubjectRecord {
        let hl = hair_length.map_or(String::new(), |h| format!(r#","hair_length":"{h}""#));
        let doc = format!(
            r#"[{{"subject_id":"s1","attributes":{{"gender":"{gender}","age":"35","ethnic_group":"Caucasian",
            "hair_color":"{hair}","iris_color":"{iris}","height":"180","weight":"80"}}{hl}}}]"#
        );
        parse_subject_records(&doc, &SynonymTable::default()).unwrap().remove(0)
    }

    #[test]
    fn questions_cover_categories_in_order() {
        let q = build_vlm_questions();
        assert_eq!(q.len(), 7);
        assert_eq!(q, build_vlm_questions());
        for (question, cat) in q.iter().zip(Category::ALL) {
            assert_eq!(question.category, cat);
            assert!(question.text.contains(cat.term()), "{}", question.text);
        }
        assert!(q[4].text.contains("iris color"));
    }

    #[test]
    fn generation_mentions_included_features() {
        let r = record("male", "black", "blue", Some("short"));
        let p = build_generation_prompt(&r, &FeatureRules::default()).unwrap();
        let text = p.render_positive();
        assert!(text.contains("man"), "{text}");
        assert!(text.contains("35 years old"));
        assert!(text.contains("white"));
        assert!(text.contains("short black hair"));
        assert!(!text.contains("blue"), "iris must be omitted: {text}");
        assert!(p.exclusion_violations().is_empty());
    }

    #[test]
    fn beard_is_stripped() {
        let r = record("male", "black with a thick beard", "brown", None);
        let p = build_generation_prompt(&r, &FeatureRules::default()).unwrap();
        let text = p.render_positive();
        assert!(!text.contains("beard"), "{text}");
        assert!(text.contains("black hair"));
    }

    #[test]
    fn fully_excluded_value_is_dropped() {
        let r = record("female", "beard", "brown", None);
        let p = build_generation_prompt(&r, &FeatureRules::default()).unwrap();
        assert!(!p.has_role(TokenRole::Hair));
    }

    #[test]
    fn unknown_gender_rejected() {
        let r = record("unknown", "black", "brown", None);
        assert!(matches!(
            build_generation_prompt(&r, &FeatureRules::default()),
            Err(Error::Prompt(_))
        ));
    }

    #[test]
    fn rules_must_be_disjoint() {
        assert!(FeatureRules::new(PromptFeature::ALL, ["Hair Color".to_string()]).is_err());
        let r = FeatureRules::default()
            .with_include([PromptFeature::Gender, PromptFeature::Age])
            .unwrap()
            .with_extra_excludes(["hair color".to_string()])
            .unwrap();
        assert!(!r.includes(PromptFeature::HairColor));
    }

    #[test]
    fn excluded_frame_tokens_are_dropped() {
        let rules = FeatureRules::default().with_extra_excludes(["lighting".to_string()]).unwrap();
        let p = build_generation_prompt(&record("male", "black", "brown", None), &rules).unwrap();
        assert!(!p.render_positive().contains("lighting"));
    }

    #[test]
    fn budget_drops_low_priority_first() {
        let r = record("male", "light brown", "brown", Some("long curly"));
        let full = build_generation_prompt(&r, &FeatureRules::default()).unwrap();
        let without_hair = full.render_positive().len() - ", long curly light brown hair".len();
        let p = build_generation_prompt_with(&r, &FeatureRules::default(), &PromptTemplates::default(), without_hair)
            .unwrap();
        assert!(!p.has_role(TokenRole::Hair));
        assert!(p.has_role(TokenRole::Ethnicity));
        assert!(p.render_positive().len() <= without_hair);
        let tiny = build_generation_prompt_with(&r, &FeatureRules::default(), &PromptTemplates::default(), 20);
        assert!(matches!(tiny, Err(Error::Prompt(_))));
    }

    #[test]
    fn aging_terms() {
        let base = build_generation_prompt(&record("male", "black", "brown", None), &FeatureRules::default()).unwrap();
        let old = build_aging_prompt(&base, 70.0, AgingDirection::Age).unwrap();
        assert!(old.positive.iter().any(|t| t.text == "wrinkles"));
        assert!(old.negative.contains(&"child".to_string()));
        assert!(old.negative.contains(&"baby".to_string()));
        assert!(old.render_positive().contains("70 years old"));
        assert!(!old.render_positive().contains("35 years old"));

        let mid = build_aging_prompt(&base, 40.0, AgingDirection::Age).unwrap();
        assert!(!mid.render_positive().contains("wrinkles"));
        assert!(mid.negative.contains(&"child".to_string()));

        let young = build_aging_prompt(&base, 12.0, AgingDirection::Deage).unwrap();
        assert!(young.negative.contains(&"wrinkles".to_string()));
        assert!(!young.render_positive().contains("wrinkles"));
        assert!(!young.negative.contains(&"child".to_string()));

        assert!(build_aging_prompt(&base, 0.0, AgingDirection::Age).is_err());
    }

    #[test]
    fn aging_twice_does_not_duplicate() {
        let base = build_generation_prompt(&record("male", "black", "brown", None), &FeatureRules::default()).unwrap();
        let once = build_aging_prompt(&base, 75.0, AgingDirection::Age).unwrap();
        let twice = build_aging_prompt(&once, 75.0, AgingDirection::Age).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn template_placeholders() {
        assert_eq!(fill_template("a {x} b", &[("x", "1")]).unwrap(), "a 1 b");
        assert!(fill_template("a {y}", &[("x", "1")]).is_err());
    }

    #[test]
    fn clause_stripping() {
        let ex: Vec<String> = DEFAULT_EXCLUDE_TERMS.iter().map(|s| s.to_string()).collect();
        assert_eq!(strip_excluded("short, with facial hair", &ex).as_deref(), Some("short"));
        assert_eq!(strip_excluded("Nose ring", &ex), None);
        assert_eq!(strip_excluded("black and brown", &ex).as_deref(), Some("black and brown"));
        assert_eq!(
            strip_excluded("brown with beard and gray streaks", &ex).as_deref(),
            Some("brown and gray streaks")
        );
        // "hair" alone is fine, only "facial hair" is excluded
        assert_eq!(strip_excluded("hair", &ex).as_deref(), Some("hair"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const VOCAB: [&str; 14] = [
            "short", "black", "curly", "with", "and", "plus", "beard", "facial hair", "eyes", "Nose", "brown",
            "thick", "ears", "gray",
        ];

        fn phrase() -> impl Strategy<Value = String> {
            prop::collection::vec(prop::sample::select(&VOCAB[..]), 1..8).prop_map(|w| w.join(" "))
        }

        fn rank(role: TokenRole) -> u8 {
            role.drop_rank().unwrap_or(u8::MAX)
        }

        proptest! {
            #[test]
            fn prompts_respect_exclusion_budget_and_priority(
                hair in phrase(),
                ethnic in phrase(),
                length in phrase(),
                budget in 110usize..320,
            ) {
                let doc = serde_json::json!([{
                    "subject_id": "p", "hair_length": length,
                    "attributes": {"gender": "female", "age": 30, "ethnic_group": ethnic, "hair_color": hair,
                                   "iris_color": "blue", "height": 170, "weight": 60}
                }]);
                let r = parse_subject_records(&doc.to_string(), &SynonymTable::default()).unwrap().remove(0);
                let rules = FeatureRules::default();
                let t = PromptTemplates::default();
                let full = build_generation_prompt_with(&r, &rules, &t, 10_000).unwrap();
                let Ok(small) = build_generation_prompt_with(&r, &rules, &t, budget) else {
                    return Ok(());
                };
                prop_assert!(small.exclusion_violations().is_empty());
                prop_assert!(small.render_positive().chars().count() <= budget);
                prop_assert_eq!(&small, &build_generation_prompt_with(&r, &rules, &t, budget).unwrap());
                for gone in full.positive.iter().filter(|x| !small.positive.contains(x)) {
                    for kept in &small.positive {
                        prop_assert!(rank(kept.role) >= rank(gone.role), "{:?} kept while {:?} dropped", kept.role, gone.role);
                    }
                }
            }
        }
    }
}
