//! Semantic Hamming-like distance between ground truth and predicted
//! attribute descriptions.
//!
//! Every category contributes a distance in `[0, 1]`:
//!
//! - numerical categories use a threshold `t` and tolerance `h = t/4`:
//!   zero up to `h`, a linear ramp `(|a-b| - h) / (t - h)` up to `t`, and one
//!   beyond;
//! - string categories score 0 on an exact label match, 0.5 when the pair is
//!   listed in the [`EquivalenceTable`] and 1 otherwise.
//!
//! The subject distance is the mean over scored categories and the accuracy
//! is `100 * (1 - mean)`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attribute::{AttributeDescription, AttributeValue, Category, Normalized, Provenance, SubjectRecord};
use crate::attribute::normalize_text;
use crate::error::{Error, Result};

/// Per numerical category threshold `t`; the tolerance is always `t / 4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThresholdsRepr", into = "ThresholdsRepr")]
pub struct NumericThresholds {
    age: f64,
    height: f64,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdsRepr {
    #[serde(default = "default_age_t")]
    age: f64,
    #[serde(default = "default_length_t")]
    height: f64,
    #[serde(default = "default_length_t")]
    weight: f64,
}

fn default_age_t() -> f64 {
    10.0
}

fn default_length_t() -> f64 {
    15.0
}

impl TryFrom<ThresholdsRepr> for NumericThresholds {
    type Error = Error;

    fn try_from(r: ThresholdsRepr) -> Result<Self> {
        NumericThresholds::new(r.age, r.height, r.weight)
    }
}

impl From<NumericThresholds> for ThresholdsRepr {
    fn from(t: NumericThresholds) -> Self {
        ThresholdsRepr {
            age: t.age,
            height: t.height,
            weight: t.weight,
        }
    }
}

impl Default for NumericThresholds {
    /// Age 10 years, height 15 cm, weight 15 kg.
    fn default() -> Self {
        NumericThresholds {
            age: default_age_t(),
            height: default_length_t(),
            weight: default_length_t(),
        }
    }
}

impl NumericThresholds {
    pub fn new(age: f64, height: f64, weight: f64) -> Result<Self> {
        for (name, t) in [("age", age), ("height", height), ("weight", weight)] {
            check_threshold(t).map_err(|_| {
                Error::Config(format!("threshold for {name} must be finite and > 0, got {t}"))
            })?;
        }
        Ok(NumericThresholds { age, height, weight })
    }

    pub fn threshold(&self, category: Category) -> Option<f64> {
        match category {
            Category::Age => Some(self.age),
            Category::Height => Some(self.height),
            Category::Weight => Some(self.weight),
            _ => None,
        }
    }

    pub fn tolerance(&self, category: Category) -> Option<f64> {
        self.threshold(category).map(|t| t / 4.0)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must be finite and > 0, got {t}")))
    }
}

/// Distance between two quantities in the same unit under threshold `t`.
pub fn numeric_distance(a: f64, b: f64, t: f64) -> Result<f64> {
    check_threshold(t)?;
    let h = t / 4.0;
    let diff = (a - b).abs();
    Ok(if diff <= h {
        0.0
    } else if diff <= t {
        (diff - h) / (t - h)
    } else {
        1.0
    })
}

/// Unordered label pairs that sit at distance 0.5, per string category.
///
/// The relation is stored as given and never closed transitively.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceTable {
    pairs: BTreeMap<Category, BTreeSet<(String, String)>>,
}

impl Default for EquivalenceTable {
    fn default() -> Self {
        let mut t = EquivalenceTable::empty();
        t.add_group(Category::EthnicGroup, &["african american", "african", "aboriginal"]);
        t.add_group(Category::EthnicGroup, &["white", "hispanic"]);
        t.add_group(Category::EthnicGroup, &["hispanic", "arab"]);
        t.add_group(Category::EthnicGroup, &["hispanic", "indian"]);
        t.add_group(Category::HairColor, &["black", "brown"]);
        t.add_group(Category::HairColor, &["blonde", "light brown"]);
        t.add_group(Category::HairColor, &["brown", "light brown"]);
        t.add_group(Category::IrisColor, &["black", "brown"]);
        t.add_group(Category::IrisColor, &["blue", "green"]);
        t.add_group(Category::IrisColor, &["green", "brown"]);
        t
    }
}

impl EquivalenceTable {
    pub fn empty() -> Self {
        EquivalenceTable {
            pairs: BTreeMap::new(),
        }
    }

    fn add_group(&mut self, category: Category, labels: &[&str]) {
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                self.add_pair(category, a, b).expect("valid group");
            }
        }
    }

    /// Adds the unordered pair `{a, b}`. Labels are text-normalized.
    pub fn add_pair(&mut self, category: Category, a: &str, b: &str) -> Result<()> {
        if category.is_numeric() {
            return Err(Error::Config(format!("{category} is numerical")));
        }
        if category == Category::Gender {
            return Err(Error::Config("gender is binary and takes no equivalence pairs".into()));
        }
        let (a, b) = (normalize_text(a), normalize_text(b));
        if a == b || a.is_empty() {
            return Err(Error::Config(format!("invalid equivalence pair ({a}, {b})")));
        }
        self.pairs.entry(category).or_default().insert(ordered(a, b));
        Ok(())
    }

    pub fn contains(&self, category: Category, a: &str, b: &str) -> bool {
        self.pairs
            .get(&category)
            .is_some_and(|set| set.contains(&ordered(a.to_owned(), b.to_owned())))
    }

    pub fn pairs(&self, category: Category) -> impl Iterator<Item = (&str, &str)> {
        self.pairs
            .get(&category)
            .into_iter()
            .flatten()
            .map(|(a, b)| (a.as_str(), b.as_str()))
    }
}

fn ordered(a: String, b: String) -> (String, String) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// 0 for equal labels, 0.5 for a listed pair, 1 otherwise.
pub fn string_distance(category: Category, a: &str, b: &str, table: &EquivalenceTable) -> f64 {
    if a == b {
        0.0
    } else if category != Category::Gender && table.contains(category, a, b) {
        0.5
    } else {
        1.0
    }
}

/// Distance for one category, or `None` when the ground truth is unknown and
/// the category is excluded from scoring. An unknown prediction against a
/// known truth scores 1.
pub fn category_distance(
    truth: &AttributeValue,
    pred: &AttributeValue,
    thresholds: &NumericThresholds,
    table: &EquivalenceTable,
) -> Result<Option<f64>> {
    if truth.category != pred.category {
        return Err(Error::Usage(format!(
            "category mismatch: truth is {}, prediction is {}",
            truth.category, pred.category
        )));
    }
    let cat = truth.category;
    let Some(t) = &truth.normalized else {
        return Ok(None);
    };
    let Some(p) = &pred.normalized else {
        return Ok(Some(1.0));
    };
    let d = match (t, p) {
        (Normalized::Number(a), Normalized::Number(b)) => {
            let th = thresholds
                .threshold(cat)
                .ok_or_else(|| Error::Usage(format!("no threshold for {cat}")))?;
            numeric_distance(*a, *b, th)?
        }
        (Normalized::Label(a), Normalized::Label(b)) => string_distance(cat, a, b, table),
        _ => {
            return Err(Error::Usage(format!(
                "{cat}: truth and prediction normalized to different kinds"
            )))
        }
    };
    Ok(Some(d))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceReport {
    pub subject_id: String,
    pub provenance: Provenance,
    pub source_image: PathBuf,
    /// `None` marks a category excluded because the truth is unknown.
    pub distances: BTreeMap<Category, Option<f64>>,
    pub excluded: Vec<Category>,
    pub mean_distance: f64,
    pub accuracy: f64,
}

pub fn score_description(
    truth: &SubjectRecord,
    pred: &AttributeDescription,
    thresholds: &NumericThresholds,
    table: &EquivalenceTable,
) -> Result<DistanceReport> {
    if truth.subject_id != pred.subject_id {
        return Err(Error::Usage(format!(
            "subject mismatch: truth {} vs prediction {}",
            truth.subject_id, pred.subject_id
        )));
    }
    let mut distances = BTreeMap::new();
    for cat in Category::ALL {
        let d = category_distance(
            truth.attributes.get(cat),
            pred.attributes.get(cat),
            thresholds,
            table,
        )?;
        distances.insert(cat, d);
    }
    report_from_distances(
        pred.subject_id.clone(),
        pred.provenance,
        pred.source_image.clone(),
        distances,
    )
}

/// Assembles a report from already computed per-category distances.
pub fn report_from_distances(
    subject_id: String,
    provenance: Provenance,
    source_image: PathBuf,
    distances: BTreeMap<Category, Option<f64>>,
) -> Result<DistanceReport> {
    let included: Vec<f64> = distances.values().filter_map(|d| *d).collect();
    if included.is_empty() {
        return Err(Error::Scoring(format!(
            "subject {subject_id}: no category with a known ground truth"
        )));
    }
    if let Some(bad) = included.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Scoring(format!("category distance {bad} outside [0, 1]")));
    }
    let excluded = distances
        .iter()
        .filter(|(_, d)| d.is_none())
        .map(|(c, _)| *c)
        .collect();
    let mean_distance = included.iter().sum::<f64>() / included.len() as f64;
    Ok(DistanceReport {
        subject_id,
        provenance,
        source_image,
        distances,
        excluded,
        mean_distance,
        accuracy: 100.0 * (1.0 - mean_distance),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortRow {
    pub provenance: Provenance,
    pub label: &'static str,
    pub mean_accuracy: f64,
    pub count: usize,
}

/// Mean accuracy per provenance, rows in Original, MAXIM, SRGAN, TVD,
/// Generated order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortTable {
    pub rows: Vec<CohortRow>,
}

impl CohortTable {
    pub fn get(&self, provenance: Provenance) -> Option<&CohortRow> {
        self.rows.iter().find(|r| r.provenance == provenance)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["input_pictures", "accuracy", "count"])?;
        for r in &self.rows {
            w.write_record([r.label.to_owned(), format!("{:.3}", r.mean_accuracy), r.count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Plain-text table with three-decimal percentages.
    pub fn render(&self) -> String {
        let mut s = format!("{:<12} {:>9} {:>6}\n", "Input", "Accuracy", "Count");
        for r in &self.rows {
            s.push_str(&format!("{:<12} {:>9.3} {:>6}\n", r.label, r.mean_accuracy, r.count));
        }
        s
    }
}

pub fn score_cohort(reports: &[DistanceReport]) -> Result<CohortTable> {
    if reports.is_empty() {
        return Err(Error::Scoring("cannot aggregate an empty report list".into()));
    }
    let mut groups: BTreeMap<Provenance, (f64, usize)> = BTreeMap::new();
    for r in reports {
        let g = groups.entry(r.provenance).or_default();
        g.0 += r.accuracy;
        g.1 += 1;
    }
    Ok(CohortTable {
        rows: groups
            .into_iter()
            .map(|(provenance, (sum, count))| CohortRow {
                provenance,
                label: provenance.label(),
                mean_accuracy: sum / count as f64,
                count,
            })
            .collect(),
    })
}

/// One CSV row per report: distances per category (empty when excluded),
/// then mean distance and accuracy.
pub fn write_reports_csv<W: Write>(reports: &[DistanceReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject_id", "provenance", "source_image"];
    header.extend(Category::ALL.iter().map(|c| c.key()));
    header.extend(["mean_distance", "accuracy"]);
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.subject_id.clone(),
            r.provenance.key().to_owned(),
            r.source_image.display().to_string(),
        ];
        for cat in Category::ALL {
            row.push(match r.distances.get(&cat).copied().flatten() {
                Some(d) => format!("{d:.6}"),
                None => String::new(),
            });
        }
        row.push(format!("{:.6}", r.mean_distance));
        row.push(format!("{:.6}", r.accuracy));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
