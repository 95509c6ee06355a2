//! Scores two predicted descriptions against a ground-truth record and
//! prints the per-category distances and a cohort table.
//!
//!     cargo run --example semantic_scoring

use std::collections::BTreeMap;

use mugshot_kit::attribute::{describe_from_answers, parse_subject_records, Category, Provenance, SynonymTable};
use mugshot_kit::metric::{score_cohort, score_description, EquivalenceTable, NumericThresholds};

const RECORDS: &str = r#"[
  {
    "subject_id": "P-17",
    "attributes": {
      "gender": "Male", "age": "35-40", "ethnic_group": "Caucasian",
      "hair_color": "brown", "iris_color": "blue",
      "height": "5'10\"", "weight": "180 lbs"
    }
  }
]"#;

fn main() -> mugshot_kit::Result<()> {
    let syn = SynonymTable::default();
    let truth = &parse_subject_records(RECORDS, &syn)?[0];
    for v in truth.attributes.iter() {
        println!("{:<12} {:<10} -> {:?}", v.category.key(), v.raw, v.canonical_text());
    }

    let answers = |pairs: &[(Category, &str)]| -> BTreeMap<Category, String> {
        pairs.iter().map(|(c, s)| (*c, s.to_string())).collect()
    };
    let original = describe_from_answers(
        "P-17",
        "p17.png",
        Provenance::Original,
        &answers(&[
            (Category::Gender, "male"),
            (Category::Age, "about 41 years old"),
            (Category::EthnicGroup, "White"),
            (Category::HairColor, "light brown"),
            (Category::IrisColor, "green"),
            (Category::Height, "178 cm"),
            (Category::Weight, "84 kg"),
        ]),
        &syn,
    );
    // no iris or weight answer at all: both count as wrong
    let enhanced = describe_from_answers(
        "P-17",
        "p17.tvd.png",
        Provenance::TvDenoise,
        &answers(&[
            (Category::Gender, "male"),
            (Category::Age, "38"),
            (Category::EthnicGroup, "hispanic"),
            (Category::HairColor, "brown"),
            (Category::Height, "1.80 m"),
        ]),
        &syn,
    );

    let (th, table) = (NumericThresholds::default(), EquivalenceTable::default());
    let mut reports = Vec::new();
    for d in [&original, &enhanced] {
        let r = score_description(truth, d, &th, &table)?;
        println!("\n{} ({}): accuracy {:.2}%", r.source_image.display(), r.provenance, r.accuracy);
        for (cat, dist) in &r.distances {
            println!("  {:<12} {}", cat.key(), dist.map_or("excluded".into(), |d| format!("{d:.3}")));
        }
        reports.push(r);
    }
    println!("\n{}", score_cohort(&reports)?.render());
    Ok(())
}
