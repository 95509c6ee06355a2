//! Builds describer questions, a generation prompt and both aging prompts
//! for one record.
//!
//!     cargo run --example prompts

use mugshot_kit::attribute::{parse_subject_records, SynonymTable};
use mugshot_kit::prompt::{
    build_aging_prompt, build_generation_prompt, build_vlm_questions, AgingDirection, FeatureRules,
};

const RECORD: &str = r#"[{
  "subject_id": "P-03",
  "hair_length": "short",
  "attributes": {
    "gender": "female", "age": 29, "ethnic_group": "hispanic",
    "hair_color": "black with a beard", "iris_color": "brown",
    "height": "165 cm", "weight": "58 kg"
  }
}]"#;

fn main() -> mugshot_kit::Result<()> {
    for q in build_vlm_questions() {
        println!("Q[{}]: {}", q.category.key(), q.text);
    }

    let record = &parse_subject_records(RECORD, &SynonymTable::default())?[0];
    let rules = FeatureRules::default();
    let base = build_generation_prompt(record, &rules)?;
    println!("\n+ {}\n- {}", base.render_positive(), base.render_negative());
    println!("excluded clauses: {:?}", base.excluded);

    for (age, dir) in [(70.0, AgingDirection::Age), (12.0, AgingDirection::Deage)] {
        let p = build_aging_prompt(&base, age, dir)?;
        println!("\n{} to {age}:\n+ {}\n- {}", dir.label(), p.render_positive(), p.render_negative());
    }
    Ok(())
}
