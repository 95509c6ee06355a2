//! Builds the synthetic demo (dataset, config, recorded fixtures) and runs
//! the full pipeline against the fixtures.
//!
//!     cargo run --example offline_pipeline -- [dir]

use mugshot_kit::demo::build_demo_world;
use mugshot_kit::pipeline::Pipeline;

fn main() -> mugshot_kit::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "mugshot-demo".into());
    let world = build_demo_world(&dir)?;
    println!("dataset  {}\nconfig   {}\nfixtures {}", world.dataset.display(), world.config.display(), world.fixtures.display());

    let pipeline = Pipeline::open(world.config_with_out(world.root.join("out"))?)?;
    let report = pipeline.run()?;
    let cohort = pipeline.out_dir().join("describe/cohort.csv");
    println!("\n{}", std::fs::read_to_string(&cohort).map_err(|e| mugshot_kit::Error::io(&cohort, e))?);
    println!("generated images: {}", report.generated_images);
    if let Some(reid) = &report.reid {
        for arm in reid["arms"].as_array().into_iter().flatten() {
            println!(
                "{:<22} identification {:.3}, mean genuine similarity {:.3}",
                arm["arm"].as_str().unwrap_or("?"),
                arm["distance"]["identification_accuracy"].as_f64().unwrap_or(f64::NAN),
                arm["similarity"]["mean_genuine_score"].as_f64().unwrap_or(f64::NAN),
            );
        }
    }
    println!("\nreports in {}", pipeline.out_dir().display());
    Ok(())
}
