//! Records backend answers as fixtures, then answers the same calls from
//! the fixture directory alone, with every call in a journal.
//!
//!     cargo run --example fixture_gateway

use std::sync::Arc;

use mugshot_kit::attribute::Provenance;
use mugshot_kit::demo::{demo_subjects, render_face, SyntheticTransport, Variant};
use mugshot_kit::gateway::{read_journal, BackendEndpoint, BackendKind, Journal, ModelGateway, RecordingTransport};
use mugshot_kit::imageio;
use mugshot_kit::prompt::build_vlm_questions;

fn main() -> mugshot_kit::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| mugshot_kit::Error::io("<tempdir>", e))?;
    let subjects = demo_subjects();
    let image = dir.path().join("probe.png");
    let png = imageio::encode_rgb_png(&render_face(&subjects[1], Variant::Reference, "example"));
    std::fs::write(&image, &png).map_err(|e| mugshot_kit::Error::io(&image, e))?;

    let backend = Arc::new(SyntheticTransport::new(subjects));
    backend.register(&png, 1, 0, Variant::Reference)?;
    let fixtures = dir.path().join("fixtures");
    let questions = build_vlm_questions();

    let recorder = Arc::new(RecordingTransport::new(backend, &fixtures));
    let live = ModelGateway::new(dir.path().join("live"))
        .with_transport(BackendEndpoint::fixtures(BackendKind::Describe, &fixtures), recorder.clone())?
        .with_transport(BackendEndpoint::fixtures(BackendKind::Embed, &fixtures), recorder)?;
    let a = live.describe("S02", &image, Provenance::Original, &questions)?;
    let e1 = live.embed("S02", &image, "reference")?;

    let journal = dir.path().join("replayed/journal.jsonl");
    let offline = ModelGateway::new(dir.path().join("replayed"))
        .with_endpoint(BackendEndpoint::fixtures(BackendKind::Describe, &fixtures))?
        .with_endpoint(BackendEndpoint::fixtures(BackendKind::Embed, &fixtures))?
        .with_journal(Journal::open(&journal)?);
    let b = offline.describe("S02", &image, Provenance::Original, &questions)?;
    let e2 = offline.embed("S02", &image, "reference")?;

    for v in b.attributes.iter() {
        println!("{:<12} {:?}", v.category.key(), v.canonical_text());
    }
    println!("descriptions equal: {}", a.attributes == b.attributes);
    println!("embeddings equal: {} (d = {})", e1.vector == e2.vector, e2.vector.len());
    for r in read_journal(&journal)? {
        println!("journal #{} {} {} attempts={} ok={}", r.seq, r.kind, &r.request_digest[..12], r.attempts, r.ok);
    }
    Ok(())
}
