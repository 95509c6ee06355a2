//! Builds distance and similarity confusion matrices from toy embeddings
//! and prints identification and verification metrics.
//!
//!     cargo run --example reid_matrix

use mugshot_kit::reid::{
    build_confusion_matrix, group_by_subject, identification_accuracy, mean_genuine_score, threshold_sweep,
    verification_metrics, Aggregation, Embedding, Semantics,
};

fn emb(subject: &str, image: &str, vector: [f64; 3]) -> Embedding {
    Embedding {
        subject_id: subject.into(),
        image: image.into(),
        provenance: String::new(),
        vector: vector.to_vec(),
    }
}

fn main() -> mugshot_kit::Result<()> {
    let refs = group_by_subject(&[
        emb("alice", "a0", [1.0, 0.0, 0.0]),
        emb("alice", "a1", [0.9, 0.1, 0.0]),
        emb("bob", "b0", [0.0, 1.0, 0.0]),
        emb("carol", "c0", [0.0, 0.0, 1.0]),
    ]);
    // carol's probe looks more like bob
    let probes = group_by_subject(&[
        emb("alice", "ga", [0.95, 0.05, 0.1]),
        emb("bob", "gb", [0.1, 0.9, 0.1]),
        emb("carol", "gc", [0.0, 0.8, 0.6]),
    ]);

    for semantics in [Semantics::Distance, Semantics::Similarity] {
        let m = build_confusion_matrix(&refs, &probes, semantics, Aggregation::Mean)?;
        let mut csv = Vec::new();
        m.write_csv(&mut csv).expect("in-memory write");
        println!("{} matrix:\n{}", semantics.key(), String::from_utf8_lossy(&csv));
        println!("identification accuracy {:.3}", identification_accuracy(&m)?);
        println!("mean genuine score      {:.3}", mean_genuine_score(&m)?);
        let t = if semantics == Semantics::Distance { 0.5 } else { 0.8 };
        let v = verification_metrics(&m, t)?;
        println!("at {t}: FPR {:.3}, FNR {:.3}", v.false_positive_rate, v.false_negative_rate);
        let sweep = threshold_sweep(&m)?;
        let best = sweep
            .iter()
            .min_by(|a, b| {
                (a.false_positive_rate + a.false_negative_rate).total_cmp(&(b.false_positive_rate + b.false_negative_rate))
            })
            .expect("non-empty sweep");
        println!("best swept threshold {:.3} (accuracy {:.3})\n", best.threshold, best.accuracy);
    }
    Ok(())
}
