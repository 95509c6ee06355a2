//! Re-identification scoring over face embeddings.
//!
//! Reference and probe embeddings are grouped by subject. Each confusion
//! matrix cell aggregates the pairwise score (Euclidean distance or cosine
//! similarity) over every reference-probe pair of the two subjects. From a
//! square matrix we derive identification accuracy (is the best column of
//! each row the diagonal one?) and verification rates at a threshold.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of thresholds in a sweep report.
pub const SWEEP_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub subject_id: String,
    pub image: String,
    #[serde(default)]
    pub provenance: String,
    pub vector: Vec<f64>,
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::Usage(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(())
}

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Raw cosine in `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Usage("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity reported on a `[0, 1]` scale: negatives clamp to 0.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(cosine(u, v)?.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Semantics {
    Distance,
    Similarity,
}

impl Semantics {
    pub fn score(self, u: &[f64], v: &[f64]) -> Result<f64> {
        match self {
            Semantics::Distance => euclidean_distance(u, v),
            Semantics::Similarity => cosine_similarity(u, v),
        }
    }

    /// Whether `a` is a better match than `b`.
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Semantics::Distance => a < b,
            Semantics::Similarity => a > b,
        }
    }

    fn matches(self, cell: f64, threshold: f64) -> bool {
        match self {
            Semantics::Distance => cell <= threshold,
            Semantics::Similarity => cell >= threshold,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Semantics::Distance => "distance",
            Semantics::Similarity => "similarity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
    Max,
}

impl Aggregation {
    fn apply(self, scores: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            Aggregation::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Embedding vectors per subject, ordered by subject id.
pub type Gallery = BTreeMap<String, Vec<Vec<f64>>>;

pub fn group_by_subject(embeddings: &[Embedding]) -> Gallery {
    let mut g = Gallery::new();
    for e in embeddings {
        g.entry(e.subject_id.clone()).or_default().push(e.vector.clone());
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub cells: Vec<Vec<f64>>,
    pub semantics: Semantics,
    pub aggregation: Aggregation,
}

impl ConfusionMatrix {
    /// Checks shape, finiteness and the value range of the semantics.
    pub fn new(
        row_ids: Vec<String>,
        col_ids: Vec<String>,
        cells: Vec<Vec<f64>>,
        semantics: Semantics,
        aggregation: Aggregation,
    ) -> Result<Self> {
        if cells.len() != row_ids.len() || cells.iter().any(|r| r.len() != col_ids.len()) {
            return Err(Error::Evaluation("cells do not match the id lists".into()));
        }
        for c in cells.iter().flatten() {
            let ok = c.is_finite()
                && match semantics {
                    Semantics::Distance => *c >= 0.0,
                    Semantics::Similarity => (0.0..=1.0).contains(c),
                };
            if !ok {
                return Err(Error::Evaluation(format!("cell value {c} invalid for {}", semantics.key())));
            }
        }
        Ok(ConfusionMatrix {
            row_ids,
            col_ids,
            cells,
            semantics,
            aggregation,
        })
    }

    pub fn is_square(&self) -> bool {
        self.row_ids == self.col_ids
    }

    fn require_square(&self) -> Result<()> {
        if self.is_square() {
            Ok(())
        } else {
            Err(Error::Usage("operation needs a square matrix with matching row and column ids".into()))
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row][col]
    }

    pub fn transpose(&self) -> ConfusionMatrix {
        let cells = (0..self.col_ids.len())
            .map(|j| self.cells.iter().map(|row| row[j]).collect())
            .collect();
        ConfusionMatrix {
            row_ids: self.col_ids.clone(),
            col_ids: self.row_ids.clone(),
            cells,
            semantics: self.semantics,
            aggregation: self.aggregation,
        }
    }

    /// Header row of column ids, then one row per reference subject.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::from("subject")];
        header.extend(self.col_ids.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.row_ids.iter().zip(&self.cells) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|c| format!("{c:.6}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Cell `(i, j)` aggregates scores of every (reference of row subject `i`,
/// probe of column subject `j`) pair. Rows and columns follow subject id
/// order.
pub fn build_confusion_matrix(
    refs: &Gallery,
    probes: &Gallery,
    semantics: Semantics,
    aggregation: Aggregation,
) -> Result<ConfusionMatrix> {
    let mut dim = None;
    for (id, group) in refs.iter().chain(probes) {
        if group.is_empty() {
            return Err(Error::Evaluation(format!("subject {id} has no embeddings")));
        }
        for v in group {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Evaluation(format!("subject {id}: invalid embedding vector")));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Evaluation(format!(
                        "subject {id}: dimension {} differs from {d}",
                        v.len()
                    )))
                }
                _ => {}
            }
        }
    }
    if refs.is_empty() || probes.is_empty() {
        return Err(Error::Evaluation("no subjects to compare".into()));
    }
    let row_ids: Vec<String> = refs.keys().cloned().collect();
    let col_ids: Vec<String> = probes.keys().cloned().collect();
    let cells = refs
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|ref_group| {
            probes
                .values()
                .map(|probe_group| {
                    let scores = ref_group
                        .iter()
                        .flat_map(|r| probe_group.iter().map(move |p| semantics.score(r, p)))
                        .collect::<Result<Vec<f64>>>()?;
                    Ok(aggregation.apply(&scores))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ConfusionMatrix::new(row_ids, col_ids, cells, semantics, aggregation)
}

/// Fraction of rows whose strictly best cell is the diagonal one. A row
/// where another cell ties the best value counts as a miss.
pub fn identification_accuracy(matrix: &ConfusionMatrix) -> Result<f64> {
    matrix.require_square()?;
    let n = matrix.row_ids.len();
    if n == 0 {
        return Err(Error::Usage("empty matrix".into()));
    }
    let hits = matrix
        .cells
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let diag = row[*i];
            row.iter()
                .enumerate()
                .all(|(j, c)| j == *i || matrix.semantics.better(diag, *c))
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean of the diagonal cells: the average genuine-pair score.
pub fn mean_genuine_score(matrix: &ConfusionMatrix) -> Result<f64> {
    matrix.require_square()?;
    let n = matrix.row_ids.len();
    if n == 0 {
        return Err(Error::Usage("empty matrix".into()));
    }
    Ok((0..n).map(|i| matrix.cells[i][i]).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerificationMetrics {
    pub threshold: f64,
    pub accuracy: f64,
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

/// Diagonal cells are genuine pairs, off-diagonal cells impostor pairs. A
/// pair matches when its distance is at most, or its similarity at least,
/// the threshold. Rates with an empty denominator are 0.
pub fn verification_metrics(matrix: &ConfusionMatrix, threshold: f64) -> Result<VerificationMetrics> {
    matrix.require_square()?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (i, row) in matrix.cells.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            let matched = matrix.semantics.matches(*c, threshold);
            match (i == j, matched) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let total = tp + fp + tn + fn_;
    Ok(VerificationMetrics {
        threshold,
        accuracy: ratio(tp + tn, total),
        false_positive_rate: ratio(fp, fp + tn),
        false_negative_rate: ratio(fn_, fn_ + tp),
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
    })
}

/// Verification metrics at [`SWEEP_STEPS`] thresholds evenly spaced from the
/// smallest to the largest cell.
pub fn threshold_sweep(matrix: &ConfusionMatrix) -> Result<Vec<VerificationMetrics>> {
    matrix.require_square()?;
    let all = matrix.cells.iter().flatten().copied();
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    (0..SWEEP_STEPS)
        .map(|k| {
            let t = if k + 1 == SWEEP_STEPS {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (SWEEP_STEPS - 1) as f64
            };
            verification_metrics(matrix, t)
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(sweep: &[VerificationMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "accuracy", "fpr", "fnr", "tp", "fp", "tn", "fn"])?;
    for m in sweep {
        w.write_record([
            format!("{:.6}", m.threshold),
            format!("{:.6}", m.accuracy),
            format!("{:.6}", m.false_positive_rate),
            format!("{:.6}", m.false_negative_rate),
            m.true_positives.to_string(),
            m.false_positives.to_string(),
            m.true_negatives.to_string(),
            m.false_negatives.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads one embedding object per non-empty line.
pub fn read_embeddings_jsonl<R: BufRead>(input: R) -> Result<Vec<Embedding>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Embedding = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            index: n,
            field: "<line>".into(),
            reason: e.to_string(),
        })?;
        if e.vector.is_empty() || e.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Ingestion {
                index: n,
                field: "vector".into(),
                reason: "vector must be non-empty and finite".into(),
            });
        }
        out.push(e);
    }
    Ok(out)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings_jsonl(std::io::BufReader::new(f))
}

pub fn write_embeddings_jsonl<W: Write>(embeddings: &[Embedding], mut out: W) -> Result<()> {
    for e in embeddings {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(cells: Vec<Vec<f64>>, semantics: Semantics) -> ConfusionMatrix {
        let ids: Vec<String> = (0..cells.len()).map(|i| format!("s{i}")).collect();
        ConfusionMatrix::new(ids.clone(), ids, cells, semantics, Aggregation::Mean).unwrap()
    }

    #[test]
    fn euclid_examples() {
        assert_eq!(euclidean_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(matches!(euclidean_distance(&[1.0], &[1.0, 2.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Usage(_))));
    }

    fn gallery(items: &[(&str, &[&[f64]])]) -> Gallery {
        items
            .iter()
            .map(|(id, vs)| (id.to_string(), vs.iter().map(|v| v.to_vec()).collect()))
            .collect()
    }

    #[test]
    fn self_matrix_has_zero_diagonal() {
        let g = gallery(&[("b", &[&[0.0, 1.0]]), ("a", &[&[1.0, 0.0]]), ("c", &[&[1.0, 1.0]])]);
        let m = build_confusion_matrix(&g, &g, Semantics::Distance, Aggregation::Mean).unwrap();
        assert_eq!(m.row_ids, vec!["a", "b", "c"]);
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(m.get(i, j), 0.0);
                } else {
                    assert!(m.get(i, j) > 0.0);
                }
            }
        }
        assert_eq!(m, m.transpose());
        let s = build_confusion_matrix(&g, &g, Semantics::Similarity, Aggregation::Mean).unwrap();
        assert!((0..3).all(|i| (s.get(i, i) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cells_average_pairs() {
        let refs = gallery(&[("a", &[&[0.0, 0.0]]), ("b", &[&[10.0, 0.0]])]);
        let probes = gallery(&[("a", &[&[3.0, 4.0], &[0.0, 1.0]]), ("b", &[&[10.0, 2.0], &[6.0, 3.0]])]);
        let m = build_confusion_matrix(&refs, &probes, Semantics::Distance, Aggregation::Mean).unwrap();
        assert_eq!(m.get(0, 0), 3.0); // (5 + 1) / 2
        assert_eq!(m.get(1, 1), 3.5); // (2 + 5) / 2
        let min = build_confusion_matrix(&refs, &probes, Semantics::Distance, Aggregation::Min).unwrap();
        assert_eq!(min.get(0, 0), 1.0);
        let max = build_confusion_matrix(&refs, &probes, Semantics::Distance, Aggregation::Max).unwrap();
        assert_eq!(max.get(1, 1), 5.0);
    }

    #[test]
    fn empty_group_names_subject() {
        let mut g = gallery(&[("a", &[&[0.0]])]);
        g.insert("ghost".into(), vec![]);
        let err = build_confusion_matrix(&g, &g, Semantics::Distance, Aggregation::Mean).unwrap_err();
        assert!(err.to_string().contains("ghost"));
        let bad = gallery(&[("a", &[&[0.0]]), ("b", &[&[0.0, 1.0]])]);
        assert!(build_confusion_matrix(&bad, &bad, Semantics::Distance, Aggregation::Mean).is_err());
    }

    #[test]
    fn identification_examples() {
        let m = square(vec![vec![0.0, 2.0], vec![3.0, 0.0]], Semantics::Distance);
        assert_eq!(identification_accuracy(&m).unwrap(), 1.0);
        let m = square(
            vec![vec![0.1, 0.5, 0.9], vec![0.2, 0.4, 0.8], vec![0.7, 0.6, 0.3]],
            Semantics::Distance,
        );
        assert!((identification_accuracy(&m).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let m = square(vec![vec![0.5, 0.5], vec![0.9, 0.1]], Semantics::Distance);
        assert_eq!(identification_accuracy(&m).unwrap(), 0.5);
        let s = square(vec![vec![0.9, 0.2], vec![0.95, 0.8]], Semantics::Similarity);
        assert_eq!(identification_accuracy(&s).unwrap(), 0.5);
    }

    #[test]
    fn non_square_rejected() {
        let m = ConfusionMatrix::new(
            vec!["a".into()],
            vec!["a".into(), "b".into()],
            vec![vec![0.0, 1.0]],
            Semantics::Distance,
            Aggregation::Mean,
        )
        .unwrap();
        assert!(matches!(identification_accuracy(&m), Err(Error::Usage(_))));
        assert!(matches!(verification_metrics(&m, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn verification_examples() {
        let m = square(vec![vec![0.0, 10.0], vec![10.0, 0.0]], Semantics::Distance);
        let v = verification_metrics(&m, 1.0).unwrap();
        assert_eq!((v.false_positive_rate, v.false_negative_rate, v.accuracy), (0.0, 0.0, 1.0));

        let m = square(vec![vec![0.7; 3]; 3], Semantics::Distance);
        let v = verification_metrics(&m, 0.7).unwrap();
        assert_eq!((v.false_negative_rate, v.false_positive_rate), (0.0, 1.0));

        let m = square(vec![vec![0.2, 0.9], vec![0.3, 0.25]], Semantics::Distance);
        let v = verification_metrics(&m, 0.3).unwrap();
        assert_eq!((v.true_positives, v.false_positives, v.true_negatives, v.false_negatives), (2, 1, 1, 0));
        assert_eq!(v.false_positive_rate, 0.5);
    }

    #[test]
    fn sweep_spans_cells() {
        let m = square(vec![vec![0.2, 0.9], vec![0.3, 0.25]], Semantics::Distance);
        let s = threshold_sweep(&m).unwrap();
        assert_eq!(s.len(), SWEEP_STEPS);
        assert_eq!(s[0].threshold, 0.2);
        assert_eq!(s[SWEEP_STEPS - 1].threshold, 0.9);
        assert_eq!(s[SWEEP_STEPS - 1].false_negative_rate, 0.0);
    }

    #[test]
    fn matrix_validation() {
        let ids = vec!["a".to_string()];
        assert!(ConfusionMatrix::new(ids.clone(), ids.clone(), vec![vec![-1.0]], Semantics::Distance, Aggregation::Mean).is_err());
        assert!(ConfusionMatrix::new(ids.clone(), ids.clone(), vec![vec![1.5]], Semantics::Similarity, Aggregation::Mean).is_err());
        assert!(ConfusionMatrix::new(ids.clone(), ids, vec![vec![f64::NAN]], Semantics::Distance, Aggregation::Mean).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let e = vec![Embedding {
            subject_id: "a".into(),
            image: "x.png".into(),
            provenance: "original".into(),
            vector: vec![0.5, -1.0],
        }];
        let mut buf = Vec::new();
        write_embeddings_jsonl(&e, &mut buf).unwrap();
        assert_eq!(read_embeddings_jsonl(&buf[..]).unwrap(), e);
        let bad = br#"{"subject_id":"a","image":"x","vector":[]}"#;
        assert!(read_embeddings_jsonl(&bad[..]).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = square(vec![vec![0.0, 1.5], vec![1.5, 0.0]], Semantics::Distance);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "subject,s0,s1\ns0,0.000000,1.500000\ns1,1.500000,0.000000\n"
        );
    }

    proptest! {
        #[test]
        fn euclid_metric_axioms(
            u in prop::collection::vec(-10.0f64..10.0, 4),
            v in prop::collection::vec(-10.0f64..10.0, 4),
            w in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let d = |a: &[f64], b: &[f64]| euclidean_distance(a, b).unwrap();
            prop_assert!(d(&u, &v) >= 0.0);
            prop_assert_eq!(d(&u, &v), d(&v, &u));
            prop_assert!(d(&u, &w) <= d(&u, &v) + d(&v, &w) + 1e-12);
        }

        #[test]
        fn cosine_scale_invariant(u in prop::collection::vec(0.1f64..10.0, 5), v in prop::collection::vec(-10.0f64..10.0, 5), k in 0.01f64..100.0) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
            let a = cosine_similarity(&u, &v).unwrap();
            let b = cosine_similarity(&scaled, &v).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn strict_diagonal_optimum_identifies_all(n in 1usize..6, off in prop::collection::vec(0.01f64..5.0, 36)) {
            let cells: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { off[i * 6 + j] }).collect())
                .collect();
            prop_assert_eq!(identification_accuracy(&square(cells, Semantics::Distance)).unwrap(), 1.0);
        }
    }
}
