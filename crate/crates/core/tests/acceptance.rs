//! Acceptance gate. Prints one PASS/FAIL line per primary criterion and
//! exits non-zero when any criterion fails.
//!
//!     cargo test -p mugshot-kit --test acceptance
//!
//! Set `MUGSHOT_BLESS=1` to rewrite the prompt golden files.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mugshot_kit::attribute::{normalize_value, parse_subject_records, Category, Provenance, SubjectRecord, SynonymTable};
use mugshot_kit::demo::build_demo_world;
use mugshot_kit::metric::{
    category_distance, numeric_distance, report_from_distances, score_cohort, string_distance, DistanceReport,
    EquivalenceTable, NumericThresholds,
};
use mugshot_kit::prompt::{build_aging_prompt, build_generation_prompt, AgingDirection, FeatureRules, DEFAULT_EXCLUDE_TERMS};
use mugshot_kit::reid::{
    build_confusion_matrix, cosine_similarity, euclidean_distance, identification_accuracy, verification_metrics,
    Aggregation, ConfusionMatrix, Gallery, Semantics,
};
use mugshot_kit::tv::{denoise, denoise_traced, total_variation, DenoiseParams, GrayImage};

const METRIC_TOL: f64 = 1e-12;
const METRIC_BUDGET: Duration = Duration::from_secs(1);
const AGGREGATION_TOL: f64 = 1e-9;
const TV_LAMBDA_ZERO: f64 = 1e-9;
const TV_LAMBDA_ZERO_TOL: f64 = 1e-4;
const TV_ENERGY_TOL: f64 = 1e-9;
const TV_BUDGET: Duration = Duration::from_secs(10);
const REID_TOL: f64 = 1e-9;
const PROMPT_RECORDS: usize = 1000;
const SEED: u64 = 20_240_917;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn main() {
    let criteria: [(&str, fn() -> Check); 7] = [
        ("semantic metric suite", semantic_metric),
        ("aggregation reproduction", aggregation),
        ("TV denoiser", tv_denoiser),
        ("re-identification suite", reidentification),
        ("degradation ordering", degradation_ordering),
        ("prompt rules", prompt_rules),
        ("end-to-end determinism", end_to_end),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS  {name:<26} ({secs:.2}s)"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name:<26} ({secs:.2}s): {e}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- metric

fn value(cat: Category, raw: &str) -> mugshot_kit::attribute::AttributeValue {
    normalize_value(cat, raw, &SynonymTable::default())
}

/// Independent piecewise-linear reference.
fn bridge(delta: f64, t: f64) -> f64 {
    let h = t / 4.0;
    ((delta - h) / (t - h)).clamp(0.0, 1.0)
}

fn semantic_metric() -> Check {
    let start = Instant::now();
    let e = |r: mugshot_kit::Result<f64>| r.map_err(|e| e.to_string());

    ensure!(e(numeric_distance(30.0, 30.0, 10.0))? == 0.0, "(30,30,10) != 0");
    let d = e(numeric_distance(30.0, 35.0, 10.0))?;
    ensure!(d == (5.0 - 2.5) / (10.0 - 2.5), "(30,35,10) = {d}");
    ensure!(e(numeric_distance(30.0, 45.0, 10.0))? == 1.0, "(30,45,10) != 1");
    ensure!(numeric_distance(1.0, 2.0, 0.0).is_err(), "t = 0 accepted");

    let table = EquivalenceTable::default();
    for (cat, a, b, want) in [
        (Category::EthnicGroup, "white", "hispanic", 0.5),
        (Category::EthnicGroup, "white", "arab", 1.0),
        (Category::HairColor, "brown", "brown", 0.0),
        (Category::IrisColor, "blue", "green", 0.5),
    ] {
        let got = string_distance(cat, a, b, &table);
        ensure!(got == want, "string_distance({cat:?}, {a}, {b}) = {got}, want {want}");
    }
    // non-transitivity witness: the 0.5 relation is not closed
    let d_wh = string_distance(Category::EthnicGroup, "white", "hispanic", &table);
    let d_ha = string_distance(Category::EthnicGroup, "hispanic", "arab", &table);
    let d_wa = string_distance(Category::EthnicGroup, "white", "arab", &table);
    ensure!((d_wh, d_ha, d_wa) == (0.5, 0.5, 1.0), "witness gave {d_wh}/{d_ha}/{d_wa}");

    let th = NumericThresholds::default();
    let cd = |cat, t: &str, p: &str| category_distance(&value(cat, t), &value(cat, p), &th, &table);
    ensure!(cd(Category::Age, "40", "unknown").map_err(|e| e.to_string())? == Some(1.0), "unknown prediction");
    ensure!(cd(Category::Age, "unknown", "40").map_err(|e| e.to_string())?.is_none(), "unknown truth");
    ensure!(cd(Category::Gender, "male", "male").map_err(|e| e.to_string())? == Some(0.0), "gender match");

    let perfect = report(Provenance::Original, [Some(0.0); 7])?;
    ensure!(perfect.accuracy == 100.0, "perfect accuracy {}", perfect.accuracy);
    let r = report(Provenance::Original, [0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0].map(Some))?;
    ensure!(close(r.mean_distance, 1.5 / 7.0, METRIC_TOL), "mean {}", r.mean_distance);
    ensure!(close(r.accuracy, 100.0 - 150.0 / 7.0, METRIC_TOL), "accuracy {}", r.accuracy);

    let acc = |p, d: f64| report(p, [Some(d); 7]);
    let two = score_cohort(&[acc(Provenance::Original, 0.2)?, acc(Provenance::Original, 0.1)?]).map_err(|e| e.to_string())?;
    ensure!(close(two.rows[0].mean_accuracy, 85.0, AGGREGATION_TOL), "80/90 mean");
    let grouped = score_cohort(&[
        acc(Provenance::Original, 0.0)?,
        acc(Provenance::Maxim, 0.5)?,
        acc(Provenance::Maxim, 0.3)?,
    ])
    .map_err(|e| e.to_string())?;
    let get = |p| grouped.get(p).map(|r| r.mean_accuracy).unwrap_or(f64::NAN);
    ensure!(close(get(Provenance::Original), 100.0, AGGREGATION_TOL), "grouped Original");
    ensure!(close(get(Provenance::Maxim), 60.0, AGGREGATION_TOL), "grouped MAXIM");

    // brute-force bridge grid
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for _ in 0..20 {
        let t: f64 = rng.random_range(0.5..50.0);
        let h = t / 4.0;
        let a: f64 = rng.random_range(0.0..200.0);
        for (delta, want) in [(0.0, 0.0), (h / 2.0, 0.0), (h, 0.0), ((h + t) / 2.0, 0.5), (t, 1.0), (2.0 * t, 1.0)] {
            for b in [a + delta, a - delta] {
                let got = e(numeric_distance(a, b, t))?;
                let sym = e(numeric_distance(b, a, t))?;
                ensure!(close(got, want, METRIC_TOL), "t={t} delta={delta}: {got} want {want}");
                ensure!(got == sym, "asymmetric at t={t} delta={delta}");
            }
        }
        let mut prev = 0.0;
        for k in 0..=1000 {
            let delta = 2.5 * t * k as f64 / 1000.0;
            let got = e(numeric_distance(a, a + delta, t))?;
            ensure!(close(got, bridge((a + delta - a).abs(), t), METRIC_TOL), "grid t={t} delta={delta}");
            ensure!(got >= prev, "decreasing at t={t} delta={delta}");
            prev = got;
        }
    }
    let took = start.elapsed();
    ensure!(took < METRIC_BUDGET, "took {took:?}");
    Ok(())
}

// ---------------------------------------------------------- aggregation

fn report(p: Provenance, d: [Option<f64>; 7]) -> Result<DistanceReport, String> {
    let distances: BTreeMap<Category, Option<f64>> = Category::ALL.into_iter().zip(d).collect();
    report_from_distances("S".into(), p, PathBuf::from("x.png"), distances).map_err(|e| e.to_string())
}

fn aggregation() -> Check {
    let n = None;
    let fixture = [
        (Provenance::TvDenoise, [Some(0.5); 7]),
        (Provenance::Original, [0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 1.0].map(Some)),
        (Provenance::Srgan, [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0].map(Some)),
        (Provenance::Maxim, [Some(0.0), Some(1.0), Some(0.0), Some(0.0), Some(0.5), n, Some(0.25)]),
        (Provenance::Original, [Some(0.0); 7]),
        (Provenance::TvDenoise, [n, n, n, n, n, n, Some(0.0)]),
        (Provenance::Srgan, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5].map(Some)),
    ];
    let reports = fixture.iter().map(|(p, d)| report(*p, *d)).collect::<Result<Vec<_>, _>>()?;
    let table = score_cohort(&reports).map_err(|e| e.to_string())?;

    // by hand: Original (100·(1−1.5/7) + 100)/2, MAXIM 100·(1−1.75/6),
    // SRGAN (100·(1−2/7) + 100·(1−0.5/7))/2, TVD (50 + 100)/2
    let expected = [
        ("Original", 89.285_714_285_714_29, 2),
        ("MAXIM", 70.833_333_333_333_33, 1),
        ("SRGAN", 82.142_857_142_857_14, 2),
        ("TVD", 75.0, 2),
    ];
    ensure!(table.rows.len() == expected.len(), "{} rows", table.rows.len());
    for (row, (label, acc, count)) in table.rows.iter().zip(expected) {
        ensure!(row.label == label, "row {} where {label} expected", row.label);
        ensure!(close(row.mean_accuracy, acc, AGGREGATION_TOL), "{label}: {} want {acc}", row.mean_accuracy);
        ensure!(row.count == count, "{label}: count {}", row.count);
    }
    let mut csv = Vec::new();
    table.write_csv(&mut csv).map_err(|e| e.to_string())?;
    let want = "input_pictures,accuracy,count\nOriginal,89.286,2\nMAXIM,70.833,1\nSRGAN,82.143,2\nTVD,75.000,2\n";
    ensure!(String::from_utf8_lossy(&csv) == want, "csv layout:\n{}", String::from_utf8_lossy(&csv));
    Ok(())
}

// ------------------------------------------------------------------- TV

fn tv_fixtures() -> Vec<(&'static str, GrayImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let n = 64;
    let uniform = |x: f64, amp: f64, rng: &mut ChaCha8Rng| (x + rng.random_range(-amp..amp)).clamp(0.0, 1.0);
    let flat = GrayImage::from_fn(n, n, |_, _| uniform(0.5, 0.2, &mut rng)).unwrap();
    let step = GrayImage::from_fn(n, n, |x, _| {
        let base = if x < n / 2 { 0.2 } else { 0.8 };
        let g: f64 = (0..4).map(|_| rng.random_range(-0.1..0.1)).sum();
        (base + g).clamp(0.0, 1.0)
    })
    .unwrap();
    let salt = GrayImage::from_fn(n, n, |x, y| {
        let r: f64 = rng.random();
        if r < 0.05 {
            0.0
        } else if r < 0.10 {
            1.0
        } else {
            (x + y) as f64 / (2 * n - 2) as f64
        }
    })
    .unwrap();
    vec![("uniform noise", flat), ("noisy step edge", step), ("salt and pepper ramp", salt)]
}

/// Independent energy reference: 0.5·Σ(y−x)² + λ·Σ sqrt(dx² + ε²) over
/// forward differences along both axes.
fn energy_oracle(y: &GrayImage, x: &GrayImage, p: &DenoiseParams) -> f64 {
    let (w, h) = (y.width(), y.height());
    let mut fid = 0.0;
    let mut tv = 0.0;
    for j in 0..h {
        for i in 0..w {
            let d = y.get(i, j) - x.get(i, j);
            fid += d * d;
            if i + 1 < w {
                let dx = y.get(i + 1, j) - y.get(i, j);
                tv += (dx * dx + p.epsilon * p.epsilon).sqrt();
            }
            if j + 1 < h {
                let dy = y.get(i, j + 1) - y.get(i, j);
                tv += (dy * dy + p.epsilon * p.epsilon).sqrt();
            }
        }
    }
    0.5 * fid + p.lambda * tv
}

fn tv_denoiser() -> Check {
    let start = Instant::now();
    let params = DenoiseParams::default();
    for (name, img) in tv_fixtures() {
        let trace = denoise_traced(&img, &params).map_err(|e| e.to_string())?;
        ensure!(trace.energy.len() == params.iterations + 1, "{name}: {} energies", trace.energy.len());
        if let Some(k) = trace.energy.windows(2).position(|w| w[1] > w[0]) {
            return Err(format!("{name}: energy rose at iteration {}", k + 1));
        }
        let last = *trace.energy.last().unwrap();
        let oracle = energy_oracle(&trace.image, &img, &params);
        ensure!(close(last, oracle, TV_ENERGY_TOL * oracle.max(1.0)), "{name}: energy {last} vs oracle {oracle}");
        let (v_in, v_out) = (total_variation(&img), total_variation(&trace.image));
        ensure!(v_out < v_in, "{name}: V {v_in} -> {v_out}");
        ensure!(trace.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)), "{name}: left [0,1]");
    }
    for c in [0.0, 0.37, 1.0] {
        let flat = GrayImage::filled(64, 64, c).unwrap();
        let out = denoise(&flat, &params).map_err(|e| e.to_string())?;
        ensure!(out.pixels() == flat.pixels(), "constant {c} moved");
    }
    let tiny = DenoiseParams {
        lambda: TV_LAMBDA_ZERO,
        ..params
    };
    for (name, img) in tv_fixtures() {
        let out = denoise(&img, &tiny).map_err(|e| e.to_string())?;
        let dev = out
            .pixels()
            .iter()
            .zip(img.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure!(dev < TV_LAMBDA_ZERO_TOL, "{name}: lambda->0 deviation {dev}");
    }
    let took = start.elapsed();
    ensure!(took < TV_BUDGET, "took {took:?}");
    Ok(())
}

// ----------------------------------------------------------------- reid

fn naive_euclid(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..u.len() {
        s += (u[i] - v[i]) * (u[i] - v[i]);
    }
    s.sqrt()
}

fn naive_cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for i in 0..u.len() {
        dot += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    (dot / (uu.sqrt() * vv.sqrt())).max(0.0)
}

fn matrix(cells: Vec<Vec<f64>>, semantics: Semantics) -> Result<ConfusionMatrix, String> {
    let ids: Vec<String> = (0..cells.len()).map(|i| format!("s{i}")).collect();
    ConfusionMatrix::new(ids.clone(), ids, cells, semantics, Aggregation::Mean).map_err(|e| e.to_string())
}

fn reidentification() -> Check {
    let er = |r: mugshot_kit::Result<f64>| r.map_err(|e| e.to_string());
    ensure!(er(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]))? == 5.0, "3-4-5");
    ensure!(er(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]))? == 0.0, "orthogonal");
    ensure!(close(er(cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]))?, 1.0, REID_TOL), "scale invariance");
    ensure!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err(), "dimension mismatch accepted");
    ensure!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).is_err(), "zero vector accepted");

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut vec_of = |d: usize| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    for d in (1..=64).step_by(7) {
        for _ in 0..10 {
            let (u, v) = (vec_of(d), vec_of(d));
            let (e, c) = (er(euclidean_distance(&u, &v))?, er(cosine_similarity(&u, &v))?);
            ensure!(close(e, naive_euclid(&u, &v), REID_TOL), "euclid d={d}");
            ensure!(close(c, naive_cosine(&u, &v), REID_TOL), "cosine d={d}");
        }
    }

    // 3 subjects × 2 images, brute-force pair enumeration
    let gallery: Gallery = ["a", "b", "c"].iter().map(|s| (s.to_string(), vec![vec_of(5), vec_of(5)])).collect();
    let probes: Gallery = ["a", "b", "c"].iter().map(|s| (s.to_string(), vec![vec_of(5), vec_of(5)])).collect();
    for sem in [Semantics::Distance, Semantics::Similarity] {
        let pair = |u: &[f64], v: &[f64]| match sem {
            Semantics::Distance => naive_euclid(u, v),
            Semantics::Similarity => naive_cosine(u, v),
        };
        for agg in [Aggregation::Mean, Aggregation::Min, Aggregation::Max] {
            let m = build_confusion_matrix(&gallery, &probes, sem, agg).map_err(|e| e.to_string())?;
            for (i, refs) in gallery.values().enumerate() {
                for (j, ps) in probes.values().enumerate() {
                    let scores: Vec<f64> = refs.iter().flat_map(|r| ps.iter().map(move |p| (r, p))).map(|(r, p)| pair(r, p)).collect();
                    let want = match agg {
                        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
                        Aggregation::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
                        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    };
                    ensure!(m.get(i, j) == want, "{sem:?}/{agg:?} cell ({i},{j}) {} vs {want}", m.get(i, j));
                }
            }
        }
    }

    // 2×2 worked fixture
    let m = matrix(vec![vec![0.2, 0.9], vec![0.3, 0.25]], Semantics::Distance)?;
    let v = verification_metrics(&m, 0.3).map_err(|e| e.to_string())?;
    ensure!(
        (v.true_positives, v.false_positives, v.true_negatives, v.false_negatives) == (2, 1, 1, 0),
        "counts {v:?}"
    );
    ensure!(v.false_positive_rate == 0.5, "FPR {}", v.false_positive_rate);
    let eq = matrix(vec![vec![0.3, 0.3], vec![0.3, 0.3]], Semantics::Distance)?;
    let v = verification_metrics(&eq, 0.3).map_err(|e| e.to_string())?;
    ensure!(v.false_negative_rate == 0.0 && v.false_positive_rate == 1.0, "boundary rule {v:?}");

    // tie rule
    let ident = |cells, sem| matrix(cells, sem).and_then(|m| identification_accuracy(&m).map_err(|e| e.to_string()));
    let one_off = vec![vec![0.0, 2.0, 3.0], vec![1.0, 0.5, 0.2], vec![4.0, 5.0, 0.0]];
    ensure!(ident(one_off, Semantics::Distance)? == 2.0 / 3.0, "one off-diagonal row");
    let tied = vec![vec![0.1, 0.1, 0.5], vec![0.4, 0.2, 0.6], vec![0.9, 0.3, 0.3]];
    ensure!(ident(tied, Semantics::Distance)? == 1.0 / 3.0, "ties must count as misses");
    let tied_sim = vec![vec![0.9, 0.9], vec![0.1, 0.8]];
    ensure!(ident(tied_sim, Semantics::Similarity)? == 0.5, "similarity tie");
    Ok(())
}

// ---------------------------------------------------------- degradation

fn degradation_ordering() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xd5);
    let (subjects, dim, per_subject) = (6, 32, 4);
    let mut gauss = |s: f64| (0..dim).map(|_| (0..6).map(|_| rng.random_range(-s..s)).sum::<f64>()).collect::<Vec<f64>>();
    let centroids: Vec<Vec<f64>> = (0..subjects).map(|_| gauss(1.0)).collect();
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let id = |i: usize| format!("P{i:02}");

    let mut refs = Gallery::new();
    let mut from_original = Gallery::new();
    let mut from_generated = Gallery::new();
    for (i, c) in centroids.iter().enumerate() {
        let next = &centroids[(i + 1) % subjects];
        refs.insert(id(i), (0..2).map(|_| add(c, &gauss(0.05))).collect());
        from_original.insert(id(i), (0..per_subject).map(|_| add(c, &gauss(0.1))).collect());
        // a second generation pass drifts toward a neighbour and adds noise
        let drifted: Vec<f64> = c.iter().zip(next).map(|(a, b)| a + 0.6 * (b - a)).collect();
        from_generated.insert(id(i), (0..per_subject).map(|_| add(&drifted, &gauss(0.3))).collect());
    }
    let spread = |g: &Gallery| -> f64 {
        let c = &centroids;
        g.values()
            .enumerate()
            .flat_map(|(i, vs)| vs.iter().map(move |v| naive_euclid(v, &c[i])))
            .sum::<f64>()
    };
    ensure!(spread(&from_generated) > spread(&from_original), "fixture precondition: perturbation ordering");

    for sem in [Semantics::Distance, Semantics::Similarity] {
        let acc = |probes: &Gallery| {
            build_confusion_matrix(&refs, probes, sem, Aggregation::Mean)
                .and_then(|m| identification_accuracy(&m))
                .map_err(|e| e.to_string())
        };
        let (orig, mixed) = (acc(&from_original)?, acc(&from_generated)?);
        ensure!(orig > mixed, "{sem:?}: original-only {orig} not above mixed {mixed}");
    }
    Ok(())
}

// --------------------------------------------------------------- prompts

fn golden_records() -> Vec<SubjectRecord> {
    let doc = json!([
        {"subject_id": "G1", "hair_length": "short",
         "attributes": {"gender": "male", "age": 35, "ethnic_group": "white", "hair_color": "black",
                        "iris_color": "brown", "height": "180 cm", "weight": "80 kg"}},
        {"subject_id": "G2",
         "attributes": {"gender": "female", "age": "28 years", "ethnic_group": "hispanic", "hair_color": "brown",
                        "iris_color": "blue", "height": "5'4\"", "weight": "130 lbs"}},
        {"subject_id": "G3", "hair_length": "short",
         "attributes": {"gender": "male", "age": 52, "ethnic_group": "arab", "hair_color": "brown with thick beard",
                        "iris_color": "unknown", "height": 175, "weight": 90}},
        {"subject_id": "G4", "hair_length": "long",
         "attributes": {"gender": "female", "age": "unknown", "ethnic_group": "african american",
                        "hair_color": "blonde", "iris_color": "green", "height": 168, "weight": 60}},
        {"subject_id": "G5",
         "hair_length": "very long layered shoulder length with side swept bangs covering the forehead and loose curls falling past the collarbone in uneven waves",
         "attributes": {"gender": "male", "age": 44,
                        "ethnic_group": "mixed southern european and north african descent with olive complexion and weathered sun tanned skin",
                        "hair_color": "dark brown with prominent gray streaks at the temples",
                        "iris_color": "hazel", "height": 183, "weight": 88}}
    ]);
    parse_subject_records(&doc.to_string(), &SynonymTable::default()).expect("golden records parse")
}

fn golden_text(record: &SubjectRecord, rules: &FeatureRules) -> Result<String, String> {
    let base = build_generation_prompt(record, rules).map_err(|e| e.to_string())?;
    let aged = build_aging_prompt(&base, 70.0, AgingDirection::Age).map_err(|e| e.to_string())?;
    let young = build_aging_prompt(&base, 12.0, AgingDirection::Deage).map_err(|e| e.to_string())?;
    Ok(format!(
        "positive: {}\nnegative: {}\naged 70 positive: {}\naged 70 negative: {}\ndeaged 12 positive: {}\ndeaged 12 negative: {}\n",
        base.render_positive(),
        base.render_negative(),
        aged.render_positive(),
        aged.render_negative(),
        young.render_positive(),
        young.render_negative(),
    ))
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Word-sequence search, independent of the library's matcher.
fn contains_term(text: &str, term: &str) -> bool {
    let (hay, needle) = (words(text), words(term));
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

fn prompt_rules() -> Check {
    let rules = FeatureRules::default();
    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/prompts");
    let bless = std::env::var_os("MUGSHOT_BLESS").is_some();
    for record in golden_records() {
        let text = golden_text(&record, &rules)?;
        let path = golden_dir.join(format!("{}.txt", record.subject_id));
        if bless {
            fs::create_dir_all(&golden_dir).map_err(|e| e.to_string())?;
            fs::write(&path, &text).map_err(|e| e.to_string())?;
        }
        let want = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure!(text == want, "{} differs from golden:\n{text}", record.subject_id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let genders = ["male", "female", "Male", "woman"];
    let ethnic = ["white", "hispanic", "arab", "african american", "white with blue eyes", "Indian and a thick BEARD"];
    let hair = ["black", "brown with mustache", "blonde plus facial hair", "light brown", "gray and visible ears", "red, nose ring"];
    let length = [None, Some("short"), Some("long with clothing collar"), Some("buzz cut and teeth showing"), Some("shoulder length")];
    let iris = ["blue", "brown", "green eyes", "unknown"];
    let mut records = Vec::with_capacity(PROMPT_RECORDS);
    for i in 0..PROMPT_RECORDS {
        let pick = |xs: &[&'static str], rng: &mut ChaCha8Rng| xs[rng.random_range(0..xs.len())];
        let age = if rng.random_bool(0.1) { json!("unknown") } else { json!(rng.random_range(16..85)) };
        let mut rec = json!({
            "subject_id": format!("R{i:04}"),
            "attributes": {
                "gender": pick(&genders, &mut rng), "age": age,
                "ethnic_group": pick(&ethnic, &mut rng), "hair_color": pick(&hair, &mut rng),
                "iris_color": pick(&iris, &mut rng),
                "height": rng.random_range(150..200), "weight": rng.random_range(45..120)
            }
        });
        if let Some(l) = length[rng.random_range(0..length.len())] {
            rec["hair_length"] = json!(l);
        }
        records.push(rec);
    }
    let records = parse_subject_records(&json!(records).to_string(), &SynonymTable::default()).map_err(|e| e.to_string())?;
    for record in &records {
        let base = build_generation_prompt(record, &rules).map_err(|e| e.to_string())?;
        let target: f64 = rng.random_range(1.0..95.0);
        let dir = if rng.random_bool(0.5) { AgingDirection::Age } else { AgingDirection::Deage };
        let aged = build_aging_prompt(&base, target, dir).map_err(|e| e.to_string())?;
        for spec in [&base, &aged] {
            let pos = spec.render_positive();
            ensure!(pos.len() <= spec.max_length, "{}: {} chars over budget", record.subject_id, pos.len());
            for term in DEFAULT_EXCLUDE_TERMS {
                ensure!(!contains_term(&pos, term), "{}: `{term}` in `{pos}`", record.subject_id);
            }
        }
        let (pos, neg) = (aged.render_positive(), aged.render_negative());
        match dir {
            AgingDirection::Age => {
                ensure!(contains_term(&neg, "child") && contains_term(&neg, "baby"), "aging negatives: `{neg}`");
                ensure!(contains_term(&pos, "wrinkles") == (target >= 60.0), "wrinkles gate at {target}: `{pos}`");
            }
            AgingDirection::Deage => {
                ensure!(contains_term(&neg, "wrinkles"), "de-aging negative: `{neg}`");
                ensure!(!contains_term(&pos, "wrinkles"), "de-aging positive: `{pos}`");
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------ end to end

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "journal.jsonl") {
                let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let world = build_demo_world(&tmp.path().join("world")).map_err(|e| e.to_string())?;
    let run = |out: &Path| -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_mugshot"))
            .arg("--config")
            .arg(&world.config)
            .arg("--out")
            .arg(out)
            .arg("pipeline")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            status.status.success(),
            "pipeline exited {:?}: {}",
            status.status.code(),
            String::from_utf8_lossy(&status.stderr)
        );
        tree(out)
    };
    let a = run(&tmp.path().join("run-a"))?;
    let b = run(&tmp.path().join("run-b"))?;
    ensure!(a.contains_key(Path::new("run_report.json")), "no run_report.json");
    ensure!(a.len() > 20, "only {} files written", a.len());
    let a_keys: Vec<_> = a.keys().collect();
    let b_keys: Vec<_> = b.keys().collect();
    ensure!(a_keys == b_keys, "file sets differ");
    for (path, bytes) in &a {
        ensure!(&b[path] == bytes, "{} differs between runs", path.display());
    }
    Ok(())
}
