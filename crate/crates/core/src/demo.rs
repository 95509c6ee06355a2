//! Synthetic dataset and recorded fixtures for fully offline runs.
//!
//! [`build_demo_world`] writes four synthetic subjects (rendered PNG faces
//! plus `subjects.json`), a `mugshot.toml` pointing every backend at
//! `fixtures/`, and fills that directory by running the whole pipeline once
//! against [`SyntheticTransport`] through a [`RecordingTransport`].
//! Afterwards the `mugshot` binary runs on the directory without any model
//! server.
//!
//! The synthetic backend knows which subject each image shows. Embeddings
//! are the subject's centroid plus noise that grows with the generation
//! depth (reference 0, generated 1, generated from generated 2). At depth 2
//! every subject but the last also drifts toward the next subject, so the
//! original+generated arm identifies worse than the original-only arm.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::attribute::{cm_to_inches, kg_to_pounds, Category};
use crate::error::{Error, Result};
use crate::gateway::{
    sha256_hex, BackendEndpoint, BackendKind, EndpointConfig, EnhanceMethod, RecordingTransport, Transport,
    TransportError, WireRequest, WireResponse,
};
use crate::imageio;
use crate::pipeline::{AgeConfig, Arm, Pipeline, PipelineConfig};
use crate::prompt::AgingDirection;
use crate::tv::{GrayImage, RgbImage};

pub const DEMO_SEED: u64 = 0x6d75_6773_686f_7421;
pub const EMBED_DIM: usize = 128;
pub const IMAGE_SIZE: usize = 48;
pub const CONFIG_FILE: &str = "mugshot.toml";
pub const DATASET_FILE: &str = "subjects.json";
pub const FIXTURES_DIR: &str = "fixtures";

/// Noise norm of an embedding by generation depth.
const EMBED_NOISE: [f64; 3] = [0.15, 0.35, 0.45];
/// Share of the next subject's centroid in depth-2 embeddings.
const DRIFT: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSubject {
    pub id: &'static str,
    pub gender: &'static str,
    pub age: f64,
    pub ethnic_group: &'static str,
    pub hair_color: &'static str,
    pub hair_length: &'static str,
    pub iris_color: &'static str,
    pub height_cm: f64,
    pub weight_kg: f64,
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    face_width: f64,
}

pub fn demo_subjects() -> Vec<DemoSubject> {
    vec![
        DemoSubject {
            id: "S01",
            gender: "male",
            age: 34.0,
            ethnic_group: "white",
            hair_color: "brown",
            hair_length: "short",
            iris_color: "brown",
            height_cm: 177.8,
            weight_kg: 82.0,
            skin: [0.86, 0.72, 0.62],
            hair: [0.35, 0.22, 0.12],
            iris: [0.4, 0.25, 0.1],
            face_width: 0.30,
        },
        DemoSubject {
            id: "S02",
            gender: "female",
            age: 27.0,
            ethnic_group: "hispanic",
            hair_color: "black",
            hair_length: "long",
            iris_color: "brown",
            height_cm: 165.0,
            weight_kg: 60.0,
            skin: [0.76, 0.58, 0.44],
            hair: [0.08, 0.07, 0.07],
            iris: [0.35, 0.2, 0.08],
            face_width: 0.26,
        },
        DemoSubject {
            id: "S03",
            gender: "male",
            age: 52.0,
            ethnic_group: "african american",
            hair_color: "black",
            hair_length: "short",
            iris_color: "black",
            height_cm: 185.4,
            weight_kg: 95.0,
            skin: [0.42, 0.3, 0.22],
            hair: [0.05, 0.05, 0.05],
            iris: [0.08, 0.06, 0.05],
            face_width: 0.33,
        },
        DemoSubject {
            id: "S04",
            gender: "female",
            age: 45.0,
            ethnic_group: "white",
            hair_color: "blonde",
            hair_length: "medium length",
            iris_color: "blue",
            height_cm: 170.0,
            weight_kg: 68.0,
            skin: [0.92, 0.8, 0.72],
            hair: [0.88, 0.76, 0.45],
            iris: [0.3, 0.5, 0.85],
            face_width: 0.28,
        },
    ]
}

/// Which rendering of a subject an image is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Reference,
    Young,
    Old,
    Maxim,
    Srgan,
    /// Not produced by this backend, matched to the closest known image.
    Derived,
    Generated,
}

impl Variant {
    /// Probability that a describer answer for this variant is wrong.
    fn error_rate(self) -> f64 {
        match self {
            Variant::Reference | Variant::Young | Variant::Old => 0.10,
            Variant::Maxim => 0.25,
            Variant::Srgan => 0.20,
            Variant::Derived => 0.15,
            Variant::Generated => 0.30,
        }
    }
}

fn seeded(tag: &str) -> ChaCha8Rng {
    let d = sha256_hex(format!("{DEMO_SEED}:{tag}").as_bytes());
    ChaCha8Rng::seed_from_u64(u64::from_str_radix(&d[..16], 16).expect("hex digest"))
}

/// Uniform draw in [0, 1) keyed by `tag`.
fn unit_hash(tag: &str) -> f64 {
    let d = sha256_hex(tag.as_bytes());
    u64::from_str_radix(&d[..13], 16).expect("hex digest") as f64 / (1u64 << 52) as f64
}

/// Renders a face of `s`, perturbed by noise drawn from `seed_tag`.
pub fn render_face(s: &DemoSubject, variant: Variant, seed_tag: &str) -> RgbImage {
    let mut rng = seeded(seed_tag);
    let n = IMAGE_SIZE as f64;
    let shade = match variant {
        Variant::Young => 0.08,
        Variant::Old => -0.1,
        _ => 0.0,
    };
    let mut noise = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for v in &mut noise {
        *v = if rng.random::<f64>() < 0.02 {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            (rng.random::<f64>() - 0.5) * 0.12
        };
    }
    let channel = |c: usize| {
        GrayImage::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| {
            let (u, v) = (x as f64 / n - 0.5, y as f64 / n - 0.5);
            let face = (u / s.face_width).powi(2) + (v / 0.38).powi(2) <= 1.0;
            let hair = v < -0.22 && (u / (s.face_width + 0.06)).powi(2) + ((v + 0.05) / 0.42).powi(2) <= 1.0;
            let eye = ((u.abs() - 0.11).powi(2) + (v + 0.04).powi(2)).sqrt() < 0.035;
            let mut val = if eye {
                s.iris[c]
            } else if hair {
                s.hair[c]
            } else if face {
                let wrinkle = if variant == Variant::Old && (y % 4 == 0) && v > -0.15 { -0.08 } else { 0.0 };
                s.skin[c] + shade + wrinkle
            } else {
                0.78
            };
            val += noise[y * IMAGE_SIZE + x];
            val.clamp(0.0, 1.0)
        })
        .expect("valid raster")
    };
    RgbImage::from_channels(channel(0), channel(1), channel(2)).expect("same-size channels")
}

fn luminance(img: &RgbImage) -> Vec<f64> {
    let [r, g, b] = img.channels();
    r.pixels()
        .iter()
        .zip(g.pixels())
        .zip(b.pixels())
        .map(|((r, g), b)| (r + g + b) / 3.0)
        .collect()
}

struct Registered {
    digest: String,
    luma: Vec<f64>,
    subject: usize,
    depth: usize,
    variant: Variant,
}

/// In-process stand-in for all four model services, deterministic in the
/// request content.
pub struct SyntheticTransport {
    subjects: Vec<DemoSubject>,
    centroids: Vec<Vec<f64>>,
    registry: Mutex<Vec<Registered>>,
}

impl SyntheticTransport {
    pub fn new(subjects: Vec<DemoSubject>) -> Self {
        let centroids = subjects
            .iter()
            .map(|s| {
                let mut rng = seeded(&format!("centroid:{}", s.id));
                let v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                scale_to(&v, 1.0)
            })
            .collect();
        SyntheticTransport {
            subjects,
            centroids,
            registry: Mutex::new(Vec::new()),
        }
    }

    pub fn centroid(&self, subject: usize) -> &[f64] {
        &self.centroids[subject]
    }

    /// Declares that `bytes` shows `subject` at the given generation depth.
    pub fn register(&self, bytes: &[u8], subject: usize, depth: usize, variant: Variant) -> Result<()> {
        let luma = luminance(&imageio::decode_rgb(bytes)?);
        self.registry.lock().expect("registry lock").push(Registered {
            digest: sha256_hex(bytes),
            luma,
            subject,
            depth,
            variant,
        });
        Ok(())
    }

    /// (subject, depth, variant) of an image, exact or by nearest pixels.
    fn identify(&self, bytes: &[u8]) -> std::result::Result<(usize, usize, Variant), TransportError> {
        let digest = sha256_hex(bytes);
        let reg = self.registry.lock().expect("registry lock");
        if let Some(r) = reg.iter().find(|r| r.digest == digest) {
            return Ok((r.subject, r.depth, r.variant));
        }
        let img = imageio::decode_rgb(bytes).map_err(|e| TransportError::Protocol(format!("undecodable image: {e}")))?;
        let luma = luminance(&img);
        reg.iter()
            .filter(|r| r.luma.len() == luma.len())
            .map(|r| {
                let d: f64 = r.luma.iter().zip(&luma).map(|(a, b)| (a - b).abs()).sum();
                (d, r)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, r)| (r.subject, r.depth, Variant::Derived))
            .ok_or_else(|| TransportError::Protocol("image matches no known subject".into()))
    }

    fn enhance(&self, req: &WireRequest) -> std::result::Result<Value, TransportError> {
        let bytes = single_image(req)?;
        let (subject, depth, _) = self.identify(bytes)?;
        let img = imageio::decode_rgb(bytes).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let (out, variant) = match req.params.get("method").and_then(Value::as_str) {
            Some("maxim") => (filter3(&img, [1.0, 2.0, 1.0]), Variant::Maxim),
            Some("srgan") => (filter3(&img, [-0.3, 1.6, -0.3]), Variant::Srgan),
            other => return Err(TransportError::Protocol(format!("unsupported method {other:?}"))),
        };
        let png = imageio::encode_rgb_png(&out);
        self.register(&png, subject, depth, variant)
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        Ok(json!({ "image_b64": B64.encode(&png) }))
    }

    fn describe(&self, req: &WireRequest) -> std::result::Result<Value, TransportError> {
        let bytes = single_image(req)?;
        let (subject, _, variant) = self.identify(bytes)?;
        let s = &self.subjects[subject];
        let questions = req
            .params
            .get("questions")
            .and_then(Value::as_array)
            .ok_or_else(|| TransportError::Protocol("missing questions".into()))?;
        let digest = sha256_hex(bytes);
        let answers: Vec<Value> = questions
            .iter()
            .map(|q| {
                let text = q.as_str().unwrap_or_default().to_lowercase();
                let Some(cat) = Category::ALL.into_iter().find(|c| text.contains(&format!("the {} of", c.term())))
                else {
                    return Value::String("unknown".into());
                };
                let wrong = unit_hash(&format!("{digest}:{}", cat.key())) < variant.error_rate();
                Value::String(answer(s, cat, wrong))
            })
            .collect();
        Ok(json!({ "answers": answers }))
    }

    fn generate(&self, req: &WireRequest) -> std::result::Result<Value, TransportError> {
        if req.images.is_empty() {
            return Err(TransportError::Protocol("no input images".into()));
        }
        let mut subject = None;
        let mut depth = 0;
        for img in &req.images {
            let (s, d, _) = self.identify(img)?;
            subject.get_or_insert(s);
            depth = depth.max(d + 1);
        }
        let subject = subject.expect("at least one input");
        let count = req.params.get("count").and_then(Value::as_u64).unwrap_or(1) as usize;
        let digest = req.digest();
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let img = render_face(&self.subjects[subject], Variant::Generated, &format!("gen:{digest}:{i}"));
            let png = imageio::encode_rgb_png(&img);
            self.register(&png, subject, depth, Variant::Generated)
                .map_err(|e| TransportError::Protocol(e.to_string()))?;
            images.push(B64.encode(&png));
        }
        Ok(json!({ "images_b64": images }))
    }

    fn embed(&self, req: &WireRequest) -> std::result::Result<Value, TransportError> {
        let bytes = single_image(req)?;
        let (subject, depth, _) = self.identify(bytes)?;
        let depth = depth.min(EMBED_NOISE.len() - 1);
        let mut base = self.centroids[subject].clone();
        if depth >= 2 && subject + 1 < self.centroids.len() {
            let next = &self.centroids[subject + 1];
            for (b, n) in base.iter_mut().zip(next) {
                *b = (1.0 - DRIFT) * *b + DRIFT * n;
            }
        }
        let mut rng = seeded(&format!("embed:{}", sha256_hex(bytes)));
        let noise: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let noise = scale_to(&noise, EMBED_NOISE[depth]);
        let vector: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + n).collect();
        Ok(json!({ "vector": vector }))
    }
}

impl Transport for SyntheticTransport {
    fn send(&self, request: &WireRequest) -> std::result::Result<WireResponse, TransportError> {
        let body = match request.kind {
            BackendKind::Enhance => self.enhance(request)?,
            BackendKind::Describe => self.describe(request)?,
            BackendKind::Generate => self.generate(request)?,
            BackendKind::Embed => self.embed(request)?,
        };
        Ok(WireResponse { body, base_dir: None })
    }

    fn target(&self) -> String {
        "synthetic".into()
    }
}

fn single_image(req: &WireRequest) -> std::result::Result<&[u8], TransportError> {
    match req.images.as_slice() {
        [one] => Ok(one),
        other => Err(TransportError::Protocol(format!("expected 1 image, got {}", other.len()))),
    }
}

fn scale_to(v: &[f64], norm: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x * norm / n).collect()
}

/// 3×3 separable filter with kernel `k` (normalized by its sum).
fn filter3(img: &RgbImage, k: [f64; 3]) -> RgbImage {
    let sum: f64 = k.iter().sum();
    let ch = |c: &GrayImage| {
        let (w, h) = (c.width(), c.height());
        GrayImage::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for (dy, ky) in k.iter().enumerate() {
                for (dx, kx) in k.iter().enumerate() {
                    let xx = (x + dx).saturating_sub(1).min(w - 1);
                    let yy = (y + dy).saturating_sub(1).min(h - 1);
                    acc += kx * ky * c.get(xx, yy);
                }
            }
            (acc / (sum * sum)).clamp(0.0, 1.0)
        })
        .expect("valid raster")
    };
    let [r, g, b] = img.channels();
    RgbImage::from_channels(ch(r), ch(g), ch(b)).expect("same-size channels")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
        .unwrap_or_default()
}

/// Describer-style answer for `cat`; `wrong` swaps in a plausible mistake.
fn answer(s: &DemoSubject, cat: Category, wrong: bool) -> String {
    match cat {
        Category::Gender => {
            let g = match (s.gender, wrong) {
                ("male", true) => "female",
                ("female", true) => "male",
                (g, _) => g,
            };
            capitalize(g)
        }
        Category::Age => {
            let a = if wrong { s.age + 7.0 } else { s.age };
            format!("About {a} years old")
        }
        Category::EthnicGroup => match (s.ethnic_group, wrong) {
            ("white", false) => "Caucasian".into(),
            ("white", true) => "Hispanic".into(),
            ("hispanic", true) => "Arab".into(),
            ("african american", true) => "African".into(),
            (e, _) => capitalize(e),
        },
        Category::HairColor => match (s.hair_color, wrong) {
            ("blonde", true) => "Light brown".into(),
            ("black", true) => "Brown".into(),
            (_, true) => "Black".into(),
            (h, false) => capitalize(h),
        },
        Category::IrisColor => match wrong {
            true => "Not visible".into(),
            false => capitalize(s.iris_color),
        },
        Category::Height => {
            let cm = if wrong { s.height_cm + 10.0 } else { s.height_cm };
            let inches = cm_to_inches(cm).round() as i64;
            format!("{}'{}\"", inches / 12, inches % 12)
        }
        Category::Weight => {
            let kg = if wrong { s.weight_kg + 10.0 } else { s.weight_kg };
            format!("{} lbs", kg_to_pounds(kg).round())
        }
    }
}

/// One image of the demo dataset.
pub struct DemoImage {
    pub path: PathBuf,
    pub subject: usize,
    pub variant: Variant,
    pub bytes: Vec<u8>,
}

/// Writes rendered images and `subjects.json` below `dir`. Returns the
/// images with the subject they show.
pub fn write_demo_dataset(dir: &Path) -> Result<Vec<DemoImage>> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut images = Vec::new();
    let mut records = Vec::new();
    for (i, s) in demo_subjects().iter().enumerate() {
        let mut files = |variant: Variant, name: &str| -> Result<String> {
            let rel = format!("images/{}_{name}.png", s.id);
            let bytes = imageio::encode_rgb_png(&render_face(s, variant, &format!("{}:{name}", s.id)));
            let path = dir.join(&rel);
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            images.push(DemoImage {
                path,
                subject: i,
                variant,
                bytes,
            });
            Ok(rel)
        };
        let refs = vec![files(Variant::Reference, "ref0")?, files(Variant::Reference, "ref1")?];
        let young = vec![files(Variant::Young, "young")?];
        let old = vec![files(Variant::Old, "old")?];
        let inches = cm_to_inches(s.height_cm).round() as i64;
        records.push(json!({
            "subject_id": s.id,
            "attributes": {
                "gender": capitalize(s.gender),
                "age": s.age,
                "ethnic_group": s.ethnic_group,
                "hair_color": s.hair_color,
                "iris_color": s.iris_color,
                "height": format!("{}'{}\"", inches / 12, inches % 12),
                "weight": format!("{} kg", s.weight_kg),
            },
            "hair_length": s.hair_length,
            "reference_images": refs,
            "young_images": young,
            "old_images": old,
        }));
    }
    let path = dir.join(DATASET_FILE);
    let mut text = serde_json::to_vec_pretty(&records)?;
    text.push(b'\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(images)
}

/// Configuration of the demo run, with paths relative to the demo root.
pub fn demo_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::new(DATASET_FILE, "out");
    cfg.enhancements = vec![EnhanceMethod::Maxim, EnhanceMethod::Srgan, EnhanceMethod::TvDenoise];
    cfg.augment.arms = vec![
        Arm::OriginalOnly,
        Arm::OriginalEnhanced(EnhanceMethod::TvDenoise),
        Arm::OriginalGenerated,
    ];
    cfg.reid.distance_threshold = Some(0.9);
    cfg.reid.similarity_threshold = Some(0.6);
    cfg.reid.sweep = true;
    cfg.age = Some(AgeConfig {
        target_age: 75.0,
        direction: AgingDirection::Age,
    });
    for kind in BackendKind::ALL {
        cfg.endpoints.set_target(kind, EndpointConfig::fixtures(FIXTURES_DIR));
    }
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoWorld {
    pub root: PathBuf,
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub fixtures: PathBuf,
}

impl DemoWorld {
    /// The demo configuration with its output redirected to `out_dir`.
    pub fn config_with_out(&self, out_dir: impl Into<PathBuf>) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        cfg.out_dir = out_dir.into();
        Ok(cfg)
    }
}

/// Writes the demo dataset, configuration and recorded fixtures below
/// `dir`.
pub fn build_demo_world(dir: impl AsRef<Path>) -> Result<DemoWorld> {
    let root = std::path::absolute(dir.as_ref()).map_err(|e| Error::io(dir.as_ref(), e))?;
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let images = write_demo_dataset(&root)?;
    let config = root.join(CONFIG_FILE);
    std::fs::write(&config, demo_config().to_toml()?).map_err(|e| Error::io(&config, e))?;
    let fixtures = root.join(FIXTURES_DIR);
    std::fs::create_dir_all(&fixtures).map_err(|e| Error::io(&fixtures, e))?;

    let synthetic = Arc::new(SyntheticTransport::new(demo_subjects()));
    for img in &images {
        synthetic.register(&img.bytes, img.subject, 0, img.variant)?;
    }
    let recorder: Arc<dyn Transport> = Arc::new(RecordingTransport::new(synthetic, &fixtures));
    let scratch = root.join(".recording-run");
    let mut cfg = PipelineConfig::load(&config)?;
    cfg.out_dir = scratch.clone();
    let pipeline = Pipeline::open_with(cfg, |mut g| {
        for kind in BackendKind::ALL {
            g = g.with_transport(BackendEndpoint::fixtures(kind, &fixtures), recorder.clone())?;
        }
        Ok(g)
    })?;
    pipeline.run()?;
    drop(pipeline);
    std::fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    Ok(DemoWorld {
        root: root.clone(),
        config,
        dataset: root.join(DATASET_FILE),
        fixtures,
    })
}
