//! Synthetic worlds and services with known ground truth.
//!
//! A world is a set of queries, each with crawled images whose primary face
//! belongs to the named person, to an optional second look-alike identity, or
//! to a one-off distractor. Services score pairs from truncated Gaussians
//! keyed by a hash of the pair, so results never depend on call order.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Mutex;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::BoundingBox;
use crate::evaluation::{fmr_fnmr_curve, score_sets, EvalCurve, EvaluationError};
use crate::scoring::{Comparison, ScoreTable, ServiceBackend, TransportError};
use crate::types::{DemographicKey, FaceId, FaceRecord, ImageId, Label, QueryId, ServiceId};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T> Span<T> {
    pub const fn new(min: T, max: T) -> Self {
        Self { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_queries: usize,
    pub faces_per_query: Span<usize>,
    /// Fraction of a query's images showing the named person.
    pub contamination: Span<f64>,
    /// Probability of planting a second identity of comparable size.
    pub second_identity_prob: f64,
    /// Probability that an image carries extra background faces.
    pub multi_face_rate: f64,
    /// Probability that an image is a near-copy of an earlier one.
    pub duplicate_rate: f64,
    /// Demographic keys, assigned to queries round-robin.
    pub demographics: Vec<DemographicKey>,
    pub box_jitter: f64,
    pub detection_miss_rate: f64,
    pub double_detection_rate: f64,
    pub embedding_dim: usize,
    pub as_of: NaiveDate,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_queries: 80,
            faces_per_query: Span::new(20, 40),
            contamination: Span::new(0.6, 0.9),
            second_identity_prob: 0.0,
            multi_face_rate: 0.0,
            duplicate_rate: 0.0,
            demographics: vec![
                DemographicKey::new("female", "asian", ""),
                DemographicKey::new("female", "black", ""),
                DemographicKey::new("female", "white", ""),
                DemographicKey::new("male", "asian", ""),
                DemographicKey::new("male", "black", ""),
                DemographicKey::new("male", "white", ""),
            ],
            box_jitter: 2.0,
            detection_miss_rate: 0.0,
            double_detection_rate: 0.0,
            embedding_dim: 16,
            as_of: NaiveDate::from_ymd_opt(2024, 6, 1).expect("valid date"),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::Config(m));
        if self.n_queries == 0 {
            return bad("n_queries must be positive".into());
        }
        let f = self.faces_per_query;
        if f.min < 2 || f.min > f.max {
            return bad(format!("faces_per_query must satisfy 2 <= min <= max, got {}..{}", f.min, f.max));
        }
        let c = self.contamination;
        if !(c.min > 0.0 && c.min <= c.max && c.max <= 1.0) {
            return bad(format!("contamination must satisfy 0 < min <= max <= 1, got {}..{}", c.min, c.max));
        }
        for (name, p) in [
            ("second_identity_prob", self.second_identity_prob),
            ("multi_face_rate", self.multi_face_rate),
            ("duplicate_rate", self.duplicate_rate),
            ("detection_miss_rate", self.detection_miss_rate),
            ("double_detection_rate", self.double_detection_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.demographics.is_empty() {
            return bad("at least one demographic key is required".into());
        }
        if !(self.box_jitter >= 0.0) {
            return bad(format!("box_jitter must be non-negative, got {}", self.box_jitter));
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceModel {
    pub service_id: ServiceId,
    pub genuine: Gaussian,
    pub impostor: Gaussian,
    /// Shift of the impostor mean for faces of a demographic group, keyed by
    /// the group's display form (e.g. `female/black`).
    #[serde(default)]
    pub group_offsets: BTreeMap<String, f64>,
    #[serde(default = "unit_range")]
    pub native_range: (f64, f64),
    /// Answer "invalid" for pairs touching an image with several faces.
    #[serde(default = "yes")]
    pub rejects_multi_face: bool,
    /// Probability that a single call fails with a transport error.
    #[serde(default)]
    pub fault_rate: f64,
}

fn unit_range() -> (f64, f64) {
    (0.0, 1.0)
}

fn yes() -> bool {
    true
}

impl ServiceModel {
    pub fn new(service_id: impl Into<String>, genuine: Gaussian, impostor: Gaussian) -> Self {
        Self {
            service_id: ServiceId::new(service_id),
            genuine,
            impostor,
            group_offsets: BTreeMap::new(),
            native_range: unit_range(),
            rejects_multi_face: true,
            fault_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::Config(format!("service {}: {m}", self.service_id)));
        let (lo, hi) = self.native_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("native range ({lo}, {hi}) is empty"));
        }
        if !(self.genuine.sd > 0.0 && self.impostor.sd > 0.0) {
            return bad("standard deviations must be positive".into());
        }
        if !(self.genuine.mean > self.impostor.mean) {
            return bad("genuine mean must exceed impostor mean".into());
        }
        if !(0.0..1.0).contains(&self.fault_rate) {
            return bad(format!("fault_rate must be in [0, 1), got {}", self.fault_rate));
        }
        Ok(())
    }

    fn offset(&self, group: &DemographicKey) -> f64 {
        self.group_offsets.get(&group.to_string()).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimQuery {
    pub query_id: QueryId,
    pub name: String,
    pub demographic: DemographicKey,
    pub prevalent_identity: u32,
    pub second_identity: Option<u32>,
    pub contamination: f64,
}

/// A face position within an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimImage {
    pub image_id: ImageId,
    pub query_id: QueryId,
    /// Identity of the primary face.
    pub identity: u32,
    pub primary_box: FaceBox,
    /// Extra faces in the picture, as (identity, box).
    pub background: Vec<(u32, FaceBox)>,
    pub duplicate_of: Option<ImageId>,
    pub embedding: Vec<f64>,
    pub published_at: NaiveDate,
}

impl SimImage {
    pub fn location(&self) -> String {
        format!("sim://image/{}", self.image_id)
    }

    pub fn is_multi_face(&self) -> bool {
        !self.background.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub queries: Vec<SimQuery>,
    pub images: Vec<SimImage>,
}

/// Fixed-key mixer used to derive independent streams from identifiers.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| splitmix64(h ^ p))
}

fn str_key(s: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

const SALT_WORLD: u64 = 1;
const SALT_SCORE: u64 = 2;
const SALT_FAULT: u64 = 3;
const SALT_DETECT: u64 = 4;

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    normalized(v)
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn blend(a: &[f64], b: &[f64], wa: f64, wb: f64) -> Vec<f64> {
    normalized(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

/// Builds a world from its config; identical configs give identical worlds.
pub fn generate_world(config: &WorldConfig) -> Result<World, SimulationError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, SALT_WORLD]));
    let dim = config.embedding_dim;
    let mut identity_vectors: Vec<Vec<f64>> = Vec::new();
    let new_identity = |rng: &mut ChaCha8Rng, vectors: &mut Vec<Vec<f64>>| {
        vectors.push(unit_vector(rng, dim));
        (vectors.len() - 1) as u32
    };

    let mut queries = Vec::with_capacity(config.n_queries);
    let mut images: Vec<SimImage> = Vec::new();
    for q in 0..config.n_queries {
        let query_id = QueryId(q as u32);
        let demographic = config.demographics[q % config.demographics.len()].clone();
        let n = rng.random_range(config.faces_per_query.min..=config.faces_per_query.max);
        let contamination = if config.contamination.min == config.contamination.max {
            config.contamination.min
        } else {
            rng.random_range(config.contamination.min..=config.contamination.max)
        };
        let prevalent = new_identity(&mut rng, &mut identity_vectors);
        let n_prevalent = ((contamination * n as f64).ceil() as usize).clamp(1, n);
        let mut identities = vec![prevalent; n_prevalent];
        let mut second_identity = None;
        if rng.random_bool(config.second_identity_prob) && n_prevalent < n {
            let second = new_identity(&mut rng, &mut identity_vectors);
            let size = ((n_prevalent as f64 * rng.random_range(0.8..=1.0)).round() as usize).clamp(1, n - n_prevalent);
            identities.extend(std::iter::repeat_n(second, size));
            second_identity = Some(second);
        }
        while identities.len() < n {
            identities.push(new_identity(&mut rng, &mut identity_vectors));
        }
        identities.shuffle(&mut rng);

        let query_images_start = images.len();
        for identity in identities {
            let image_id = ImageId(images.len() as u32);
            let published_at = config.as_of - chrono::Days::new(rng.random_range(0..330));
            let size = rng.random_range(80.0..200.0);
            let primary_box = FaceBox {
                x: rng.random_range(50.0..400.0),
                y: rng.random_range(50.0..400.0),
                w: size,
                h: size * rng.random_range(1.1..1.3),
            };
            let duplicate_source = (images.len() > query_images_start && rng.random_bool(config.duplicate_rate))
                .then(|| rng.random_range(query_images_start..images.len()));
            if let Some(src) = duplicate_source {
                let source = images[src].clone();
                let noise = unit_vector(&mut rng, dim);
                images.push(SimImage {
                    image_id,
                    embedding: blend(&source.embedding, &noise, 1.0, 0.02),
                    duplicate_of: Some(source.image_id),
                    published_at,
                    ..source
                });
                continue;
            }
            let mut background = Vec::new();
            if rng.random_bool(config.multi_face_rate) {
                for k in 0..rng.random_range(1..=2usize) {
                    let id = new_identity(&mut rng, &mut identity_vectors);
                    let b = FaceBox {
                        x: primary_box.x + (k as f64 + 1.0) * (primary_box.w + 60.0),
                        y: primary_box.y + rng.random_range(-20.0..20.0),
                        w: primary_box.w * rng.random_range(0.7..1.1),
                        h: primary_box.h * rng.random_range(0.7..1.1),
                    };
                    background.push((id, b));
                }
            }
            let noise = unit_vector(&mut rng, dim);
            let embedding = blend(&identity_vectors[identity as usize], &noise, 0.6, 0.8);
            images.push(SimImage {
                image_id,
                query_id,
                identity,
                primary_box,
                background,
                duplicate_of: None,
                embedding,
                published_at,
            });
        }
        queries.push(SimQuery {
            query_id,
            name: format!("Person {q:04}"),
            demographic,
            prevalent_identity: prevalent,
            second_identity,
            contamination,
        });
    }
    Ok(World {
        config: config.clone(),
        queries,
        images,
    })
}

impl World {
    pub fn image(&self, id: ImageId) -> Option<&SimImage> {
        self.images.get(id.0 as usize).filter(|i| i.image_id == id)
    }

    pub fn query(&self, id: QueryId) -> Option<&SimQuery> {
        self.queries.get(id.0 as usize).filter(|q| q.query_id == id)
    }

    /// True label of an image's primary face with respect to its query.
    pub fn y_star(&self, image: ImageId) -> Option<Label> {
        let img = self.image(image)?;
        let q = self.query(img.query_id)?;
        Some(if img.identity == q.prevalent_identity {
            Label::Positive
        } else {
            Label::Negative
        })
    }

    /// Faces of all single-face, non-duplicate images, with the face id equal
    /// to the image id. This skips detection entirely.
    pub fn face_records(&self) -> Vec<FaceRecord> {
        self.images
            .iter()
            .filter(|i| !i.is_multi_face() && i.duplicate_of.is_none())
            .map(|i| FaceRecord {
                face_id: FaceId(i.image_id.0),
                image_id: i.image_id,
                query_id: i.query_id,
                demographic: self.queries[i.query_id.0 as usize].demographic.clone(),
            })
            .collect()
    }

    /// Ground-truth labels for the given faces, looked up through their image.
    pub fn annotated_labels<'a>(&self, faces: impl IntoIterator<Item = &'a FaceRecord>) -> BTreeMap<FaceId, Label> {
        faces
            .into_iter()
            .map(|f| (f.face_id, self.y_star(f.image_id).unwrap_or(Label::Unknown)))
            .collect()
    }

    /// Boxes every service reports, with jitter, misses and double detections.
    pub fn detections(&self, services: &[ServiceId]) -> Vec<BoundingBox> {
        let cfg = &self.config;
        let mut out = Vec::new();
        for s in services {
            for img in &self.images {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, SALT_DETECT, str_key(s.as_str()), img.image_id.0 as u64]));
                let jitter = Normal::new(0.0, cfg.box_jitter.max(1e-9)).expect("positive sd");
                let faces = std::iter::once(img.primary_box).chain(img.background.iter().map(|(_, b)| *b));
                for (k, fb) in faces.enumerate() {
                    if k == 0 && rng.random_bool(cfg.detection_miss_rate) {
                        continue;
                    }
                    let mut push = |rng: &mut ChaCha8Rng, shift: f64| {
                        out.push(BoundingBox {
                            image_id: img.image_id,
                            service: s.clone(),
                            x: fb.x + shift + jitter.sample(rng),
                            y: fb.y + jitter.sample(rng),
                            w: (fb.w + jitter.sample(rng)).max(1.0),
                            h: (fb.h + jitter.sample(rng)).max(1.0),
                        });
                    };
                    push(&mut rng, 0.0);
                    if k == 0 && rng.random_bool(cfg.double_detection_rate) {
                        push(&mut rng, fb.w * 0.15);
                    }
                }
            }
        }
        out
    }

    pub fn write_dump<W: Write>(&self, out: W) -> Result<(), SimulationError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["face_id", "query_id", "true_identity", "demographic", "y_star"])?;
        for img in &self.images {
            let q = &self.queries[img.query_id.0 as usize];
            let y = self.y_star(img.image_id).unwrap_or(Label::Unknown);
            w.write_record([
                img.image_id.to_string(),
                img.query_id.to_string(),
                img.identity.to_string(),
                q.demographic.to_string(),
                y.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Deterministic raw score for a pair of images, or `Invalid` when the
/// service refuses multi-face images.
pub fn simulate_score(world: &World, a: ImageId, b: ImageId, model: &ServiceModel, seed: u64) -> Comparison {
    let (Some(ia), Some(ib)) = (world.image(a), world.image(b)) else {
        return Comparison::Invalid;
    };
    if model.rejects_multi_face && (ia.is_multi_face() || ib.is_multi_face()) {
        return Comparison::Invalid;
    }
    let (lo_id, hi_id) = if a <= b { (a, b) } else { (b, a) };
    let key = mix(&[seed, SALT_SCORE, str_key(model.service_id.as_str()), lo_id.0 as u64, hi_id.0 as u64]);
    let dist = if ia.identity == ib.identity {
        model.genuine
    } else {
        let ga = &world.queries[ia.query_id.0 as usize].demographic;
        let gb = &world.queries[ib.query_id.0 as usize].demographic;
        let shift = (model.offset(ga) + model.offset(gb)) / 2.0;
        Gaussian::new(model.impostor.mean + shift, model.impostor.sd)
    };
    Comparison::Score(truncated_normal(key, dist, model.native_range))
}

fn truncated_normal(key: u64, dist: Gaussian, (lo, hi): (f64, f64)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let normal = Normal::new(dist.mean, dist.sd).expect("validated sd");
    for _ in 0..64 {
        let x = normal.sample(&mut rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    dist.mean.clamp(lo, hi)
}

/// A [`ServiceBackend`] answering from a simulated world.
#[derive(Debug)]
pub struct SimulatedService<'w> {
    world: &'w World,
    model: ServiceModel,
    seed: u64,
    attempts: Mutex<HashMap<(ImageId, ImageId), u32>>,
}

impl<'w> SimulatedService<'w> {
    pub fn new(world: &'w World, model: ServiceModel, seed: u64) -> Result<Self, SimulationError> {
        model.validate()?;
        Ok(Self {
            world,
            model,
            seed,
            attempts: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &ServiceModel {
        &self.model
    }

    /// Image-level comparator for single-face discovery.
    pub fn compare_images(&self, a: ImageId, b: ImageId) -> Result<Comparison, TransportError> {
        if self.model.fault_rate > 0.0 {
            let key = if a <= b { (a, b) } else { (b, a) };
            let attempt = {
                let mut map = self.attempts.lock().expect("attempt counter poisoned");
                let n = map.entry(key).or_insert(0);
                *n += 1;
                *n
            };
            let h = mix(&[self.seed, SALT_FAULT, str_key(self.model.service_id.as_str()), key.0 .0 as u64, key.1 .0 as u64, attempt as u64]);
            if (h >> 11) as f64 / (1u64 << 53) as f64 <= self.model.fault_rate {
                return Err(TransportError::new(format!("simulated fault on attempt {attempt}")));
            }
        }
        Ok(simulate_score(self.world, a, b, &self.model, self.seed))
    }
}

impl ServiceBackend for SimulatedService<'_> {
    fn id(&self) -> &ServiceId {
        &self.model.service_id
    }

    fn native_range(&self) -> (f64, f64) {
        self.model.native_range
    }

    fn compare(&self, a: &FaceRecord, b: &FaceRecord) -> Result<Comparison, TransportError> {
        self.compare_images(a.image_id, b.image_id)
    }
}

/// The curve a service would show under ground-truth labels on the pairs of
/// `table`.
pub fn true_curve(
    world: &World,
    faces: &BTreeMap<FaceId, FaceRecord>,
    table: &ScoreTable,
    service: &ServiceId,
    confidence: f64,
) -> Result<EvalCurve, EvaluationError> {
    let labels = world.annotated_labels(faces.values());
    let sets = score_sets(table.for_service(service), &labels, faces);
    fmr_fnmr_curve(&sets, confidence)
}
