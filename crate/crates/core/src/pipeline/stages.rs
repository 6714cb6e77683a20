use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::artifacts::*;
use super::config::{Endpoint, RunConfig};
use super::manifest::canonical_hash;
use super::PipelineError;
use crate::corpus::{
    deduplicate, fetch_all, load_name_list, plan_queries, FetchOptions, ImageProvider, ManifestProvider,
    ProviderError, ProviderHit, Query, RecencyWindow,
};
use crate::detection::{group_rows, unify_single_face_images, BoundingBox};
use crate::estimation::{
    ambiguity_rank, apply_annotations, estimate_labels, label_dump_rows, merge_annotations, read_annotations,
    QueryDisposition,
};
use crate::evaluation::{
    agreement_rate, confusion_matrix, curve_rows, disaggregate_bias, eer_bounds, equal_error_rate,
    evaluate_service, fmr_fnmr_curve, fnmr_at_fmr, majority_vote_ablation, score_sets,
    service_composition_sweep, AblationRow, BiasRow, CompositionRow, ConfusionMatrix3, CurveKind, CurveRow,
    EvaluationError, COMPOSITION_FMRS,
};
use crate::scoring::{
    build_pair_plan, collect_scores, CollectOptions, Comparison, RetryPolicy, ScoreStore, ScoreTable, ServiceBackend,
    StoreRecord, TransportError,
};
use crate::simulator::{generate_world, SimulatedService, World};
use crate::types::{FaceId, FaceRecord, ImageId, Label, ServiceId};

const STORE_FINGERPRINTS: &str = "scores.fingerprints.json";
const SIM_SCHEME: &str = "sim://image/";

pub(super) struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub dir: PathBuf,
    world: OnceLock<World>,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            dir: cfg.out_dir.clone(),
            world: OnceLock::new(),
        }
    }

    fn world(&self) -> Result<&World, PipelineError> {
        if let Some(w) = self.world.get() {
            return Ok(w);
        }
        let sim = self
            .cfg
            .simulator
            .as_ref()
            .ok_or_else(|| PipelineError::Validation("this run has no simulator section".into()))?;
        let w = generate_world(&sim.world)?;
        Ok(self.world.get_or_init(|| w))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

/// Search hits straight from a simulated world.
struct WorldProvider<'w> {
    by_name: HashMap<&'w str, Vec<ProviderHit>>,
}

impl<'w> WorldProvider<'w> {
    fn new(world: &'w World) -> Self {
        let mut by_name: HashMap<&str, Vec<ProviderHit>> = HashMap::new();
        for img in &world.images {
            let q = &world.queries[img.query_id.0 as usize];
            by_name.entry(q.name.as_str()).or_default().push(ProviderHit {
                url: img.location(),
                published_at: Some(img.published_at),
            });
        }
        Self { by_name }
    }
}

impl ImageProvider for WorldProvider<'_> {
    fn search(&self, query_string: &str, max_results: usize, _: &RecencyWindow) -> Result<Vec<ProviderHit>, ProviderError> {
        Ok(self
            .by_name
            .get(query_string)
            .map(|h| h.iter().take(max_results).cloned().collect())
            .unwrap_or_default())
    }
}

/// Providers searched in order; repeated urls keep their first hit.
struct ProviderChain(Vec<ManifestProvider>);

impl ImageProvider for ProviderChain {
    fn search(&self, query_string: &str, max_results: usize, window: &RecencyWindow) -> Result<Vec<ProviderHit>, ProviderError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.0 {
            for h in p.search(query_string, max_results, window)? {
                if out.len() < max_results && seen.insert(h.url.clone()) {
                    out.push(h);
                }
            }
        }
        Ok(out)
    }
}

/// Backend for services whose scores must already be in the store.
struct StoreOnly {
    id: ServiceId,
    range: (f64, f64),
}

impl ServiceBackend for StoreOnly {
    fn id(&self) -> &ServiceId {
        &self.id
    }

    fn native_range(&self) -> (f64, f64) {
        self.range
    }

    fn compare(&self, a: &FaceRecord, b: &FaceRecord) -> Result<Comparison, TransportError> {
        Err(TransportError::new(format!(
            "no stored score for faces {} and {}",
            a.face_id, b.face_id
        )))
    }
}

fn sim_image_id(location: &str) -> Option<ImageId> {
    location.strip_prefix(SIM_SCHEME)?.parse().ok().map(ImageId)
}

pub(super) fn source(ctx: &Context) -> Result<Vec<String>, PipelineError> {
    let cfg = ctx.cfg;
    let opts = FetchOptions {
        window: RecencyWindow {
            as_of: cfg.as_of(),
            months: cfg.window_months,
        },
        max_results: cfg.max_results,
        keep_undated: true,
    };
    let (queries, provider): (Vec<Query>, Box<dyn ImageProvider + '_>) = if cfg.is_simulated() {
        let world = ctx.world()?;
        let queries = world
            .queries
            .iter()
            .map(|q| Query {
                query_id: q.query_id,
                query_string: q.name.clone(),
                demographic: q.demographic.clone(),
            })
            .collect();
        (queries, Box::new(WorldProvider::new(world)))
    } else {
        let list = cfg.name_list.as_ref().expect("validated");
        let entries = load_name_list(list, &cfg.demographics)?;
        let providers = cfg
            .providers
            .iter()
            .map(ManifestProvider::load)
            .collect::<Result<Vec<_>, _>>()?;
        (plan_queries(&entries), Box::new(ProviderChain(providers)))
    };

    let fetched = fetch_all(&queries, provider.as_ref(), &opts, cfg.workers);
    let mut images = Vec::new();
    for (q, refs) in queries.iter().zip(fetched) {
        let refs = refs?;
        let mut rows: Vec<ImageRow> = Vec::with_capacity(refs.len());
        for r in refs {
            let image_id = if cfg.is_simulated() {
                sim_image_id(&r.location)
                    .ok_or_else(|| PipelineError::Validation(format!("unexpected location {}", r.location)))?
            } else {
                ImageId((images.len() + rows.len()) as u32)
            };
            rows.push(ImageRow {
                image_id,
                query_id: q.query_id,
                location: r.location,
                published_at: r.published_at,
            });
        }
        if cfg.is_simulated() {
            let world = ctx.world()?;
            let items: Vec<(ImageId, Vec<f64>)> = rows
                .iter()
                .map(|r| (r.image_id, world.image(r.image_id).expect("listed image").embedding.clone()))
                .collect();
            let keep = deduplicate(&items, cfg.dedup_threshold)?;
            let before = rows.len();
            rows.retain(|r| keep.contains(&r.image_id));
            if rows.len() < before {
                log::debug!("query {}: {} near-duplicates removed", q.query_id, before - rows.len());
            }
        }
        images.extend(rows);
    }
    if !cfg.is_simulated() {
        log::info!("no image embeddings for provider results; near-duplicate removal skipped");
    }

    let query_rows: Vec<QueryRow> = queries
        .iter()
        .map(|q| QueryRow {
            query_id: q.query_id,
            query_string: q.query_string.clone(),
            demographic: q.demographic.to_string(),
        })
        .collect();
    write_csv(&ctx.path(QUERIES), &query_rows)?;
    write_csv(&ctx.path(IMAGES), &images)?;
    let mut outputs = vec![QUERIES.to_owned(), IMAGES.to_owned()];
    if cfg.is_simulated() {
        let path = ctx.path(WORLD);
        let file = fs::File::create(&path).map_err(|e| PipelineError::io(&path, e))?;
        ctx.world()?.write_dump(file)?;
        outputs.push(WORLD.to_owned());
    }
    log::info!("source: {} queries, {} images", queries.len(), images.len());
    Ok(outputs)
}

pub(super) fn detect(ctx: &Context) -> Result<Vec<String>, PipelineError> {
    let cfg = ctx.cfg;
    let queries: BTreeMap<_, _> = read_csv::<QueryRow>(&ctx.path(QUERIES))?
        .into_iter()
        .map(|q| (q.query_id, q))
        .collect();
    let images: BTreeMap<ImageId, ImageRow> = read_csv::<ImageRow>(&ctx.path(IMAGES))?
        .into_iter()
        .map(|i| (i.image_id, i))
        .collect();
    let services = cfg.service_ids();
    let mut boxes: Vec<BoundingBox> = if cfg.is_simulated() {
        ctx.world()?.detections(&services)
    } else {
        read_csv(cfg.detections.as_ref().expect("validated"))?
    };
    let wanted: BTreeSet<&ServiceId> = services.iter().collect();
    boxes.retain(|b| images.contains_key(&b.image_id) && wanted.contains(&b.service));
    boxes.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.service.cmp(&b.service))
            .then(a.x.total_cmp(&b.x))
            .then(a.y.total_cmp(&b.y))
    });
    let groups = unify_single_face_images(&boxes, &services, cfg.iou_threshold)?;
    let faces: Vec<FaceRow> = groups
        .iter()
        .map(|g| {
            let img = &images[&g.image_id];
            FaceRow {
                face_id: g.face_id,
                image_id: g.image_id,
                query_id: img.query_id,
                demographic: queries[&img.query_id].demographic.clone(),
            }
        })
        .collect();
    write_csv(&ctx.path(DETECTIONS), &boxes)?;
    write_csv(&ctx.path(GROUPS), &group_rows(&groups))?;
    write_csv(&ctx.path(FACES), &faces)?;
    log::info!("detect: {} boxes, {} single-face images", boxes.len(), faces.len());
    Ok(vec![DETECTIONS.to_owned(), GROUPS.to_owned(), FACES.to_owned()])
}

/// Drops stored scores of services whose scoring config changed since they
/// were collected.
fn invalidate_store(ctx: &Context, fingerprints: &BTreeMap<ServiceId, String>) -> Result<(), PipelineError> {
    let fp_path = ctx.path(STORE_FINGERPRINTS);
    let store_path = ctx.path(SCORE_STORE);
    let old: BTreeMap<ServiceId, String> = if fp_path.exists() {
        read_json(&fp_path)?
    } else {
        BTreeMap::new()
    };
    let stale: BTreeSet<&ServiceId> = old
        .iter()
        .filter(|(s, fp)| fingerprints.get(*s).is_some_and(|new| new != *fp))
        .map(|(s, _)| s)
        .collect();
    if !stale.is_empty() && store_path.exists() {
        log::info!("discarding cached scores of {stale:?}: scoring config changed");
        let file = fs::File::open(&store_path).map_err(|e| PipelineError::io(&store_path, e))?;
        let mut kept = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| PipelineError::io(&store_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoreRecord = serde_json::from_str(&line)
                .map_err(|e| PipelineError::Validation(format!("{}: {e}", store_path.display())))?;
            if !stale.contains(&rec.service) {
                kept.push(line);
            }
        }
        let mut f = fs::File::create(&store_path).map_err(|e| PipelineError::io(&store_path, e))?;
        for line in kept {
            writeln!(f, "{line}").map_err(|e| PipelineError::io(&store_path, e))?;
        }
    }
    let mut merged = old;
    merged.extend(fingerprints.iter().map(|(k, v)| (k.clone(), v.clone())));
    write_json(&fp_path, &merged)
}

/// What determines a service's raw scores.
pub(super) fn service_fingerprint(cfg: &RunConfig, service: &ServiceId) -> Result<String, PipelineError> {
    let s = cfg.services.iter().find(|s| &s.id == service).expect("configured service");
    let model = cfg.model_for(s)?;
    let score_seed = cfg.simulator.as_ref().map(|sim| sim.score_seed);
    let world = model.as_ref().and_then(|_| cfg.simulator.as_ref().map(|sim| &sim.world));
    Ok(canonical_hash(&(&s.id, &s.endpoint, s.native_range, &model, score_seed, world)))
}

pub(super) fn score(ctx: &Context) -> Result<Vec<String>, PipelineError> {
    let cfg = ctx.cfg;
    let faces = load_faces(&ctx.dir)?;
    let records: Vec<FaceRecord> = faces.values().cloned().collect();
    let plan = build_pair_plan(&records, cfg.seed)?;
    for w in &plan.warnings {
        log::warn!("pair plan: {w}");
    }
    let fingerprints = cfg
        .service_ids()
        .iter()
        .map(|s| Ok((s.clone(), service_fingerprint(cfg, s)?)))
        .collect::<Result<BTreeMap<_, _>, PipelineError>>()?;
    invalidate_store(ctx, &fingerprints)?;
    let mut store = ScoreStore::open(ctx.path(SCORE_STORE))?;

    let mut tables = Vec::new();
    let mut fixed = BTreeMap::new();
    for s in &cfg.services {
        let mut opts = CollectOptions {
            retry: s.retry.unwrap_or(cfg.retry),
            parallelism: s.parallelism.unwrap_or(cfg.workers),
            max_failure_rate: cfg.max_failure_rate,
            rate_limit: s.rate_limit,
            burst: 1,
        };
        let (table, stats) = match s.endpoint()? {
            Endpoint::Simulator(_) => {
                let model = cfg.model_for(s)?.expect("simulator endpoint");
                let seed = cfg.simulator.as_ref().expect("validated").score_seed;
                let backend = SimulatedService::new(ctx.world()?, model, seed)?;
                collect_scores(&plan, &faces, &backend, &mut store, &opts)?
            }
            Endpoint::Store => {
                opts.retry = RetryPolicy::no_delay(0);
                let backend = StoreOnly {
                    id: s.id.clone(),
                    range: s.native_range.expect("validated"),
                };
                collect_scores(&plan, &faces, &backend, &mut store, &opts)?
            }
        };
        log::info!(
            "score {}: {} planned, {} cached, {} calls, {} invalid, {} failed",
            s.id,
            stats.planned,
            stats.cache_hits,
            stats.backend_calls,
            stats.invalid,
            stats.failed
        );
        if let Some(m) = s.modes {
            fixed.insert(s.id.clone(), m);
        }
        tables.push(table);
    }
    let mut table = ScoreTable::merge(tables);
    let modes = table.fit_modes(&fixed)?;
    table.normalize(&modes);
    write_csv(&ctx.path(SCORES), &table.rows)?;
    write_json(&ctx.path(MODES), &modes)?;
    Ok(vec![SCORES.to_owned(), MODES.to_owned()])
}

/// Human annotations from the config and from earlier merges.
pub(super) fn annotation_inputs(cfg: &RunConfig) -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = cfg.annotations.iter().cloned().collect();
    let merged = cfg.out_dir.join(ANNOTATIONS);
    if merged.is_file() {
        paths.push(merged);
    }
    paths
}

pub(super) fn load_annotation_inputs(cfg: &RunConfig) -> Result<BTreeMap<FaceId, Label>, PipelineError> {
    let mut out = BTreeMap::new();
    for p in annotation_inputs(cfg) {
        let file = fs::File::open(&p).map_err(|e| PipelineError::io(&p, e))?;
        let a = read_annotations(file).map_err(|e| PipelineError::Validation(format!("{}: {e}", p.display())))?;
        out.extend(a);
    }
    Ok(out)
}

fn world_truth(ctx: &Context, faces: &BTreeMap<FaceId, FaceRecord>) -> Result<BTreeMap<FaceId, Label>, PipelineError> {
    let y: HashMap<ImageId, Label> = read_csv::<WorldRow>(&ctx.path(WORLD))?
        .into_iter()
        .map(|r| (r.face_id, r.y_star))
        .collect();
    Ok(faces
        .values()
        .map(|f| (f.face_id, y.get(&f.image_id).copied().unwrap_or(Label::Unknown)))
        .collect())
}

pub(super) fn estimate(ctx: &Context) -> Result<Vec<String>, PipelineError> {
    let cfg = ctx.cfg;
    let faces = load_faces(&ctx.dir)?;
    let records: Vec<FaceRecord> = faces.values().cloned().collect();
    let table = load_scores(&ctx.dir)?;
    let run = estimate_labels(&records, &table, &cfg.service_ids(), &cfg.thresholds)?;
    let human = load_annotation_inputs(cfg)?;

    let mut estimate = run.estimate;
    let truth = if cfg.is_simulated() {
        let truth = world_truth(ctx, &faces)?;
        if cfg.annotation_budget > 0.0 {
            let queue = ambiguity_rank(&estimate, &run.results, &cfg.thresholds);
            estimate = apply_annotations(&estimate, &queue, &truth, cfg.annotation_budget)?;
        }
        truth
    } else {
        human.clone()
    };
    if !human.is_empty() {
        estimate = merge_annotations(&estimate, &human)?;
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in estimate.dispositions.values() {
        *counts.entry(d.as_str()).or_default() += 1;
    }
    log::info!("estimate: {} faces, query dispositions {counts:?}", estimate.labels.len());

    write_csv(&ctx.path(LABELS), &label_dump_rows(&estimate, Some(&truth)))?;
    write_json(&ctx.path(SPECTRAL), &spectral_artifact(&estimate, &run.results, &cfg.thresholds))?;
    Ok(vec![LABELS.to_owned(), SPECTRAL.to_owned()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnmrPoint {
    pub fmr: f64,
    pub fnmr_annotated: Option<f64>,
    pub fnmr_estimated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSummary {
    pub service: ServiceId,
    pub n_genuine_estimated: usize,
    pub n_impostor_estimated: usize,
    pub eer_estimated: f64,
    pub eer_estimated_bounds: (f64, f64),
    pub n_genuine_annotated: Option<usize>,
    pub n_impostor_annotated: Option<usize>,
    pub eer_annotated: Option<f64>,
    pub eer_annotated_bounds: Option<(f64, f64)>,
    pub discrepancy: Option<f64>,
    pub discrepancy_exclusion: Option<f64>,
    pub discrepancy_assignment: Option<f64>,
    pub operating_points: Vec<FnmrPoint>,
}

/// Everything the evaluate stage computes, as stored in `evaluation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub confidence: f64,
    pub services: Vec<ServiceSummary>,
    pub bias: Vec<BiasRow>,
    pub confusion: Option<ConfusionMatrix3>,
    pub agreement: Option<f64>,
    pub ablation: Vec<AblationRow>,
    pub composition: Vec<CompositionRow>,
}

impl EvaluationSummary {
    pub fn service(&self, service: &ServiceId) -> Option<&ServiceSummary> {
        self.services.iter().find(|s| &s.service == service)
    }
}

pub fn curve_file(service: &ServiceId) -> String {
    format!("{CURVES_DIR}/{service}.csv")
}

pub(super) fn evaluate(ctx: &Context) -> Result<Vec<String>, PipelineError> {
    let cfg = ctx.cfg;
    let conf = cfg.confidence;
    let faces = load_faces(&ctx.dir)?;
    let table = load_scores(&ctx.dir)?;
    let StoredEstimation { run, annotated, .. } = load_estimation(&ctx.dir)?;
    let estimated = &run.estimate.labels;
    let services = cfg.service_ids();

    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    let mut bias = Vec::new();
    let mut bias_csv = Vec::new();
    let mut all_annotated = true;
    for s in &services {
        let mut rows: Vec<CurveRow> = Vec::new();
        let summary = match evaluate_service(&table, s, &annotated, estimated, &faces, conf) {
            Ok(ev) => {
                rows.extend(curve_rows(CurveKind::Annotated, s, "all", &ev.annotated));
                rows.extend(curve_rows(CurveKind::Estimated, s, "all", &ev.estimated));
                if let Some(a) = &ev.achievable {
                    rows.extend(curve_rows(CurveKind::Achievable, s, "all", a));
                }
                ServiceSummary {
                    service: s.clone(),
                    n_genuine_estimated: ev.estimated.n_genuine,
                    n_impostor_estimated: ev.estimated.n_impostor,
                    eer_estimated: ev.eer_estimated,
                    eer_estimated_bounds: ev.eer_estimated_bounds,
                    n_genuine_annotated: Some(ev.annotated.n_genuine),
                    n_impostor_annotated: Some(ev.annotated.n_impostor),
                    eer_annotated: Some(ev.eer_annotated),
                    eer_annotated_bounds: Some(ev.eer_annotated_bounds),
                    discrepancy: Some(ev.discrepancy),
                    discrepancy_exclusion: ev.discrepancy_exclusion,
                    discrepancy_assignment: ev.discrepancy_assignment,
                    operating_points: COMPOSITION_FMRS
                        .iter()
                        .map(|&fmr| FnmrPoint {
                            fmr,
                            fnmr_annotated: Some(fnmr_at_fmr(&ev.annotated, fmr)),
                            fnmr_estimated: fnmr_at_fmr(&ev.estimated, fmr),
                        })
                        .collect(),
                }
            }
            Err(EvaluationError::EmptySet { .. }) => {
                all_annotated = false;
                let sets = score_sets(table.for_service(s), estimated, &faces);
                if !sets.is_usable() {
                    return Err(PipelineError::Validation(format!(
                        "service {s}: estimated labels give {} genuine and {} impostor pairs",
                        sets.genuine.len(),
                        sets.impostor.len()
                    )));
                }
                log::warn!("service {s}: not enough annotated labels, reporting estimated curves only");
                let est = fmr_fnmr_curve(&sets, conf)?;
                rows.extend(curve_rows(CurveKind::Estimated, s, "all", &est));
                let eer = equal_error_rate(&est);
                ServiceSummary {
                    service: s.clone(),
                    n_genuine_estimated: est.n_genuine,
                    n_impostor_estimated: est.n_impostor,
                    eer_estimated: eer,
                    eer_estimated_bounds: eer_bounds(&est, eer, conf)?,
                    n_genuine_annotated: None,
                    n_impostor_annotated: None,
                    eer_annotated: None,
                    eer_annotated_bounds: None,
                    discrepancy: None,
                    discrepancy_exclusion: None,
                    discrepancy_assignment: None,
                    operating_points: COMPOSITION_FMRS
                        .iter()
                        .map(|&fmr| FnmrPoint {
                            fmr,
                            fnmr_annotated: None,
                            fnmr_estimated: fnmr_at_fmr(&est, fmr),
                        })
                        .collect(),
                }
            }
            Err(e) => return Err(e.into()),
        };
        summaries.push(summary);

        let bt = disaggregate_bias(&table, s, &annotated, estimated, &faces, conf)?;
        for r in &bt.rows {
            bias_csv.push(BiasCsvRow {
                service: r.service.clone(),
                group: r.group.to_string(),
                eer_est: r.eer_estimated,
                eer_ann: r.eer_annotated,
                n_genuine: r.n_genuine,
                n_impostor: r.n_impostor,
            });
        }
        bias.extend(bt.rows);

        let rel = curve_file(s);
        write_csv(&ctx.path(&rel), &rows)?;
        outputs.push(rel);
    }
    write_csv(&ctx.path(BIAS), &bias_csv)?;
    outputs.push(BIAS.to_owned());

    let confusion = confusion_matrix(&annotated, &run.estimate).ok();
    let agreement = confusion.as_ref().and_then(|c| agreement_rate(c).ok());
    let (ablation, composition) = if all_annotated {
        let ablation =
            majority_vote_ablation(&table, &run, &annotated, &faces, &services, &cfg.thresholds, conf)?;
        let composition = if (3..=20).contains(&services.len()) {
            service_composition_sweep(
                &table,
                &run,
                &annotated,
                &faces,
                &services,
                &cfg.thresholds,
                &COMPOSITION_FMRS,
                conf,
            )?
        } else {
            Vec::new()
        };
        (ablation, composition)
    } else {
        (Vec::new(), Vec::new())
    };
    let summary = EvaluationSummary {
        confidence: conf,
        services: summaries,
        bias,
        confusion,
        agreement,
        ablation,
        composition,
    };
    write_json(&ctx.path(EVALUATION), &summary)?;
    outputs.push(EVALUATION.to_owned());
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config_hash: String,
    pub services: Vec<ServiceId>,
    pub n_queries: usize,
    pub n_faces: usize,
    pub query_dispositions: BTreeMap<String, usize>,
    pub n_precondition_failed: usize,
    pub n_annotated: usize,
    pub evaluation: EvaluationSummary,
    /// Largest FNMR gap over all subsets of at least three services, per
    /// target FMR.
    pub composition_max_delta: BTreeMap<String, f64>,
}

pub(super) fn report(ctx: &Context, config_hash: &str) -> Result<Vec<String>, PipelineError> {
    let cfg = ctx.cfg;
    let evaluation: EvaluationSummary = read_json(&ctx.path(EVALUATION))?;
    let run = load_estimation(&ctx.dir)?.run;
    let est = &run.estimate;
    let mut dispositions: BTreeMap<String, usize> = BTreeMap::new();
    for d in est.dispositions.values() {
        *dispositions.entry(d.as_str().to_owned()).or_default() += 1;
    }
    let mut composition_max_delta: BTreeMap<String, f64> = BTreeMap::new();
    for r in &evaluation.composition {
        if let Some(d) = r.delta_fnmr {
            let e = composition_max_delta.entry(format!("{}", r.fmr)).or_insert(0.0);
            *e = e.max(d);
        }
    }
    let report = Report {
        name: cfg.name.clone(),
        config_hash: config_hash.to_owned(),
        services: cfg.service_ids(),
        n_queries: est.dispositions.len(),
        n_faces: est.labels.len(),
        query_dispositions: dispositions,
        n_precondition_failed: est.precondition_failed.len(),
        n_annotated: est.annotated.len(),
        evaluation,
        composition_max_delta,
    };
    write_json(&ctx.path(REPORT), &report)?;
    fs::write(ctx.path(SUMMARY), summary_text(&report)).map_err(|e| PipelineError::io(&ctx.path(SUMMARY), e))?;
    Ok(vec![REPORT.to_owned(), SUMMARY.to_owned()])
}

fn summary_text(r: &Report) -> String {
    let mut s = format!("run {}\n", r.name);
    let included = r
        .query_dispositions
        .get(QueryDisposition::Included.as_str())
        .copied()
        .unwrap_or(0);
    s += &format!(
        "{} queries ({} included), {} faces, {} failed a precondition, {} annotated\n",
        r.n_queries, included, r.n_faces, r.n_precondition_failed, r.n_annotated
    );
    if let Some(a) = r.evaluation.agreement {
        s += &format!("label agreement {a:.4}\n");
    }
    s += "\nservice      EER est [95% CI]            EER ann [95% CI]            gap\n";
    for v in &r.evaluation.services {
        let ann = match (v.eer_annotated, v.eer_annotated_bounds) {
            (Some(e), Some((lo, hi))) => format!("{e:.4} [{lo:.4}, {hi:.4}]"),
            _ => "n/a".to_owned(),
        };
        let gap = v.discrepancy.map_or("n/a".to_owned(), |d| format!("{d:.4}"));
        s += &format!(
            "{:<12} {:.4} [{:.4}, {:.4}]    {:<27} {}\n",
            v.service.as_str(), v.eer_estimated, v.eer_estimated_bounds.0, v.eer_estimated_bounds.1, ann, gap
        );
    }
    s
}

/// Removes a stage's previous outputs so a failed rerun leaves no stale files.
pub(super) fn clear_outputs(dir: &Path, outputs: &BTreeMap<String, String>) {
    for rel in outputs.keys() {
        let _ = fs::remove_file(dir.join(rel));
    }
}
