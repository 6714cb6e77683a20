//! Name lists, queries, image sourcing through a provider, and near-duplicate
//! removal.
//!
//! Images are only ever referenced by location; nothing here reads or keeps
//! image bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Months, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::types::{DemographicKey, QueryId};
use crate::union_find::UnionFind;

pub const NAME_LIST_HEADER: [&str; 5] = ["name", "gender", "group", "age_band", "country"];
pub const DEFAULT_WINDOW_MONTHS: u32 = 12;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: duplicate name {name:?} (same as line {first_line})")]
    DuplicateName {
        name: String,
        line: u64,
        first_line: u64,
    },
    #[error("line {line}: unknown {field} value {value:?}")]
    UnknownDemographic {
        line: u64,
        field: &'static str,
        value: String,
    },
    #[error("{0}")]
    Validation(String),
    #[error("image provider failed for {query:?}: {source}")]
    Fetch {
        query: String,
        #[source]
        source: ProviderError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CorpusError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, CorpusError::Fetch { source, .. } if source.retryable)
    }
}

/// The finite set of values each demographic field may take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicSchema {
    pub genders: Vec<String>,
    pub groups: Vec<String>,
    /// Include `""` to allow an unspecified age band.
    pub age_bands: Vec<String>,
}

impl Default for DemographicSchema {
    /// Covers both the race-based celebrity grouping and the region-based
    /// athlete grouping.
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            genders: v(&["female", "male"]),
            groups: v(&["asian", "black", "white", "africa", "east_asia", "europe"]),
            age_bands: v(&["", "junior", "senior"]),
        }
    }
}

impl DemographicSchema {
    fn check(&self, line: u64, key: &DemographicKey) -> Result<(), CorpusError> {
        let fields: [(&'static str, &Vec<String>, &String); 3] = [
            ("gender", &self.genders, &key.gender),
            ("group", &self.groups, &key.group),
            ("age_band", &self.age_bands, &key.age_band),
        ];
        for (field, allowed, value) in fields {
            if !allowed.iter().any(|a| a == value) {
                return Err(CorpusError::UnknownDemographic {
                    line,
                    field,
                    value: value.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameEntry {
    pub name: String,
    pub demographic: DemographicKey,
    pub country: Option<String>,
}

/// Key used to detect the same person listed twice: diacritics stripped,
/// lowercased, punctuation dropped, whitespace collapsed.
pub fn normalize_name(name: &str) -> String {
    let folded: String = name
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    collapse_whitespace(&folded)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Deserialize)]
struct NameRow {
    name: String,
    gender: String,
    group: String,
    age_band: String,
    country: String,
}

pub fn load_name_list(
    path: impl AsRef<Path>,
    schema: &DemographicSchema,
) -> Result<Vec<NameEntry>, CorpusError> {
    parse_name_list(File::open(path)?, schema)
}

pub fn parse_name_list<R: Read>(
    reader: R,
    schema: &DemographicSchema,
) -> Result<Vec<NameEntry>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(parse_err(1, e)),
    };
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    if headers.iter().ne(NAME_LIST_HEADER.iter().copied()) {
        return Err(CorpusError::Parse {
            line: 1,
            message: format!(
                "expected header {:?}, got {:?}",
                NAME_LIST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut entries = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for result in rdr.deserialize::<NameRow>() {
        let row = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(parse_err(line, e));
            }
        };
        let line = entries.len() as u64 + 2;
        let name = collapse_whitespace(&row.name);
        if name.is_empty() {
            return Err(CorpusError::Parse {
                line,
                message: "empty name".into(),
            });
        }
        let demographic = DemographicKey {
            gender: row.gender,
            group: row.group,
            age_band: row.age_band,
        };
        schema.check(line, &demographic)?;
        let key = normalize_name(&name);
        if let Some(&first_line) = seen.get(&key) {
            return Err(CorpusError::DuplicateName {
                name,
                line,
                first_line,
            });
        }
        seen.insert(key, line);
        let country = Some(collapse_whitespace(&row.country)).filter(|c| !c.is_empty());
        entries.push(NameEntry {
            name,
            demographic,
            country,
        });
    }
    Ok(entries)
}

fn parse_err(line: u64, e: csv::Error) -> CorpusError {
    CorpusError::Parse {
        line,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: QueryId,
    pub query_string: String,
    pub demographic: DemographicKey,
}

/// `<name>` or `<name> <country>`, single-spaced.
pub fn build_query(query_id: QueryId, entry: &NameEntry) -> Query {
    let mut query_string = collapse_whitespace(&entry.name);
    if let Some(country) = &entry.country {
        let country = collapse_whitespace(country);
        if !country.is_empty() {
            query_string.push(' ');
            query_string.push_str(&country);
        }
    }
    Query {
        query_id,
        query_string,
        demographic: entry.demographic.clone(),
    }
}

/// One query per entry, ids assigned in list order.
pub fn plan_queries(entries: &[NameEntry]) -> Vec<Query> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| build_query(QueryId(i as u32), e))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub query_id: QueryId,
    pub location: String,
    pub published_at: Option<NaiveDate>,
}

/// A search hit as returned by a provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderHit {
    pub url: String,
    #[serde(default, with = "iso_date_opt")]
    pub published_at: Option<NaiveDate>,
}

#[derive(Debug, Clone, Error)]
#[error("{message}")]
pub struct ProviderError {
    pub message: String,
    pub retryable: bool,
}

/// Recency window ending at `as_of`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecencyWindow {
    pub as_of: NaiveDate,
    pub months: u32,
}

impl RecencyWindow {
    pub fn start(&self) -> NaiveDate {
        self.as_of
            .checked_sub_months(Months::new(self.months))
            .unwrap_or(NaiveDate::MIN)
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start() && date <= self.as_of
    }
}

pub trait ImageProvider: Sync {
    fn search(
        &self,
        query_string: &str,
        max_results: usize,
        window: &RecencyWindow,
    ) -> Result<Vec<ProviderHit>, ProviderError>;
}

/// Provider backed by a local JSON manifest mapping query strings to hits.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ManifestProvider {
    pub entries: BTreeMap<String, Vec<ProviderHit>>,
}

impl ManifestProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        serde_json::from_reader(file)
            .map_err(|e| CorpusError::Validation(format!("image manifest: {e}")))
    }
}

impl ImageProvider for ManifestProvider {
    fn search(
        &self,
        query_string: &str,
        max_results: usize,
        _window: &RecencyWindow,
    ) -> Result<Vec<ProviderHit>, ProviderError> {
        Ok(self
            .entries
            .get(query_string)
            .map(|hits| hits.iter().take(max_results).cloned().collect())
            .unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FetchOptions {
    pub window: RecencyWindow,
    pub max_results: usize,
    /// Keep hits without a publication date (the provider vouches recency).
    pub keep_undated: bool,
}

impl FetchOptions {
    pub fn new(as_of: NaiveDate) -> Self {
        Self {
            window: RecencyWindow {
                as_of,
                months: DEFAULT_WINDOW_MONTHS,
            },
            max_results: 100,
            keep_undated: true,
        }
    }
}

pub fn fetch_image_refs(
    query: &Query,
    provider: &dyn ImageProvider,
    opts: &FetchOptions,
) -> Result<Vec<ImageRef>, CorpusError> {
    if opts.window.months < 1 {
        return Err(CorpusError::Validation("window_months must be >= 1".into()));
    }
    let hits = provider
        .search(&query.query_string, opts.max_results, &opts.window)
        .map_err(|source| CorpusError::Fetch {
            query: query.query_string.clone(),
            source,
        })?;
    Ok(hits
        .into_iter()
        .filter(|h| match h.published_at {
            Some(d) => opts.window.contains(d),
            None => opts.keep_undated,
        })
        .map(|h| ImageRef {
            query_id: query.query_id,
            location: h.url,
            published_at: h.published_at,
        })
        .collect())
}

/// Fetches every query with at most `parallelism` provider calls in flight.
/// Results come back in query order.
pub fn fetch_all(
    queries: &[Query],
    provider: &dyn ImageProvider,
    opts: &FetchOptions,
    parallelism: usize,
) -> Vec<Result<Vec<ImageRef>, CorpusError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<ImageRef>, CorpusError>>>> =
        queries.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1).min(queries.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= queries.len() {
                    break;
                }
                let r = fetch_image_refs(&queries[i], provider, opts);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// Groups items whose cosine similarity exceeds `threshold` (transitively) and
/// keeps the medoid of each group. Medoid ties go to the smallest id.
pub fn deduplicate<I>(items: &[(I, Vec<f64>)], threshold: f64) -> Result<BTreeSet<I>, CorpusError>
where
    I: Ord + Clone + std::fmt::Debug,
{
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CorpusError::Validation(format!(
            "dedup threshold must be in (0, 1), got {threshold}"
        )));
    }
    let mut sorted: Vec<&(I, Vec<f64>)> = items.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CorpusError::Validation(format!("duplicate item id {:?}", w[0].0)));
    }
    let Some(first) = sorted.first() else {
        return Ok(BTreeSet::new());
    };
    let dim = first.1.len();
    let mut unit = Vec::with_capacity(sorted.len());
    for (id, v) in &sorted {
        if v.len() != dim {
            return Err(CorpusError::Validation(format!(
                "embedding of {id:?} has dimension {}, expected {dim}",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(CorpusError::Validation(format!("embedding of {id:?} has zero norm")));
        }
        unit.push(v.iter().map(|x| x / norm).collect::<Vec<_>>());
    }

    let n = unit.len();
    let cos = |a: usize, b: usize| -> f64 { unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum() };
    let mut uf = UnionFind::new(n);
    for a in 0..n {
        for b in a + 1..n {
            if cos(a, b) > threshold {
                uf.union(a, b);
            }
        }
    }

    let mut kept = BTreeSet::new();
    for group in uf.components() {
        let medoid = group
            .iter()
            .map(|&i| {
                let cost: f64 = group.iter().map(|&j| 1.0 - cos(i, j)).sum();
                (i, cost)
            })
            // `group` is ascending, so the first minimum has the smallest id.
            .fold(None::<(usize, f64)>, |best, (i, c)| match best {
                Some((_, bc)) if bc <= c => best,
                _ => Some((i, c)),
            })
            .map(|(i, _)| i)
            .expect("components are non-empty");
        kept.insert(sorted[medoid].0.clone());
    }
    Ok(kept)
}

mod iso_date_opt {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<NaiveDate>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&d.format("%Y-%m-%d").to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDate>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        match raw.as_deref().map(str::trim) {
            None | Some("") => Ok(None),
            Some(s) => parse_iso_date(s).map(Some).map_err(serde::de::Error::custom),
        }
    }
}

/// Accepts a calendar date or a full RFC 3339 timestamp.
pub fn parse_iso_date(s: &str) -> Result<NaiveDate, String> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d);
    }
    DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.date_naive())
        .map_err(|e| format!("invalid ISO-8601 date {s:?}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> DemographicSchema {
        DemographicSchema::default()
    }

    fn entry(name: &str, country: Option<&str>) -> NameEntry {
        NameEntry {
            name: name.into(),
            demographic: DemographicKey::new("female", "black", ""),
            country: country.map(Into::into),
        }
    }

    #[test]
    fn loads_celebrity_scale_list() {
        let mut csv = String::from("name,gender,group,age_band,country\n");
        let groups = [
            ("female", "asian", ""),
            ("male", "asian", ""),
            ("female", "black", ""),
            ("male", "black", ""),
            ("female", "white", "junior"),
            ("male", "white", "junior"),
            ("female", "white", "senior"),
            ("male", "white", "senior"),
        ];
        for (g, (gender, group, age)) in groups.iter().enumerate() {
            for i in 0..10 {
                csv.push_str(&format!("Person {g} {i},{gender},{group},{age},\n"));
            }
        }
        let entries = parse_name_list(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(entries.len(), 80);
        assert!(entries.iter().all(|e| e.country.is_none()));
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_name_list(&b""[..], &schema()).unwrap().is_empty());
        let header_only = "name,gender,group,age_band,country\n";
        assert!(parse_name_list(header_only.as_bytes(), &schema()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_names_after_normalization_are_rejected() {
        let csv = "name,gender,group,age_band,country\n\
                   A. Smith,male,white,,\n\
                   a smith,male,white,,\n";
        match parse_name_list(csv.as_bytes(), &schema()) {
            Err(CorpusError::DuplicateName { line, first_line, .. }) => {
                assert_eq!((line, first_line), (3, 2));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn diacritics_are_folded() {
        assert_eq!(normalize_name("José  Núñez"), "jose nunez");
        assert_eq!(normalize_name("Zoë"), normalize_name("zoe"));
    }

    #[test]
    fn unknown_demographic_and_malformed_rows() {
        let csv = "name,gender,group,age_band,country\nX Y,male,martian,,\n";
        assert!(matches!(
            parse_name_list(csv.as_bytes(), &schema()),
            Err(CorpusError::UnknownDemographic { line: 2, field: "group", .. })
        ));
        let csv = "name,gender,group,age_band,country\nX Y,male\n";
        assert!(matches!(
            parse_name_list(csv.as_bytes(), &schema()),
            Err(CorpusError::Parse { line: 2, .. })
        ));
        let csv = "name,gender\nX Y,male\n";
        assert!(matches!(
            parse_name_list(csv.as_bytes(), &schema()),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn query_strings() {
        assert_eq!(build_query(QueryId(0), &entry("Jane Doe", None)).query_string, "Jane Doe");
        assert_eq!(
            build_query(QueryId(0), &entry("Jane Doe", Some("Kenya"))).query_string,
            "Jane Doe Kenya"
        );
        assert_eq!(
            build_query(QueryId(0), &entry("Jane  Doe", None)).query_string,
            "Jane Doe"
        );
    }

    struct FixedProvider(Vec<ProviderHit>);

    impl ImageProvider for FixedProvider {
        fn search(
            &self,
            _q: &str,
            max: usize,
            _w: &RecencyWindow,
        ) -> Result<Vec<ProviderHit>, ProviderError> {
            Ok(self.0.iter().take(max).cloned().collect())
        }
    }

    struct FailingProvider;

    impl ImageProvider for FailingProvider {
        fn search(
            &self,
            _q: &str,
            _max: usize,
            _w: &RecencyWindow,
        ) -> Result<Vec<ProviderHit>, ProviderError> {
            Err(ProviderError {
                message: "503".into(),
                retryable: true,
            })
        }
    }

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn window_filter_drops_old_hits_and_preserves_order() {
        // 90 hits dated within the last year, 10 older than the window.
        let as_of = date(2024, 6, 30);
        let mut hits = Vec::new();
        for i in 0..100 {
            let published = if i % 10 == 3 {
                date(2022, 1, 1 + (i / 10) as u32)
            } else {
                date(2024, 1, 1 + (i % 28) as u32)
            };
            hits.push(ProviderHit {
                url: format!("https://example.org/{i}.jpg"),
                published_at: Some(published),
            });
        }
        let q = build_query(QueryId(7), &entry("Jane Doe", None));
        let refs = fetch_image_refs(&q, &FixedProvider(hits.clone()), &FetchOptions::new(as_of)).unwrap();
        assert_eq!(refs.len(), 90);
        assert!(refs.iter().all(|r| r.query_id == QueryId(7)));
        let expected: Vec<_> = hits
            .iter()
            .filter(|h| h.published_at.unwrap().year_ce().1 == 2024)
            .map(|h| h.url.clone())
            .collect();
        assert_eq!(refs.iter().map(|r| r.location.clone()).collect::<Vec<_>>(), expected);

        let mut wide = FetchOptions::new(as_of);
        wide.window.months = 60;
        assert_eq!(fetch_image_refs(&q, &FixedProvider(hits), &wide).unwrap().len(), 100);
    }

    use chrono::Datelike;

    #[test]
    fn undated_hits_follow_flag_and_failures_are_retryable() {
        let hits = vec![ProviderHit {
            url: "u".into(),
            published_at: None,
        }];
        let q = build_query(QueryId(0), &entry("Jane Doe", None));
        let mut opts = FetchOptions::new(date(2024, 1, 1));
        assert_eq!(fetch_image_refs(&q, &FixedProvider(hits.clone()), &opts).unwrap().len(), 1);
        opts.keep_undated = false;
        assert!(fetch_image_refs(&q, &FixedProvider(hits), &opts).unwrap().is_empty());
        assert!(fetch_image_refs(&q, &FixedProvider(vec![]), &opts).unwrap().is_empty());
        let err = fetch_image_refs(&q, &FailingProvider, &opts).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn manifest_provider_parses_dates() {
        let json = r#"{"Jane Doe": [
            {"url": "a.jpg", "published_at": "2024-03-01"},
            {"url": "b.jpg", "published_at": "2024-03-02T10:00:00Z"},
            {"url": "c.jpg"}
        ]}"#;
        let p: ManifestProvider = serde_json::from_str(json).unwrap();
        let w = RecencyWindow {
            as_of: date(2024, 6, 1),
            months: 12,
        };
        let hits = p.search("Jane Doe", 10, &w).unwrap();
        assert_eq!(hits[1].published_at, Some(date(2024, 3, 2)));
        assert_eq!(hits[2].published_at, None);
        assert!(p.search("Nobody", 10, &w).unwrap().is_empty());
    }

    #[test]
    fn fetch_all_keeps_query_order() {
        let hits = vec![ProviderHit {
            url: "u".into(),
            published_at: None,
        }];
        let queries: Vec<Query> = (0..20)
            .map(|i| build_query(QueryId(i), &entry(&format!("P {i}"), None)))
            .collect();
        let out = fetch_all(&queries, &FixedProvider(hits), &FetchOptions::new(date(2024, 1, 1)), 4);
        for (i, r) in out.into_iter().enumerate() {
            assert_eq!(r.unwrap()[0].query_id, QueryId(i as u32));
        }
    }

    #[test]
    fn dedup_examples() {
        let orth: Vec<(u32, Vec<f64>)> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                (i as u32, v)
            })
            .collect();
        assert_eq!(deduplicate(&orth, 0.9).unwrap().len(), 4);

        let two_same = vec![
            (0u32, vec![1.0, 0.0]),
            (1, vec![1.0, 0.0]),
            (2, vec![0.0, 1.0]),
        ];
        assert_eq!(deduplicate(&two_same, 0.9).unwrap(), BTreeSet::from([0, 2]));

        // v, v, v' with cos(v, v') = 0.95. Summed cosine distances: the two
        // copies of v each cost 0.05, v' costs 0.10; the tie goes to id 0.
        let s = (1.0f64 - 0.95 * 0.95).sqrt();
        let group = vec![
            (5u32, vec![0.95, s]),
            (1, vec![1.0, 0.0]),
            (3, vec![1.0, 0.0]),
        ];
        assert_eq!(deduplicate(&group, 0.9).unwrap(), BTreeSet::from([1]));
    }

    #[test]
    fn dedup_validation() {
        assert!(deduplicate(&[(0u32, vec![0.0, 0.0])], 0.9).is_err());
        assert!(deduplicate(&[(0u32, vec![1.0]), (1, vec![1.0, 0.0])], 0.9).is_err());
        assert!(deduplicate(&[(0u32, vec![1.0])], 1.0).is_err());
        assert!(deduplicate::<u32>(&[], 0.9).unwrap().is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn items() -> impl Strategy<Value = Vec<(u32, Vec<f64>)>> {
            prop::collection::vec(
                prop::collection::vec(-1.0f64..1.0, 3).prop_filter("non-zero", |v| {
                    v.iter().map(|x| x * x).sum::<f64>() > 1e-3
                }),
                0..25,
            )
            .prop_map(|vs| vs.into_iter().enumerate().map(|(i, v)| (i as u32, v)).collect())
        }

        proptest! {
            #[test]
            fn dedup_is_idempotent(items in items(), thr in 0.5f64..0.99) {
                let kept = deduplicate(&items, thr).unwrap();
                let again: Vec<_> = items.iter().filter(|(id, _)| kept.contains(id)).cloned().collect();
                prop_assert_eq!(deduplicate(&again, thr).unwrap(), kept);
            }

            #[test]
            fn dedup_is_order_invariant(items in items(), thr in 0.5f64..0.99) {
                let mut rev = items.clone();
                rev.reverse();
                prop_assert_eq!(deduplicate(&items, thr).unwrap(), deduplicate(&rev, thr).unwrap());
            }
        }
    }
}
