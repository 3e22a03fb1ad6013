//! Scene metadata: sidecar ingest, seasonal/cloud filtering and a small STAC
//! Item Search client.
//!
//! Sidecar schema (`<scene_id>.scene.json`, one per scene):
//!
//! ```json
//! {
//!   "scene_id": "S2A_20170210_T32TPQ",
//!   "acquired_at": "2017-02-10T10:20:31Z",
//!   "cloud_cover_pct": 4.2,
//!   "footprint": {"min_x": 600000, "min_y": 4990000, "max_x": 610000, "max_y": 5000000, "epsg": 32632},
//!   "bands": {"B2": "B2.tif", "B12": "B12.tif"}
//! }
//! ```
//!
//! Relative band paths are resolved against the sidecar's directory;
//! `http(s)://` values are remote assets to be fetched with [`fetch_assets`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::raster::{canonical_band_name, RegionOfInterest};

pub const SIDECAR_SUFFIX: &str = ".scene.json";
pub const DEFAULT_MAX_CLOUD_PCT: f64 = 20.0;
const MAX_STAC_PAGES: usize = 10_000;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("{file}: field `{field}`: {message}")]
    MalformedSidecar {
        file: PathBuf,
        field: String,
        message: String,
    },
    #[error("HTTP error from {url}: {}{message}", status.map(|s| format!("status {s}: ")).unwrap_or_default())]
    Http {
        url: String,
        status: Option<u16>,
        message: String,
    },
    #[error("malformed STAC response: {0}")]
    MalformedResponse(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Location of one band file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Asset {
    Local(PathBuf),
    Remote(String),
}

impl Asset {
    pub fn is_remote(&self) -> bool {
        matches!(self, Asset::Remote(_))
    }
}

impl From<String> for Asset {
    fn from(s: String) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            Asset::Remote(s)
        } else {
            Asset::Local(PathBuf::from(s))
        }
    }
}

impl From<Asset> for String {
    fn from(a: Asset) -> Self {
        match a {
            Asset::Local(p) => p.to_string_lossy().into_owned(),
            Asset::Remote(u) => u,
        }
    }
}

impl fmt::Display for Asset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Asset::Local(p) => write!(f, "{}", p.display()),
            Asset::Remote(u) => f.write_str(u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub acquired_at: DateTime<Utc>,
    pub cloud_cover_pct: f64,
    pub band_files: BTreeMap<String, Asset>,
    pub footprint: RegionOfInterest,
}

impl SceneRecord {
    fn sort_key(&self) -> (DateTime<Utc>, &str) {
        (self.acquired_at, &self.scene_id)
    }

    /// Writes `<dir>/<scene_id>.scene.json`, storing local band paths relative to `dir`
    /// where possible.
    pub fn write_sidecar(&self, dir: &Path) -> Result<PathBuf, CatalogError> {
        let bands: BTreeMap<&str, String> = self
            .band_files
            .iter()
            .map(|(k, a)| {
                let v = match a {
                    Asset::Local(p) => p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned(),
                    Asset::Remote(u) => u.clone(),
                };
                (k.as_str(), v)
            })
            .collect();
        let doc = json!({
            "scene_id": self.scene_id,
            "acquired_at": self.acquired_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            "cloud_cover_pct": self.cloud_cover_pct,
            "footprint": self.footprint,
            "bands": bands,
        });
        let path = dir.join(format!("{}{SIDECAR_SUFFIX}", self.scene_id));
        fs::write(&path, serde_json::to_vec_pretty(&doc).expect("sidecar serialises"))?;
        Ok(path)
    }
}

/// Scene records in canonical `(acquired_at, scene_id)` order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    records: Vec<SceneRecord>,
}

impl Catalog {
    pub fn new(mut records: Vec<SceneRecord>) -> Self {
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Self { records }
    }

    pub fn records(&self) -> &[SceneRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<SceneRecord> {
        self.records
    }
}

fn sidecar_error(file: &Path, field: &str, message: impl Into<String>) -> CatalogError {
    CatalogError::MalformedSidecar {
        file: file.to_path_buf(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_sidecar(path: &Path, text: &str) -> Result<SceneRecord, CatalogError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| sidecar_error(path, "<document>", e.to_string()))?;
    let field = |name: &str| doc.get(name).filter(|v| !v.is_null()).ok_or_else(|| sidecar_error(path, name, "missing"));

    let scene_id = field("scene_id")?
        .as_str()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| sidecar_error(path, "scene_id", "must be a non-empty string"))?
        .to_string();
    let acquired_text = field("acquired_at")?
        .as_str()
        .ok_or_else(|| sidecar_error(path, "acquired_at", "must be an RFC 3339 string"))?;
    let acquired_at = DateTime::parse_from_rfc3339(acquired_text)
        .map_err(|e| sidecar_error(path, "acquired_at", e.to_string()))?
        .with_timezone(&Utc);
    let cloud_cover_pct = field("cloud_cover_pct")?
        .as_f64()
        .ok_or_else(|| sidecar_error(path, "cloud_cover_pct", "must be a number"))?;
    if !(0.0..=100.0).contains(&cloud_cover_pct) {
        return Err(sidecar_error(path, "cloud_cover_pct", format!("{cloud_cover_pct} outside [0, 100]")));
    }
    let footprint: RegionOfInterest = serde_json::from_value(field("footprint")?.clone())
        .map_err(|e| sidecar_error(path, "footprint", e.to_string()))?;
    footprint
        .validate()
        .map_err(|e| sidecar_error(path, "footprint", e.to_string()))?;

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let bands_obj = field("bands")?
        .as_object()
        .ok_or_else(|| sidecar_error(path, "bands", "must be an object"))?;
    let mut band_files = BTreeMap::new();
    for (key, value) in bands_obj {
        let name = canonical_band_name(key)
            .ok_or_else(|| sidecar_error(path, "bands", format!("unknown band name {key:?}")))?;
        let loc = value
            .as_str()
            .ok_or_else(|| sidecar_error(path, "bands", format!("{key} must map to a path string")))?;
        let asset = match Asset::from(loc.to_string()) {
            Asset::Local(p) if p.is_relative() => Asset::Local(base.join(p)),
            other => other,
        };
        band_files.insert(name, asset);
    }
    Ok(SceneRecord {
        scene_id,
        acquired_at,
        cloud_cover_pct,
        band_files,
        footprint,
    })
}

/// Reads every `*.scene.json` sidecar below `root`.
pub fn ingest_directory(root: impl AsRef<Path>) -> Result<Catalog, CatalogError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(CatalogError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a directory", root.display()),
        )));
    }
    let mut records = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CatalogError::Io(e.into()))?;
        let is_sidecar = entry.file_type().is_file()
            && entry.file_name().to_string_lossy().ends_with(SIDECAR_SUFFIX);
        if is_sidecar {
            let text = fs::read_to_string(entry.path())?;
            records.push(parse_sidecar(entry.path(), &text)?);
        }
    }
    Ok(Catalog::new(records))
}

/// Calendar month and day, written `MM-DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthDay {
    pub month: u32,
    pub day: u32,
}

impl MonthDay {
    pub fn new(month: u32, day: u32) -> Result<Self, CatalogError> {
        // 2000 is a leap year, so Feb 29 is accepted
        if NaiveDate::from_ymd_opt(2000, month, day).is_none() {
            return Err(CatalogError::InvalidFilter(format!("invalid month-day {month:02}-{day:02}")));
        }
        Ok(Self { month, day })
    }

    fn of(date: NaiveDate) -> Self {
        Self {
            month: date.month(),
            day: date.day(),
        }
    }
}

impl fmt::Display for MonthDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}-{:02}", self.month, self.day)
    }
}

impl std::str::FromStr for MonthDay {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CatalogError::InvalidFilter(format!("expected MM-DD, got {s:?}"));
        let (m, d) = s.trim().split_once('-').ok_or_else(bad)?;
        MonthDay::new(m.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

impl Serialize for MonthDay {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonthDay {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Recurring annual date window, inclusive at both ends (UTC dates).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonalWindow {
    pub label: String,
    pub start: MonthDay,
    pub end: MonthDay,
}

impl SeasonalWindow {
    pub fn new(label: impl Into<String>, start: MonthDay, end: MonthDay) -> Result<Self, CatalogError> {
        if start > end {
            return Err(CatalogError::InvalidFilter(format!(
                "window start {start} is after end {end}"
            )));
        }
        let label = label.into();
        if label.is_empty() || label.contains(['/', '\\']) {
            return Err(CatalogError::InvalidFilter(format!("bad window label {label:?}")));
        }
        Ok(Self { label, start, end })
    }

    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        let md = MonthDay::of(t.date_naive());
        self.start <= md && md <= self.end
    }

    /// The window's instants within `year`: `[start 00:00:00, end 23:59:59]` UTC.
    pub fn interval(&self, year: i32) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        let start = NaiveDate::from_ymd_opt(year, self.start.month, self.start.day)?;
        // Feb 29 end in a non-leap year collapses to Feb 28
        let end = NaiveDate::from_ymd_opt(year, self.end.month, self.end.day)
            .or_else(|| NaiveDate::from_ymd_opt(year, self.end.month, self.end.day - 1))?;
        Some((
            Utc.from_utc_datetime(&start.and_hms_opt(0, 0, 0)?),
            Utc.from_utc_datetime(&end.and_hms_opt(23, 59, 59)?),
        ))
    }
}

/// One seasonal window in one year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bucket {
    pub window: usize,
    pub year: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub windows: Vec<SeasonalWindow>,
    pub first_year: i32,
    pub last_year: i32,
    pub max_cloud_pct: f64,
    pub roi: RegionOfInterest,
}

impl FilterSpec {
    /// January–March and October–December of 2015–2020, cloud cover ≤ 20 %.
    pub fn seasonal_default(roi: RegionOfInterest) -> Self {
        Self {
            windows: default_windows(),
            first_year: 2015,
            last_year: 2020,
            max_cloud_pct: DEFAULT_MAX_CLOUD_PCT,
            roi,
        }
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.windows.is_empty() {
            return Err(CatalogError::InvalidFilter("at least one window is required".into()));
        }
        for w in &self.windows {
            SeasonalWindow::new(w.label.clone(), w.start, w.end)?;
        }
        let mut labels: Vec<&str> = self.windows.iter().map(|w| w.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.windows.len() {
            return Err(CatalogError::InvalidFilter("window labels must be unique".into()));
        }
        if self.first_year > self.last_year {
            return Err(CatalogError::InvalidFilter(format!(
                "empty year range {}..={}",
                self.first_year, self.last_year
            )));
        }
        if !(0.0..=100.0).contains(&self.max_cloud_pct) {
            return Err(CatalogError::InvalidFilter(format!(
                "max_cloud_pct {} outside [0, 100]",
                self.max_cloud_pct
            )));
        }
        self.roi
            .validate()
            .map_err(|e| CatalogError::InvalidFilter(e.to_string()))
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.first_year..=self.last_year
    }

    /// All `(window, year)` buckets, window-major.
    pub fn buckets(&self) -> Vec<Bucket> {
        (0..self.windows.len())
            .flat_map(|window| self.years().map(move |year| Bucket { window, year }))
            .collect()
    }

    /// The first window (in declaration order) containing `t`, if its year is in range.
    pub fn bucket_of(&self, t: &DateTime<Utc>) -> Option<Bucket> {
        if !self.years().contains(&t.year()) {
            return None;
        }
        self.windows.iter().position(|w| w.contains(t)).map(|window| Bucket { window, year: t.year() })
    }

    pub fn accepts(&self, record: &SceneRecord) -> bool {
        self.bucket_of(&record.acquired_at).is_some()
            && record.cloud_cover_pct <= self.max_cloud_pct
            && record.footprint.intersects(&self.roi)
    }
}

pub fn default_windows() -> Vec<SeasonalWindow> {
    vec![
        SeasonalWindow {
            label: "jan-mar".into(),
            start: MonthDay { month: 1, day: 1 },
            end: MonthDay { month: 3, day: 31 },
        },
        SeasonalWindow {
            label: "oct-dec".into(),
            start: MonthDay { month: 10, day: 1 },
            end: MonthDay { month: 12, day: 31 },
        },
    ]
}

/// Keeps the records inside some (window, year) bucket, at or below the cloud
/// threshold, whose footprint intersects the ROI. Order is preserved.
pub fn filter_catalog(catalog: &Catalog, spec: &FilterSpec) -> Catalog {
    Catalog {
        records: catalog.records.iter().filter(|r| spec.accepts(r)).cloned().collect(),
    }
}

// ---------------------------------------------------------------------------
// STAC
// ---------------------------------------------------------------------------

/// STAC Item Search parameters beyond those in [`FilterSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StacQuery {
    /// API root; `/search` is appended.
    pub endpoint: String,
    #[serde(default)]
    pub collections: Vec<String>,
    #[serde(default = "default_page_limit")]
    pub page_limit: usize,
}

fn default_page_limit() -> usize {
    100
}

impl StacQuery {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            collections: Vec::new(),
            page_limit: default_page_limit(),
        }
    }

    fn search_url(&self) -> String {
        format!("{}/search", self.endpoint.trim_end_matches('/'))
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(300)))
        .build()
        .into()
}

fn http_error(url: &str, status: Option<u16>, message: impl Into<String>) -> CatalogError {
    CatalogError::Http {
        url: url.to_string(),
        status,
        message: message.into(),
    }
}

/// Common-name asset keys used by Earth Search style catalogues.
fn asset_band_name(key: &str) -> Option<String> {
    if let Some(name) = canonical_band_name(key) {
        return Some(name);
    }
    let name = match key.to_ascii_lowercase().as_str() {
        "coastal" => "B1",
        "blue" => "B2",
        "green" => "B3",
        "red" => "B4",
        "rededge1" => "B5",
        "rededge2" => "B6",
        "rededge3" => "B7",
        "nir" => "B8",
        "nir08" => "B8A",
        "nir09" => "B9",
        "cirrus" => "B10",
        "swir16" => "B11",
        "swir22" => "B12",
        _ => return None,
    };
    Some(name.to_string())
}

fn item_to_record(item: &Value) -> Result<SceneRecord, CatalogError> {
    let bad = |m: &str| CatalogError::MalformedResponse(m.to_string());
    let id = item
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("item without string id"))?;
    let props = item
        .get("properties")
        .and_then(Value::as_object)
        .ok_or_else(|| CatalogError::MalformedResponse(format!("item {id}: missing properties")))?;
    let when = props
        .get("datetime")
        .and_then(Value::as_str)
        .or_else(|| props.get("start_datetime").and_then(Value::as_str))
        .ok_or_else(|| CatalogError::MalformedResponse(format!("item {id}: missing datetime")))?;
    let acquired_at = DateTime::parse_from_rfc3339(when)
        .map_err(|e| CatalogError::MalformedResponse(format!("item {id}: datetime: {e}")))?
        .with_timezone(&Utc);
    let cloud_cover_pct = props
        .get("eo:cloud_cover")
        .and_then(Value::as_f64)
        .ok_or_else(|| CatalogError::MalformedResponse(format!("item {id}: missing eo:cloud_cover")))?;
    let bbox: Vec<f64> = item
        .get("bbox")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_f64).collect())
        .unwrap_or_default();
    let footprint = match bbox.len() {
        4 => RegionOfInterest::new(bbox[0], bbox[1], bbox[2], bbox[3], 4326),
        6 => RegionOfInterest::new(bbox[0], bbox[1], bbox[3], bbox[4], 4326),
        _ => return Err(CatalogError::MalformedResponse(format!("item {id}: bbox must have 4 or 6 numbers"))),
    }
    .map_err(|e| CatalogError::MalformedResponse(format!("item {id}: bbox: {e}")))?;

    let mut band_files = BTreeMap::new();
    if let Some(assets) = item.get("assets").and_then(Value::as_object) {
        for (key, asset) in assets {
            let (Some(name), Some(href)) = (asset_band_name(key), asset.get("href").and_then(Value::as_str)) else {
                continue;
            };
            band_files.entry(name).or_insert_with(|| Asset::from(href.to_string()));
        }
    }
    Ok(SceneRecord {
        scene_id: id.to_string(),
        acquired_at,
        cloud_cover_pct,
        band_files,
        footprint,
    })
}

enum NextPage {
    Get(String),
    Post(String, Value),
}

fn next_link(page: &Value, previous_body: &Value) -> Option<NextPage> {
    let link = page
        .get("links")?
        .as_array()?
        .iter()
        .find(|l| l.get("rel").and_then(Value::as_str) == Some("next"))?;
    let href = link.get("href")?.as_str()?.to_string();
    let method = link.get("method").and_then(Value::as_str).unwrap_or("GET");
    if method.eq_ignore_ascii_case("POST") {
        let mut body = match link.get("body") {
            Some(b) if link.get("merge").and_then(Value::as_bool).unwrap_or(false) => {
                let mut merged = previous_body.clone();
                if let (Some(m), Some(extra)) = (merged.as_object_mut(), b.as_object()) {
                    for (k, v) in extra {
                        m.insert(k.clone(), v.clone());
                    }
                }
                merged
            }
            Some(b) => b.clone(),
            None => previous_body.clone(),
        };
        if body.is_null() {
            body = json!({});
        }
        Some(NextPage::Post(href, body))
    } else {
        Some(NextPage::Get(href))
    }
}

fn read_json_response(url: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<Value, CatalogError> {
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .with_config()
        .limit(256 * 1024 * 1024)
        .read_to_string()
        .map_err(|e| http_error(url, Some(status), e.to_string()))?;
    if !(200..300).contains(&status) {
        let excerpt: String = text.chars().take(200).collect();
        return Err(http_error(url, Some(status), excerpt));
    }
    serde_json::from_str(&text).map_err(|e| CatalogError::MalformedResponse(format!("{url}: {e}")))
}

/// Runs one STAC Item Search per `(window, year)` interval of `spec`, following
/// `next` links until exhausted. Results are de-duplicated by id and returned in
/// `(acquired_at, scene_id)` order. The ROI must be in EPSG:4326.
pub fn stac_search(query: &StacQuery, spec: &FilterSpec) -> Result<Vec<SceneRecord>, CatalogError> {
    spec.validate()?;
    if spec.roi.epsg != 4326 {
        return Err(CatalogError::InvalidFilter(format!(
            "STAC search needs an EPSG:4326 ROI, got EPSG:{}",
            spec.roi.epsg
        )));
    }
    let agent = agent();
    let url = query.search_url();
    let mut found: BTreeMap<String, SceneRecord> = BTreeMap::new();
    for bucket in spec.buckets() {
        let Some((from, to)) = spec.windows[bucket.window].interval(bucket.year) else {
            continue;
        };
        let mut body = json!({
            "bbox": [spec.roi.min_x, spec.roi.min_y, spec.roi.max_x, spec.roi.max_y],
            "datetime": format!(
                "{}/{}",
                from.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                to.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
            ),
            "query": {"eo:cloud_cover": {"lte": spec.max_cloud_pct}},
            "limit": query.page_limit,
        });
        if !query.collections.is_empty() {
            body["collections"] = json!(query.collections);
        }
        let mut request = NextPage::Post(url.clone(), body);
        for _ in 0..MAX_STAC_PAGES {
            let (req_url, sent_body, resp) = match request {
                NextPage::Post(u, b) => {
                    let r = agent
                        .post(&u)
                        .header("Content-Type", "application/json")
                        .header("Accept", "application/geo+json")
                        .send(serde_json::to_vec(&b).expect("search body serialises"));
                    (u, b, r)
                }
                NextPage::Get(u) => {
                    let r = agent.get(&u).header("Accept", "application/geo+json").call();
                    (u, Value::Null, r)
                }
            };
            let resp = resp.map_err(|e| http_error(&req_url, None, e.to_string()))?;
            let page = read_json_response(&req_url, resp)?;
            let features = page
                .get("features")
                .and_then(Value::as_array)
                .ok_or_else(|| CatalogError::MalformedResponse(format!("{req_url}: missing features array")))?;
            for item in features {
                let rec = item_to_record(item)?;
                found.entry(rec.scene_id.clone()).or_insert(rec);
            }
            if features.is_empty() {
                break;
            }
            match next_link(&page, &sent_body) {
                Some(next) => request = next,
                None => break,
            }
        }
    }
    Ok(Catalog::new(found.into_values().collect()).into_records())
}

fn remote_file_name(scene_id: &str, band: &str, url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let ext = path
        .rsplit('/')
        .next()
        .and_then(|f| f.rsplit_once('.').map(|(_, e)| e))
        .filter(|e| !e.is_empty() && e.len() <= 5 && e.chars().all(|c| c.is_ascii_alphanumeric()))
        .unwrap_or("tif");
    format!("{scene_id}_{band}.{ext}")
}

fn download(agent: &ureq::Agent, url: &str, target: &Path) -> Result<(), CatalogError> {
    let resp = agent.get(url).call().map_err(|e| http_error(url, None, e.to_string()))?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(http_error(url, Some(status), "download failed"));
    }
    let expected_len = resp
        .headers()
        .get("content-length")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    let partial = target.with_extension("part");
    let result = (|| -> Result<(), CatalogError> {
        let mut file = fs::File::create(&partial)?;
        let mut reader = resp.into_body().into_with_config().limit(u64::MAX).reader();
        let mut buf = vec![0u8; 64 * 1024];
        let mut written = 0u64;
        loop {
            let n = reader
                .read(&mut buf)
                .map_err(|e| http_error(url, Some(status), format!("transfer interrupted: {e}")))?;
            if n == 0 {
                break;
            }
            file.write_all(&buf[..n])?;
            written += n as u64;
        }
        if let Some(len) = expected_len {
            if written != len {
                return Err(http_error(
                    url,
                    Some(status),
                    format!("transfer interrupted: received {written} of {len} bytes"),
                ));
            }
        }
        file.sync_all()?;
        drop(file);
        fs::rename(&partial, target)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&partial);
    }
    result
}

/// Downloads every remote asset of `record` into `dest` and returns the record
/// with local paths. On failure no partial files remain for the failing asset.
pub fn fetch_assets(record: &SceneRecord, dest: impl AsRef<Path>) -> Result<SceneRecord, CatalogError> {
    if !record.band_files.values().any(Asset::is_remote) {
        return Ok(record.clone());
    }
    let dest = dest.as_ref();
    fs::create_dir_all(dest)?;
    let agent = agent();
    let mut out = record.clone();
    for (band, asset) in &record.band_files {
        let Asset::Remote(url) = asset else { continue };
        let target = dest.join(remote_file_name(&record.scene_id, band, url));
        download(&agent, url, &target)?;
        out.band_files.insert(band.clone(), Asset::Local(target));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roi() -> RegionOfInterest {
        RegionOfInterest::new(0.0, 0.0, 100.0, 100.0, 32632).unwrap()
    }

    fn record(id: &str, when: &str, cloud: f64) -> SceneRecord {
        SceneRecord {
            scene_id: id.into(),
            acquired_at: DateTime::parse_from_rfc3339(when).unwrap().with_timezone(&Utc),
            cloud_cover_pct: cloud,
            band_files: BTreeMap::new(),
            footprint: roi(),
        }
    }

    #[test]
    fn default_windows_accept_and_reject() {
        let spec = FilterSpec::seasonal_default(roi());
        let cat = Catalog::new(vec![
            record("a", "2017-02-10T10:00:00Z", 1.0),
            record("b", "2017-06-15T10:00:00Z", 1.0),
        ]);
        let kept = filter_catalog(&cat, &spec);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.records()[0].scene_id, "a");
    }

    #[test]
    fn window_bounds_are_inclusive() {
        let spec = FilterSpec::seasonal_default(roi());
        let cat = Catalog::new(vec![
            record("end", "2018-03-31T23:59:59Z", 0.0),
            record("after", "2018-04-01T00:00:00Z", 0.0),
            record("start", "2018-10-01T00:00:00Z", 0.0),
            record("dec31", "2020-12-31T23:59:59Z", 0.0),
            record("next-year", "2021-01-01T00:00:00Z", 0.0),
        ]);
        let ids: Vec<_> = filter_catalog(&cat, &spec).records().iter().map(|r| r.scene_id.clone()).collect();
        assert_eq!(ids, ["end", "start", "dec31"]);
    }

    #[test]
    fn identity_filter() {
        let spec = FilterSpec {
            windows: vec![SeasonalWindow::new("year", MonthDay::new(1, 1).unwrap(), MonthDay::new(12, 31).unwrap()).unwrap()],
            first_year: 2015,
            last_year: 2020,
            max_cloud_pct: 100.0,
            roi: roi(),
        };
        let cat = Catalog::new(vec![
            record("a", "2015-05-01T00:00:00Z", 100.0),
            record("b", "2019-08-01T00:00:00Z", 55.0),
        ]);
        assert_eq!(filter_catalog(&cat, &spec), cat);
    }

    #[test]
    fn default_configuration_has_twelve_buckets() {
        let spec = FilterSpec::seasonal_default(roi());
        let b = spec.buckets();
        assert_eq!(b.len(), 12);
        assert_eq!(b[0], Bucket { window: 0, year: 2015 });
        assert_eq!(b[11], Bucket { window: 1, year: 2020 });
    }

    #[test]
    fn cloud_and_footprint_rules() {
        let spec = FilterSpec::seasonal_default(roi());
        let mut far = record("far", "2016-01-05T00:00:00Z", 0.0);
        far.footprint = RegionOfInterest::new(500.0, 500.0, 600.0, 600.0, 32632).unwrap();
        let cat = Catalog::new(vec![far, record("cloudy", "2016-01-06T00:00:00Z", 20.5), record("ok", "2016-01-07T00:00:00Z", 20.0)]);
        let ids: Vec<_> = filter_catalog(&cat, &spec).records().iter().map(|r| r.scene_id.clone()).collect();
        assert_eq!(ids, ["ok"]);
    }

    #[test]
    fn month_day_parsing() {
        assert_eq!("03-31".parse::<MonthDay>().unwrap(), MonthDay { month: 3, day: 31 });
        assert!("02-30".parse::<MonthDay>().is_err());
        assert!("13-01".parse::<MonthDay>().is_err());
        assert!(SeasonalWindow::new("x", MonthDay::new(5, 1).unwrap(), MonthDay::new(4, 1).unwrap()).is_err());
    }

    #[test]
    fn leap_day_window_end_in_common_year() {
        let w = SeasonalWindow::new("feb", MonthDay::new(2, 1).unwrap(), MonthDay::new(2, 29).unwrap()).unwrap();
        let (_, end) = w.interval(2019).unwrap();
        assert_eq!(end.to_rfc3339(), "2019-02-28T23:59:59+00:00");
    }

    #[test]
    fn asset_key_mapping() {
        assert_eq!(asset_band_name("B02").as_deref(), Some("B2"));
        assert_eq!(asset_band_name("swir22").as_deref(), Some("B12"));
        assert_eq!(asset_band_name("thumbnail"), None);
        assert_eq!(remote_file_name("S1", "B4", "https://x/y/B04.tif?sig=1"), "S1_B4.tif");
        assert_eq!(remote_file_name("S1", "B4", "https://x/y/B04"), "S1_B4.tif");
    }

    #[test]
    fn sidecar_validation_messages() {
        let p = Path::new("/tmp/x.scene.json");
        let err = parse_sidecar(p, r#"{"scene_id":"a","cloud_cover_pct":1,"footprint":{"min_x":0,"min_y":0,"max_x":1,"max_y":1,"epsg":4326},"bands":{}}"#)
            .unwrap_err();
        assert!(matches!(err, CatalogError::MalformedSidecar { ref field, .. } if field == "acquired_at"), "{err}");
        let err = parse_sidecar(p, r#"{"scene_id":"a","acquired_at":"2017-01-01T00:00:00Z","cloud_cover_pct":120,"footprint":{"min_x":0,"min_y":0,"max_x":1,"max_y":1,"epsg":4326},"bands":{}}"#)
            .unwrap_err();
        assert!(matches!(err, CatalogError::MalformedSidecar { ref field, .. } if field == "cloud_cover_pct"));
        let err = parse_sidecar(p, r#"{"scene_id":"a","acquired_at":"2017-01-01T00:00:00Z","cloud_cover_pct":1,"footprint":{"min_x":0,"min_y":0,"max_x":1,"max_y":1,"epsg":4326},"bands":{"B99":"x.tif"}}"#)
            .unwrap_err();
        assert!(matches!(err, CatalogError::MalformedSidecar { ref field, .. } if field == "bands"));
    }

    fn arb_record() -> impl Strategy<Value = SceneRecord> {
        (0u32..6, 1u32..13, 1u32..29, 0u32..24, 0.0f64..100.0, 0u32..1000).prop_map(|(y, m, d, h, cloud, id)| SceneRecord {
            scene_id: format!("s{id}"),
            acquired_at: Utc.with_ymd_and_hms(2014 + y as i32, m, d, h, 0, 0).unwrap(),
            cloud_cover_pct: cloud,
            band_files: BTreeMap::new(),
            footprint: roi(),
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(recs in proptest::collection::vec(arb_record(), 0..40), max_cloud in 0.0f64..100.0) {
            let mut spec = FilterSpec::seasonal_default(roi());
            spec.max_cloud_pct = max_cloud;
            let cat = Catalog::new(recs);
            let once = filter_catalog(&cat, &spec);
            prop_assert_eq!(filter_catalog(&once, &spec), once.clone());
            for r in once.records() {
                prop_assert!(spec.bucket_of(&r.acquired_at).is_some());
            }
        }

        #[test]
        fn raising_cloud_threshold_never_removes(recs in proptest::collection::vec(arb_record(), 0..40), a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut spec = FilterSpec::seasonal_default(roi());
            let cat = Catalog::new(recs);
            spec.max_cloud_pct = lo;
            let low: Vec<_> = filter_catalog(&cat, &spec).into_records();
            spec.max_cloud_pct = hi;
            let high = filter_catalog(&cat, &spec).into_records();
            for r in &low {
                prop_assert!(high.contains(r));
            }
        }
    }
}
