//! Dataset data model: retouching types, quantized levels, annotations,
//! manifest records, cleaning tags, splits and reduced sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("magnitude {0} is not one of 0, 30, 60, 90")]
    InvalidMagnitude(u16),
    #[error("level class {0} outside 0..=3")]
    InvalidClass(u8),
    #[error("subset kind {0} outside 1..=4")]
    InvalidKind(u8),
    #[error("cannot parse annotation: {0}")]
    Parse(String),
}

/// The four retouching operations, in canonical annotation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RetouchType {
    Smooth,
    EyeEnlarge,
    FaceLift,
    Whiten,
}

impl RetouchType {
    pub const ALL: [RetouchType; 4] = [
        RetouchType::Smooth,
        RetouchType::EyeEnlarge,
        RetouchType::FaceLift,
        RetouchType::Whiten,
    ];

    pub fn index(self) -> usize {
        match self {
            RetouchType::Smooth => 0,
            RetouchType::EyeEnlarge => 1,
            RetouchType::FaceLift => 2,
            RetouchType::Whiten => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RetouchType::Smooth => "Smooth",
            RetouchType::EyeEnlarge => "EyeEnlarge",
            RetouchType::FaceLift => "FaceLift",
            RetouchType::Whiten => "Whiten",
        }
    }
}

/// A quantized retouching level: class 0..=3 mapped bijectively onto
/// magnitudes 0/30/60/90.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Level(u8);

impl Level {
    pub const OFF: Level = Level(0);

    pub fn from_class(class: u8) -> Result<Level, LabelError> {
        if class > 3 {
            return Err(LabelError::InvalidClass(class));
        }
        Ok(Level(class))
    }

    pub fn from_magnitude(magnitude: u16) -> Result<Level, LabelError> {
        match magnitude {
            0 => Ok(Level(0)),
            30 => Ok(Level(1)),
            60 => Ok(Level(2)),
            90 => Ok(Level(3)),
            other => Err(LabelError::InvalidMagnitude(other)),
        }
    }

    pub fn class(self) -> u8 {
        self.0
    }

    pub fn magnitude(self) -> u16 {
        self.0 as u16 * 30
    }

    pub fn is_on(self) -> bool {
        self.0 != 0
    }
}

/// One level per retouching type; the per-image ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    levels: [Level; 4],
}

impl Annotation {
    pub fn new(levels: [Level; 4]) -> Self {
        Annotation { levels }
    }

    pub fn all_off() -> Self {
        Annotation {
            levels: [Level::OFF; 4],
        }
    }

    pub fn from_classes(classes: [u8; 4]) -> Result<Self, LabelError> {
        let mut levels = [Level::OFF; 4];
        for (slot, &c) in levels.iter_mut().zip(&classes) {
            *slot = Level::from_class(c)?;
        }
        Ok(Annotation { levels })
    }

    pub fn level(&self, t: RetouchType) -> Level {
        self.levels[t.index()]
    }

    pub fn set_level(&mut self, t: RetouchType, level: Level) {
        self.levels[t.index()] = level;
    }

    pub fn classes(&self) -> [u8; 4] {
        [
            self.levels[0].class(),
            self.levels[1].class(),
            self.levels[2].class(),
            self.levels[3].class(),
        ]
    }

    /// Number of operations switched on; this is the record's subset kind.
    pub fn subset_kind(&self) -> u8 {
        self.levels.iter().filter(|l| l.is_on()).count() as u8
    }

    /// Set of types switched on, in canonical order.
    pub fn on_types(&self) -> Vec<RetouchType> {
        RetouchType::ALL
            .into_iter()
            .filter(|t| self.level(*t).is_on())
            .collect()
    }

    /// Bitmask of the types switched on (bit i = canonical type i).
    pub fn type_mask(&self) -> u8 {
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_on())
            .fold(0, |m, (i, _)| m | (1 << i))
    }

    /// Parse the textual annotation form, e.g.
    /// `{Smooth: 0, EyeEnlarge: 2, FaceLift: 0, Whiten: 3}`.
    pub fn parse(text: &str) -> Result<Self, LabelError> {
        let inner = text
            .trim()
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| LabelError::Parse(format!("missing braces in {text:?}")))?;
        let mut seen = [false; 4];
        let mut ann = Annotation::all_off();
        for part in inner.split(',') {
            let (key, val) = part
                .split_once(':')
                .ok_or_else(|| LabelError::Parse(format!("missing ':' in {part:?}")))?;
            let t = RetouchType::ALL
                .into_iter()
                .find(|t| t.name() == key.trim())
                .ok_or_else(|| LabelError::Parse(format!("unknown type {key:?}")))?;
            let class: u8 = val
                .trim()
                .parse()
                .map_err(|_| LabelError::Parse(format!("bad level {val:?}")))?;
            ann.set_level(t, Level::from_class(class)?);
            seen[t.index()] = true;
        }
        if seen != [true; 4] {
            return Err(LabelError::Parse(format!("incomplete annotation {text:?}")));
        }
        Ok(ann)
    }
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{Smooth: {}, EyeEnlarge: {}, FaceLift: {}, Whiten: {}}}",
            self.levels[0].class(),
            self.levels[1].class(),
            self.levels[2].class(),
            self.levels[3].class()
        )
    }
}

/// All type combinations for a given operation count, in canonical order.
/// `kind == 4` has a single combination but is materialized in two versions
/// per sample; [`versions_for_kind`] reports the version count.
pub fn subset_combinations(kind: u8) -> Result<Vec<Vec<RetouchType>>, LabelError> {
    if !(1..=4).contains(&kind) {
        return Err(LabelError::InvalidKind(kind));
    }
    let mut combos = Vec::new();
    for mask in 1u8..16 {
        if mask.count_ones() as u8 == kind {
            combos.push(
                RetouchType::ALL
                    .into_iter()
                    .filter(|t| mask & (1 << t.index()) != 0)
                    .collect(),
            );
        }
    }
    Ok(combos)
}

/// Quad-operated samples get two retouched versions; all others one.
pub fn versions_for_kind(kind: u8) -> u8 {
    if kind == 4 {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceApi {
    Megvii,
    Tencent,
    Alibaba,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Manual cleaning categories; a record carrying any tag is excluded from
/// split materialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleaningCategory {
    BlurOrBadLighting,
    CosplayFilteredOrHeavyMakeup,
    IncompleteFace,
    InfantOrBaby,
    FakeFace,
}

pub const FFHQ_MAX_INDEX: u32 = 69_999;

/// One manifest line: an image's identity, provenance, annotation, split and
/// exclusion tags. Serialized as JSON-lines with level class indices 0-3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u32,
    pub api: SourceApi,
    pub kind: u8,
    pub smooth: u8,
    pub eye_enlarge: u8,
    pub face_lift: u8,
    pub whiten: u8,
    pub path: String,
    pub split: Split,
    #[serde(default)]
    pub exclusions: Vec<CleaningCategory>,
    #[serde(default)]
    pub version: u8,
}

impl ManifestRecord {
    pub fn annotation(&self) -> Result<Annotation, LabelError> {
        Annotation::from_classes([self.smooth, self.eye_enlarge, self.face_lift, self.whiten])
    }

    pub fn is_excluded(&self) -> bool {
        !self.exclusions.is_empty()
    }

    /// Per-record invariant violations, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.id > FFHQ_MAX_INDEX {
            out.push(format!("id {} outside 0..=69999", self.id));
        }
        let ann = match self.annotation() {
            Ok(a) => a,
            Err(e) => {
                out.push(e.to_string());
                return out;
            }
        };
        if ann.subset_kind() != self.kind {
            out.push(format!(
                "kind {} does not match {} nonzero levels",
                self.kind,
                ann.subset_kind()
            ));
        }
        if (self.api == SourceApi::None) != (ann.subset_kind() == 0) {
            out.push(format!(
                "api {:?} inconsistent with subset kind {}",
                self.api,
                ann.subset_kind()
            ));
        }
        if self.api == SourceApi::Alibaba && ann.subset_kind() > 1 {
            out.push(format!(
                "alibaba records are single-operated, found kind {}",
                ann.subset_kind()
            ));
        }
        out
    }

    /// Deterministic ordering key for parallel-safe output.
    pub fn order_key(&self) -> (u32, SourceApi, u8, u8) {
        let mask = self
            .annotation()
            .map(|a| a.type_mask())
            .unwrap_or(u8::MAX);
        (self.id, self.api, mask, self.version)
    }
}

/// Validation report for a whole manifest; line numbers are 1-based.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub diagnostics: Vec<(usize, String)>,
    pub records: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.diagnostics.is_empty()
    }
}

/// Check every per-record invariant plus cross-record uniqueness of
/// `(id, api, combination, version)`.
pub fn validate_manifest(lines: impl Iterator<Item = String>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen: HashSet<(u32, SourceApi, u8, u8)> = HashSet::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.diagnostics.push((lineno, format!("malformed record: {e}")));
                continue;
            }
        };
        report.records += 1;
        for v in record.violations() {
            report.diagnostics.push((lineno, v));
        }
        let key = record.order_key();
        if !seen.insert(key) {
            report.diagnostics.push((
                lineno,
                format!(
                    "duplicate (id, api, combination, version) = ({}, {:?}, {:#06b}, {})",
                    key.0, key.1, key.2, key.3
                ),
            ));
        }
    }
    report
}

/// Deterministic 80/10/10 split over a set of original-image ids.
///
/// The ids are permuted with a seeded shuffle and sliced by floor
/// arithmetic; every retouched version of an original inherits its split, so
/// no identity appears in more than one split.
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    map: BTreeMap<u32, Split>,
}

impl SplitAssignment {
    pub fn new(ids: &[u32], seed: u64) -> Self {
        let mut unique: Vec<u32> = {
            let set: std::collections::BTreeSet<u32> = ids.iter().copied().collect();
            set.into_iter().collect()
        };
        let mut rng = RngStream::new(seed, "split");
        rng.shuffle(&mut unique);
        let n = unique.len();
        let n_train = n * 80 / 100;
        let n_val = n * 10 / 100;
        let mut map = BTreeMap::new();
        for (rank, id) in unique.into_iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            map.insert(id, split);
        }
        SplitAssignment { map }
    }

    pub fn split_of(&self, id: u32) -> Option<Split> {
        self.map.get(&id).copied()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in self.map.values() {
            match s {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    /// Stamp each record with its original image's split.
    pub fn apply(&self, records: &mut [ManifestRecord]) {
        for r in records {
            if let Some(s) = self.split_of(r.id) {
                r.split = s;
            }
        }
    }
}

/// A record is eligible for reduced sampling if it is non-retouched
/// (subset 0, any set) or single-operated in the Tencent or Alibaba set.
pub fn reduced_sampling_eligible(record: &ManifestRecord) -> bool {
    record.kind == 0
        || (record.kind == 1
            && matches!(record.api, SourceApi::Tencent | SourceApi::Alibaba))
}

/// Keep each eligible record independently with probability 1/3; others are
/// retained untouched. Draws come from the stream in input order.
pub fn reduced_sampling(records: &[ManifestRecord], rng: &mut RngStream) -> Vec<ManifestRecord> {
    records
        .iter()
        .filter(|r| {
            if reduced_sampling_eligible(r) {
                rng.next_bool(1.0 / 3.0)
            } else {
                true
            }
        })
        .cloned()
        .collect()
}

/// Peak signal-to-noise ratio between two equal-shaped 8-bit images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Decibels(f64),
    /// Identical images; excluded from averages.
    Infinite,
}

pub fn psnr(a: &[u8], b: &[u8]) -> Result<Psnr, LabelError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LabelError::Parse(format!(
            "psnr requires equal-shaped images, got {} and {} bytes",
            a.len(),
            b.len()
        )));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Decibels(10.0 * (255.0 * 255.0 / mse).log10()))
}

/// Record counts per (api, kind) pair, mirroring the dataset summary layout.
pub fn manifest_counts(records: &[ManifestRecord]) -> BTreeMap<(SourceApi, u8), usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry((r.api, r.kind)).or_insert(0) += 1;
    }
    counts
}
