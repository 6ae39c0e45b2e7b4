//! Label-set algebra: source groups, hidden-layer segments, and the
//! semaphore relation that decides which segments a data group activates.
//!
//! A [`PartitionSpec`] declares the label universe, an ordered list of
//! source groups (the label sets of the training sub-datasets), and an
//! ordered list of hidden segments, each owning a label set and a width.
//! A segment is *active* for a group when their label sets intersect;
//! active segments are sparsified and wired into the decoder, inactive
//! ones are driven toward a featureless Gaussian profile.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XaeError};

/// Canonical set of integer label identifiers (ascending, deduplicated).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<u32>", into = "Vec<u32>")]
pub struct LabelSet {
    ids: Vec<u32>,
}

impl LabelSet {
    /// Build a canonical set from arbitrary id order; duplicates collapse.
    pub fn new(ids: impl IntoIterator<Item = u32>) -> Self {
        let mut ids: Vec<u32> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        LabelSet { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// True when the two sets share at least one label.
    pub fn intersects(&self, other: &LabelSet) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.ids.len() && j < other.ids.len() {
            match self.ids[i].cmp(&other.ids[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }

    pub fn is_subset_of(&self, other: &LabelSet) -> bool {
        self.ids.iter().all(|id| other.contains(*id))
    }
}

impl From<Vec<u32>> for LabelSet {
    fn from(ids: Vec<u32>) -> Self {
        LabelSet::new(ids)
    }
}

impl From<LabelSet> for Vec<u32> {
    fn from(s: LabelSet) -> Self {
        s.ids
    }
}

impl FromIterator<u32> for LabelSet {
    fn from_iter<T: IntoIterator<Item = u32>>(iter: T) -> Self {
        LabelSet::new(iter)
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, id) in self.ids.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{id}")?;
        }
        write!(f, "}}")
    }
}

/// Semaphore v(s,t): 1 iff the two label sets intersect.
///
/// v = 1 selects sparsification and decoder connectivity for the
/// (group, segment) pair; v̄ = 1 − v selects Gaussianization instead.
pub fn semaphore(s: &LabelSet, t: &LabelSet) -> u8 {
    u8::from(s.intersects(t))
}

/// One hidden segment: the label set it represents and its unit count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub labels: LabelSet,
    pub width: usize,
}

/// Outcome of validating a candidate partition: hard errors plus
/// advisory warnings (e.g. a segment no source group ever activates).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Label universe, ordered source groups, and ordered hidden segments.
///
/// Construction rejects any candidate whose validation report carries
/// errors, so a held `PartitionSpec` is always structurally sound.
/// Segment and group order is declaration order; all block offsets in
/// the weight matrix derive from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPartitionSpec", into = "RawPartitionSpec")]
pub struct PartitionSpec {
    universe: LabelSet,
    source_groups: Vec<LabelSet>,
    segments: Vec<SegmentSpec>,
    /// Cumulative unit offsets; entry j is the start of segment j,
    /// entry `segments.len()` is the total width N.
    offsets: Vec<usize>,
}

/// Serialization mirror without derived fields or invariants.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawPartitionSpec {
    universe: LabelSet,
    source_groups: Vec<LabelSet>,
    segments: Vec<SegmentSpec>,
}

impl TryFrom<RawPartitionSpec> for PartitionSpec {
    type Error = XaeError;

    fn try_from(raw: RawPartitionSpec) -> Result<Self> {
        PartitionSpec::new(raw.universe, raw.source_groups, raw.segments)
    }
}

impl From<PartitionSpec> for RawPartitionSpec {
    fn from(spec: PartitionSpec) -> Self {
        RawPartitionSpec {
            universe: spec.universe,
            source_groups: spec.source_groups,
            segments: spec.segments,
        }
    }
}

impl PartitionSpec {
    /// Validate and construct; any validation *error* rejects the spec.
    pub fn new(
        universe: LabelSet,
        source_groups: Vec<LabelSet>,
        segments: Vec<SegmentSpec>,
    ) -> Result<Self> {
        let report = Self::validate_parts(&universe, &source_groups, &segments);
        if !report.is_clean() {
            return Err(XaeError::InvalidPartition(report.errors.join("; ")));
        }
        let mut offsets = Vec::with_capacity(segments.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for seg in &segments {
            acc += seg.width;
            offsets.push(acc);
        }
        Ok(PartitionSpec {
            universe,
            source_groups,
            segments,
            offsets,
        })
    }

    /// Validate candidate parts without constructing.
    ///
    /// Errors: empty universe/groups/segments, empty label sets, labels
    /// outside the universe, zero widths. Warnings: never-active
    /// segments, duplicate groups, universe labels in no group/segment.
    pub fn validate_parts(
        universe: &LabelSet,
        source_groups: &[LabelSet],
        segments: &[SegmentSpec],
    ) -> ValidationReport {
        let mut report = ValidationReport::default();
        if universe.is_empty() {
            report.errors.push("universe is empty".into());
        }
        if source_groups.is_empty() {
            report.errors.push("no source groups declared".into());
        }
        if segments.is_empty() {
            report.errors.push("no segments declared".into());
        }
        for (i, s) in source_groups.iter().enumerate() {
            if s.is_empty() {
                report.errors.push(format!("source group {i} is empty"));
            } else if !s.is_subset_of(universe) {
                report
                    .errors
                    .push(format!("source group {i} = {s}: label outside universe"));
            }
            if source_groups[..i].contains(s) {
                report
                    .warnings
                    .push(format!("source group {i} = {s} duplicates an earlier group"));
            }
        }
        for (j, seg) in segments.iter().enumerate() {
            if seg.labels.is_empty() {
                report.errors.push(format!("segment {j} has an empty label set"));
            } else if !seg.labels.is_subset_of(universe) {
                report.errors.push(format!(
                    "segment {j} = {}: label outside universe",
                    seg.labels
                ));
            }
            if seg.width == 0 {
                report.errors.push(format!("segment {j} has width 0"));
            }
            if !seg.labels.is_empty()
                && !source_groups
                    .iter()
                    .any(|s| semaphore(s, &seg.labels) == 1)
            {
                report.warnings.push(format!(
                    "segment {j} = {} never activated: no source group intersects it",
                    seg.labels
                ));
            }
        }
        for &id in universe.ids() {
            if !source_groups.iter().any(|s| s.contains(id)) {
                report.warnings.push(format!(
                    "universe label {id} belongs to no source group; its records cannot be assembled"
                ));
            }
            if !segments.iter().any(|seg| seg.labels.contains(id)) {
                report
                    .warnings
                    .push(format!("universe label {id} appears in no segment"));
            }
        }
        report
    }

    /// Re-run validation on a constructed spec (errors are impossible
    /// by construction; warnings may still be present).
    pub fn validate(&self) -> ValidationReport {
        Self::validate_parts(&self.universe, &self.source_groups, &self.segments)
    }

    pub fn universe(&self) -> &LabelSet {
        &self.universe
    }

    pub fn source_groups(&self) -> &[LabelSet] {
        &self.source_groups
    }

    pub fn segments(&self) -> &[SegmentSpec] {
        &self.segments
    }

    /// Total hidden width N = Σ_j n_j.
    pub fn total_width(&self) -> usize {
        *self.offsets.last().expect("offsets never empty")
    }

    /// Unit offset where segment j begins.
    pub fn segment_offset(&self, j: usize) -> usize {
        self.offsets[j]
    }

    /// Half-open unit range [offset, offset + width) of segment j.
    pub fn segment_range(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    /// Index of a declared source group, matched as a canonical set.
    pub fn group_index(&self, s: &LabelSet) -> Option<usize> {
        self.source_groups.iter().position(|g| g == s)
    }

    /// Strictly increasing indices of segments active for source group
    /// `s`; errors when `s` is not one of the declared groups.
    pub fn active_segments(&self, s: &LabelSet) -> Result<Vec<usize>> {
        let i = self
            .group_index(s)
            .ok_or_else(|| XaeError::UnknownGroup(s.to_string()))?;
        Ok(self.active_segments_of(i))
    }

    /// Active segment indices for the group at declaration index `i`.
    pub fn active_segments_of(&self, i: usize) -> Vec<usize> {
        let s = &self.source_groups[i];
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, seg)| semaphore(s, &seg.labels) == 1)
            .map(|(j, _)| j)
            .collect()
    }
}

/// The worked three-digit example used throughout the tests: universe
/// {0,1,2}, groups S₀={0,1} and S₁={1,2}, unit-labeled segments.
#[cfg(test)]
pub(crate) fn toy_spec(width: usize) -> PartitionSpec {
    PartitionSpec::new(
        LabelSet::new([0, 1, 2]),
        vec![LabelSet::new([0, 1]), LabelSet::new([1, 2])],
        vec![
            SegmentSpec {
                labels: LabelSet::new([0]),
                width,
            },
            SegmentSpec {
                labels: LabelSet::new([1]),
                width,
            },
            SegmentSpec {
                labels: LabelSet::new([2]),
                width,
            },
        ],
    )
    .expect("toy spec is well-formed")
}
