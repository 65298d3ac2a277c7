//! Condition-importance analysis and routing schedules.
//!
//! A trained model's attention is captured per (layer, timestep), masked to
//! one condition's key columns, and averaged into a scalar grid
//! `S[condition][layer][timestep]`. Keep/omit schedules are derived from
//! that grid (top cells per condition) or from the uniform/random baselines.

mod capture;
mod csv;

pub use capture::{capture_attention, compute_importance_for_model, AttentionCapture};
pub use csv::{export_heatmaps, read_heatmap_csv, read_heatmaps};

use serde::{Deserialize, Serialize};

use crate::arraymath::{DenseArray, RngState};
use crate::conditions::{SegmentTag, CONDITION_TAGS};
use crate::error::{Error, Result};

/// Boolean attention-entry mask for one condition: true where the query row
/// is a NOISE token and the key column belongs to the condition's segment
/// (restricted to foreground patches for subject/glyph).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionMask {
    pub rows: usize,
    pub cols: usize,
    keep: Vec<bool>,
}

impl ConditionMask {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn true_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Columns (key indices) with at least one true entry.
    pub fn active_columns(&self) -> Vec<usize> {
        (0..self.cols)
            .filter(|&c| (0..self.rows).any(|r| self.get(r, c)))
            .collect()
    }
}

/// Builds the scoring mask for `condition` over a tagged sequence.
/// `foreground` optionally restricts key columns to tokens whose patch
/// carries foreground content (subject region or glyph strokes); it is
/// indexed by the token's position within its segment.
pub fn build_condition_mask(
    tags: &[SegmentTag],
    condition: SegmentTag,
    foreground: Option<&[bool]>,
) -> Result<ConditionMask> {
    if !condition.is_condition() {
        return Err(Error::contract(format!(
            "{} is not a prunable condition",
            condition.name()
        )));
    }
    let n = tags.len();
    let mut keep = vec![false; n * n];
    let seg_start = tags.iter().position(|&t| t == condition);
    for r in 0..n {
        if tags[r] != SegmentTag::Noise {
            continue;
        }
        for c in 0..n {
            if tags[c] != condition {
                continue;
            }
            let within = c - seg_start.unwrap();
            let fg_ok = foreground.map_or(true, |f| f.get(within).copied().unwrap_or(false));
            if fg_ok {
                keep[r * n + c] = true;
            }
        }
    }
    Ok(ConditionMask {
        rows: n,
        cols: n,
        keep,
    })
}

/// Scalar importance grid: S[condition][layer][timestep].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub layers: usize,
    pub timesteps: usize,
    /// Condition order follows [`CONDITION_TAGS`]: style, subject, glyph.
    pub values: Vec<Vec<Vec<f64>>>,
    pub sample_count: usize,
    pub config_fingerprint: String,
}

impl ImportanceMap {
    pub fn zeros(layers: usize, timesteps: usize) -> Self {
        Self {
            layers,
            timesteps,
            values: vec![vec![vec![0.0; timesteps]; layers]; 3],
            sample_count: 0,
            config_fingerprint: String::new(),
        }
    }

    pub fn get(&self, cond: usize, layer: usize, t: usize) -> f64 {
        self.values[cond][layer][t]
    }

    pub fn validate(&self) -> Result<()> {
        for (c, grid) in self.values.iter().enumerate() {
            for row in grid {
                for &v in row {
                    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                        return Err(Error::contract(format!(
                            "importance value {v} for condition {c} outside [0, 1]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Given per-(layer, timestep) mean masked attention for each sample,
/// averages across samples into an [`ImportanceMap`].
pub fn compute_importance(
    per_sample_cells: &[Vec<Vec<[f64; 3]>>],
    config_fingerprint: &str,
) -> Result<ImportanceMap> {
    let n = per_sample_cells.len();
    if n == 0 {
        return Err(Error::contract("importance needs at least one capture"));
    }
    let layers = per_sample_cells[0].len();
    let timesteps = per_sample_cells[0].first().map_or(0, Vec::len);
    let mut map = ImportanceMap::zeros(layers, timesteps);
    map.sample_count = n;
    map.config_fingerprint = config_fingerprint.to_string();
    for cells in per_sample_cells {
        for (b, row) in cells.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                for c in 0..3 {
                    map.values[c][b][t] += v[c] / n as f64;
                }
            }
        }
    }
    map.validate()?;
    Ok(map)
}

/// Mean of the masked-in attention entries, averaged over heads.
/// Normalization is by the masked-entry count; empty masks score 0.
pub fn masked_mean(probs: &[DenseArray<f64>], mask: &ConditionMask) -> f64 {
    let count = mask.true_count();
    if count == 0 || probs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for head in probs {
        debug_assert_eq!(head.rows(), mask.rows);
        debug_assert_eq!(head.cols(), mask.cols);
        for r in 0..mask.rows {
            let row = head.row(r);
            for c in 0..mask.cols {
                if mask.get(r, c) {
                    total += row[c];
                }
            }
        }
    }
    total / (count * probs.len()) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Importance,
    Uniform,
    Random,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "importance" => Ok(Self::Importance),
            "uniform" => Ok(Self::Uniform),
            "random" => Ok(Self::Random),
            other => Err(Error::contract(format!(
                "unknown schedule kind {other:?} (importance | uniform | random)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Importance => "importance",
            Self::Uniform => "uniform",
            Self::Random => "random",
        }
    }
}

/// Per-condition retention fractions (style, subject, glyph).
pub type RetainFractions = [f64; 3];

/// The defaults: keep 40% of style, 50% of subject, 20% of glyph slots.
pub const DEFAULT_RETAIN: RetainFractions = [0.4, 0.5, 0.2];

/// Boolean keep/omit grid per (condition, layer, timestep).
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingSchedule {
    pub layers: usize,
    pub timesteps: usize,
    pub fractions: RetainFractions,
    pub provenance: ScheduleKind,
    pub seed: Option<u64>,
    /// keep[cond][layer][timestep]
    pub keep: Vec<Vec<Vec<bool>>>,
}

impl RoutingSchedule {
    /// All slots kept for every condition.
    pub fn all_keep(layers: usize, timesteps: usize) -> Self {
        Self {
            layers,
            timesteps,
            fractions: [1.0; 3],
            provenance: ScheduleKind::Importance,
            seed: None,
            keep: vec![vec![vec![true; timesteps]; layers]; 3],
        }
    }

    pub fn kept(&self, cond: usize, layer: usize, t: usize) -> bool {
        self.keep[cond][layer][t]
    }

    /// Keep flags for the three conditions at one (layer, timestep).
    pub fn kept_at(&self, layer: usize, t: usize) -> [bool; 3] {
        [
            self.keep[0][layer][t],
            self.keep[1][layer][t],
            self.keep[2][layer][t],
        ]
    }

    pub fn kept_count(&self, cond: usize) -> usize {
        self.keep[cond]
            .iter()
            .map(|row| row.iter().filter(|&&k| k).count())
            .sum()
    }

    pub fn budget(&self, cond: usize) -> usize {
        budget_for(self.fractions[cond], self.layers, self.timesteps)
    }

    pub fn check_dims(&self, layers: usize, timesteps: usize) -> Result<()> {
        if self.layers != layers || self.timesteps != timesteps {
            return Err(Error::ConfigMismatch(format!(
                "schedule is {}x{}, model runs {layers} layers x {timesteps} steps",
                self.layers, self.timesteps
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SerialSchedule::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: SerialSchedule = serde_json::from_str(text)?;
        raw.into_schedule()
    }
}

/// Exact slot budget for a retention fraction.
pub fn budget_for(fraction: f64, layers: usize, timesteps: usize) -> usize {
    (fraction * (layers * timesteps) as f64).ceil() as usize
}

/// Keeps the top-budget cells of S per condition. Ties break toward the
/// smaller layer, then the smaller timestep, which also makes schedules at
/// larger fractions supersets of schedules at smaller ones.
pub fn derive_schedule(map: &ImportanceMap, fractions: RetainFractions) -> Result<RoutingSchedule> {
    validate_fractions(&fractions)?;
    map.validate()?;
    let (layers, timesteps) = (map.layers, map.timesteps);
    let mut keep = vec![vec![vec![false; timesteps]; layers]; 3];
    for (c, keep_c) in keep.iter_mut().enumerate() {
        let mut cells: Vec<(usize, usize)> = (0..layers)
            .flat_map(|b| (0..timesteps).map(move |t| (b, t)))
            .collect();
        cells.sort_by(|&(b1, t1), &(b2, t2)| {
            let s1 = map.get(c, b1, t1);
            let s2 = map.get(c, b2, t2);
            s2.partial_cmp(&s1)
                .unwrap()
                .then(b1.cmp(&b2))
                .then(t1.cmp(&t2))
        });
        for &(b, t) in cells
            .iter()
            .take(budget_for(fractions[c], layers, timesteps))
        {
            keep_c[b][t] = true;
        }
    }
    Ok(RoutingSchedule {
        layers,
        timesteps,
        fractions,
        provenance: ScheduleKind::Importance,
        seed: None,
        keep,
    })
}

/// Uniform (evenly spaced in row-major (layer, timestep) order) or seeded
/// random baselines; both hit the exact budget.
pub fn baseline_schedule(
    kind: ScheduleKind,
    fractions: RetainFractions,
    layers: usize,
    timesteps: usize,
    seed: u64,
) -> Result<RoutingSchedule> {
    validate_fractions(&fractions)?;
    if kind == ScheduleKind::Importance {
        return Err(Error::contract(
            "importance schedules come from derive_schedule, not baseline_schedule",
        ));
    }
    let n = layers * timesteps;
    let mut keep = vec![vec![vec![false; timesteps]; layers]; 3];
    for (c, keep_c) in keep.iter_mut().enumerate() {
        let k = budget_for(fractions[c], layers, timesteps);
        let chosen: Vec<usize> = match kind {
            ScheduleKind::Uniform => (0..k).map(|i| i * n / k.max(1)).collect(),
            ScheduleKind::Random => {
                let mut rng = RngState::new(seed).fork(c as u64);
                let mut pool: Vec<usize> = (0..n).collect();
                let mut picked = Vec::with_capacity(k);
                for _ in 0..k {
                    let idx = rng.range(pool.len());
                    picked.push(pool.swap_remove(idx));
                }
                picked
            }
            ScheduleKind::Importance => unreachable!(),
        };
        for flat in chosen {
            keep_c[flat / timesteps][flat % timesteps] = true;
        }
    }
    Ok(RoutingSchedule {
        layers,
        timesteps,
        fractions,
        provenance: kind,
        seed: Some(seed),
        keep,
    })
}

fn validate_fractions(fractions: &RetainFractions) -> Result<()> {
    for (i, f) in fractions.iter().enumerate() {
        if !(0.0..=1.0).contains(f) {
            return Err(Error::contract(format!(
                "retention fraction for {} must lie in [0, 1], got {f}",
                CONDITION_TAGS[i].name()
            )));
        }
    }
    Ok(())
}

/// Probability of each timestep proportional to its total importance mass;
/// an all-zero map falls back to uniform.
pub fn timestep_weights(map: &ImportanceMap) -> Vec<f64> {
    let mut w = vec![0.0; map.timesteps];
    for grid in &map.values {
        for row in grid {
            for (t, &v) in row.iter().enumerate() {
                w[t] += v;
            }
        }
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / map.timesteps as f64; map.timesteps];
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

// JSON wire format: keep flags flattened into [condition, layer, timestep]
// triples.
#[derive(Serialize, Deserialize)]
struct SerialSchedule {
    layers: usize,
    timesteps: usize,
    fractions: serde_json::Map<String, serde_json::Value>,
    provenance: ScheduleKind,
    seed: Option<u64>,
    keep: Vec<(String, usize, usize)>,
}

impl From<&RoutingSchedule> for SerialSchedule {
    fn from(s: &RoutingSchedule) -> Self {
        let mut fractions = serde_json::Map::new();
        for (i, tag) in CONDITION_TAGS.iter().enumerate() {
            fractions.insert(tag.name().into(), s.fractions[i].into());
        }
        let mut keep = Vec::new();
        for (c, tag) in CONDITION_TAGS.iter().enumerate() {
            for b in 0..s.layers {
                for t in 0..s.timesteps {
                    if s.keep[c][b][t] {
                        keep.push((tag.name().to_string(), b, t));
                    }
                }
            }
        }
        SerialSchedule {
            layers: s.layers,
            timesteps: s.timesteps,
            fractions,
            provenance: s.provenance,
            seed: s.seed,
            keep,
        }
    }
}

impl SerialSchedule {
    fn into_schedule(self) -> Result<RoutingSchedule> {
        let mut fractions = [0.0; 3];
        for (i, tag) in CONDITION_TAGS.iter().enumerate() {
            fractions[i] = self
                .fractions
                .get(tag.name())
                .and_then(|v| v.as_f64())
                .ok_or_else(|| {
                    Error::contract(format!("schedule JSON missing fraction for {}", tag.name()))
                })?;
        }
        let mut keep = vec![vec![vec![false; self.timesteps]; self.layers]; 3];
        for (name, b, t) in &self.keep {
            let c = CONDITION_TAGS
                .iter()
                .position(|tag| tag.name() == name)
                .ok_or_else(|| Error::contract(format!("unknown condition {name:?}")))?;
            if *b >= self.layers || *t >= self.timesteps {
                return Err(Error::contract(format!(
                    "keep cell ({name}, {b}, {t}) outside {}x{}",
                    self.layers, self.timesteps
                )));
            }
            keep[c][*b][*t] = true;
        }
        Ok(RoutingSchedule {
            layers: self.layers,
            timesteps: self.timesteps,
            fractions,
            provenance: self.provenance,
            seed: self.seed,
            keep,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::SEGMENT_ORDER;

    fn tags(lens: [usize; 5]) -> Vec<SegmentTag> {
        let mut tags = Vec::new();
        for (i, &l) in lens.iter().enumerate() {
            tags.extend(std::iter::repeat(SEGMENT_ORDER[i]).take(l));
        }
        tags
    }

    #[test]
    fn style_mask_counts_noise_by_style() {
        // 68 style tokens, 64 noise tokens
        let tags = tags([8, 64, 68, 64, 64]);
        let mask = build_condition_mask(&tags, SegmentTag::Style, None).unwrap();
        assert_eq!(mask.true_count(), 64 * 68);
    }

    #[test]
    fn empty_foreground_means_empty_mask() {
        let tags = tags([2, 4, 3, 5, 0]);
        let fg = vec![false; 5];
        let mask = build_condition_mask(&tags, SegmentTag::Subject, Some(&fg)).unwrap();
        assert_eq!(mask.true_count(), 0);
    }

    #[test]
    fn condition_masks_are_disjoint() {
        let tags = tags([2, 4, 3, 5, 6]);
        let masks: Vec<ConditionMask> = CONDITION_TAGS
            .iter()
            .map(|&c| build_condition_mask(&tags, c, None).unwrap())
            .collect();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let ci = masks[i].active_columns();
                let cj = masks[j].active_columns();
                assert!(ci.iter().all(|c| !cj.contains(c)));
            }
        }
    }

    #[test]
    fn masked_mean_hand_case() {
        // 2x2 attention, hand-built mask over one column
        let a = DenseArray::from_rows(&[vec![0.25, 0.75], vec![0.6, 0.4]]).unwrap();
        let mask = ConditionMask {
            rows: 2,
            cols: 2,
            keep: vec![false, true, false, true],
        };
        let got = masked_mean(&[a], &mask);
        assert!((got - (0.75 + 0.4) / 2.0).abs() < 1e-15);
        // empty mask scores zero
        let empty = ConditionMask {
            rows: 2,
            cols: 2,
            keep: vec![false; 4],
        };
        assert_eq!(masked_mean(&[DenseArray::zeros(&[2, 2])], &empty), 0.0);
    }

    fn ramp_map(layers: usize, timesteps: usize) -> ImportanceMap {
        let mut map = ImportanceMap::zeros(layers, timesteps);
        for c in 0..3 {
            for b in 0..layers {
                for t in 0..timesteps {
                    map.values[c][b][t] = ((c + 1) * (b * timesteps + t)) as f64
                        / (3.0 * (layers * timesteps) as f64);
                }
            }
        }
        map.sample_count = 1;
        map
    }

    #[test]
    fn schedule_budgets_are_exact() {
        let map = ramp_map(6, 8);
        for f in [0.0, 0.1, 0.4, 0.5, 1.0] {
            let s = derive_schedule(&map, [f; 3]).unwrap();
            for c in 0..3 {
                assert_eq!(s.kept_count(c), budget_for(f, 6, 8), "f={f}");
            }
        }
        for kind in [ScheduleKind::Uniform, ScheduleKind::Random] {
            let s = baseline_schedule(kind, [0.3, 0.7, 0.2], 6, 8, 5).unwrap();
            for c in 0..3 {
                assert_eq!(s.kept_count(c), s.budget(c));
            }
        }
    }

    #[test]
    fn importance_schedules_nest() {
        let map = ramp_map(5, 7);
        let mut prev: Option<RoutingSchedule> = None;
        for f in [0.1, 0.3, 0.6, 0.9] {
            let s = derive_schedule(&map, [f; 3]).unwrap();
            if let Some(p) = &prev {
                for c in 0..3 {
                    for b in 0..5 {
                        for t in 0..7 {
                            if p.kept(c, b, t) {
                                assert!(s.kept(c, b, t), "nesting broken at {c},{b},{t}");
                            }
                        }
                    }
                }
            }
            prev = Some(s);
        }
    }

    #[test]
    fn uniform_baseline_spacing() {
        let s = baseline_schedule(ScheduleKind::Uniform, [0.5; 3], 2, 4, 0).unwrap();
        // keeps row-major cells {0, 2, 4, 6}
        let kept: Vec<usize> = (0..8).filter(|i| s.kept(0, i / 4, i % 4)).collect();
        assert_eq!(kept, vec![0, 2, 4, 6]);
    }

    #[test]
    fn random_baseline_reproducible() {
        let a = baseline_schedule(ScheduleKind::Random, [0.4; 3], 6, 8, 42).unwrap();
        let b = baseline_schedule(ScheduleKind::Random, [0.4; 3], 6, 8, 42).unwrap();
        let c = baseline_schedule(ScheduleKind::Random, [0.4; 3], 6, 8, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn timestep_weight_cases() {
        let mut map = ImportanceMap::zeros(3, 4);
        for c in 0..3 {
            for b in 0..3 {
                for t in 0..4 {
                    map.values[c][b][t] = 0.125;
                }
            }
        }
        let w = timestep_weights(&map);
        for &v in &w {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut map = ImportanceMap::zeros(3, 4);
        map.values[1][2][3] = 0.5;
        let w = timestep_weights(&map);
        assert_eq!(w, vec![0.0, 0.0, 0.0, 1.0]);

        let map = ImportanceMap::zeros(3, 4);
        let w = timestep_weights(&map);
        for &v in &w {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_json_round_trip() {
        let map = ramp_map(4, 5);
        let s = derive_schedule(&map, DEFAULT_RETAIN).unwrap();
        let text = s.to_json().unwrap();
        let back = RoutingSchedule::from_json(&text).unwrap();
        assert_eq!(s, back);
    }
}
