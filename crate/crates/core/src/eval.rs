//! Accuracy metrics over grounding runs: thresholded box-IoU accuracy,
//! per-tag breakdowns, and configuration grids.

use crate::config::EngineConfig;
use crate::pipeline::{QueryRecord, ResultRecord};
use crate::scene::{box_iou_3d, Aabb3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("record {query_id}: no ground-truth box")]
    MissingGt { query_id: String },
    #[error("threshold {0} must lie in (0, 1]")]
    BadThreshold(f64),
    #[error("result {0:?} has no matching query record")]
    UnknownResult(String),
}

/// One scored query: prediction (absent on failure), ground truth, tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Aabb3>,
    pub gt: Aabb3,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl EvalRecord {
    pub fn iou(&self) -> f64 {
        self.predicted.map_or(0.0, |p| box_iou_3d(&p, &self.gt))
    }
}

/// Joins batch results with their query records (which carry gt and tags).
/// Queries without a ground-truth box are an error.
pub fn join_records(
    queries: &[QueryRecord],
    results: &[ResultRecord],
) -> Result<Vec<EvalRecord>, EvalError> {
    let by_id: BTreeMap<&str, &QueryRecord> =
        queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let mut out = Vec::with_capacity(results.len());
    for result in results {
        let query = by_id
            .get(result.query_id.as_str())
            .ok_or_else(|| EvalError::UnknownResult(result.query_id.clone()))?;
        let gt = query.gt_box.ok_or_else(|| EvalError::MissingGt {
            query_id: result.query_id.clone(),
        })?;
        out.push(EvalRecord {
            query_id: result.query_id.clone(),
            predicted: result.bbox,
            gt,
            tags: query.tags.clone(),
        });
    }
    Ok(out)
}

/// Fraction of records whose predicted box reaches IoU `threshold` against
/// ground truth. Failed records (no prediction) count as misses; an empty
/// record set is undefined.
pub fn accuracy_at(records: &[EvalRecord], threshold: f64) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EvalError::BadThreshold(threshold));
    }
    let hits = records.iter().filter(|r| r.iou() >= threshold).count();
    Ok(hits as f64 / records.len() as f64)
}

pub const UNTAGGED: &str = "untagged";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub tag_value: String,
    pub count: usize,
    pub acc_at_25: f64,
    pub acc_at_50: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakdownTable {
    pub tag_key: String,
    pub rows: Vec<BreakdownRow>,
    pub overall: BreakdownRow,
}

/// Per-tag-value accuracy plus the overall row. Records missing the tag are
/// reported under [`UNTAGGED`].
pub fn breakdown(records: &[EvalRecord], tag_key: &str) -> Result<BreakdownTable, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for record in records {
        let value = record
            .tags
            .get(tag_key)
            .cloned()
            .unwrap_or_else(|| UNTAGGED.to_string());
        groups.entry(value).or_default().push(record);
    }
    let row_of = |tag_value: String, members: &[&EvalRecord]| -> BreakdownRow {
        let owned: Vec<EvalRecord> = members.iter().map(|r| (*r).clone()).collect();
        BreakdownRow {
            tag_value,
            count: owned.len(),
            acc_at_25: accuracy_at(&owned, 0.25).expect("groups are non-empty"),
            acc_at_50: accuracy_at(&owned, 0.50).expect("groups are non-empty"),
        }
    };
    let rows: Vec<BreakdownRow> = groups
        .iter()
        .map(|(value, members)| row_of(value.clone(), members))
        .collect();
    let all: Vec<&EvalRecord> = records.iter().collect();
    Ok(BreakdownTable {
        tag_key: tag_key.to_string(),
        rows,
        overall: row_of("overall".to_string(), &all),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub count: usize,
    pub acc_at_25: f64,
    pub acc_at_50: f64,
}

/// Runs the batch runner once per configuration cell and collects both
/// accuracies. Cells with identical effective configs necessarily produce
/// identical metrics, since the runner is deterministic under scripted
/// backends.
pub fn ablation_grid<E>(
    cells: &[(String, EngineConfig)],
    mut runner: impl FnMut(&EngineConfig) -> Result<Vec<EvalRecord>, E>,
) -> Result<Vec<GridCell>, E>
where
    E: From<EvalError>,
{
    let mut out = Vec::with_capacity(cells.len());
    for (label, config) in cells {
        let records = runner(config)?;
        out.push(GridCell {
            label: label.clone(),
            count: records.len(),
            acc_at_25: accuracy_at(&records, 0.25).map_err(E::from)?,
            acc_at_50: accuracy_at(&records, 0.50).map_err(E::from)?,
        });
    }
    Ok(out)
}

/// Aligned text rendering of a breakdown, for terminal reports.
pub fn render_breakdown_text(table: &BreakdownTable) -> String {
    let mut width = "overall".len().max(table.tag_key.len());
    for row in &table.rows {
        width = width.max(row.tag_value.len());
    }
    let mut out = format!(
        "{:<width$}  {:>6}  {:>9}  {:>9}\n",
        table.tag_key, "count", "acc@0.25", "acc@0.50",
    );
    for row in table.rows.iter().chain([&table.overall]) {
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>9.4}  {:>9.4}\n",
            row.tag_value, row.count, row.acc_at_25, row.acc_at_50,
        ));
    }
    out
}

/// CSV rendering of per-tag accuracy (for curves such as accuracy by chain
/// length).
pub fn render_breakdown_csv(table: &BreakdownTable) -> String {
    let mut out = String::from("tag_value,count,acc_at_25,acc_at_50\n");
    for row in table.rows.iter().chain([&table.overall]) {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.tag_value, row.count, row.acc_at_25, row.acc_at_50
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb3 {
        Aabb3 {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    fn shifted_box(dx: f64) -> Aabb3 {
        Aabb3 {
            min: [dx, 0.0, 0.0],
            max: [1.0 + dx, 1.0, 1.0],
        }
    }

    fn record(id: &str, predicted: Option<Aabb3>, tags: &[(&str, &str)]) -> EvalRecord {
        EvalRecord {
            query_id: id.into(),
            predicted,
            gt: unit_box(),
            tags: tags
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    #[test]
    fn perfect_predictions_score_one_at_both_thresholds() {
        let records = vec![
            record("a", Some(unit_box()), &[]),
            record("b", Some(unit_box()), &[]),
        ];
        assert_eq!(accuracy_at(&records, 0.25).unwrap(), 1.0);
        assert_eq!(accuracy_at(&records, 0.50).unwrap(), 1.0);
    }

    #[test]
    fn offset_cube_counts_at_quarter_but_not_half() {
        // Unit cubes offset by 0.5 share IoU 1/3: a hit at 0.25, a miss at
        // 0.50.
        let records = vec![record("a", Some(shifted_box(0.5)), &[])];
        assert_eq!(accuracy_at(&records, 0.25).unwrap(), 1.0);
        assert_eq!(accuracy_at(&records, 0.50).unwrap(), 0.0);
    }

    #[test]
    fn failures_count_as_misses_and_empty_is_an_error() {
        let records = vec![record("a", None, &[]), record("b", Some(unit_box()), &[])];
        assert_eq!(accuracy_at(&records, 0.25).unwrap(), 0.5);
        assert!(matches!(accuracy_at(&[], 0.25), Err(EvalError::Empty)));
        assert!(matches!(
            accuracy_at(&records, 0.0),
            Err(EvalError::BadThreshold(_))
        ));
    }

    #[test]
    fn accuracy_is_monotone_in_threshold_on_random_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let records: Vec<EvalRecord> = (0..rng.random_range(1..30))
                .map(|i| {
                    let predicted = if rng.random_bool(0.8) {
                        Some(shifted_box(rng.random_range(0.0..1.2)))
                    } else {
                        None
                    };
                    record(&format!("q{i}"), predicted, &[])
                })
                .collect();
            let mut prev = 1.0f64;
            for threshold in [0.05, 0.25, 0.5, 0.75, 1.0] {
                let acc = accuracy_at(&records, threshold).unwrap();
                assert!(
                    acc <= prev + 1e-12,
                    "accuracy must not increase with threshold"
                );
                prev = acc;
            }
        }
    }

    #[test]
    fn breakdown_partitions_and_recomposes_exactly() {
        let records = vec![
            record("a", Some(unit_box()), &[("difficulty", "easy")]),
            record("b", None, &[("difficulty", "easy")]),
            record("c", Some(unit_box()), &[("difficulty", "hard")]),
            record("d", Some(shifted_box(0.5)), &[]),
        ];
        let table = breakdown(&records, "difficulty").unwrap();
        assert_eq!(table.rows.len(), 3, "easy, hard, untagged");
        let untagged = table.rows.iter().find(|r| r.tag_value == UNTAGGED).unwrap();
        assert_eq!(untagged.count, 1);
        // Tag accuracies weighted by counts recompose to the overall rate.
        let weighted: f64 = table
            .rows
            .iter()
            .map(|r| r.acc_at_50 * r.count as f64)
            .sum();
        assert_eq!(weighted / records.len() as f64, table.overall.acc_at_50);
    }

    #[test]
    fn chain_length_curve_matches_hand_ratios() {
        let mut records = Vec::new();
        // Lengths 1..=4 with 2 records each; one hit per length except
        // length 4 with two hits.
        for (len, hits) in [(1, 1), (2, 1), (3, 1), (4, 2)] {
            for i in 0..2 {
                let hit = i < hits;
                records.push(record(
                    &format!("q{len}-{i}"),
                    hit.then(unit_box),
                    &[("chain_length", &len.to_string())],
                ));
            }
        }
        let table = breakdown(&records, "chain_length").unwrap();
        let by_value: BTreeMap<&str, f64> = table
            .rows
            .iter()
            .map(|r| (r.tag_value.as_str(), r.acc_at_50))
            .collect();
        assert_eq!(by_value["1"], 0.5);
        assert_eq!(by_value["2"], 0.5);
        assert_eq!(by_value["3"], 0.5);
        assert_eq!(by_value["4"], 1.0);
        assert_eq!(table.overall.acc_at_50, 5.0 / 8.0);
    }

    #[test]
    fn singleton_grid_equals_direct_run() {
        let records = vec![record("a", Some(unit_box()), &[])];
        let cells = vec![("base".to_string(), EngineConfig::default())];
        let grid: Vec<GridCell> =
            ablation_grid::<EvalError>(&cells, |_| Ok(records.clone())).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid[0].acc_at_50, accuracy_at(&records, 0.5).unwrap());
    }

    #[test]
    fn text_and_csv_renders_contain_every_row() {
        let records = vec![
            record("a", Some(unit_box()), &[("k", "x")]),
            record("b", None, &[("k", "y")]),
        ];
        let table = breakdown(&records, "k").unwrap();
        let text = render_breakdown_text(&table);
        let csv = render_breakdown_csv(&table);
        for needle in ["x", "y", "overall"] {
            assert!(text.contains(needle));
            assert!(csv.contains(needle));
        }
    }
}
