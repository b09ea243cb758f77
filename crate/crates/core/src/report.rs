//! JSON Lines reports: one object per record, then a single totals footer.
//! Every line carries `schema`, `report` and `record` keys.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::analyzer::{CompressionSummary, CostReport};
use crate::error::{Error, Result};
use crate::pruner::{AblationPoint, ImportanceReport, IterationRecord};
use crate::trainer::TrainReport;

pub const SCHEMA: &str = "stabprune/1";

fn tagged<T: Serialize>(report: &str, record: &str, body: &T) -> Result<String> {
    let mut obj = Map::new();
    obj.insert("schema".into(), SCHEMA.into());
    obj.insert("report".into(), report.into());
    obj.insert("record".into(), record.into());
    match serde_json::to_value(body).map_err(|e| Error::invalid(e.to_string()))? {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("value".into(), other);
        }
    }
    Ok(Value::Object(obj).to_string())
}

/// Builds a report from body records and a footer.
pub fn to_jsonl<R: Serialize, T: Serialize>(report: &str, records: &[R], totals: &T) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&tagged(report, "entry", r)?);
        out.push('\n');
    }
    out.push_str(&tagged(report, "totals", totals)?);
    out.push('\n');
    Ok(out)
}

/// Parses a report, checking the schema tag and that exactly the last line is a footer.
pub fn parse_jsonl(text: &str) -> Result<(Vec<Value>, Value)> {
    let mut lines = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        if v.get("schema").and_then(Value::as_str) != Some(SCHEMA) {
            return Err(Error::invalid(format!("line {}: missing or unknown schema", n + 1)));
        }
        lines.push(v);
    }
    let totals = lines.pop().ok_or_else(|| Error::invalid("empty report"))?;
    let is = |v: &Value, r: &str| v.get("record").and_then(Value::as_str) == Some(r);
    if !is(&totals, "totals") || !lines.iter().all(|l| is(l, "entry")) {
        return Err(Error::invalid("report must be entries followed by one totals line"));
    }
    Ok((lines, totals))
}

#[derive(Serialize)]
struct CostTotals<'a> {
    batch_size: usize,
    total_flops: u64,
    total_params: u64,
    model_size_bytes: u64,
    featuremap_bytes: u64,
    trm_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    compression: Option<&'a CompressionSummary>,
}

pub fn cost_jsonl(r: &CostReport, compression: Option<&CompressionSummary>) -> Result<String> {
    to_jsonl(
        "cost",
        &r.layers,
        &CostTotals {
            batch_size: r.batch_size,
            total_flops: r.total_flops,
            total_params: r.total_params,
            model_size_bytes: r.model_size_bytes,
            featuremap_bytes: r.featuremap_bytes,
            trm_bytes: r.trm_bytes,
            compression,
        },
    )
}

pub fn train_jsonl(r: &TrainReport) -> Result<String> {
    #[derive(Serialize)]
    struct Totals<'a> {
        loss_mode: crate::trainer::LossMode,
        epochs: usize,
        wall_time_s: f64,
        final_test_accuracy: Option<f64>,
        checksum: &'a str,
    }
    to_jsonl(
        "train",
        &r.epochs,
        &Totals {
            loss_mode: r.loss_mode,
            epochs: r.epochs.len(),
            wall_time_s: r.epochs.iter().map(|e| e.wall_time_s).sum(),
            final_test_accuracy: r.epochs.last().and_then(|e| e.test_accuracy),
            checksum: &r.checksum,
        },
    )
}

/// One line per conv layer of the report.
pub fn importance_jsonl(iteration: usize, r: &ImportanceReport, pruned: Option<&IterationRecord>) -> Result<String> {
    #[derive(Serialize)]
    struct Entry<'a> {
        iteration: usize,
        criterion: crate::pruner::Criterion,
        order: crate::pruner::ScoreOrder,
        #[serde(flatten)]
        layer: &'a crate::pruner::LayerImportance,
        #[serde(skip_serializing_if = "Option::is_none")]
        pruned: Option<&'a [usize]>,
    }
    #[derive(Serialize)]
    struct Totals {
        iteration: usize,
        filters: usize,
        pruned: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        widths_before: Option<Vec<usize>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        widths_after: Option<Vec<usize>>,
    }
    let entries: Vec<Entry> = r
        .layers
        .iter()
        .map(|l| Entry {
            iteration,
            criterion: r.criterion,
            order: r.order,
            layer: l,
            pruned: pruned.and_then(|p| p.pruned.layers.get(l.conv)).map(Vec::as_slice),
        })
        .collect();
    to_jsonl(
        "importance",
        &entries,
        &Totals {
            iteration,
            filters: r.layers.iter().map(|l| l.filters.len()).sum(),
            pruned: pruned.map_or(0, |p| p.pruned.counts().iter().sum()),
            widths_before: pruned.map(|p| p.widths_before.clone()),
            widths_after: pruned.map(|p| p.widths_after.clone()),
        },
    )
}

pub fn ablation_jsonl(conv: usize, points: &[AblationPoint]) -> Result<String> {
    #[derive(Serialize)]
    struct Totals {
        conv: usize,
        points: usize,
        seeds: usize,
    }
    to_jsonl(
        "ablation",
        points,
        &Totals {
            conv,
            points: points.len(),
            seeds: points.first().map_or(0, |p| p.per_seed.len()),
        },
    )
}
