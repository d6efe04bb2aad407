//! CSV forms of the training logs.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::run::{GnsRecord, StepLog};
use crate::error::{Error, Result};
use crate::gns::{ComponentSeries, LayerGroup, LayerType};

const GROUPS: [(&str, LayerGroup); 4] = [
    ("total", LayerGroup::All),
    ("embedding", LayerGroup::Only(LayerType::Embedding)),
    ("linear", LayerGroup::Only(LayerType::Linear)),
    ("layernorm", LayerGroup::Only(LayerType::LayerNorm)),
];

pub const LAYER_LOG_HEADER: [&str; 5] = ["step", "layer", "layer_type", "g2_raw", "s_raw"];

pub fn step_log_header() -> Vec<String> {
    let mut h: Vec<String> = ["step", "tokens", "batch_size", "loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (name, _) in GROUPS {
        for col in ["g2_raw", "s_raw", "gns_ema"] {
            h.push(format!("{name}_{col}"));
        }
    }
    h
}

fn group_fields(r: &GnsRecord) -> [String; 3] {
    [
        r.g2_raw.to_string(),
        r.s_raw.to_string(),
        r.gns_ema.map(|v| v.to_string()).unwrap_or_default(),
    ]
}

/// One row per step; an undefined smoothed ratio is an empty field.
pub fn write_step_csv<W: Write>(logs: &[StepLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(step_log_header())?;
    for log in logs {
        let mut row = vec![
            log.step.to_string(),
            log.tokens.to_string(),
            log.batch_size.to_string(),
            log.loss.to_string(),
        ];
        for (_, group) in GROUPS {
            row.extend(group_fields(log.group(group)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: one row per (step, layer).
pub fn write_layer_csv<W: Write>(logs: &[StepLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LAYER_LOG_HEADER)?;
    for log in logs {
        for (key, rec) in &log.layers {
            w.write_record([
                log.step.to_string(),
                key.name.clone(),
                key.layer_type.to_string(),
                rec.g2_raw.to_string(),
                rec.s_raw.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogRow {
    pub step: usize,
    pub layer: String,
    pub layer_type: LayerType,
    pub g2_raw: f64,
    pub s_raw: f64,
}

/// Parses a long-format layer log. Columns are located by header name, so
/// extra columns are ignored.
pub fn read_layer_log<R: Read>(input: R) -> Result<Vec<LayerLogRow>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Log(format!("missing column `{name}`")))
    };
    let idx = [
        col("step")?,
        col("layer")?,
        col("layer_type")?,
        col("g2_raw")?,
        col("s_raw")?,
    ];
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let bad = |what: &str| Error::Log(format!("row {}: invalid {what}", line + 1));
        let num = |i: usize, what: &str| -> Result<f64> {
            let v: f64 = field(i).parse().map_err(|_| bad(what))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(what))
            }
        };
        rows.push(LayerLogRow {
            step: field(0).parse().map_err(|_| bad("step"))?,
            layer: field(1).to_string(),
            layer_type: LayerType::parse(field(2)).ok_or_else(|| bad("layer_type"))?,
            g2_raw: num(3, "g2_raw")?,
            s_raw: num(4, "s_raw")?,
        });
    }
    Ok(rows)
}

/// Per-step `(𝒢², 𝒮)` series summed over all layers and over each layer
/// type, in ascending step order. Every step must list the same layers.
pub fn component_series(
    rows: &[LayerLogRow],
) -> Result<(ComponentSeries, BTreeMap<LayerType, ComponentSeries>)> {
    let mut by_step: BTreeMap<usize, Vec<&LayerLogRow>> = BTreeMap::new();
    for r in rows {
        by_step.entry(r.step).or_default().push(r);
    }
    let layout = |rs: &[&LayerLogRow]| {
        let mut v: Vec<(String, LayerType)> = rs.iter().map(|r| (r.layer.clone(), r.layer_type)).collect();
        v.sort();
        v
    };
    let mut expected = None;
    let mut total = ComponentSeries::default();
    let mut per_type: BTreeMap<LayerType, ComponentSeries> = BTreeMap::new();
    let types: Vec<LayerType> = {
        let mut t: Vec<LayerType> = rows.iter().map(|r| r.layer_type).collect();
        t.sort();
        t.dedup();
        t
    };
    for (step, rs) in &by_step {
        let l = layout(rs);
        match &expected {
            None => expected = Some(l),
            Some(e) if *e != l => {
                return Err(Error::Log(format!("step {step} lists a different set of layers")))
            }
            _ => {}
        }
        total.push(rs.iter().map(|r| r.g2_raw).sum(), rs.iter().map(|r| r.s_raw).sum());
        for &t in &types {
            let sel = rs.iter().filter(|r| r.layer_type == t);
            let (g2, s) = sel.fold((0.0, 0.0), |(g, s), r| (g + r.g2_raw, s + r.s_raw));
            per_type.entry(t).or_default().push(g2, s);
        }
    }
    Ok((total, per_type))
}
