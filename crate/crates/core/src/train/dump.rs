use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{PspError, Result};
use crate::model::PspModel;
use crate::nn::{Ctx, Mode};
use crate::ppa::{Coefficients, Level};
use crate::skeleton::{Batch, PyramidSpec};
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, Prediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpKind {
    Attention,
    Embeddings,
    Metrics,
    Predictions,
}

impl FromStr for DumpKind {
    type Err = PspError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "attention" => Ok(DumpKind::Attention),
            "embeddings" => Ok(DumpKind::Embeddings),
            "metrics" => Ok(DumpKind::Metrics),
            "predictions" => Ok(DumpKind::Predictions),
            other => Err(PspError::Invalid(format!(
                "unknown dump kind {other:?}; expected attention, embeddings, metrics or predictions"
            ))),
        }
    }
}

pub const ATTENTION_DIR: &str = "attention";
pub const ATTENTION_MANIFEST: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// One attention CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionEntry {
    pub file: String,
    pub sample: String,
    pub modality: String,
    pub head: usize,
    pub map: String,
    pub level: Level,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize)]
struct AttentionManifest<'a> {
    coefficients: Coefficients,
    pyramid: &'a PyramidSpec,
    entries: Vec<AttentionEntry>,
}

pub fn node_names(spec: &PyramidSpec, level: Level) -> Vec<String> {
    let n = level.nodes(spec);
    let given = spec.names.as_ref().map(|names| match level {
        Level::Body => &names.bodies,
        Level::Part => &names.parts,
        Level::Joint => &names.joints,
    });
    match given {
        Some(list) if list.len() == n => list.clone(),
        _ => (0..n).map(|i| format!("{}{i}", level.name())).collect(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> PspError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PspError::io(path, io),
        other => PspError::Invalid(format!("{}: csv error {other:?}", path.display())),
    }
}

fn write_matrix(path: &Path, names: &[String], data: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let n = names.len();
    let mut header = vec!["node".to_string()];
    header.extend_from_slice(names);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, row) in data.chunks(n).enumerate() {
        let mut rec = vec![names[i].clone()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| PspError::io(path, e))
}

/// Eval-mode pyramid pass over `batch`: every attention map by name, then the
/// `[2M, C']` projected embeddings per level.
pub fn attention_and_embeddings(
    model: &PspModel,
    batch: &Batch,
    coeffs: &Coefficients,
) -> Result<(Vec<(&'static str, Level, Tensor)>, Vec<(Level, Tensor)>)> {
    let mut ctx = Ctx::new(&model.store, Mode::Eval);
    let (fj, fm) = model.encode(&mut ctx, batch)?;
    let stacked = ctx.tape.concat(&[fj, fm], 0)?;
    let out = model.ppa.forward(&mut ctx, stacked, coeffs, &Level::ALL)?;
    let m = &out.maps;
    let maps = [
        ("body", Level::Body, m.body),
        ("part", Level::Part, m.part),
        ("joint", Level::Joint, m.joint),
        ("body_to_part", Level::Part, m.lifted_part),
        ("part_to_joint", Level::Joint, m.lifted_joint_from_part),
        ("body_to_joint", Level::Joint, m.lifted_joint_from_body),
        ("polymerized_part", Level::Part, m.polymerized_part),
        ("polymerized_joint", Level::Joint, m.polymerized_joint),
    ]
    .map(|(name, l, v)| (name, l, ctx.tape.value(v).clone()))
    .to_vec();
    let mut emb = Vec::new();
    for l in Level::ALL {
        let z = model.embeddings(&mut ctx, &out, l)?;
        emb.push((l, ctx.tape.value(z).clone()));
    }
    Ok((maps, emb))
}

fn modality(row: usize, m: usize) -> &'static str {
    if row < m {
        "joint"
    } else {
        "motion"
    }
}

pub fn dump_attention(model: &PspModel, batch: &Batch, coeffs: &Coefficients, out: &Path) -> Result<Vec<AttentionEntry>> {
    let dir = out.join(ATTENTION_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| PspError::io(&dir, e))?;
    let (maps, _) = attention_and_embeddings(model, batch, coeffs)?;
    let m = batch.len();
    let mut entries = Vec::new();
    for (name, level, t) in &maps {
        let s = t.shape();
        let (rows2m, heads, n) = (s[0], s[1], s[2]);
        let names = node_names(&model.spec, *level);
        for r in 0..rows2m {
            for h in 0..heads {
                let sample = &batch.ids[r % m];
                let file = format!("{sample}_{}_h{h}_{name}.csv", modality(r, m));
                let off = (r * heads + h) * n * n;
                write_matrix(&dir.join(&file), &names, &t.data()[off..off + n * n])?;
                entries.push(AttentionEntry {
                    file,
                    sample: sample.clone(),
                    modality: modality(r, m).into(),
                    head: h,
                    map: name.to_string(),
                    level: *level,
                    rows: n,
                    cols: n,
                });
            }
        }
    }
    let manifest = AttentionManifest {
        coefficients: *coeffs,
        pyramid: &model.spec,
        entries: entries.clone(),
    };
    let path = dir.join(ATTENTION_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| PspError::io(&path, e))?;
    Ok(entries)
}

/// Rows of `id, level, modality, e0, e1, ...`.
pub fn dump_embeddings(model: &PspModel, batch: &Batch, coeffs: &Coefficients, out: &Path) -> Result<PathBuf> {
    let (_, emb) = attention_and_embeddings(model, batch, coeffs)?;
    let path = out.join(EMBEDDINGS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let dim = emb[0].1.shape()[1];
    let mut header = vec!["id".to_string(), "level".into(), "modality".into()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    let m = batch.len();
    for (level, t) in &emb {
        for (r, row) in t.data().chunks(dim).enumerate() {
            let mut rec = vec![batch.ids[r % m].clone(), level.name().into(), modality(r, m).into()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| PspError::io(&path, e))?;
    Ok(path)
}

pub fn dump_metrics(history: &[EpochMetrics], out: &Path) -> Result<PathBuf> {
    let path = out.join(METRICS_FILE);
    let text = serde_json::to_string_pretty(history).expect("metrics serialize");
    std::fs::write(&path, text).map_err(|e| PspError::io(&path, e))?;
    Ok(path)
}

pub fn dump_predictions(preds: &[Prediction], out: &Path) -> Result<PathBuf> {
    let path = out.join(PREDICTIONS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["id", "label", "predicted"]).map_err(|e| csv_err(&path, e))?;
    for p in preds {
        let label = p.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([p.id.as_str(), label.as_str(), p.predicted.to_string().as_str()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| PspError::io(&path, e))?;
    Ok(path)
}
