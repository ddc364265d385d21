use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{PspError, Result};

pub const SEQUENCE_SUFFIX: &str = ".psp.json";

/// One recorded action: `frames[t][body][joint] = [x, y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkeletonSequence {
    pub id: String,
    pub label: Option<usize>,
    pub n_joints: usize,
    pub frames: Vec<Vec<Vec<[f64; 3]>>>,
}

impl SkeletonSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bodies(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Checks the shape and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let err = |field: String, msg: &str| PspError::Schema {
            file: self.id.clone(),
            field,
            msg: msg.to_string(),
        };
        if self.frames.is_empty() {
            return Err(err("frames".into(), "sequence has no frames"));
        }
        let bodies = self.n_bodies();
        if bodies == 0 {
            return Err(err("frames[0]".into(), "frame has no bodies"));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != bodies {
                return Err(err(format!("frames[{t}]"), "body count differs from frame 0"));
            }
            for (b, joints) in frame.iter().enumerate() {
                if joints.len() != self.n_joints {
                    return Err(err(format!("frames[{t}][{b}]"), "joint count differs from n_joints"));
                }
                for (j, xyz) in joints.iter().enumerate() {
                    if let Some(k) = xyz.iter().position(|v| !v.is_finite()) {
                        return Err(err(format!("frames[{t}][{b}][{j}][{k}]"), "non-finite coordinate"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("finite sequence serializes")
    }

    /// Parses and validates one psp-json document. `origin` names the source in errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cleaned = null_out_nonfinite_tokens(text);
        let doc: Value = serde_json::from_str(&cleaned).map_err(|e| PspError::Schema {
            file: origin.to_string(),
            field: "$".into(),
            msg: e.to_string(),
        })?;
        parse_document(&doc, origin)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| PspError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PspError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Bare `NaN`, `Infinity` and `-Infinity` tokens are not JSON, but common
/// writers emit them. Replace them with `null` outside string literals so
/// the schema walk can report the exact coordinate.
fn null_out_nonfinite_tokens(text: &str) -> std::borrow::Cow<'_, str> {
    if !text.contains("NaN") && !text.contains("Infinity") {
        return text.into();
    }
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut in_str = false;
    while i < bytes.len() {
        let c = bytes[i];
        if in_str {
            if c == b'\\' && i + 1 < bytes.len() {
                out.push_str(&text[i..i + 2]);
                i += 2;
                continue;
            }
            if c == b'"' {
                in_str = false;
            }
        } else if c == b'"' {
            in_str = true;
        } else {
            let rest = &text[i..];
            let token = ["-Infinity", "Infinity", "NaN"].into_iter().find(|t| rest.starts_with(t));
            if let Some(t) = token {
                out.push_str("null");
                i += t.len();
                continue;
            }
        }
        let ch = text[i..].chars().next().expect("in bounds");
        out.push(ch);
        i += ch.len_utf8();
    }
    out.into()
}

fn parse_document(doc: &Value, origin: &str) -> Result<SkeletonSequence> {
    let err = |field: &str, msg: &str| PspError::Schema {
        file: origin.to_string(),
        field: field.to_string(),
        msg: msg.to_string(),
    };
    let obj = doc.as_object().ok_or_else(|| err("$", "expected an object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "id" | "label" | "n_joints" | "frames") {
            return Err(err(key, "unknown field"));
        }
    }
    let id = obj
        .get("id")
        .ok_or_else(|| err("id", "missing"))?
        .as_str()
        .ok_or_else(|| err("id", "expected a string"))?
        .to_string();
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| err("label", "expected a non-negative integer or null"))? as usize),
    };
    let n_joints = obj
        .get("n_joints")
        .ok_or_else(|| err("n_joints", "missing"))?
        .as_u64()
        .filter(|&n| n > 0)
        .ok_or_else(|| err("n_joints", "expected a positive integer"))? as usize;
    let frames_v = obj
        .get("frames")
        .ok_or_else(|| err("frames", "missing"))?
        .as_array()
        .ok_or_else(|| err("frames", "expected an array"))?;

    let mut frames = Vec::with_capacity(frames_v.len());
    for (t, fv) in frames_v.iter().enumerate() {
        let bodies_v = fv.as_array().ok_or_else(|| err(&format!("frames[{t}]"), "expected an array"))?;
        let mut bodies = Vec::with_capacity(bodies_v.len());
        for (b, bv) in bodies_v.iter().enumerate() {
            let joints_v = bv
                .as_array()
                .ok_or_else(|| err(&format!("frames[{t}][{b}]"), "expected an array"))?;
            let mut joints = Vec::with_capacity(joints_v.len());
            for (j, jv) in joints_v.iter().enumerate() {
                let path = format!("frames[{t}][{b}][{j}]");
                let xyz = jv
                    .as_array()
                    .filter(|a| a.len() == 3)
                    .ok_or_else(|| err(&path, "expected [x, y, z]"))?;
                let mut p = [0.0; 3];
                for (k, cv) in xyz.iter().enumerate() {
                    p[k] = match cv {
                        Value::Number(n) => n.as_f64().ok_or_else(|| err(&format!("{path}[{k}]"), "not a number"))?,
                        Value::Null => return Err(err(&format!("{path}[{k}]"), "non-finite coordinate")),
                        _ => return Err(err(&format!("{path}[{k}]"), "expected a number")),
                    };
                    if !p[k].is_finite() {
                        return Err(err(&format!("{path}[{k}]"), "non-finite coordinate"));
                    }
                }
                joints.push(p);
            }
            bodies.push(joints);
        }
        frames.push(bodies);
    }
    let seq = SkeletonSequence {
        id,
        label,
        n_joints,
        frames,
    };
    seq.validate().map_err(|e| match e {
        PspError::Schema { field, msg, .. } => PspError::Schema {
            file: origin.to_string(),
            field,
            msg,
        },
        other => other,
    })?;
    Ok(seq)
}

/// Every `*.psp.json` file directly inside `dir`, sorted by file name.
pub fn sequence_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| PspError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| PspError::io(dir, e))?;
        let path = entry.path();
        let is_seq = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(SEQUENCE_SUFFIX));
        if is_seq && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every sequence file in `dir`, ordered by id. Duplicate ids are an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<SkeletonSequence>> {
    let mut seqs = sequence_files(dir)?
        .iter()
        .map(|p| SkeletonSequence::load(p))
        .collect::<Result<Vec<_>>>()?;
    seqs.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = seqs.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(PspError::Invalid(format!("{}: duplicate sequence id {}", dir.display(), w[0].id)));
    }
    Ok(seqs)
}

/// Writes each sequence as `<id>.psp.json` in `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, seqs: &[SkeletonSequence]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PspError::io(dir, e))?;
    for s in seqs {
        if s.id.is_empty() || s.id.contains(['/', '\\']) {
            return Err(PspError::Invalid(format!("sequence id {:?} is not a valid file stem", s.id)));
        }
        s.save(&dir.join(format!("{}{SEQUENCE_SUFFIX}", s.id)))?;
    }
    Ok(())
}
