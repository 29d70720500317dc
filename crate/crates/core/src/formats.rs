//! On-disk formats: θ files, shield files (JSON plus an optional compact
//! binary companion) and the canonical JSON writer they share.
//!
//! Canonical JSON: object keys sorted, no whitespace, integers printed as
//! integers and every other number as `{:.16e}` (17 significant digits).
//! The θ digest is the hex SHA-256 of the canonical form of a θ document
//! without its `preset` field.
//!
//! Binary decision companion (`.fsh`), all integers little-endian:
//!
//! ```text
//! magic    b"FSH1"
//! u32      property (0 = dp, 1 = eqopp)
//! u32      horizon T
//! u32      number of inputs |X|
//! u32      number of entries E
//! [u8]     ceil(E / 8) bytes; entry k is bit (k % 8) of byte k / 8
//! ```
//!
//! Entries are in lattice order: stage ascending, then counter index, then
//! input in canonical θ order. A set bit means "accept".

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distribution::{preset, Diagnostic, InputDistribution};
use crate::model::{CounterVector, Decision, FairnessSpec, Group, Property};
use crate::synthesis::{ShieldTable, TerminalRule, Value};

pub const THETA_FORMAT: &str = "fairshield-theta/1";
pub const SHIELD_FORMAT: &str = "fairshield-shield/1";
pub const BINARY_MAGIC: &[u8; 4] = b"FSH1";

/// Shield files with more entries than this keep decisions in the binary
/// companion instead of inline JSON.
pub const INLINE_DECISION_LIMIT: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema: {0}")]
    Schema(String),
    #[error("{0}")]
    Invalid(#[from] Diagnostic),
    #[error("shield was synthesized for θ digest {expected}, got {found}")]
    DigestMismatch { expected: String, found: String },
}

impl FormatError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn write_number(out: &mut String, n: &serde_json::Number) {
    if n.is_i64() || n.is_u64() {
        let _ = write!(out, "{n}");
    } else {
        let x = n.as_f64().unwrap_or(f64::NAN);
        let _ = write!(out, "{x:.16e}");
    }
}

fn write_string(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serializes"));
}

fn write_canonical(out: &mut String, v: &Json) {
    match v {
        Json::Null => out.push_str("null"),
        Json::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Json::Number(n) => write_number(out, n),
        Json::String(s) => write_string(out, s),
        Json::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(out, item);
            }
            out.push(']');
        }
        Json::Object(map) => {
            let sorted: BTreeMap<&String, &Json> = map.iter().collect();
            out.push('{');
            for (i, (k, item)) in sorted.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(out, k);
                out.push(':');
                write_canonical(out, item);
            }
            out.push('}');
        }
    }
}

/// Canonical serialization of a JSON value.
pub fn canonical_json(v: &Json) -> String {
    let mut out = String::new();
    write_canonical(&mut out, v);
    out
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| FormatError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| FormatError::io(path, e))?;
    tmp.persist(path).map_err(|e| FormatError::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|e| FormatError::io(path, e))
}

// ---------------------------------------------------------------- θ files

#[derive(Debug, Deserialize)]
struct EntryDoc {
    g: String,
    r: u8,
    c_index: usize,
    p: f64,
}

#[derive(Debug, Deserialize)]
struct GroundTruthDoc {
    g: String,
    r: u8,
    p_z1: f64,
}

#[derive(Debug, Deserialize)]
struct ThetaDoc {
    #[serde(default)]
    groups: Option<Vec<String>>,
    #[serde(default)]
    cost_set: Option<Vec<f64>>,
    #[serde(default)]
    entries: Option<Vec<EntryDoc>>,
    #[serde(default)]
    ground_truth: Option<Vec<GroundTruthDoc>>,
    #[serde(default)]
    preset: Option<String>,
}

fn parse_group(s: &str) -> Result<Group, FormatError> {
    Group::parse(s).ok_or_else(|| FormatError::Schema(format!("unknown group {s:?}")))
}

fn check_bit(r: u8) -> Result<Decision, FormatError> {
    match r {
        0 | 1 => Ok(Decision::from_bit(r)),
        _ => Err(FormatError::Schema(format!("recommendation must be 0 or 1, got {r}"))),
    }
}

/// Parses and validates a θ document.
pub fn parse_theta(text: &str) -> Result<InputDistribution, FormatError> {
    let doc: ThetaDoc = serde_json::from_str(text)?;
    if let Some(groups) = &doc.groups {
        if groups.len() != 2 || groups[0] != "a" || groups[1] != "b" {
            return Err(FormatError::Schema(r#"groups must be ["a","b"]"#.into()));
        }
    }
    let base = match (&doc.preset, &doc.entries) {
        (Some(_), Some(_)) => {
            return Err(FormatError::Schema("give either `preset` or `entries`, not both".into()))
        }
        (Some(name), None) => {
            preset(name).ok_or_else(|| FormatError::Schema(format!("unknown preset {name:?}")))?
        }
        (None, Some(entries)) => {
            let cost_set = doc
                .cost_set
                .clone()
                .ok_or_else(|| FormatError::Schema("`cost_set` is required with `entries`".into()))?;
            let k = cost_set.len();
            let mut probs = vec![0.0; 4 * k];
            let mut seen = vec![false; 4 * k];
            for e in entries {
                let g = parse_group(&e.g)?;
                let r = check_bit(e.r)?;
                if e.c_index >= k {
                    return Err(FormatError::Schema(format!(
                        "c_index {} out of range for {k} costs",
                        e.c_index
                    )));
                }
                let i = (g.index() * 2 + r.bit() as usize) * k + e.c_index;
                if seen[i] {
                    return Err(FormatError::Schema(format!(
                        "duplicate entry ({},{},{})",
                        e.g, e.r, e.c_index
                    )));
                }
                seen[i] = true;
                probs[i] = e.p;
            }
            InputDistribution::new_unchecked(cost_set, probs, None)
        }
        (None, None) => return Err(FormatError::Schema("θ needs `entries` or `preset`".into())),
    };
    let theta = match &doc.ground_truth {
        None => base,
        Some(list) => {
            let mut gt = [[f64::NAN; 2]; 2];
            for item in list {
                let g = parse_group(&item.g)?;
                let r = check_bit(item.r)?;
                gt[g.index()][r.bit() as usize] = item.p_z1;
            }
            if gt.iter().flatten().any(|p| p.is_nan()) {
                return Err(FormatError::Schema(
                    "ground_truth must list all four (g, r) cells".into(),
                ));
            }
            InputDistribution::new_unchecked(base.cost_set().to_vec(), base.probabilities().to_vec(), Some(gt))
        }
    };
    theta.validate()?;
    Ok(theta)
}

pub fn load_theta(path: &Path) -> Result<InputDistribution, FormatError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| FormatError::Schema(e.to_string()))?;
    parse_theta(&text)
}

/// θ as a JSON document (canonical entry order, zero entries included).
pub fn theta_to_json(theta: &InputDistribution) -> Json {
    let entries: Vec<Json> = (0..theta.n_inputs())
        .map(|i| {
            let x = theta.input(i);
            json!({
                "g": x.group.label(),
                "r": x.recommendation.bit(),
                "c_index": i % theta.n_costs(),
                "p": theta.probabilities()[i],
            })
        })
        .collect();
    let mut doc = json!({
        "format": THETA_FORMAT,
        "groups": ["a", "b"],
        "cost_set": theta.cost_set(),
        "entries": entries,
    });
    if let Some(gt) = theta.ground_truth() {
        let list: Vec<Json> = Group::ALL
            .iter()
            .flat_map(|&g| {
                (0..2u8).map(move |r| json!({"g": g.label(), "r": r, "p_z1": gt[g.index()][r as usize]}))
            })
            .collect();
        doc["ground_truth"] = Json::Array(list);
    }
    doc
}

pub fn theta_digest(theta: &InputDistribution) -> String {
    let text = canonical_json(&theta_to_json(theta));
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn save_theta(path: &Path, theta: &InputDistribution) -> Result<(), FormatError> {
    let mut text = canonical_json(&theta_to_json(theta));
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

// ----------------------------------------------------------- shield files

#[derive(Debug, Serialize, Deserialize)]
struct DecisionDoc {
    stage: u32,
    counters: Vec<u32>,
    g: String,
    r: u8,
    c_index: usize,
    y: u8,
}

#[derive(Debug, Deserialize)]
struct ShieldDoc {
    format: String,
    property: Property,
    kappa: f64,
    #[serde(rename = "T")]
    horizon: u32,
    terminal: TerminalRule,
    theta_digest: String,
    root_value: Option<f64>,
    #[serde(default)]
    decisions: Option<Vec<DecisionDoc>>,
    #[serde(default)]
    decisions_binary: Option<String>,
}

/// Where a shield's decisions ended up.
#[derive(Debug, Clone, PartialEq)]
pub struct ShieldWrite {
    pub json: PathBuf,
    pub binary: Option<PathBuf>,
}

fn shield_header(table: &ShieldTable) -> serde_json::Map<String, Json> {
    let spec = table.spec();
    let mut m = serde_json::Map::new();
    m.insert("format".into(), json!(SHIELD_FORMAT));
    m.insert("property".into(), json!(spec.property.label()));
    m.insert("kappa".into(), json!(spec.kappa));
    m.insert("T".into(), json!(spec.horizon));
    m.insert(
        "terminal".into(),
        serde_json::to_value(table.terminal()).expect("terminal serializes"),
    );
    m.insert("theta_digest".into(), json!(table.theta_digest()));
    m.insert("cost_set".into(), json!(table.theta().cost_set()));
    m.insert("root_value".into(), json!(table.root_value().get()));
    m.insert("lattice_states".into(), json!(table.lattice().total_states()));
    m.insert("entries".into(), json!(table.entry_count()));
    m
}

fn write_inline_decisions(out: &mut String, table: &ShieldTable) {
    let k = table.theta().n_costs();
    out.push('[');
    let mut first = true;
    table.for_each_entry(|stage, c, i, y| {
        if !first {
            out.push(',');
        }
        first = false;
        let x = table.theta().input(i);
        let _ = write!(
            out,
            r#"{{"c_index":{},"counters":[{},{},{},{}],"g":"{}","r":{},"stage":{},"y":{}}}"#,
            i % k,
            c.n_a,
            c.n_a1,
            c.n_b,
            c.n_b1,
            x.group.label(),
            x.recommendation.bit(),
            stage,
            y.bit()
        );
    });
    out.push(']');
}

/// Canonical shield JSON with decisions inline.
pub fn shield_to_json_string(table: &ShieldTable) -> String {
    let mut header = shield_header(table);
    header.insert("decisions".into(), Json::Null);
    let sorted: BTreeMap<String, Json> = header.into_iter().collect();
    let mut out = String::from("{");
    for (i, (k, v)) in sorted.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_string(&mut out, k);
        out.push(':');
        if k == "decisions" {
            write_inline_decisions(&mut out, table);
        } else {
            write_canonical(&mut out, v);
        }
    }
    out.push('}');
    out
}

pub fn encode_binary(table: &ShieldTable) -> Result<Vec<u8>, FormatError> {
    let raw = table.decisions_raw();
    let count = u32::try_from(raw.len())
        .map_err(|_| FormatError::Schema("too many entries for the binary layout".into()))?;
    let n_inputs = table.theta().n_inputs() as u32;
    let mut out = Vec::with_capacity(20 + raw.len().div_ceil(8));
    out.extend_from_slice(BINARY_MAGIC);
    let property = match table.spec().property {
        Property::DemographicParity => 0u32,
        Property::EqualOpportunity => 1u32,
    };
    for word in [property, table.spec().horizon, n_inputs, count] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for chunk in raw.chunks(8) {
        let mut byte = 0u8;
        for (bit, &d) in chunk.iter().enumerate() {
            byte |= (d & 1) << bit;
        }
        out.push(byte);
    }
    Ok(out)
}

/// Decoded binary header and decision bits.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDecisions {
    pub property: Property,
    pub horizon: u32,
    pub n_inputs: u32,
    pub decisions: Vec<u8>,
}

pub fn decode_binary(bytes: &[u8]) -> Result<BinaryDecisions, FormatError> {
    if bytes.len() < 20 || &bytes[..4] != BINARY_MAGIC {
        return Err(FormatError::Schema("not an FSH1 decision file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let property = match word(0) {
        0 => Property::DemographicParity,
        1 => Property::EqualOpportunity,
        p => return Err(FormatError::Schema(format!("unknown property code {p}"))),
    };
    let count = word(3) as usize;
    let body = &bytes[20..];
    if body.len() != count.div_ceil(8) {
        return Err(FormatError::Schema(format!(
            "expected {} payload bytes, found {}",
            count.div_ceil(8),
            body.len()
        )));
    }
    let decisions = (0..count).map(|k| (body[k / 8] >> (k % 8)) & 1).collect();
    Ok(BinaryDecisions {
        property,
        horizon: word(1),
        n_inputs: word(2),
        decisions,
    })
}

/// Writes a shield. Decisions go inline unless the table is larger than
/// [`INLINE_DECISION_LIMIT`] or `force_binary` is set, in which case they go
/// to `<json path>.fsh` and the JSON names that file.
pub fn save_shield(path: &Path, table: &ShieldTable, force_binary: bool) -> Result<ShieldWrite, FormatError> {
    if !force_binary && table.entry_count() <= INLINE_DECISION_LIMIT {
        let mut text = shield_to_json_string(table);
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        return Ok(ShieldWrite {
            json: path.to_path_buf(),
            binary: None,
        });
    }
    let mut bin_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "shield".into());
    bin_name.push(".fsh");
    let bin_path = path.with_file_name(&bin_name);
    write_atomic(&bin_path, &encode_binary(table)?)?;
    let mut header = shield_header(table);
    header.insert(
        "decisions_binary".into(),
        json!(bin_name.to_string_lossy()),
    );
    let mut text = canonical_json(&Json::Object(header));
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(ShieldWrite {
        json: path.to_path_buf(),
        binary: Some(bin_path),
    })
}

/// Loads a shield written by [`save_shield`] for the given θ.
pub fn load_shield(path: &Path, theta: &InputDistribution) -> Result<ShieldTable, FormatError> {
    let bytes = read_file(path)?;
    let doc: ShieldDoc = serde_json::from_slice(&bytes)?;
    if doc.format != SHIELD_FORMAT {
        return Err(FormatError::Schema(format!("unsupported format {:?}", doc.format)));
    }
    let found = theta_digest(theta);
    if found != doc.theta_digest {
        return Err(FormatError::DigestMismatch {
            expected: doc.theta_digest,
            found,
        });
    }
    let spec = FairnessSpec::new(doc.property, doc.kappa, doc.horizon)
        .map_err(|e| FormatError::Schema(e.to_string()))?;
    let root = doc.root_value.map(Value::finite).unwrap_or(Value::INFEASIBLE);

    let decisions = match (doc.decisions, doc.decisions_binary) {
        (Some(list), None) => {
            let probe = ShieldTable::from_parts(
                spec,
                doc.terminal.clone(),
                theta.clone(),
                root,
                vec![0; expected_entries(&spec, theta)],
            )
            .map_err(FormatError::Schema)?;
            let mut out = vec![u8::MAX; probe.entry_count()];
            for d in list {
                if d.counters.len() != 4 {
                    return Err(FormatError::Schema("counters must have 4 entries".into()));
                }
                let c = CounterVector::eqopp(d.counters[0], d.counters[1], d.counters[2], d.counters[3], d.stage);
                let g = parse_group(&d.g)?;
                let r = check_bit(d.r)?;
                let y = check_bit(d.y)?;
                if d.c_index >= theta.n_costs() {
                    return Err(FormatError::Schema(format!("c_index {} out of range", d.c_index)));
                }
                let e = probe
                    .entry_index(d.stage, &c, theta.index_of(g, r, d.c_index))
                    .map_err(|e| FormatError::Schema(e.to_string()))?;
                if out[e] != u8::MAX {
                    return Err(FormatError::Schema(format!("duplicate decision at stage {} {:?}", d.stage, c)));
                }
                out[e] = y.bit();
            }
            if let Some(missing) = out.iter().position(|&d| d == u8::MAX) {
                return Err(FormatError::Schema(format!(
                    "decision list is not total (first missing entry #{missing})"
                )));
            }
            out
        }
        (None, Some(name)) => {
            let bin_path = path.with_file_name(name);
            let bin = decode_binary(&read_file(&bin_path)?)?;
            if bin.property != spec.property
                || bin.horizon != spec.horizon
                || bin.n_inputs as usize != theta.n_inputs()
            {
                return Err(FormatError::Schema("binary header disagrees with JSON header".into()));
            }
            bin.decisions
        }
        _ => {
            return Err(FormatError::Schema(
                "exactly one of `decisions` or `decisions_binary` is required".into(),
            ))
        }
    };
    ShieldTable::from_parts(spec, doc.terminal, theta.clone(), root, decisions).map_err(FormatError::Schema)
}

fn expected_entries(spec: &FairnessSpec, theta: &InputDistribution) -> usize {
    let lattice = crate::synthesis::Lattice::new(spec.property, spec.horizon);
    (0..spec.horizon).map(|t| lattice.stage_len(t)).sum::<usize>() * theta.n_inputs()
}
