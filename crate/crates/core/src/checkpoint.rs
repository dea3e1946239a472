//! Versioned JSON checkpoints for networks.
//!
//! Layout (top-level keys, written in this order):
//!
//! ```text
//! format_version  integer, currently 1
//! role            "teacher" | "student"
//! extractor       { dims: [d0, ..., d_f], layers: [{ weight, bias }, ...] }
//! classifier      { frozen: bool, weight, bias }
//! head            { embed_dim: d_e, weight, bias }
//! ```
//!
//! Every `weight`/`bias` is `{ shape: [...], values: [...] }` with decimal
//! floats that round-trip bit-exactly.

use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{Affine, FeatureExtractor, Network, ProjectionHead, Role, SharedClassifier};
use crate::numerics::DenseArray;

pub const FORMAT_VERSION: u64 = 1;
const SECTIONS: [&str; 5] = ["format_version", "role", "extractor", "classifier", "head"];

fn array_json(a: &DenseArray) -> Value {
    json!({ "shape": a.shape(), "values": a.values() })
}

fn affine_json(a: &Affine) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("weight".into(), array_json(&a.weight));
    m.insert("bias".into(), array_json(&a.bias));
    m
}

pub fn to_json(net: &Network) -> Value {
    let layers: Vec<Value> = net
        .extractor
        .layers()
        .iter()
        .map(|l| Value::Object(affine_json(l)))
        .collect();
    let mut classifier = Map::new();
    classifier.insert("frozen".into(), Value::Bool(net.classifier.frozen));
    classifier.extend(affine_json(&net.classifier.affine));
    let mut head = Map::new();
    head.insert("embed_dim".into(), json!(net.head.embed_dim()));
    head.extend(affine_json(&net.head.affine));
    let role = match net.role {
        Role::Teacher => "teacher",
        Role::Student => "student",
    };
    // serde_json's Map keeps insertion order only with preserve_order, so
    // build the document by hand to pin the section order.
    let mut doc = Map::new();
    doc.insert("format_version".into(), json!(FORMAT_VERSION));
    doc.insert("role".into(), json!(role));
    doc.insert(
        "extractor".into(),
        json!({ "dims": net.extractor.dims(), "layers": layers }),
    );
    doc.insert("classifier".into(), Value::Object(classifier));
    doc.insert("head".into(), Value::Object(head));
    Value::Object(doc)
}

/// Serializes with sections in the documented order.
pub fn to_string(net: &Network) -> String {
    let doc = to_json(net);
    let mut out = String::from("{\n");
    for (i, key) in SECTIONS.iter().enumerate() {
        let body = serde_json::to_string(&doc[*key]).expect("serializable");
        out.push_str(&format!("  \"{key}\": {body}"));
        out.push_str(if i + 1 < SECTIONS.len() { ",\n" } else { "\n" });
    }
    out.push_str("}\n");
    out
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

pub fn from_str(text: &str) -> Result<Network> {
    let doc: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            let missing = SECTIONS.iter().find(|k| !text.contains(&format!("\"{k}\"")));
            return Err(Error::Checkpoint(match missing {
                Some(k) => format!("section `{k}` missing (file truncated or corrupted: {e})"),
                None => {
                    // Every key is present; blame the section the parser was in.
                    let offset = line_col_offset(text, e.line(), e.column());
                    let section = SECTIONS
                        .iter()
                        .rfind(|k| text.find(&format!("\"{k}\"")).is_some_and(|p| p <= offset))
                        .unwrap_or(&SECTIONS[0]);
                    format!("corrupted payload in section `{section}`: {e}")
                }
            }));
        }
    };
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Checkpoint("top level is not an object".into()))?;
    for key in SECTIONS {
        if !obj.contains_key(key) {
            return Err(Error::Checkpoint(format!("section `{key}` missing")));
        }
    }
    let version = obj["format_version"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("`format_version` is not an unsigned integer".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "`format_version` {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let role = match obj["role"].as_str() {
        Some("teacher") => Role::Teacher,
        Some("student") => Role::Student,
        other => return Err(Error::Checkpoint(format!("`role` has invalid value {other:?}"))),
    };

    let ext = section(obj, "extractor")?;
    let dims: Vec<usize> = field(ext, "extractor", "dims")?
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_u64().map(|d| d as usize)).collect())
        .ok_or_else(|| Error::Checkpoint("`extractor.dims` is not a list of sizes".into()))?;
    let layers_json = field(ext, "extractor", "layers")?
        .as_array()
        .ok_or_else(|| Error::Checkpoint("`extractor.layers` is not a list".into()))?;
    let layers = layers_json
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let l = l
                .as_object()
                .ok_or_else(|| Error::Checkpoint(format!("`extractor.layers[{i}]` is not an object")))?;
            parse_affine(l, &format!("extractor.layers[{i}]"))
        })
        .collect::<Result<Vec<_>>>()?;
    let extractor =
        FeatureExtractor::from_layers(layers).map_err(|e| Error::Checkpoint(format!("`extractor`: {e}")))?;
    if extractor.dims() != dims {
        return Err(Error::Checkpoint(format!(
            "`extractor.dims` {dims:?} disagree with layer shapes {:?}",
            extractor.dims()
        )));
    }

    let cls = section(obj, "classifier")?;
    let frozen = field(cls, "classifier", "frozen")?
        .as_bool()
        .ok_or_else(|| Error::Checkpoint("`classifier.frozen` is not a boolean".into()))?;
    let classifier = SharedClassifier {
        affine: parse_affine(cls, "classifier")?,
        frozen,
    };

    let head_obj = section(obj, "head")?;
    let embed_dim = field(head_obj, "head", "embed_dim")?
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("`head.embed_dim` is not a size".into()))? as usize;
    let head = ProjectionHead {
        affine: parse_affine(head_obj, "head")?,
    };
    if head.embed_dim() != embed_dim {
        return Err(Error::Checkpoint(format!(
            "`head.embed_dim` {embed_dim} disagrees with weight shape {:?}",
            head.affine.weight.shape()
        )));
    }
    Network::assemble(extractor, Arc::new(classifier), head, role).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn line_col_offset(text: &str, line: usize, col: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + col.saturating_sub(1);
        }
        offset += l.len();
    }
    text.len()
}

fn section<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Map<String, Value>> {
    obj[key]
        .as_object()
        .ok_or_else(|| Error::Checkpoint(format!("section `{key}` is not an object")))
}

fn field<'a>(obj: &'a Map<String, Value>, owner: &str, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("field `{owner}.{key}` missing")))
}

fn parse_array(v: &Value, name: &str) -> Result<DenseArray> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Checkpoint(format!("`{name}` is not an object")))?;
    let shape: Vec<usize> = field(obj, name, "shape")?
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_u64().map(|d| d as usize)).collect())
        .ok_or_else(|| Error::Checkpoint(format!("`{name}.shape` is not a list of sizes")))?;
    let values: Vec<f64> = field(obj, name, "values")?
        .as_array()
        .and_then(|a| a.iter().map(Value::as_f64).collect())
        .ok_or_else(|| Error::Checkpoint(format!("`{name}.values` is not a list of numbers")))?;
    DenseArray::new(shape, values).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))
}

fn parse_affine(obj: &Map<String, Value>, name: &str) -> Result<Affine> {
    let weight = parse_array(field(obj, name, "weight")?, &format!("{name}.weight"))?;
    let bias = parse_array(field(obj, name, "bias")?, &format!("{name}.bias"))?;
    Affine::from_parts(weight, bias).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))
}
