//! JSONL record formats. Every file starts with a header object
//! `{"v":1,"schema":"<name>"}`; readers accept files without it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::AnchorRecord;
use crate::hemix::FeatureVector;
use crate::metrics::BBox;

pub const SCHEMA_VERSION: u64 = 1;

pub const SCHEMA_ANCHORS: &str = "anchors";
pub const SCHEMA_TEXTS: &str = "texts";
pub const SCHEMA_BOXES: &str = "boxes";
pub const SCHEMA_EXPRESSIONS: &str = "expressions";
pub const SCHEMA_PHRASE_FEATURES: &str = "phrase-features";
pub const SCHEMA_DECOUPLED: &str = "decoupled";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub v: u64,
    pub schema: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorJson {
    pub feature: Vec<f64>,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// All anchors of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorsLine {
    pub image_id: String,
    pub anchors: Vec<AnchorJson>,
}

impl AnchorsLine {
    pub fn to_records(&self) -> Result<Vec<AnchorRecord>> {
        self.anchors
            .iter()
            .map(|a| AnchorRecord::new(FeatureVector::new(a.feature.clone())?, a.confidence, a.bbox))
            .collect()
    }
}

/// Precomputed phrase features for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextsLine {
    pub sample_id: String,
    pub image_id: String,
    pub phrases: Vec<String>,
    pub features: Vec<Vec<f64>>,
}

/// Ground truth or predictions; an empty list means no target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxesLine {
    pub sample_id: String,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionLine {
    pub sample_id: String,
    pub image_id: String,
    pub expression: String,
    /// Recorded model response, replayed in offline mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Image path sent along with service requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

/// Text feature for one phrase, looked up by exact phrase text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseFeatureLine {
    pub phrase: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoupledLine {
    pub sample_id: String,
    pub count: usize,
    pub phrases: Vec<String>,
}

fn json_err(context: String) -> impl FnOnce(serde_json::Error) -> Error {
    move |source| Error::Json { context, source }
}

fn to_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(json_err("serialize".to_string()))
}

fn as_header(line: &str) -> Option<Header> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    let obj = value.as_object()?;
    if obj.contains_key("v") && obj.contains_key("schema") {
        serde_json::from_value(value).ok()
    } else {
        None
    }
}

/// Reads records from a JSONL stream, checking the header when present.
pub fn read_records<T: DeserializeOwned, R: BufRead>(reader: R, schema: &str, source: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut first = true;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if std::mem::take(&mut first) {
            if let Some(h) = as_header(&line) {
                if h.v != SCHEMA_VERSION {
                    return Err(Error::domain(format!("{source}: unsupported schema version {}", h.v)));
                }
                if h.schema != schema {
                    return Err(Error::domain(format!("{source}: expected schema {schema:?}, found {:?}", h.schema)));
                }
                continue;
            }
        }
        out.push(serde_json::from_str(&line).map_err(json_err(format!("{source}:{}", idx + 1)))?);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_records(BufReader::new(file), schema, &path.display().to_string())
}

pub fn write_records<T: Serialize, W: Write>(mut writer: W, schema: &str, records: &[T]) -> Result<()> {
    let header = Header {
        v: SCHEMA_VERSION,
        schema: schema.to_string(),
    };
    writeln!(writer, "{}", to_line(&header)?)?;
    for r in records {
        writeln!(writer, "{}", to_line(r)?)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<()> {
    write_records(BufWriter::new(File::create(path)?), schema, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_header() {
        let lines = vec![
            BoxesLine {
                sample_id: "a".into(),
                boxes: vec![BBox::new(0.0, 0.0, 1.0, 2.0).unwrap()],
            },
            BoxesLine {
                sample_id: "b".into(),
                boxes: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, SCHEMA_BOXES, &lines).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"v\":1,\"schema\":\"boxes\"}\n"));
        assert!(text.contains("{\"sample_id\":\"b\",\"boxes\":[]}"));
        let back: Vec<BoxesLine> = read_records(&buf[..], SCHEMA_BOXES, "mem").unwrap();
        assert_eq!(back, lines);
    }

    #[test]
    fn header_is_optional_but_checked() {
        let body = "{\"sample_id\":\"a\",\"boxes\":[[0,0,1,1]]}\n\n";
        let r: Vec<BoxesLine> = read_records(body.as_bytes(), SCHEMA_BOXES, "mem").unwrap();
        assert_eq!(r.len(), 1);
        let wrong = format!("{{\"v\":1,\"schema\":\"anchors\"}}\n{body}");
        assert!(read_records::<BoxesLine, _>(wrong.as_bytes(), SCHEMA_BOXES, "mem").is_err());
        let future = format!("{{\"v\":2,\"schema\":\"boxes\"}}\n{body}");
        assert!(read_records::<BoxesLine, _>(future.as_bytes(), SCHEMA_BOXES, "mem").is_err());
    }

    #[test]
    fn bad_line_reports_position() {
        let body = "{\"v\":1,\"schema\":\"boxes\"}\n{\"sample_id\":\"a\",\"boxes\":[[2,0,1,1]]}\n";
        match read_records::<BoxesLine, _>(body.as_bytes(), SCHEMA_BOXES, "gt.jsonl") {
            Err(Error::Json { context, .. }) => assert_eq!(context, "gt.jsonl:2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn anchors_line_validates_boxes() {
        let line: AnchorsLine =
            serde_json::from_str(r#"{"image_id":"i","anchors":[{"feature":[1.0],"confidence":0.5,"box":[0,0,0,4]}]}"#).unwrap();
        assert!(line.to_records().is_err());
    }
}
