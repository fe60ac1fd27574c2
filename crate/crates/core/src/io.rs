//! JSON, JSON-lines and CSV readers/writers. Parse failures carry the file,
//! the 1-based line and the offending field.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::detection::{GroundTruth, Validate};
use crate::error::{Result, StaError};
use crate::eval::GroundTruthSet;

fn parse_error(file: &str, line: usize, field: impl Into<String>, message: impl Into<String>) -> StaError {
    StaError::Parse { file: file.to_string(), line, field: field.into(), message: message.into() }
}

fn parse_line<T: DeserializeOwned>(text: &str, file: &str, line: usize) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = if path == "." { missing_field(&inner.to_string()).unwrap_or_else(|| ".".into()) } else { path };
        parse_error(file, line, field, inner.to_string())
    })
}

/// serde reports absent fields at the parent path; pull the name out of the message.
fn missing_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("missing field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Parses JSON-lines text; blank lines are skipped.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, file: &str) -> Result<Vec<T>> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| parse_line(l, file, i + 1)).collect()
}

/// Like [`parse_jsonl`] but also runs each record's [`Validate`] check.
pub fn parse_jsonl_validated<T: DeserializeOwned + Validate>(text: &str, file: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let rec: T = parse_line(l, file, i + 1)?;
        rec.validate().map_err(|(field, msg)| parse_error(file, i + 1, field, msg))?;
        out.push(rec);
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| parse_error(&path.display().to_string(), 0, "", e.to_string()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(&read_text(path)?, &path.display().to_string())
}

pub fn read_jsonl_validated<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl_validated(&read_text(path)?, &path.display().to_string())
}

/// Ground truth in JSON-lines. A line carrying only `uid` declares an image
/// with no annotated interaction.
pub fn parse_ground_truth(text: &str, file: &str) -> Result<GroundTruthSet> {
    let mut set = GroundTruthSet::default();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = parse_line(l, file, i + 1)?;
        let is_empty_image = value.as_object().is_some_and(|o| !o.contains_key("box"));
        if is_empty_image {
            let uid = value
                .get("uid")
                .and_then(|u| u.as_str())
                .ok_or_else(|| parse_error(file, i + 1, "uid", "missing field `uid`"))?;
            set.add_image(uid);
        } else {
            let gt: GroundTruth = parse_line(l, file, i + 1)?;
            gt.validate().map_err(|(field, msg)| parse_error(file, i + 1, field, msg))?;
            set.push(gt);
        }
    }
    Ok(set)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthSet> {
    parse_ground_truth(&read_text(path)?, &path.display().to_string())
}

pub fn to_jsonl_string<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    fs::write(path, to_jsonl_string(items)?)?;
    Ok(())
}

pub fn parse_json<T: DeserializeOwned>(text: &str, file: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        let line = inner.line();
        let field = if field == "." { missing_field(&inner.to_string()).unwrap_or(field) } else { field };
        parse_error(file, line, field, inner.to_string())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?, &path.display().to_string())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

/// CSV with a header row. Line numbers count the header as line 1.
pub fn parse_csv<T: DeserializeOwned>(text: &str, file: &str) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| parse_error(file, 1, "", e.to_string()))?.clone();
    let mut out = Vec::new();
    for rec in rdr.deserialize::<T>() {
        match rec {
            Ok(r) => out.push(r),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                let field = match e.kind() {
                    csv::ErrorKind::Deserialize { err, .. } => {
                        err.field().and_then(|i| headers.get(i as usize)).unwrap_or("").to_string()
                    }
                    _ => String::new(),
                };
                return Err(parse_error(file, line, field, e.to_string()));
            }
        }
    }
    Ok(out)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_csv(&read_text(path)?, &path.display().to_string())
}

/// Like [`parse_csv`] but also runs each record's [`Validate`] check. Assumes
/// one record per physical line.
pub fn parse_csv_validated<T: DeserializeOwned + Validate>(text: &str, file: &str) -> Result<Vec<T>> {
    let rows: Vec<T> = parse_csv(text, file)?;
    for (i, r) in rows.iter().enumerate() {
        r.validate().map_err(|(field, msg)| parse_error(file, i + 2, field, msg))?;
    }
    Ok(rows)
}

pub fn read_csv_validated<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    parse_csv_validated(&read_text(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::Detection;
    use serde::Deserialize;

    #[test]
    fn jsonl_error_names_line_and_field() {
        let text = "{\"uid\":\"a\",\"box\":[0,0,1,1],\"noun\":0,\"verb\":0,\"ttc\":1,\"score\":0.5}\n\
                    \n\
                    {\"uid\":\"b\",\"box\":[0,0,1,\"x\"],\"noun\":0,\"verb\":0,\"ttc\":1,\"score\":0.5}\n";
        let err = parse_jsonl::<Detection>(text, "dets.jsonl").unwrap_err();
        match err {
            StaError::Parse { file, line, field, .. } => {
                assert_eq!(file, "dets.jsonl");
                assert_eq!(line, 3);
                assert_eq!(field, "box[3]");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_jsonl::<Detection>("{\"uid\":\"a\",\"box\":[0,0,1,1],\"noun\":0,\"verb\":0,\"ttc\":1}", "d")
            .unwrap_err();
        assert!(matches!(err, StaError::Parse { ref field, line: 1, .. } if field == "score"), "{err:?}");
    }

    #[test]
    fn validation_failure_is_a_parse_error() {
        let err = parse_jsonl_validated::<Detection>(
            "{\"uid\":\"a\",\"box\":[0,0,1,1],\"noun\":0,\"verb\":0,\"ttc\":-1,\"score\":0.5}",
            "d",
        )
        .unwrap_err();
        assert!(matches!(err, StaError::Parse { ref field, .. } if field == "ttc"));
    }

    #[test]
    fn ground_truth_with_empty_image() {
        let text = "{\"uid\":\"a\",\"box\":[0,0,1,1],\"noun\":2,\"verb\":0,\"ttc\":1}\n{\"uid\":\"b\"}\n";
        let set = parse_ground_truth(text, "g").unwrap();
        assert_eq!(set.image_count(), 2);
        assert_eq!(set.len(), 1);
    }

    #[derive(Debug, Deserialize)]
    struct Row {
        #[allow(dead_code)]
        name: String,
        #[allow(dead_code)]
        count: u32,
    }

    #[test]
    fn csv_error_names_column() {
        let err = parse_csv::<Row>("name,count\na,1\nb,many\n", "rows.csv").unwrap_err();
        match err {
            StaError::Parse { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "count");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
