//! Versioned line-delimited JSON: a header object on the first line, then one
//! record per line.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct Header {
    pub format: String,
    pub version: u32,
}

#[derive(Debug)]
pub(crate) enum JsonlError {
    Io(std::io::Error),
    Parse { line: usize, message: String },
    Format { expected: String, found: String },
    Version { expected: u32, found: u32 },
}

pub(crate) fn to_string<T: Serialize>(format: &str, version: u32, records: &[T]) -> String {
    let header = Header {
        format: format.to_string(),
        version,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").expect("writing to a String");
    }
    out
}

pub(crate) fn parse<T: DeserializeOwned>(text: &str, format: &str, version: u32) -> Result<Vec<T>, JsonlError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Err(JsonlError::Parse {
            line: 1,
            message: "file is empty".into(),
        });
    };
    let header: Header = serde_json::from_str(first).map_err(|e| JsonlError::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != format {
        return Err(JsonlError::Format {
            expected: format.into(),
            found: header.format,
        });
    }
    if header.version != version {
        return Err(JsonlError::Version {
            expected: version,
            found: header.version,
        });
    }
    lines
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| JsonlError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub(crate) fn read<T: DeserializeOwned>(path: &Path, format: &str, version: u32) -> Result<Vec<T>, JsonlError> {
    let text = std::fs::read_to_string(path).map_err(JsonlError::Io)?;
    parse(&text, format, version)
}
