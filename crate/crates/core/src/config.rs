//! The sectioned `key = value` configuration format.
//!
//! ```text
//! # comment
//! [model]
//! kind = additive_pool
//! d_model = 64
//! ```
//!
//! Keys are addressed as `section.key`. Blank lines and lines starting with
//! `#` or `;` are ignored. Repeating a key overrides the earlier value.

use crate::error::{Error, Result};
use std::str::FromStr;

/// Implements `FromStr` and `Display` for a fieldless enum from a fixed
/// string table.
macro_rules! str_enum {
    ($ty:ty, $what:literal, { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err($crate::error::Error::config(
                        $what,
                        format!("unknown value `{other}` (expected one of: {})", [$($name),+].join(", ")),
                    )),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}
pub(crate) use str_enum;

/// One `key = value` assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    /// 1-based source line, 0 for entries that did not come from a file.
    pub line: usize,
}

impl Entry {
    /// `section.key`.
    pub fn path(&self) -> String {
        format!("{}.{}", self.section, self.key)
    }
}

/// Drops a trailing comment: `#` or `;` at the start of the line or after
/// whitespace.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if (b == b'#' || b == b';') && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

/// Parses the configuration text into entries in file order.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("unterminated section header `{line}`"),
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        if section.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "key outside of any section".into(),
            });
        }
        out.push(Entry {
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line: line_no,
        });
    }
    Ok(out)
}

/// Parses a `section.key=value` override.
pub fn parse_override(spec: &str) -> Result<Entry> {
    let (path, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like `section.key=value`"))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::config(path.trim(), "override key must look like `section.key`"))?;
    Ok(Entry {
        section: section.to_string(),
        key: key.to_string(),
        value: value.trim().to_string(),
        line: 0,
    })
}

/// Parses `value` as `T`, naming `key` in the error.
pub(crate) fn field<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

/// Renders `entries` grouped by section in first-seen order.
pub fn render(sections: &[(&str, Vec<(&str, String)>)]) -> String {
    let mut out = String::new();
    for (name, kv) in sections {
        if kv.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("[{name}]\n"));
        for (k, v) in kv {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}
