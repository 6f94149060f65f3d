//! Line-oriented corpus manifest: `path<TAB>class_id<TAB>quality_label`.

use std::fs;
use std::path::{Path, PathBuf};

use super::degrade::QualityLabel;
use crate::error::{Result, VarsrError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_id: usize,
    pub quality: QualityLabel,
}

/// Parses manifest text. Relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path, source: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() || body.starts_with('#') {
            continue;
        }
        let err = |col: usize, detail: String| VarsrError::Parse {
            path: source.to_path_buf(),
            offset: line_start + col,
            detail,
        };
        let fields: Vec<&str> = body.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(0, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let class_col = fields[0].len() + 1;
        let class_id = fields[1]
            .parse()
            .map_err(|_| err(class_col, format!("bad class_id {:?}", fields[1])))?;
        let quality = QualityLabel::parse(fields[2]).ok_or_else(|| {
            err(
                class_col + fields[1].len() + 1,
                format!("bad quality_label {:?}", fields[2]),
            )
        })?;
        let p = PathBuf::from(fields[0]);
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            class_id,
            quality,
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| VarsrError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base, path)
}

/// Writes entries with paths relative to the manifest's directory when they
/// live under it.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            rel.display(),
            e.class_id,
            e.quality.as_str()
        ));
    }
    fs::write(path, text).map_err(|e| VarsrError::io(path, e))
}
