use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{DatastoreError, IndexParams, SourceIndex};
use crate::token::{TokenId, Vocabulary};

/// Byte range of a repository file withheld from indexing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExcludedSpan {
    /// Path relative to the repository root, `/`-separated.
    pub path: String,
    pub bytes: Range<usize>,
}

impl ExcludedSpan {
    /// Parses `path<TAB>start_byte<TAB>end_byte` lines. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse_list(text: &str) -> Result<Vec<ExcludedSpan>, DatastoreError> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || DatastoreError::InvalidSpan(format!("line {}: {line:?}", i + 1));
            let mut parts = line.split('\t');
            let (Some(path), Some(start), Some(end), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let start: usize = start.trim().parse().map_err(|_| bad())?;
            let end: usize = end.trim().parse().map_err(|_| bad())?;
            if start > end {
                return Err(bad());
            }
            out.push(ExcludedSpan {
                path: path.to_owned(),
                bytes: start..end,
            });
        }
        Ok(out)
    }
}

/// Builds the common-code index from in-memory documents.
pub fn build_common<S: AsRef<str>>(
    files: &[S],
    vocab: &mut Vocabulary,
    params: IndexParams,
) -> Result<SourceIndex, DatastoreError> {
    params.validate()?;
    let segments: Vec<Vec<TokenId>> = files
        .iter()
        .map(|f| vocab.tokenize_extend(f.as_ref()).ids().to_vec())
        .collect();
    finish(segments, params)
}

/// Builds the repository index from every UTF-8 file under `root`, with the
/// excluded byte ranges cut out. The pieces around a cut are indexed as
/// separate segments so no n-gram bridges an excluded span.
pub fn build_repo(
    root: &Path,
    excluded: &[ExcludedSpan],
    vocab: &mut Vocabulary,
    params: IndexParams,
) -> Result<SourceIndex, DatastoreError> {
    params.validate()?;
    let mut spans: BTreeMap<&str, Vec<Range<usize>>> = BTreeMap::new();
    for s in excluded {
        spans
            .entry(s.path.as_str())
            .or_default()
            .push(s.bytes.clone());
    }

    let mut segments = Vec::new();
    for (rel, path) in source_files(root)? {
        let Ok(text) = String::from_utf8(fs::read(&path)?) else {
            continue;
        };
        let cuts = spans.get(rel.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        for piece in keep_pieces(&text, cuts)
            .map_err(|e| DatastoreError::InvalidSpan(format!("{rel}: {e}")))?
        {
            segments.push(vocab.tokenize_extend(piece).ids().to_vec());
        }
    }
    finish(segments, params)
}

fn finish(segments: Vec<Vec<TokenId>>, params: IndexParams) -> Result<SourceIndex, DatastoreError> {
    if segments.iter().all(Vec::is_empty) {
        return Err(DatastoreError::EmptyCorpus);
    }
    Ok(SourceIndex::from_segments(
        segments.iter().map(Vec::as_slice),
        params,
    ))
}

/// Regular files under `root` in sorted order, skipping hidden entries.
fn source_files(root: &Path) -> Result<Vec<(String, PathBuf)>, DatastoreError> {
    let mut out = Vec::new();
    let walker = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'));
    for entry in walker {
        let entry = entry.map_err(|e| {
            e.into_io_error()
                .unwrap_or_else(|| std::io::Error::other("directory walk failed"))
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        out.push((rel, entry.into_path()));
    }
    Ok(out)
}

/// Text pieces left after removing `cuts`.
fn keep_pieces<'a>(text: &'a str, cuts: &[Range<usize>]) -> Result<Vec<&'a str>, String> {
    let mut cuts: Vec<Range<usize>> = cuts
        .iter()
        .map(|r| r.start.min(text.len())..r.end.min(text.len()))
        .collect();
    cuts.sort_by_key(|r| (r.start, r.end));
    let mut pieces = Vec::new();
    let mut cursor = 0;
    for cut in cuts {
        for b in [cut.start, cut.end] {
            if !text.is_char_boundary(b) {
                return Err(format!("byte {b} is not a character boundary"));
            }
        }
        if cut.start > cursor {
            pieces.push(&text[cursor..cut.start]);
        }
        cursor = cursor.max(cut.end);
    }
    if cursor < text.len() {
        pieces.push(&text[cursor..]);
    }
    Ok(pieces)
}
