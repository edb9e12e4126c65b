//! Binary datastore file.
//!
//! ```text
//! "FCDS" | version u32 | n_max u32 | cont_len u32 | cap_positions u32
//! vocabulary: count u32, then (len u32, utf-8 bytes) per id
//! has_repo u32 | [repo corpus] | common corpus      (len u32, u32 ids)
//! gram tables, repo first when present:
//!   for n in 1..=n_max: key count u32, then per key in sorted order
//!   n ids, position count u32, positions u32
//! ```
//!
//! All integers are little-endian. Everything before the gram tables is
//! stable across versions; a reader that sees another version rebuilds the
//! tables from the corpora.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Datastore, DatastoreError, GramTable, IndexParams, SourceIndex, SENTINEL};
use crate::binio::{
    read_n_tokens, read_tokens, read_u32, read_vocab, sha256_hex, write_len, write_tokens,
    write_u32, write_vocab,
};

pub const DATASTORE_MAGIC: &[u8; 4] = b"FCDS";
pub const DATASTORE_VERSION: u32 = 1;

fn format_err(e: io::Error) -> DatastoreError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof | io::ErrorKind::InvalidData => {
            DatastoreError::Format(e.to_string())
        }
        _ => DatastoreError::Io(e),
    }
}

impl Datastore {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        self.write_versioned(w, DATASTORE_VERSION)
    }

    fn write_versioned<W: Write>(&self, w: &mut W, version: u32) -> io::Result<()> {
        w.write_all(DATASTORE_MAGIC)?;
        write_u32(w, version)?;
        write_len(w, self.params.n_max)?;
        write_len(w, self.params.cont_len)?;
        write_len(w, self.params.cap_positions)?;
        write_vocab(w, &self.vocab)?;
        write_u32(w, u32::from(self.repo.is_some()))?;
        for idx in self.sources() {
            write_tokens(w, idx.corpus())?;
        }
        for idx in self.sources() {
            write_tables(w, idx.tables())?;
        }
        Ok(())
    }

    fn sources(&self) -> impl Iterator<Item = &SourceIndex> {
        self.repo.iter().chain(std::iter::once(&self.common))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Reads a datastore. The flag is true when the gram tables were rebuilt
    /// because the file carried a different format version.
    pub fn read_from<R: Read>(r: &mut R) -> Result<(Datastore, bool), DatastoreError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(format_err)?;
        if &magic != DATASTORE_MAGIC {
            return Err(DatastoreError::Format("bad magic".into()));
        }
        let version = read_u32(r).map_err(format_err)?;
        let params = IndexParams {
            n_max: read_u32(r).map_err(format_err)? as usize,
            cont_len: read_u32(r).map_err(format_err)? as usize,
            cap_positions: read_u32(r).map_err(format_err)? as usize,
        };
        params.validate()?;
        let vocab = read_vocab(r).map_err(format_err)?;
        let has_repo = match read_u32(r).map_err(format_err)? {
            0 => false,
            1 => true,
            x => return Err(DatastoreError::Format(format!("bad repo flag {x}"))),
        };
        let mut corpora = Vec::new();
        for _ in 0..(1 + usize::from(has_repo)) {
            let corpus = read_tokens(r).map_err(format_err)?;
            if corpus
                .iter()
                .any(|&t| t != SENTINEL && t.index() >= vocab.len())
            {
                return Err(DatastoreError::Format(
                    "corpus token outside vocabulary".into(),
                ));
            }
            corpora.push(corpus);
        }

        let rebuilt = version != DATASTORE_VERSION;
        let mut indexes = Vec::new();
        for corpus in corpora {
            let idx = if rebuilt {
                SourceIndex::from_corpus(corpus, params)
            } else {
                let tables = read_tables(r, params.n_max, corpus.len()).map_err(format_err)?;
                SourceIndex::from_parts(params, corpus, tables)
            };
            indexes.push(idx);
        }
        let common = indexes.pop().expect("common index present");
        let repo = indexes.pop();
        Ok((Datastore::new(vocab, params, repo, common)?, rebuilt))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatastoreError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Datastore, bool), DatastoreError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn write_tables<W: Write>(w: &mut W, tables: &[GramTable]) -> io::Result<()> {
    for table in tables {
        let mut keys: Vec<_> = table.keys().collect();
        keys.sort();
        write_len(w, keys.len())?;
        for key in keys {
            for t in key.iter() {
                write_u32(w, t.0)?;
            }
            let positions = &table[key];
            write_len(w, positions.len())?;
            for &p in positions {
                write_u32(w, p)?;
            }
        }
    }
    Ok(())
}

fn read_tables<R: Read>(r: &mut R, n_max: usize, corpus_len: usize) -> io::Result<Vec<GramTable>> {
    let invalid = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_owned());
    let mut tables = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let count = read_u32(r)? as usize;
        let mut table = GramTable::with_capacity(count);
        for _ in 0..count {
            let key = read_n_tokens(r, n)?;
            let npos = read_u32(r)? as usize;
            let mut positions = Vec::with_capacity(npos.min(1 << 16));
            for _ in 0..npos {
                let p = read_u32(r)?;
                if (p as usize) < n || p as usize >= corpus_len {
                    return Err(invalid("position out of range"));
                }
                positions.push(p);
            }
            if table.insert(key.into_boxed_slice(), positions).is_some() {
                return Err(invalid("duplicate gram key"));
            }
        }
        tables.push(table);
    }
    Ok(tables)
}
