//! Little-endian helpers shared by the binary file formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::token::{TokenId, Vocabulary};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_u32::<LittleEndian>(v)
}

pub(crate) fn write_len<W: Write>(w: &mut W, n: usize) -> io::Result<()> {
    let n = u32::try_from(n).map_err(|_| io::Error::other("length exceeds u32"))?;
    write_u32(w, n)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    r.read_u32::<LittleEndian>()
}

pub(crate) fn write_tokens<W: Write>(w: &mut W, tokens: &[TokenId]) -> io::Result<()> {
    write_len(w, tokens.len())?;
    for t in tokens {
        write_u32(w, t.0)?;
    }
    Ok(())
}

pub(crate) fn read_tokens<R: Read>(r: &mut R) -> io::Result<Vec<TokenId>> {
    let n = read_u32(r)? as usize;
    read_n_tokens(r, n)
}

pub(crate) fn read_n_tokens<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<TokenId>> {
    let mut raw = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut raw)?;
    Ok(raw.into_iter().map(TokenId).collect())
}

/// Length-prefixed UTF-8 surfaces, in id order.
pub(crate) fn write_vocab<W: Write>(w: &mut W, vocab: &Vocabulary) -> io::Result<()> {
    write_len(w, vocab.len())?;
    for s in vocab.surfaces() {
        write_len(w, s.len())?;
        w.write_all(s.as_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_vocab<R: Read>(r: &mut R) -> io::Result<Vocabulary> {
    let n = read_u32(r)? as usize;
    let mut vocab = Vocabulary::new();
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let s =
            String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        if s.is_empty() || vocab.get(&s).is_some() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "empty or duplicate vocabulary surface",
            ));
        }
        vocab.intern(&s);
    }
    Ok(vocab)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
