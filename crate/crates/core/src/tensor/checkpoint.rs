//! Checkpoint container: one UTF-8 JSON header line, `\n`, then the
//! little-endian `f64` payloads concatenated in header order. Each entry's
//! `offset` is a byte offset from the first byte after the newline.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn write<W: Write>(mut w: W, params: &ParamStore) -> Result<()> {
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        tensors,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, t) in params.iter() {
        let mut buf = Vec::with_capacity(8 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(r: R) -> Result<ParamStore> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format(
            "checkpoint header is not newline-terminated".into(),
        ));
    }
    line.pop();
    let header: Header = serde_json::from_slice(&line)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut out = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        let bytes = payload.get(start..end).ok_or_else(|| {
            Error::Format(format!("tensor `{}` extends past end of file", e.name))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(f), params)
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    read(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_round_trip() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new([2], vec![1.5, -2.0]).unwrap());
        p.insert(
            "b.c",
            Tensor::new([1, 3], vec![0.0, 1e-300, f64::MAX]).unwrap(),
        );
        let mut buf = Vec::new();
        write(&mut buf, &p).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let header = std::str::from_utf8(&buf[..nl]).unwrap();
        assert_eq!(
            header,
            r#"{"version":1,"tensors":[{"name":"a","shape":[2],"offset":0},{"name":"b.c","shape":[1,3],"offset":16}]}"#
        );
        assert_eq!(buf.len(), nl + 1 + 5 * 8);
        assert_eq!(&buf[nl + 1..nl + 9], &1.5f64.to_le_bytes());
        assert_eq!(read(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros([4]));
        let mut buf = Vec::new();
        write(&mut buf, &p).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read(buf.as_slice()), Err(Error::Format(_))));
    }
}
