//! Named-tensor checkpoint container.
//!
//! Layout:
//!
//! ```text
//! DCASR-CKPT <version byte> \n
//! <name> f64 <dim> <dim> ... <offset> <length> \n      (one line per tensor)
//! \n
//! <little-endian f64 payloads, concatenated in manifest order>
//! ```
//!
//! Offsets are relative to the start of the payload and must be contiguous.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8] = b"DCASR-CKPT";
pub const FORMAT_VERSION: u8 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut manifest = String::new();
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        let bytes = t.len() * 8;
        manifest.push_str(name);
        manifest.push_str(" f64");
        for d in t.shape() {
            manifest.push_str(&format!(" {d}"));
        }
        manifest.push_str(&format!(" {offset} {bytes}\n"));
        offset += bytes;
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 2 + manifest.len() + 1 + offset);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(b'\n');
    out.extend_from_slice(manifest.as_bytes());
    out.push(b'\n');
    for (_, t) in store.iter() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < MAGIC.len() + 2 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = bytes[MAGIC.len()];
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    if bytes[MAGIC.len() + 1] != b'\n' {
        return Err(Error::format("missing newline after checkpoint header"));
    }
    let mut pos = MAGIC.len() + 2;
    let mut entries = Vec::new();
    let mut line_no = 1;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("manifest is not terminated by a blank line"))?;
        let line = &bytes[pos..pos + end];
        pos += end + 1;
        line_no += 1;
        if line.is_empty() {
            break;
        }
        let line = std::str::from_utf8(line)
            .map_err(|_| Error::format_at(line_no, "manifest line is not UTF-8"))?;
        entries.push(parse_manifest_line(line, line_no)?);
    }

    let payload = &bytes[pos..];
    let mut expected_offset = 0usize;
    let mut seen = HashSet::new();
    let mut store = ParamStore::new();
    for e in entries {
        if !seen.insert(e.name.clone()) {
            return Err(Error::format(format!("duplicate tensor `{}`", e.name)));
        }
        if e.offset != expected_offset {
            return Err(Error::format(format!(
                "tensor `{}` offset {} but expected {expected_offset}",
                e.name, e.offset
            )));
        }
        let count: usize = e.shape.iter().product();
        if e.length != count * 8 {
            return Err(Error::format(format!(
                "tensor `{}` shape {:?} needs {} bytes but manifest says {}",
                e.name,
                e.shape,
                count * 8,
                e.length
            )));
        }
        let end = e.offset + e.length;
        if end > payload.len() {
            return Err(Error::format(format!("payload truncated inside tensor `{}`", e.name)));
        }
        let values = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(e.shape, values)
            .map_err(|err| Error::format(format!("tensor `{}`: {err}", e.name)))?;
        store
            .insert(e.name, tensor)
            .map_err(|err| Error::format(err.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(Error::format(format!(
            "payload has {} bytes but manifest accounts for {expected_offset}",
            payload.len()
        )));
    }
    Ok(store)
}

fn parse_manifest_line(line: &str, line_no: usize) -> Result<Entry> {
    let tokens: Vec<&str> = line.split(' ').collect();
    if tokens.len() < 4 {
        return Err(Error::format_at(line_no, "manifest line needs name, dtype, offset and length"));
    }
    if tokens[1] != "f64" {
        return Err(Error::format_at(line_no, format!("unsupported dtype `{}`", tokens[1])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format_at(line_no, format!("`{s}` is not a non-negative integer")))
    };
    let n = tokens.len();
    let shape = tokens[2..n - 2].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(Error::format_at(line_no, "zero-sized dimension"));
    }
    Ok(Entry {
        name: tokens[0].to_string(),
        shape,
        offset: num(tokens[n - 2])?,
        length: num(tokens[n - 1])?,
    })
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("enc.wq", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        s.insert("bias", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        s.insert("b0", Tensor::scalar(-2.5)).unwrap();
        s
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = sample();
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(s.bitwise_eq(&back));
    }

    #[test]
    fn manifest_is_readable_text() {
        let bytes = encode_checkpoint(&sample());
        let text = String::from_utf8_lossy(&bytes[MAGIC.len() + 2..]);
        let lines: Vec<&str> = text.lines().take(3).collect();
        assert_eq!(lines, vec!["b0 f64 0 8", "bias f64 3 8 24", "enc.wq f64 2 2 32 32"]);
    }

    #[test]
    fn empty_store_is_valid() {
        let bytes = encode_checkpoint(&ParamStore::new());
        assert_eq!(bytes, b"DCASR-CKPT\x01\n\n");
        assert!(decode_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupted_manifest_is_rejected() {
        let good = encode_checkpoint(&sample());
        let manifest_start = MAGIC.len() + 2;
        let text = String::from_utf8_lossy(&good[manifest_start..]).to_string();
        // dtype tag, a shape digit, an offset digit, the magic, the version byte
        let mut cases = Vec::new();
        let dtype = manifest_start + text.find("f64").unwrap();
        cases.push((dtype, b'g'));
        let shape_digit = manifest_start + text.find("bias f64 3").unwrap() + "bias f64 ".len();
        cases.push((shape_digit, b'4'));
        let offset_digit = manifest_start + text.find("32 32").unwrap();
        cases.push((offset_digit, b'4'));
        cases.push((0, b'X'));
        cases.push((MAGIC.len(), 2));
        for (at, byte) in cases {
            let mut bad = good.clone();
            bad[at] = byte;
            assert!(
                matches!(decode_checkpoint(&bad), Err(Error::Format { .. })),
                "corruption at {at} accepted"
            );
        }
    }

    #[test]
    fn truncated_and_extended_payloads_are_rejected() {
        let good = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&good[..good.len() - 1]).is_err());
        let mut longer = good.clone();
        longer.push(0);
        assert!(decode_checkpoint(&longer).is_err());
    }

    proptest! {
        #[test]
        fn any_store_round_trips_bitwise(
            tensors in proptest::collection::btree_map(
                "[a-z][a-z0-9._/]{0,8}",
                (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(-1e300f64..1e300, r * c)
                        .prop_map(move |v| (r, c, v))
                }),
                0..6,
            )
        ) {
            let mut store = ParamStore::new();
            for (name, (r, c, v)) in tensors {
                store.insert(name, Tensor::matrix(r, c, v).unwrap()).unwrap();
            }
            let back = decode_checkpoint(&encode_checkpoint(&store)).unwrap();
            prop_assert!(store.bitwise_eq(&back));
        }
    }
}
