//! Flat named-tensor files.
//!
//! Each entry: name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE
//! each), then the values as 32-bit little-endian floats. Entries follow one
//! another with no header or padding.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{FateError, Result};

pub fn write_checkpoint<F: Real, W: Write>(out: &mut W, entries: &[(&str, &Tensor<F>)]) -> std::io::Result<()> {
    for (name, t) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for x in t.data() {
            out.write_all(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R, origin: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| FateError::io(origin, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        origin,
    };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| FateError::MalformedHeader {
                path: origin.to_path_buf(),
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(FateError::MalformedHeader {
                path: origin.to_path_buf(),
                reason: format!("tensor `{name}` has rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Writes every entry of `store` (in name order) to `path`.
pub fn save_checkpoint<F: Real>(path: &Path, store: &ParamStore<F>) -> Result<()> {
    let entries: Vec<(&str, &Tensor<F>)> = store.iter().map(|(k, p)| (k, &p.tensor)).collect();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &entries).map_err(|e| FateError::io(path, e))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| FateError::io(dir, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| FateError::io(path, e))
}

/// Reads a checkpoint into a store with every entry frozen.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ParamStore<F>> {
    let mut f = fs::File::open(path).map_err(|e| FateError::io(path, e))?;
    let mut store = ParamStore::new();
    for (name, t) in read_checkpoint(&mut f, path)? {
        store.insert(name, t.cast(), false);
    }
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FateError::Truncated {
                path: self.origin.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("ab", &t)]).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn truncated_file_is_reported() {
        let t = Tensor::<f32>::zeros(&[3]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w", &t)]).unwrap();
        buf.pop();
        let err = read_checkpoint(&mut buf.as_slice(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, FateError::Truncated { .. }));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40),
                                  name in "[a-z.]{1,12}") {
            let t = Tensor::<f32>::new(vec![vals.len()], vals.clone()).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &[(name.as_str(), &t)]).unwrap();
            let back = read_checkpoint(&mut buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            let bits: Vec<u32> = back[0].1.data().iter().map(|x| x.to_bits()).collect();
            let orig: Vec<u32> = vals.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits, orig);
        }
    }
}
