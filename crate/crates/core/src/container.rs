//! Versioned binary container for checkpoints: magic bytes, format version,
//! a JSON header, then named little-endian 64-bit arrays. Writing the same
//! state twice produces identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, SptError};
use crate::tensor::Array;

pub fn write_container<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    header: &H,
    arrays: &[(String, &Array)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&version.to_le_bytes());
    let header_bytes = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, array) in arrays {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(array.shape.len() as u8);
        for &dim in &array.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in &array.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
    expected_version: u32,
) -> Result<(H, Vec<(String, Array)>)> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| SptError::Checkpoint(format!("cannot open {}: {}", path.display(), e)))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut cursor = Cursor { buf: &buf, pos: 0 };

    let got_magic = cursor.take(4)?;
    if got_magic != magic {
        return Err(SptError::Checkpoint(format!(
            "{}: bad magic bytes {:?}, expected {:?}",
            path.display(),
            got_magic,
            magic
        )));
    }
    let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
    if version != expected_version {
        return Err(SptError::Checkpoint(format!(
            "{}: format version {} not supported (expected {})",
            path.display(),
            version,
            expected_version
        )));
    }
    let header_len = cursor.take_u64()? as usize;
    let header: H = serde_json::from_slice(cursor.take(header_len)?)?;
    let count = cursor.take_u64()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cursor.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cursor.take(name_len)?.to_vec())
            .map_err(|_| SptError::Checkpoint("non-utf8 array name".into()))?;
        let ndim = cursor.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cursor.take_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(cursor.take(8)?.try_into().unwrap()));
        }
        arrays.push((name, Array { shape, data }));
    }
    Ok((header, arrays))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SptError::Checkpoint("truncated checkpoint file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// SHA-256 hex digest over named arrays in order: names, shapes, raw bits.
pub fn hash_arrays<'a, I>(arrays: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a Array)>,
{
    let mut hasher = Sha256::new();
    for (name, array) in arrays {
        hasher.update(name.as_bytes());
        for &dim in &array.shape {
            hasher.update(dim.to_le_bytes());
        }
        for &v in &array.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

// Used by writers that append to an existing file handle.
#[allow(dead_code)]
pub(crate) fn write_all(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Header {
        note: String,
        n: usize,
    }

    #[test]
    fn container_roundtrip_is_bitwise_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let header = Header {
            note: "hello".into(),
            n: 2,
        };
        let a = Array::matrix(2, 2, vec![1.0, -2.5, 3.25, 0.1]).unwrap();
        let b = Array::vector(vec![9.0]);
        let arrays = vec![("a".to_string(), &a), ("b".to_string(), &b)];
        write_container(&path, b"TEST", 1, &header, &arrays).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let (h2, loaded) = read_container::<Header>(&path, b"TEST", 1).unwrap();
        assert_eq!(h2, header);
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);

        let reloaded: Vec<(String, &Array)> = loaded
            .iter()
            .map(|(n, arr)| (n.clone(), arr))
            .collect();
        let path2 = dir.path().join("c2.bin");
        write_container(&path2, b"TEST", 1, &h2, &reloaded).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let header = Header {
            note: "x".into(),
            n: 0,
        };
        write_container(&path, b"GOOD", 3, &header, &[]).unwrap();
        assert!(read_container::<Header>(&path, b"EVIL", 3).is_err());
        assert!(read_container::<Header>(&path, b"GOOD", 4).is_err());

        // Corrupt the magic in place.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = read_container::<Header>(&path, b"GOOD", 3).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn hash_is_order_and_bit_sensitive() {
        let a = Array::vector(vec![1.0]);
        let b = Array::vector(vec![2.0]);
        let h1 = hash_arrays([("a", &a), ("b", &b)]);
        let h2 = hash_arrays([("b", &b), ("a", &a)]);
        assert_ne!(h1, h2);
        let a_tweaked = Array::vector(vec![1.0 + f64::EPSILON]);
        assert_ne!(h1, hash_arrays([("a", &a_tweaked), ("b", &b)]));
        assert_eq!(h1, hash_arrays([("a", &a), ("b", &b)]));
    }
}
