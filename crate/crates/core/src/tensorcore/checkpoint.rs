//! Checkpoint files.
//!
//! Layout: magic `RFO1`, config hash (u64 LE), record count (u32 LE), then per
//! parameter: name length (u16 LE) + UTF-8 name, dim count (u8) + dims (u32 LE
//! each), raw little-endian f32 values. Values are stored at f32 precision;
//! loading widens them exactly, so save -> load -> save reproduces the file
//! byte for byte. Optimizer moments are not stored.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::{Param, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RFO1";

/// FNV-1a over a config description string; both sides of a load must agree.
pub fn config_hash(description: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in description.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save(store: &ParamStore, hash: u64, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&hash.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for name in store.names().map(str::to_owned).collect::<Vec<_>>() {
        let p = store.get(&name).expect("name came from the store");
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(2u8);
        buf.extend_from_slice(&(p.shape.0 as u32).to_le_bytes());
        buf.extend_from_slice(&(p.shape.1 as u32).to_le_bytes());
        for &v in &p.value {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path, expected_hash: u64) -> Result<ParamStore> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &data, pos: 0, path };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file (bad magic)", path.display())));
    }
    let hash = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    if hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "{}: config hash {hash:#018x} does not match expected {expected_hash:#018x}",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: invalid parameter name", path.display())))?;
        let ndims = cur.take(1)?[0];
        if ndims != 2 {
            return Err(Error::Data(format!("{}: parameter '{name}' has {ndims} dims", path.display())));
        }
        let rows = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut value = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            value.push(v as f64);
        }
        store.insert(&name, (rows, cols), value);
    }
    Ok(store)
}

/// Check that a loaded store has exactly the shapes of a reference store.
pub fn check_shapes(loaded: &ParamStore, reference: &ParamStore) -> Result<()> {
    for name in reference.names() {
        let r: &Param = reference.get(name).unwrap();
        match loaded.get(name) {
            Some(l) if l.shape == r.shape => {}
            Some(l) => {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}': shape {:?} in checkpoint, {:?} expected",
                    l.shape, r.shape
                )))
            }
            None => return Err(Error::Checkpoint(format!("parameter '{name}' missing from checkpoint"))),
        }
    }
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Data(format!("{}: truncated checkpoint", self.path.display())));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("a.w", (2, 3), vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]);
        store.insert("b.w", (1, 2), vec![std::f64::consts::PI, -1e-7]);
        let hash = config_hash("test-config");
        let p1 = dir.path().join("one.rfo");
        let p2 = dir.path().join("two.rfo");
        save(&store, hash, &p1).unwrap();
        let loaded = load(&p1, hash).unwrap();
        save(&loaded, hash, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        // Loaded values are exactly the f32 round of the originals.
        for name in store.names() {
            let orig = store.get(name).unwrap();
            let got = loaded.get(name).unwrap();
            for (o, g) in orig.value.iter().zip(got.value.iter()) {
                assert_eq!(*o as f32 as f64, *g);
            }
        }
    }

    #[test]
    fn hash_mismatch_cites_both() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("w", (1, 1), vec![1.0]);
        let p = dir.path().join("x.rfo");
        save(&store, 111, &p).unwrap();
        let err = load(&p, 222).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("{:#018x}", 111u64)), "{msg}");
        assert!(msg.contains(&format!("{:#018x}", 222u64)), "{msg}");
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.rfo");
        fs::write(&p, b"NOPEnope").unwrap();
        let err = load(&p, 0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
