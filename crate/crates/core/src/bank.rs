//! Author-indexed store of `(h_CLS, h_TAR)` with overwrite semantics and a
//! bit-exact binary snapshot.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SarmError};
use crate::model::ByteCursor;

pub const BANK_MAGIC: &[u8; 8] = b"SARMBANK";
pub const BANK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AuthorRecord {
    pub h_cls: Vec<f32>,
    pub h_tar: Vec<f32>,
    /// Number of writes for this author (0 = never written).
    pub version: u64,
    pub updated_step: u64,
}

impl AuthorRecord {
    pub fn zeros(d: usize) -> AuthorRecord {
        AuthorRecord {
            h_cls: vec![0.0; d],
            h_tar: vec![0.0; d],
            version: 0,
            updated_step: 0,
        }
    }
}

/// Handle to a stored record (or the default on a miss). Resolving the handle
/// is the lookup; fields are read on access.
#[derive(Clone, Copy, Debug)]
pub struct RecordRef<'a> {
    bank: &'a MemoryBank,
    slot: Option<u32>,
}

impl<'a> RecordRef<'a> {
    pub fn is_default(&self) -> bool {
        self.slot.is_none()
    }

    fn payload(&self) -> &'a [f32] {
        match self.slot {
            Some(s) => {
                let w = 2 * self.bank.d;
                &self.bank.payload[s as usize * w..(s as usize + 1) * w]
            }
            None => &[],
        }
    }

    pub fn h_cls(&self) -> &'a [f32] {
        match self.slot {
            Some(_) => &self.payload()[..self.bank.d],
            None => &self.bank.default_record.h_cls,
        }
    }

    pub fn h_tar(&self) -> &'a [f32] {
        match self.slot {
            Some(_) => &self.payload()[self.bank.d..],
            None => &self.bank.default_record.h_tar,
        }
    }

    pub fn version(&self) -> u64 {
        self.slot.map_or(0, |s| self.bank.meta[s as usize].0)
    }

    pub fn updated_step(&self) -> u64 {
        self.slot.map_or(0, |s| self.bank.meta[s as usize].1)
    }

    pub fn to_owned(&self) -> AuthorRecord {
        AuthorRecord {
            h_cls: self.h_cls().to_vec(),
            h_tar: self.h_tar().to_vec(),
            version: self.version(),
            updated_step: self.updated_step(),
        }
    }
}

impl PartialEq for RecordRef<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.h_cls() == other.h_cls()
            && self.h_tar() == other.h_tar()
            && self.version() == other.version()
            && self.updated_step() == other.updated_step()
    }
}

/// Records live in one contiguous slab (`2d` floats per slot); the hash index
/// maps author id to slot.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    d: usize,
    index: HashMap<u64, u32>,
    /// `(version, updated_step)` per slot.
    meta: Vec<(u64, u64)>,
    payload: Vec<f32>,
    default_record: AuthorRecord,
}

impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.ids() == other.ids()
            && self.ids().iter().all(|&id| self.get(id) == other.get(id))
    }
}

impl MemoryBank {
    /// Empty bank; misses return zero vectors with version 0.
    pub fn new(d: usize) -> MemoryBank {
        MemoryBank {
            d,
            index: HashMap::new(),
            meta: Vec::new(),
            payload: Vec::new(),
            default_record: AuthorRecord::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn store(&mut self, author_id: u64, h_cls: &[f32], h_tar: &[f32], version: u64, step: u64) {
        let d = self.d;
        let slot = match self.index.get(&author_id) {
            Some(&s) => s as usize,
            None => {
                let s = self.meta.len();
                self.index.insert(author_id, s as u32);
                self.meta.push((0, 0));
                self.payload.resize(self.payload.len() + 2 * d, 0.0);
                s
            }
        };
        let rec = &mut self.payload[slot * 2 * d..(slot + 1) * 2 * d];
        rec[..d].copy_from_slice(h_cls);
        rec[d..].copy_from_slice(h_tar);
        self.meta[slot] = (version, step);
    }

    /// Stores a payload, bumping the author's version. Returns the new version.
    pub fn put(&mut self, author_id: u64, h_cls: &[f32], h_tar: &[f32], step: u64) -> Result<u64> {
        if h_cls.len() != self.d || h_tar.len() != self.d {
            return Err(SarmError::Shape(format!(
                "bank put for author {author_id}: dims ({}, {}) vs bank d={}",
                h_cls.len(),
                h_tar.len(),
                self.d
            )));
        }
        if !h_cls.iter().chain(h_tar).all(|x| x.is_finite()) {
            return Err(SarmError::Numeric(format!(
                "non-finite payload for author {author_id}"
            )));
        }
        let version = self.get(author_id).version() + 1;
        self.store(author_id, h_cls, h_tar, version, step);
        Ok(version)
    }

    pub fn get(&self, author_id: u64) -> RecordRef<'_> {
        RecordRef {
            bank: self,
            slot: self.index.get(&author_id).copied(),
        }
    }

    pub fn contains(&self, author_id: u64) -> bool {
        self.index.contains_key(&author_id)
    }

    pub fn batch_get(&self, ids: &[u64]) -> Vec<RecordRef<'_>> {
        ids.iter().map(|&id| self.get(id)).collect()
    }

    /// Stored ids in ascending order.
    pub fn ids(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.index.keys().copied().collect();
        v.sort_unstable();
        v
    }

    /// Header, then records in ascending id order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for id in self.ids() {
            let r = self.get(id);
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&r.version().to_le_bytes())?;
            w.write_all(&r.updated_step().to_le_bytes())?;
            for x in r.h_cls().iter().chain(r.h_tar()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        v
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<MemoryBank> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        MemoryBank::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MemoryBank> {
        let mut cur = ByteCursor { buf: bytes, pos: 0 };
        let fmt = |e: SarmError| SarmError::Format(format!("bank file: {e}"));
        if cur.take(8).map_err(fmt)? != BANK_MAGIC {
            return Err(SarmError::Format("bank file: bad magic at offset 0".into()));
        }
        let version = cur.u32().map_err(fmt)?;
        if version != BANK_VERSION {
            return Err(SarmError::Format(format!(
                "bank file: unsupported version {version} at offset 8"
            )));
        }
        let d = cur.u32().map_err(fmt)? as usize;
        let count = cur.u64().map_err(fmt)?;
        let mut bank = MemoryBank::new(d);
        let mut prev = None;
        let mut vals = vec![0.0f32; 2 * d];
        for _ in 0..count {
            let at = cur.pos;
            let id = cur.u64().map_err(fmt)?;
            if prev.is_some_and(|p| p >= id) {
                return Err(SarmError::Format(format!(
                    "bank file: author ids not strictly ascending at offset {at}"
                )));
            }
            prev = Some(id);
            let version = cur.u64().map_err(fmt)?;
            let updated_step = cur.u64().map_err(fmt)?;
            for v in vals.iter_mut() {
                *v = f32::from_le_bytes(cur.take(4).map_err(fmt)?.try_into().unwrap());
            }
            bank.store(id, &vals[..d], &vals[d..], version, updated_step);
        }
        if cur.pos != bytes.len() {
            return Err(SarmError::Format(format!(
                "bank file: trailing bytes at offset {}",
                cur.pos
            )));
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MemoryBank> {
        if !path.exists() {
            return Err(SarmError::MissingFile(path.to_path_buf()));
        }
        MemoryBank::from_bytes(&std::fs::read(path)?)
    }
}
