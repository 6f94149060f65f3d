//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `magic[8] | version u32 | config_len u64 | config | config_sum u64 |
//! sections u32 | { name_len u32 | name | table_len u64 | table |
//! payload_len u64 | payload | sum u64 }*`.
//! A table lists `entries u32 | { name_len u32 | name | dtype u8 | ndim u32 |
//! dims u64* }*`; the payload holds the entries' values in table order. Each
//! checksum is FNV-1a 64 over everything it guards.

use std::path::Path;

use varsr_numerics::{OptimizerState, ParamStore, Tensor};

use crate::error::{Result, VarsrError};

pub const MAGIC: &[u8; 8] = b"VARSRCK\0";
pub const VERSION: u32 = 1;

/// FNV-1a 64 hash.
pub fn fnv1a64(chunks: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for chunk in chunks {
        for &b in *chunk {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().to_vec()),
        }
    }

    pub fn f64(name: impl Into<String>, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len()],
            payload: Payload::F64(values.to_vec()),
        }
    }

    pub fn u64(name: impl Into<String>, values: &[u64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len()],
            payload: Payload::U64(values.to_vec()),
        }
    }

    fn mismatch(&self, want: &str) -> VarsrError {
        VarsrError::Checkpoint(format!("entry `{}` is not {want}", self.name))
    }

    pub fn as_tensor(&self) -> Result<Tensor<f32>> {
        match &self.payload {
            Payload::F32(v) => Ok(Tensor::new(&self.shape, v.clone())?),
            _ => Err(self.mismatch("f32")),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::F64(v) => Ok(v),
            _ => Err(self.mismatch("f64")),
        }
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(self.mismatch("u64")),
        }
    }

    pub fn scalar_u64(&self) -> Result<u64> {
        match self.as_u64()? {
            [v] => Ok(*v),
            _ => Err(self.mismatch("a single u64")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| VarsrError::Checkpoint(format!("section `{}` has no entry `{name}`", self.name)))
    }

    /// Parameters whose names start with `prefix`, in store order.
    pub fn from_store(name: impl Into<String>, store: &ParamStore<f32>, prefix: &str) -> Self {
        let mut s = Self::new(name);
        for e in store.entries().iter().filter(|e| e.name.starts_with(prefix)) {
            s.push(Entry::f32(&e.name, &e.tensor));
        }
        s
    }

    /// Overwrites every store parameter under `prefix` from this section.
    /// Each must be present with the same shape; extras are errors.
    pub fn load_into(&self, store: &mut ParamStore<f32>, prefix: &str) -> Result<()> {
        let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).name.starts_with(prefix)).collect();
        if ids.len() != self.entries.len() {
            return Err(VarsrError::Checkpoint(format!(
                "section `{}` holds {} tensors, model expects {}",
                self.name,
                self.entries.len(),
                ids.len()
            )));
        }
        for id in ids {
            let t = self.get(&store.entry(id).name)?.as_tensor()?;
            if t.shape() != store.get(id).shape() {
                return Err(VarsrError::Checkpoint(format!(
                    "`{}` has shape {:?} in the checkpoint, {:?} in the model",
                    store.entry(id).name,
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    /// Adam moments keyed by parameter name, plus the step counter, under
    /// `prefix` (`{prefix}m/{name}`, `{prefix}v/{name}`, `{prefix}step`).
    pub fn push_optimizer(&mut self, prefix: &str, store: &ParamStore<f32>, state: &OptimizerState<f32>) {
        for (i, e) in store.entries().iter().enumerate() {
            self.push(Entry::f32(format!("{prefix}m/{}", e.name), &state.m[i]));
            self.push(Entry::f32(format!("{prefix}v/{}", e.name), &state.v[i]));
        }
        self.push(Entry::u64(format!("{prefix}step"), &[state.step]));
    }

    pub fn read_optimizer(&self, prefix: &str, store: &ParamStore<f32>) -> Result<OptimizerState<f32>> {
        let mut state = OptimizerState::new(store);
        state.step = self.get(&format!("{prefix}step"))?.scalar_u64()?;
        for (i, e) in store.entries().iter().enumerate() {
            for (key, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let t = self.get(&format!("{prefix}{key}/{}", e.name))?.as_tensor()?;
                if t.shape() != e.tensor.shape() {
                    return Err(VarsrError::Checkpoint(format!("optimizer moment for `{}` has wrong shape", e.name)));
                }
                *slot = t;
            }
        }
        Ok(state)
    }

    fn encode(&self) -> (Vec<u8>, Vec<u8>) {
        let mut table = Vec::new();
        let mut payload = Vec::new();
        put_u32(&mut table, self.entries.len() as u32);
        for e in &self.entries {
            put_str(&mut table, &e.name);
            table.push(e.payload.tag());
            put_u32(&mut table, e.shape.len() as u32);
            for &d in &e.shape {
                put_u64(&mut table, d as u64);
            }
            e.payload.write(&mut payload);
        }
        (table, payload)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The run configuration as JSON text.
    pub config: String,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            config: config.into(),
            sections: Vec::new(),
        }
    }

    /// Adds or replaces a section.
    pub fn put(&mut self, section: Section) {
        match self.sections.iter_mut().find(|s| s.name == section.name) {
            Some(s) => *s = section,
            None => self.sections.push(section),
        }
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| VarsrError::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.config.len() as u64);
        out.extend_from_slice(self.config.as_bytes());
        put_u64(&mut out, fnv1a64(&[self.config.as_bytes()]));
        put_u32(&mut out, self.sections.len() as u32);
        for s in &self.sections {
            let (table, payload) = s.encode();
            put_str(&mut out, &s.name);
            put_u64(&mut out, table.len() as u64);
            out.extend_from_slice(&table);
            put_u64(&mut out, payload.len() as u64);
            out.extend_from_slice(&payload);
            put_u64(&mut out, fnv1a64(&[s.name.as_bytes(), &table, &payload]));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(VarsrError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(VarsrError::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = r.len64()?;
        let config_bytes = r.take(n)?;
        if r.u64()? != fnv1a64(&[config_bytes]) {
            return Err(VarsrError::Checkpoint("checksum mismatch in embedded config".into()));
        }
        let config = String::from_utf8(config_bytes.to_vec())
            .map_err(|_| VarsrError::Checkpoint("embedded config is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let n = r.len64()?;
            let table = r.take(n)?;
            let n = r.len64()?;
            let payload = r.take(n)?;
            if r.u64()? != fnv1a64(&[name.as_bytes(), table, payload]) {
                return Err(VarsrError::Checkpoint(format!("checksum mismatch in section `{name}`")));
            }
            let entries = decode_section(&name, table, payload)?;
            sections.push(Section { name, entries });
        }
        if r.pos != bytes.len() {
            return Err(VarsrError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| VarsrError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| VarsrError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            VarsrError::Checkpoint(msg) => VarsrError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn decode_section(name: &str, table: &[u8], payload: &[u8]) -> Result<Vec<Entry>> {
    let mut t = Reader { bytes: table, pos: 0 };
    let mut p = Reader { bytes: payload, pos: 0 };
    let n = t.u32()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let ename = t.string()?;
        let tag = t.take(1)?[0];
        let ndim = t.u32()? as usize;
        let shape = (0..ndim).map(|_| t.len64()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| VarsrError::Checkpoint(format!("entry `{ename}` shape overflows")))?;
        let payload = match tag {
            0 => Payload::F32(p.chunks(count, 4)?.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => Payload::F64(p.chunks(count, 8)?.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => Payload::U64(p.chunks(count, 8)?.map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            other => return Err(VarsrError::Checkpoint(format!("entry `{ename}` has unknown dtype {other}"))),
        };
        debug_assert_eq!(payload.len(), count);
        entries.push(Entry {
            name: ename,
            shape,
            payload,
        });
    }
    if t.pos != table.len() || p.pos != payload.len() {
        return Err(VarsrError::Checkpoint(format!("section `{name}` table and payload disagree")));
    }
    Ok(entries)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| VarsrError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn chunks(&mut self, count: usize, width: usize) -> Result<std::slice::ChunksExact<'a, u8>> {
        let n = count
            .checked_mul(width)
            .ok_or_else(|| VarsrError::Checkpoint("payload size overflows".into()))?;
        Ok(self.take(n)?.chunks_exact(width))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| VarsrError::Checkpoint("length does not fit in memory".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| VarsrError::Checkpoint(format!("non-UTF-8 name at byte {}", self.pos)))
    }
}
