//! Shared binary container for checkpoints and dataset caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic (4 bytes) | version u32 | metadata length u32 | metadata UTF-8
//! record count u32 | records...
//! extra count u32  | records...
//! record = name length u32 | name UTF-8 | rank u32 | extents u64 * rank
//!          | values f64 * product(extents)
//! ```
//!
//! Checkpoints put parameters in the first section and normalization
//! running statistics in the second; dataset caches put patches in the
//! first and leave the second empty.

use std::path::Path;

#[derive(Debug)]
pub(crate) enum ContainerError {
    Corrupt { offset: usize, reason: String },
    Io(std::io::Error),
}

impl std::fmt::Display for ContainerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ContainerError::Corrupt { offset, reason } => {
                write!(f, "corrupt container at byte {offset}: {reason}")
            }
            ContainerError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Record {
    pub name: String,
    pub extents: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Container {
    pub metadata: String,
    pub records: Vec<Record>,
    pub extra: Vec<Record>,
}

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

pub(crate) fn encode(magic: &[u8; 4], version: u32, container: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    let meta = container.metadata.as_bytes();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    for section in [&container.records, &container.extra] {
        out.extend_from_slice(&(section.len() as u32).to_le_bytes());
        for record in section {
            let name = record.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(record.extents.len() as u32).to_le_bytes());
            for &e in &record.extents {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &record.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> ContainerError {
        ContainerError::Corrupt {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated: need {n} bytes, have {}",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String, ContainerError> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt(format!("{what} not UTF-8")))
    }

    fn record(&mut self) -> Result<Record, ContainerError> {
        let name_len = self.u32()? as usize;
        if name_len > MAX_NAME {
            return Err(self.corrupt(format!("record name length {name_len} too large")));
        }
        let name = self.string(name_len, "record name")?;
        let rank = self.u32()? as usize;
        if rank > MAX_RANK {
            return Err(self.corrupt(format!("record rank {rank} too large")));
        }
        let mut extents = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let e = self.u64()? as usize;
            len = len
                .checked_mul(e)
                .ok_or_else(|| self.corrupt("record size overflow"))?;
            extents.push(e);
        }
        if self.bytes.len() - self.pos < len * 8 {
            return Err(self.corrupt(format!(
                "truncated record {name:?}: need {} value bytes",
                len * 8
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        Ok(Record {
            name,
            extents,
            data,
        })
    }

    fn section(&mut self) -> Result<Vec<Record>, ContainerError> {
        let count = self.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            records.push(self.record()?);
        }
        Ok(records)
    }
}

pub(crate) fn decode(
    bytes: &[u8],
    magic: &[u8; 4],
    version: u32,
) -> Result<Container, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let got_magic = r.take(4)?;
    if got_magic != magic {
        return Err(ContainerError::Corrupt {
            offset: 0,
            reason: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got_magic),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let got_version = r.u32()?;
    if got_version != version {
        return Err(r.corrupt(format!(
            "unsupported format version {got_version}, expected {version}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let metadata = r.string(meta_len, "metadata")?;
    let records = r.section()?;
    let extra = r.section()?;
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Container {
        metadata,
        records,
        extra,
    })
}

pub(crate) fn write_file(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    container: &Container,
) -> Result<(), ContainerError> {
    std::fs::write(path, encode(magic, version, container)).map_err(ContainerError::Io)
}

pub(crate) fn read_file(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
) -> Result<Container, ContainerError> {
    let bytes = std::fs::read(path).map_err(ContainerError::Io)?;
    decode(&bytes, magic, version)
}
