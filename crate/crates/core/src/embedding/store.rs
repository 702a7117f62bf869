// EMB1 layout, all integers little-endian:
//
//   magic "EMB1" | version u32 | record count u64
//   per record: key len u32 | key utf-8 | kind u8 | rows u64 | dim u64 |
//               normalized u8 | rows*dim f32

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{EmbedError, EmbeddingKind, EmbeddingMatrix, EmbeddingRecord};

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB1_VERSION: u32 = 1;

/// Keyed, insertion-ordered collection of records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self, EmbedError> {
        let mut store = Self::new();
        for r in records {
            store.insert(r)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<(), EmbedError> {
        if self.index.contains_key(&record.key) {
            return Err(EmbedError::DuplicateKey(record.key));
        }
        self.index.insert(record.key.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    /// Inserts unless the key is present. Returns whether it was inserted.
    pub fn insert_if_absent(&mut self, record: EmbeddingRecord) -> bool {
        if self.index.contains_key(&record.key) {
            return false;
        }
        self.index.insert(record.key.clone(), self.records.len());
        self.records.push(record);
        true
    }

    pub fn get(&self, key: &str) -> Option<&EmbeddingRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        store_write(path, &self.records)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        store_read(path)
    }
}

pub fn store_write(path: impl AsRef<Path>, records: &[EmbeddingRecord]) -> Result<(), EmbedError> {
    write_container(path, EMB1_MAGIC, records)
}

pub fn store_read(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbedError> {
    EmbeddingStore::from_records(read_container(path, EMB1_MAGIC)?)
}

/// Encodes records in the EMB1 layout under an arbitrary 4-byte magic.
pub fn encode_container(magic: [u8; 4], records: &[EmbeddingRecord]) -> Result<Vec<u8>, EmbedError> {
    let mut seen = std::collections::HashSet::new();
    let payload: usize = records.iter().map(|r| 4 + r.key.len() + 18 + r.matrix.data().len() * 4).sum();
    let mut buf = Vec::with_capacity(16 + payload);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if !seen.insert(r.key.as_str()) {
            return Err(EmbedError::DuplicateKey(r.key.clone()));
        }
        let key_len = u32::try_from(r.key.len()).map_err(|_| EmbedError::Format("key longer than u32::MAX".into()))?;
        buf.extend_from_slice(&key_len.to_le_bytes());
        buf.extend_from_slice(r.key.as_bytes());
        buf.push(r.kind.code());
        buf.extend_from_slice(&(r.matrix.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(r.matrix.dim() as u64).to_le_bytes());
        buf.push(u8::from(r.matrix.is_normalized()));
        for v in r.matrix.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_container(path: impl AsRef<Path>, magic: [u8; 4], records: &[EmbeddingRecord]) -> Result<(), EmbedError> {
    let path = path.as_ref();
    let bytes = encode_container(magic, records)?;
    fs::write(path, bytes).map_err(|source| EmbedError::Io { path: path.display().to_string(), source })
}

pub fn read_container(path: impl AsRef<Path>, magic: [u8; 4]) -> Result<Vec<EmbeddingRecord>, EmbedError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| EmbedError::Io { path: path.display().to_string(), source })?;
    decode_container(&bytes, magic)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EmbedError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            EmbedError::Corrupt(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, EmbedError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, EmbedError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, EmbedError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_container(bytes: &[u8], magic: [u8; 4]) -> Result<Vec<EmbeddingRecord>, EmbedError> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(EmbedError::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut rd = Reader { bytes, pos: 4 };
    let version = rd.u32("version").map_err(|_| EmbedError::Format("missing version".into()))?;
    if version != EMB1_VERSION {
        return Err(EmbedError::Format(format!("unsupported version {version}")));
    }
    let count = rd.u64("record count")?;
    let mut records = Vec::new();
    for i in 0..count {
        let key_len = rd.u32("key length")? as usize;
        let key = std::str::from_utf8(rd.take(key_len, "key")?)
            .map_err(|_| EmbedError::Corrupt(format!("record {i}: key is not utf-8")))?
            .to_string();
        let code = rd.u8("kind")?;
        let kind = EmbeddingKind::from_code(code)
            .ok_or_else(|| EmbedError::Corrupt(format!("record {i}: unknown kind {code}")))?;
        let rows = rd.u64("rows")? as usize;
        let dim = rd.u64("dim")? as usize;
        let normalized = match rd.u8("normalized flag")? {
            0 => false,
            1 => true,
            other => return Err(EmbedError::Corrupt(format!("record {i}: bad normalized flag {other}"))),
        };
        let n = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| EmbedError::Corrupt(format!("record {i}: shape overflow")))?;
        let raw = rd.take(n, "payload")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let matrix = EmbeddingMatrix::with_flag(rows, dim, data, normalized)
            .map_err(|e| EmbedError::Corrupt(format!("record {i} ({key}): {e}")))?;
        let record = EmbeddingRecord::new(key, kind, matrix).map_err(|e| EmbedError::Corrupt(e.to_string()))?;
        records.push(record);
    }
    if rd.pos != bytes.len() {
        return Err(EmbedError::Corrupt(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(key: &str, rows: usize, dim: usize, data: Vec<f32>) -> EmbeddingRecord {
        let kind = if rows == 1 { EmbeddingKind::GlobalText } else { EmbeddingKind::TokenSequence };
        EmbeddingRecord::new(key, kind, EmbeddingMatrix::new(rows, dim, data).unwrap()).unwrap()
    }

    #[test]
    fn single_record_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.emb");
        store_write(&path, &[record("k", 1, 2, vec![1.0, 0.0])]).unwrap();
        let len = fs::read(&path).unwrap().len();
        // header 16, record header 4 + 1 + 1 + 8 + 8 + 1, payload 8
        assert_eq!(len, 16 + 23 + 8);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.emb");
        let recs = vec![record("a", 1, 3, vec![1.0, -2.5, 3.25]), record("b", 2, 2, vec![0.1, 0.2, 0.3, 0.4])];
        store_write(&path, &recs).unwrap();
        let store = store_read(&path).unwrap();
        assert_eq!(store.records(), &recs[..]);
        assert_eq!(store.get("b").unwrap().matrix.rows(), 2);
    }

    #[test]
    fn identical_inputs_identical_bytes() {
        let recs = vec![record("a", 1, 2, vec![0.5, 0.25])];
        assert_eq!(encode_container(EMB1_MAGIC, &recs).unwrap(), encode_container(EMB1_MAGIC, &recs).unwrap());
    }

    #[test]
    fn duplicate_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record("a", 1, 1, vec![1.0]), record("a", 1, 1, vec![2.0])];
        let err = store_write(dir.path().join("d.emb"), &recs).unwrap_err();
        assert!(matches!(err, EmbedError::DuplicateKey(k) if k == "a"));
    }

    #[test]
    fn truncated_is_corrupt() {
        let bytes = encode_container(EMB1_MAGIC, &[record("a", 1, 2, vec![1.0, 2.0])]).unwrap();
        for cut in [17, bytes.len() - 1] {
            let err = decode_container(&bytes[..cut], EMB1_MAGIC).unwrap_err();
            assert!(matches!(err, EmbedError::Corrupt(_)), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(decode_container(b"EMB2\x01\0\0\0", EMB1_MAGIC), Err(EmbedError::Format(_))));
        let mut bytes = encode_container(EMB1_MAGIC, &[]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_container(&bytes, EMB1_MAGIC), Err(EmbedError::Format(_))));
    }

    #[test]
    fn empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        store_write(&path, &[]).unwrap();
        assert!(store_read(&path).unwrap().is_empty());
        assert_eq!(fs::read(&path).unwrap().len(), 16);
    }
}
