//! Binary dataset cache written by the preprocess step. The cache embeds a
//! content hash of the source files so stale caches are detectable.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, Fact};

const MAGIC: &[u8; 8] = b"MTDMDAT1";

/// Hex SHA-256 over the raw bytes of the four source files, in a fixed order.
pub fn source_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in ["stat.txt", "train.txt", "valid.txt", "test.txt"] {
        let bytes = fs::read(dir.join(name))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn push_u64(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u64).to_le_bytes());
}

fn push_facts(buf: &mut Vec<u8>, facts: &[Fact]) {
    push_u64(buf, facts.len());
    for f in facts {
        for v in [f.s, f.r, f.o, f.t] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
}

pub fn write_cache(path: &Path, split: &DatasetSplit, hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u64(&mut buf, hash.len());
    buf.extend_from_slice(hash.as_bytes());
    push_u64(&mut buf, split.num_entities);
    push_u64(&mut buf, split.num_relations);
    push_facts(&mut buf, &split.train);
    push_facts(&mut buf, &split.valid);
    push_facts(&mut buf, &split.test);
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Returns the split together with the recorded source hash.
pub fn read_cache(path: &Path) -> Result<(DatasetSplit, String)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Invalid("dataset cache is truncated".into()));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let u64_at = |pos: &mut usize| -> Result<usize> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::Invalid("not a dataset cache (bad magic)".into()));
    }
    let hash_len = u64_at(&mut pos)?;
    let hash = String::from_utf8(take(&mut pos, hash_len)?.to_vec())
        .map_err(|_| Error::Invalid("dataset cache has a bad hash field".into()))?;
    let num_entities = u64_at(&mut pos)?;
    let num_relations = u64_at(&mut pos)?;

    let read_facts = |pos: &mut usize| -> Result<Vec<Fact>> {
        let n = u64_at(pos)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = take(pos, 16)?;
            let g = |i: usize| u32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
            out.push(Fact {
                s: g(0),
                r: g(1),
                o: g(2),
                t: g(3),
            });
        }
        Ok(out)
    };
    let train = read_facts(&mut pos)?;
    let valid = read_facts(&mut pos)?;
    let test = read_facts(&mut pos)?;
    Ok((
        DatasetSplit {
            train,
            valid,
            test,
            num_entities,
            num_relations,
        },
        hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn cache_roundtrip_and_hash_stability() {
        let dir = tempfile::tempdir().unwrap();
        synthetic::write_dataset(dir.path()).unwrap();
        let split = crate::graph::parse_dataset(dir.path()).unwrap();
        let h1 = source_hash(dir.path()).unwrap();
        let h2 = source_hash(dir.path()).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);

        let cache = dir.path().join("data.bin");
        write_cache(&cache, &split, &h1).unwrap();
        let (loaded, hash) = read_cache(&cache).unwrap();
        assert_eq!(loaded, split);
        assert_eq!(hash, h1);
    }

    #[test]
    fn cache_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"junkjunkjunk").unwrap();
        assert!(read_cache(&path).is_err());
    }
}
