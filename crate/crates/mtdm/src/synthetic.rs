//! Small periodic dataset with a deterministic repeating pattern. Useful
//! for overfit probes and end-to-end tests without external data.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::graph::{DatasetSplit, Fact};

pub const ENTITIES: usize = 20;
pub const RELATIONS: usize = 4;
pub const TIMESTAMPS: usize = 30;
pub const PERIOD: usize = 3;

/// Facts at timestamp t: every subject emits one edge whose object cycles
/// with period [`PERIOD`], so history fully determines the future.
pub fn facts_at(t: usize) -> Vec<Fact> {
    (0..ENTITIES)
        .map(|s| Fact {
            s,
            r: s % RELATIONS,
            o: (s + 1 + 7 * (t % PERIOD)) % ENTITIES,
            t,
        })
        .collect()
}

/// Chronological split: train on t < 24, validate on 24..27, test on 27..30.
pub fn generate() -> DatasetSplit {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for t in 0..TIMESTAMPS {
        let dst = if t < 24 {
            &mut train
        } else if t < 27 {
            &mut valid
        } else {
            &mut test
        };
        dst.extend(facts_at(t));
    }
    DatasetSplit {
        train,
        valid,
        test,
        num_entities: ENTITIES,
        num_relations: RELATIONS,
    }
}

/// Materialize the split in the on-disk dataset layout (train/valid/test
/// plus stat.txt) so the CLI pipeline can consume it.
pub fn write_dataset(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let split = generate();
    for (name, facts) in [
        ("train.txt", &split.train),
        ("valid.txt", &split.valid),
        ("test.txt", &split.test),
    ] {
        let mut f = fs::File::create(dir.join(name))?;
        for q in facts {
            writeln!(f, "{}\t{}\t{}\t{}", q.s, q.r, q.o, q.t)?;
        }
    }
    let mut stat = fs::File::create(dir.join("stat.txt"))?;
    writeln!(stat, "{} {}", ENTITIES, RELATIONS)?;
    Ok(())
}
