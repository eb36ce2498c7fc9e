//! Quadruple datasets, snapshot sequences, the deep-memory fact set and
//! dissolution negatives.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};

/// One timestamped edge: (subject, relation, object, timestamp index).
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fact {
    pub s: usize,
    pub r: usize,
    pub o: usize,
    pub t: usize,
}

/// Per-relation edge lists of one snapshot plus the per-subject incident-edge
/// count used as the aggregation normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdjacency {
    pub num_entities: usize,
    pub num_relations: usize,
    /// rel_edges[r] = list of (subject, object) pairs.
    pub rel_edges: Vec<Vec<(usize, usize)>>,
    /// Number of edges whose messages land on each subject row.
    pub in_degree: Vec<usize>,
}

impl SparseAdjacency {
    pub fn empty(num_entities: usize, num_relations: usize) -> Self {
        SparseAdjacency {
            num_entities,
            num_relations,
            rel_edges: vec![Vec::new(); num_relations],
            in_degree: vec![0; num_entities],
        }
    }

    pub fn from_facts<'a, I>(facts: I, num_entities: usize, num_relations: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Fact>,
    {
        let mut adj = SparseAdjacency::empty(num_entities, num_relations);
        for f in facts {
            if f.s >= num_entities {
                return Err(Error::IdOutOfRange {
                    what: "entity",
                    id: f.s,
                    max: num_entities,
                });
            }
            if f.o >= num_entities {
                return Err(Error::IdOutOfRange {
                    what: "entity",
                    id: f.o,
                    max: num_entities,
                });
            }
            if f.r >= num_relations {
                return Err(Error::IdOutOfRange {
                    what: "relation",
                    id: f.r,
                    max: num_relations,
                });
            }
            adj.rel_edges[f.r].push((f.s, f.o));
            adj.in_degree[f.s] += 1;
        }
        Ok(adj)
    }

    /// Iterate edges as (relation, subject, object).
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.rel_edges
            .iter()
            .enumerate()
            .flat_map(|(r, es)| es.iter().map(move |&(s, o)| (r, s, o)))
    }

    pub fn num_edges(&self) -> usize {
        self.rel_edges.iter().map(|e| e.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_edges() == 0
    }
}

/// All facts sharing one timestamp, with the adjacency built once.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: usize,
    pub facts: Vec<Fact>,
    pub adjacency: Rc<SparseAdjacency>,
}

/// Ordered snapshot sequence. `num_relations` is the relation-id space the
/// adjacencies were built with (2x the base count once inverses are added).
#[derive(Clone, Debug)]
pub struct TemporalGraph {
    pub snapshots: Vec<Snapshot>,
    pub num_entities: usize,
    pub num_relations: usize,
}

impl TemporalGraph {
    pub fn snapshot_at(&self, t: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.t == t)
    }

    pub fn timestamps(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.t).collect()
    }
}

/// Parsed train/valid/test fact lists, before inverse augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Fact>,
    pub valid: Vec<Fact>,
    pub test: Vec<Fact>,
    pub num_entities: usize,
    pub num_relations: usize,
}

/// Dissolved (s, r, o) triples stamped with their prediction timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct DissolutionSet {
    pub facts: Vec<Fact>,
    pub t_p: usize,
}

fn parse_fact_line(file: &str, lineno: usize, line: &str) -> Result<Option<(usize, usize, usize, usize)>> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    let mut it = trimmed.split_whitespace();
    let mut next = |what: &str| -> Result<usize> {
        let tok = it.next().ok_or_else(|| Error::Parse {
            file: file.to_string(),
            line: lineno,
            msg: format!("missing {what} column"),
        })?;
        tok.parse::<usize>().map_err(|_| Error::Parse {
            file: file.to_string(),
            line: lineno,
            msg: format!("bad {what} value {tok:?}"),
        })
    };
    let s = next("subject")?;
    let r = next("relation")?;
    let o = next("object")?;
    let t = next("timestamp")?;
    // trailing columns ignored
    Ok(Some((s, r, o, t)))
}

fn read_fact_file(path: &Path) -> Result<Vec<(usize, usize, usize, usize)>> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        file: name.clone(),
        line: 0,
        msg: format!("cannot read: {e}"),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(q) = parse_fact_line(&name, i + 1, line)? {
            out.push(q);
        }
    }
    Ok(out)
}

/// Parse train.txt / valid.txt / test.txt / stat.txt from a dataset
/// directory. Ids are validated against the stat counts and raw timestamps
/// are re-indexed to consecutive integers starting at 0.
pub fn parse_dataset(dir: &Path) -> Result<DatasetSplit> {
    let stat_path = dir.join("stat.txt");
    let stat_text = fs::read_to_string(&stat_path).map_err(|e| Error::Parse {
        file: stat_path.display().to_string(),
        line: 0,
        msg: format!("cannot read: {e}"),
    })?;
    let mut it = stat_text.split_whitespace();
    let parse_count = |tok: Option<&str>, what: &str| -> Result<usize> {
        let tok = tok.ok_or_else(|| Error::Parse {
            file: stat_path.display().to_string(),
            line: 1,
            msg: format!("missing {what} count"),
        })?;
        tok.parse().map_err(|_| Error::Parse {
            file: stat_path.display().to_string(),
            line: 1,
            msg: format!("bad {what} count {tok:?}"),
        })
    };
    let num_entities = parse_count(it.next(), "entity")?;
    let num_relations = parse_count(it.next(), "relation")?;

    let raw_train = read_fact_file(&dir.join("train.txt"))?;
    let raw_valid = read_fact_file(&dir.join("valid.txt"))?;
    let raw_test = read_fact_file(&dir.join("test.txt"))?;

    let mut stamps: BTreeSet<usize> = BTreeSet::new();
    for &(_, _, _, t) in raw_train.iter().chain(&raw_valid).chain(&raw_test) {
        stamps.insert(t);
    }
    let index: BTreeMap<usize, usize> = stamps.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let convert = |raw: Vec<(usize, usize, usize, usize)>, file: &str| -> Result<Vec<Fact>> {
        raw.into_iter()
            .map(|(s, r, o, t)| {
                for (id, max, what) in [
                    (s, num_entities, "entity"),
                    (o, num_entities, "entity"),
                    (r, num_relations, "relation"),
                ] {
                    if id >= max {
                        return Err(Error::Parse {
                            file: file.to_string(),
                            line: 0,
                            msg: format!("{what} id {id} out of range (stat says {max})"),
                        });
                    }
                }
                Ok(Fact {
                    s,
                    r,
                    o,
                    t: index[&t],
                })
            })
            .collect()
    };
    let train = convert(raw_train, "train.txt")?;
    let valid = convert(raw_valid, "valid.txt")?;
    let test = convert(raw_test, "test.txt")?;

    let max_t = |f: &[Fact]| f.iter().map(|x| x.t).max();
    let min_t = |f: &[Fact]| f.iter().map(|x| x.t).min();
    if let (Some(a), Some(b)) = (max_t(&train), min_t(&valid)) {
        if a > b {
            return Err(Error::Invalid(format!(
                "split is not chronological: train max timestamp {a} > valid min {b}"
            )));
        }
    }
    if let (Some(a), Some(b)) = (max_t(&valid), min_t(&test)) {
        if a > b {
            return Err(Error::Invalid(format!(
                "split is not chronological: valid max timestamp {a} > test min {b}"
            )));
        }
    }

    Ok(DatasetSplit {
        train,
        valid,
        test,
        num_entities,
        num_relations,
    })
}

/// For each (s, r, o, t) also emit (o, r + num_relations, s, t), doubling the
/// relation-id space so subject queries become object queries.
pub fn add_inverse(facts: &[Fact], num_relations: usize) -> Result<Vec<Fact>> {
    let mut out = Vec::with_capacity(facts.len() * 2);
    for f in facts {
        if f.r >= num_relations {
            return Err(Error::IdOutOfRange {
                what: "relation",
                id: f.r,
                max: num_relations,
            });
        }
        out.push(*f);
        out.push(Fact {
            s: f.o,
            r: f.r + num_relations,
            o: f.s,
            t: f.t,
        });
    }
    Ok(out)
}

/// Group facts by timestamp into ascending snapshots with their adjacencies.
pub fn build_snapshots(
    facts: &[Fact],
    num_entities: usize,
    num_relations: usize,
) -> Result<TemporalGraph> {
    let mut by_t: BTreeMap<usize, Vec<Fact>> = BTreeMap::new();
    for f in facts {
        by_t.entry(f.t).or_default().push(*f);
    }
    let mut snapshots = Vec::with_capacity(by_t.len());
    for (t, facts) in by_t {
        let adjacency = Rc::new(SparseAdjacency::from_facts(
            facts.iter(),
            num_entities,
            num_relations,
        )?);
        snapshots.push(Snapshot {
            t,
            facts,
            adjacency,
        });
    }
    Ok(TemporalGraph {
        snapshots,
        num_entities,
        num_relations,
    })
}

/// All facts strictly before `t1`, deduplicated on (s, r, o). The static
/// graph keeps no temporal multiplicity; timestamps are dropped to 0.
pub fn deep_memory_facts(graph: &TemporalGraph, t1: usize) -> Vec<Fact> {
    let mut seen: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    for snap in &graph.snapshots {
        if snap.t >= t1 {
            break;
        }
        for f in &snap.facts {
            seen.insert((f.s, f.r, f.o));
        }
    }
    seen.into_iter()
        .map(|(s, r, o)| Fact { s, r, o, t: 0 })
        .collect()
}

/// Triples present anywhere in [t1, tn] but absent from the snapshot at
/// `t_p`, stamped with `t_p`.
pub fn build_dissolution_negatives(
    graph: &TemporalGraph,
    t1: usize,
    tn: usize,
    t_p: usize,
) -> Result<DissolutionSet> {
    if t_p <= tn {
        return Err(Error::Invalid(format!(
            "prediction timestamp {t_p} must lie after the window end {tn}"
        )));
    }
    let mut window: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    for snap in &graph.snapshots {
        if snap.t < t1 || snap.t > tn {
            continue;
        }
        for f in &snap.facts {
            window.insert((f.s, f.r, f.o));
        }
    }
    let at_tp: HashSet<(usize, usize, usize)> = graph
        .snapshot_at(t_p)
        .map(|s| s.facts.iter().map(|f| (f.s, f.r, f.o)).collect())
        .unwrap_or_default();
    let facts = window
        .into_iter()
        .filter(|k| !at_tp.contains(k))
        .map(|(s, r, o)| Fact { s, r, o, t: t_p })
        .collect();
    Ok(DissolutionSet { facts, t_p })
}
