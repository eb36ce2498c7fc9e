//! Link-prediction evaluation: time-aware filtered ranking, MRR and
//! Hits@k, with selectable history regimes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;

use crate::error::Result;
use crate::graph::{
    add_inverse, build_snapshots, deep_memory_facts, DatasetSplit, Fact, Snapshot,
    SparseAdjacency, TemporalGraph,
};
use crate::model::{decode_entities, forward, Ablation, ForwardSpec, ModelState, ModelVars, TrenMode};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// Which facts may populate the history window.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum Regime {
    /// Fixed window: the last snapshots of the splits preceding the
    /// evaluated one. No evaluated facts ever enter the history.
    #[default]
    Default,
    /// Per-query window over everything strictly before the prediction
    /// timestamp, including earlier evaluated facts.
    GroundTruth,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Valid,
    Test,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub regime: Regime,
    pub target: Target,
    pub window: usize,
    pub mode: TrenMode,
    pub ablation: Ablation,
    pub hard_gate: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            regime: Regime::Default,
            target: Target::Test,
            window: 10,
            mode: TrenMode::Standard,
            ablation: Ablation::default(),
            hard_gate: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

/// Filtered rank of the gold candidate under the strict-greater tie rule.
/// `filtered` holds candidates that are also true at the prediction
/// timestamp; they are skipped instead of counted as competitors.
pub fn time_aware_filtered_rank<S: Scalar>(
    scores: &[S],
    gold: usize,
    filtered: &HashSet<usize>,
) -> usize {
    let gs = scores[gold];
    let mut rank = 1;
    for (j, &sc) in scores.iter().enumerate() {
        if j == gold || filtered.contains(&j) {
            continue;
        }
        if sc > gs {
            rank += 1;
        }
    }
    rank
}

/// Accumulates reciprocal ranks and hit counts.
#[derive(Clone, Debug, Default)]
pub struct MetricAccum {
    sum_rr: f64,
    hits: [usize; 3],
    count: usize,
}

impl MetricAccum {
    pub fn push(&mut self, rank: usize) {
        self.sum_rr += 1.0 / rank as f64;
        for (i, k) in [1usize, 3, 10].iter().enumerate() {
            if rank <= *k {
                self.hits[i] += 1;
            }
        }
        self.count += 1;
    }

    pub fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mrr: self.sum_rr / n,
            hits1: self.hits[0] as f64 / n,
            hits3: self.hits[1] as f64 / n,
            hits10: self.hits[2] as f64 / n,
            queries: self.count,
        }
    }
}

/// True objects per (subject, relation, timestamp) over the whole dataset,
/// in the inverse-augmented id space. This is the time-aware filter set.
pub fn build_filter(split: &DatasetSplit) -> Result<HashMap<(usize, usize, usize), HashSet<usize>>> {
    let mut filter: HashMap<(usize, usize, usize), HashSet<usize>> = HashMap::new();
    for facts in [&split.train, &split.valid, &split.test] {
        for f in add_inverse(facts, split.num_relations)? {
            filter.entry((f.s, f.r, f.t)).or_default().insert(f.o);
        }
    }
    Ok(filter)
}

struct HistoryPlan {
    /// Snapshot pool the window is drawn from, inverse-augmented.
    pool: TemporalGraph,
    /// Fixed window when the regime ignores the prediction timestamp.
    fixed: bool,
}

fn history_plan(split: &DatasetSplit, opts: &EvalOptions) -> Result<HistoryPlan> {
    let aug_rel = split.num_relations * 2;
    let mut pool_facts: Vec<Fact> = Vec::new();
    let (fixed, sources): (bool, Vec<&Vec<Fact>>) = match (opts.regime, opts.target) {
        (Regime::Default, Target::Valid) => (true, vec![&split.train]),
        (Regime::Default, Target::Test) => (true, vec![&split.train, &split.valid]),
        (Regime::GroundTruth, _) => (false, vec![&split.train, &split.valid, &split.test]),
    };
    for src in sources {
        pool_facts.extend(add_inverse(src, split.num_relations)?);
    }
    let pool = build_snapshots(&pool_facts, split.num_entities, aug_rel)?;
    Ok(HistoryPlan { pool, fixed })
}

fn window_before<'a>(pool: &'a TemporalGraph, t_p: usize, n: usize) -> &'a [Snapshot] {
    let end = pool.snapshots.partition_point(|s| s.t < t_p);
    let start = end.saturating_sub(n);
    &pool.snapshots[start..end]
}

fn deep_adjacency(pool: &TemporalGraph, window: &[Snapshot]) -> Result<Rc<SparseAdjacency>> {
    let t1 = window.first().map(|s| s.t).unwrap_or(0);
    let deep = deep_memory_facts(pool, t1);
    Ok(Rc::new(SparseAdjacency::from_facts(
        deep.iter(),
        pool.num_entities,
        pool.num_relations,
    )?))
}

/// Evaluate entity prediction over both query directions of the chosen
/// split. Returns aggregate metrics over 2x the fact count.
pub fn evaluate<S: Scalar>(
    model: &ModelState<S>,
    split: &DatasetSplit,
    opts: &EvalOptions,
) -> Result<Metrics> {
    let target_facts = match opts.target {
        Target::Valid => &split.valid,
        Target::Test => &split.test,
    };
    let queries = add_inverse(target_facts, split.num_relations)?;
    let filter = build_filter(split)?;
    let plan = history_plan(split, opts)?;

    let mut by_t: BTreeMap<usize, Vec<Fact>> = BTreeMap::new();
    for q in queries {
        by_t.entry(q.t).or_default().push(q);
    }

    let mut accum = MetricAccum::default();
    let mut fixed_ctx: Option<(Tape<S>, ModelVars, crate::model::HiddenVars)> = None;
    for (t_p, facts) in by_t {
        let run_ctx;
        let ctx: &mut (Tape<S>, ModelVars, crate::model::HiddenVars) = if plan.fixed {
            if fixed_ctx.is_none() {
                let n = plan.pool.snapshots.len();
                let window = &plan.pool.snapshots[n.saturating_sub(opts.window)..];
                fixed_ctx = Some(forward_ctx(model, window, &plan.pool, opts)?);
            }
            fixed_ctx.as_mut().unwrap()
        } else {
            let window = window_before(&plan.pool, t_p, opts.window);
            run_ctx = forward_ctx(model, window, &plan.pool, opts)?;
            fixed_ctx = Some(run_ctx);
            fixed_ctx.as_mut().unwrap()
        };
        let (tape, vars, hidden) = ctx;

        for chunk in facts.chunks(512) {
            let subjects: Vec<usize> = chunk.iter().map(|f| f.s).collect();
            let relations: Vec<usize> = chunk.iter().map(|f| f.r).collect();
            let logits = decode_entities(tape, vars, hidden, &subjects, &relations, 0.0, None)?;
            let scores = tape.value(logits);
            for (i, f) in chunk.iter().enumerate() {
                let row = scores.row(i);
                let mut others = filter
                    .get(&(f.s, f.r, f.t))
                    .cloned()
                    .unwrap_or_default();
                others.remove(&f.o);
                accum.push(time_aware_filtered_rank(row, f.o, &others));
            }
        }
    }
    Ok(accum.finish())
}

fn forward_ctx<S: Scalar>(
    model: &ModelState<S>,
    window: &[Snapshot],
    pool: &TemporalGraph,
    opts: &EvalOptions,
) -> Result<(Tape<S>, ModelVars, crate::model::HiddenVars)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model);
    let deep_adj = deep_adjacency(pool, window)?;
    let spec = ForwardSpec {
        window,
        deep_adj,
        mode: opts.mode,
        hard_gate: opts.hard_gate,
        ablation: opts.ablation,
    };
    let hidden = forward(&mut tape, &vars, &spec)?;
    Ok((tape, vars, hidden))
}

/// One scored candidate from an explanation query.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RankedEntity {
    pub entity: usize,
    pub score: f64,
    pub gold: bool,
}

/// Score a single (subject, relation) query and return the top-k entities by
/// sigmoid score, most confident first.
pub fn explain_query<S: Scalar>(
    model: &ModelState<S>,
    split: &DatasetSplit,
    subject: usize,
    relation: usize,
    t_p: usize,
    k: usize,
    opts: &EvalOptions,
) -> Result<Vec<RankedEntity>> {
    let plan = history_plan(split, opts)?;
    let window = if plan.fixed {
        let n = plan.pool.snapshots.len();
        &plan.pool.snapshots[n.saturating_sub(opts.window)..]
    } else {
        window_before(&plan.pool, t_p, opts.window)
    };
    let (mut tape, vars, hidden) = forward_ctx(model, window, &plan.pool, opts)?;
    let logits = decode_entities(&mut tape, &vars, &hidden, &[subject], &[relation], 0.0, None)?;
    let probs = tape.sigmoid(logits)?;
    let row = tape.value(probs).row(0);

    let gold: HashSet<usize> = build_filter(split)?
        .get(&(subject, relation, t_p))
        .cloned()
        .unwrap_or_default();
    let mut ranked: Vec<RankedEntity> = row
        .iter()
        .enumerate()
        .map(|(e, &p)| RankedEntity {
            entity: e,
            score: p.to_f64().unwrap_or(f64::NAN),
            gold: gold.contains(&e),
        })
        .collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    ranked.truncate(k);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_strict_greater() {
        // gold at index 1 with score 2.0; one strictly higher competitor
        let scores = [3.0f64, 2.0, 2.0, 1.0];
        assert_eq!(time_aware_filtered_rank(&scores, 1, &HashSet::new()), 2);
        // equal scores do not worsen the rank
        assert_eq!(time_aware_filtered_rank(&scores, 2, &HashSet::new()), 2);
    }

    #[test]
    fn rank_skips_filtered_competitors() {
        let scores = [3.0f64, 2.0, 4.0, 1.0];
        let mut filtered = HashSet::new();
        filtered.insert(0);
        filtered.insert(2);
        assert_eq!(time_aware_filtered_rank(&scores, 1, &filtered), 1);
    }

    #[test]
    fn rank_best_is_one() {
        let scores = [0.1f64, 0.9, 0.2];
        assert_eq!(time_aware_filtered_rank(&scores, 1, &HashSet::new()), 1);
    }

    #[test]
    fn metrics_from_known_ranks() {
        let mut acc = MetricAccum::default();
        for r in [1usize, 2, 5, 20] {
            acc.push(r);
        }
        let m = acc.finish();
        let expect = (1.0 + 0.5 + 0.2 + 0.05) / 4.0;
        assert!((m.mrr - expect).abs() < 1e-12);
        assert_eq!(m.queries, 4);
        assert!((m.hits1 - 0.25).abs() < 1e-12);
        assert!((m.hits3 - 0.5).abs() < 1e-12);
        assert!((m.hits10 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn window_slicing_respects_bounds() {
        let facts: Vec<Fact> = (0..6)
            .map(|t| Fact { s: 0, r: 0, o: 1, t })
            .collect();
        let pool = build_snapshots(&facts, 2, 1).unwrap();
        let w = window_before(&pool, 4, 2);
        assert_eq!(w.iter().map(|s| s.t).collect::<Vec<_>>(), vec![2, 3]);
        let w = window_before(&pool, 1, 10);
        assert_eq!(w.iter().map(|s| s.t).collect::<Vec<_>>(), vec![0]);
        assert!(window_before(&pool, 0, 10).is_empty());
    }
}
