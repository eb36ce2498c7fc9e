//! End-to-end acceptance gates. Each test prints one pass/fail line; run
//! with `cargo test --test acceptance -- --nocapture` to see them.

use std::collections::HashSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtdm::eval::{evaluate, time_aware_filtered_rank, EvalOptions, Regime, Target};
use mtdm::gradcheck::max_grad_error;
use mtdm::graph::{
    add_inverse, build_snapshots, deep_memory_facts, DatasetSplit, Fact, SparseAdjacency,
};
use mtdm::model::{
    forward, load_checkpoint, save_checkpoint, Ablation, ForwardSpec,
    HiddenVars, ModelConfig, ModelState, ModelVars, TrenMode,
};
use mtdm::synthetic;
use mtdm::tape::Tape;
use mtdm::tensor::Tensor;
use mtdm::training::{
    loss_deep_memory, loss_dissolution, loss_gate, train, LossWeights, TrainConfig,
};

fn report(n: usize, name: &str, ok: bool) {
    println!(
        "criterion {n} ({name}): {}",
        if ok { "pass" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({name}) failed");
}

fn small_model(seed: u64, entities: usize, relations_aug: usize, d: usize) -> ModelState<f64> {
    let mut cfg = ModelConfig::new(entities, relations_aug, d);
    cfg.rgcn_bases = 2;
    cfg.channels = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelState::init(cfg, &mut rng)
}

fn small_graph() -> mtdm::graph::TemporalGraph {
    let base = vec![
        Fact { s: 0, r: 0, o: 1, t: 0 },
        Fact { s: 1, r: 1, o: 2, t: 0 },
        Fact { s: 2, r: 0, o: 3, t: 1 },
        Fact { s: 3, r: 1, o: 0, t: 1 },
        Fact { s: 1, r: 0, o: 3, t: 2 },
        Fact { s: 0, r: 1, o: 2, t: 2 },
        Fact { s: 3, r: 0, o: 1, t: 3 },
    ];
    let aug = add_inverse(&base, 2).unwrap();
    build_snapshots(&aug, 4, 4).unwrap()
}

#[test]
fn criterion_1_gradient_integrity() {
    // Composed objective with every loss term active, differentiated wrt a
    // cross-section of parameters against central finite differences.
    let started = std::time::Instant::now();
    let model = small_model(1, 4, 4, 3);
    let graph = small_graph();
    let inputs = vec![
        model.h_init.clone(),
        model.rel_emb.clone(),
        model.res_w_e.clone(),
        model.gru_uh.clone(),
        model.gate_w_u.clone(),
        model.gate_w_v.clone(),
        model.dec_ent.kernels.clone(),
        model.dec_rel.fc.clone(),
        model.rgcn[0].basis.clone(),
    ];
    let err = max_grad_error(&inputs, 1e-5, |tape, v| {
        let mut m = model.clone();
        m.h_init = tape.value(v[0]).clone();
        m.rel_emb = tape.value(v[1]).clone();
        m.res_w_e = tape.value(v[2]).clone();
        m.gru_uh = tape.value(v[3]).clone();
        m.gate_w_u = tape.value(v[4]).clone();
        m.gate_w_v = tape.value(v[5]).clone();
        m.dec_ent.kernels = tape.value(v[6]).clone();
        m.dec_rel.fc = tape.value(v[7]).clone();
        m.rgcn[0].basis = tape.value(v[8]).clone();
        let mut vars = ModelVars::register(tape, &m);
        vars.h_init = v[0];
        vars.rel_emb = v[1];
        vars.res.w_e = v[2];
        vars.gru.uh = v[3];
        vars.gate_w_u = v[4];
        vars.gate_w_v = v[5];
        vars.dec_ent.kernels = v[6];
        vars.dec_rel.fc = v[7];
        vars.rgcn[0].basis = v[8];

        let deep = deep_memory_facts(&graph, 1);
        let spec = ForwardSpec {
            window: &graph.snapshots[1..3],
            deep_adj: Rc::new(SparseAdjacency::from_facts(deep.iter(), 4, 4).unwrap()),
            mode: TrenMode::Standard,
            hard_gate: false,
            ablation: Ablation::default(),
        };
        let hidden = forward(tape, &vars, &spec)?;

        let target = &graph.snapshots[3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l_e = mtdm::training::loss_entity(
            tape, &vars, &hidden, &target.facts, 0.3, 0.0, &mut rng,
        )?;
        let w = LossWeights::default();
        let l_d = loss_deep_memory(tape, &hidden, &w)?;
        let l_g = loss_gate(tape, hidden.u_soft.unwrap())?;
        let dissolved = vec![Fact { s: 0, r: 0, o: 2, t: 3 }, Fact { s: 1, r: 3, o: 0, t: 3 }];
        let l_adv = loss_dissolution(tape, &vars, &hidden, &dissolved)?;

        let d_term = tape.scale(l_d, 1.0)?;
        let g_term = tape.scale(l_g, 1.0)?;
        let a_term = tape.scale(l_adv, 0.01)?;
        let t1 = tape.add(l_e, d_term)?;
        let t2 = tape.add(t1, g_term)?;
        tape.add(t2, a_term)
    })
    .unwrap();
    let ok = err < 1e-4 && started.elapsed().as_secs() < 60;
    println!("  composed loss max relative gradient error: {err:.3e}");
    report(1, "gradient integrity", ok);
}

#[test]
fn criterion_2_oracle_equivalence() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;

    // sparse aggregations vs dense edge loops on random graphs
    for _ in 0..20 {
        let n = rng.gen_range(5..=50);
        let r = rng.gen_range(1..=6);
        let d = rng.gen_range(2..=6);
        let edges = rng.gen_range(0..=120);
        let facts: Vec<Fact> = (0..edges)
            .map(|_| Fact {
                s: rng.gen_range(0..n),
                r: rng.gen_range(0..r),
                o: rng.gen_range(0..n),
                t: 0,
            })
            .collect();
        let adj = Rc::new(SparseAdjacency::from_facts(facts.iter(), n, r).unwrap());
        let ent: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rel: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let w: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut tape: Tape<f64> = Tape::new();
        let ent_v = tape.leaf(Tensor::from_rows(&ent));
        let rel_v = tape.leaf(Tensor::from_rows(&rel));
        let w_v = tape.leaf(Tensor::from_rows(&w));
        let agg = tape.rel_aggregate(ent_v, rel_v, &adj).unwrap();
        let rg = tape.rgcn_aggregate(ent_v, w_v, &adj).unwrap();

        // dense oracles: loop every edge, divide by subject degree
        let mut deg = vec![0usize; n];
        for f in &facts {
            deg[f.s] += 1;
        }
        let mut want_rel = vec![vec![0.0; d]; n];
        let mut want_rgcn = vec![vec![0.0; d]; n];
        for f in &facts {
            for j in 0..d {
                want_rel[f.s][j] += (ent[f.o][j] + rel[f.r][j]) / deg[f.s] as f64;
            }
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += w[f.r][i * d + j] * ent[f.o][j];
                }
                want_rgcn[f.s][i] += acc / deg[f.s] as f64;
            }
        }
        for s in 0..n {
            for j in 0..d {
                ok &= (tape.value(agg).at2(s, j) - want_rel[s][j]).abs() < 1e-10;
                ok &= (tape.value(rg).at2(s, j) - want_rgcn[s][j]).abs() < 1e-10;
            }
        }
    }

    // ranking vs a sort-based oracle, with deliberate ties
    for _ in 0..1000 {
        let c = rng.gen_range(2..40);
        let scores: Vec<f64> = (0..c).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
        let gold = rng.gen_range(0..c);
        let filtered: HashSet<usize> = (0..c)
            .filter(|&j| j != gold && rng.gen_bool(0.2))
            .collect();
        let got = time_aware_filtered_rank(&scores, gold, &filtered);

        let mut kept: Vec<f64> = scores
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != gold && !filtered.contains(j))
            .map(|(_, &v)| v)
            .collect();
        kept.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let want = 1 + kept.iter().take_while(|&&v| v > scores[gold]).count();
        ok &= got == want;
    }

    ok &= started.elapsed().as_secs() < 60;
    report(2, "oracle equivalence", ok);
}

#[test]
fn criterion_3_gate_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;

    // hard control gate: each output element comes verbatim from the path
    // its gate bit selects
    let d = 5;
    let n = 7;
    let rnd = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        let k: usize = shape.iter().product();
        Tensor::new(shape, (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    };
    let mut tape: Tape<f64> = Tape::new();
    let h_tln = tape.leaf(rnd(vec![n, d], &mut rng));
    let h_tren = tape.leaf(rnd(vec![n, d], &mut rng));
    let w_u = tape.leaf(rnd(vec![d, d], &mut rng));
    let b_u = tape.leaf(rnd(vec![d], &mut rng));
    let out = mtdm::encoders::control_gate(&mut tape, h_tln, h_tren, w_u, b_u, true).unwrap();
    let u = tape.value(out.u_used).clone();
    let fused = tape.value(out.fused).clone();
    let (tln, tren) = (tape.value(h_tln).clone(), tape.value(h_tren).clone());
    for i in 0..n {
        for j in 0..d {
            let want = if u.at2(i, j) == 1.0 {
                tln.at2(i, j)
            } else {
                tren.at2(i, j)
            };
            ok &= u.at2(i, j) == 0.0 || u.at2(i, j) == 1.0;
            ok &= fused.at2(i, j) == want;
        }
    }

    // reset gate endpoints reproduce the two pure paths exactly
    for (bias, pick_gru) in [(500.0, true), (-500.0, false)] {
        let mut tape: Tape<f64> = Tape::new();
        let h_gru = tape.leaf(rnd(vec![n, d], &mut rng));
        let e_deep = tape.leaf(rnd(vec![n, d], &mut rng));
        let w_v = tape.leaf(Tensor::zeros(vec![d, d]));
        let b_v = tape.leaf(Tensor::full(vec![d], bias));
        let got = mtdm::encoders::reset_gate(&mut tape, h_gru, e_deep, w_v, b_v).unwrap();
        let want = if pick_gru { h_gru } else { e_deep };
        ok &= tape.value(got).data() == tape.value(want).data();
    }
    report(3, "gate semantics", ok);
}

#[test]
fn criterion_4_loss_invariants() {
    let mut ok = true;

    // L_g in [0, 0.25], zero exactly at saturation
    for i in 0..=20 {
        let u = i as f64 / 20.0;
        let pre = if u == 0.0 {
            -1e9
        } else if u == 1.0 {
            1e9
        } else {
            (u / (1.0 - u)).ln()
        };
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::full(vec![3, 2], pre));
        let usig = tape.sigmoid(p).unwrap();
        let l = loss_gate(&mut tape, usig).unwrap();
        let v = tape.value(l).item();
        ok &= (0.0..=0.25 + 1e-12).contains(&v);
        if u == 0.0 || u == 1.0 {
            ok &= v == 0.0;
        } else {
            ok &= v > 0.0;
        }
    }

    let model = small_model(4, 4, 4, 2);
    let graph = small_graph();
    let mut tape: Tape<f64> = Tape::new();
    let vars = ModelVars::register(&mut tape, &model);
    let deep = deep_memory_facts(&graph, 1);
    let spec = ForwardSpec {
        window: &graph.snapshots[1..3],
        deep_adj: Rc::new(SparseAdjacency::from_facts(deep.iter(), 4, 4).unwrap()),
        mode: TrenMode::Standard,
        hard_gate: false,
        ablation: Ablation::default(),
    };
    let hidden = forward(&mut tape, &vars, &spec).unwrap();

    // L_d = 0 when the evolutional states equal deep memory
    let forced = HiddenVars {
        tren_steps: vec![hidden.h_deep, hidden.h_deep],
        ..hidden
    };
    let l = loss_deep_memory(&mut tape, &forced, &LossWeights::default()).unwrap();
    ok &= tape.value(l).item() == 0.0;

    // L_adv = 0 on an empty dissolution set
    let l = loss_dissolution(&mut tape, &vars, &forced, &[]).unwrap();
    ok &= tape.value(l).item() == 0.0;

    // the first tolerated angle is exactly 10 degrees: a pair just inside
    // incurs no loss, a pair just outside does
    for (deg, expect_zero) in [(9.99f64, true), (10.01, false)] {
        let rad = deg.to_radians();
        let mut tape: Tape<f64> = Tape::new();
        let vars = ModelVars::register(&mut tape, &model);
        let hidden = forward(&mut tape, &vars, &spec).unwrap();
        let deep_rows = tape.leaf(Tensor::from_rows(&vec![vec![1.0, 0.0]; 4]));
        let step_rows = tape.leaf(Tensor::from_rows(&vec![vec![rad.cos(), rad.sin()]; 4]));
        let forced = HiddenVars {
            h_deep: deep_rows,
            tren_steps: vec![step_rows],
            ..hidden
        };
        let l = loss_deep_memory(&mut tape, &forced, &LossWeights::default()).unwrap();
        let v = tape.value(l).item();
        ok &= if expect_zero { v == 0.0 } else { v > 0.0 };
    }
    report(4, "loss-term invariants", ok);
}

#[test]
fn criterion_5_synthetic_overfit() {
    let started = std::time::Instant::now();
    let split = synthetic::generate();
    let mut cfg = ModelConfig::new(split.num_entities, split.num_relations * 2, 32);
    cfg.rgcn_bases = 8;
    cfg.channels = 8;
    cfg.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model: ModelState<f32> = ModelState::init(cfg, &mut rng);
    let tc = TrainConfig {
        epochs: 200,
        window: 10,
        lr: 0.003,
        dropout: 0.0,
        patience: 200,
        ..TrainConfig::default()
    };
    let report_t = train(&mut model, &split, &tc, None).unwrap();
    // per-query windows: the gold object depends on the phase of t_p, which
    // a fixed shared window cannot expose
    let opts = EvalOptions {
        regime: Regime::GroundTruth,
        ..EvalOptions::default()
    };
    let metrics = evaluate(&model, &split, &opts).unwrap();
    let secs = started.elapsed().as_secs_f64();
    println!(
        "  test MRR {:.4} (hits@1 {:.4}) after {} epochs in {secs:.1}s",
        metrics.mrr, metrics.hits1, report_t.epochs_run
    );
    report(5, "synthetic overfit", metrics.mrr >= 0.95 && secs < 300.0);
}

#[test]
fn criterion_6_reduced_dataset_check() {
    // Needs the ICEWS14 fact files, which are not bundled. Point
    // MTDM_ICEWS14 at a directory with stat/train/valid/test files (or put
    // them in data/ICEWS14) to enable this gate.
    let dir = std::env::var("MTDM_ICEWS14")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::path::PathBuf::from("data/ICEWS14"));
    if !dir.join("train.txt").exists() {
        println!("criterion 6 (reduced dataset check): SKIP (dataset not present at {})", dir.display());
        return;
    }
    let full = mtdm::graph::parse_dataset(&dir).unwrap();
    // first 50 train timestamps only
    let mut stamps: Vec<usize> = full.train.iter().map(|f| f.t).collect();
    stamps.sort_unstable();
    stamps.dedup();
    let cut = stamps.get(49).copied().unwrap_or(usize::MAX);
    let split = DatasetSplit {
        train: full.train.iter().filter(|f| f.t <= cut).copied().collect(),
        ..full
    };
    let cfg = ModelConfig::new(split.num_entities, split.num_relations * 2, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model: ModelState<f32> = ModelState::init(cfg, &mut rng);
    let tc = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let report_t = train(&mut model, &split, &tc, None).unwrap();
    let mrr = report_t.best_valid_mrr.unwrap_or(0.0);
    println!("  reduced-run validation MRR {mrr:.4}");
    report(6, "reduced dataset check", mrr >= 0.15);
}

#[test]
fn criterion_7_ablation_wiring() {
    let mut ok = true;
    let model = small_model(7, 4, 4, 3);
    let graph = small_graph();
    let deep = deep_memory_facts(&graph, 1);
    let deep_adj = Rc::new(SparseAdjacency::from_facts(deep.iter(), 4, 4).unwrap());
    let run = |ablation: Ablation, mode: TrenMode| {
        let mut tape: Tape<f64> = Tape::new();
        let vars = ModelVars::register(&mut tape, &model);
        let spec = ForwardSpec {
            window: &graph.snapshots[1..3],
            deep_adj: Rc::clone(&deep_adj),
            mode,
            hard_gate: false,
            ablation,
        };
        let hidden = forward(&mut tape, &vars, &spec).unwrap();
        (tape, hidden)
    };

    let (_, h) = run(Ablation { no_tren: true, ..Ablation::default() }, TrenMode::Standard);
    ok &= h.tren_steps.is_empty() && h.h_tren_final == h.h_deep;

    let (_, h) = run(Ablation { no_tln: true, ..Ablation::default() }, TrenMode::Standard);
    ok &= h.h_tln_struct.is_none() && h.u_soft.is_none() && h.h_fused == h.h_tren_final;

    let (t_dm, h_dm) = run(Ablation { no_dm: true, ..Ablation::default() }, TrenMode::Standard);
    let (t_base, h_base) = run(Ablation::default(), TrenMode::Standard);
    ok &= t_dm.value(h_dm.h_deep).data() != t_base.value(h_base.h_deep).data();

    let (_, h_rec) = run(Ablation::default(), TrenMode::Recurrent);
    ok &= h_rec.res_gcn_inputs[1] == h_rec.tren_steps[0];
    ok &= h_base.res_gcn_inputs[1] == h_base.h_deep;

    // the reset-gate ablation changes the numbers
    let (t_a, h_a) = run(Ablation { no_reset_gate: true, ..Ablation::default() }, TrenMode::Standard);
    ok &= t_a.value(h_a.h_tren_final).data() != t_base.value(h_base.h_tren_final).data();

    report(7, "ablation wiring", ok);
}

#[test]
fn criterion_8_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ok = true;

    for _ in 0..100 {
        // random dataset: 6 entities, 2 relations, 6 timestamps
        let mut facts = Vec::new();
        for t in 0..6 {
            for _ in 0..4 {
                facts.push(Fact {
                    s: rng.gen_range(0..6),
                    r: rng.gen_range(0..2),
                    o: rng.gen_range(0..6),
                    t,
                });
            }
        }
        let split = DatasetSplit {
            train: facts.iter().filter(|f| f.t < 4).copied().collect(),
            valid: facts.iter().filter(|f| f.t == 4).copied().collect(),
            test: facts.iter().filter(|f| f.t == 5).copied().collect(),
            num_entities: 6,
            num_relations: 2,
        };
        let t_p = rng.gen_range(4..6);
        let model = small_model(rng.gen(), 6, 4, 3);
        let subject = rng.gen_range(0..6);
        let relation = rng.gen_range(0..4);

        let score = |split: &DatasetSplit| {
            let opts = EvalOptions {
                regime: Regime::GroundTruth,
                target: Target::Test,
                window: 3,
                ..EvalOptions::default()
            };
            let mut ranked =
                mtdm::eval::explain_query(&model, split, subject, relation, t_p, 6, &opts)
                    .unwrap();
            ranked.sort_by_key(|r| r.entity);
            ranked.iter().map(|r| r.score).collect::<Vec<f64>>()
        };
        let before = score(&split);

        // perturb a fact at or after the prediction timestamp
        let mut perturbed = split.clone();
        if rng.gen_bool(0.5) {
            perturbed.test.push(Fact {
                s: rng.gen_range(0..6),
                r: rng.gen_range(0..2),
                o: rng.gen_range(0..6),
                t: rng.gen_range(t_p..6),
            });
        } else {
            let at_or_after: Vec<usize> = perturbed
                .test
                .iter()
                .enumerate()
                .filter(|(_, f)| f.t >= t_p)
                .map(|(i, _)| i)
                .collect();
            if let Some(&i) = at_or_after.first() {
                perturbed.test[i].o = (perturbed.test[i].o + 1) % 6;
            }
        }
        let after = score(&perturbed);
        ok &= before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    report(8, "causality", ok);
}

#[test]
fn criterion_9_determinism_and_persistence() {
    let mut ok = true;
    let split = synthetic::generate();

    // fixed seed: bit-identical epoch-0 loss across independent runs
    let run_epoch0 = || {
        let mut cfg = ModelConfig::new(split.num_entities, split.num_relations * 2, 8);
        cfg.rgcn_bases = 4;
        cfg.channels = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model: ModelState<f32> = ModelState::init(cfg, &mut rng);
        let tc = TrainConfig {
            epochs: 1,
            skip_validation: true,
            ..TrainConfig::default()
        };
        let report_t = train(&mut model, &split, &tc, None).unwrap();
        (report_t.records[0].loss_total, model)
    };
    let (loss_a, model) = run_epoch0();
    let (loss_b, _) = run_epoch0();
    ok &= loss_a.to_bits() == loss_b.to_bits();

    // checkpoint round-trip: bit-exact parameters and identical metrics
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model).unwrap();
    let loaded: ModelState<f32> = load_checkpoint(&path).unwrap();
    let params_equal = model
        .named_params()
        .iter()
        .zip(loaded.named_params())
        .all(|((_, a), (_, b))| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    ok &= params_equal;
    let m1 = evaluate(&model, &split, &EvalOptions::default()).unwrap();
    let m2 = evaluate(&loaded, &split, &EvalOptions::default()).unwrap();
    ok &= m1 == m2;

    report(9, "determinism and persistence", ok);
}

// Decoder scores must see only history: queries at the first test timestamp
// cannot read the snapshot being predicted even in the ground-truth regime.
#[test]
fn scores_ignore_the_predicted_snapshot() {
    let split = synthetic::generate();
    let model = small_model(10, synthetic::ENTITIES, synthetic::RELATIONS * 2, 3);
    let opts = EvalOptions {
        regime: Regime::GroundTruth,
        ..EvalOptions::default()
    };
    let t_p = 27;
    let a = mtdm::eval::explain_query(&model, &split, 0, 0, t_p, 20, &opts).unwrap();
    let mut altered = split.clone();
    for f in altered.test.iter_mut().filter(|f| f.t == t_p) {
        f.o = (f.o + 3) % synthetic::ENTITIES;
    }
    let b = mtdm::eval::explain_query(&model, &altered, 0, 0, t_p, 20, &opts).unwrap();
    let key = |v: &[mtdm::eval::RankedEntity]| {
        let mut pairs: Vec<(usize, u64)> = v.iter().map(|r| (r.entity, r.score.to_bits())).collect();
        pairs.sort();
        pairs
    };
    assert_eq!(key(&a), key(&b));
}
