//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cmr_core::binio::HASH_LEN;
use cmr_core::contrastive::{
    build_batch_masks, compute_gradients, fc_similarity_partials, forward_batch, loss_fc_from_similarities,
    loss_total, queue_entries, BatchExample, EntityQueue, QueueEntry,
};
use cmr_core::dataset::Dataset;
use cmr_core::encoders::{
    checkpoint_bytes, dot, load_checkpoint, log_similarity, parse_checkpoint, save_checkpoint, EncoderParams,
    HyperParams,
};
use cmr_core::eval::{evaluate, filtered_rank, EvalMode, Metrics, Predictor, TieMode};
use cmr_core::kg::{EntityId, FilterIndex, RelationId, Triple};
use cmr_core::pipeline::{
    cmd_eval, cmd_gen_synthetic, cmd_memorize, cmd_sweep, cmd_train, Artifacts, ExperimentConfig, MetricsReport,
};
use cmr_core::retrieval::{knn_search, DistanceKind, Distribution, InferenceConfig, NeighborHit};
use cmr_core::stores::{
    entity_store_bytes, knowledge_store_bytes, load_entity_store, load_knowledge_store, save_entity_store,
    save_knowledge_store, EntityStore, KnowledgeStore,
};
use cmr_core::CmrError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reference_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json");
    ExperimentConfig::load(&path).expect("reference config")
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

struct Instance {
    params: EncoderParams,
    queries: Vec<Vec<f32>>,
    visuals: Vec<Vec<f32>>,
    texts: Vec<Vec<f32>>,
    triples: Vec<Triple>,
    train: FilterIndex,
    queue: EntityQueue,
    step: u64,
    temperature: f64,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn examples<'a>(
    triples: &[Triple],
    q: &'a [Vec<f32>],
    v: &'a [Vec<f32>],
    t: &'a [Vec<f32>],
) -> Vec<BatchExample<'a>> {
    (0..triples.len())
        .map(|i| BatchExample {
            triple: triples[i],
            query: &q[i],
            visual: &v[i],
            text: &t[i],
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let hp = HyperParams {
        embed_dim: rng.random_range(2..=16),
        prefix_len: rng.random_range(1..=4),
        desc_tokens: rng.random_range(1..=4),
        temperature: rng.random_range(0.1..1.0),
        hidden: rng.random_range(2..=12),
    };
    let text_dim = rng.random_range(2..=10);
    let visual_dim = rng.random_range(2..=8);
    let mut params = EncoderParams::init(&hp, text_dim, visual_dim, rng.random()).unwrap();
    // Nonzero biases keep every unit away from the zero-norm fallback.
    for (_, _, t) in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let batch = rng.random_range(2..=8);
    let queue_batches = rng.random_range(1..=(16 / batch).max(1));
    let mut queue = EntityQueue::new(queue_batches);
    let mut seen = Vec::new();
    let mut step = 0;
    loop {
        let triples: Vec<Triple> = (0..batch)
            .map(|_| {
                Triple::new(
                    EntityId(rng.random_range(0..6)),
                    RelationId(rng.random_range(0..2)),
                    EntityId(rng.random_range(0..6)),
                )
            })
            .collect();
        let queries: Vec<Vec<f32>> = (0..batch).map(|_| rand_vec(rng, text_dim)).collect();
        let visuals: Vec<Vec<f32>> = (0..batch).map(|_| rand_vec(rng, visual_dim)).collect();
        let texts: Vec<Vec<f32>> = (0..batch).map(|_| rand_vec(rng, text_dim)).collect();
        seen.extend(triples.iter().copied());
        let ex = examples(&triples, &queries, &visuals, &texts);
        let fwd = forward_batch(&params, &ex).unwrap();
        queue.push_batch(step, queue_entries(&ex, &fwd));
        if step as usize + 1 == queue_batches {
            // Half the sampled triples act as train facts so masks bite.
            let train = FilterIndex::from_triples(seen.iter().step_by(2));
            return Instance {
                params,
                queries,
                visuals,
                texts,
                triples,
                train,
                queue,
                step,
                temperature: hp.temperature,
            };
        }
        step += 1;
    }
}

fn flatten(p: &EncoderParams) -> Vec<f64> {
    p.tensors().into_iter().flat_map(|(_, _, t)| t.to_vec()).collect()
}

fn set_coord(p: &mut EncoderParams, mut idx: usize, value: f64) {
    for (_, _, t) in p.tensors_mut() {
        if idx < t.len() {
            t[idx] = value;
            return;
        }
        idx -= t.len();
    }
    panic!("coordinate out of range");
}

/// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over all parameters.
fn gradcheck(inst: &Instance) -> f64 {
    let ex = examples(&inst.triples, &inst.queries, &inst.visuals, &inst.texts);
    let masks = build_batch_masks(&inst.triples, inst.step, &inst.queue, &inst.train);
    let (_, grads) = compute_gradients(&inst.params, &ex, &inst.queue, &masks, inst.temperature).unwrap();
    let analytic = flatten(&grads);
    let base = flatten(&inst.params);
    let h = 1e-4;
    let mut p = inst.params.clone();
    let mut numeric = vec![0.0; base.len()];
    for i in 0..base.len() {
        set_coord(&mut p, i, base[i] + h);
        let up = loss_total(&p, &ex, &inst.queue, &masks, inst.temperature).unwrap().total;
        set_coord(&mut p, i, base[i] - h);
        let down = loss_total(&p, &ex, &inst.queue, &masks, inst.temperature).unwrap().total;
        set_coord(&mut p, i, base[i]);
        numeric[i] = (up - down) / (2.0 * h);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        worst = worst.max(gradcheck(&random_instance(&mut rng)));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-3 && secs < 30.0,
        format!("20 instances, max relative error {worst:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// 2. Similarity decomposition

fn random_entity_parts(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let hp = HyperParams {
        embed_dim: rng.random_range(2..=64),
        temperature: rng.random_range(0.01..1.0),
        ..Default::default()
    };
    let params = EncoderParams::init(&hp, 12, 8, rng.random()).unwrap();
    let enc = params
        .encode_entity(&rand_vec(rng, 8), &rand_vec(rng, 12))
        .unwrap();
    let q = params.encode_query(&rand_vec(rng, 12)).unwrap();
    (q, enc.e_v, enc.e_d, hp.temperature)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (q, e_v, e_d, tau) = random_entity_parts(&mut rng);
        let sum: Vec<f64> = e_v.iter().zip(&e_d).map(|(a, b)| a + b).collect();
        let lhs = log_similarity(&q, &sum, tau);
        let rhs = log_similarity(&q, &e_v, tau) + log_similarity(&q, &e_d, tau);
        // exp(lhs) / exp(rhs) − 1
        worst = worst.max((lhs - rhs).exp_m1().abs());
    }
    check(worst < 1e-9, format!("1000 draws, max relative deviation {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. Sign of the fusion-loss partials

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut worst_fd: f64 = 0.0;
    for _ in 0..1000 {
        let (q, e_v, e_d, tau) = random_entity_parts(&mut rng);
        let modal = [
            (dot(&q, &e_v) / tau).exp(),
            (dot(&q, &e_d) / tau).exp(),
        ];
        let n_neg = rng.random_range(1..=16);
        let negs: Vec<f64> = (0..n_neg)
            .map(|_| {
                let e: Vec<f64> = (0..q.len()).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dot(&e, &e).sqrt();
                (dot(&q, &e) / norm / tau).exp()
            })
            .collect();
        let partials = fc_similarity_partials(&modal, &negs);
        for (h, &g) in partials.iter().enumerate() {
            if !(g < 0.0) {
                violations += 1;
            }
            let eps = modal[h] * 1e-6;
            let mut up = modal;
            up[h] += eps;
            let mut down = modal;
            down[h] -= eps;
            let fd = (loss_fc_from_similarities(&up, &negs) - loss_fc_from_similarities(&down, &negs)) / (2.0 * eps);
            worst_fd = worst_fd.max((fd - g).abs() / g.abs().max(1e-300));
        }
    }
    check(
        violations == 0 && worst_fd < 1e-4,
        format!("1000 instances, {violations} non-negative partials, max deviation from finite differences {worst_fd:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Retrieval exactness

fn random_unit_f32(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = dot(&v, &v).sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 16;
    let n = 1000;
    let keys: Vec<Vec<f32>> = (0..n).map(|_| random_unit_f32(&mut rng, d)).collect();
    let ks = KnowledgeStore {
        dim: d,
        keys: keys.iter().flatten().copied().collect(),
        values: (0..n).map(|_| EntityId(rng.random_range(0..200))).collect(),
        source_keys: (0..n)
            .map(|_| (EntityId(rng.random_range(0..300)), RelationId(rng.random_range(0..4))))
            .collect(),
        encoder_hash: [0; HASH_LEN],
    };
    let mut mismatches = Vec::new();
    let mut cosine_mismatches = 0;
    let mut checked = 0;
    for trial in 0..50 {
        let q: Vec<f64> = random_unit_f32(&mut rng, d).iter().map(|&x| f64::from(x)).collect();
        let exclude = (trial % 2 == 0).then(|| ks.source_keys[rng.random_range(0..n)]);
        for &k in &[1usize, 8, 32] {
            checked += 1;
            let got = knn_search(&ks, &q, k, exclude, DistanceKind::Euclidean);
            // Linear scan: every distance, one full sort, first k.
            let mut all: Vec<(f64, u32, usize)> = Vec::new();
            for row in 0..n {
                if Some(ks.source_keys[row]) == exclude {
                    continue;
                }
                let d2: f64 = q
                    .iter()
                    .zip(&keys[row])
                    .map(|(a, &b)| (a - f64::from(b)).powi(2))
                    .sum();
                all.push((d2.sqrt(), ks.values[row].0, row));
            }
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let want: Vec<usize> = all.iter().take(k).map(|x| x.2).collect();
            let got_rows: Vec<usize> = got.iter().map(|h: &NeighborHit| h.row).collect();
            if got_rows != want {
                mismatches.push((trial, k));
            }
            let mut by_cos: Vec<(f64, usize)> = (0..n)
                .filter(|&row| Some(ks.source_keys[row]) != exclude)
                .map(|row| {
                    let key: Vec<f64> = keys[row].iter().map(|&x| f64::from(x)).collect();
                    (dot(&q, &key) / dot(&key, &key).sqrt(), row)
                })
                .collect();
            by_cos.sort_by(|a, b| b.0.total_cmp(&a.0));
            let cos_rows: Vec<usize> = by_cos.iter().take(k).map(|x| x.1).collect();
            if cos_rows != got_rows {
                cosine_mismatches += 1;
            }
        }
    }
    check(
        mismatches.is_empty() && cosine_mismatches == 0,
        format!(
            "{checked} searches over {n} unit keys, k in {{1, 8, 32}}: {} scan mismatches, {cosine_mismatches} cosine-order mismatches",
            mismatches.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Ranking oracle

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n_ent = 50;
    let mut triples = BTreeSet::new();
    while triples.len() < 200 {
        triples.insert((rng.random_range(0..n_ent), rng.random_range(0..4u32), rng.random_range(0..n_ent)));
    }
    let triples: Vec<Triple> = triples
        .into_iter()
        .map(|(h, r, t)| Triple::new(EntityId(h), RelationId(r), EntityId(t)))
        .collect();
    let filter = FilterIndex::from_triples(&triples);
    let mut known: BTreeMap<(u32, u32), BTreeSet<u32>> = BTreeMap::new();
    for t in &triples {
        known.entry((t.head.0, t.relation.0)).or_default().insert(t.tail.0);
    }

    let mut ranks = Vec::new();
    let mut oracle_ranks = Vec::new();
    for t in &triples {
        // Few distinct levels so ties are everywhere, including at the target.
        let raw: Vec<f64> = (0..n_ent).map(|_| f64::from(rng.random_range(0..6u32))).collect();
        let z: f64 = raw.iter().sum::<f64>().max(1.0);
        let dist = Distribution(raw.iter().map(|v| v / z).collect());
        ranks.push(filtered_rank(&dist, t.query(), t.tail, &filter, TieMode::Mean).unwrap().rank);

        // Oracle: sort the surviving candidates, locate the target's tie block.
        let others = &known[&(t.head.0, t.relation.0)];
        let mut cands: Vec<(f64, u32)> = (0..n_ent as u32)
            .filter(|e| *e == t.tail.0 || !others.contains(e))
            .map(|e| (dist.0[e as usize], e))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let p = dist.0[t.tail.index()];
        let first = cands.iter().position(|c| c.0 == p).unwrap();
        let last = cands.iter().rposition(|c| c.0 == p).unwrap();
        oracle_ranks.push(1.0 + (first + last) as f64 / 2.0);
    }
    let got = Metrics::from_ranks(&ranks);
    let n = oracle_ranks.len() as f64;
    let mut mrr = 0.0;
    let mut hits = [0usize; 3];
    for &r in &oracle_ranks {
        mrr += 1.0 / r;
        for (slot, k) in hits.iter_mut().zip([1.0, 3.0, 10.0]) {
            if r <= k {
                *slot += 1;
            }
        }
    }
    let want = [mrr / n, hits[0] as f64 / n, hits[1] as f64 / n, hits[2] as f64 / n];
    let have = [got.mrr, got.hits1, got.hits3, got.hits10];
    let tied = ranks.iter().filter(|r| r.fract() != 0.0).count();
    check(
        ranks == oracle_ranks && have == want,
        format!(
            "200 triples over 50 entities ({tied} targets inside tie blocks): MRR {:.4} Hits@1/3/10 {:.3}/{:.3}/{:.3} match oracle exactly",
            have[0], have[1], have[2], have[3]
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared trained run for criteria 6 and 8.

struct TrainedRun {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    report: MetricsReport,
    elapsed: Duration,
}

fn run_pipeline(cfg: &ExperimentConfig) -> cmr_core::Result<MetricsReport> {
    cmd_gen_synthetic(cfg)?;
    cmd_train(cfg)?;
    cmd_memorize(cfg)?;
    cmd_sweep(cfg)?;
    Ok(cmd_eval(cfg)?.0)
}

fn trained_run() -> &'static TrainedRun {
    static RUN: OnceLock<TrainedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = reference_config().with_seed(0);
        cfg.output_dir = dir.path().to_path_buf();
        let start = Instant::now();
        let report = run_pipeline(&cfg).expect("synthetic pipeline");
        TrainedRun {
            elapsed: start.elapsed(),
            _dir: dir,
            cfg,
            report,
        }
    })
}

struct Loaded {
    ds: Dataset,
    params: EncoderParams,
    ks: KnowledgeStore,
    es: EntityStore,
}

fn load_run(run: &TrainedRun) -> Loaded {
    let art = Artifacts::new(&run.cfg.output_dir);
    Loaded {
        ds: Dataset::load(&run.cfg.dataset_path(), &run.cfg.featurizer).unwrap(),
        params: load_checkpoint(&art.checkpoint()).unwrap(),
        ks: load_knowledge_store(&art.knowledge_store(), None).unwrap(),
        es: load_entity_store(&art.entity_store(), None).unwrap(),
    }
}

// ---------------------------------------------------------------------------
// 6. Interpolation boundaries

fn criterion_6() -> Outcome {
    let run = trained_run();
    let l = load_run(run);
    let predictor = Predictor {
        params: &l.params,
        ks: &l.ks,
        es: &l.es,
        vocab: &l.ds.vocab,
        features: &l.ds.features,
    };
    let triples: Vec<Triple> = l.ds.split.valid.iter().chain(&l.ds.split.test).copied().collect();
    let mut worst_metric: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut distributions = 0;
    for k in [1, 8, 32] {
        let at = |lambda| InferenceConfig {
            k,
            lambda,
            ..run.cfg.inference.clone()
        };
        let score = |lambda, mode| evaluate(&predictor, &triples, &at(lambda), mode, &l.ds.filter).unwrap();
        for (a, b) in [
            (score(0.0, EvalMode::Full), score(0.5, EvalMode::EsOnly)),
            (score(1.0, EvalMode::Full), score(0.5, EvalMode::KsOnly)),
        ] {
            for (x, y) in [
                (a.mrr, b.mrr),
                (a.hits1, b.hits1),
                (a.hits3, b.hits3),
                (a.hits10, b.hits10),
                (a.mean_rank, b.mean_rank),
            ] {
                worst_metric = worst_metric.max((x - y).abs());
            }
        }
        for t in &triples {
            for lambda in [0.0, 0.3, 0.95, 1.0] {
                for mode in [EvalMode::Full, EvalMode::EsOnly, EvalMode::KsOnly] {
                    let d = predictor.distribution(t.head, t.relation, &at(lambda), mode).unwrap();
                    worst_sum = worst_sum.max((d.sum() - 1.0).abs());
                    distributions += 1;
                }
            }
        }
    }
    check(
        worst_metric <= 1e-12 && worst_sum <= 1e-6,
        format!(
            "max metric gap {worst_metric:.1e} at lambda in {{0, 1}}; {distributions} distributions, max |sum - 1| {worst_sum:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Mask and queue soundness

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut set = BTreeSet::new();
    while set.len() < 100 {
        set.insert((rng.random_range(0..12u32), rng.random_range(0..3u32), rng.random_range(0..12u32)));
    }
    let mut train: Vec<Triple> = set
        .into_iter()
        .map(|(h, r, t)| Triple::new(EntityId(h), RelationId(r), EntityId(t)))
        .collect();
    train.shuffle(&mut rng);
    let index = FilterIndex::from_triples(&train);
    let fact = |h: EntityId, r: RelationId, t: EntityId| train.iter().any(|x| (x.head, x.relation, x.tail) == (h, r, t));

    let capacity = 3;
    let mut queue = EntityQueue::new(capacity);
    let mut pushed: Vec<(u64, Vec<QueueEntry>)> = Vec::new();
    let mut bad_forward = 0;
    let mut bad_reverse = 0;
    let mut bad_queue = 0;
    let mut usable_seen = 0;
    let batch_size = 8;
    for (step, batch) in train.chunks(batch_size).enumerate() {
        let step = step as u64;
        let entries: Vec<QueueEntry> = batch
            .iter()
            .enumerate()
            .map(|(row, t)| QueueEntry {
                embedding: vec![step as f64, row as f64],
                v_bar: vec![0.0, 0.0],
                entity: t.tail,
                row,
            })
            .collect();
        queue.push_batch(step, entries.clone());
        pushed.push((step, entries));

        // The queue must be the last `capacity` batches, oldest first.
        let expected: Vec<(u64, QueueEntry)> = pushed[pushed.len().saturating_sub(capacity)..]
            .iter()
            .flat_map(|(s, es)| es.iter().map(move |e| (*s, e.clone())))
            .collect();
        let actual: Vec<(u64, QueueEntry)> = queue.slots().map(|s| (s.step, s.entry.clone())).collect();
        if actual != expected {
            bad_queue += 1;
        }

        let masks = build_batch_masks(batch, step, &queue, &index);
        for (i, anchor) in batch.iter().enumerate() {
            for (j, (s, e)) in expected.iter().enumerate() {
                let own = *s == step && e.row == i;
                let should = !own && !fact(anchor.head, anchor.relation, e.entity);
                if masks.forward.get(i, j) != should {
                    bad_forward += 1;
                }
                usable_seen += usize::from(should);
            }
            for (j, cand) in batch.iter().enumerate() {
                let should = i != j && !fact(cand.head, cand.relation, anchor.tail);
                if masks.reverse.get(i, j) != should {
                    bad_reverse += 1;
                }
            }
        }
    }
    check(
        bad_forward == 0 && bad_reverse == 0 && bad_queue == 0,
        format!(
            "100 train triples, {} batches: {bad_forward} forward and {bad_reverse} reverse mask errors ({usable_seen} usable negatives checked), {bad_queue} queue-state errors",
            pushed.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Directional reproduction on the synthetic dataset

fn criterion_8() -> Outcome {
    let run = trained_run();
    let r = &run.report;
    let l = load_run(run);
    let touches_unseen = l
        .ds
        .split
        .test
        .iter()
        .all(|t| l.ds.split.unseen_entities.contains(&t.head) || l.ds.split.unseen_entities.contains(&t.tail));

    // Query embeddings of every triple, grouped by target.
    let all: Vec<Triple> = l.ds.split.all_triples().copied().collect();
    let mut emb = Vec::with_capacity(all.len());
    for t in &all {
        let x = l.ds.features.query(&l.ds.vocab, t.head, t.relation).unwrap();
        emb.push(l.params.encode_query(&x.values).unwrap());
    }
    let (mut same, mut same_n, mut cross, mut cross_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            if all[i].query() == all[j].query() {
                continue;
            }
            let c = dot(&emb[i], &emb[j]);
            if all[i].tail == all[j].tail {
                same += c;
                same_n += 1;
            } else {
                cross += c;
                cross_n += 1;
            }
        }
    }
    let (same, cross) = (same / same_n as f64, cross / cross_n as f64);
    let secs = run.elapsed.as_secs_f64();
    let a = r.full.hits1 >= 0.8;
    let b = r.full.mrr >= r.es_only.mrr;
    let c = same > cross;
    check(
        touches_unseen && a && b && c && secs < 120.0,
        format!(
            "(a) test Hits@1 {:.3} at k={} lambda={} over {} unseen-entity queries; (b) MRR full {:.3} vs es_only {:.3} (ks_only {:.3}); (c) query cosine shared-target {same:.3} vs cross-target {cross:.3}; {secs:.1}s",
            r.full.hits1, r.k, r.lambda, r.full.count, r.full.mrr, r.es_only.mrr, r.ks_only.mrr
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Persistence

fn flip(path: &Path, offset: usize) -> PathBuf {
    let mut bytes = fs::read(path).unwrap();
    let at = offset.min(bytes.len() - 1);
    bytes[at] ^= 0x40;
    let out = path.with_extension("corrupt");
    fs::write(&out, bytes).unwrap();
    out
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let hp = HyperParams {
        embed_dim: 16,
        hidden: 24,
        ..Default::default()
    };
    let mut params = EncoderParams::init(&hp, 20, 10, 9).unwrap();
    params.round_to_f32();
    let ckpt = dir.path().join("checkpoint.cmrp");
    save_checkpoint(&params, &ckpt).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    let ckpt_ok = loaded == params && checkpoint_bytes(&loaded) == fs::read(&ckpt).unwrap();

    let n = 40;
    let ks = KnowledgeStore {
        dim: 16,
        keys: (0..n).flat_map(|_| random_unit_f32(&mut rng, 16)).collect(),
        values: (0..n).map(|i| EntityId(i as u32 % 7)).collect(),
        source_keys: (0..n).map(|i| (EntityId(i as u32), RelationId(i as u32 % 3))).collect(),
        encoder_hash: [7; HASH_LEN],
    };
    let es = EntityStore {
        dim: 16,
        keys: (0..n).flat_map(|_| random_unit_f32(&mut rng, 16)).collect(),
        encoder_hash: [7; HASH_LEN],
    };
    let ks_path = dir.path().join("ks.cmrs");
    let es_path = dir.path().join("es.cmrs");
    save_knowledge_store(&ks, &ks_path).unwrap();
    save_entity_store(&es, &es_path).unwrap();
    let ks2 = load_knowledge_store(&ks_path, Some(16)).unwrap();
    let es2 = load_entity_store(&es_path, Some(16)).unwrap();
    let stores_ok = ks2 == ks
        && es2 == es
        && knowledge_store_bytes(&ks2) == fs::read(&ks_path).unwrap()
        && entity_store_bytes(&es2) == fs::read(&es_path).unwrap();

    let mut rejected = 0;
    let mut attempts = 0;
    for offset in [0usize, 5, 40, 200, 1000, usize::MAX] {
        attempts += 3;
        if matches!(parse_checkpoint(&fs::read(flip(&ckpt, offset)).unwrap()), Err(CmrError::Integrity(_))) {
            rejected += 1;
        }
        if matches!(load_knowledge_store(&flip(&ks_path, offset), None), Err(CmrError::Integrity(_))) {
            rejected += 1;
        }
        if matches!(load_entity_store(&flip(&es_path, offset), None), Err(CmrError::Integrity(_))) {
            rejected += 1;
        }
    }
    let truncated = {
        let bytes = fs::read(&ks_path).unwrap();
        let short = dir.path().join("short.cmrs");
        fs::write(&short, &bytes[..bytes.len() / 2]).unwrap();
        load_knowledge_store(&short, None).is_err()
    };
    check(
        ckpt_ok && stores_ok && rejected == attempts && truncated,
        format!(
            "checkpoint roundtrip {ckpt_ok}, store roundtrips {stores_ok}; {rejected}/{attempts} single-byte corruptions rejected by hash; truncation rejected {truncated}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn criterion_10() -> Outcome {
    let mut outputs = Vec::new();
    let mut checkpoints = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = reference_config().with_seed(11);
        cfg.output_dir = dir.path().to_path_buf();
        cfg.train.max_epochs = 10;
        if let Err(e) = run_pipeline(&cfg) {
            return Err(format!("pipeline failed: {e}"));
        }
        let art = Artifacts::new(dir.path());
        outputs.push(fs::read(art.metrics_json()).unwrap());
        checkpoints.push(fs::read(art.checkpoint()).unwrap());
    }
    let parsed: serde_json::Value = serde_json::from_slice(&outputs[0]).map_err(|e| e.to_string())?;
    check(
        outputs[0] == outputs[1] && checkpoints[0] == checkpoints[1] && parsed["seed"] == 11,
        format!(
            "two seeded runs: metrics.json identical {} ({} bytes), checkpoints identical {}",
            outputs[0] == outputs[1],
            outputs[0].len(),
            checkpoints[0] == checkpoints[1]
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", criterion_1),
        ("similarity decomposition", criterion_2),
        ("fusion-loss partial sign", criterion_3),
        ("retrieval exactness", criterion_4),
        ("ranking oracle", criterion_5),
        ("interpolation boundaries", criterion_6),
        ("mask and queue soundness", criterion_7),
        ("synthetic directional reproduction", criterion_8),
        ("persistence", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(msg) => println!("criterion {:>2} PASS  {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {msg}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
