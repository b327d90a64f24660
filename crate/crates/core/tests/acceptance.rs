//! Acceptance checks. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use factsum::claimgen::corpus::{load_corpus, Corpus};
use factsum::claimgen::{synth_world, world_nli_pairs, ClaimRecord, Checkworthiness, IMAGE_FEATURE_DIM};
use factsum::encoding::tokenizer::EOS;
use factsum::encoding::{Perceiver, TokenSequence};
use factsum::fusion::{FusedInput, FusionParams};
use factsum::harness::metrics::{bleu, rouge_l, rouge_n, rouge_n_scores, verify_claims, Averaging, SummaryRecord};
use factsum::harness::pipeline::{corpus_vocab, synth_rl_run, training_items, SynthRunConfig};
use factsum::harness::RunConfig;
use factsum::model::MspModel;
use factsum::nn::{Optimizer, OptimizerKind};
use factsum::policy::{generate, sft_gradients, sft_step, PolicyConfig, SummaryPolicy, POLICY_PREFIX};
use factsum::ppo::{
    episode_loss, evaluate_tokens, train_schedule, Episode, PpoConfig, RunManifest, Stage, TrainContext, TrainData,
    TrainState,
};
use factsum::reward::{
    entailment_reward, kl_estimate, parse_quality_score, separable_corpus, total_reward, train_entailment_classifier,
    ClassifierConfig, EntailmentDistribution, QualityCritic, RewardBreakdown, RewardModel,
    DEFAULT_ETA,
};
use factsum::rng::{seeded, stream};
use factsum::tensor::{fd, Graph, Matrix, ParamId, ParamStore};
use factsum::{Error, Label};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed <= limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn reward_algebra() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let raw: [f64; 3] = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let z: f64 = raw.iter().sum();
        let raw = raw.map(|x| x / z);
        let d = EntailmentDistribution::from_array(raw).map_err(|e| e.to_string())?;
        for gt in Label::ALL {
            let r = entailment_reward(&d, gt);
            check((-0.5..=1.0).contains(&r), || format!("reward {r} out of range"))?;
            worst = worst.max((r - (1.5 * d.get(gt) - 0.5)).abs());
        }
    }
    check(worst <= 1e-12, || format!("max deviation from 1.5 P(gt) - 0.5 is {worst:e}"))?;
    let u = EntailmentDistribution::uniform();
    for gt in Label::ALL {
        check(entailment_reward(&u, gt) == 0.0, || format!("uniform reward for {gt} is not 0"))?;
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("max deviation {worst:.1e}, uniform exactly 0"))
}

fn total_reward_algebra() -> Outcome {
    let t = Instant::now();
    let cases = [
        (1.0, 1.0, 0.0, 0.2, 1.0),
        (0.5, 0.8, 1.0, 0.2, (0.8 + 0.5 - 0.2) / 2.0),
        (-0.5, 0.0, 2.0, 0.2, (-0.5 - 0.4) / 2.0),
        (0.25, 0.5, 0.5, 0.0, 0.375),
    ];
    for (e, q, kl, eta, want) in cases {
        let r = total_reward(e, q, kl, eta);
        check((r.r_total - want).abs() < 1e-15, || format!("r_total({e}, {q}, {kl}, {eta}) = {}", r.r_total))?;
    }
    check(DEFAULT_ETA == 0.2, || "default eta is not 0.2".into())?;
    check(PpoConfig::new(0.1, 1).eta == 0.2, || "PPO default eta is not 0.2".into())?;
    let cfg = RunConfig::parse(MINIMAL_CONFIG).map_err(|e| e.to_string())?;
    check(cfg.schedule.ppo.eta == 0.2, || "config default eta is not 0.2".into())?;
    let mut rng = seeded(2);
    for _ in 0..10_000 {
        let r = total_reward(rng.gen_range(-0.5..=1.0), rng.gen_range(0.0..=1.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..1.0));
        check(r.r_total <= 1.0, || format!("r_total {} above 1", r.r_total))?;
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok("substitutions exact, eta defaults 0.2, r_total <= 1 for kl >= 0".into())
}

fn tiny_policy(store: &mut ParamStore, vocab: usize, max_len: usize, seed: u64) -> SummaryPolicy {
    let cfg = PolicyConfig { vocab_size: vocab, dim: 4, heads: 1, ffn_hidden: 8, encoder_layers: 1, decoder_layers: 1, max_len };
    SummaryPolicy::init(store, cfg, &mut seeded(seed)).expect("policy")
}

fn fused(rows: usize, seed: u64) -> FusedInput {
    FusedInput { values: Matrix::uniform(rows, 4, 1.0, &mut seeded(seed)), claim_rows: 1 }
}

fn analytic_of(ids: &[ParamId], get: impl Fn(ParamId) -> Option<Matrix>) -> HashMap<ParamId, Matrix> {
    ids.iter().filter_map(|&id| get(id).map(|m| (id, m))).collect()
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut report = vec![];

    // SFT loss
    let mut store = ParamStore::new();
    let policy = tiny_policy(&mut store, 7, 4, 2);
    check(store.scalar_count() <= 2000, || format!("policy has {} parameters", store.scalar_count()))?;
    let batch = vec![(fused(3, 3), TokenSequence::new(vec![5, 3, EOS])), (fused(2, 4), TokenSequence::new(vec![6, EOS]))];
    let (grads, _) = sft_gradients(&batch, &policy, &store).map_err(|e| e.to_string())?;
    let ids: Vec<ParamId> = store.ids_with_prefix(POLICY_PREFIX).collect();
    let analytic = analytic_of(&ids, |id| grads.get(id).cloned());
    let err = fd::max_param_rel_error(&mut store, &ids, 1e-5, |s| sft_gradients(&batch, &policy, s).unwrap().1, &analytic);
    report.push(("sft", err));

    // cross_attend and project_concat
    let mut store = ParamStore::new();
    let p = FusionParams::init(&mut store, "fusion", 4, 1, 0.7, &mut seeded(5));
    let (claim, images, docs) =
        (Matrix::uniform(3, 4, 1.0, &mut seeded(31)), Matrix::uniform(4, 4, 1.0, &mut seeded(32)), Matrix::uniform(2, 4, 1.0, &mut seeded(33)));
    let target = Matrix::uniform(5, 4, 1.0, &mut seeded(34));
    let fusion_loss = |s: &ParamStore, project: bool| {
        let mut g = Graph::new();
        let c = g.input(claim.clone());
        let i = g.input(images.clone());
        let x_ic = p.cross_attend(&mut g, s, c, Some(i)).unwrap().out;
        let out = if project {
            let d = g.input(docs.clone());
            p.project_concat(&mut g, s, x_ic, d).unwrap()
        } else {
            x_ic
        };
        let rows = g.shape(out).0;
        let tg = g.input(target.slice_rows(0, rows));
        let diff = g.sub(out, tg);
        let sq = g.mul(diff, diff);
        let loss = g.sum(sq);
        (g, loss)
    };
    for (name, project) in [("cross_attend", false), ("project_concat", true)] {
        let (g, loss) = fusion_loss(&store, project);
        let grads = g.backward(loss);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let analytic = analytic_of(&ids, |id| grads.param(id).cloned());
        let err = fd::max_param_rel_error(&mut store, &ids, 1e-5, |s| {
            let (g, l) = fusion_loss(s, project);
            g.scalar(l)
        }, &analytic);
        report.push((name, err));
    }

    // merge_chunks over two chunks
    let mut store = ParamStore::new();
    let perceiver = Perceiver::init(&mut store, "encoding.documents", 3, 4, 1, &mut seeded(7));
    let chunks = [Matrix::uniform(5, 4, 1.0, &mut seeded(21)), Matrix::uniform(3, 4, 1.0, &mut seeded(22))];
    let weights = Matrix::uniform(3, 4, 1.0, &mut seeded(23));
    let merge_loss = |s: &ParamStore| {
        let mut g = Graph::new();
        let xs: Vec<_> = chunks.iter().map(|c| g.input(c.clone())).collect();
        let out = perceiver.forward(&mut g, s, &xs).unwrap().out;
        let w = g.input(weights.clone());
        let prod = g.mul(out, w);
        let sq = g.mul(prod, prod);
        let loss = g.sum(sq);
        (g, loss)
    };
    let (g, loss) = merge_loss(&store);
    let grads = g.backward(loss);
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    check(store.scalar_count() <= 2000, || "perceiver too large".into())?;
    let analytic = analytic_of(&ids, |id| grads.param(id).cloned());
    let err = fd::max_param_rel_error(&mut store, &ids, 1e-5, |s| {
        let (g, l) = merge_loss(s);
        g.scalar(l)
    }, &analytic);
    report.push(("merge_chunks", err));

    // PPO surrogate with ratios on both sides of the clip range
    let mut store = ParamStore::new();
    let policy = tiny_policy(&mut store, 7, 4, 3);
    let input = fused(3, 0);
    let tokens = vec![5, 3, 6, 2];
    let (mut lp, values) = evaluate_tokens(&policy, &store, &input, &tokens).map_err(|e| e.to_string())?;
    lp[0] -= 0.5;
    lp[1] += 0.05;
    lp[2] += 0.6;
    let ep = Episode {
        index: 0,
        item: 0,
        claim_id: "c".into(),
        sample: factsum::policy::SummarySample { tokens, ref_logprobs: lp.clone(), logprobs: lp, text: String::new() },
        reward: RewardBreakdown { r_entail: 0.0, r_quality: 0.0, kl_estimate: 0.0, r_total: 0.0, eta: 0.2 },
        values,
        advantages: vec![0.0; 4],
        returns: vec![0.3, -0.1, 0.2, 0.5],
    };
    let adv = vec![0.8, -0.6, 0.4, -1.1];
    let cfg = PpoConfig { entropy_coef: 0.01, value_coef: 0.0, ..PpoConfig::new(0.1, 1) };
    let analytic = episode_loss(&policy, &store, &input, &ep, &adv, &cfg, 1.0).map_err(|e| e.to_string())?.grads.into_params();
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    let err = fd::max_param_rel_error(&mut store, &ids, 1e-5, |s| episode_loss(&policy, s, &input, &ep, &adv, &cfg, 1.0).unwrap().loss, &analytic);
    report.push(("ppo_surrogate", err));

    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = report.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst <= 1e-4, || format!("relative error above 1e-4: {detail}"))?;
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(detail)
}

fn kl_estimator() -> Outcome {
    let t = Instant::now();
    // vocabulary: pad, bos (never emitted), eos, 3, 4, 5; at most two tokens
    let mut active = ParamStore::new();
    let policy = tiny_policy(&mut active, 6, 2, 11);
    let mut reference = ParamStore::new();
    tiny_policy(&mut reference, 6, 2, 12);
    let input = fused(3, 13);

    let mut rng = seeded(1);
    for _ in 0..50 {
        let s = generate(&input, &policy, &active, &active.clone(), None, 1.0, &mut rng).map_err(|e| e.to_string())?;
        check(kl_estimate(&s) == 0.0, || format!("self KL estimate {}", kl_estimate(&s)))?;
    }

    let mem_p = policy.memory(&active, &input).map_err(|e| e.to_string())?;
    let mem_q = policy.memory(&reference, &input).map_err(|e| e.to_string())?;
    let mut exact = 0.0;
    let mut total_p = 0.0;
    let p1 = policy.next_token_distribution(&active, &mem_p, &[]);
    let q1 = policy.next_token_distribution(&reference, &mem_q, &[]);
    for a in 2..6u32 {
        let (pa, qa) = (p1[a as usize], q1[a as usize]);
        if a == EOS {
            exact += pa * (pa / qa).ln();
            total_p += pa;
            continue;
        }
        let p2 = policy.next_token_distribution(&active, &mem_p, &[a]);
        let q2 = policy.next_token_distribution(&reference, &mem_q, &[a]);
        for b in 2..6usize {
            let (p, q) = (pa * p2[b], qa * q2[b]);
            exact += p * (p / q).ln();
            total_p += p;
        }
    }
    check((total_p - 1.0).abs() < 1e-9, || format!("enumerated mass {total_p}"))?;

    let n = 10_000;
    let draws: Vec<f64> = (0..n)
        .map(|i| kl_estimate(&generate(&input, &policy, &active, &reference, None, 1.0, &mut stream(5, i)).unwrap()))
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    check((mean - exact).abs() <= 3.0 * se, || format!("mean {mean:.5} vs exact {exact:.5}, se {se:.5}"))?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("self estimate 0; sample mean {mean:.4} vs exact {exact:.4} (se {se:.4})"))
}

fn copy_task_run() -> (f64, Vec<f64>) {
    let (vocab, dim) = (13, 16);
    let table = Matrix::uniform(vocab, dim, 1.0, &mut seeded(99));
    let mut store = ParamStore::new();
    let cfg = PolicyConfig { vocab_size: vocab, dim, heads: 1, ffn_hidden: 2 * dim, encoder_layers: 2, decoder_layers: 2, max_len: 8 };
    let policy = SummaryPolicy::init(&mut store, cfg, &mut seeded(1)).expect("policy");
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 }, 0.03);
    let mut losses = vec![];
    for step in 0..500u64 {
        let mut rng = stream(7, step);
        let batch: Vec<_> = (0..16)
            .map(|_| {
                let ids: Vec<u32> = (0..6).map(|_| rng.gen_range(5..vocab as u32)).collect();
                let mut m = Matrix::zeros(6, dim);
                for (r, &i) in ids.iter().enumerate() {
                    m.row_mut(r).copy_from_slice(table.row(i as usize));
                }
                let mut target = ids[..3].to_vec();
                target.push(EOS);
                (FusedInput { values: m, claim_rows: 0 }, TokenSequence::new(target))
            })
            .collect();
        losses.push(sft_step(&batch, &policy, &mut store, &mut opt, |_| true, step).expect("sft step"));
    }
    (*losses.last().expect("steps"), losses)
}

fn sft_convergence() -> Outcome {
    let t = Instant::now();
    let (last, a) = copy_task_run();
    let (_, b) = copy_task_run();
    check(a == b, || "two runs with the same seed differ".into())?;
    check(last < 0.1, || format!("loss after 500 steps {last:.4}"))?;
    within(t.elapsed(), Duration::from_secs(300))?;
    Ok(format!("loss {:.3} -> {last:.4} in 500 steps, bitwise reproducible", a[0]))
}

fn classifier_accuracy() -> Outcome {
    let t = Instant::now();
    let pairs = separable_corpus(5000, 3);
    let (_, report) = train_entailment_classifier(&pairs, &ClassifierConfig::default(), 3).map_err(|e| e.to_string())?;
    check(report.holdout_accuracy >= 0.95, || format!("held-out accuracy {:.3}", report.holdout_accuracy))?;
    within(t.elapsed(), Duration::from_secs(300))?;
    Ok(format!("held-out accuracy {:.3} on {} pairs", report.holdout_accuracy, report.holdout_size))
}

fn rl_improvement() -> Outcome {
    let cfg = SynthRunConfig::desk();
    let mut lines = vec![];
    let mut passed = 0;
    for seed in 1..=4u64 {
        let out = synth_rl_run(seed, &cfg).map_err(|e| e.to_string())?;
        let ok = out.gain() >= 0.2 && out.wall_time_secs <= 900.0;
        passed += ok as usize;
        lines.push(format!(
            "seed {seed}: {:.3} -> {:.3} ({:+.3}, {:.0}s)",
            out.first_mean,
            out.last_mean,
            out.gain(),
            out.wall_time_secs
        ));
    }
    let detail = format!("{passed}/4 seeds; {}", lines.join("; "));
    check(passed >= 3, || detail.clone())?;
    Ok(detail)
}

fn frozen_stage_integrity() -> Outcome {
    let mut cfg = SynthRunConfig::desk();
    cfg.schedule.sft.steps = 40;
    cfg.schedule.rl_perceiver_steps = 4;
    cfg.schedule.rl_end_to_end_steps = 2;
    cfg.schedule.ppo.rollout_batch = 16;
    let world = synth_world(5, 3);
    let pairs = world_nli_pairs(&world, 1500, 5);
    let (clf, _) = train_entailment_classifier(&pairs, &cfg.classifier, 5).map_err(|e| e.to_string())?;
    let corpus = Corpus { clusters: world.clusters, claims: world.claims };
    let vocab = corpus_vocab(&corpus);
    let mut store = ParamStore::new();
    let model = Arc::new(MspModel::init(&mut store, cfg.model.clone(), vocab.len(), IMAGE_FEATURE_DIM, &mut seeded(5)).map_err(|e| e.to_string())?);
    let (sft, rl) = training_items(&model, &corpus, &vocab).map_err(|e| e.to_string())?;
    let scorer = RewardModel::new(Arc::new(clf), QualityCritic::builtin(), 0.2);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let policy_side = |n: &str| n.starts_with("policy.");
    let data = TrainData { sft: &sft, rl: &rl, vocab: Some(&vocab) };
    let mut reference = None;
    let mut ctx = TrainContext {
        policy: &model.policy,
        store: &mut store,
        reference: &mut reference,
        scorer: &scorer,
        out_dir: Some(dir.path()),
        config_hash: "integrity",
    };
    // SFT alone first, so the in-memory hashes before RL are known
    let sft_only = factsum::ppo::ScheduleConfig { stages: vec![Stage::Sft], ..cfg.schedule.clone() };
    let state = train_schedule(TrainState::new(5), &sft_only, &data, &mut ctx).map_err(|e| e.to_string())?;
    let policy_before = ctx.store.fingerprint_filtered(policy_side);
    let side_before = ctx.store.fingerprint_filtered(|n| n.starts_with("encoding.") || n.starts_with("fusion."));
    let ref_before = ctx.reference.as_ref().expect("reference after SFT").fingerprint();
    let perceiver = factsum::ppo::ScheduleConfig { stages: vec![Stage::RlPerceiverOnly], ..cfg.schedule.clone() };
    let state = train_schedule(state, &perceiver, &data, &mut ctx).map_err(|e| e.to_string())?;
    let policy_after = ctx.store.fingerprint_filtered(policy_side);
    let side_after = ctx.store.fingerprint_filtered(|n| n.starts_with("encoding.") || n.starts_with("fusion."));
    check(policy_before == policy_after, || "policy parameters moved during RL_PERCEIVER_ONLY".into())?;
    check(side_before != side_after, || "encoders and fusion did not move".into())?;
    let e2e = factsum::ppo::ScheduleConfig { stages: vec![Stage::RlEndToEnd], ..cfg.schedule.clone() };
    train_schedule(state, &e2e, &data, &mut ctx).map_err(|e| e.to_string())?;
    check(ctx.store.fingerprint_filtered(policy_side) != policy_after, || "end-to-end stage did not train the policy".into())?;
    check(ctx.reference.as_ref().expect("reference").fingerprint() == ref_before, || "reference changed".into())?;
    for stage in ["rl_perceiver_only", "rl_end_to_end"] {
        let m = RunManifest::load(&dir.path().join(stage).join("run_manifest.json")).map_err(|e| e.to_string())?;
        check(m.reference_hash.as_deref() == Some(ref_before.as_str()), || format!("{stage} manifest reference hash differs"))?;
    }
    Ok(format!("policy hash {}.. fixed through RL_PERCEIVER_ONLY, reference {}.. fixed", &policy_before[..8], &ref_before[..8]))
}

const MINIMAL_CONFIG: &str = r#"
[schedule]
stages = ["SFT"]
rl_perceiver_steps = 0
rl_end_to_end_steps = 0
[schedule.sft]
steps = 1
batch_size = 2
learning_rate = 0.01
[schedule.ppo]
learning_rate = 0.001
rollout_batch = 4
"#;

fn dataset_pipeline() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, format!("[dataset]\nmode = \"synth\"\nclusters = 6\n{MINIMAL_CONFIG}")).map_err(|e| e.to_string())?;
    let mut hashes = vec![];
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_factsum"))
            .args(["dataset-gen", "--config"])
            .arg(&config)
            .args(["--seed", "9", "--out"])
            .arg(&out)
            .env_remove("FACTSUM_LLM_ENDPOINT")
            .env("RUST_LOG", "warn")
            .status()
            .map_err(|e| e.to_string())?;
        check(status.success(), || format!("dataset-gen exited with {status}"))?;
        let (corpus, manifest) = load_corpus(&out).map_err(|e| e.to_string())?;
        check(corpus.clusters.len() == 6, || format!("{} clusters", corpus.clusters.len()))?;
        for c in &corpus.clusters {
            let mine: Vec<&ClaimRecord> = corpus.claims.iter().filter(|r| r.cluster_id == c.id).collect();
            check(mine.len() == 30, || format!("cluster {} has {} claims", c.id, mine.len()))?;
            for l in Label::ALL {
                let n = mine.iter().filter(|r| r.label == l).count();
                check(n == 10, || format!("cluster {} has {n} {l} claims", c.id))?;
            }
            check(mine.iter().all(|r| r.checkworthiness != Checkworthiness::Unknown), || "unclassified claim".into())?;
        }
        let bytes = std::fs::read(out.join("corpus.jsonl")).map_err(|e| e.to_string())?;
        hashes.push((manifest.corpus_sha256, bytes));
    }
    check(hashes[0] == hashes[1], || "corpus differs between identical runs".into())?;
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!("6 clusters x 30 claims, corpus sha256 {}.. reproduced", &hashes[0].0[..12]))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn metrics_oracle() -> Outcome {
    let t = Instant::now();
    use Label::{Contradiction as C, Entailment as E, Neutral as N};
    // a classifier with zero output weights predicts uniform, hence entailment
    let (mut clf, _) = train_entailment_classifier(&separable_corpus(300, 1), &ClassifierConfig::default(), 1)
        .map_err(|e| e.to_string())?;
    clf.zero_output();
    let gold = [E, N, C, E, N, C];
    let claims: Vec<ClaimRecord> = gold
        .iter()
        .enumerate()
        .map(|(i, &label)| ClaimRecord {
            id: format!("k{i}"),
            cluster_id: "c".into(),
            claim: format!("the mayor approved item {i}"),
            label,
            checkworthiness: Checkworthiness::Cfs,
            verified_label: None,
        })
        .collect();
    let summaries: Vec<SummaryRecord> =
        claims.iter().map(|c| SummaryRecord { claim_id: c.id.clone(), summary: "the council met .".into() }).collect();
    let r = verify_claims(&summaries, &claims, &clf, Averaging::Macro).map_err(|e| e.to_string())?;
    check(close(r.accuracy, 1.0 / 3.0), || format!("degenerate accuracy {}", r.accuracy))?;
    check(r.label(E).recall == 1.0 && close(r.label(E).precision, 1.0 / 3.0), || "degenerate entailment P/R".into())?;
    check(r.confusion == [[2, 0, 0], [2, 0, 0], [2, 0, 0]], || format!("degenerate confusion {:?}", r.confusion))?;

    // hand-built case with a trained classifier: premise facts drive the prediction
    let (clf, _) = train_entailment_classifier(&separable_corpus(5000, 3), &ClassifierConfig::default(), 3)
        .map_err(|e| e.to_string())?;
    let premise = "the mayor approved the budget . the bank sold a factory .";
    let items: [(&str, &str, Label); 6] = [
        (premise, "the mayor approved the budget", E),
        (premise, "the bank sold a factory", E),
        (premise, "the court won the law", E),
        (premise, "the union signed the treaty", N),
        (premise, "the mayor never approved the budget", C),
        (premise, "the bank sold a factory", C),
    ];
    let predicted: Vec<Label> = items.iter().map(|(p, h, _)| clf.predict(p, h)).collect();
    check(predicted == [E, E, N, N, C, E], || format!("fixture predictions {predicted:?}"))?;
    let claims: Vec<ClaimRecord> = items
        .iter()
        .enumerate()
        .map(|(i, (_, h, l))| ClaimRecord {
            id: format!("h{i}"),
            cluster_id: "c".into(),
            claim: h.to_string(),
            label: *l,
            checkworthiness: Checkworthiness::Cfs,
            verified_label: None,
        })
        .collect();
    let summaries: Vec<SummaryRecord> =
        items.iter().enumerate().map(|(i, (p, _, _))| SummaryRecord { claim_id: format!("h{i}"), summary: p.to_string() }).collect();
    let r = verify_claims(&summaries, &claims, &clf, Averaging::Macro).map_err(|e| e.to_string())?;
    // gold E E E N C C, predicted E E N N C E
    check(r.confusion == [[2, 1, 0], [0, 1, 0], [1, 0, 1]], || format!("confusion {:?}", r.confusion))?;
    let want = [(E, 2.0 / 3.0, 2.0 / 3.0), (N, 0.5, 1.0), (C, 1.0, 0.5)];
    for (l, p, rc) in want {
        let m = r.label(l);
        check(close(m.precision, p) && close(m.recall, rc), || format!("{l}: P {} R {}", m.precision, m.recall))?;
        check(close(m.f1, 2.0 / 3.0), || format!("{l}: F1 {}", m.f1))?;
    }
    check(close(r.accuracy, 4.0 / 6.0) && close(r.macro_f, 2.0 / 3.0), || "accuracy or macro F".into())?;
    let mismatched = vec![SummaryRecord { claim_id: "zz".into(), ..summaries[0].clone() }];
    check(verify_claims(&mismatched, &claims[..1], &clf, Averaging::Macro).is_err(), || "id mismatch accepted".into())?;

    let err = |e: Error| e.to_string();
    let r1 = rouge_n_scores("the cat", "the cat sat", 1).map_err(err)?;
    check(r1.precision == 1.0 && close(r1.recall, 2.0 / 3.0) && close(r1.f1, 0.8), || format!("ROUGE-1 {r1:?}"))?;
    let x = "a b c d";
    let same = [rouge_n(x, x, 1).map_err(err)?, rouge_n(x, x, 2).map_err(err)?, rouge_l(x, x), bleu(x, &[x], 4).map_err(err)?];
    check(same == [1.0; 4], || format!("identical strings {same:?}"))?;
    let disjoint = [rouge_n("a b", "c d", 1).map_err(err)?, rouge_l("a b", "c d"), bleu("a b", &["c d"], 4).map_err(err)?];
    check(disjoint == [0.0; 3], || format!("disjoint {disjoint:?}"))?;
    check(close(rouge_l("a b c d", "a c b d"), 0.75), || "ROUGE-L LCS case".into())?;
    check(close(rouge_n("a b c", "a b d", 2).map_err(err)?, 0.5), || "ROUGE-2 case".into())?;
    let b = bleu("a b d", &["a b c d"], 2).map_err(err)?;
    check(close(b, (1.0f64 - 4.0 / 3.0).exp() * 0.5f64.sqrt()), || format!("BLEU brevity case {b}"))?;
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok("verification and ROUGE/BLEU fixtures match hand-computed values".into())
}

fn quality_parsing() -> Outcome {
    let v = parse_quality_score("The quality score is 0.8").map_err(|e| e.to_string())?;
    check(v == 0.8, || format!("parsed {v}"))?;
    let raw = "I would rate this summary highly.";
    match parse_quality_score(raw) {
        Err(Error::Parse { raw: r, .. }) => check(r == raw, || "parse error lost the raw response".into())?,
        other => return Err(format!("missing pattern gave {other:?}")),
    }
    Ok("0.8 parsed; missing pattern is a parse error carrying the response".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("reward algebra", reward_algebra),
        ("total reward", total_reward_algebra),
        ("gradient checks", gradient_checks),
        ("KL estimator", kl_estimator),
        ("SFT convergence", sft_convergence),
        ("entailment classifier", classifier_accuracy),
        ("RL improvement", rl_improvement),
        ("frozen-stage integrity", frozen_stage_integrity),
        ("dataset pipeline", dataset_pipeline),
        ("metrics oracle", metrics_oracle),
        ("quality-critic parsing", quality_parsing),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
