//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 7 9`.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use alphagrpo::dvreward::{
    self, aggregate, confidence_score, decompose, filter_questions, pilot_pairs, pilot_study, AnalyticVerifier,
    Category, Filtered, Question, QuestionSet, ScoreMode,
};
use alphagrpo::envtoy::{self, generate_prompt_set, Catalog, PromptSpec};
use alphagrpo::flowpolicy::{flow_kl, sde_step, sigma_t};
use alphagrpo::gradcore::{finite_difference, max_relative_error, ParamVector};
use alphagrpo::grpotrain::{
    compute_advantages, eval_suite, fpr_rectify, rollout_group, train, unified_loss, EvalReport, Group, RewardMode,
    RunArtifacts, TaskMode, TrainConfig,
};
use alphagrpo::model::{pretrain, ModelSpec, PolicyModel, PretrainConfig};
use alphagrpo::rewardserve::{simulate_schedule, RewardClient, SchedulePolicy, ScheduleScenario, ScoreJob};
use alphagrpo::rng::stream;
use rand::Rng as _;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Desk-scale fixtures shared by criteria 3, 7, 8 and 9.

struct Desk {
    model: PolicyModel,
    train_prompts: Vec<PromptSpec>,
    train_q: Vec<QuestionSet>,
    held_prompts: Vec<PromptSpec>,
    held_q: Vec<QuestionSet>,
    client: RewardClient,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let cat = Catalog::standard(12, 2).unwrap();
        let train_prompts = generate_prompt_set(&cat, 30, [1, 1, 1], 1).unwrap();
        let held_prompts = generate_prompt_set(&cat, 51, [1, 1, 1], 99).unwrap();
        let train_q = train_prompts.iter().map(|p| decompose(p).unwrap()).collect();
        let held_q = held_prompts.iter().map(|p| decompose(p).unwrap()).collect();
        Desk {
            model: PolicyModel::new(ModelSpec::for_catalog(&cat)),
            train_prompts,
            train_q,
            held_prompts,
            held_q,
            client: RewardClient::local(AnalyticVerifier::default(), 8),
        }
    })
}

fn pretrained(seed: u64) -> ParamVector {
    static CACHE: OnceLock<Mutex<HashMap<u64, ParamVector>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().unwrap().get(&seed) {
        return p.clone();
    }
    let d = desk();
    let mut p = d.model.init_params(seed);
    pretrain(&d.model, &mut p, &d.train_prompts, &PretrainConfig { seed, ..Default::default() }).unwrap();
    cache.lock().unwrap().insert(seed, p.clone());
    p
}

fn desk_cfg(mode: TaskMode, reward: RewardMode, fpr: bool, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::for_mode(mode);
    c.reward = reward;
    c.fpr = fpr;
    c.seed = seed;
    c
}

type RunKey = (TaskMode, RewardMode, bool, u64);

fn trained(mode: TaskMode, reward: RewardMode, fpr: bool, seed: u64) -> Arc<RunArtifacts> {
    static CACHE: OnceLock<Mutex<HashMap<RunKey, Arc<RunArtifacts>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (mode, reward, fpr, seed);
    if let Some(a) = cache.lock().unwrap().get(&key) {
        return a.clone();
    }
    let d = desk();
    let cfg = desk_cfg(mode, reward, fpr, seed);
    let art = train(&d.model, &pretrained(seed), &d.train_prompts, &d.train_q, &cfg, &d.client, &mut |_, _, _| Ok(()))
        .unwrap();
    let art = Arc::new(art);
    cache.lock().unwrap().insert(key, art.clone());
    art
}

/// Held-out evaluation, always scored with the confidence reward.
fn held_out(params: &ParamVector, mode: TaskMode, seed: u64, srr: bool) -> EvalReport {
    let d = desk();
    let cfg = desk_cfg(mode, RewardMode::Confidence, true, seed);
    eval_suite(&d.model, params, &d.held_prompts, &d.held_q, &cfg, &d.client, srr).unwrap()
}

fn window_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------

fn c1_kl_consistency() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(11, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let t = rng.random_range(0.05..0.95);
        let dt = t * rng.random_range(0.01..0.9);
        let a = rng.random_range(0.1..2.0);
        let mut vec = |s: f64| (0..d).map(|_| s * rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (z, vt, vr, eps) = (vec(3.0), vec(2.0), vec(2.0), vec(1.0));
        let closed = flow_kl(&vt, &vr, t, dt, a).unwrap();
        let (mt, _) = sde_step(&z, t, dt, &vt, a, &eps).unwrap();
        let (mr, _) = sde_step(&z, t, dt, &vr, a, &eps).unwrap();
        let var = sigma_t(t, a).unwrap().powi(2) * dt;
        let direct = mt.iter().zip(&mr).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (2.0 * var);
        worst = worst.max((closed - direct).abs() / direct.abs().max(1e-300));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-10 && secs < 1.0, format!("1000 tuples, worst relative error {worst:.2e}, {secs:.3} s"))
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let cat = Catalog::standard(2, 2).unwrap();
    let prompts = generate_prompt_set(&cat, 3, [1, 1, 1], 5).unwrap();
    let qsets: Vec<QuestionSet> = prompts.iter().map(|p| decompose(p).unwrap()).collect();
    let client = RewardClient::local(AnalyticVerifier::default(), 2);
    let perturb = |p: &ParamVector, scale: f64, seed: u64| {
        let mut q = p.clone();
        let mut rng = stream(seed, &[9]);
        q.values.iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
        q
    };
    let mut worst: f64 = 0.0;
    let mut cover = [[0usize; 2]; 2];
    let n = 24u64;
    for trial in 0..n {
        let mode = if trial % 2 == 0 { TaskMode::Rt2i } else { TaskMode::Srr };
        let beta = if trial % 4 < 2 { 0.0 } else { 0.05 + 0.1 * (trial % 5) as f64 };
        cover[(trial % 2) as usize][usize::from(beta > 0.0)] += 1;
        let mut spec = ModelSpec::for_catalog(&cat);
        spec.ar_hidden = 2 + (trial % 3) as usize;
        spec.flow_hidden = 2 + ((trial / 3) % 3) as usize;
        spec.max_len = 4;
        let model = PolicyModel::new(spec);
        let mut cfg = TrainConfig::for_mode(mode);
        cfg.group_size = 2 + ((trial / 2) % 2) as usize;
        cfg.max_len = 4;
        cfg.t_train = 6;
        cfg.sde_window = 4;
        cfg.step_subset = if mode == TaskMode::Srr { 2 } else { 4 };
        cfg.beta_ar = beta;
        cfg.beta_flow = beta;
        cfg.lambda = [0.2, 0.5, 1.0][(trial % 3) as usize];
        let old = model.init_params(trial);
        let reference = perturb(&old, 0.05, trial + 100);
        let mut rng = stream(trial, &[]);
        let k = (trial as usize) % prompts.len();
        let groups: Vec<Group> =
            vec![rollout_group(&model, &old, &prompts[k], &qsets[k], &cfg, &client, &mut rng).unwrap()];
        let theta = perturb(&old, 0.1, trial + 200);
        let out = unified_loss(&model, &theta, &reference, &groups, &cfg).unwrap();
        let fd = finite_difference(&theta, 1e-6, |p| unified_loss(&model, p, &reference, &groups, &cfg).unwrap().loss);
        worst = worst.max(max_relative_error(&out.grad.values, &fd, 1e-4));
    }
    let secs = start.elapsed().as_secs_f64();
    let covered = cover.iter().flatten().all(|&c| c > 0);
    outcome(
        worst < 1e-4 && covered && secs < 60.0,
        format!("{n} configs (both modes x beta 0/>0), worst relative error {worst:.2e}, {secs:.1} s"),
    )
}

fn c3_grpo_invariants() -> Outcome {
    let mut rng = stream(13, &[]);
    let (mut worst_mean, mut worst_std, mut worst_affine) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let g = rng.random_range(2..=16);
        let r: Vec<f64> = (0..g).map(|_| rng.random::<f64>()).collect();
        let adv = compute_advantages(&r);
        let n = g as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
        let (alpha, beta) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let mapped: Vec<f64> = r.iter().map(|x| alpha * x + beta).collect();
        let adv2 = compute_advantages(&mapped);
        worst_affine = worst_affine.max(adv.iter().zip(&adv2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    // First update of a real run is on-policy.
    let d = desk();
    let mut cfg = desk_cfg(TaskMode::Rt2i, RewardMode::Confidence, true, 3);
    cfg.steps = 1;
    let init = d.model.init_params(3);
    let rt = train(&d.model, &init, &d.train_prompts, &d.train_q, &cfg, &d.client, &mut |_, _, _| Ok(())).unwrap();
    let mut scfg = desk_cfg(TaskMode::Srr, RewardMode::Confidence, true, 3);
    scfg.steps = 1;
    let sr = train(&d.model, &init, &d.train_prompts, &d.train_q, &scfg, &d.client, &mut |_, _, _| Ok(())).unwrap();
    let clip = rt.metrics[0].clip_frac.max(sr.metrics[0].clip_frac);
    outcome(
        worst_mean < 1e-10 && worst_std < 1e-10 && worst_affine < 1e-9 && clip == 0.0,
        format!(
            "|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, affine drift {worst_affine:.1e}, first-update clip {clip}"
        ),
    )
}

fn c4_fpr() -> Outcome {
    let hand = fpr_rectify(&[0.5, 0.3, 0.7], 0.6) == vec![0.3, 0.3, 0.7];
    let mut rng = stream(17, &[]);
    let (mut groups, mut non_improvers, mut negative, mut all_fail, mut all_fail_zero) = (0, 0, 0, 0, 0);
    while groups < 10_000 || all_fail < 1000 {
        let g = rng.random_range(2..=16);
        let raw: Vec<f64> = (0..g).map(|_| rng.random::<f64>()).collect();
        let r_init = rng.random::<f64>();
        let rect = fpr_rectify(&raw, r_init);
        let adv = compute_advantages(&rect);
        let improvers = raw.iter().filter(|&&r| r > r_init).count();
        if improvers == 0 {
            all_fail += 1;
            all_fail_zero += usize::from(adv.iter().all(|&a| a == 0.0));
            continue;
        }
        let m = rect.iter().sum::<f64>() / g as f64;
        let spread = rect.iter().map(|x| (x - m) * (x - m)).sum::<f64>() > 0.0;
        if groups >= 10_000 || !spread {
            continue;
        }
        groups += 1;
        for (r, a) in raw.iter().zip(&adv) {
            if *r <= r_init {
                non_improvers += 1;
                negative += usize::from(*a < 0.0);
            }
        }
    }
    outcome(
        hand && negative == non_improvers && all_fail_zero == all_fail,
        format!(
            "hand example {hand}; {groups} groups: {negative}/{non_improvers} non-improvers negative; {all_fail_zero}/{all_fail} all-fail groups zero"
        ),
    )
}

fn c5_dvreward_algebra() -> Outcome {
    let mut rng = stream(19, &[]);
    let (mut mono, mut amgm, mut scale) = (0, 0, 0.0f64);
    for _ in 0..10_000 {
        let sem: Vec<f64> = (0..rng.random_range(1..10)).map(|_| rng.random::<f64>()).collect();
        let qua: Vec<f64> = (0..rng.random_range(1..6)).map(|_| rng.random::<f64>()).collect();
        let r = aggregate(&sem, &qua).unwrap();
        let ms = sem.iter().sum::<f64>() / sem.len() as f64;
        let mq = qua.iter().sum::<f64>() / qua.len() as f64;
        amgm += usize::from(r <= 0.5 * (ms + mq) + 1e-15);
        let mut up = sem.clone();
        let k = rng.random_range(0..up.len());
        up[k] = rng.random_range(up[k]..=1.0);
        let mut upq = qua.clone();
        let j = rng.random_range(0..upq.len());
        upq[j] = rng.random_range(upq[j]..=1.0);
        mono += usize::from(aggregate(&up, &qua).unwrap() >= r && aggregate(&sem, &upq).unwrap() >= r);
        let (p, q) = (rng.random::<f64>() + 1e-9, rng.random::<f64>() + 1e-9);
        let c = 10f64.powf(rng.random_range(-6.0..6.0));
        scale = scale.max((confidence_score(c * p, c * q).unwrap() - confidence_score(p, q).unwrap()).abs());
    }
    let q = Question::analytic(Category::Existence, envtoy::existence_region());
    let set = |n: usize| QuestionSet {
        prompt_id: "p".into(),
        q: String::new(),
        sem: vec![q.clone(); n - 1],
        qua: vec![q.clone()],
    };
    let at = matches!(filter_questions(set(50), 50), Filtered::Kept(_));
    let above = matches!(filter_questions(set(51), 50), Filtered::Dropped { total: 51, .. });
    outcome(
        mono == 10_000 && amgm == 10_000 && scale <= 1e-12 && at && above,
        format!(
            "monotone {mono}/10000, AM-GM {amgm}/10000, scale drift {scale:.1e}, 50 kept {at}, 51 dropped {above}"
        ),
    )
}

fn c6_pilot() -> Outcome {
    let start = Instant::now();
    let catalog = Catalog::standard(12, 2).unwrap();
    let prompts = generate_prompt_set(&catalog, 40, [3, 5, 2], 7).unwrap();
    let pairs = pilot_pairs(&prompts, 2, 200, 3);
    let r = pilot_study(&pairs, &AnalyticVerifier::default()).unwrap();
    let again = pilot_study(&pilot_pairs(&prompts, 2, 200, 3), &AnalyticVerifier::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        pairs.len() == 200
            && r.holistic_identical >= 0.2
            && r.dvreward_identical < 0.01
            && r.dvreward_mean_gap > r.holistic_mean_gap
            && r == again
            && secs < 10.0,
        format!(
            "identical: holistic {:.3}, dvreward {:.3}; mean gap: holistic {:.4}, dvreward {:.4}; {secs:.2} s",
            r.holistic_identical, r.dvreward_identical, r.holistic_mean_gap, r.dvreward_mean_gap
        ),
    )
}

fn c7_rt2i() -> Outcome {
    let start = Instant::now();
    let mut gains = Vec::new();
    for s in SEEDS {
        let art = trained(TaskMode::Rt2i, RewardMode::Confidence, true, s);
        let m = &art.metrics;
        let first = window_mean(m[..20].iter().map(|x| x.mean_reward));
        let last = window_mean(m[m.len() - 20..].iter().map(|x| x.mean_reward));
        gains.push((s, first, last, last - first));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = gains.iter().all(|g| g.3 >= 0.15) && secs < 600.0;
    let detail: Vec<String> = gains.iter().map(|(s, f, l, g)| format!("seed {s}: {f:.3} -> {l:.3} (+{g:.3})")).collect();
    outcome(ok, format!("{}; {secs:.0} s including warm start", detail.join(", ")))
}

fn c8_srr() -> Outcome {
    let mut rows = Vec::new();
    for s in SEEDS {
        let untrained = held_out(&pretrained(s), TaskMode::Srr, s, true).srr.unwrap();
        let on = trained(TaskMode::Srr, RewardMode::Confidence, true, s);
        let off = trained(TaskMode::Srr, RewardMode::Confidence, false, s);
        let r_on = held_out(&on.params, TaskMode::Srr, s, true).srr.unwrap();
        let r_off = held_out(&off.params, TaskMode::Srr, s, true).srr.unwrap();
        rows.push((s, untrained, r_on, r_off));
    }
    let n = rows[0].1.prompts;
    let on = window_mean(rows.iter().map(|r| r.2.improvement_rate));
    let off = window_mean(rows.iter().map(|r| r.3.improvement_rate));
    let ok = n >= 400
        && rows.iter().all(|r| r.2.improvement_rate >= 0.60 && (r.1.improvement_rate - 0.5).abs() <= 0.05)
        && off < on;
    let detail: Vec<String> = rows
        .iter()
        .map(|(s, u, a, b)| {
            format!("seed {s}: untrained {:.3}, fpr on {:.3}, off {:.3}", u.improvement_rate, a.improvement_rate, b.improvement_rate)
        })
        .collect();
    outcome(ok, format!("{n} held-out prompts; {}; mean over seeds on {on:.4} vs off {off:.4}", detail.join("; ")))
}

fn c9_confidence_vs_binary() -> Outcome {
    let mut rows = Vec::new();
    let (mut groups_c, mut nd_c, mut groups_b, mut nd_b) = (0.0, 0.0, 0.0, 0.0);
    for s in SEEDS {
        let c = trained(TaskMode::Rt2i, RewardMode::Confidence, true, s);
        let b = trained(TaskMode::Rt2i, RewardMode::Binary, true, s);
        for m in &c.metrics {
            groups_c += m.groups as f64;
            nd_c += m.nondegenerate_frac * m.groups as f64;
        }
        for m in &b.metrics {
            groups_b += m.groups as f64;
            nd_b += m.nondegenerate_frac * m.groups as f64;
        }
        let fc = held_out(&c.params, TaskMode::Rt2i, s, false).mean_reward;
        let fb = held_out(&b.params, TaskMode::Rt2i, s, false).mean_reward;
        rows.push((s, fc, fb));
    }
    let (fc, fb) = (nd_c / groups_c, nd_b / groups_b);
    let wins = rows.iter().filter(|r| r.1 >= r.2).count();
    let detail: Vec<String> = rows.iter().map(|(s, c, b)| format!("seed {s}: {c:.4} vs {b:.4}")).collect();
    outcome(
        fc > fb && groups_c >= 500.0 && groups_b >= 500.0 && wins >= 2,
        format!(
            "non-degenerate groups: confidence {fc:.3} vs binary {fb:.3} over {groups_c}/{groups_b} groups; final held-out reward {}; confidence wins {wins}/3",
            detail.join(", ")
        ),
    )
}

fn c10_serving() -> Outcome {
    let start = Instant::now();
    let cat = Catalog::standard(12, 2).unwrap();
    let prompts = generate_prompt_set(&cat, 6, [1, 1, 1], 21).unwrap();
    let mut rng = stream(23, &[]);
    let jobs: Vec<ScoreJob> = prompts
        .iter()
        .map(|p| ScoreJob {
            sample: (0..2).map(|_| rng.random_range(-3.0..3.0)).collect(),
            questions: decompose(p).unwrap(),
            mode: if rng.random::<bool>() { ScoreMode::Confidence } else { ScoreMode::Binary },
            format_penalty: 0.0,
        })
        .collect();
    let verifier = AnalyticVerifier::default();
    let local: Vec<f64> = jobs
        .iter()
        .map(|j| dvreward::score_image(&j.sample, &j.questions, &verifier, j.mode).unwrap().total)
        .collect();
    let client = RewardClient::local(verifier, 4);
    let in_proc = client.score_all(jobs.clone()).unwrap();
    let svc = alphagrpo_serve::serve(alphagrpo_serve::ServeConfig::analytic("127.0.0.1:0".parse().unwrap())).unwrap();
    let http = alphagrpo_serve::HttpScorer::new(svc.url(), std::time::Duration::from_secs(30)).unwrap();
    let remote = RewardClient::new(Arc::new(http), 8, 4096).score_all(jobs.clone()).unwrap();
    svc.shutdown().unwrap();
    let diff = |v: &[alphagrpo::dvreward::RewardBreakdown]| {
        v.iter().zip(&local).map(|(a, b)| (a.total - b).abs()).fold(0.0f64, f64::max)
    };
    let (d_in, d_http) = (diff(&in_proc), diff(&remote));
    let bubble: Vec<f64> = SchedulePolicy::ALL
        .iter()
        .map(|&p| simulate_schedule(&ScheduleScenario::fitted(p), 0).unwrap().mean_bubble_secs)
        .collect();
    let ordered = bubble[0] > bubble[1] && bubble[1] > bubble[2] && bubble[2] < 0.01 * bubble[0];
    let secs = start.elapsed().as_secs_f64();
    outcome(
        d_in <= 1e-12 && d_http <= 1e-12 && ordered && secs < 5.0,
        format!(
            "{} samples, max diff in-process {d_in:.1e}, http {d_http:.1e}; bubble s: centralized {:.2}, decentralized-sync {:.2}, async {:.2e}; {secs:.2} s",
            jobs.len(),
            bubble[0],
            bubble[1],
            bubble[2]
        ),
    )
}

fn c11_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_alphagrpo");
    let cfg_text = "pretrain.flow_steps = 60\npretrain.ar_steps = 10\ndata.per_task = 6\ndata.eval_per_task = 3\ngrpo.checkpoint_every = 2\n";
    let run_all = |root: &Path| -> Result<(), String> {
        std::fs::write(root.join("run.cfg"), cfg_text).unwrap();
        let out = root.join("out");
        let steps: Vec<Vec<&str>> = vec![
            vec!["gen-data"],
            vec!["pretrain", "--data", "out/gen-data"],
            vec!["train", "--data", "out/gen-data", "--init", "out/pretrain/checkpoint.json", "--steps", "4"],
            vec!["train", "--data", "out/gen-data", "--init", "out/pretrain/checkpoint.json", "--steps", "3", "--mode", "srr", "--out", "out/train-srr"],
            vec!["eval", "--data", "out/gen-data", "--checkpoint", "out/train-srr/checkpoint.json", "--mode", "srr", "--srr"],
            vec!["simulate", "--steps", "10"],
            vec!["report", "--run", "out/train", "--eval", "out/eval/eval.json"],
        ];
        for args in steps {
            let st = Command::new(bin)
                .args(&args)
                .args(["--config", "run.cfg", "--seed", "5"])
                .current_dir(root)
                .env("ALPHAGRPO_OUT", &out)
                .output()
                .map_err(|e| e.to_string())?;
            if !st.status.success() {
                return Err(format!("{args:?}: {}", String::from_utf8_lossy(&st.stderr)));
            }
        }
        Ok(())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if let Err(e) = run_all(a.path()).and_then(|_| run_all(b.path())) {
        return outcome(false, e);
    }
    let mut files = Vec::new();
    collect(&a.path().join("out"), &mut files);
    let mut same = 0;
    let mut differ = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(a.path()).unwrap();
        if f.file_name().unwrap() == "manifest.json" {
            continue;
        }
        if std::fs::read(f).ok() == std::fs::read(b.path().join(rel)).ok() {
            same += 1;
        } else {
            differ.push(rel.display().to_string());
        }
    }
    outcome(differ.is_empty() && same > 20, format!("{same} output files byte-identical across reruns; differing: {differ:?}"))
}

fn collect(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(&p, out);
        } else {
            out.push(p);
        }
    }
    out.sort();
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "KL convention consistency", c1_kl_consistency),
        (2, "gradient correctness", c2_gradients),
        (3, "GRPO invariants", c3_grpo_invariants),
        (4, "FPR property suite", c4_fpr),
        (5, "DVReward algebra", c5_dvreward_algebra),
        (6, "pilot-study discriminability", c6_pilot),
        (7, "RT2I training improvement", c7_rt2i),
        (8, "SRR training improvement", c8_srr),
        (9, "confidence vs binary", c9_confidence_vs_binary),
        (10, "serving equivalence and bubble ordering", c10_serving),
        (11, "determinism", c11_determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // Under `cargo test` with a filter for another target, skip quietly.
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("criterion {id:>2} {verdict}  {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
