use std::process::ExitCode;
use std::time::{Duration, Instant};

use agnet::checkpoint::Checkpoint;
use agnet::checks::{check_full, check_primitives, CheckOutcome};
use agnet::config::RunConfig;
use agnet::head::{attr_loss, AttributeCoefficients, AttributeLabels, AttributeSchema, BranchLogits};
use agnet::marcu::{attention_kernel_rule, NetworkConfig};
use agnet::model::{AgeNet, ModelSpec};
use agnet::ranking::{
    ecr_minimizer_oracle, ecr_value_and_grad, encode_ranking_label, IntervalPoints, LossKind, RankingLabel,
};
use agnet::train::{evaluate, evaluate_checkpoint, metrics_log, train, Splits, TrainOutcome};
use agnet::{Graph, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let prims = check_primitives(0..100).map_err(err)?;
    let full: Vec<CheckOutcome> = (0..4).map(|s| check_full(s, 4)).collect::<agnet::Result<_>>().map_err(err)?;
    let elapsed = start.elapsed();
    for o in prims.iter().chain(&full) {
        ensure(o.passed(), || {
            format!("{} max rel err {:e} (tol {:e}) {}", o.name, o.max_rel_err, o.tolerance, o.failure.clone().unwrap_or_default())
        })?;
    }
    ensure(prims.len() == 17 && prims.iter().all(|o| o.runs == 100), || "expected 17 primitives × 100 seeds".into())?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {:.1}s", elapsed.as_secs_f64()))?;
    let worst_prim = prims.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let worst_full = full.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    Ok(format!(
        "17 primitives × 100 seeds worst {worst_prim:.3e} < 1e-6; full desk net × {} seeds worst {worst_full:.3e} < 1e-4; {:.1}s",
        full.len(),
        elapsed.as_secs_f64()
    ))
}

fn ecr_minimizer() -> Outcome {
    let p = IntervalPoints::new(1, 20).map_err(err)?;
    let mut worst: f64 = 0.0;
    for age in 2..20 {
        let m = ecr_minimizer_oracle(&encode_ranking_label(age, &p).map_err(err)?, &p).map_err(err)?;
        let d = (m.h - f64::from(age)).abs();
        ensure(!m.boundary_hit && d <= 0.5, || format!("age {age}: minimizer {:.6}", m.h))?;
        worst = worst.max(d);
    }
    let mut ln2_err: f64 = 0.0;
    for (k, &b) in p.thresholds().iter().enumerate() {
        let single = IntervalPoints::from_thresholds(p.a_min() + k as i32, vec![b]).map_err(err)?;
        for bit in [0u8, 1] {
            let label = RankingLabel {
                age: p.a_min() + k as i32 - 1 + i32::from(bit),
                bits: vec![bit],
            };
            let v = ecr_value_and_grad(b, &label, &single).map_err(err)?.0;
            ln2_err = ln2_err.max((v - std::f64::consts::LN_2).abs());
        }
    }
    ensure(ln2_err <= 1e-9, || format!("|L(b_k) − ln 2| = {ln2_err:e}"))?;
    Ok(format!("interior ages 2..19 worst |ĥ − age| {worst:.4} ≤ 0.5; |L(b_k) − ln 2| ≤ {ln2_err:.1e}"))
}

fn shape_conformance() -> Outcome {
    let cfg = NetworkConfig::paper();
    let trace = cfg.shape_trace(224).map_err(err)?;
    ensure(trace.boundaries() == [112, 56, 28, 14, 7], || format!("boundaries {:?}", trace.boundaries()))?;
    let model = AgeNet::new(ModelSpec::new(cfg.clone(), AttributeSchema::morph(), LossKind::Ecr), 0).map_err(err)?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let x = g.constant(Tensor::full([1, 3, 224, 224], 0.5));
    let executed = model.backbone.forward(&mut g, &p, x).map_err(err)?.trace;
    ensure(executed == trace, || format!("executed trace {:?} vs planned {:?}", executed.sizes(), trace.sizes()))?;
    let kernels: Vec<usize> = cfg.block_configs().iter().map(|b| b.attention_kernel).collect();
    for (b, &k) in cfg.block_configs().iter().zip(&kernels) {
        let want = if b.out_channels <= 128 { 3 } else { 5 };
        ensure(k == want && attention_kernel_rule(b.out_channels) == want, || {
            format!("{} channels use kernel {k}", b.out_channels)
        })?;
    }
    let per_stage: Vec<usize> = cfg
        .stage_channels
        .iter()
        .map(|&c| if c <= 128 { 3 } else { 5 })
        .collect();
    ensure(per_stage == [3, 3, 5, 5], || format!("stage kernels {per_stage:?}"))?;
    Ok(format!("executed boundaries {:?}; stage attention kernels {per_stage:?}", trace.boundaries()))
}

fn label_properties() -> Outcome {
    let mut total = 0;
    for (lo, hi) in [(16, 77), (1, 100), (3, 80)] {
        let p = IntervalPoints::new(lo, hi).map_err(err)?;
        for age in lo..=hi {
            let l = encode_ranking_label(age, &p).map_err(err)?;
            ensure(l.is_prefix_of_ones(), || format!("{lo}..{hi} age {age}: {:?}", l.bits))?;
            ensure(l.popcount() as i32 + lo - 1 == age, || format!("{lo}..{hi} age {age}: popcount {}", l.popcount()))?;
            total += 1;
        }
    }
    Ok(format!("{total} ages over 16-77, 1-100, 3-80"))
}

const OVERFIT: &str = r#"
schema = "morph"
[train]
epochs = 200
batch_size = 16
learning_rate = 0.0005
seed = 1
loss = "ecr"
[synthetic]
resolution = 64
a_min = 16
a_max = 77
noise_sigma = 0.05
seed = 7
train = 64
val = 16
test = 16
"#;

fn timed_train(cfg: &RunConfig, splits: &Splits) -> Result<(TrainOutcome, Duration), String> {
    let t = Instant::now();
    let out = train(cfg, splits, None).map_err(err)?;
    Ok((out, t.elapsed()))
}

fn overfit() -> Outcome {
    let cfg = RunConfig::from_toml_str(OVERFIT).map_err(err)?;
    let splits = Splits::from_config(&cfg).map_err(err)?;
    let (a, ta) = timed_train(&cfg, &splits)?;
    let (b, tb) = timed_train(&cfg, &splits)?;
    let train_mae = evaluate(&a.last, &splits.train, cfg.crop(64)).map_err(err)?.mae;
    ensure(train_mae < 1.0, || format!("final training MAE {train_mae:.4}"))?;
    ensure(metrics_log(&a.log) == metrics_log(&b.log), || "metrics logs differ between runs".into())?;
    let slowest = ta.max(tb);
    ensure(slowest < Duration::from_secs(600), || format!("run took {:.1}s", slowest.as_secs_f64()))?;
    Ok(format!(
        "final training MAE {train_mae:.4} < 1.0; logs identical; {:.1}s per run",
        slowest.as_secs_f64()
    ))
}

const ABLATION: &str = r#"
schema = "morph"
[train]
epochs = 8
batch_size = 32
learning_rate = 0.0005
seed = 1
[synthetic]
resolution = 32
a_min = 16
a_max = 77
noise_sigma = 0.1
seed = 11
train = 1600
val = 200
test = 200
"#;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct RunScore {
    test_mae: f64,
    best_val_mae: f64,
}

fn ablation_run(splits: &Splits, seed: u64, loss: LossKind, guidance: bool) -> Result<RunScore, String> {
    let mut cfg = RunConfig::from_toml_str(ABLATION).map_err(err)?;
    cfg.train.seed = seed;
    cfg.train.loss = loss;
    cfg.train.attribute_guidance = guidance;
    let out = train(&cfg, splits, None).map_err(err)?;
    let schema = cfg.schema.resolve().map_err(err)?;
    Ok(RunScore {
        test_mae: evaluate_checkpoint(&out.best, &splits.test, &schema).map_err(err)?.mae,
        best_val_mae: out.best.meta.best_val_mae,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

struct Ablations {
    ecr: Vec<RunScore>,
    l1: Vec<RunScore>,
    guided: Vec<RunScore>,
}

fn ablations() -> Result<Ablations, String> {
    let cfg = RunConfig::from_toml_str(ABLATION).map_err(err)?;
    let splits = Splits::from_config(&cfg).map_err(err)?;
    let runs = |loss, guidance| {
        SEEDS
            .iter()
            .map(|&s| ablation_run(&splits, s, loss, guidance))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(Ablations {
        ecr: runs(LossKind::Ecr, false)?,
        l1: runs(LossKind::L1, false)?,
        guided: runs(LossKind::Ecr, true)?,
    })
}

fn loss_ablation(ab: &Ablations) -> Outcome {
    let ecr: Vec<f64> = ab.ecr.iter().map(|r| r.test_mae).collect();
    let l1: Vec<f64> = ab.l1.iter().map(|r| r.test_mae).collect();
    let (me, ml) = (mean(&ecr), mean(&l1));
    let detail = format!("mean test MAE ECR {me:.4} [{}] vs L1 {ml:.4} [{}]", fmt(&ecr), fmt(&l1));
    ensure(me <= ml + 0.2, || format!("{detail}: ECR exceeds L1 + 0.2"))?;
    Ok(format!("{detail}; ECR ≤ L1 + 0.2"))
}

const BIT_IDENTITY: &str = r#"
schema = "morph"
[train]
epochs = 3
batch_size = 4
seed = 3
[synthetic]
resolution = 16
a_min = 16
a_max = 77
noise_sigma = 0.05
seed = 5
train = 12
val = 4
test = 0
"#;

fn guidance_ablation(ab: &Ablations) -> Outcome {
    let with: Vec<f64> = ab.guided.iter().map(|r| r.best_val_mae).collect();
    let without: Vec<f64> = ab.ecr.iter().map(|r| r.best_val_mae).collect();
    let (mw, mo) = (mean(&with), mean(&without));
    let detail = format!("mean best val MAE AG {mw:.4} [{}] vs no-AG {mo:.4} [{}]", fmt(&with), fmt(&without));
    ensure(mw <= mo + 0.1, || format!("{detail}: AG exceeds no-AG + 0.1"))?;

    let base = RunConfig::from_toml_str(BIT_IDENTITY).map_err(err)?;
    let splits = Splits::from_config(&base).map_err(err)?;
    let mut zeroed = base.clone();
    zeroed.train.coefficients = AttributeCoefficients {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };
    let mut off = base.clone();
    off.train.attribute_guidance = false;
    let a = metrics_log(&train(&zeroed, &splits, None).map_err(err)?.log);
    let b = metrics_log(&train(&off, &splits, None).map_err(err)?.log);
    ensure(a == b, || format!("{detail}; α=β=γ=0 log differs from no-AG log"))?;
    Ok(format!("{detail}; α=β=γ=0 log bit-identical to no-AG"))
}

fn persistence() -> Outcome {
    let mut cfg = RunConfig::from_toml_str(BIT_IDENTITY).map_err(err)?;
    cfg.train.epochs = 4;
    let splits = Splits::from_config(&cfg).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let out = train(&cfg, &splits, Some(dir.path())).map_err(err)?;
    let first = dir.path().join("best.agn");
    let second = dir.path().join("again.agn");
    let loaded = Checkpoint::load(&first).map_err(err)?;
    loaded.save(&second).map_err(err)?;
    let (a, b) = (std::fs::read(&first).map_err(err)?, std::fs::read(&second).map_err(err)?);
    ensure(a == b, || "resaved checkpoint differs".into())?;
    let schema = cfg.schema.resolve().map_err(err)?;
    let mae = evaluate_checkpoint(&loaded, &splits.val, &schema).map_err(err)?.mae;
    let recorded = loaded.meta.best_val_mae;
    ensure(mae.to_bits() == recorded.to_bits() && recorded == out.best.meta.best_val_mae, || {
        format!("reloaded val MAE {mae:e} vs recorded {recorded:e}")
    })?;
    Ok(format!("{} bytes byte-identical; reloaded val MAE {mae:.6} == recorded", a.len()))
}

fn attribute_spot_value() -> Outcome {
    let schema = AttributeSchema::morph();
    let (gg, ga, ge) = schema.dims();
    let mut g = Graph::new();
    let logits = BranchLogits {
        gender: g.constant(Tensor::full([1, gg], 0.7)),
        age_group: g.constant(Tensor::full([1, ga], 0.7)),
        ethnicity: Some(g.constant(Tensor::full([1, ge], 0.7))),
    };
    let labels = [AttributeLabels::new(30, 0, 3, &schema).map_err(err)?];
    let loss = attr_loss(&mut g, &logits, &labels, AttributeCoefficients::default()).map_err(err)?;
    let v = g.value(loss).item().map_err(err)?;
    let want = 3f64.ln() + 2f64.ln() + 4f64.ln();
    ensure((v - want).abs() <= 1e-9, || format!("{v} vs {want}"))?;
    Ok(format!("{v:.9} = ln 3 + ln 2 + ln 4"))
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(name) {
            let r = f();
            let (tag, text) = match &r {
                Ok(s) => ("PASS", s),
                Err(s) => ("FAIL", s),
            };
            println!("{tag} {name}: {text}");
            results.push((name, r));
        }
    };
    run("AC1 gradient suite", &gradient_suite);
    run("AC2 ECR minimizer", &ecr_minimizer);
    run("AC3 shape conformance", &shape_conformance);
    run("AC4 label encoding", &label_properties);
    run("AC5 overfit", &overfit);
    let need_ablation = wanted("AC6 loss ablation") || wanted("AC7 attribute guidance ablation");
    let ab = if need_ablation { Some(ablations()) } else { None };
    let with_ab = |f: fn(&Ablations) -> Outcome| match ab.as_ref().expect("computed") {
        Ok(a) => f(a),
        Err(e) => Err(e.clone()),
    };
    run("AC6 loss ablation", &|| with_ab(loss_ablation));
    run("AC7 attribute guidance ablation", &|| with_ab(guidance_ablation));
    run("AC8 persistence", &persistence);
    run("AC9 attribute loss spot value", &attribute_spot_value);

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
