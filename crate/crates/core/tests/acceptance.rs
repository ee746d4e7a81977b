//! Acceptance checks. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line regardless of output capture; exits non-zero on any failure.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tmrnet::backend::{Eval, Mode, Tape};
use tmrnet::bank::MemoryBank;
use tmrnet::eval::{confusion, ribbon_svg_string, score_video};
use tmrnet::experiment::{
    evaluate, grid_variants, run_ablation, run_description, train_pipeline, ExperimentConfig,
    Grid, Hooks, Resume,
};
use tmrnet::graph::{Graph, Var};
use tmrnet::model::{forward, AblationMode, Fashion, Model, ModelConfig, WindowRef};
use tmrnet::nonlocal::{attend, classify, NloParams};
use tmrnet::ops::{self, PoolPad};
use tmrnet::params::ParamStore;
use tmrnet::stream::{offline_probs, run_video};
use tmrnet::synth::{generate, LabeledSequence, SchemaConfig, WorkflowSchema};
use tmrnet::train::{
    build_banks, stage1_pretrain, stage2_train, stage3_finetune, Checkpoint, GroupRates,
    LogRecord, PlateauScheduler, Stage, TrainConfig,
};
use tmrnet::tvl::{self, Fusion, TvlParams};
use tmrnet::{Result, Tensor};

type Outcome = Result<(bool, String)>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------------
// 1. finite differences

const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

type OpFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Builds `sum(op(inputs) * R)` for a fixed random `R`.
fn weighted_loss(g: &mut Graph, inputs: &[Tensor], grad: &[bool], op: &OpFn, r: &Tensor) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs
        .iter()
        .zip(grad)
        .map(|(t, &rg)| g.leaf(t.clone(), rg))
        .collect();
    let out = op(g, &vars)?;
    let w = g.leaf(r.clone(), false);
    let prod = g.mul(out, w)?;
    Ok((g.sum(prod), vars))
}

/// Largest relative error between tape gradients and central differences.
fn check_primitive(inputs: &[Tensor], grad: &[bool], op: &OpFn, seed: u64) -> Result<f64> {
    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone(), false)).collect();
    let out = op(&mut probe, &vars)?;
    let out_shape = probe.value(out).shape().to_vec();
    let r = randn(&out_shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xFD));

    let mut g = Graph::new();
    let (loss, vars) = weighted_loss(&mut g, inputs, grad, op, &r)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        if !grad[i] {
            continue;
        }
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += delta;
                let mut g = Graph::new();
                let (l, _) = weighted_loss(&mut g, &xs, grad, op, &r)?;
                Ok(g.value(l).item())
            };
            let numeric = (eval_at(FD_STEP)? - eval_at(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Values kept away from the rectifier kink.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Vec<bool>, Box<OpFn>)> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mask = vec![false, true, true, false, true];
    let targets = vec![2usize, 0, 1, 2, 1];
    let sel = vec![true, false, true, false];
    vec![
        ("matmul", vec![randn(&[3, 4], rng), randn(&[4, 2], rng)], vec![true, true], Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]))),
        ("transpose", vec![randn(&[3, 4], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| g.transpose(v[0]))),
        ("add", vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], vec![true, true], Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1]))),
        ("add_bias", vec![randn(&[3, 4], rng), randn(&[4], rng)], vec![true, true], Box::new(|g: &mut Graph, v: &[Var]| g.add_bias(v[0], v[1]))),
        ("mul", vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], vec![true, true], Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]))),
        ("scale", vec![randn(&[3, 4], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.scale(v[0], -1.7)))),
        ("sigmoid", vec![randn(&[3, 4], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.sigmoid(v[0])))),
        ("tanh", vec![randn(&[3, 4], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.tanh(v[0])))),
        ("relu", vec![away_from_zero(randn(&[3, 4], rng))], vec![true], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.relu(v[0])))),
        ("slice_rows", vec![randn(&[5, 3], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| g.slice_rows(v[0], 1, 4))),
        ("slice_cols", vec![randn(&[3, 5], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| g.slice_cols(v[0], 2, 5))),
        ("concat_rows", vec![randn(&[2, 3], rng), randn(&[1, 3], rng)], vec![true, true], Box::new(|g: &mut Graph, v: &[Var]| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![randn(&[2, 3], rng), randn(&[2, 2], rng)], vec![true, true], Box::new(|g: &mut Graph, v: &[Var]| g.concat_cols(&[v[0], v[1]]))),
        ("interleave_rows", vec![randn(&[3, 2], rng), randn(&[3, 2], rng), randn(&[3, 2], rng)], vec![true; 3], Box::new(|g: &mut Graph, v: &[Var]| g.interleave_rows(v))),
        ("row_select", vec![randn(&[4, 3], rng), randn(&[4, 3], rng)], vec![true, true], Box::new(move |g: &mut Graph, v: &[Var]| g.row_select(&sel, v[0], v[1]))),
        ("sum", vec![randn(&[3, 4], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.sum(v[0])))),
        ("softmax rows", vec![randn(&[3, 5], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| g.softmax(v[0], 1, None))),
        ("softmax cols", vec![randn(&[4, 3], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| g.softmax(v[0], 0, None))),
        ("masked softmax", vec![randn(&[2, 5], rng)], vec![true], Box::new(move |g: &mut Graph, v: &[Var]| g.softmax(v[0], 1, Some(&mask)))),
        ("conv1d_temporal", vec![randn(&[6, 3], rng), randn(&[5, 3, 2], rng)], vec![true, true], Box::new(|g: &mut Graph, v: &[Var]| g.conv1d_temporal(v[0], v[1]))),
        ("max_pool replicate", vec![randn(&[6, 3], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| g.max_pool_1d(v[0], 2, 1, PoolPad::ReplicateLast))),
        ("max_pool strided", vec![randn(&[8, 3], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| g.max_pool_1d(v[0], 4, 4, PoolPad::None))),
        ("layer_norm", vec![randn(&[3, 5], rng), randn(&[5], rng), randn(&[5], rng)], vec![true; 3], Box::new(|g: &mut Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("dropout", vec![randn(&[4, 5], rng)], vec![true], Box::new(|g: &mut Graph, v: &[Var]| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            g.dropout(v[0], 0.3, true, &mut r)
        })),
        ("cross_entropy", vec![randn(&[5, 3], rng)], vec![true], Box::new(move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &targets))),
    ]
}

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_raw: 3,
        d: 4,
        d_embed: 3,
        d_hidden: 5,
        num_phases: 3,
        clip_len: 3,
        bank_len: 5,
        mode: AblationMode::Tmrnet,
        fashion: if seed.is_multiple_of(2) { Fashion::I1 } else { Fashion::I2 },
        kernels: vec![3, 5],
        fusion: if seed % 4 < 2 { Fusion::Max } else { Fusion::Ave },
        dropout: 0.2,
    }
}

struct CompositeInput {
    clips: Vec<Tensor>,
    windows: Vec<(Tensor, Vec<bool>)>,
    targets: Vec<usize>,
}

fn composite_input(seed: u64) -> CompositeInput {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed + 1000);
    CompositeInput {
        clips: vec![randn(&[3, 3], rng), randn(&[2, 3], rng), randn(&[3, 3], rng)],
        windows: vec![
            (randn(&[5, 4], rng), vec![true; 5]),
            (randn(&[5, 4], rng), vec![false, false, true, true, true]),
            (randn(&[2, 4], rng), vec![true; 2]),
        ],
        targets: vec![0, 2, 1],
    }
}

fn composite_loss_eval(model: &Model, x: &CompositeInput) -> Result<f64> {
    let clips: Vec<&Tensor> = x.clips.iter().collect();
    let windows: Vec<WindowRef<'_>> = x
        .windows
        .iter()
        .map(|(f, m)| WindowRef { features: f, mask: m })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = forward(&mut Eval::new(&model.store), model, &clips, &windows, Mode::Train, &mut rng)?;
    Ok(ops::cross_entropy(&out.logits, &x.targets)?.0.item())
}

fn check_composite(seed: u64) -> Result<(f64, usize)> {
    let mut model = Model::new(tiny_config(seed), seed)?;
    // zero-initialized biases can put a rectifier exactly on its kink; jitter
    // every parameter so the check runs at a differentiable point
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += 0.1 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let x = composite_input(seed);
    let clips: Vec<&Tensor> = x.clips.iter().collect();
    let windows: Vec<WindowRef<'_>> = x
        .windows
        .iter()
        .map(|(f, m)| WindowRef { features: f, mask: m })
        .collect();
    let mut tape = Tape::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = forward(&mut tape, &model, &clips, &windows, Mode::Train, &mut rng)?;
    let loss = {
        use tmrnet::backend::Backend;
        tape.cross_entropy(&out.logits, &x.targets)?
    };
    tape.backward(&loss)?;
    let grads = tape.param_grads();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in model.store.ids() {
        let shape = model.store.get(id).shape().to_vec();
        let analytic = grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        for j in 0..model.store.get(id).len() {
            let mut m = model.clone();
            m.store.get_mut(id).data_mut()[j] += FD_STEP;
            let up = composite_loss_eval(&m, &x)?;
            m.store.get_mut(id).data_mut()[j] -= 2.0 * FD_STEP;
            let down = composite_loss_eval(&m, &x)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_prim = 0.0f64;
    let mut worst_name = "";
    for seed in 0..10 {
        for (name, inputs, grad, op) in primitive_cases(seed) {
            let e = check_primitive(&inputs, &grad, op.as_ref(), seed)?;
            if e > worst_prim {
                worst_prim = e;
                worst_name = name;
            }
        }
    }
    let mut worst_comp = 0.0f64;
    let mut values = 0;
    for seed in 0..10 {
        let (e, n) = check_composite(seed)?;
        worst_comp = worst_comp.max(e);
        values += n;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst_prim <= 1e-4 && worst_comp <= 1e-3 && secs < 60.0,
        format!(
            "primitive max rel err {worst_prim:.2e} ({worst_name}), composite {worst_comp:.2e} over {values} parameter values, {secs:.1}s"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2. residual identity, attention weights, head width

fn nlo(d: usize, de: usize, seed: u64) -> (ParamStore, NloParams) {
    let mut store = ParamStore::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let p = NloParams::init(&mut store, "nl", d, de, 0.0, rng).unwrap();
    (store, p)
}

/// Softmax of scaled dot products, written out directly.
fn attention_oracle(store: &ParamStore, p: &NloParams, c: &Tensor, l: &Tensor) -> Vec<f64> {
    let wt = store.get(p.w_theta);
    let wp = store.get(p.w_phi);
    let proj = |x: &[f64], w: &Tensor| -> Vec<f64> {
        (0..p.d_embed)
            .map(|e| (0..p.d).map(|i| x[i] * w.get2(i, e)).sum())
            .collect()
    };
    let theta = proj(c.row(0), wt);
    let logits: Vec<f64> = (0..l.rows())
        .map(|j| {
            let phi = proj(l.row(j), wp);
            theta.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>() / (p.d_embed as f64).sqrt()
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();
    let mut ok = true;

    // zero value map with identity normalization: r = c exactly
    let mut identity = true;
    for seed in 0..10 {
        let (mut store, p) = nlo(8, 4, seed);
        store.get_mut(p.w_g).data_mut().fill(0.0);
        let c = randn(&[1, 8], &mut rng);
        let l = randn(&[6, 8], &mut rng);
        let (r, _) = attend(&mut Eval::new(&store), &p, &c, &l, &[true; 6], Mode::Eval, &mut rng)?;
        identity &= r == c;
    }
    ok &= identity;
    notes.push(format!("residual identity exact: {identity}"));

    let mut sum_err = 0.0f64;
    let mut oracle_err = 0.0f64;
    for seed in 0..20 {
        let (store, p) = nlo(8, 4, seed);
        let len = 1 + seed as usize;
        let c = randn(&[1, 8], &mut rng);
        let l = randn(&[len, 8], &mut rng);
        let (_, w) = attend(&mut Eval::new(&store), &p, &c, &l, &vec![true; len], Mode::Eval, &mut rng)?;
        sum_err = sum_err.max((w.sum() - 1.0).abs());
        let o = attention_oracle(&store, &p, &c, &l);
        for (a, b) in w.data().iter().zip(&o) {
            oracle_err = oracle_err.max((a - b).abs());
        }
    }
    ok &= sum_err <= 1e-9 && oracle_err <= 1e-12;
    notes.push(format!("weight sum err {sum_err:.1e}, oracle err {oracle_err:.1e}"));

    let mut uniform_err = 0.0f64;
    for seed in 0..10 {
        let (store, p) = nlo(8, 4, seed);
        let key = randn(&[1, 8], &mut rng);
        let len = 2 + seed as usize;
        let rows: Vec<&[f64]> = (0..len).map(|_| key.row(0)).collect();
        let l = Tensor::from_rows(&rows)?;
        let c = randn(&[1, 8], &mut rng);
        let (_, w) = attend(&mut Eval::new(&store), &p, &c, &l, &vec![true; len], Mode::Eval, &mut rng)?;
        for x in w.data() {
            uniform_err = uniform_err.max((x - 1.0 / len as f64).abs());
        }
    }
    ok &= uniform_err <= 1e-12;
    notes.push(format!("equal keys uniform err {uniform_err:.1e}"));

    let cfg = ModelConfig {
        d: 512,
        d_embed: 256,
        d_hidden: 128,
        kernels: vec![3],
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 1)?;
    let head = model.long.as_ref().expect("long-range head").head;
    let r = randn(&[1, 512], &mut rng);
    let c = randn(&[1, 512], &mut rng);
    let logits = classify(&mut Eval::new(&model.store), &head, &r, &c)?;
    let width_ok = head.input == 1024 && logits.shape() == [1, model.config.num_phases];
    ok &= width_ok;
    notes.push(format!("head input width {} at d=512", head.input));
    Ok((ok, notes.join("; ")))
}

// ---------------------------------------------------------------------------
// 3. temporal variation layer

fn conv_oracle(x: &Tensor, w: &Tensor) -> Tensor {
    let (len, din) = (x.rows(), x.cols());
    let (k, dout) = (w.shape()[0], w.shape()[2]);
    let mut out = Tensor::zeros(&[len, dout]);
    for p in 0..len {
        for o in 0..k {
            let q = p as isize + o as isize - (k / 2) as isize;
            if q < 0 || q >= len as isize {
                continue;
            }
            for c in 0..din {
                for j in 0..dout {
                    out.row_mut(p)[j] += x.get2(q as usize, c) * w.data()[(o * din + c) * dout + j];
                }
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor) -> Tensor {
    let len = x.rows();
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|p| {
            let next = (p + 1).min(len - 1);
            x.row(p).iter().zip(x.row(next)).map(|(a, b)| a.max(*b)).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn criterion_3() -> Outcome {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    let mut shapes = true;
    for fusion in [Fusion::Max, Fusion::Ave] {
        for kernels in [vec![3], vec![5], vec![7], vec![3, 5, 7]] {
            let mut store = ParamStore::new();
            let p = TvlParams::init(&mut store, "tvl", d, &kernels, fusion, &mut rng)?;
            for len in [1, 5, 30] {
                let x = randn(&[len, d], &mut rng);
                let y = tvl::apply(&mut Eval::new(&store), &p, &x, &vec![true; len])?;
                shapes &= y.shape() == [len, d];
            }
        }
    }
    ok &= shapes;

    let mut fuse_exact = true;
    let mut branch_err = 0.0f64;
    let mut store = ParamStore::new();
    let p = TvlParams::init(&mut store, "tvl", d, &[3, 5, 7], Fusion::Max, &mut rng)?;
    for i in 0..20 {
        let len = 1 + (i * 7) % 30;
        let x = randn(&[len, d], &mut rng);
        let mut e = Eval::new(&store);
        let outs = tvl::branches(&mut e, &p, &x, &vec![true; len])?;
        let mut expected: Vec<Tensor> = p
            .convs
            .iter()
            .map(|c| conv_oracle(&x, store.get(c.weight)))
            .collect();
        expected.push(pool_oracle(&x));
        expected.push(x.clone());
        for (a, b) in outs.iter().zip(&expected) {
            branch_err = branch_err.max(a.max_abs_diff(b));
        }
        let fused = tvl::apply(&mut e, &p, &x, &vec![true; len])?;
        for r in 0..len {
            for c in 0..d {
                let m = outs.iter().map(|o| o.get2(r, c)).fold(f64::NEG_INFINITY, f64::max);
                fuse_exact &= fused.get2(r, c) == m;
            }
        }
    }
    ok &= fuse_exact && branch_err <= 1e-12;
    Ok((
        ok,
        format!("shapes kept: {shapes}; max fusion exact: {fuse_exact}; branch vs brute force {branch_err:.1e}"),
    ))
}

// ---------------------------------------------------------------------------
// 4-5. streaming and causality

fn schema() -> WorkflowSchema {
    WorkflowSchema::from_config(&SchemaConfig::default()).unwrap()
}

fn criterion_4() -> Outcome {
    let s = schema();
    let mut worst = 0.0f64;
    let configs = [
        ModelConfig::default(),
        ModelConfig { fashion: Fashion::I1, fusion: Fusion::Ave, ..ModelConfig::default() },
        ModelConfig { mode: AblationMode::TmrnetMinus, bank_len: 20, ..ModelConfig::default() },
        ModelConfig { mode: AblationMode::TmrnetPrime, ..ModelConfig::default() },
        ModelConfig { mode: AblationMode::BaselineSr, ..ModelConfig::default() },
    ];
    for (i, cfg) in configs.into_iter().enumerate() {
        let model = Model::new(cfg, 40 + i as u64)?;
        let v = generate(&s, 400 + i as u64, (60, 150))?;
        let online = run_video(&model, &v)?;
        let offline = offline_probs(&model, &v)?;
        worst = worst.max(online.probs.max_abs_diff(&offline));
    }
    Ok((worst <= 1e-9, format!("max per-frame probability difference {worst:.1e} over 5 videos")))
}

fn perturb_after(v: &LabeledSequence, t: usize, rng: &mut ChaCha8Rng) -> LabeledSequence {
    let mut out = v.clone();
    for s in t + 1..v.len() {
        for x in out.features.row_mut(s) {
            *x += 5.0 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

fn criterion_5() -> Outcome {
    let s = schema();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut pairs = 0;
    for i in 0..20u64 {
        let cfg = ModelConfig {
            d: 16,
            d_embed: 8,
            d_hidden: 16,
            mode: AblationMode::ALL[i as usize % 4],
            fashion: if i % 8 < 4 { Fashion::I2 } else { Fashion::I1 },
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, i)?;
        let v = generate(&s, 500 + i, (40, 90))?;
        let base = offline_probs(&model, &v)?;
        for _ in 0..5 {
            let t = rng.random_range(0..v.len() - 1);
            let w = perturb_after(&v, t, &mut rng);
            let probs = offline_probs(&model, &w)?;
            if probs.row(t) != base.row(t) {
                violations += 1;
            }
            pairs += 1;
        }
    }
    Ok((violations == 0, format!("{violations} of {pairs} (video, t) pairs changed under future perturbation")))
}

// ---------------------------------------------------------------------------
// 6. metrics

struct BruteScore {
    ac: f64,
    pr: f64,
    re: f64,
    ja: f64,
}

/// Set-based scoring written independently of the library.
fn brute_score(gt: &[usize], pred: &[usize], c: usize) -> BruteScore {
    use std::collections::BTreeSet;
    let set = |xs: &[usize], k: usize| -> BTreeSet<usize> {
        xs.iter().enumerate().filter(|(_, &x)| x == k).map(|(i, _)| i).collect()
    };
    let (mut pr, mut re, mut ja, mut n) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..c {
        let g = set(gt, k);
        let p = set(pred, k);
        if g.is_empty() && p.is_empty() {
            continue;
        }
        let inter = g.intersection(&p).count() as f64;
        let union = g.union(&p).count() as f64;
        pr += if p.is_empty() { 0.0 } else { inter / p.len() as f64 };
        re += if g.is_empty() { 0.0 } else { inter / g.len() as f64 };
        ja += inter / union;
        n += 1.0;
    }
    let ac = gt.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64;
    BruteScore { ac, pr: pr / n, re: re / n, ja: ja / n }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let c = rng.random_range(2..8);
        let n = rng.random_range(1..60);
        let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n)
            .map(|i| if rng.random::<f64>() < 0.6 { gt[i] } else { rng.random_range(0..c) })
            .collect();
        let s = score_video(&gt, &pred, c)?;
        let b = brute_score(&gt, &pred, c);
        let exact = |a: f64, b: f64| (a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0);
        if !(s.accuracy == b.ac && exact(s.precision, b.pr) && exact(s.recall, b.re) && exact(s.jaccard, b.ja)) {
            mismatches += 1;
        }
        let counts = confusion(&gt, &pred, c, false)?;
        let mut brute = vec![vec![0.0; c]; c];
        for (&g, &p) in gt.iter().zip(&pred) {
            brute[g][p] += 1.0;
        }
        if counts != brute {
            mismatches += 1;
        }
        let norm = confusion(&gt, &pred, c, true)?;
        for (row, b) in norm.iter().zip(&brute) {
            let total: f64 = b.iter().sum();
            let expect: Vec<f64> = b.iter().map(|x| if total > 0.0 { x / total } else { 0.0 }).collect();
            if *row != expect {
                mismatches += 1;
            }
        }
    }
    let w = score_video(&[1, 1, 2, 2], &[1, 2, 2, 2], 3)?;
    let worked = w.accuracy == 0.75 && (w.jaccard - 7.0 / 12.0).abs() <= 1e-15;
    Ok((
        mismatches == 0 && worked,
        format!(
            "{mismatches} mismatches over 100 random pairs; worked example AC {} JA {:.6} (7/12 = {:.6})",
            w.accuracy,
            w.jaccard,
            7.0 / 12.0
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7-8. ablation

fn criteria_7_8() -> Result<[(bool, String); 2]> {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let seeds = [1, 2, 3, 4, 5];
    let table = run_ablation(&cfg, &grid_variants(Grid::Acceptance), &seeds, &mut |msg| {
        eprintln!("  {msg}")
    })?;
    let secs = start.elapsed().as_secs_f64();
    let ja = |mode: AblationMode, len: usize| -> f64 {
        table
            .rows
            .iter()
            .find(|r| r.variant.mode == mode && r.variant.bank_len == len)
            .map(|r| 100.0 * r.median_jaccard())
            .unwrap_or(f64::NAN)
    };
    let base = ja(AblationMode::BaselineSr, 0);
    let minus = ja(AblationMode::TmrnetMinus, 30);
    let full = ja(AblationMode::Tmrnet, 30);
    let c7 = base < minus && minus < full && minus - base >= 3.0;
    let l = [base, ja(AblationMode::TmrnetMinus, 10), ja(AblationMode::TmrnetMinus, 20), minus];
    let monotone = l.windows(2).all(|w| w[1] >= w[0] - 1.0);
    let c8 = l[3] >= l[0] + 3.0 && l[3] >= l[1] && monotone;
    Ok([
        (
            c7,
            format!("median JA baseline {base:.1} < bank+NL {minus:.1} < full {full:.1} (5 seeds, {secs:.0}s)"),
        ),
        (
            c8,
            format!("median JA at L=0/10/20/30: {:.1} / {:.1} / {:.1} / {:.1}", l[0], l[1], l[2], l[3]),
        ),
    ])
}

// ---------------------------------------------------------------------------
// 9. training mechanics

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_9() -> Outcome {
    let base = ExperimentConfig::default();
    let mut ratios = Vec::new();
    let mut stable = true;
    for seed in 1..=3u64 {
        let cfg = base.with_seed(seed);
        let data = cfg.dataset()?;
        let mut model = Model::new(cfg.model.clone(), seed)?;
        let mut losses = Vec::new();
        let mut log = |r: &LogRecord| {
            losses.push(r.loss);
            Ok(())
        };
        let (_, banks) = stage1_pretrain(&mut model, &data.train, &data.val, &cfg.train, seed, &mut log)?;
        let k = 20.min(losses.len() / 2);
        ratios.push(mean(&losses[losses.len() - k..]) / mean(&losses[..k]));

        if seed == 1 {
            let prints = |b: &tmrnet::train::Banks| -> Vec<u64> {
                b.train.iter().chain(&b.val).map(MemoryBank::fingerprint).collect()
            };
            let before = prints(&banks);
            let rebuilt = build_banks(&model, &data.train)?;
            stable &= rebuilt.iter().map(MemoryBank::fingerprint).eq(before[..data.train.len()].iter().copied());
            let short = TrainConfig { stage2_iters: 40, stage3_iters: 20, ..cfg.train.clone() };
            let mut noop = |_: &LogRecord| Ok(());
            stage2_train(&mut model, &banks, &data.train, &data.val, &short, seed, &mut noop)?;
            stable &= prints(&banks) == before;
            stage3_finetune(&mut model, &banks, &data.train, &data.val, &short, seed, &mut noop)?;
            stable &= prints(&banks) == before;
        }
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median_ratio = sorted[1];

    let mut plateau = true;
    for patience in [1usize, 2, 3, 5] {
        let mut sched = PlateauScheduler::new(patience, 1e-4);
        let mut rates = TrainConfig::default().initial_rates(Stage::Train);
        let before = rates;
        let fired: Vec<usize> = (0..=3 * patience)
            .filter(|_| {
                let f = sched.observe(0.7);
                if f {
                    rates.divide(10.0);
                }
                f
            })
            .collect();
        let expected: Vec<usize> = (1..=3).map(|k| k * patience).collect();
        plateau &= fired == expected;
        let mut once = GroupRates(before.0);
        once.divide(1000.0);
        plateau &= rates.0.iter().zip(once.0).all(|(a, b)| (a - b).abs() <= 1e-15 * b.abs());
    }
    Ok((
        median_ratio < 0.8 && stable && plateau,
        format!(
            "stage-1 final/initial loss median {median_ratio:.3} (per seed {ratios:.3?}); banks stable: {stable}; plateau fires after exactly patience evals: {plateau}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 10. determinism and resume

fn small_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 11;
    cfg.data.n_train = 5;
    cfg.data.n_val = 2;
    cfg.data.n_test = 3;
    cfg.data.min_len = 60;
    cfg.data.max_len = 100;
    cfg.model.d = 16;
    cfg.model.d_embed = 8;
    cfg.model.d_hidden = 16;
    cfg.model.bank_len = 12;
    cfg.train.stage1_iters = 30;
    cfg.train.stage2_iters = 30;
    cfg.train.stage3_iters = 16;
    cfg.train.eval_every = 6;
    cfg.train.patience = 1;
    cfg.train.val_samples = 32;
    cfg.train.batch_size = 8;
    cfg
}

fn bytes(c: &Checkpoint) -> Vec<u8> {
    let mut v = Vec::new();
    c.write_to(&mut v).unwrap();
    v
}

struct Artifacts {
    checkpoints: Vec<Vec<u8>>,
    mid: Vec<Checkpoint>,
    metrics: Vec<u8>,
    svgs: Vec<String>,
    banks: tmrnet::train::Banks,
}

fn full_run(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let data = cfg.dataset()?;
    let mut mid = Vec::new();
    let mut hooks = Hooks {
        log: Box::new(|_| Ok(())),
        on_checkpoint: Box::new(|c| {
            mid.push(c.clone());
            Ok(())
        }),
        checkpoint_every: 10,
    };
    let run = train_pipeline(cfg, &data, None, &mut hooks)?;
    drop(hooks);
    let ev = evaluate(&run.model, &data.test, &cfg.eval, run_description(&cfg.model, cfg.seed))?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("metrics.json");
    ev.report.write_json(&path)?;
    let svgs = data
        .test
        .iter()
        .zip(&ev.predictions)
        .map(|(v, p)| ribbon_svg_string(&[("ground truth", &v.labels), ("model", p)]))
        .collect::<Result<_>>()?;
    Ok(Artifacts {
        checkpoints: run.checkpoints.iter().map(bytes).collect(),
        mid,
        metrics: std::fs::read(path)?,
        svgs,
        banks: run.banks,
    })
}

fn criterion_10() -> Outcome {
    let cfg = small_experiment();
    let a = full_run(&cfg)?;
    let b = full_run(&cfg)?;
    let same = a.checkpoints == b.checkpoints && a.metrics == b.metrics && a.svgs == b.svgs;

    let data = cfg.dataset()?;
    let final_ckpt = a.checkpoints.last().cloned().unwrap_or_default();
    let mut resumed = Vec::new();
    for stage in Stage::ALL {
        let Some(mid) = a
            .mid
            .iter()
            .find(|c| c.state.stage == stage && c.state.iteration > 0 && c.state.iteration < cfg.train.iterations(stage))
        else {
            resumed.push(format!("no mid-stage checkpoint for stage {}", stage.number()));
            continue;
        };
        // through the on-disk format, as a real restart would
        let ckpt = Checkpoint::read_from(&mut bytes(mid).as_slice())?;
        let banks = (stage != Stage::Pretrain).then(|| a.banks.clone());
        let run = train_pipeline(&cfg, &data, Some(Resume { checkpoint: ckpt, banks }), &mut Hooks::silent())?;
        let ok = run.checkpoints.last().map(bytes) == Some(final_ckpt.clone());
        resumed.push(format!(
            "resume stage {} at iteration {}: {}",
            stage.number(),
            mid.state.iteration,
            if ok { "bit-exact" } else { "DIFFERS" }
        ));
    }
    let resume_ok = resumed.iter().all(|s| s.ends_with("bit-exact"));
    Ok((
        same && resume_ok,
        format!("two runs identical (checkpoints, metrics, SVGs): {same}; {}", resumed.join("; ")),
    ))
}

// ---------------------------------------------------------------------------
// 11. latency

fn criterion_11() -> Outcome {
    let model = Model::new(ModelConfig::default(), 3)?;
    let v = generate(&schema(), 77, (300, 300))?;
    let run = run_video(&model, &v)?;
    let ms = run.latency.mean_us / 1000.0;
    Ok((
        ms <= 80.0,
        format!(
            "mean step latency {ms:.3} ms (p95 {:.3} ms) over {} frames at d=64, L=30",
            run.latency.p95_us / 1000.0,
            run.latency.frames
        ),
    ))
}

fn report(results: &mut BTreeMap<u8, (bool, String)>, n: u8, name: &str, outcome: Outcome) {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {n:>2} {name}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    results.insert(n, (pass, detail));
}

/// `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.
fn selected() -> impl Fn(u8) -> bool {
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    move |n| only.as_ref().is_none_or(|o| o.contains(&n))
}

fn main() {
    // `cargo test` passes harness flags; listing mode must not run anything
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let want = selected();
    let mut results = BTreeMap::new();
    let checks: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", criterion_1),
        (2, "operator identities", criterion_2),
        (3, "temporal variation layer", criterion_3),
        (4, "online/offline equivalence", criterion_4),
        (5, "causality", criterion_5),
        (6, "metrics oracle", criterion_6),
        (9, "training mechanics", criterion_9),
        (10, "determinism and resume", criterion_10),
        (11, "streaming latency", criterion_11),
    ];
    for (n, name, check) in checks {
        if want(n) {
            report(&mut results, n, name, check());
        }
    }
    if want(7) || want(8) {
        match criteria_7_8() {
            Ok([c7, c8]) => {
                report(&mut results, 7, "ablation ordering", Ok(c7));
                report(&mut results, 8, "bank length trend", Ok(c8));
            }
            Err(e) => {
                let msg = format!("error: {e}");
                report(&mut results, 7, "ablation ordering", Ok((false, msg.clone())));
                report(&mut results, 8, "bank length trend", Ok((false, msg)));
            }
        }
    }
    let failed: Vec<u8> = results.iter().filter(|(_, (p, _))| !p).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
