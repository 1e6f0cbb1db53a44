//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! dataset-dependent parts of criterion 5 run only when the files are found
//! under `DT_DATA_DIR`; otherwise they report SKIP with the reason.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use deeptraverse::checkpoint::Checkpoint;
use deeptraverse::config::ConfigFile;
use deeptraverse::session::{load_data, Session};
use deeptraverse_core::accounting::cost_report;
use deeptraverse_core::autograd::Tape;
use deeptraverse_core::blocks::{dfs_bb_forward, dfs_eb_forward, BacktrackParams, BlockShape, ExtractParams, RecursiveParams};
use deeptraverse_core::gradcheck::suite::{run_block_checks, run_network_check, SuiteConfig, DEFAULT_SEED};
use deeptraverse_core::kernels::oracle::{
    avg_pool_oracle, batchnorm_inference_oracle, batchnorm_train_oracle, conv2d_oracle, relu_oracle, sigmoid_oracle,
    FlopCounter,
};
use deeptraverse_core::kernels::{
    adaptive_avg_pool_1x1, batch_norm_inference, batch_norm_train, conv2d, relu, sigmoid, ConvParams, ConvSpec,
};
use deeptraverse_core::layers::{Pass, Stats};
use deeptraverse_core::params::{ParamStore, StatsStore};
use deeptraverse_core::train::evaluate;
use deeptraverse_core::{build_model, Mode, ModelConfig, StageConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_CASES: usize = 100;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const GRAD_TOL: f64 = 1e-4;
const GRAD_MIN_COORDS: usize = 200;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const UNROLL_FORWARD_TOL: f64 = 1e-12;
const UNROLL_GRAD_TOL: f64 = 1e-10;
const HALF_TOL: f64 = 1e-12;
const SATURATED_REL_TOL: f64 = 1e-7;
const BLOBS_EPOCHS: usize = 10;
const MNIST_FLOOR: f64 = 0.97;
const MNIST_BUDGET: Duration = Duration::from_secs(45 * 60);
const CIFAR_FLOOR: f64 = 0.60;
const CIFAR_BUDGET: Duration = Duration::from_secs(90 * 60);
const PARAM_CEILING: u64 = 1_000_000;
const FLOP_CEILING: u64 = 100_000_000;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_act(r: &mut ChaCha8Rng) -> Tensor {
    let shape = [r.gen_range(1..=3), r.gen_range(1..=6), r.gen_range(1..=7), r.gen_range(1..=7)];
    let scale = r.gen_range(0.1..10.0);
    Tensor::randn(&shape, scale, r)
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut r = rng(1001);
    let mut worst = [0.0f64; 6];
    for _ in 0..ORACLE_CASES {
        let n = r.gen_range(1..=3);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let depthwise = r.gen_bool(0.5);
        let c_in = r.gen_range(1..=5);
        let c_out = if depthwise { c_in } else { r.gen_range(1..=6) };
        let groups = if depthwise { c_in } else { 1 };
        let spec = ConvSpec::new(r.gen_range(1..=2), (k - 1) / 2, groups);
        let (h, w) = (r.gen_range(k..=9), r.gen_range(k..=9));
        let x = Tensor::randn(&[n, c_in, h, w], 1.0, &mut r);
        let weight = Tensor::randn(&[c_out, c_in / groups, k, k], 1.0, &mut r);
        let bias = r.gen_bool(0.5).then(|| Tensor::randn(&[c_out], 1.0, &mut r));
        let p = ConvParams { weight, bias, spec };
        worst[0] = worst[0].max(conv2d(&x, &p).unwrap().max_abs_diff(&conv2d_oracle(&x, &p).unwrap()).unwrap());

        let mut x = random_act(&mut r);
        if x.shape()[0] * x.shape()[2] * x.shape()[3] < 2 {
            x = Tensor::randn(&[2, x.shape()[1], 2, 2], 1.0, &mut r);
        }
        let c = x.shape()[1];
        let gamma = Tensor::randn(&[c], 1.0, &mut r);
        let beta = Tensor::randn(&[c], 1.0, &mut r);
        let (fast, _, _) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        worst[1] = worst[1].max(fast.max_abs_diff(&batchnorm_train_oracle(&x, &gamma, &beta, 1e-5).unwrap()).unwrap());
        let mean = Tensor::randn(&[c], 1.0, &mut r);
        let var = Tensor::rand_uniform(&[c], 0.1, 3.0, &mut r);
        let mut fc = FlopCounter::default();
        let fast = batch_norm_inference(&x, &gamma, &beta, &mean, &var, 1e-5).unwrap();
        let slow = batchnorm_inference_oracle(&x, &gamma, &beta, &mean, &var, 1e-5, &mut fc).unwrap();
        worst[2] = worst[2].max(fast.max_abs_diff(&slow).unwrap());

        let x = random_act(&mut r);
        worst[3] = worst[3].max(adaptive_avg_pool_1x1(&x).unwrap().max_abs_diff(&avg_pool_oracle(&x, &mut fc).unwrap()).unwrap());
        worst[4] = worst[4].max(relu(&x).max_abs_diff(&relu_oracle(&x, &mut fc)).unwrap());
        worst[5] = worst[5].max(sigmoid(&x).max_abs_diff(&sigmoid_oracle(&x, &mut fc)).unwrap());
    }
    let elapsed = start.elapsed();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    check(
        max < ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!(
            "{ORACLE_CASES} cases per kernel; max abs diff conv {:.1e}, bn-train {:.1e}, bn-infer {:.1e}, pool {:.1e}, relu {:.1e}, sigmoid {:.1e}; {:.1}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            worst[5],
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let cfg = SuiteConfig { seed: DEFAULT_SEED, ..SuiteConfig::default() };
    let mut results = run_block_checks(&cfg).unwrap();
    results.push(run_network_check(&cfg, "DT-Tiny end to end", &ModelConfig::dt_tiny(3, 10)).unwrap());
    let elapsed = start.elapsed();
    let mut ok = elapsed < GRAD_BUDGET;
    let mut parts = Vec::new();
    for r in &results {
        let sampled_enough = r.report.tensors.iter().all(|t| t.checked >= GRAD_MIN_COORDS.min(t.numel));
        let pass = r.report.passes(GRAD_TOL) && sampled_enough;
        ok &= pass;
        parts.push(format!("{} {:.1e}{}", r.component, r.report.max_rel_err, if pass { "" } else { " (FAIL)" }));
    }
    check(ok, format!("{}; seed {DEFAULT_SEED}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn sharing_grid() -> Vec<ModelConfig> {
    let small = ModelConfig {
        input_channels: 3,
        stem_channels: 8,
        stages: vec![StageConfig::new(8, 1, 1), StageConfig::new(16, 1, 2)],
        reduction: 4,
        recursion: 1,
        dropout_rate: 0.1,
        num_classes: 10,
        depthwise_kernel: 3,
        min_excitation_width: 4,
    };
    let mut wide = ModelConfig::dt_tiny(3, 100);
    wide.stages.push(StageConfig::new(128, 2, 2));
    let mut odd = small.clone();
    odd.depthwise_kernel = 5;
    odd.min_excitation_width = 1;
    vec![small, ModelConfig::dt_tiny(3, 10), ModelConfig::dt_tiny(1, 10), wide, odd]
}

fn parameter_sharing() -> Verdict {
    let grid = sharing_grid();
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, base) in grid.iter().enumerate() {
        let mut params = Vec::new();
        let mut flops = Vec::new();
        for r in [1usize, 2, 4, 8] {
            let cfg = base.clone().with_recursion(r);
            let report = cost_report(&cfg, (32, 32), "grid").unwrap();
            let built = build_model(&cfg, 0).unwrap().num_params() as u64;
            ok &= built == report.total_params;
            params.push(report.total_params);
            flops.push(report.total_flops as i128);
        }
        let constant = params.iter().all(|&p| p == params[0]);
        let slope = flops[1] - flops[0];
        let affine = slope > 0 && flops[2] - flops[1] == 2 * slope && flops[3] - flops[2] == 4 * slope;
        ok &= constant && affine;
        notes.push(format!("config {i}: params {} flops {}+{}R", params[0], flops[0] - slope, slope));
    }
    check(ok, format!("R in {{1,2,4,8}}; {}", notes.join("; ")))
}

fn unrolling_equivalence() -> Verdict {
    let shape = BlockShape {
        in_channels: 3,
        out_channels: 4,
        stride: 1,
        kernel: 3,
        recursion: 2,
        reduction: 4,
        min_excitation_width: 1,
        dropout_rate: 0.1,
    };
    let mut shared = ParamStore::new();
    let mut stats = StatsStore::new();
    let ext = ExtractParams::new(&mut shared, &mut stats, &mut rng(1), "ext", &shape).unwrap();
    let rec = RecursiveParams::new(&mut shared, &mut stats, &mut rng(2), "rec", 4, 3).unwrap();
    // non-trivial batchnorm affines so every parameter carries gradient
    let mut r = rng(3);
    for id in shared.ids().collect::<Vec<_>>() {
        for v in shared.get_mut(id).data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    let mut unrolled = ParamStore::new();
    let mut ustats = StatsStore::new();
    let uext = ExtractParams::new(&mut unrolled, &mut ustats, &mut rng(4), "ext", &shape).unwrap();
    let copy1 = RecursiveParams::new(&mut unrolled, &mut ustats, &mut rng(5), "copy1", 4, 3).unwrap();
    let copy2 = RecursiveParams::new(&mut unrolled, &mut ustats, &mut rng(6), "copy2", 4, 3).unwrap();
    for (_, p) in shared.iter() {
        let targets = match p.name.strip_prefix("rec") {
            Some(rest) => vec![format!("copy1{rest}"), format!("copy2{rest}")],
            None => vec![p.name.clone()],
        };
        for t in targets {
            let id = unrolled.find(&t).unwrap();
            *unrolled.get_mut(id) = p.value.clone();
        }
    }
    let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng(7));
    let target = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng(8));

    let mut ts = Tape::new();
    let mut rs = rng(9);
    let mut pass = Pass { tape: &mut ts, params: &shared, stats: Stats::Frozen(&stats), mode: Mode::Train, rng: &mut rs };
    let xs = pass.tape.constant(x.clone());
    let out_s = dfs_eb_forward(&mut pass, xs, &ext, &rec, 2).unwrap();

    let mut tu = Tape::new();
    let mut ru = rng(9);
    let mut pass = Pass { tape: &mut tu, params: &unrolled, stats: Stats::Frozen(&ustats), mode: Mode::Train, rng: &mut ru };
    let xu = pass.tape.constant(x);
    let f0 = uext.forward(&mut pass, xu).unwrap();
    let inc1 = copy1.forward(&mut pass, f0).unwrap();
    let f1 = pass.tape.add(f0, inc1).unwrap();
    let inc2 = copy2.forward(&mut pass, f1).unwrap();
    let out_u = pass.tape.add(f1, inc2).unwrap();

    let forward = ts.value(out_s).max_abs_diff(tu.value(out_u)).unwrap();
    let loss = |tape: &mut Tape, out| {
        let t = tape.constant(target.clone());
        let prod = tape.mul(out, t).unwrap();
        tape.sum(prod).unwrap()
    };
    let ls = loss(&mut ts, out_s);
    let lu = loss(&mut tu, out_u);
    let gs = ts.backward(ls).unwrap();
    let gu = tu.backward(lu).unwrap();
    let mut grad = 0.0f64;
    for (id, p) in shared.iter() {
        let g = gs.param(id).unwrap();
        let expected = match p.name.strip_prefix("rec") {
            Some(rest) => {
                let a = gu.param(unrolled.find(&format!("copy1{rest}")).unwrap()).unwrap();
                let b = gu.param(unrolled.find(&format!("copy2{rest}")).unwrap()).unwrap();
                a.zip_map(b, |u, v| u + v).unwrap()
            }
            None => gu.param(unrolled.find(&p.name).unwrap()).unwrap().clone(),
        };
        grad = grad.max(g.max_abs_diff(&expected).unwrap());
    }
    check(
        forward < UNROLL_FORWARD_TOL && grad < UNROLL_GRAD_TOL,
        format!("R=2 training mode; forward diff {forward:.1e}, shared-vs-summed gradient diff {grad:.1e}"),
    )
}

fn blobs_config(epochs: usize) -> ConfigFile {
    ConfigFile::parse(&format!(
        "config_version = 1\n[train]\nseed = 7\nepochs = {epochs}\n[data]\ndataset = \"blobs\"\nblobs_train = 1000\nblobs_classes = 4\n"
    ))
    .unwrap()
}

fn blobs_training() -> Verdict {
    let run = blobs_config(BLOBS_EPOCHS).resolve().unwrap();
    let data = load_data(&run.data, None).unwrap();
    let mut session = Session::new(run).unwrap();
    let mut accs = Vec::new();
    while !session.finished() {
        session.epoch(&data).unwrap();
        let acc = evaluate(&session.model, &data.train, 256).unwrap().top1;
        accs.push(acc);
        if acc == 1.0 {
            break;
        }
    }
    let shown: Vec<String> = accs.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
    check(
        accs.last() == Some(&1.0),
        format!("DT-Tiny on 1000 blobs, 4 classes; train accuracy per epoch [{}]%", shown.join(", ")),
    )
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("DT_DATA_DIR").map(PathBuf::from)
}

fn has_files(dir: &Path, names: &[&str]) -> bool {
    names.iter().all(|n| dir.join(n).is_file())
}

fn train_on(config: &str, dir: &Path, floor: f64, budget: Duration) -> Verdict {
    let mut file = ConfigFile::parse(config).unwrap();
    file.data.dir = Some(dir.to_path_buf());
    let run = match file.resolve() {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let start = Instant::now();
    let data = match load_data(&run.data, None) {
        Ok(d) => d,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let mut session = Session::new(run).unwrap();
    let mut top1 = 0.0;
    while !session.finished() {
        top1 = session.epoch(&data).unwrap().test_top1;
    }
    let elapsed = start.elapsed();
    check(
        top1 >= floor && elapsed < budget,
        format!("test top-1 {:.2}% (floor {:.0}%), {:.1} min", 100.0 * top1, 100.0 * floor, elapsed.as_secs_f64() / 60.0),
    )
}

fn mnist_training() -> Verdict {
    let names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
    let Some(dir) = data_dir().map(|d| d.join("mnist")).filter(|d| has_files(d, &names)) else {
        return Verdict::Skip("MNIST not found under $DT_DATA_DIR/mnist".into());
    };
    let cfg = "config_version = 1\n[train]\nseed = 1\nepochs = 5\nbatch_size = 128\nlr = 0.05\n[data]\ndataset = \"mnist\"\n";
    train_on(cfg, &dir, MNIST_FLOOR, MNIST_BUDGET)
}

fn cifar_training() -> Verdict {
    let names = ["data_batch_1.bin", "test_batch.bin"];
    let Some(dir) = data_dir()
        .map(|d| d.join("cifar-10-batches-bin"))
        .filter(|d| has_files(d, &names))
    else {
        return Verdict::Skip("CIFAR-10 not found under $DT_DATA_DIR/cifar-10-batches-bin".into());
    };
    let cfg = "config_version = 1\n[train]\nseed = 1\nepochs = 20\n[data]\ndataset = \"cifar10\"\ntrain_subset = 5000\n";
    train_on(cfg, &dir, CIFAR_FLOOR, CIFAR_BUDGET)
}

fn attention_semantics() -> Verdict {
    let channels = 8;
    let stats = StatsStore::new();
    let run = |params: &ParamStore, bb: &BacktrackParams, f: &Tensor| {
        let mut t = Tape::new();
        let mut r = rng(0);
        let mut pass = Pass { tape: &mut t, params, stats: Stats::Frozen(&stats), mode: Mode::Eval, rng: &mut r };
        let node = pass.tape.constant(f.clone());
        let s = bb.attention(&mut pass, node).unwrap();
        let out = dfs_bb_forward(&mut pass, node, bb).unwrap();
        (t.value(s).clone(), t.value(out).clone())
    };
    let fixed = |b2: f64| {
        let mut params = ParamStore::new();
        let bb = BacktrackParams::new(&mut params, &mut rng(1), "bb", channels, 4, 1).unwrap();
        for id in [bb.w1.weight, bb.w2.weight, bb.w1.bias.unwrap()] {
            params.get_mut(id).data_mut().fill(0.0);
        }
        params.get_mut(bb.w2.bias.unwrap()).data_mut().fill(b2);
        (params, bb)
    };

    let mut inside = true;
    let mut count = 0usize;
    for seed in 0..200u64 {
        let mut params = ParamStore::new();
        let bb = BacktrackParams::new(&mut params, &mut rng(seed), "bb", channels, 4, 1).unwrap();
        let mut r = rng(seed ^ 0xA77);
        for id in params.ids().collect::<Vec<_>>() {
            for v in params.get_mut(id).data_mut() {
                *v = r.gen_range(-2.0..2.0);
            }
        }
        let f = Tensor::randn(&[2, channels, 4, 4], r.gen_range(0.01..5.0), &mut r);
        let (s, _) = run(&params, &bb, &f);
        inside &= s.data().iter().all(|&v| v > 0.0 && v < 1.0);
        count += s.numel();
    }

    let f = Tensor::randn(&[2, channels, 3, 3], 2.0, &mut rng(11));
    let (params, bb) = fixed(0.0);
    let half = run(&params, &bb, &f).1.max_abs_diff(&f.scale(0.5)).unwrap();
    let (params, bb) = fixed(20.0);
    let out = run(&params, &bb, &f).1;
    let rel = out.data().iter().zip(f.data()).map(|(o, x)| (o - x).abs() / x.abs()).fold(0.0, f64::max);
    check(
        inside && half < HALF_TOL && rel < SATURATED_REL_TOL,
        format!("{count} excitation values in (0,1): {inside}; b2=0 diff from 0.5x {half:.1e}; b2=20 relative diff {rel:.1e}"),
    )
}

fn determinism_and_persistence() -> Verdict {
    let mut cfg = blobs_config(3);
    cfg.data.blobs_train = Some(300);
    cfg.data.augment = Some(deeptraverse::config::AugmentKind::FlipCrop);
    let run = cfg.resolve().unwrap();
    let data = load_data(&run.data, None).unwrap();
    let bits = |s: &Session| {
        s.history
            .iter()
            .flat_map(|r| [r.lr, r.train_loss, r.train_acc, r.test_loss, r.test_top1, r.test_top5])
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    let params = |s: &Session| s.model.params.iter().flat_map(|(_, p)| p.value.data().to_vec()).map(f64::to_bits).collect::<Vec<_>>();

    let mut a = Session::new(run.clone()).unwrap();
    let mut b = Session::new(run.clone()).unwrap();
    for _ in 0..3 {
        a.epoch(&data).unwrap();
        b.epoch(&data).unwrap();
    }
    let repeatable = bits(&a) == bits(&b);

    let path = Path::new("in-memory.ckpt");
    let ckpt = a.checkpoint(data.normalization.as_ref());
    let restored = Checkpoint::decode(&ckpt.encode(), path).unwrap();
    let (_, model) = deeptraverse::session::model_from_checkpoint(&restored, path).unwrap();
    let batch = data.test.batch(&(0..32).collect::<Vec<_>>()).unwrap().0;
    let before = a.model.logits(&batch).unwrap();
    let after = model.logits(&batch).unwrap();
    let logits_equal = before.data().iter().map(|v| v.to_bits()).eq(after.data().iter().map(|v| v.to_bits()));

    let mut c = Session::new(run).unwrap();
    c.epoch(&data).unwrap();
    c.epoch(&data).unwrap();
    let mid = Checkpoint::decode(&c.checkpoint(data.normalization.as_ref()).encode(), path).unwrap();
    let mut resumed = Session::resume(&mid, path).unwrap();
    resumed.epoch(&data).unwrap();
    let resume_equal = params(&resumed) == params(&a) && bits(&resumed) == bits(&a);

    check(
        repeatable && logits_equal && resume_equal,
        format!(
            "two runs bit-identical: {repeatable}; checkpoint logits bit-identical: {logits_equal}; 2+resume+1 == 3 epochs: {resume_equal}"
        ),
    )
}

fn cost_sanity() -> Verdict {
    let r = cost_report(&ModelConfig::dt_tiny(3, 10), (32, 32), "DT-Tiny").unwrap();
    check(
        r.total_params < PARAM_CEILING && r.total_flops < FLOP_CEILING,
        format!("DT-Tiny at 32x32: {} params, {:.4} GFLOPs (1 MAC = 2 FLOPs)", r.total_params, r.total_flops as f64 / 1e9),
    )
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 oracle equivalence", oracle_equivalence),
        ("2 gradient correctness", gradient_correctness),
        ("3 parameter sharing", parameter_sharing),
        ("4 unrolling equivalence", unrolling_equivalence),
        ("5a blobs training", blobs_training),
        ("5b MNIST training", mnist_training),
        ("5c CIFAR-10 subset training", cifar_training),
        ("6 attention semantics", attention_semantics),
        ("7 determinism and persistence", determinism_and_persistence),
        ("8 cost sanity", cost_sanity),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let (tag, detail) = match f() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {name}: {detail}");
    }
    if failed > 0 {
        println!("{failed} criterion checks failed");
        std::process::exit(1);
    }
}
