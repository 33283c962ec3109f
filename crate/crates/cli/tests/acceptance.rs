//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion failed. Runs without the libtest harness
//! so the report is never captured.
//!
//! The criteria run sequentially inside one test so the timing-sensitive
//! ones are not competing with each other for cores.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crnet_cli::config::RunConfig;
use crnet_cli::{cmd_eval, CONFIG_FILE};
use crnet_core::blocks::{
    channel_attention, conv_enhancement_block, conv_ffn, declare_channel_attention, declare_conv_ffn,
    declare_enhancement_block, declare_freq_fuse, declare_multi_branch, declare_window_attention,
    freq_fuse, frequency_separate, multi_branch_block, window_self_attention, CebKernel, FfnMode, MbbSplit,
};
use crnet_core::model::{
    build_ablation_variant, count_params, forward, param_specs, AblationVariant, CRNetConfig, ExposureStack,
    FlowField,
};
use crnet_core::objective::{l1_tonemapped_loss, mu_law, psnr, ssim};
use crnet_core::synth::{generate_dataset, write_dataset, DegradeSpec, SceneSpec};
use crnet_core::tensor::{finite_difference_check, Conv2d, PoolKind, DEFAULT_FD_EPS};
use crnet_core::train::{lr_at, train, TrainConfig, TrainState, CHECKPOINT_FILE};
use crnet_core::{ModelParams, ParamBuilder, ParamScope, ParamSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn specs(f: impl FnOnce(&mut ParamBuilder)) -> Vec<ParamSpec> {
    let mut b = ParamBuilder::new();
    f(&mut b);
    b.finish()
}

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

// ---- gradient suite -------------------------------------------------------

type BlockFn = fn(&Tensor<f64>, &ParamScope<'_, f64>) -> crnet_core::Result<Tensor<f64>>;

struct BlockCase {
    name: &'static str,
    specs: Vec<ParamSpec>,
    weight: &'static str,
    run: BlockFn,
}

/// Worst relative error of one block against central differences, with
/// respect to its input and to one of its weights.
fn block_gradient(case: &BlockCase, seed: u64) -> Result<f64, String> {
    let params = ModelParams::<f64>::init(&case.specs, seed);
    let x = random(&[1, 4, 8, 8], seed + 1, -1.0, 1.0);
    // a random projection keeps every output element in play
    let proj = random(&[1, 4, 8, 8], seed + 2, -1.0, 1.0);
    let run = case.run;
    let wrt_input = finite_difference_check(
        |t| Ok(run(t, &params.root())?.mul(&proj)?.sum_all()),
        &x,
        DEFAULT_FD_EPS,
    )
    .map_err(err)?;
    let w0 = params.get(case.weight).map_err(err)?.clone();
    let wrt_weight = finite_difference_check(
        |w| {
            let mut p = params.clone();
            p.set(case.weight, w.clone())?;
            Ok(run(&x, &p.root())?.mul(&proj)?.sum_all())
        },
        &w0,
        DEFAULT_FD_EPS,
    )
    .map_err(err)?;
    Ok(wrt_input.max(wrt_weight))
}

fn block_cases() -> Vec<BlockCase> {
    vec![
        BlockCase {
            name: "window_self_attention",
            specs: specs(|b| declare_window_attention(b, 4)),
            weight: "q.weight",
            run: |x, p| window_self_attention(x, p, 2, 4),
        },
        BlockCase {
            name: "multi_branch_block",
            specs: specs(|b| declare_multi_branch(b, 4, MbbSplit::default())),
            weight: "a1.weight",
            run: |x, p| multi_branch_block(x, p, MbbSplit::default()),
        },
        BlockCase {
            name: "channel_attention",
            specs: specs(|b| declare_channel_attention(b, 4, 2)),
            weight: "down.weight",
            run: |x, p| channel_attention(x, p, 2),
        },
        BlockCase {
            name: "freq_fuse",
            specs: specs(|b| declare_freq_fuse(b, 4, 2)),
            weight: "merge.weight",
            run: |x, p| {
                let pair = frequency_separate(x, PoolKind::Avg)?;
                freq_fuse(&pair.high, &pair.low, p, 2)
            },
        },
        BlockCase {
            name: "conv_ffn",
            specs: specs(|b| declare_conv_ffn(b, 4, FfnMode::Inverted, 4)),
            weight: "expand.weight",
            run: |x, p| conv_ffn(x, p),
        },
        BlockCase {
            name: "conv_enhancement_block",
            specs: specs(|b| declare_enhancement_block(b, 4, CebKernel::Dw7, FfnMode::Inverted, 4)),
            weight: "dw7.weight",
            run: |x, p| conv_enhancement_block(x, p, CebKernel::Dw7),
        },
    ]
}

fn tiny_model() -> CRNetConfig {
    CRNetConfig {
        base_channels: 4,
        n_ceb: 1,
        n_hfem: 1,
        attn_window: 4,
        attn_heads: 2,
        ca_reduction: 2,
        ..CRNetConfig::default()
    }
}

fn random_stack(h: usize, w: usize, seed: u64) -> ExposureStack<f64> {
    let frames = (0..5).map(|i| random(&[4, h, w], seed + i, 0.0, 1.0)).collect();
    ExposureStack::new(frames, vec![1.0, 4.0, 16.0, 64.0, 256.0]).unwrap()
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut check = |name: &str, worst: f64, tol: f64| -> Result<(), String> {
        lines.push(format!("{name}={worst:.1e}"));
        ensure(worst <= tol, || format!("{name}: relative error {worst:.3e} > {tol:e}"))
    };

    // elementwise primitives, evaluated away from kinks
    let pos = random(&[1, 4, 8, 8], 11, 0.1, 2.0);
    let any = random(&[1, 4, 8, 8], 12, -2.0, 2.0);
    let other = random(&[1, 4, 8, 8], 13, 0.5, 1.5);
    let elementwise: [(&str, &Tensor<f64>, fn(&Tensor<f64>, &Tensor<f64>) -> crnet_core::Result<Tensor<f64>>); 11] = [
        ("add", &any, |x, o| x.add(o)),
        ("sub", &any, |x, o| x.sub(o)),
        ("mul", &any, |x, o| x.mul(o)),
        ("div", &any, |x, o| x.div(o)),
        ("exp", &any, |x, _| Ok(x.exp())),
        ("tanh", &any, |x, _| Ok(x.tanh())),
        ("sigmoid", &any, |x, _| Ok(x.sigmoid())),
        ("gelu", &any, |x, _| Ok(x.gelu())),
        ("powf", &pos, |x, _| Ok(x.powf(1.0 / 2.2))),
        ("ln_1p", &pos, |x, _| Ok(x.ln_1p())),
        ("mu_law", &pos, |x, _| Ok(mu_law(x, 5000.0))),
    ];
    for (name, x, f) in elementwise {
        let worst = finite_difference_check(|t| Ok(f(t, &other)?.sum_all()), x, DEFAULT_FD_EPS).map_err(err)?;
        check(name, worst, 1e-6)?;
    }
    let abs_in = any.add_scalar(0.0);
    let worst = finite_difference_check(|t| Ok(t.abs().sum_all()), &abs_in, DEFAULT_FD_EPS).map_err(err)?;
    check("abs", worst, 1e-6)?;
    let target = random(&[1, 4, 8, 8], 14, 0.1, 2.0);
    let worst =
        finite_difference_check(|t| l1_tonemapped_loss(t, &target, 5000.0), &pos, DEFAULT_FD_EPS).map_err(err)?;
    check("l1_tonemapped_loss", worst, 1e-6)?;

    // structural primitives
    let proj = random(&[1, 4, 8, 8], 15, -1.0, 1.0);
    let w3 = random(&[4, 4, 3, 3], 16, -0.5, 0.5);
    let flow = random(&[1, 2, 8, 8], 17, -1.3, 1.3).add_scalar(0.37);
    let structural: [(&str, fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> crnet_core::Result<Tensor<f64>>); 8] = [
        ("conv2d", |x, w, _| x.conv2d(w, None, Conv2d::same(3))),
        ("avg_pool2d", |x, _, _| x.avg_pool2d(2, 2)?.bilinear_upsample(8, 8)),
        ("max_pool2d", |x, _, _| x.max_pool2d(2, 2)?.bilinear_upsample(8, 8)),
        ("warp", |x, _, f| x.warp(f)),
        ("softmax", |x, _, _| x.softmax(3)),
        ("matmul", |x, _, _| x.reshape(&[4, 8, 8])?.matmul(&x.reshape(&[4, 8, 8])?)?.reshape(&[1, 4, 8, 8])),
        ("global_avg_pool", |x, _, _| {
            let g = x.global_avg_pool()?;
            x.mul(&g.reshape(&[1, 4, 1, 1])?.bilinear_upsample(8, 8)?)
        }),
        ("frequency_separate", |x, _, _| {
            let pair = frequency_separate(x, PoolKind::Avg)?;
            pair.high.mul(&pair.high)?.add(&pair.low.bilinear_upsample(8, 8)?)
        }),
    ];
    for (name, f) in structural {
        let worst = finite_difference_check(|t| Ok(f(t, &w3, &flow)?.mul(&proj)?.sum_all()), &any, DEFAULT_FD_EPS)
            .map_err(err)?;
        check(name, worst, 1e-3)?;
    }
    let worst = finite_difference_check(
        |w| Ok(any.conv2d(w, None, Conv2d::same(3))?.mul(&proj)?.sum_all()),
        &w3,
        DEFAULT_FD_EPS,
    )
    .map_err(err)?;
    check("conv2d.weight", worst, 1e-3)?;

    for (i, case) in block_cases().iter().enumerate() {
        let worst = block_gradient(case, 100 + i as u64)?;
        check(case.name, worst, 1e-3)?;
    }

    // full forward of a tiny model, through one fusion weight
    let cfg = tiny_model();
    let params = ModelParams::<f64>::init(&param_specs(&cfg), 3);
    let stack = random_stack(8, 8, 40);
    let flows = vec![FlowField::zeros(8, 8); 4];
    let name = "hfem0.fuse.merge.weight";
    let w0 = params.get(name).map_err(err)?.clone();
    let worst = finite_difference_check(
        |w| {
            let mut p = params.clone();
            p.set(name, w.clone())?;
            Ok(forward(&stack, &p, &cfg, Some(&flows))?.sum_all())
        },
        &w0,
        DEFAULT_FD_EPS,
    )
    .map_err(err)?;
    check("tiny_forward", worst, 1e-3)?;

    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("suite took {elapsed:?}"))?;
    Ok(format!("{} checks in {:.1}s", lines.len(), elapsed.as_secs_f64()))
}

// ---- frequency identity ---------------------------------------------------

fn separation_identity() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [
            rng.random_range(1..3),
            rng.random_range(1..9),
            2 * rng.random_range(1..9),
            2 * rng.random_range(1..9),
        ];
        let f = random(&shape, 1000 + seed, -10.0, 10.0);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let pair = frequency_separate(&f, kind).map_err(err)?;
            let back = pair.high.add(&pair.low.bilinear_upsample(shape[2], shape[3]).map_err(err)?).map_err(err)?;
            for (a, b) in back.data().iter().zip(f.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max abs error {worst:e}"))?;
    Ok(format!("50 tensors, max abs error {worst:.1e}"))
}

// ---- metric oracles -------------------------------------------------------

fn metric_oracles() -> Check {
    let ends = mu_law(&Tensor::from_vec(&[2], vec![0.0f64, 1.0]).unwrap(), 5000.0);
    ensure(ends.data() == [0.0, 1.0], || format!("T(0), T(1) = {:?}", ends.data()))?;
    let a = Tensor::from_vec(&[4], vec![0.0f64; 4]).unwrap();
    let b = Tensor::from_vec(&[4], vec![0.1f64; 4]).unwrap();
    let p = psnr(&a, &b, 1.0).map_err(err)?;
    ensure((p - 20.0).abs() < 1e-9, || format!("psnr {p}"))?;

    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for i in 0..16 {
        for j in 0..16 {
            let v = ((i * 7 + j * 13) % 17) as f64 / 16.0;
            xa.push(v);
            xb.push(0.8 * v + 0.1 * ((i + 2 * j) as f64).sin() + 0.05);
        }
    }
    let ta = Tensor::from_vec(&[16, 16], xa.clone()).unwrap();
    let tb = Tensor::from_vec(&[16, 16], xb.clone()).unwrap();
    let same = ssim(&ta, &ta).map_err(err)?;
    ensure((same - 1.0).abs() <= 1e-9, || format!("ssim(x,x) = {same}"))?;
    let got = ssim(&ta, &tb).map_err(err)?;
    let direct = direct_ssim(&xa, &xb, 16);
    ensure((got - direct).abs() <= 1e-6, || format!("ssim {got} vs direct {direct}"))?;
    Ok(format!("psnr {p:.6} dB, ssim {got:.9} vs direct {direct:.9}"))
}

/// Straight 2-D windowed sums, no separable filtering.
fn direct_ssim(a: &[f64], b: &[f64], n: usize) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let c = (k / 2) as f64;
    let mut win = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            win[y * k + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let out = n - k + 1;
    let mut acc = 0.0;
    for oy in 0..out {
        for ox in 0..out {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..k {
                for x in 0..k {
                    let g = win[y * k + x];
                    let (va, vb) = (a[(oy + y) * n + ox + x], b[(oy + y) * n + ox + x]);
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    acc / (out * out) as f64
}

// ---- zero-init identity ---------------------------------------------------

fn zero_init_identity() -> Check {
    let x = random(&[2, 8, 8, 8], 9, -3.0, 3.0).cast::<f32>();
    type Run = Box<dyn Fn(&Tensor<f32>, &ParamScope<'_, f32>) -> crnet_core::Result<Tensor<f32>>>;
    let mut cases: Vec<(String, Vec<ParamSpec>, Run)> = vec![(
        "window_self_attention".into(),
        specs(|b| declare_window_attention(b, 8)),
        Box::new(|x, p| window_self_attention(x, p, 4, 4)),
    )];
    for split in [MbbSplit::new(3, 1), MbbSplit::new(2, 2), MbbSplit::new(4, 0)] {
        let split = split.map_err(err)?;
        cases.push((
            format!("multi_branch_block({split})"),
            specs(|b| declare_multi_branch(b, 8, split)),
            Box::new(move |x, p| multi_branch_block(x, p, split)),
        ));
    }
    for mode in [FfnMode::Inverted, FfnMode::NormalBottleneck, FfnMode::Flat] {
        cases.push((
            format!("conv_ffn({mode})"),
            specs(|b| declare_conv_ffn(b, 8, mode, 4)),
            Box::new(|x, p| conv_ffn(x, p)),
        ));
    }
    for kernel in [CebKernel::Dw7, CebKernel::ThreeDw3, CebKernel::Dw5Dw3] {
        cases.push((
            format!("conv_enhancement_block({kernel})"),
            specs(|b| declare_enhancement_block(b, 8, kernel, FfnMode::Inverted, 4)),
            Box::new(move |x, p| conv_enhancement_block(x, p, kernel)),
        ));
    }
    for (name, spec, run) in &cases {
        let params = ModelParams::<f32>::zeros(spec);
        let y = run(&x, &params.root()).map_err(err)?;
        let same = y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("{name} changed its input"))?;
    }
    Ok(format!("{} residual blocks bit-exact", cases.len()))
}

// ---- ablations ------------------------------------------------------------

fn small_scene() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    }
}

fn ablation_parity() -> Check {
    let base = CRNetConfig::desk();
    let counts: Vec<usize> = [(3, 1), (2, 2), (4, 0)]
        .iter()
        .map(|&(a, b)| {
            count_params(&CRNetConfig {
                mbb_split: MbbSplit::new(a, b).unwrap(),
                ..base.clone()
            })
        })
        .collect();
    ensure(counts.iter().all(|&c| c == counts[0]), || format!("split counts differ: {counts:?}"))?;

    let data = generate_dataset(2, 5, &small_scene(), &DegradeSpec::default()).map_err(err)?;
    let cfg = TrainConfig {
        max_steps: 20,
        batch: 2,
        ..TrainConfig::desk()
    };
    for v in AblationVariant::ALL {
        let (model, params) = build_ablation_variant::<f32>(v, &base, 1);
        let y = forward(&data[0].stack, &params, &model, None).map_err(|e| format!("{v}: {e}"))?;
        ensure(y.data().iter().all(|v| v.is_finite()), || format!("{v}: non-finite output"))?;
        let start = TrainState {
            optim: crnet_core::train::OptimState::new(&params, &cfg),
            params,
            step: 0,
        };
        let out = train(&data, &model, &cfg, Some(start), None, |_| {}).map_err(|e| format!("{v}: {e}"))?;
        ensure(out.history.len() == 20, || format!("{v}: {} steps", out.history.len()))?;
    }
    Ok(format!(
        "split params {}, {} variants trained 20 steps",
        counts[0],
        AblationVariant::ALL.len()
    ))
}

// ---- overfit --------------------------------------------------------------

const OVERFIT_TARGET: f64 = 30.0;

fn mean_psnr_mu(csv: &str) -> Result<f64, String> {
    let row = csv.lines().find(|l| l.starts_with("mean,")).ok_or("no mean row")?;
    row.split(',').nth(2).ok_or("short mean row")?.parse::<f64>().map_err(err)
}

fn overfit(dir: &Path) -> Check {
    let start = Instant::now();
    let mut rc = RunConfig::preset("desk").map_err(err)?;
    rc.train.flip_rotate = false;
    let data = generate_dataset(1, 0, &rc.scene, &rc.degrade).map_err(err)?;
    let data_dir = dir.join("overfit_data");
    let run_dir = dir.join("overfit_run");
    write_dataset(&data, &data_dir).map_err(err)?;
    fs::create_dir_all(&run_dir).map_err(err)?;
    fs::write(run_dir.join(CONFIG_FILE), rc.to_text()).map_err(err)?;

    // train in chunks and stop as soon as the target is met
    let mut state = None;
    let mut reached = f64::NEG_INFINITY;
    let mut steps = 0;
    while steps < 2000 {
        steps += 250;
        let cfg = TrainConfig {
            max_steps: steps,
            ..rc.train.clone()
        };
        let out = train(&data, &rc.model, &cfg, state.take(), Some(&run_dir), |_| {}).map_err(err)?;
        state = Some(out.state);
        let mut csv = Vec::new();
        cmd_eval(&data_dir, &run_dir.join(CHECKPOINT_FILE), &rc, &mut csv).map_err(|f| f.message)?;
        reached = mean_psnr_mu(&String::from_utf8_lossy(&csv))?;
        if reached >= OVERFIT_TARGET {
            break;
        }
    }
    let elapsed = start.elapsed();
    ensure(reached >= OVERFIT_TARGET, || format!("PSNR-mu {reached:.2} dB after {steps} steps"))?;
    ensure(elapsed < Duration::from_secs(900), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "PSNR-mu {reached:.2} dB after {steps} steps in {:.0}s",
        elapsed.as_secs_f64()
    ))
}

// ---- smoke training -------------------------------------------------------

fn smoke_training() -> Check {
    let mut passed = 0;
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let data = generate_dataset(16, seed, &small_scene(), &DegradeSpec::default()).map_err(err)?;
        let cfg = TrainConfig {
            max_steps: 200,
            seed,
            ..TrainConfig::desk()
        };
        let out = train(&data, &CRNetConfig::desk(), &cfg, None, None, |_| {}).map_err(err)?;
        let losses: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
        let initial = losses[..10].iter().sum::<f64>() / 10.0;
        let last = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        let ratio = last / initial;
        ratios.push(format!("{ratio:.2}"));
        if ratio <= 0.5 {
            passed += 1;
        }
    }
    ensure(passed >= 9, || format!("{passed}/10 seeds halved the loss; ratios {ratios:?}"))?;
    Ok(format!("{passed}/10 seeds; final/initial ratios {}", ratios.join(" ")))
}

// ---- determinism and persistence -------------------------------------------

fn determinism(dir: &Path) -> Check {
    let model = CRNetConfig::desk();
    let data = generate_dataset(4, 3, &small_scene(), &DegradeSpec::default()).map_err(err)?;
    let cfg = TrainConfig {
        max_steps: 6,
        ..TrainConfig::desk()
    };
    let run = || train(&data, &model, &cfg, None, Some(&dir.join("det_run")), |_| {});
    let a = run().map_err(err)?;
    let b = run().map_err(err)?;
    let bits = |o: &crnet_core::train::TrainOutcome| o.history.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a) == bits(&b), || "loss histories differ".into())?;
    for ((ka, ta), (_, tb)) in a.state.params.iter().zip(b.state.params.iter()) {
        ensure(ta.data() == tb.data(), || format!("{ka} differs between runs"))?;
    }

    let ckpt = dir.join("det_run").join(CHECKPOINT_FILE);
    let loaded = TrainState::load(&ckpt, &model).map_err(err)?;
    let y0 = forward(&data[0].stack, &a.state.params, &model, None).map_err(err)?;
    let y1 = forward(&data[0].stack, &loaded.params, &model, None).map_err(err)?;
    let same = y0.data().iter().zip(y1.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    ensure(same, || "forward differs after checkpoint round-trip".into())?;

    let scene = small_scene();
    for sub in ["gen_a", "gen_b"] {
        let set = generate_dataset(3, 17, &scene, &DegradeSpec::default()).map_err(err)?;
        write_dataset(&set, &dir.join(sub)).map_err(err)?;
    }
    let mut files: Vec<_> = fs::read_dir(dir.join("gen_a")).map_err(err)?.map(|e| e.unwrap().file_name()).collect();
    files.sort();
    for f in &files {
        let a = fs::read(dir.join("gen_a").join(f)).map_err(err)?;
        let b = fs::read(dir.join("gen_b").join(f)).map_err(err)?;
        ensure(a == b, || format!("{f:?} differs between generations"))?;
    }
    Ok(format!("6-step runs bit-identical, checkpoint forward bit-identical, {} dataset files identical", files.len()))
}

// ---- schedule ---------------------------------------------------------------

fn lr_schedule() -> Check {
    let cfg = TrainConfig::default();
    let got = [0, 80, 160].map(|e| lr_at(e, &cfg));
    let want = [1e-4, 5e-5, 2.5e-5];
    let ok = got.iter().zip(&want).all(|(g, w)| (g - w).abs() <= 1e-18);
    ensure(ok, || format!("{got:?}"))?;
    Ok(format!("{got:?}"))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("frequency separation identity", Box::new(separation_identity)),
        ("metric oracles", Box::new(metric_oracles)),
        ("zero-init identity", Box::new(zero_init_identity)),
        ("ablation parity", Box::new(ablation_parity)),
        ("overfit one sample", Box::new(|| overfit(dir.path()))),
        ("smoke training", Box::new(smoke_training)),
        ("determinism and persistence", Box::new(|| determinism(dir.path()))),
        ("lr schedule", Box::new(lr_schedule)),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(*name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed.len(), criteria.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
