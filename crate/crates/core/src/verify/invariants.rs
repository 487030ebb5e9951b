//! Oracle equivalences and exact algebraic properties.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{reference_metrics, NaiveConv};
use super::{max_abs_diff, normal_tensor, project, randomize_zero_params, rng, Check, Suite, VerifyOptions};
use crate::error::Result;
use crate::model::{count_params_flops, Model, ModelSpec};
use crate::nn::{
    gli_param_formula, Attention, BlockConfig, BranchSpec, DeformOptions, EatBlock, GliConfig, Initializer, Linear,
    Module, MsaConfig, Msra, MsraConfig, ParamId, ParamStore, Wom,
};
use crate::tensor::kernels::bilinear::sample_point;
use crate::tensor::{Conv2dParams, Tape, Tensor};
use crate::train::{ConfusionCounts, MetricReport};

pub const CONV_TOL: f64 = 1e-12;
pub const REDUCTION_TOL: f64 = 1e-6;
pub const RESIDUAL_TOL: f64 = 1e-12;
pub const WOM_TOL: f64 = 1e-12;
pub const MSRA_ALPHA_TOL: f64 = 1e-10;

/// Every stride × dilation × groups combination, with and without padding.
fn conv_grid() -> Vec<(usize, Conv2dParams)> {
    let mut grid = Vec::new();
    for stride in 1..=3 {
        for dilation in 1..=3 {
            for groups in [1, 2, 3, 6] {
                for padding in [0, dilation] {
                    grid.push((6, Conv2dParams::new(stride, padding, dilation, groups)));
                }
            }
        }
    }
    grid
}

fn conv_checks(rng: &mut ChaCha8Rng, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
    let grid = conv_grid();
    for &(channels, p) in &grid {
        let naive = NaiveConv {
            n: 2,
            c: channels,
            h: 9,
            w: 8,
            o: channels,
            k: 3,
            p,
        };
        let (oh, ow) = naive.out_hw();
        let x = normal_tensor(rng, &[2, channels, 9, 8], 1.0);
        let w = normal_tensor(rng, &[channels, channels / p.groups, 3, 3], 1.0);
        let b = normal_tensor(rng, &[channels], 1.0);
        let gy = normal_tensor(rng, &[2, channels, oh, ow], 1.0);

        let mut tape = Tape::new();
        tape.set_fault(opts.fault);
        let (xv, wv, bv) = (tape.param(&x), tape.param(&w), tape.param(&b));
        let y = tape.conv2d(xv, wv, Some(bv), p)?;
        let expected = naive.forward(x.data(), w.data(), Some(b.data()));
        fwd = fwd.max(max_abs_diff(tape.data(y), &expected));

        let loss = project(&mut tape, y, &gy)?;
        let grads = tape.backward(loss)?;
        let (gx, gw, gb) = naive.backward(x.data(), w.data(), gy.data());
        for (v, want) in [(xv, gx), (wv, gw), (bv, gb)] {
            bwd = bwd.max(max_abs_diff(grads.get(v).unwrap_or(&[]), &want));
        }
    }
    let detail = format!("{} configurations", grid.len());
    Ok(vec![
        Check::within(Suite::Oracles, "conv2d.forward", fwd, CONV_TOL).with_detail(detail.clone()),
        Check::within(Suite::Oracles, "conv2d.backward", bwd, CONV_TOL).with_detail(detail),
    ])
}

fn random_confusion(rng: &mut ChaCha8Rng) -> Vec<Vec<u64>> {
    let k = rng.random_range(2..=8);
    let mut m: Vec<Vec<u64>> = (0..k)
        .map(|_| {
            (0..k)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        0
                    } else {
                        rng.random_range(0..30)
                    }
                })
                .collect()
        })
        .collect();
    // Absent classes and never-predicted classes exercise the zero-denominator rules.
    if rng.random_bool(0.3) {
        let c = rng.random_range(0..k);
        m[c].iter_mut().for_each(|v| *v = 0);
    }
    if rng.random_bool(0.3) {
        let c = rng.random_range(0..k);
        m.iter_mut().for_each(|row| row[c] = 0);
    }
    if m.iter().flatten().all(|&v| v == 0) {
        m[0][0] = 1;
    }
    m
}

/// Number of disagreeing fields between the library and the reference.
fn metric_mismatches(m: &[Vec<u64>]) -> Result<usize> {
    let counts = ConfusionCounts::from_matrix(m.to_vec())?;
    let report = MetricReport::from_counts(&counts, &[]);
    let want = reference_metrics(m);
    let mut pairs = vec![
        (report.accuracy, want.accuracy),
        (report.macro_precision, want.macro_precision),
        (report.macro_recall, want.macro_recall),
        (report.macro_f1, want.macro_f1),
    ];
    let mut bad = 0;
    for (c, row) in report.per_class.iter().enumerate() {
        pairs.extend([
            (row.precision, want.precision[c]),
            (row.recall, want.recall[c]),
            (row.f1, want.f1[c]),
        ]);
        let b = row.counts;
        bad += ([b.tp, b.fp, b.fn_, b.tn] != want.counts[c]) as usize;
    }
    Ok(bad + pairs.iter().filter(|(a, b)| a.to_bits() != b.to_bits()).count())
}

fn metric_check(rng: &mut ChaCha8Rng) -> Result<Check> {
    const TRIALS: usize = 100;
    let mut mismatches = 0;
    for _ in 0..TRIALS {
        mismatches += metric_mismatches(&random_confusion(rng))?;
    }
    Ok(
        Check::within(Suite::Oracles, "metrics.reference", mismatches as f64, 0.0).with_detail(format!(
            "{TRIALS} random confusion matrices, max_err counts mismatching fields"
        )),
    )
}

/// The sampling kernel against the textbook four-corner formula.
fn bilinear_check(rng: &mut ChaCha8Rng) -> Check {
    let (h, w) = (5usize, 7usize);
    let plane = normal_tensor(rng, &[h, w], 1.0);
    let at = |y: usize, x: usize| plane.data()[y * w + x];
    let mut err = 0.0f64;
    for _ in 0..200 {
        let y: f64 = rng.random_range(-1.0..h as f64);
        let x: f64 = rng.random_range(-1.0..w as f64);
        let (cy, cx) = (y.clamp(0.0, (h - 1) as f64), x.clamp(0.0, (w - 1) as f64));
        let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
        let want = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + at(y0, x1) * (1.0 - fy) * fx
            + at(y1, x0) * fy * (1.0 - fx)
            + at(y1, x1) * fy * fx;
        err = err.max((sample_point(plane.data(), h, w, y, x) - want).abs());
    }
    Check::within(Suite::Oracles, "bilinear.four_corner", err, 1e-12)
}

pub fn oracles(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = rng(opts.seed, 2);
    let mut checks = conv_checks(&mut rng, opts)?;
    checks.push(metric_check(&mut rng)?);
    checks.push(bilinear_check(&mut rng));
    Ok(checks)
}

fn zero(store: &mut ParamStore<f64>, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn run_attention(
    attn: &Attention,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    deform: Option<DeformOptions>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let out = match deform {
        Some(opts) => attn.mdmsa_forward(&mut tape, &p, xv, (4, 4), opts)?,
        None => attn.msa_forward(&mut tape, &p, xv)?,
    };
    Ok((tape.value(out.out), tape.value(out.probs)))
}

fn reduction_checks(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Check>> {
    let mut store = ParamStore::new();
    let attn = Attention::new(
        &mut Initializer::new(&mut store, seed),
        "attn",
        MsaConfig::new(8, 2)?,
        true,
    )?;
    randomize_zero_params(&mut store, rng, 0.3);
    let x = normal_tensor(rng, &[2, 16, 8], 1.0);
    let (msa, _) = run_attention(&attn, &store, &x, None)?;

    // Random offsets, but the layer switched off: must be the same computation.
    let (off, _) = run_attention(&attn, &store, &x, Some(DeformOptions::default()))?;
    let bitwise = msa
        .data()
        .iter()
        .zip(off.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let disabled = Check::within(
        Suite::Identity,
        "mdmsa.disabled_is_msa",
        if bitwise { 0.0 } else { f64::INFINITY },
        0.0,
    )
    .with_detail("bitwise");

    let head = attn.offset_head.as_ref().expect("built deformable");
    zero(&mut store, &[head.weight, head.bias]);
    let opts = DeformOptions {
        enabled: true,
        modulation_override: Some(1.0),
    };
    let (reduced, _) = run_attention(&attn, &store, &x, Some(opts))?;
    Ok(vec![
        Check::within(
            Suite::Identity,
            "mdmsa.zero_offsets_is_msa",
            max_abs_diff(msa.data(), reduced.data()),
            REDUCTION_TOL,
        ),
        disabled,
    ])
}

fn residual_check(rng: &mut ChaCha8Rng, seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for use_mdmsa in [false, true] {
        let cfg = BlockConfig {
            msra: MsraConfig {
                channels: 8,
                out_channels: 8,
                branches: vec![BranchSpec::new(3, 1, 1), BranchSpec::new(3, 1, 2)],
                fusion_kernel: 1,
                depthwise: true,
            },
            gli: GliConfig {
                channels: 8,
                split_ratio: 0.5,
                local_kernel: 3,
                heads: 2,
                use_mdmsa,
            },
            mlp_ratio: 4.0,
        };
        let mut store = ParamStore::new();
        let block = EatBlock::new(&mut Initializer::new(&mut store, seed), "block", cfg)?;
        randomize_zero_params(&mut store, rng, 0.3);
        zero(&mut store, &block.msra.fusion.param_ids());
        zero(&mut store, &block.gli.fusion.param_ids());
        zero(&mut store, &block.ffn.fc2.param_ids());

        let x = normal_tensor(rng, &[2, 8, 6, 6], 1.0);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(&x);
        let y = block.forward(&mut tape, &p, xv)?;
        worst = worst.max(max_abs_diff(tape.data(y), x.data()));
    }
    Ok(
        Check::within(Suite::Identity, "block.zero_branch_identity", worst, RESIDUAL_TOL)
            .with_detail("MSRA fusion, GLI fusion and FFN output zeroed"),
    )
}

fn attention_property_checks(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Check>> {
    let mut store = ParamStore::new();
    let attn = Attention::new(
        &mut Initializer::new(&mut store, seed),
        "attn",
        MsaConfig::new(8, 2)?,
        false,
    )?;
    randomize_zero_params(&mut store, rng, 0.3);
    let (b, l, d) = (2, 6, 8);
    let x = normal_tensor(rng, &[b, l, d], 1.0);
    let (out, probs) = run_attention(&attn, &store, &x, None)?;

    let mut stochastic = 0.0f64;
    for row in probs.data().chunks(l) {
        if row.iter().any(|&v| !(v > 0.0)) {
            stochastic = f64::INFINITY;
        }
        stochastic = stochastic.max((row.iter().sum::<f64>() - 1.0).abs());
    }

    // Reverse the token order; the output must follow the same permutation.
    let perm: Vec<usize> = (0..l).rev().collect();
    let permuted = Tensor::from_fn([b, l, d], |i| {
        let (bi, li, di) = (i / (l * d), (i / d) % l, i % d);
        x.data()[(bi * l + perm[li]) * d + di]
    })?;
    let (pout, _) = run_attention(&attn, &store, &permuted, None)?;
    let mut equiv = 0.0f64;
    for bi in 0..b {
        for li in 0..l {
            let a = &pout.data()[(bi * l + li) * d..][..d];
            let e = &out.data()[(bi * l + perm[li]) * d..][..d];
            equiv = equiv.max(max_abs_diff(a, e));
        }
    }

    // One token attends only to itself: output = proj(v(x)).
    let single = normal_tensor(rng, &[1, 1, d], 1.0);
    let (one, _) = run_attention(&attn, &store, &single, None)?;
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let sv = tape.constant(&single);
    let v = attn.v.forward(&mut tape, &p, sv)?;
    let expect = attn.proj.forward(&mut tape, &p, v)?;
    let single_err = max_abs_diff(one.data(), tape.data(expect));

    Ok(vec![
        Check::within(Suite::Identity, "msa.row_stochastic", stochastic, 1e-12),
        Check::within(Suite::Identity, "msa.permutation_equivariant", equiv, 1e-12),
        Check::within(Suite::Identity, "msa.single_token", single_err, 1e-12),
    ])
}

pub fn identity(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = rng(opts.seed, 3);
    let mut checks = reduction_checks(&mut rng, opts.seed)?;
    checks.push(residual_check(&mut rng, opts.seed)?);
    checks.extend(attention_property_checks(&mut rng, opts.seed)?);
    Ok(checks)
}

fn coefficients(alphas: &[f64]) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    let wom = Wom::new(&mut Initializer::new(&mut store, 0), "wom", alphas.len())?;
    store.set(wom.alphas, Tensor::new([alphas.len()], alphas.to_vec())?)?;
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let c = wom.coefficients(&mut tape, &p)?;
    Ok(tape.data(c).to_vec())
}

fn msra_alpha_check(rng: &mut ChaCha8Rng, seed: u64) -> Result<Check> {
    let cfg = MsraConfig {
        channels: 4,
        out_channels: 4,
        branches: vec![BranchSpec::new(3, 1, 1); 3],
        fusion_kernel: 1,
        depthwise: true,
    };
    let mut store = ParamStore::new();
    let msra = Msra::new(&mut Initializer::new(&mut store, seed), "msra", cfg)?;
    randomize_zero_params(&mut store, rng, 0.3);
    for branch in &msra.branches[1..] {
        for (dst, src) in branch.param_ids().into_iter().zip(msra.branches[0].param_ids()) {
            let values = store.get(src).clone();
            store.set(dst, values)?;
        }
    }
    let x = normal_tensor(rng, &[2, 4, 5, 5], 1.0);
    let mut reference: Option<Vec<f64>> = None;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let alphas = normal_tensor(rng, &[3], 3.0);
        store.set(msra.wom.alphas, alphas)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(&x);
        let y = msra.forward(&mut tape, &p, xv)?;
        match &reference {
            None => reference = Some(tape.data(y).to_vec()),
            Some(r) => worst = worst.max(max_abs_diff(r, tape.data(y))),
        }
    }
    Ok(
        Check::within(Suite::Wom, "msra.identical_branches_alpha_free", worst, MSRA_ALPHA_TOL)
            .with_detail("3 identical branches, 10 random logit vectors"),
    )
}

pub fn wom(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = rng(opts.seed, 4);
    let (mut positive, mut sum_err, mut shift_err) = (true, 0.0f64, 0.0f64);
    const TRIALS: usize = 200;
    for _ in 0..TRIALS {
        let n = rng.random_range(1..=6);
        let alphas = normal_tensor(&mut rng, &[n], 3.0).into_data();
        let c = coefficients(&alphas)?;
        positive &= c.iter().all(|&v| v > 0.0);
        sum_err = sum_err.max((c.iter().sum::<f64>() - 1.0).abs());
        let shift: f64 = rng.random_range(-20.0..20.0);
        let shifted: Vec<f64> = alphas.iter().map(|a| a + shift).collect();
        shift_err = shift_err.max(max_abs_diff(&c, &coefficients(&shifted)?));
    }
    let detail = format!("{TRIALS} random logit vectors");
    Ok(vec![
        Check::within(
            Suite::Wom,
            "wom.positive",
            if positive { 0.0 } else { f64::INFINITY },
            0.0,
        )
        .with_detail(detail.clone()),
        Check::within(Suite::Wom, "wom.sum_to_one", sum_err, WOM_TOL).with_detail(detail.clone()),
        Check::within(Suite::Wom, "wom.shift_invariant", shift_err, WOM_TOL).with_detail(detail),
        msra_alpha_check(&mut rng, opts.seed)?,
    ])
}

/// `|a - b|` for counts, as the error of an exact check.
fn count_err(a: usize, b: usize) -> f64 {
    a.abs_diff(b) as f64
}

pub fn params() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut no_global = ModelSpec::desk(3);
    for s in &mut no_global.stages {
        s.split_ratio = 0.0;
    }
    for (name, spec) in [
        ("desk", ModelSpec::desk(3)),
        ("desk_p0", no_global),
        ("micro", ModelSpec::micro(3)),
        ("desk_224", ModelSpec::desk_224(43)),
    ] {
        let resolution = spec.input_resolution;
        let model = Model::<f64>::build(spec, 0)?;
        let report = count_params_flops(&model, resolution)?;
        let mut err = count_err(report.total_params, report.enumerated_params);
        err = err.max(count_err(report.total_params, report.sum_of_rows()));
        for row in &report.rows {
            err = err.max(count_err(row.params, row.enumerated));
        }
        checks.push(
            Check::within(Suite::Params, format!("params.{name}.self_report"), err, 0.0)
                .with_detail(format!("{} params", report.enumerated_params)),
        );
        let mut delta_err = 0.0f64;
        let mut deltas = Vec::new();
        for row in report.rows.iter().filter(|r| r.gli_formula.is_some()) {
            let formula = row.gli_formula.unwrap_or_default();
            let delta = row.gli_delta.unwrap_or_default();
            delta_err = delta_err.max((row.params as i64 - formula - delta).abs() as f64);
            deltas.push(delta.to_string());
        }
        checks.push(
            Check::within(Suite::Params, format!("params.{name}.gli_delta"), delta_err, 0.0)
                .with_detail(format!("measured - formula per GLI: {}", deltas.join(","))),
        );
    }
    checks.push(Check::within(
        Suite::Params,
        "params.gli_formula_64_32_3",
        (gli_param_formula(64, 32, 3) - 5600).abs() as f64,
        0.0,
    ));
    let mut store = ParamStore::<f64>::new();
    let linear = Linear::new(&mut Initializer::new(&mut store, 0), "fc", 4, 3)?;
    let err = count_err(linear.param_count(), 15).max(count_err(store.numel(), 15));
    checks.push(Check::within(Suite::Params, "params.linear_4_3", err, 0.0));
    Ok(checks)
}
