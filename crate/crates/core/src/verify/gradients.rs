//! Tape gradients against central differences, per primitive, per building
//! block and for every parameter of a small full model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{normal_tensor, perturb_params, project, randomize_zero_params, rng, Check, Suite, VerifyOptions};
use crate::error::Result;
use crate::model::{Model, ModelSpec};
use crate::nn::{
    Attention, Bindings, BlockConfig, BranchSpec, DeformOptions, EatBlock, Gli, GliConfig, Initializer, MsaConfig,
    Msra, MsraConfig, ParamStore,
};
use crate::tensor::gradcheck::grad_check_with;
use crate::tensor::{Conv2dParams, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences at `STEP`
/// carry ~1e-10 absolute round-off, so components whose true gradient
/// vanishes (a key bias under softmax, for one) are judged absolutely at
/// `tol * FLOOR` instead of producing meaningless ratios.
pub const FLOOR: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-4;

type ScalarFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<(String, Tensor<f64>)>,
    f: ScalarFn,
}

fn named(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t)
}

/// Runs every case and folds them into one check named `name`.
fn check_cases(name: &str, cases: Vec<Case>, tol: f64, opts: &VerifyOptions) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut worst_input = String::new();
    let mut coords = 0;
    for case in cases {
        let rep = grad_check_with(&case.f, &case.inputs, STEP, tol, FLOOR, opts.fault)?;
        coords += rep.coordinates();
        for e in &rep.entries {
            let err = if e.failure.is_some() {
                f64::INFINITY
            } else {
                e.max_rel_err
            };
            if err > worst || worst_input.is_empty() {
                worst = worst.max(err);
                worst_input = match &e.failure {
                    Some(msg) => format!("{} ({msg})", e.name),
                    None => e.name.clone(),
                };
            }
        }
    }
    Ok(Check::below(Suite::Gradcheck, name, worst, tol).with_detail(format!("{coords} coords, worst {worst_input}")))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Case>)> {
    let mut cases = Vec::new();

    // Grouped+strided and dilated+padded geometries.
    let mut conv = Vec::new();
    for (cin, cout, groups, p) in [
        (4, 6, 2, Conv2dParams::new(2, 1, 1, 2)),
        (3, 2, 1, Conv2dParams::new(1, 2, 2, 1)),
    ] {
        let x = normal_tensor(rng, &[2, cin, 6, 6], 1.0);
        let w = normal_tensor(rng, &[cout, cin / groups, 3, 3], 0.5);
        let b = normal_tensor(rng, &[cout], 0.5);
        let out = p.output_extent(6, 3).unwrap();
        let r = normal_tensor(rng, &[2, cout, out, out], 1.0);
        conv.push(Case {
            inputs: vec![named("x", x), named("weight", w), named("bias", b)],
            f: Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), p)?;
                project(t, y, &r)
            }),
        });
    }
    cases.push(("op.conv2d", conv));

    let r = normal_tensor(rng, &[2, 3, 4], 1.0);
    cases.push((
        "op.linear",
        vec![Case {
            inputs: vec![
                named("x", normal_tensor(rng, &[2, 3, 5], 1.0)),
                named("weight", normal_tensor(rng, &[4, 5], 0.5)),
                named("bias", normal_tensor(rng, &[4], 0.5)),
            ],
            f: Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, &r)
            }),
        }],
    ));

    let r = normal_tensor(rng, &[3, 6], 1.0);
    cases.push((
        "op.layer_norm",
        vec![Case {
            inputs: vec![
                named("x", normal_tensor(rng, &[3, 6], 1.0)),
                named("gamma", normal_tensor(rng, &[6], 1.0)),
                named("beta", normal_tensor(rng, &[6], 1.0)),
            ],
            f: Box::new(move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, &r)
            }),
        }],
    ));

    let r = normal_tensor(rng, &[2, 3, 3, 3], 1.0);
    cases.push((
        "op.channel_norm",
        vec![Case {
            inputs: vec![
                named("x", normal_tensor(rng, &[2, 3, 3, 3], 1.0)),
                named("gamma", normal_tensor(rng, &[3], 1.0)),
                named("beta", normal_tensor(rng, &[3], 1.0)),
            ],
            f: Box::new(move |t, v| {
                let y = t.channel_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, &r)
            }),
        }],
    ));

    let mut softmax = Vec::new();
    for axis in [0, 1] {
        let r = normal_tensor(rng, &[3, 5], 1.0);
        softmax.push(Case {
            inputs: vec![named("x", normal_tensor(rng, &[3, 5], 2.0))],
            f: Box::new(move |t, v| {
                let y = t.softmax(v[0], axis)?;
                project(t, y, &r)
            }),
        });
    }
    cases.push(("op.softmax", softmax));

    let r = normal_tensor(rng, &[12], 1.0);
    cases.push((
        "op.gelu",
        vec![Case {
            inputs: vec![named("x", normal_tensor(rng, &[12], 2.0))],
            f: Box::new(move |t, v| {
                let y = t.gelu(v[0]);
                project(t, y, &r)
            }),
        }],
    ));

    let r = normal_tensor(rng, &[12], 1.0);
    cases.push((
        "op.sigmoid",
        vec![Case {
            inputs: vec![named("x", normal_tensor(rng, &[12], 2.0))],
            f: Box::new(move |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, &r)
            }),
        }],
    ));

    // Interior points keep clear of the integer grid lines where the
    // interpolant has kinks; the last point lies outside and is clamped.
    let (h, w) = (4usize, 5usize);
    let mut coords = Vec::new();
    for i in 0..7 {
        let (y, x) = if i == 6 {
            (-0.7, 5.4)
        } else {
            (
                rng.random_range(0..h - 1) as f64 + rng.random_range(0.15..0.85),
                rng.random_range(0..w - 1) as f64 + rng.random_range(0.15..0.85),
            )
        };
        coords.extend([y, x]);
    }
    let r = normal_tensor(rng, &[1, 2, 7], 1.0);
    cases.push((
        "op.bilinear",
        vec![Case {
            inputs: vec![
                named("input", normal_tensor(rng, &[1, 2, h, w], 1.0)),
                named("coords", Tensor::new([1, 7, 2], coords).unwrap()),
            ],
            f: Box::new(move |t, v| {
                let y = t.bilinear_sample(v[0], v[1])?;
                project(t, y, &r)
            }),
        }],
    ));

    let r = normal_tensor(rng, &[2, 3, 5], 1.0);
    cases.push((
        "op.matmul",
        vec![Case {
            inputs: vec![
                named("a", normal_tensor(rng, &[2, 3, 4], 1.0)),
                named("b", normal_tensor(rng, &[2, 5, 4], 1.0)),
            ],
            f: Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1], true)?;
                project(t, y, &r)
            }),
        }],
    ));

    let r = normal_tensor(rng, &[2, 4], 1.0);
    cases.push((
        "op.reductions",
        vec![Case {
            inputs: vec![named("x", normal_tensor(rng, &[2, 3, 4], 1.0))],
            f: Box::new(move |t, v| {
                let m = t.mean(v[0], 1)?;
                let y = project(t, m, &r)?;
                let logits = t.reshape(v[0], &[6, 4])?;
                let ce = t.cross_entropy(logits, &[0, 3, 1, 2, 2, 0])?;
                t.add(y, ce)
            }),
        }],
    ));

    let r = normal_tensor(rng, &[4, 2, 3], 1.0);
    cases.push((
        "op.shape",
        vec![Case {
            inputs: vec![
                named("x", normal_tensor(rng, &[2, 3, 2], 1.0)),
                named("y", normal_tensor(rng, &[2, 3, 2], 1.0)),
            ],
            f: Box::new(move |t, v| {
                let a = t.narrow(v[0], 1, 1, 2)?;
                let b = t.narrow(v[1], 1, 0, 2)?;
                let c = t.concat(&[a, b], 1)?;
                let c = t.mul_const(c, 1.5);
                let c = t.permute(c, &[1, 2, 0])?;
                let c = t.reshape(c, &[4, 2, 2])?;
                let d = t.mul(c, c)?;
                let e = t.concat(&[c, d], 2)?;
                let e = t.narrow(e, 2, 0, 3)?;
                project(t, e, &r)
            }),
        }],
    ));

    cases
}

/// Gradient case over all parameters of a module plus its input.
fn module_case<F>(store: &ParamStore<f64>, x: Tensor<f64>, rng: &mut ChaCha8Rng, forward: F) -> Result<Case>
where
    F: Fn(&mut Tape<f64>, &Bindings, Var) -> Result<Var> + 'static,
{
    let n = store.len();
    let out_shape = {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(&x);
        let y = forward(&mut tape, &p, xv)?;
        tape.shape(y).to_vec()
    };
    let r = normal_tensor(rng, &out_shape, 1.0);
    let mut inputs: Vec<_> = store.iter().map(|(name, t)| (name.to_string(), t.clone())).collect();
    inputs.push(named("input", x));
    Ok(Case {
        inputs,
        f: Box::new(move |t, v| {
            let p = Bindings::from_vars(v[..n].to_vec());
            let y = forward(t, &p, v[n])?;
            project(t, y, &r)
        }),
    })
}

fn build<M>(
    rng: &mut ChaCha8Rng,
    seed: u64,
    make: impl FnOnce(&mut Initializer<f64>) -> Result<M>,
) -> Result<(M, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let m = make(&mut Initializer::new(&mut store, seed))?;
    perturb_params(&mut store, rng, 0.5);
    Ok((m, store))
}

fn block_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<(&'static str, Case)>> {
    let mut out = Vec::new();

    let cfg = MsaConfig::new(8, 2)?;
    let (attn, store) = build(rng, seed, |i| Attention::new(i, "mdmsa", cfg, true))?;
    let x = normal_tensor(rng, &[2, 16, 8], 1.0);
    let case = module_case(&store, x, rng, move |t, p, x| {
        Ok(attn.mdmsa_forward(t, p, x, (4, 4), DeformOptions::enabled())?.out)
    })?;
    out.push(("block.mdmsa", case));

    let (attn, store) = build(rng, seed, |i| Attention::new(i, "msa", cfg, false))?;
    let x = normal_tensor(rng, &[2, 5, 8], 1.0);
    let case = module_case(&store, x, rng, move |t, p, x| Ok(attn.msa_forward(t, p, x)?.out))?;
    out.push(("op.attention", case));

    let gli_cfg = GliConfig {
        channels: 8,
        split_ratio: 0.5,
        local_kernel: 3,
        heads: 2,
        use_mdmsa: true,
    };
    let (gli, store) = build(rng, seed, |i| Gli::new(i, "gli", gli_cfg.clone()))?;
    let x = normal_tensor(rng, &[2, 16, 8], 1.0);
    let case = module_case(&store, x, rng, move |t, p, x| Ok(gli.forward(t, p, x, (4, 4))?.out))?;
    out.push(("block.gli", case));

    let msra_cfg = MsraConfig {
        channels: 4,
        out_channels: 8,
        branches: vec![BranchSpec::new(3, 2, 1), BranchSpec::new(3, 2, 2)],
        fusion_kernel: 1,
        depthwise: false,
    };
    let (msra, store) = build(rng, seed, |i| Msra::new(i, "msra", msra_cfg))?;
    let x = normal_tensor(rng, &[2, 4, 8, 8], 1.0);
    let case = module_case(&store, x, rng, move |t, p, x| msra.forward(t, p, x))?;
    out.push(("block.msra", case));

    let block_cfg = BlockConfig {
        msra: MsraConfig {
            channels: 8,
            out_channels: 8,
            branches: vec![BranchSpec::new(3, 1, 1), BranchSpec::new(3, 1, 2)],
            fusion_kernel: 1,
            depthwise: true,
        },
        gli: gli_cfg,
        mlp_ratio: 2.0,
    };
    let (block, store) = build(rng, seed, |i| EatBlock::new(i, "block", block_cfg))?;
    let x = normal_tensor(rng, &[2, 8, 6, 6], 1.0);
    let case = module_case(&store, x, rng, move |t, p, x| block.forward(t, p, x))?;
    out.push(("block.eat", case));

    Ok(out)
}

/// Cross-entropy of the micro model on a batch of two, differentiated w.r.t.
/// every trainable tensor.
fn model_check(rng: &mut ChaCha8Rng, opts: &VerifyOptions) -> Result<Check> {
    let mut model = Model::<f64>::build(ModelSpec::micro(3), opts.seed)?;
    randomize_zero_params(model.params_mut(), rng, 0.3);
    let (h, w) = model.spec().input_resolution;
    let images = Tensor::from_fn([2, 3, h, w], |_| rng.random_range(0.0..1.0))?;
    let labels = [0usize, 2];
    let inputs: Vec<_> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let n = inputs.len();
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let p = Bindings::from_vars(v[..n].to_vec());
        let x = t.constant(&images);
        let logits = model.forward(t, &p, x)?;
        t.cross_entropy(logits, &labels)
    };
    let check = check_cases("model.micro", vec![Case { inputs, f: Box::new(f) }], BLOCK_TOL, opts)?;
    Ok(check)
}

pub fn suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = rng(opts.seed, 1);
    let mut checks = Vec::new();
    for (name, cases) in op_cases(&mut rng) {
        checks.push(check_cases(name, cases, OP_TOL, opts)?);
    }
    for (name, case) in block_cases(&mut rng, opts.seed)? {
        let tol = if name.starts_with("op.") { OP_TOL } else { BLOCK_TOL };
        checks.push(check_cases(name, vec![case], tol, opts)?);
    }
    checks.push(model_check(&mut rng, opts)?);
    Ok(checks)
}
