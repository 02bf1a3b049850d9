//! Named verification checks, one per operation and per composed loss.
//! Gradient checks compare the autodiff engine against central finite
//! differences at `h = 1e-5` in f64; oracle checks compare production
//! kernels against the brute-force implementations in [`super::oracle`].
//!
//! Instances are deterministic in the seed. Inputs feeding kinked functions
//! (rectifiers, l1 norms) are kept away from the kink so the finite
//! difference is taken where the function is differentiable.

use std::cell::Cell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::oracle;
use super::{max_rel_err_params, rel_err, FD_STEP};
use crate::error::{config_err, Result};
use crate::loss;
use crate::rng::component_rng;
use crate::tensor::{NoGradGuard, NormP, Tensor};

/// Instance count used by the acceptance gate.
pub const DEFAULT_INSTANCES: usize = 50;

const PRIM_TOL: f64 = 1e-5;
const COMP_TOL: f64 = 1e-4;
/// Minimum distance from any rectifier or l1 kink accepted for a composite
/// check instance; perturbations move activations by ~1e-6, so this margin
/// guarantees the finite difference never crosses a kink.
const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Gradient,
    Oracle,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub kind: CheckKind,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.max_err < self.tol
    }
}

const GRADIENT_CHECKS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "reshape",
    "leaky_relu",
    "relu",
    "conv2d",
    "conv_transpose2d",
    "batchnorm_train",
    "batchnorm_eval",
    "avg_pool",
    "global_avg_pool",
    "linear",
    "l2_normalize",
    "softmax_t",
    "log_softmax",
    "square_channel_sum",
    "pnorm_rows_p1",
    "pnorm_rows_p2",
    "sqnorm_rows",
    "cross_entropy",
    "kd_loss",
    "loss_cross_entropy_net",
    "loss_reconstruction_net",
    "loss_factor_transfer_p1_net",
    "loss_factor_transfer_p2_net",
    "loss_kd_net",
    "loss_at_net",
    "loss_student_total_net",
];

const ORACLE_CHECKS: &[&str] = &[
    "oracle_conv2d",
    "oracle_conv_transpose2d",
    "oracle_linear",
    "oracle_kd",
    "oracle_reconstruction",
    "oracle_factor_distance",
];

pub fn available_checks() -> Vec<&'static str> {
    GRADIENT_CHECKS.iter().chain(ORACLE_CHECKS).copied().collect()
}

/// Run the selected checks (all when `filter` is empty). `fault` names one
/// gradient check whose analytic gradient is deliberately corrupted before
/// comparison, as a sensitivity control.
pub fn run_checks(
    filter: &[String],
    instances: usize,
    seed: u64,
    fault: Option<&str>,
) -> Result<Vec<CheckReport>> {
    let all = available_checks();
    for f in filter {
        if !all.contains(&f.as_str()) {
            config_err!(
                "unknown check '{f}'; available: {}",
                all.join(", ")
            );
        }
    }
    let selected = |name: &str| filter.is_empty() || filter.iter().any(|f| f == name);
    let scale_for = |name: &str| if fault == Some(name) { 1.02 } else { 1.0 };
    let mut reports = Vec::new();
    for &name in GRADIENT_CHECKS {
        if selected(name) {
            reports.push(gradient_check(name, instances, seed, scale_for(name)));
        }
    }
    for &name in ORACLE_CHECKS {
        if selected(name) {
            reports.push(oracle_check(name, seed));
        }
    }
    Ok(reports)
}

// ── instance construction helpers ────────────────────────────────────

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Standard normals pushed away from zero by `margin` so rectifier and l1
/// kinks stay out of the finite-difference window.
fn randn_off_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    randn(rng, n)
        .into_iter()
        .map(|v| {
            if v.abs() < margin {
                if v >= 0.0 {
                    v + margin
                } else {
                    v - margin
                }
            } else {
                v
            }
        })
        .collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(randn(rng, n), shape).expect("shape")
}

fn param_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(randn_off_zero(rng, n, margin), shape).expect("shape")
}

fn constant(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(randn(rng, n), shape).expect("shape")
}

/// Fixed random projection to a scalar; sharper than a plain sum because
/// sign errors cannot cancel.
fn project(x: &Tensor<f64>, coefs: &Tensor<f64>) -> Tensor<f64> {
    x.mul(coefs).expect("projection shape").sum()
}

type Instance = (Vec<Tensor<f64>>, Box<dyn Fn() -> Tensor<f64>>);

fn run_gradient_instances(
    name: &'static str,
    instances: usize,
    seed: u64,
    tol: f64,
    grad_scale: f64,
    make: &mut dyn FnMut(&mut ChaCha8Rng) -> Instance,
) -> CheckReport {
    let mut rng = component_rng(seed, &format!("check.{name}"));
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (checked, forward) = make(&mut rng);
        worst = worst.max(max_rel_err_params(&*forward, &checked, FD_STEP, grad_scale));
    }
    CheckReport {
        name,
        kind: CheckKind::Gradient,
        instances,
        max_err: worst,
        tol,
    }
}

/// Composite instances additionally report their distance to the nearest
/// kink; instances too close are rediscarded and resampled.
struct Composite {
    checked: Vec<Tensor<f64>>,
    forward: Box<dyn Fn() -> Tensor<f64>>,
    kink: Rc<Cell<f64>>,
}

fn run_composite_instances(
    name: &'static str,
    instances: usize,
    seed: u64,
    grad_scale: f64,
    make: &mut dyn FnMut(&mut ChaCha8Rng) -> Composite,
) -> CheckReport {
    let mut rng = component_rng(seed, &format!("check.{name}"));
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let mut accepted = None;
        for _attempt in 0..40 {
            let inst = make(&mut rng);
            inst.kink.set(f64::INFINITY);
            {
                let _ng = NoGradGuard::new();
                let _ = (inst.forward)();
            }
            if inst.kink.get() > KINK_MARGIN {
                accepted = Some(inst);
                break;
            }
        }
        let inst = accepted.expect("kink-free composite instance within 40 attempts");
        worst = worst.max(max_rel_err_params(
            &*inst.forward,
            &inst.checked,
            FD_STEP,
            grad_scale,
        ));
    }
    CheckReport {
        name,
        kind: CheckKind::Gradient,
        instances,
        max_err: worst,
        tol: COMP_TOL,
    }
}

fn track_min_abs(t: &Tensor<f64>, cell: &Cell<f64>) {
    let m = t.data().iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
    cell.set(cell.get().min(m));
}

// ── primitive gradient checks ────────────────────────────────────────

fn gradient_check(name: &'static str, instances: usize, seed: u64, grad_scale: f64) -> CheckReport {
    match name {
        "add" => run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
            let a = param(rng, &[2, 3]);
            let b = param(rng, &[2, 3]);
            let c = constant(rng, &[2, 3]);
            (
                vec![a.clone(), b.clone()],
                Box::new(move || project(&a.add(&b).unwrap(), &c)),
            )
        }),
        "sub" => run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
            let a = param(rng, &[2, 3]);
            let b = param(rng, &[2, 3]);
            let c = constant(rng, &[2, 3]);
            (
                vec![a.clone(), b.clone()],
                Box::new(move || project(&a.sub(&b).unwrap(), &c)),
            )
        }),
        "mul" => run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
            let a = param(rng, &[2, 3]);
            let b = param(rng, &[2, 3]);
            let c = constant(rng, &[2, 3]);
            (
                vec![a.clone(), b.clone()],
                Box::new(move || project(&a.mul(&b).unwrap(), &c)),
            )
        }),
        "scale" => run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
            let a = param(rng, &[4]);
            let f: f64 = rng.gen_range(-2.0..2.0);
            let c = constant(rng, &[4]);
            (vec![a.clone()], Box::new(move || project(&a.scale(f), &c)))
        }),
        "sum" => run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
            let a = param(rng, &[3, 2]);
            (vec![a.clone()], Box::new(move || a.sum()))
        }),
        "mean" => run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
            let a = param(rng, &[5]);
            (vec![a.clone()], Box::new(move || a.mean()))
        }),
        "reshape" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let a = param(rng, &[2, 6]);
                let c = constant(rng, &[3, 4]);
                (
                    vec![a.clone()],
                    Box::new(move || project(&a.reshape(&[3, 4]).unwrap(), &c)),
                )
            })
        }
        "leaky_relu" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let a = param_off_zero(rng, &[2, 5], 1e-3);
                let slope: f64 = rng.gen_range(0.0..0.9);
                let c = constant(rng, &[2, 5]);
                (
                    vec![a.clone()],
                    Box::new(move || project(&a.leaky_relu(slope).unwrap(), &c)),
                )
            })
        }
        "relu" => run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
            let a = param_off_zero(rng, &[2, 5], 1e-3);
            let c = constant(rng, &[2, 5]);
            (
                vec![a.clone()],
                Box::new(move || project(&a.relu().unwrap(), &c)),
            )
        }),
        "conv2d" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let cfg = sample_conv_cfg(rng, 8);
                let x = param(rng, &[cfg.n, cfg.c, cfg.h, cfg.w]);
                let w = param(rng, &[cfg.o, cfg.c, cfg.k, cfg.k]);
                let b = param(rng, &[cfg.o]);
                let with_bias = rng.gen_bool(0.5);
                let (oh, ow) = cfg.out_extent();
                let coefs = constant(rng, &[cfg.n, cfg.o, oh, ow]);
                let mut checked = vec![x.clone(), w.clone()];
                if with_bias {
                    checked.push(b.clone());
                }
                let (s, p) = (cfg.s, cfg.p);
                (
                    checked,
                    Box::new(move || {
                        let bias = if with_bias { Some(&b) } else { None };
                        project(&x.conv2d(&w, bias, s, p).unwrap(), &coefs)
                    }),
                )
            })
        }
        "conv_transpose2d" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let cfg = sample_deconv_cfg(rng);
                let x = param(rng, &[cfg.n, cfg.c, cfg.h, cfg.w]);
                let w = param(rng, &[cfg.c, cfg.o, cfg.k, cfg.k]);
                let b = param(rng, &[cfg.o]);
                let with_bias = rng.gen_bool(0.5);
                let (oh, ow) = cfg.deconv_extent();
                let coefs = constant(rng, &[cfg.n, cfg.o, oh, ow]);
                let mut checked = vec![x.clone(), w.clone()];
                if with_bias {
                    checked.push(b.clone());
                }
                let (s, p) = (cfg.s, cfg.p);
                (
                    checked,
                    Box::new(move || {
                        let bias = if with_bias { Some(&b) } else { None };
                        project(&x.conv_transpose2d(&w, bias, s, p).unwrap(), &coefs)
                    }),
                )
            })
        }
        "batchnorm_train" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[2, 3, 4, 4]);
                let gamma = param(rng, &[3]);
                let beta = param(rng, &[3]);
                let rm = Tensor::zeros(&[3]);
                let rv = Tensor::ones(&[3]);
                let coefs = constant(rng, &[2, 3, 4, 4]);
                (
                    vec![x.clone(), gamma.clone(), beta.clone()],
                    Box::new(move || {
                        project(
                            &x.batch_norm(&gamma, &beta, &rm, &rv, 0.1, 1e-5, true).unwrap(),
                            &coefs,
                        )
                    }),
                )
            })
        }
        "batchnorm_eval" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[2, 3, 4, 4]);
                let gamma = param(rng, &[3]);
                let beta = param(rng, &[3]);
                let rm = constant(rng, &[3]);
                let rv = Tensor::from_vec(
                    (0..3).map(|_| rng.gen_range(0.5..1.5)).collect(),
                    &[3],
                )
                .unwrap();
                let coefs = constant(rng, &[2, 3, 4, 4]);
                (
                    vec![x.clone(), gamma.clone(), beta.clone()],
                    Box::new(move || {
                        project(
                            &x.batch_norm(&gamma, &beta, &rm, &rv, 0.1, 1e-5, false).unwrap(),
                            &coefs,
                        )
                    }),
                )
            })
        }
        "avg_pool" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[2, 3, 4, 6]);
                let coefs = constant(rng, &[2, 3, 2, 3]);
                (
                    vec![x.clone()],
                    Box::new(move || project(&x.avg_pool2d(2).unwrap(), &coefs)),
                )
            })
        }
        "global_avg_pool" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[2, 3, 4, 5]);
                let coefs = constant(rng, &[2, 3, 1, 1]);
                (
                    vec![x.clone()],
                    Box::new(move || project(&x.global_avg_pool().unwrap(), &coefs)),
                )
            })
        }
        "linear" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[3, 5]);
                let w = param(rng, &[4, 5]);
                let b = param(rng, &[4]);
                let coefs = constant(rng, &[3, 4]);
                (
                    vec![x.clone(), w.clone(), b.clone()],
                    Box::new(move || project(&x.linear(&w, &b).unwrap(), &coefs)),
                )
            })
        }
        "l2_normalize" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[2, 7]);
                let coefs = constant(rng, &[2, 7]);
                (
                    vec![x.clone()],
                    Box::new(move || project(&x.l2_normalize(1e-12).unwrap(), &coefs)),
                )
            })
        }
        "softmax_t" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[2, 5]);
                let t: f64 = rng.gen_range(0.5..5.0);
                let coefs = constant(rng, &[2, 5]);
                (
                    vec![x.clone()],
                    Box::new(move || project(&x.softmax_t(t).unwrap(), &coefs)),
                )
            })
        }
        "log_softmax" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[2, 5]);
                let coefs = constant(rng, &[2, 5]);
                (
                    vec![x.clone()],
                    Box::new(move || project(&x.log_softmax().unwrap(), &coefs)),
                )
            })
        }
        "square_channel_sum" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[2, 3, 3, 4]);
                let coefs = constant(rng, &[2, 12]);
                (
                    vec![x.clone()],
                    Box::new(move || project(&x.square_channel_sum().unwrap(), &coefs)),
                )
            })
        }
        "pnorm_rows_p1" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param_off_zero(rng, &[3, 6], 1e-3);
                (
                    vec![x.clone()],
                    Box::new(move || x.pnorm_rows_mean(NormP::L1).unwrap()),
                )
            })
        }
        "pnorm_rows_p2" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[3, 6]);
                (
                    vec![x.clone()],
                    Box::new(move || x.pnorm_rows_mean(NormP::L2).unwrap()),
                )
            })
        }
        "sqnorm_rows" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[3, 6]);
                (
                    vec![x.clone()],
                    Box::new(move || x.sqnorm_rows_mean().unwrap()),
                )
            })
        }
        "cross_entropy" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let x = param(rng, &[4, 6]);
                let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
                (
                    vec![x.clone()],
                    Box::new(move || x.cross_entropy_loss(&labels).unwrap()),
                )
            })
        }
        "kd_loss" => {
            run_gradient_instances(name, instances, seed, PRIM_TOL, grad_scale, &mut |rng| {
                let s = param(rng, &[3, 5]);
                let t = constant(rng, &[3, 5]);
                let temp: f64 = rng.gen_range(1.0..5.0);
                (
                    vec![s.clone()],
                    Box::new(move || s.kd_loss_vs(&t, temp).unwrap()),
                )
            })
        }
        "loss_cross_entropy_net" => {
            run_composite_instances(name, instances, seed, grad_scale, &mut |rng| {
                let net = MiniClassifier::new(rng);
                let x = param(rng, &[2, 2, 6, 6]);
                let labels = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
                let kink = Rc::new(Cell::new(f64::INFINITY));
                let mut checked = vec![x.clone()];
                checked.extend(net.params());
                let k = kink.clone();
                Composite {
                    checked,
                    forward: Box::new(move || {
                        let (logits, _) = net.forward(&x, &k);
                        logits.cross_entropy_loss(&labels).unwrap()
                    }),
                    kink,
                }
            })
        }
        "loss_reconstruction_net" => {
            run_composite_instances(name, instances, seed, grad_scale, &mut |rng| {
                let ae = MiniAutoencoder::new(rng);
                let x = constant(rng, &[2, 3, 5, 5]);
                let kink = Rc::new(Cell::new(f64::INFINITY));
                let checked = ae.params();
                let k = kink.clone();
                Composite {
                    checked,
                    forward: Box::new(move || {
                        let px = ae.forward(&x, &k);
                        loss::reconstruction_loss(&x, &px).unwrap()
                    }),
                    kink,
                }
            })
        }
        "loss_factor_transfer_p1_net" => factor_transfer_composite(name, instances, seed, grad_scale, NormP::L1),
        "loss_factor_transfer_p2_net" => factor_transfer_composite(name, instances, seed, grad_scale, NormP::L2),
        "loss_kd_net" => {
            run_composite_instances(name, instances, seed, grad_scale, &mut |rng| {
                let net = MiniClassifier::new(rng);
                let x = param(rng, &[2, 2, 6, 6]);
                let teacher = constant(rng, &[2, 3]);
                let kink = Rc::new(Cell::new(f64::INFINITY));
                let mut checked = vec![x.clone()];
                checked.extend(net.params());
                let k = kink.clone();
                Composite {
                    checked,
                    forward: Box::new(move || {
                        let (logits, _) = net.forward(&x, &k);
                        logits.kd_loss_vs(&teacher, 4.0).unwrap()
                    }),
                    kink,
                }
            })
        }
        "loss_at_net" => {
            run_composite_instances(name, instances, seed, grad_scale, &mut |rng| {
                let net = MiniClassifier::new(rng);
                let x = param(rng, &[2, 2, 6, 6]);
                let t1 = constant(rng, &[2, 4, 6, 6]);
                let t2 = constant(rng, &[2, 5, 6, 6]);
                let kink = Rc::new(Cell::new(f64::INFINITY));
                let mut checked = vec![x.clone()];
                checked.extend(net.params());
                let k = kink.clone();
                Composite {
                    checked,
                    forward: Box::new(move || {
                        let (_, feats) = net.forward(&x, &k);
                        loss::at_loss(&feats, &[t1.clone(), t2.clone()]).unwrap()
                    }),
                    kink,
                }
            })
        }
        "loss_student_total_net" => {
            run_composite_instances(name, instances, seed, grad_scale, &mut |rng| {
                let net = MiniClassifier::new(rng);
                let tr = MiniTranslator::new(rng, 3, 2);
                let x = param(rng, &[2, 2, 6, 6]);
                let labels = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
                let teacher_logits = constant(rng, &[2, 3]);
                let ft = constant(rng, &[2, 2, 6, 6]);
                let kink = Rc::new(Cell::new(f64::INFINITY));
                let mut checked = vec![x.clone()];
                checked.extend(net.params());
                checked.extend(tr.params());
                let k = kink.clone();
                Composite {
                    checked,
                    forward: Box::new(move || {
                        let (logits, feats) = net.forward(&x, &k);
                        let fs = tr.forward(&feats[0], &k);
                        track_normalized_diff(&ft, &fs, &k);
                        let cls = logits.cross_entropy_loss(&labels).unwrap();
                        let ft_term = loss::factor_transfer_loss(&ft, &fs, NormP::L1).unwrap();
                        let kd = logits.kd_loss_vs(&teacher_logits, 4.0).unwrap();
                        loss::compose_total(
                            loss::Method::FtKd,
                            &loss::LossParts {
                                cls,
                                ft: Some(ft_term),
                                kd: Some(kd),
                                at: None,
                                beta: 0.7,
                                at_beta: 0.0,
                            },
                        )
                        .unwrap()
                    }),
                    kink,
                }
            })
        }
        other => unreachable!("gradient check {other} not wired"),
    }
}

fn factor_transfer_composite(
    name: &'static str,
    instances: usize,
    seed: u64,
    grad_scale: f64,
    p: NormP,
) -> CheckReport {
    run_composite_instances(name, instances, seed, grad_scale, &mut |rng| {
        let tr = MiniTranslator::new(rng, 3, 2);
        let feature = param(rng, &[2, 3, 4, 4]);
        let ft = constant(rng, &[2, 2, 4, 4]);
        let kink = Rc::new(Cell::new(f64::INFINITY));
        let mut checked = vec![feature.clone()];
        checked.extend(tr.params());
        let k = kink.clone();
        Composite {
            checked,
            forward: Box::new(move || {
                let fs = tr.forward(&feature, &k);
                if p == NormP::L1 {
                    track_normalized_diff(&ft, &fs, &k);
                }
                loss::factor_transfer_loss(&ft, &fs, p).unwrap()
            }),
            kink,
        }
    })
}

/// Distance of the l2-normalized factor difference from the l1 kink.
fn track_normalized_diff(ft: &Tensor<f64>, fs: &Tensor<f64>, cell: &Cell<f64>) {
    let n = ft.shape()[0];
    let d = ft.numel() / n;
    let a = ft.to_vec();
    let b = fs.to_vec();
    let mut min_abs = f64::INFINITY;
    for r in 0..n {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let (na, nb) = (norm(&a[r * d..(r + 1) * d]), norm(&b[r * d..(r + 1) * d]));
        for i in 0..d {
            min_abs = min_abs.min((a[r * d + i] / na - b[r * d + i] / nb).abs());
        }
    }
    cell.set(cell.get().min(min_abs));
}

// ── tiny hand-built nets for composite checks ────────────────────────

/// conv-bn-lrelu ×2 with a linear head; exposes both per-stage feature maps.
struct MiniClassifier {
    w1: Tensor<f64>,
    g1: Tensor<f64>,
    b1: Tensor<f64>,
    rm1: Tensor<f64>,
    rv1: Tensor<f64>,
    w2: Tensor<f64>,
    g2: Tensor<f64>,
    b2: Tensor<f64>,
    rm2: Tensor<f64>,
    rv2: Tensor<f64>,
    fw: Tensor<f64>,
    fb: Tensor<f64>,
}

fn he_param(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::param(data, shape).expect("shape")
}

impl MiniClassifier {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        MiniClassifier {
            w1: he_param(rng, &[4, 2, 3, 3], 18),
            g1: Tensor::param(vec![1.0; 4], &[4]).unwrap(),
            b1: Tensor::param(vec![0.0; 4], &[4]).unwrap(),
            rm1: Tensor::zeros(&[4]),
            rv1: Tensor::ones(&[4]),
            w2: he_param(rng, &[5, 4, 3, 3], 36),
            g2: Tensor::param(vec![1.0; 5], &[5]).unwrap(),
            b2: Tensor::param(vec![0.0; 5], &[5]).unwrap(),
            rm2: Tensor::zeros(&[5]),
            rv2: Tensor::ones(&[5]),
            fw: he_param(rng, &[3, 5], 5),
            fb: Tensor::param(vec![0.0; 3], &[3]).unwrap(),
        }
    }

    fn params(&self) -> Vec<Tensor<f64>> {
        vec![
            self.w1.clone(),
            self.g1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.g2.clone(),
            self.b2.clone(),
            self.fw.clone(),
            self.fb.clone(),
        ]
    }

    /// Returns (logits, [f1, f2]).
    fn forward(&self, x: &Tensor<f64>, kink: &Cell<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let a1 = x
            .conv2d(&self.w1, None, 1, 1)
            .unwrap()
            .batch_norm(&self.g1, &self.b1, &self.rm1, &self.rv1, 0.1, 1e-5, true)
            .unwrap();
        track_min_abs(&a1, kink);
        let f1 = a1.leaky_relu(0.1).unwrap();
        let a2 = f1
            .conv2d(&self.w2, None, 1, 1)
            .unwrap()
            .batch_norm(&self.g2, &self.b2, &self.rm2, &self.rv2, 0.1, 1e-5, true)
            .unwrap();
        track_min_abs(&a2, kink);
        let f2 = a2.leaky_relu(0.1).unwrap();
        let logits = f2
            .global_avg_pool()
            .unwrap()
            .flatten_rows()
            .unwrap()
            .linear(&self.fw, &self.fb)
            .unwrap();
        (logits, vec![f1, f2])
    }
}

/// Three convs with biases, leaky rectifiers between, linear output.
struct MiniTranslator {
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    b2: Tensor<f64>,
    w3: Tensor<f64>,
    b3: Tensor<f64>,
}

impl MiniTranslator {
    fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Self {
        MiniTranslator {
            w1: he_param(rng, &[in_ch, in_ch, 3, 3], in_ch * 9),
            b1: Tensor::param(vec![0.0; in_ch], &[in_ch]).unwrap(),
            w2: he_param(rng, &[out_ch, in_ch, 3, 3], in_ch * 9),
            b2: Tensor::param(vec![0.0; out_ch], &[out_ch]).unwrap(),
            w3: he_param(rng, &[out_ch, out_ch, 3, 3], out_ch * 9),
            b3: Tensor::param(vec![0.0; out_ch], &[out_ch]).unwrap(),
        }
    }

    fn params(&self) -> Vec<Tensor<f64>> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
            self.w3.clone(),
            self.b3.clone(),
        ]
    }

    fn forward(&self, x: &Tensor<f64>, kink: &Cell<f64>) -> Tensor<f64> {
        let a1 = x.conv2d(&self.w1, Some(&self.b1), 1, 1).unwrap();
        track_min_abs(&a1, kink);
        let h1 = a1.leaky_relu(0.1).unwrap();
        let a2 = h1.conv2d(&self.w2, Some(&self.b2), 1, 1).unwrap();
        track_min_abs(&a2, kink);
        let h2 = a2.leaky_relu(0.1).unwrap();
        h2.conv2d(&self.w3, Some(&self.b3), 1, 1).unwrap()
    }
}

/// conv-lrelu ×2 encoder, deconv-lrelu + deconv decoder, all with biases.
struct MiniAutoencoder {
    e1: MiniTranslator,
    d1: Tensor<f64>,
    db1: Tensor<f64>,
    d2: Tensor<f64>,
    db2: Tensor<f64>,
}

impl MiniAutoencoder {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        MiniAutoencoder {
            e1: MiniTranslator::new(rng, 3, 2),
            d1: he_param(rng, &[2, 3, 3, 3], 18),
            db1: Tensor::param(vec![0.0; 3], &[3]).unwrap(),
            d2: he_param(rng, &[3, 3, 3, 3], 27),
            db2: Tensor::param(vec![0.0; 3], &[3]).unwrap(),
        }
    }

    fn params(&self) -> Vec<Tensor<f64>> {
        let mut p = self.e1.params();
        p.extend([
            self.d1.clone(),
            self.db1.clone(),
            self.d2.clone(),
            self.db2.clone(),
        ]);
        p
    }

    fn forward(&self, x: &Tensor<f64>, kink: &Cell<f64>) -> Tensor<f64> {
        let z = self.e1.forward(x, kink);
        let a = z.conv_transpose2d(&self.d1, Some(&self.db1), 1, 1).unwrap();
        track_min_abs(&a, kink);
        let h = a.leaky_relu(0.1).unwrap();
        h.conv_transpose2d(&self.d2, Some(&self.db2), 1, 1).unwrap()
    }
}

// ── convolution configuration sampling ───────────────────────────────

struct ConvCfg {
    n: usize,
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl ConvCfg {
    fn out_extent(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.p - self.k) / self.s + 1,
            (self.w + 2 * self.p - self.k) / self.s + 1,
        )
    }

    fn deconv_extent(&self) -> (usize, usize) {
        (
            (self.h - 1) * self.s + self.k - 2 * self.p,
            (self.w - 1) * self.s + self.k - 2 * self.p,
        )
    }
}

/// Valid conv configuration with extents up to `max_hw`: the input extent is
/// constructed as `k - 2p + s·t`, so the output extent is integral by
/// construction.
fn sample_conv_cfg(rng: &mut ChaCha8Rng, max_hw: usize) -> ConvCfg {
    loop {
        let k = [1usize, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2usize);
        let p = rng.gen_range(0..=2usize.min(k / 2 + 1));
        let extent = |rng: &mut ChaCha8Rng| -> Option<usize> {
            let base = k as isize - 2 * p as isize;
            for _ in 0..8 {
                let t = rng.gen_range(0..=((max_hw as isize) / s as isize)) as isize;
                let h = base + s as isize * t;
                if h >= 1 && h <= max_hw as isize && h as usize + 2 * p >= k {
                    return Some(h as usize);
                }
            }
            None
        };
        let (Some(h), Some(w)) = (extent(rng), extent(rng)) else {
            continue;
        };
        return ConvCfg {
            n: rng.gen_range(1..=2),
            c: rng.gen_range(1..=3),
            o: rng.gen_range(1..=4),
            h,
            w,
            k,
            s,
            p,
        };
    }
}

fn sample_deconv_cfg(rng: &mut ChaCha8Rng) -> ConvCfg {
    loop {
        let k = [1usize, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2usize);
        let p = rng.gen_range(0..=1usize);
        let h = rng.gen_range(2..=6usize);
        let w = rng.gen_range(2..=6usize);
        let cfg = ConvCfg {
            n: rng.gen_range(1..=2),
            c: rng.gen_range(1..=3),
            o: rng.gen_range(1..=4),
            h,
            w,
            k,
            s,
            p,
        };
        let (oh, ow) = ((h - 1) * s + k, (w - 1) * s + k);
        if oh > 2 * p && ow > 2 * p {
            return cfg;
        }
    }
}

// ── oracle checks ────────────────────────────────────────────────────

fn oracle_check(name: &'static str, seed: u64) -> CheckReport {
    match name {
        "oracle_conv2d" => {
            let mut rng = component_rng(seed, "check.oracle_conv2d");
            let instances = 200;
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let cfg = sample_conv_big(&mut rng);
                let x = constant(&mut rng, &[cfg.n, cfg.c, cfg.h, cfg.w]);
                let w = constant(&mut rng, &[cfg.o, cfg.c, cfg.k, cfg.k]);
                let b = constant(&mut rng, &[cfg.o]);
                let fast = x.conv2d(&w, Some(&b), cfg.s, cfg.p).unwrap();
                let naive = oracle::naive_conv2d(
                    &x.data(),
                    cfg.n,
                    cfg.c,
                    cfg.h,
                    cfg.w,
                    &w.data(),
                    cfg.o,
                    cfg.k,
                    cfg.k,
                    Some(&b.data()),
                    cfg.s,
                    cfg.p,
                );
                worst = worst.max(max_abs_diff(&fast.to_vec(), &naive));
            }
            CheckReport {
                name,
                kind: CheckKind::Oracle,
                instances,
                max_err: worst,
                tol: 1e-5,
            }
        }
        "oracle_conv_transpose2d" => {
            let mut rng = component_rng(seed, "check.oracle_conv_transpose2d");
            let instances = 200;
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let cfg = sample_deconv_cfg(&mut rng);
                let v = constant(&mut rng, &[cfg.n, cfg.c, cfg.h, cfg.w]);
                let w = constant(&mut rng, &[cfg.c, cfg.o, cfg.k, cfg.k]);
                let fast = v.conv_transpose2d(&w, None, cfg.s, cfg.p).unwrap();
                // Route 1: direct scatter loops.
                let naive = oracle::naive_conv_transpose2d(
                    &v.data(),
                    cfg.n,
                    cfg.c,
                    cfg.h,
                    cfg.w,
                    &w.data(),
                    cfg.o,
                    cfg.k,
                    cfg.k,
                    None,
                    cfg.s,
                    cfg.p,
                );
                worst = worst.max(max_abs_diff(&fast.to_vec(), &naive));
                // Route 2: the autodiff input-gradient of the adjoint conv.
                let (oh, ow) = cfg.deconv_extent();
                let x = param(&mut rng, &[cfg.n, cfg.o, oh, ow]);
                let w_conv =
                    Tensor::from_vec(w.to_vec(), &[cfg.c, cfg.o, cfg.k, cfg.k]).unwrap();
                let z = x.conv2d(&w_conv, None, cfg.s, cfg.p).unwrap();
                project(&z, &v).backward().unwrap();
                let adjoint = x.grad().unwrap();
                worst = worst.max(max_abs_diff(&fast.to_vec(), &adjoint));
            }
            CheckReport {
                name,
                kind: CheckKind::Oracle,
                instances,
                max_err: worst,
                tol: 1e-5,
            }
        }
        "oracle_linear" => {
            let mut rng = component_rng(seed, "check.oracle_linear");
            let instances = 100;
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (n, f, o) = (
                    rng.gen_range(1..=6),
                    rng.gen_range(1..=10),
                    rng.gen_range(1..=6),
                );
                let x = constant(&mut rng, &[n, f]);
                let w = constant(&mut rng, &[o, f]);
                let b = constant(&mut rng, &[o]);
                let fast = x.linear(&w, &b).unwrap();
                let naive = oracle::naive_linear(&x.data(), n, f, &w.data(), o, &b.data());
                worst = worst.max(max_abs_diff(&fast.to_vec(), &naive));
            }
            CheckReport {
                name,
                kind: CheckKind::Oracle,
                instances,
                max_err: worst,
                tol: 1e-6,
            }
        }
        "oracle_kd" => {
            let mut rng = component_rng(seed, "check.oracle_kd");
            let instances = 100;
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (n, k) = (rng.gen_range(1..=5), rng.gen_range(2..=8));
                let s = constant(&mut rng, &[n, k]);
                let t = constant(&mut rng, &[n, k]);
                let temp: f64 = rng.gen_range(1.0..5.0);
                let fast = s.kd_loss_vs(&t, temp).unwrap().item();
                let direct = oracle::direct_kd(&s.data(), &t.data(), n, k, temp);
                worst = worst.max(rel_err(fast, direct));
            }
            CheckReport {
                name,
                kind: CheckKind::Oracle,
                instances,
                max_err: worst,
                tol: 1e-6,
            }
        }
        "oracle_reconstruction" => {
            let mut rng = component_rng(seed, "check.oracle_reconstruction");
            let instances = 100;
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let n = rng.gen_range(1..=4);
                let shape = [n, rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)];
                let x = constant(&mut rng, &shape);
                let px = constant(&mut rng, &shape);
                let fast = loss::reconstruction_loss(&x, &px).unwrap().item();
                let direct = oracle::direct_reconstruction(&x.data(), &px.data(), n);
                worst = worst.max(rel_err(fast, direct));
            }
            CheckReport {
                name,
                kind: CheckKind::Oracle,
                instances,
                max_err: worst,
                tol: 1e-6,
            }
        }
        "oracle_factor_distance" => {
            let mut rng = component_rng(seed, "check.oracle_factor_distance");
            let instances = 100;
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let n = rng.gen_range(1..=4);
                let shape = [n, rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)];
                let ft = constant(&mut rng, &shape);
                let fs = constant(&mut rng, &shape);
                for p in [NormP::L1, NormP::L2] {
                    let fast = loss::factor_transfer_loss(&ft, &fs, p).unwrap().item();
                    let direct =
                        oracle::direct_factor_distance(&ft.data(), &fs.data(), n, p.as_u8());
                    worst = worst.max(rel_err(fast, direct));
                }
            }
            CheckReport {
                name,
                kind: CheckKind::Oracle,
                instances,
                max_err: worst,
                tol: 1e-6,
            }
        }
        other => unreachable!("oracle check {other} not wired"),
    }
}

/// Bigger configurations for the convolution oracle (up to 4x8x16x16).
fn sample_conv_big(rng: &mut ChaCha8Rng) -> ConvCfg {
    loop {
        let k = [1usize, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2usize);
        let p = rng.gen_range(0..=2usize);
        let h = rng.gen_range(1..=16usize);
        let w = rng.gen_range(1..=16usize);
        if h + 2 * p < k || w + 2 * p < k {
            continue;
        }
        if (h + 2 * p - k) % s != 0 || (w + 2 * p - k) % s != 0 {
            continue;
        }
        return ConvCfg {
            n: rng.gen_range(1..=4),
            c: rng.gen_range(1..=8),
            o: rng.gen_range(1..=8),
            h,
            w,
            k,
            s,
            p,
        };
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle shapes must agree");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_catches_injected_fault() {
        let reports = run_checks(&["linear".to_string()], 3, 7, Some("linear")).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(
            !reports[0].pass(),
            "a 2% gradient corruption must be flagged, max_err={}",
            reports[0].max_err
        );
        let honest = run_checks(&["linear".to_string()], 3, 7, None).unwrap();
        assert!(honest[0].pass(), "honest check fails: {}", honest[0].max_err);
    }

    #[test]
    fn unknown_filter_is_rejected() {
        assert!(run_checks(&["warp_drive".to_string()], 1, 0, None).is_err());
    }

    #[test]
    fn a_few_cheap_checks_pass() {
        for name in ["add", "mul", "softmax_t", "cross_entropy", "l2_normalize"] {
            let r = run_checks(&[name.to_string()], 5, 11, None).unwrap();
            assert!(r[0].pass(), "{name} failed with max_err {}", r[0].max_err);
        }
    }
}
