//! Acceptance run: one PASS/FAIL line per criterion, with effect sizes.
//!
//! Criteria listed in `KNOWN_FAILURES` are still evaluated and printed as
//! FAIL when they fail; they do not change the exit status. Everything else
//! that fails makes the run exit non-zero.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use cdp_core::config::ConfigDoc;
use cdp_core::contraction::{
    frobenius_loss, lambda_max_estimate, power_iteration_error_bound, ContractionConfig, LossType,
};
use cdp_core::diagnostics::{self, random_orthogonal, SamplingSpec, SignTest};
use cdp_core::linalg::{exact_eigmax, sym, symmetric_eigen};
use cdp_core::network::{Activation, NetworkConfig};
use cdp_core::sampler::{self, SamplerKind};
use cdp_core::toyworld::{Component, GmmTask, OracleField, TaskState};
use cdp_core::train::{self, loss_and_grad, rng_stream, Batch, NoiseDraw, TrainConfig};
use cdp_core::{EpsField, NoiseSchedule, ScoreNetwork, ZeroField};

/// Criteria whose failure is explained in the project notes (see README).
const KNOWN_FAILURES: &[usize] = &[10, 12];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load_cfg(name: &str) -> TrainConfig {
    let doc = ConfigDoc::load(&repo().join("configs").join(name)).expect("config file");
    TrainConfig::from_doc(&doc).expect("valid config")
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn richardson(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
    let d = |h: f64| (f(t + h) - f(t - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn gaussian_task(mean: f64, std: f64) -> GmmTask {
    GmmTask {
        version: 1,
        name: "gaussian".into(),
        d_a: 1,
        d_s: 1,
        states: vec![TaskState {
            state: vec![0.0],
            weight: 1.0,
            components: vec![Component {
                weight: 1.0,
                mean: vec![mean],
                variance: vec![std * std],
            }],
        }],
    }
}

fn small_net(seed: u64, d_a: usize) -> ScoreNetwork {
    let mut rng = rng_stream(seed, 99);
    let depth = rng.random_range(1..=3);
    let width = rng.random_range(4..=16);
    let cfg = NetworkConfig {
        hidden: vec![width; depth],
        time_embed_dim: 4,
        activation: Activation::Tanh,
        residual: seed % 2 == 0,
        zero_init_output: false,
    };
    ScoreNetwork::new(d_a, 1, &cfg, seed).unwrap()
}

fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Array2<f64> {
    let n = x.len();
    let m = f(x).len();
    let mut j = Array2::zeros((m, n));
    for k in 0..n {
        let mut p = x.to_vec();
        let mut q = x.to_vec();
        p[k] += h;
        q[k] -= h;
        let (fp, fq) = (f(&p), f(&q));
        for i in 0..m {
            j[[i, k]] = (fp[i] - fq[i]) / (2.0 * h);
        }
    }
    j
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn criterion_1() -> Outcome {
    let mut id: f64 = 0.0;
    let mut df: f64 = 0.0;
    let mut dg: f64 = 0.0;
    let mut thr: f64 = 0.0;
    for sc in [NoiseSchedule::default(), NoiseSchedule::cosine()] {
        let h = 1e-5;
        for i in 0..1000 {
            let t = sc.t_eps + h + (1.0 - 2.0 * sc.t_eps - 2.0 * h) * i as f64 / 999.0;
            let (a, s) = sc.alpha_sigma(t);
            id = id.max((a * a + s * s - 1.0).abs());
            df = df.max((richardson(|x| sc.log_alpha(x), t, h) - sc.drift_f(t)).abs());
            let g2 = richardson(|x| sc.sigma(x).powi(2), t, h) - 2.0 * sc.drift_f(t) * s * s;
            dg = dg.max((g2 - sc.diffusion_g2(t)).abs());
            thr = thr.max((sc.contraction_threshold(t) - s).abs());
        }
    }
    outcome(
        id < 1e-12 && df < 1e-6 && dg < 1e-6 && thr < 1e-12,
        format!("max |a^2+s^2-1| {id:.1e}, f vs FD {df:.1e}, g^2 vs FD {dg:.1e}, |-f/h - sigma| {thr:.1e}"),
    )
}

fn criterion_2() -> Outcome {
    let sc = NoiseSchedule::default();
    let mut jac_err: f64 = 0.0;
    let mut dsm_err: f64 = 0.0;
    let mut contr_err: f64 = 0.0;
    let nets = 24;
    for seed in 0..nets {
        let d_a = 1 + (seed as usize % 3);
        let net = small_net(seed, d_a);
        let mut rng = rng_stream(seed, 7);
        for _ in 0..3 {
            let a: Vec<f64> = (0..d_a).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = [rng.random_range(-1.0..1.0)];
            let t = rng.random_range(0.01..1.0);
            let j = net.input_jacobian(&a, &s, t).unwrap();
            let fd = fd_jacobian(|x| net.forward(x, &s, t).unwrap(), &a, 1e-5);
            jac_err = jac_err.max(max_abs(&j, &fd));
        }

        let n = 6;
        let a0 = Array2::from_shape_fn((n, d_a), |_| rng.random_range(-1.0..1.0));
        let st = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        let batch = Batch { a0, s: st };
        let noise = NoiseDraw::sample(&sc, n, d_a, &mut rng);
        let plain = ContractionConfig {
            gamma: 0.0,
            ..ContractionConfig::default()
        };
        let penalized = ContractionConfig {
            gamma: 1.0,
            loss_type: LossType::Frobenius,
            ..ContractionConfig::default()
        };
        let eval = |n: &ScoreNetwork, cfg: &ContractionConfig| {
            loss_and_grad(n, &sc, &batch, &noise, cfg, &mut rng_stream(seed, 8)).unwrap()
        };
        let (_, g_dsm) = eval(&net, &plain);
        let (_, g_total) = eval(&net, &penalized);
        let g_contr: Vec<f64> = g_total.iter().zip(&g_dsm).map(|(a, b)| a - b).collect();
        let p = net.params_flat();
        let h = 1e-6;
        let (mut fd_dsm, mut fd_contr) = (Vec::new(), Vec::new());
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += h;
            let up = eval(&net.with_params(&q).unwrap(), &penalized).0;
            q[i] -= 2.0 * h;
            let down = eval(&net.with_params(&q).unwrap(), &penalized).0;
            fd_dsm.push((up.dsm - down.dsm) / (2.0 * h));
            fd_contr.push((up.contraction - down.contraction) / (2.0 * h));
        }
        dsm_err = dsm_err.max(rel_error(&g_dsm, &fd_dsm));
        contr_err = contr_err.max(rel_error(&g_contr, &fd_contr));
    }
    outcome(
        jac_err < 1e-5 && dsm_err < 1e-3 && contr_err < 1e-3,
        format!(
            "{nets} nets: J_eps vs FD max-abs {jac_err:.1e}; grad rel. error dsm {dsm_err:.1e}, frobenius {contr_err:.1e}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let scheds = [NoiseSchedule::default(), NoiseSchedule::cosine()];
    let oracles: Vec<OracleField> = [GmmTask::t2(), GmmTask::t3()]
        .into_iter()
        .map(|task| OracleField {
            task,
            sched: NoiseSchedule::default(),
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut rng = rng_stream(3, 0);
    for i in 0..1000 {
        let sc = scheds[i % 2];
        let t = rng.random_range(0.0..1.0);
        let (field, a, s): (Box<dyn EpsField>, Vec<f64>, Vec<f64>) = match i % 4 {
            0 | 1 => {
                let d = 2 + i % 3;
                let a = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                (Box::new(small_net(i as u64, d)), a, vec![0.2])
            }
            k => {
                let o = oracles[k - 2].clone();
                let sc_o = OracleField { sched: sc, ..o };
                let si = rng.random_range(0..sc_o.task.states.len());
                let s = sc_o.task.states[si].state.clone();
                let a = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                (Box::new(sc_o), a, s)
            }
        };
        let j_eps = field.eps_jacobian(&a, &s, t).unwrap();
        let j_f = sampler::ode_jacobian(field.as_ref(), &sc, &a, &s, t).unwrap();
        let lhs = exact_eigmax(&sym(&j_f.view()).unwrap().view()).unwrap();
        let rhs = sc.drift_f(t) + sc.h_coeff(t) * exact_eigmax(&sym(&j_eps.view()).unwrap().view()).unwrap();
        worst = worst.max((lhs - rhs).abs());
    }
    outcome(worst < 1e-10, format!("1000 points, max |difference| {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = rng_stream(4, 0);
    let (mut worst_k200, mut bound_violations, mut frob_violations, mut negative) = (0.0f64, 0, 0, 0);
    let mut worst_ratio: f64 = 0.0;
    for i in 0..1000 {
        let n = 2 + i % 15;
        let scale = rng.random_range(0.1..10.0);
        // a gap of at least half the spread below the top eigenvalue
        let offset = if i % 3 == 0 { -3.0 } else { rng.random_range(-1.0..1.0) };
        let mut vals: Vec<f64> = (0..n).map(|_| scale * (offset + rng.random_range(-1.0..0.5))).collect();
        vals[0] = scale * (offset + 1.0);
        if vals.iter().all(|v| *v < 0.0) {
            negative += 1;
        }
        let q = random_orthogonal(n, &mut rng);
        let d = Array2::from_diag(&ndarray::Array1::from(vals.clone()));
        let m = q.dot(&d).dot(&q.t());
        let m = (&m + &m.t()) * 0.5;
        let exact = symmetric_eigen(&m.view()).unwrap();
        let top = exact.max();

        let est = lambda_max_estimate(&m.view(), 200, &mut rng_stream(4, 1 + i as u64)).unwrap();
        worst_k200 = worst_k200.max((est.lambda_hat - top).abs());

        let est4 = lambda_max_estimate(&m.view(), 4, &mut rng_stream(4, 5000 + i as u64)).unwrap();
        let mu = est4.shift_used;
        let shifted: Vec<f64> = exact.values.iter().map(|v| v + mu).collect();
        let l1 = shifted[n - 1];
        let l2 = shifted[..n - 1].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let u1 = exact.vectors.column(n - 1);
        let c: f64 = u1.iter().zip(&est4.start).map(|(x, y)| x * y).sum();
        let bound = power_iteration_error_bound(l1, l2, c, 4);
        let err = (est4.lambda_hat - top).abs();
        if err > bound * (1.0 + 1e-9) + 1e-12 {
            bound_violations += 1;
        }
        if bound.is_finite() && bound > 0.0 {
            worst_ratio = worst_ratio.max(err / bound);
        }
        for beta in [0.0, 0.1, 1.0] {
            if (top + beta).abs() > frobenius_loss(&m.view(), beta) + 1e-12 {
                frob_violations += 1;
            }
        }
    }
    outcome(
        worst_k200 < 1e-6 && bound_violations == 0 && frob_violations == 0,
        format!(
            "1000 matrices ({negative} all-negative): K=200 max error {worst_k200:.1e}; K=4 bound violations {bound_violations} (max error/bound {worst_ratio:.2}); Frobenius bound violations {frob_violations}"
        ),
    )
}

/// Zero, Gaussian, T1, T2 and T3 oracle flows; trained networks fill up to 100.
const FIXED_FLOWS: usize = 20 + 15 + 10 + 2 * 15;

fn criterion_5(trained: &[(&str, &ScoreNetwork, &GmmTask)]) -> Outcome {
    let sc = NoiseSchedule::default();
    let mut flows = 0;
    let mut worst: f64 = 0.0;
    let mut worst_equal: f64 = 0.0;
    let mut violations = 0;
    let mut run = |field: &dyn EpsField, s: &[f64], seed: u64, equality: bool| {
        let mut rng = rng_stream(5, seed);
        let d = field.action_dim();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let delta: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let audit = sampler::gronwall_audit(field, &sc, s, &z, &delta, 200).unwrap();
        let ratio = audit.observed_ratio / audit.record.bound_factor;
        worst = worst.max(ratio);
        if ratio > 1.0 + 1e-6 {
            violations += 1;
        }
        if equality {
            worst_equal = worst_equal.max((ratio - 1.0).abs());
        }
        flows += 1;
    };
    for i in 0..20 {
        run(&ZeroField { dim: 1 + i % 3 }, &[0.0], i as u64, true);
    }
    let gauss = OracleField {
        task: gaussian_task(0.5, 0.3),
        sched: sc,
    };
    for i in 0..15 {
        run(&gauss, &[0.0], 100 + i, true);
    }
    let t1 = OracleField {
        task: GmmTask::t1(),
        sched: sc,
    };
    for i in 0..10 {
        run(&t1, &t1.task.states[i % 2].state.clone(), 200 + i as u64, true);
    }
    for task in [GmmTask::t2(), GmmTask::t3()] {
        let o = OracleField { task, sched: sc };
        for i in 0..15 {
            let s = o.task.states[i % o.task.states.len()].state.clone();
            run(&o, &s, 300 + i as u64, false);
        }
    }
    let remaining = 100 - FIXED_FLOWS;
    for (k, (_, net, task)) in trained.iter().enumerate() {
        let count = remaining / trained.len() + usize::from(k < remaining % trained.len());
        for i in 0..count {
            let s = task.states[i % task.states.len()].state.clone();
            run(*net, &s, 400 + 100 * k as u64 + i as u64, task.d_a == 1);
        }
    }
    let names: Vec<&str> = trained.iter().map(|t| t.0).collect();
    outcome(
        violations == 0 && worst_equal < 1e-6 && flows == 100,
        format!(
            "{flows} flows (zero, oracle, trained: {}): max observed/bound {worst:.9}, violations {violations}, scalar-case |ratio-1| {worst_equal:.1e}",
            names.join(", ")
        ),
    )
}

/// Exact terminal state of the probability-flow ODE for a 1D Gaussian,
/// including the stretch `[1 - t_eps, 1]` where the schedule is frozen.
fn gaussian_exact(sc: &NoiseSchedule, mean: f64, std: f64, a1: f64) -> f64 {
    let ts = 1.0 - sc.t_eps;
    let (alpha, sigma) = sc.alpha_sigma(ts);
    let s2 = alpha * alpha * std * std + sigma * sigma;
    let h = sc.h_coeff(ts);
    let k = sc.drift_f(ts) + h * sigma / s2;
    let c = -h * sigma * alpha * mean / s2;
    let a_star = (a1 + c / k) * (-k * sc.t_eps).exp() - c / k;
    let (alpha_e, sigma_e) = sc.alpha_sigma(sc.t_eps);
    let s_e = (alpha_e * alpha_e * std * std + sigma_e * sigma_e).sqrt();
    alpha_e * mean + s_e / s2.sqrt() * (a_star - alpha * mean)
}

fn criterion_6() -> Outcome {
    let mut zero_err: f64 = 0.0;
    for sc in [NoiseSchedule::default(), NoiseSchedule::cosine()] {
        let field = ZeroField { dim: 2 };
        for seed in 0..10 {
            let mut rng = rng_stream(6, seed);
            let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            for n in [2, 5, 12, 40] {
                let f = sampler::sample_dpm2m(&field, &sc, &[0.0], &z, n).unwrap();
                let ratio = sc.alpha(*f.times.last().unwrap()) / sc.alpha(f.times[0]);
                for i in 0..2 {
                    zero_err = zero_err.max((f.terminal()[i] - z[i] * ratio).abs());
                }
                let d = sc.discretize(n).unwrap();
                let f = sampler::sample_ddim(&field, &d, &[0.0], &z, false).unwrap();
                let ratio = (d.alpha_bar_prev(0) / d.alpha_bars[n - 1]).sqrt();
                for i in 0..2 {
                    zero_err = zero_err.max((f.terminal()[i] - z[i] * ratio).abs());
                }
            }
        }
    }

    let sc = NoiseSchedule::default();
    let (mean, std) = (0.5, 0.3);
    let oracle = OracleField {
        task: gaussian_task(mean, std),
        sched: sc,
    };
    let seeds: Vec<f64> = {
        let mut rng = rng_stream(6, 100);
        (0..20).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let ns = [20usize, 40, 80, 160, 320];
    let errors = |kind: SamplerKind| -> Vec<f64> {
        ns.iter()
            .map(|&n| {
                seeds
                    .iter()
                    .map(|&z| {
                        let f = sampler::sample_deterministic(kind, &oracle, &sc, &[0.0], &[z], n).unwrap();
                        (f.terminal()[0] - gaussian_exact(&sc, mean, std, z)).abs()
                    })
                    .sum::<f64>()
                    / seeds.len() as f64
            })
            .collect()
    };
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let euler = -diagnostics::log_log_slope(&xs, &errors(SamplerKind::Euler));
    let dpm = -diagnostics::log_log_slope(&xs, &errors(SamplerKind::Dpm2m));
    outcome(
        zero_err < 1e-6 && (0.8..=1.2).contains(&euler) && dpm >= 1.6,
        format!("zero-field max error {zero_err:.1e}; convergence order euler {euler:.3}, dpm2m {dpm:.3}"),
    )
}

fn criterion_7() -> Outcome {
    let sc = NoiseSchedule::default();
    let d = sc.discretize(5).unwrap();
    let oracle = OracleField {
        task: GmmTask::t2(),
        sched: sc,
    };
    let nets: Vec<ScoreNetwork> = (0..3).map(|k| small_net(70 + k, 2)).collect();
    let mut fields: Vec<&dyn EpsField> = vec![&oracle];
    fields.extend(nets.iter().map(|n| n as &dyn EpsField));
    let s = [0.0];
    let (mut step_err, mut flow_err): (f64, f64) = (0.0, 0.0);
    for (fi, field) in fields.iter().enumerate() {
        let mut rng = rng_stream(7, fi as u64);
        for _ in 0..4 {
            let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noises: Vec<Vec<f64>> = (0..5).map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            for index in 0..5 {
                let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
                let j = sampler::step_jacobian_ddim(*field, &d, &a, &s, index).unwrap();
                let fd = fd_jacobian(|x| sampler::ddim_step(*field, &d, x, &s, index).unwrap(), &a, 1e-5);
                step_err = step_err.max(max_abs(&j, &fd));
                let j = sampler::step_jacobian_ddpm(*field, &d, &a, &s, index).unwrap();
                let fd = fd_jacobian(|x| sampler::ddpm_step(*field, &d, x, &s, index, &noises[0]).unwrap(), &a, 1e-5);
                step_err = step_err.max(max_abs(&j, &fd));
            }
            let f = sampler::sample_ddim(*field, &d, &s, &z, true).unwrap();
            let j = sampler::flow_jacobian(f.per_step_jacobians.as_ref().unwrap()).unwrap();
            let fd = fd_jacobian(|x| sampler::sample_ddim(*field, &d, &s, x, false).unwrap().terminal().to_vec(), &z, 1e-5);
            flow_err = flow_err.max(max_abs(&j, &fd));
            let f = sampler::sample_ddpm(*field, &d, &s, &z, &noises, true).unwrap();
            let j = sampler::flow_jacobian(f.per_step_jacobians.as_ref().unwrap()).unwrap();
            let fd = fd_jacobian(
                |x| sampler::sample_ddpm(*field, &d, &s, x, &noises, false).unwrap().terminal().to_vec(),
                &z,
                1e-5,
            );
            flow_err = flow_err.max(max_abs(&j, &fd));
        }
    }
    outcome(
        step_err < 1e-5 && flow_err < 1e-4,
        format!("per-step max-abs {step_err:.1e}, flow product max-abs {flow_err:.1e} (2D, T=5)"),
    )
}

fn mixture_moments(task: &GmmTask, si: usize) -> (f64, f64) {
    let comps = &task.states[si].components;
    let mean: f64 = comps.iter().map(|c| c.weight * c.mean[0]).sum();
    let second: f64 = comps.iter().map(|c| c.weight * (c.variance[0] + c.mean[0] * c.mean[0])).sum();
    (mean, (second - mean * mean).sqrt())
}

fn criterion_8(net: &ScoreNetwork, sched: &NoiseSchedule, task: &GmmTask) -> Outcome {
    let oracle = OracleField {
        task: task.clone(),
        sched: *sched,
    };
    let (mut se, mut se_score, mut count) = (0.0, 0.0, 0usize);
    for si in 0..task.states.len() {
        let (mean, std) = mixture_moments(task, si);
        let s = &task.states[si].state;
        for t in diagnostics::time_grid(sched, 40) {
            let (alpha, sigma) = sched.alpha_sigma(t);
            let spread = (alpha * alpha * std * std + sigma * sigma).sqrt();
            for k in 0..41 {
                let a = [alpha * mean + spread * (-2.5 + 5.0 * k as f64 / 40.0)];
                let e = net.forward(&a, s, t).unwrap()[0];
                let e_star = oracle.eps(&a, s, t).unwrap()[0];
                se += (e - e_star).powi(2);
                se_score += ((e - e_star) / sigma).powi(2);
                count += 1;
            }
        }
    }
    let rmse = (se / count as f64).sqrt();
    let score_rmse = (se_score / count as f64).sqrt();

    let spec = SamplingSpec {
        kind: SamplerKind::Dpm2m,
        steps: 50,
    };
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    let mut moments = Vec::new();
    for si in 0..task.states.len() {
        let mut rng = rng_stream(8, si as u64);
        let seeds: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = task.states[si].state.clone();
        let xs: Vec<f64> = seeds
            .par_iter()
            .map(|z| diagnostics::sample_one(net, sched, &s, &[*z], spec, &mut rng_stream(0, 0)).unwrap()[0])
            .collect();
        let m = diagnostics::mean(&xs);
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        let (tm, tsd) = mixture_moments(task, si);
        worst_mean = worst_mean.max((m - tm).abs());
        worst_std = worst_std.max((sd - tsd).abs());
        moments.push(format!("state {si}: mean {m:.4}/{tm:.4}, std {sd:.4}/{tsd:.4}"));
    }
    outcome(
        rmse < 0.05 && worst_mean < 0.05 && worst_std < 0.03,
        format!(
            "eps RMSE {rmse:.4} (score units {score_rmse:.3}); {}; max |mean err| {worst_mean:.4}, max |std err| {worst_std:.4}",
            moments.join("; ")
        ),
    )
}

struct T2Models {
    task: GmmTask,
    sched: NoiseSchedule,
    /// `[seed] -> (baseline, contractive)` on the full data stream.
    full: Vec<(ScoreNetwork, ScoreNetwork)>,
    /// Same with 10% of the data pool.
    scarce: Vec<(ScoreNetwork, ScoreNetwork)>,
}

fn train_t2() -> T2Models {
    let base = load_cfg("t2_baseline.cfg");
    let contr = load_cfg("t2_contractive.cfg");
    let task = GmmTask::t2();
    let mut jobs = Vec::new();
    for &seed in &SEEDS {
        for fraction in [1.0, 0.1] {
            for cfg in [&base, &contr] {
                jobs.push(TrainConfig {
                    rng_seed: seed,
                    data_fraction: fraction,
                    ..cfg.clone()
                });
            }
        }
    }
    let nets: Vec<ScoreNetwork> = jobs
        .par_iter()
        .map(|cfg| train::train(cfg, &task).unwrap().checkpoint.ema_network().unwrap())
        .collect();
    let mut it = nets.into_iter();
    let mut full = Vec::new();
    let mut scarce = Vec::new();
    for _ in SEEDS {
        full.push((it.next().unwrap(), it.next().unwrap()));
        scarce.push((it.next().unwrap(), it.next().unwrap()));
    }
    T2Models {
        task,
        sched: base.schedule,
        full,
        scarce,
    }
}

fn sign_line(label: &str, values: &[(f64, f64)], test: &SignTest) -> String {
    let per_seed: Vec<String> = values.iter().map(|(b, c)| format!("{b:.4}/{c:.4}")).collect();
    format!("{label} baseline/contractive per seed [{}]; trend in {}", per_seed.join(", "), test.summary())
}

fn criterion_9(m: &T2Models) -> Outcome {
    let values: Vec<(f64, f64)> = m
        .full
        .iter()
        .map(|(b, c)| {
            let rb = diagnostics::contraction_report(b, &m.sched, &m.task, 9, None).unwrap();
            let rc = diagnostics::contraction_report(c, &m.sched, &m.task, 9, None).unwrap();
            (rb.mean_lambda_eps, rc.mean_lambda_eps)
        })
        .collect();
    let test = SignTest::from_differences(&values.iter().map(|(b, c)| b - c).collect::<Vec<_>>());
    outcome(test.passed, sign_line("mean grid lambda_max(sym J_eps)", &values, &test))
}

fn criterion_10(m: &T2Models) -> Outcome {
    let spec = SamplingSpec {
        kind: SamplerKind::Dpm2m,
        steps: 50,
    };
    let wmv = |n: &ScoreNetwork| {
        diagnostics::seed_sensitivity(n, &m.sched, &m.task, 0, 500, spec, 0, 1010)
            .unwrap()
            .within_mode_variance
    };
    let values: Vec<(f64, f64)> = m.full.iter().map(|(b, c)| (wmv(b), wmv(c))).collect();
    let test = SignTest::from_differences(&values.iter().map(|(b, c)| b - c).collect::<Vec<_>>());
    outcome(test.passed, sign_line("median within-mode terminal variance", &values, &test))
}

fn ed_at(m: &T2Models, pair: &(ScoreNetwork, ScoreNetwork), steps: &[usize]) -> diagnostics::SolverSweep {
    let fields: [(&str, &(dyn EpsField + Sync)); 2] = [("baseline", &pair.0), ("contractive", &pair.1)];
    diagnostics::solver_sweep(&fields, &m.sched, &m.task, steps, SamplerKind::Dpm2m, 2000, 1111).unwrap()
}

fn criterion_11_12(m: &T2Models) -> (Outcome, Outcome) {
    let full: Vec<_> = m.full.iter().map(|p| ed_at(m, p, &[5, 15, 50])).collect();
    let degr: Vec<(f64, f64)> = full
        .iter()
        .map(|s| (s.degradation_of("baseline").unwrap(), s.degradation_of("contractive").unwrap()))
        .collect();
    let t11 = SignTest::from_differences(&degr.iter().map(|(b, c)| b - c).collect::<Vec<_>>());
    let c11 = outcome(t11.passed, sign_line("energy-distance degradation 50->5 steps", &degr, &t11));

    let ed50 = |s: &diagnostics::SolverSweep, model: &str| {
        s.rows.iter().find(|r| r.model == model && r.steps == 50).unwrap().energy_distance
    };
    let adv_full: Vec<f64> = full.iter().map(|s| ed50(s, "baseline") - ed50(s, "contractive")).collect();
    let adv_scarce: Vec<f64> = m
        .scarce
        .iter()
        .map(|p| {
            let s = ed_at(m, p, &[50]);
            ed50(&s, "baseline") - ed50(&s, "contractive")
        })
        .collect();
    let values: Vec<(f64, f64)> = adv_scarce.iter().copied().zip(adv_full.iter().copied()).collect();
    let t12 = SignTest::from_differences(&values.iter().map(|(s, f)| s - f).collect::<Vec<_>>());
    let per_seed: Vec<String> = values.iter().map(|(s, f)| format!("{s:+.4}/{f:+.4}")).collect();
    let c12 = outcome(
        t12.passed,
        format!(
            "advantage (baseline ED - contractive ED) at 10%/100% data per seed [{}]; trend in {}",
            per_seed.join(", "),
            t12.summary()
        ),
    );
    (c11, c12)
}

fn cdp(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_cdp"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_13() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "task = t2\ntrain.steps = 150\ntrain.batch_size = 64\ntrain.learning_rate = 1e-3\n\
         train.eval_every = 25\ntrain.ema_rate = 0.9\nnetwork.hidden = 16, 16\nnetwork.time_embed_dim = 8\n\
         contraction.gamma = 0.1\ndata.fraction = 0.5\ndata.pool_size = 200\n",
    )
    .unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let mut compared = 0;
    let mut mismatched = Vec::new();
    let mut failed = Vec::new();
    let mut outputs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for rep in 0..2 {
        let root = dir.join(format!("rep{rep}"));
        let run = root.join("run");
        let ckpt = run.join("checkpoint.ckpt");
        let commands: Vec<Vec<String>> = vec![
            vec!["train".into(), "--config".into(), p(&cfg), "--out".into(), p(&run), "--seed".into(), "9".into()],
            vec![
                "sample".into(), "--checkpoint".into(), p(&ckpt), "--n".into(), "50".into(), "--sampler".into(),
                "ddpm".into(), "--steps".into(), "20".into(), "--out".into(), p(&root.join("samples.csv")),
            ],
            vec!["report".into(), "contraction".into(), "--checkpoint".into(), p(&ckpt), "--grid".into(), "4".into(), "--out".into(), p(&root.join("rep"))],
            vec![
                "report".into(), "seed_sensitivity".into(), "--checkpoint".into(), p(&ckpt), "--n".into(), "20".into(),
                "--steps".into(), "15".into(), "--gronwall-steps".into(), "30".into(), "--out".into(), p(&root.join("rep")),
            ],
            vec![
                "report".into(), "solver_sweep".into(), "--checkpoint".into(), p(&ckpt), "--n".into(), "100".into(),
                "--steps".into(), "4,12".into(), "--out".into(), p(&root.join("rep")),
            ],
            vec!["report".into(), "pi_bench".into(), "--dims".into(), "2,8".into(), "--ks".into(), "4,50".into(), "--reps".into(), "20".into(), "--out".into(), p(&root.join("rep"))],
            vec![
                "sweep".into(), "--config".into(), p(&cfg), "--gammas".into(), "0,0.1".into(), "--seeds".into(), "1".into(),
                "--eval-n".into(), "100".into(), "--eval-grid".into(), "3".into(), "--out".into(), p(&root.join("sweep")),
            ],
        ];
        for c in &commands {
            let args: Vec<&str> = c.iter().map(String::as_str).collect();
            if !cdp(&args) {
                failed.push(c[0].clone());
            }
        }
        let files = [
            "run/config.txt",
            "run/runlog.jsonl",
            "run/checkpoint.ckpt",
            "run/checkpoint.json",
            "samples.csv",
            "rep/contraction.csv",
            "rep/seed_sensitivity.csv",
            "rep/solver_sweep.csv",
            "rep/pi_bench.csv",
            "sweep/gamma_sweep.csv",
            "sweep/runs/gamma_0.1_seed1/runlog.jsonl",
        ];
        outputs.push(
            files
                .iter()
                .map(|f| (f.to_string(), std::fs::read(root.join(f)).unwrap_or_default()))
                .collect(),
        );
    }
    for ((name, a), (_, b)) in outputs[0].iter().zip(&outputs[1]) {
        compared += 1;
        if a.is_empty() || a != b {
            mismatched.push(name.clone());
        }
    }

    let cfg = TrainConfig {
        steps: 100,
        batch_size: 32,
        ..load_cfg("t2_contractive.cfg")
    };
    let a = train::train(&cfg, &GmmTask::t2()).unwrap();
    let b = train::train(&cfg, &GmmTask::t2()).unwrap();
    let lib_same = a.log.to_jsonl() == b.log.to_jsonl() && a.checkpoint.to_bytes().unwrap() == b.checkpoint.to_bytes().unwrap();
    outcome(
        failed.is_empty() && mismatched.is_empty() && lib_same,
        format!(
            "{compared} CLI artifacts compared across reruns, {} differ {mismatched:?}; failed commands {failed:?}; library rerun identical: {lib_same}",
            mismatched.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let clock = Instant::now();
        let o = f();
        let secs = clock.elapsed().as_secs_f64();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [{name}]: {status} ({secs:.1}s) {}", o.detail);
        results.push((n, name, o, secs));
    };

    timed(1, "schedule identities", &mut criterion_1);
    timed(2, "derivative correctness", &mut criterion_2);
    timed(3, "eigenvalue decomposition", &mut criterion_3);
    timed(4, "eigenvalue estimation", &mut criterion_4);

    let clock = Instant::now();
    let t1_cfg = load_cfg("t1_baseline.cfg");
    let t1_task = GmmTask::t1();
    let t1_out = train::train(&t1_cfg, &t1_task).unwrap();
    let t1_net = t1_out.checkpoint.ema_network().unwrap();
    let t1_secs = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let t2 = train_t2();
    println!(
        "trained T1 model in {t1_secs:.1}s and {} T2 models in {:.1}s",
        4 * SEEDS.len(),
        clock.elapsed().as_secs_f64()
    );

    let trained: Vec<(&str, &ScoreNetwork, &GmmTask)> = vec![
        ("t1", &t1_net, &t1_task),
        ("t2 baseline", &t2.full[0].0, &t2.task),
        ("t2 contractive", &t2.full[0].1, &t2.task),
    ];
    timed(5, "gronwall audit", &mut || criterion_5(&trained));
    timed(6, "sampler fidelity", &mut criterion_6);
    timed(7, "jacobian chain rule", &mut criterion_7);
    timed(8, "end-to-end 1D training", &mut || criterion_8(&t1_net, &t1_cfg.schedule, &t1_task));
    timed(9, "contraction effect", &mut || criterion_9(&t2));
    timed(10, "seed sensitivity", &mut || criterion_10(&t2));
    let (c11, c12) = criterion_11_12(&t2);
    let mut c11 = Some(c11);
    let mut c12 = Some(c12);
    timed(11, "few-step robustness", &mut || c11.take().unwrap());
    timed(12, "low-data trend", &mut || c12.take().unwrap());
    timed(13, "determinism", &mut criterion_13);

    let passed = results.iter().filter(|r| r.2.pass).count();
    let unexpected: Vec<usize> = results
        .iter()
        .filter(|r| !r.2.pass && !KNOWN_FAILURES.contains(&r.0))
        .map(|r| r.0)
        .collect();
    let known: Vec<usize> = results
        .iter()
        .filter(|r| !r.2.pass && KNOWN_FAILURES.contains(&r.0))
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {passed}/{} criteria passed; known failures {known:?}; unexpected failures {unexpected:?}; total {:.1}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
