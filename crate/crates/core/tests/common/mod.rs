//! Helpers shared by the integration tests: small bundles, central
//! differences and plain-loop reference implementations.
#![allow(dead_code)]

use std::io::Write;

use discom_core::model::{BackboneConfig, BackboneKind, GrlSpec, ModelBundle, ModelConfig, Representation};
use discom_core::model::{BundleForward, DiscomArch};
use discom_core::params::ParamStore;
use discom_core::tape::{Graph, Gradients, Var};
use discom_core::tensor::Tensor;
use discom_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OBS: [usize; 2] = [5, 4];

/// Writes past the test harness capture so the line always reaches the log.
pub fn report(name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag} {name}: {detail}");
    let _ = out.flush();
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Two mlp branches with `D = 8` over 5- and 4-wide inputs, three classes.
pub fn tiny_bundle(lambda: f64, seed: u64) -> ModelBundle {
    let mlp = BackboneConfig {
        kind: BackboneKind::Mlp,
        hidden_width: 6,
        ..BackboneConfig::default()
    };
    let cfg = ModelConfig {
        m1: mlp.clone(),
        m2: mlp,
        embed_width: 8,
    };
    let arch = DiscomArch::new(&cfg, [&OBS[..1], &OBS[1..]], 3, GrlSpec { lambda }, Representation::Both).unwrap();
    ModelBundle::init(arch, seed)
}

pub struct TinyBatch {
    pub x: [Tensor; 2],
    pub y: Vec<usize>,
}

pub fn tiny_batch(seed: u64, rows: usize) -> TinyBatch {
    let mut r = rng(seed);
    TinyBatch {
        x: [random_tensor(&mut r, &[rows, OBS[0]], 1.5), random_tensor(&mut r, &[rows, OBS[1]], 1.5)],
        y: (0..rows).map(|i| i % 3).collect(),
    }
}

pub type LossFn = dyn Fn(&mut Graph, &ModelBundle, &BundleForward, &[usize]) -> Result<Var>;

/// Value and parameter gradients of `loss` with `params` swapped into the bundle.
pub fn evaluate(bundle: &ModelBundle, params: &ParamStore, batch: &TinyBatch, loss: &LossFn) -> (f64, Gradients) {
    let b = ModelBundle {
        arch: bundle.arch.clone(),
        params: params.clone(),
    };
    let mut g = Graph::new(&b.params);
    let x = [g.input(batch.x[0].clone()), g.input(batch.x[1].clone())];
    let fwd = b.forward(&mut g, x).unwrap();
    let l = loss(&mut g, &b, &fwd, &batch.y).unwrap();
    (g.value(l).item(), g.backward(l))
}

/// Central differences of the forward value for every parameter entry.
pub fn finite_differences(
    bundle: &ModelBundle,
    batch: &TinyBatch,
    loss: &LossFn,
    step: f64,
) -> Vec<(String, Vec<f64>)> {
    let mut params = bundle.params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let mut d = Vec::with_capacity(n);
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let plus = evaluate(bundle, &params, batch, loss).0;
            params.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let minus = evaluate(bundle, &params, batch, loss).0;
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            d.push((plus - minus) / (2.0 * step));
        }
        out.push((name, d));
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-7)
}

pub fn is_invariant_param(name: &str) -> bool {
    name.starts_with("m1.inv.") || name.starts_with("m2.inv.")
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn ce(logits: &[Vec<f64>], y: &[usize]) -> f64 {
    logits.iter().zip(y).map(|(r, &t)| -softmax(r)[t].ln()).sum::<f64>() / y.len() as f64
}

/// `tau² · mean KL(softmax(t / tau) || softmax(s / tau))`.
pub fn kd_term(student: &[Vec<f64>], teacher: &[Vec<f64>], tau: f64) -> f64 {
    let scaled = |r: &Vec<f64>| r.iter().map(|v| v / tau).collect::<Vec<_>>();
    let kl: f64 = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            let p = softmax(&scaled(t));
            let q = softmax(&scaled(s));
            p.iter().zip(&q).map(|(pi, qi)| pi * (pi.ln() - qi.ln())).sum::<f64>()
        })
        .sum();
    tau * tau * kl / student.len() as f64
}

/// Support-weighted F1 by direct counting, one class at a time.
pub fn brute_force_weighted_f1(pred: &[usize], label: &[usize], n_classes: usize) -> f64 {
    let n = label.len() as f64;
    let mut total = 0.0;
    for c in 0..n_classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&p, &l) in pred.iter().zip(label) {
            match (p == c, l == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1 * (tp + fn_) / n;
    }
    total
}
