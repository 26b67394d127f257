//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Small primitive cases compare every coordinate. Whole-network losses
//! compare one directional derivative per tensor instead: in `f32`, a single
//! coordinate's difference quotient is dominated by round-off once the
//! network is a few layers deep, while a step along a unit direction that
//! mixes the analytic gradient with a random vector moves the loss enough to
//! measure. Errors orthogonal to the gradient still show up through the
//! random half. Those evaluations replay the ReLU gates of the base point:
//! a decoder has thousands of units near zero, and a difference quotient
//! that crosses their kinks measures an average slope, not the derivative.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::classifier::{build_model, ArchPreset, PresetName};
use crate::error::Result;
use crate::guard::{build_vae, VaePreset, VaePresetName};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::seed;

pub const STEP: f32 = 1e-2;
/// Step ladder for directional checks. Exponential and free-bits terms on a
/// wide head curve enough that 1e-2 is too coarse, while 1e-4 on a
/// small-gradient stem layer is mostly round-off, so no single step suits
/// every tensor.
pub const DIRECTIONAL_STEPS: [f32; 5] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4];

/// Picks the three consecutive difference quotients that agree best and
/// returns their median. Uses only the numeric side, never the analytic
/// value. Three points rather than two, because two round-off-quantized
/// quotients can agree exactly by accident.
fn plateau(ladder: &[f64]) -> f64 {
    let window = |i: usize| {
        let mut w = [ladder[i], ladder[i + 1], ladder[i + 2]];
        w.sort_by(f64::total_cmp);
        w
    };
    let spread = |i: usize| {
        let w = window(i);
        (w[2] - w[0]) / w[0].abs().max(w[2].abs()).max(1e-300)
    };
    let best = (0..ladder.len() - 2).min_by(|&a, &b| spread(a).total_cmp(&spread(b))).unwrap_or(0);
    window(best)[1]
}
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    /// Worst relative error over the case's tensors.
    pub rel_error: f64,
    /// Loss evaluations spent on finite differences.
    pub probes: usize,
}

impl CaseResult {
    pub fn pass(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'a;

fn eval(build: &Build, ps: &ParamStore, inputs: &[Tensor]) -> Result<f64> {
    eval_in(Graph::frozen(), build, ps, inputs).map(|(v, _)| v)
}

fn eval_in(mut g: Graph, build: &Build, ps: &ParamStore, inputs: &[Tensor]) -> Result<(f64, Vec<Vec<bool>>)> {
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, ps, &vars)?;
    Ok((g.value(loss).item() as f64, g.take_gates()))
}

/// Analytic gradients, parameters first (name order) then inputs.
fn analytic(build: &Build, ps: &ParamStore, inputs: &[Tensor]) -> Result<Vec<(String, Tensor)>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, ps, &vars)?;
    let mut grads = g.backward(loss)?;
    let mut out = Vec::new();
    for (name, p) in ps.iter() {
        let t = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        out.push((name.clone(), t));
    }
    for (i, v) in vars.iter().enumerate() {
        let t = grads.take_input(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        out.push((format!("input{i}"), t));
    }
    Ok(out)
}

fn perturbed(ps: &ParamStore, inputs: &[Tensor], slot: usize, f: impl Fn(&mut [f32])) -> (ParamStore, Vec<Tensor>) {
    let mut ps = ps.clone();
    let mut inputs = inputs.to_vec();
    let n_params = ps.len();
    if slot < n_params {
        let name = ps.iter().nth(slot).map(|(n, _)| n.clone()).expect("slot in range");
        f(ps.get_mut(&name).expect("known name").value.data_mut());
    } else {
        f(inputs[slot - n_params].data_mut());
    }
    (ps, inputs)
}

fn rel(num: &[f64], ana: &[f64]) -> f64 {
    let diff = num.iter().zip(ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(ana.iter().map(|b| b * b).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Every coordinate of every parameter and input.
pub fn check_coordinates(name: &str, ps: &ParamStore, inputs: &[Tensor], build: &Build) -> Result<CaseResult> {
    let grads = analytic(build, ps, inputs)?;
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (slot, (_, g)) in grads.iter().enumerate() {
        let mut num = Vec::with_capacity(g.numel());
        for i in 0..g.numel() {
            let (pp, ip) = perturbed(ps, inputs, slot, |d| d[i] += STEP);
            let (pm, im) = perturbed(ps, inputs, slot, |d| d[i] -= STEP);
            num.push((eval(build, &pp, &ip)? - eval(build, &pm, &im)?) / (2.0 * STEP as f64));
            probes += 2;
        }
        let ana: Vec<f64> = g.data().iter().map(|&x| x as f64).collect();
        worst = worst.max(rel(&num, &ana));
    }
    Ok(CaseResult { name: name.to_string(), rel_error: worst, probes })
}

/// One directional derivative per tensor, along a unit mix of the analytic
/// gradient and a random direction. The relative error is taken over the
/// vector of all directional derivatives.
pub fn check_directional(name: &str, ps: &ParamStore, inputs: &[Tensor], build: &Build, seed: u64) -> Result<CaseResult> {
    let grads = analytic(build, ps, inputs)?;
    let (_, gates) = eval_in(Graph::frozen().recording_gates(), build, ps, inputs)?;
    let on_branch = |ps: &ParamStore, inputs: &[Tensor]| {
        eval_in(Graph::frozen().replaying_gates(gates.clone()), build, ps, inputs).map(|(v, _)| v)
    };
    let mut rng = seed::rng(seed, &[0x6C]);
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    for (slot, (_, g)) in grads.iter().enumerate() {
        let gn = g.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let r: Vec<f64> = (0..g.numel()).map(|_| rng.sample(StandardNormal)).collect();
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let mut u: Vec<f64> = g.data().iter().zip(&r).map(|(&a, b)| if gn > 0.0 { a as f64 / gn } else { 0.0 } + b / rn).collect();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un < 1e-6 {
            // The two halves cancelled (one-element tensor); fall back to the random direction.
            u = r.iter().map(|x| x / rn).collect();
        } else {
            u.iter_mut().for_each(|x| *x /= un);
        }
        let u = &u;
        let mut ladder = Vec::with_capacity(DIRECTIONAL_STEPS.len());
        for &h in &DIRECTIONAL_STEPS {
            let step = |sign: f32| move |d: &mut [f32]| d.iter_mut().zip(u).for_each(|(x, ui)| *x += sign * h * *ui as f32);
            let (pp, ip) = perturbed(ps, inputs, slot, step(1.0));
            let (pm, im) = perturbed(ps, inputs, slot, step(-1.0));
            ladder.push((on_branch(&pp, &ip)? - on_branch(&pm, &im)?) / (2.0 * h as f64));
        }
        num.push(plateau(&ladder));
        ana.push(g.data().iter().zip(u).map(|(&a, b)| a as f64 * b).sum());
    }
    Ok(CaseResult { name: name.to_string(), rel_error: rel(&num, &ana), probes: 2 * DIRECTIONAL_STEPS.len() * num.len() })
}

fn randn(rng: &mut seed::Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f32, _>(StandardNormal))
}

/// Normal draws pushed at least `margin` away from zero, so no ReLU kink sits
/// inside the difference step.
fn away_from_zero(rng: &mut seed::Rng, shape: &[usize], margin: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f32 = rng.sample(StandardNormal);
        z + margin * z.signum()
    })
}

fn store(items: Vec<(&str, crate::nn::ParamKind, Tensor)>) -> ParamStore {
    let mut ps = ParamStore::new();
    for (n, k, t) in items {
        ps.insert(n, k, t).expect("distinct names");
    }
    ps
}

/// Reduces any tensor to a scalar with fixed random weights.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = seed::rng(seed, &[0x70]);
    let w = randn(&mut rng, g.value(y).shape(), 1.0);
    g.dot_const(y, &w)
}

/// Every differentiable primitive on random small shapes.
pub fn primitive_suite(seed: u64) -> Result<Vec<CaseResult>> {
    use crate::nn::ParamKind::{Bias, Norm, Weight};
    let mut rng = seed::rng(seed, &[0x67]);
    let mut out = Vec::new();

    let ps = store(vec![("w", Weight, randn(&mut rng, &[3, 2, 3, 3], 0.5)), ("b", Bias, randn(&mut rng, &[3], 0.5))]);
    let x = randn(&mut rng, &[2, 2, 5, 6], 1.0);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        out.push(check_coordinates(&format!("conv2d s{stride} p{pad}"), &ps, std::slice::from_ref(&x), &|g, ps, v| {
            let (w, b) = (g.param(ps, "w")?, g.param(ps, "b")?);
            let y = g.conv2d(v[0], w, Some(b), stride, pad)?;
            project(g, y, seed)
        })?);
    }

    let ps = store(vec![("w", Weight, randn(&mut rng, &[2, 3, 4, 4], 0.5)), ("b", Bias, randn(&mut rng, &[3], 0.5))]);
    let x = randn(&mut rng, &[2, 2, 3, 4], 1.0);
    out.push(check_coordinates("conv_transpose2d", &ps, std::slice::from_ref(&x), &|g, ps, v| {
        let (w, b) = (g.param(ps, "w")?, g.param(ps, "b")?);
        let y = g.conv_transpose2d(v[0], w, Some(b), 2, 1)?;
        project(g, y, seed)
    })?);

    let ps = store(vec![("g", Norm, randn(&mut rng, &[4], 1.0)), ("b", Norm, randn(&mut rng, &[4], 1.0))]);
    let x = randn(&mut rng, &[2, 4, 3, 3], 1.0);
    out.push(check_coordinates("group_norm", &ps, std::slice::from_ref(&x), &|g, ps, v| {
        let (ga, be) = (g.param(ps, "g")?, g.param(ps, "b")?);
        let y = g.group_norm(v[0], ga, be, 2)?;
        project(g, y, seed)
    })?);

    let empty = ParamStore::new();
    let x = away_from_zero(&mut rng, &[3, 5], 0.1);
    out.push(check_coordinates("relu", &empty, std::slice::from_ref(&x), &|g, _, v| {
        let y = g.relu(v[0]);
        project(g, y, seed)
    })?);

    let xs = [randn(&mut rng, &[2, 3], 1.0), randn(&mut rng, &[2, 3], 1.0)];
    out.push(check_coordinates("add + scale + sum", &empty, &xs, &|g, _, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.scale(y, -1.7);
        let y = g.relu(y);
        let s = g.sum(y);
        let p = project(g, v[0], seed)?;
        g.add(s, p)
    })?);

    let ps = store(vec![("w", Weight, randn(&mut rng, &[4, 5], 0.5)), ("b", Bias, randn(&mut rng, &[4], 0.5))]);
    let x = randn(&mut rng, &[3, 5], 1.0);
    out.push(check_coordinates("linear", &ps, std::slice::from_ref(&x), &|g, ps, v| {
        let (w, b) = (g.param(ps, "w")?, g.param(ps, "b")?);
        let y = g.linear(v[0], w, Some(b))?;
        project(g, y, seed)
    })?);

    let x = randn(&mut rng, &[2, 3, 4, 5], 1.0);
    out.push(check_coordinates("global_avg_pool", &empty, std::slice::from_ref(&x), &|g, _, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, seed)
    })?);
    out.push(check_coordinates("reshape", &empty, std::slice::from_ref(&x), &|g, _, v| {
        let y = g.reshape(v[0], &[2, 60])?;
        project(g, y, seed)
    })?);
    for (h, w) in [(3, 7), (6, 2)] {
        out.push(check_coordinates(&format!("fit {h}x{w}"), &empty, std::slice::from_ref(&x), &|g, _, v| {
            let y = g.fit(v[0], h, w)?;
            project(g, y, seed)
        })?);
    }
    out.push(check_coordinates("select_rows", &empty, std::slice::from_ref(&x), &|g, _, v| {
        let y = g.select_rows(v[0], &[1, 0, 1])?;
        project(g, y, seed)
    })?);

    let logits = randn(&mut rng, &[4, 5], 1.5);
    let labels = [0usize, 3, 4, 3];
    out.push(check_coordinates("smooth_ce", &empty, std::slice::from_ref(&logits), &|g, _, v| g.smooth_ce(v[0], &labels, 0.1))?);
    out.push(check_coordinates("focal", &empty, std::slice::from_ref(&logits), &|g, _, v| g.focal(v[0], &labels, 2.0))?);

    let feats = randn(&mut rng, &[4, 6], 1.0);
    let dir: Vec<f32> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
    out.push(check_coordinates("signature", &empty, std::slice::from_ref(&feats), &|g, _, v| g.signature(v[0], &dir, 0.5))?);

    let target = randn(&mut rng, &[2, 1, 3, 4], 1.0);
    let pred = randn(&mut rng, &[2, 1, 3, 4], 1.0);
    out.push(check_coordinates("sq_err", &empty, std::slice::from_ref(&pred), &|g, _, v| g.sq_err(v[0], &target))?);

    // Mixed magnitudes so some latent dimensions sit below the floor and some above.
    let mu = Tensor::from_fn(&[3, 4], |i| [0.05f32, 0.9, -0.6, 0.02][i % 4] * (1.0 + 0.3 * (i / 4) as f32));
    let logvar = randn(&mut rng, &[3, 4], 0.4);
    for tau in [0.0f32, 0.05] {
        out.push(check_coordinates(&format!("kl_free_bits τ={tau}"), &empty, &[mu.clone(), logvar.clone()], &|g, _, v| g.kl_free_bits(v[0], v[1], tau))?);
    }
    let eps = randn(&mut rng, &[3, 4], 1.0);
    out.push(check_coordinates("reparam", &empty, &[mu.clone(), logvar.clone()], &|g, _, v| {
        let z = g.reparam(v[0], v[1], eps.clone())?;
        project(g, z, seed)
    })?);
    Ok(out)
}

/// The full classifier objective (task + trigger CE + signature) and the
/// full VAE objective (reconstruction + free-bits KL with reparameterization).
/// Reconstruction at the test point, plus a free-bits floor halfway across
/// the widest gap between the per-dimension KL values there. The clamp is then
/// active on some dimensions and idle on others, and no kink sits inside a
/// finite-difference step.
fn test_point(vae: &crate::guard::Vae, x: &Tensor, eta: &Tensor) -> Result<(Tensor, f32)> {
    let mut g = Graph::frozen();
    let xv = g.constant(x.clone());
    let o = vae.forward(&mut g, xv, Some(eta.clone()))?;
    let d = vae.preset.latent_dim;
    let n = x.shape()[0];
    let mut kl = crate::nn::graph::kl_per_dim(g.value(o.mu).data(), g.value(o.logvar).data(), n, d);
    kl.sort_by(f64::total_cmp);
    let i = (0..kl.len() - 1).max_by(|&a, &b| (kl[a + 1] - kl[a]).total_cmp(&(kl[b + 1] - kl[b]))).unwrap_or(0);
    Ok((g.value(o.x_hat).clone(), (0.5 * (kl[i] + kl[i + 1])) as f32))
}

pub fn model_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = seed::rng(seed, &[0x6D]);
    let mut out = Vec::new();

    let model = build_model(&ArchPreset::named(PresetName::MiniResnet), 4, seed)?;
    let x = randn(&mut rng, &[3, 1, 32, 65], 1.0);
    let v: Vec<f32> = (0..model.preset.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
    let preset = model.preset.clone();
    out.push(check_directional(
        "mini_resnet loss",
        &model.params,
        std::slice::from_ref(&x),
        &|g, ps, vars| {
            let (logits, feats) = crate::classifier::backbone_forward(&preset, ps, g, vars[0])?;
            let task = g.smooth_ce(logits, &[0, 2, 4], 0.05)?;
            let sig = g.signature(feats, &v, 0.05)?;
            g.add(task, sig)
        },
        seed,
    )?);

    let vae = build_vae(&VaePreset::named(VaePresetName::Robust), seed)?;
    let x = randn(&mut rng, &[2, 1, 32, 65], 1.0);
    let eta = randn(&mut rng, &[2, vae.preset.latent_dim], 1.0);
    // Fixed reconstruction target a small residual away from the decoder's
    // output at the test point, which keeps the f32 loss small.
    let (x_hat, tau) = test_point(&vae, &x, &eta)?;
    let mut target = x_hat;
    target.data_mut().iter_mut().zip(x.data()).for_each(|(t, &r)| *t += 0.05 * r);
    let vae_ref = &vae;
    out.push(check_directional(
        "conv_vae loss",
        &vae.params,
        std::slice::from_ref(&x),
        &|g, ps, vars| {
            let m = crate::guard::Vae { preset: vae_ref.preset.clone(), params: ps.clone() };
            let o = m.forward(g, vars[0], Some(eta.clone()))?;
            let recon = g.sq_err(o.x_hat, &target)?;
            let kl = g.kl_free_bits(o.mu, o.logvar, tau)?;
            let kl = g.scale(kl, 0.5);
            g.add(recon, kl)
        },
        seed,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for r in primitive_suite(3).unwrap() {
            assert!(r.pass(), "{}: rel {:.2e}", r.name, r.rel_error);
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        let empty = ParamStore::new();
        let x = Tensor::from_fn(&[4], |i| 0.3 + i as f32);
        // A loss the tape cannot see through: scaling after reading the value.
        let r = check_coordinates("detached", &empty, std::slice::from_ref(&x), &|g, _, v| {
            let k = g.value(v[0]).data()[0];
            let s = g.sum(v[0]);
            Ok(g.scale(s, k))
        })
        .unwrap();
        assert!(!r.pass());
    }
}
