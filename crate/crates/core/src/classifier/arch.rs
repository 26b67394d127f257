use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{he_normal, Graph, ParamKind, ParamStore, Tensor, Var};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    ShallowCnn,
    MiniResnet,
    Resnet18,
    Resnet34,
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow_cnn" => Ok(PresetName::ShallowCnn),
            "mini_resnet" => Ok(PresetName::MiniResnet),
            "resnet18" => Ok(PresetName::Resnet18),
            "resnet34" => Ok(PresetName::Resnet34),
            other => Err(Error::Unknown { kind: "preset", name: other.to_string() }),
        }
    }
}

/// Backbone layout. Residual presets are a 3×3 stem followed by stages of
/// basic blocks; the first block of every stage after the first halves the
/// spatial size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchPreset {
    pub name: PresetName,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub feature_dim: usize,
    pub input_shape: (usize, usize),
}

impl ArchPreset {
    pub fn named(name: PresetName) -> Self {
        let (stem, widths, blocks) = match name {
            PresetName::ShallowCnn => (16, vec![32, 64], vec![0, 0]),
            PresetName::MiniResnet => (16, vec![16, 32, 64], vec![1, 1, 1]),
            PresetName::Resnet18 => (64, vec![64, 128, 256, 512], vec![2, 2, 2, 2]),
            PresetName::Resnet34 => (64, vec![64, 128, 256, 512], vec![3, 4, 6, 3]),
        };
        let feature_dim = *widths.last().expect("non-empty stages");
        ArchPreset { name, stem_width: stem, stage_widths: widths, blocks_per_stage: blocks, feature_dim, input_shape: (32, 65) }
    }

    pub fn residual_block_count(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    fn is_residual(&self) -> bool {
        self.name != PresetName::ShallowCnn
    }
}

pub fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Conv → GroupNorm → optional ReLU, parameters `{p}.conv.w`, `{p}.gn.{g,b}`.
pub fn conv_norm(g: &mut Graph, ps: &ParamStore, p: &str, x: Var, stride: usize, pad: usize, relu: bool) -> Result<Var> {
    let w = g.param(ps, &format!("{p}.conv.w"))?;
    let y = g.conv2d(x, w, None, stride, pad)?;
    let channels = g.value(y).shape()[1];
    let gamma = g.param(ps, &format!("{p}.gn.g"))?;
    let beta = g.param(ps, &format!("{p}.gn.b"))?;
    let y = g.group_norm(y, gamma, beta, groups_for(channels))?;
    Ok(if relu { g.relu(y) } else { y })
}

/// Basic residual block `y = F(x) + shortcut(x)` with
/// `F = conv3×3 → norm → relu → conv3×3 → norm` and a 1×1 strided
/// projection shortcut whenever the shape changes. `rectify` applies the
/// trailing ReLU.
pub fn residual_block(g: &mut Graph, ps: &ParamStore, p: &str, x: Var, stride: usize, rectify: bool) -> Result<Var> {
    let h = conv_norm(g, ps, &format!("{p}.a"), x, stride, 1, true)?;
    let f = conv_norm(g, ps, &format!("{p}.b"), h, 1, 1, false)?;
    let shortcut = if ps.get(&format!("{p}.proj.conv.w")).is_ok() {
        conv_norm(g, ps, &format!("{p}.proj"), x, stride, 0, false)?
    } else {
        x
    };
    let y = g.add(f, shortcut)?;
    Ok(if rectify { g.relu(y) } else { y })
}

fn add_conv_norm(ps: &mut ParamStore, rng: &mut seed::Rng, p: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    ps.insert(format!("{p}.conv.w"), ParamKind::Weight, he_normal(&[cout, cin, k, k], cin * k * k, rng))?;
    ps.insert(format!("{p}.gn.g"), ParamKind::Norm, Tensor::full(&[cout], 1.0))?;
    ps.insert(format!("{p}.gn.b"), ParamKind::Norm, Tensor::zeros(&[cout]))?;
    Ok(())
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("s{stage}.b{block}")
}

/// Seeded He initialization of every backbone and head parameter.
pub fn init_params(preset: &ArchPreset, outputs: usize, seed: u64) -> Result<ParamStore> {
    let mut rng = seed::rng(seed, &[tag::INIT]);
    let mut ps = ParamStore::new();
    add_conv_norm(&mut ps, &mut rng, "stem", 1, preset.stem_width, 3)?;
    let mut cin = preset.stem_width;
    if preset.is_residual() {
        for (s, (&width, &blocks)) in preset.stage_widths.iter().zip(&preset.blocks_per_stage).enumerate() {
            for b in 0..blocks {
                let p = block_prefix(s, b);
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                add_conv_norm(&mut ps, &mut rng, &format!("{p}.a"), cin, width, 3)?;
                add_conv_norm(&mut ps, &mut rng, &format!("{p}.b"), width, width, 3)?;
                if stride != 1 || cin != width {
                    add_conv_norm(&mut ps, &mut rng, &format!("{p}.proj"), cin, width, 1)?;
                }
                cin = width;
            }
        }
    } else {
        for (s, &width) in preset.stage_widths.iter().enumerate() {
            add_conv_norm(&mut ps, &mut rng, &format!("c{s}"), cin, width, 3)?;
            cin = width;
        }
    }
    let fd = preset.feature_dim;
    ps.insert("head.w", ParamKind::Weight, he_normal(&[outputs, fd], fd, &mut rng))?;
    ps.insert("head.b", ParamKind::Bias, Tensor::zeros(&[outputs]))?;
    Ok(ps)
}

/// Forward pass to `(logits, penultimate features)`. The final stage output
/// is left unrectified, so penultimate features are signed.
pub fn backbone_forward(preset: &ArchPreset, ps: &ParamStore, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let (_, c, h, w) = g.value(x).dims4()?;
    if c != 1 || (h, w) != preset.input_shape {
        return Err(Error::shape(format!(
            "classifier expects (n, 1, {}, {}) input, got (n, {c}, {h}, {w})",
            preset.input_shape.0, preset.input_shape.1
        )));
    }
    let mut y = conv_norm(g, ps, "stem", x, 1, 1, true)?;
    if preset.is_residual() {
        let total = preset.residual_block_count();
        let mut seen = 0;
        for (s, &blocks) in preset.blocks_per_stage.iter().enumerate() {
            for b in 0..blocks {
                seen += 1;
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                y = residual_block(g, ps, &block_prefix(s, b), y, stride, seen < total)?;
            }
        }
    } else {
        let n = preset.stage_widths.len();
        for s in 0..n {
            y = conv_norm(g, ps, &format!("c{s}"), y, 2, 1, s + 1 < n)?;
        }
    }
    let features = g.global_avg_pool(y)?;
    let hw = g.param(ps, "head.w")?;
    let hb = g.param(ps, "head.b")?;
    let logits = g.linear(features, hw, Some(hb))?;
    Ok((logits, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn block_params(cin: usize, cout: usize, proj: bool, seed: u64) -> ParamStore {
        let mut rng = seed::rng(seed, &[]);
        let mut ps = ParamStore::new();
        add_conv_norm(&mut ps, &mut rng, "blk.a", cin, cout, 3).unwrap();
        add_conv_norm(&mut ps, &mut rng, "blk.b", cout, cout, 3).unwrap();
        if proj {
            add_conv_norm(&mut ps, &mut rng, "blk.proj", cin, cout, 1).unwrap();
        }
        // Non-trivial affine parameters.
        for (_, p) in ps.iter_mut().filter(|(_, p)| p.kind == ParamKind::Norm) {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.sample::<f32, _>(StandardNormal);
            }
        }
        ps
    }

    fn input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed, &[1]);
        Tensor::from_fn(&[n, c, h, w], |_| rng.sample(StandardNormal))
    }

    #[test]
    fn zero_branch_is_identity() {
        let mut ps = block_params(8, 8, false, 1);
        for name in ["blk.b.gn.g", "blk.b.gn.b"] {
            ps.get_mut(name).unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = input(2, 8, 6, 7, 2);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = residual_block(&mut g, &ps, "blk", xv, 1, false).unwrap();
        assert_eq!(g.value(y), &x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.input(xv).unwrap().data().iter().all(|&d| d == 1.0));
    }

    // f64 direct convolution, `w` in (cout, cin, k, k).
    fn conv_ref(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &Tensor, stride: usize, pad: usize) -> (Vec<f64>, (usize, usize, usize, usize)) {
        let (o, _, k, _) = wt.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for i in 0..n {
            for oc in 0..o {
                for r in 0..oh {
                    for q in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for dr in 0..k {
                                for dq in 0..k {
                                    let (rr, qq) = ((r * stride + dr) as i64 - pad as i64, (q * stride + dq) as i64 - pad as i64);
                                    if rr < 0 || qq < 0 || rr >= h as i64 || qq >= w as i64 {
                                        continue;
                                    }
                                    acc += x[((i * c + ic) * h + rr as usize) * w + qq as usize]
                                        * wt.data()[((oc * c + ic) * k + dr) * k + dq] as f64;
                                }
                            }
                        }
                        out[((i * o + oc) * oh + r) * ow + q] = acc;
                    }
                }
            }
        }
        (out, (n, o, oh, ow))
    }

    fn gn_ref(x: &mut [f64], (n, c, h, w): (usize, usize, usize, usize), gamma: &Tensor, beta: &Tensor, groups: usize) {
        let cg = c / groups;
        let m = cg * h * w;
        for i in 0..n {
            for g in 0..groups {
                let seg = &mut x[(i * c + g * cg) * h * w..][..m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
                for (j, v) in seg.iter_mut().enumerate() {
                    let ch = g * cg + j / (h * w);
                    *v = (*v - mean) / (var + 1e-5).sqrt() * gamma.data()[ch] as f64 + beta.data()[ch] as f64;
                }
            }
        }
    }

    fn conv_norm_ref(ps: &ParamStore, p: &str, x: &[f64], dims: (usize, usize, usize, usize), stride: usize, pad: usize, relu: bool) -> (Vec<f64>, (usize, usize, usize, usize)) {
        let (mut y, d) = conv_ref(x, dims, ps.value(&format!("{p}.conv.w")).unwrap(), stride, pad);
        gn_ref(&mut y, d, ps.value(&format!("{p}.gn.g")).unwrap(), ps.value(&format!("{p}.gn.b")).unwrap(), groups_for(d.1));
        if relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        (y, d)
    }

    #[test]
    fn block_matches_composed_oracle() {
        for (cin, cout, stride, proj) in [(8, 8, 1, false), (8, 16, 2, true), (16, 16, 1, false)] {
            let ps = block_params(cin, cout, proj, 7 + cin as u64);
            let x = input(2, cin, 9, 11, 3);
            let mut g = Graph::frozen();
            let xv = g.constant(x.clone());
            let y = residual_block(&mut g, &ps, "blk", xv, stride, true).unwrap();
            let dims = x.dims4().unwrap();
            let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
            let (h, d) = conv_norm_ref(&ps, "blk.a", &xs, dims, stride, 1, true);
            let (f, d) = conv_norm_ref(&ps, "blk.b", &h, d, 1, 1, false);
            let sc = if proj { conv_norm_ref(&ps, "blk.proj", &xs, dims, stride, 0, false).0 } else { xs.clone() };
            let want: Vec<f64> = f.iter().zip(&sc).map(|(a, b)| (a + b).max(0.0)).collect();
            assert_eq!(g.value(y).shape(), &[d.0, d.1, d.2, d.3]);
            for (got, want) in g.value(y).data().iter().zip(&want) {
                assert!((*got as f64 - want).abs() <= 1e-5 * (1.0 + want.abs()), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn preset_shapes() {
        let p = ArchPreset::named(PresetName::MiniResnet);
        assert_eq!((p.stem_width, p.stage_widths.clone(), p.blocks_per_stage.clone(), p.feature_dim), (16, vec![16, 32, 64], vec![1, 1, 1], 64));
        assert_eq!(ArchPreset::named(PresetName::Resnet18).blocks_per_stage, vec![2, 2, 2, 2]);
        assert_eq!(ArchPreset::named(PresetName::Resnet34).blocks_per_stage, vec![3, 4, 6, 3]);
        assert_eq!("resnet34".parse::<PresetName>().unwrap(), PresetName::Resnet34);
        assert!("vgg".parse::<PresetName>().is_err());
        assert_eq!(groups_for(16), 8);
        assert_eq!(groups_for(12), 6);
        let ps = init_params(&p, 11, 0).unwrap();
        let mut g = Graph::frozen();
        let bad = g.constant(Tensor::zeros(&[1, 1, 32, 64]));
        assert!(backbone_forward(&p, &ps, &mut g, bad).is_err());
    }
}
