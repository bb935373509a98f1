//! Four-level UNet with a site-conditioned channel attention block at the
//! bottleneck, and the site-contrastive loss on its attention vectors.
//!
//! Parameters are split into the shared representation part `phi`
//! (encoder, bottleneck, attention block) and the personalized head `theta`
//! (decoder and 1×1 output convolution).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamSet;
use crate::rng::{self, Purpose};
use crate::tensor::{Tape, Tensor, Var};

/// Channel widths of the full-size network, top to bottom.
pub const FULL_LEVEL_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Widths of the four encoder levels and the bottleneck.
    pub level_channels: [usize; 5],
    pub num_sites: usize,
    /// Width of the first fully connected layer of the attention block.
    pub scr_hidden: usize,
}

impl UNetConfig {
    /// Full widths divided by `divisor` (2 gives `[8, 16, 32, 64, 128]`).
    pub fn scaled(
        in_channels: usize,
        num_classes: usize,
        num_sites: usize,
        divisor: usize,
    ) -> Result<Self> {
        if divisor == 0 || !FULL_LEVEL_CHANNELS[0].is_multiple_of(divisor) {
            return Err(Error::InvalidConfig(format!(
                "channel divisor {} must divide 16",
                divisor
            )));
        }
        let cfg = Self {
            in_channels,
            num_classes,
            level_channels: FULL_LEVEL_CHANNELS.map(|c| c / divisor),
            num_sites,
            scr_hidden: 32,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.level_channels.windows(2).all(|w| w[0] < w[1]) || self.level_channels[0] == 0 {
            return Err(Error::InvalidConfig(format!(
                "level channels must be strictly increasing and positive: {:?}",
                self.level_channels
            )));
        }
        if self.num_sites == 0 {
            return Err(Error::InvalidConfig("at least one site required".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("at least two classes required".into()));
        }
        if self.in_channels == 0 || self.scr_hidden == 0 {
            return Err(Error::InvalidConfig("zero-width input or attention layer".into()));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.level_channels[4]
    }
}

/// Shared part `phi` and personalized head `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub phi: ParamSet,
    pub theta: ParamSet,
}

impl ModelParams {
    pub fn num_elements(&self) -> usize {
        self.phi.num_elements() + self.theta.num_elements()
    }
}

/// One-hot identity of the site a forward pass runs for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteEncoding {
    k: usize,
    num_sites: usize,
}

impl SiteEncoding {
    pub fn new(k: usize, num_sites: usize) -> Result<Self> {
        if k >= num_sites {
            return Err(Error::invalid(
                "site_encoding",
                format!("site {} out of range for {} sites", k, num_sites),
            ));
        }
        Ok(Self { k, num_sites })
    }

    pub fn index(&self) -> usize {
        self.k
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn one_hot(&self) -> Tensor {
        Tensor::from_fn(&[self.num_sites], |i| if i == self.k { 1.0 } else { 0.0 })
    }
}

const ENCODER: [&str; 5] = ["enc1", "enc2", "enc3", "enc4", "bottleneck"];
const DECODER: [&str; 4] = ["dec4", "dec3", "dec2", "dec1"];

fn kaiming_uniform(rng: &mut rng::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = math::sqrt(6.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn push_conv(set: &mut ParamSet, rng: &mut rng::Rng, name: &str, cin: usize, cout: usize, k: usize) {
    set.push(
        format!("{}.weight", name),
        kaiming_uniform(rng, &[cout, cin, k, k], cin * k * k),
    );
    set.push(format!("{}.bias", name), Tensor::zeros(&[cout]));
}

fn push_dense(set: &mut ParamSet, rng: &mut rng::Rng, name: &str, n_in: usize, n_out: usize) {
    set.push(
        format!("{}.weight", name),
        kaiming_uniform(rng, &[n_out, n_in], n_in),
    );
    set.push(format!("{}.bias", name), Tensor::zeros(&[n_out]));
}

/// Kaiming-uniform (fan-in) weights and zero biases, deterministic in `seed`.
pub fn build_model(cfg: &UNetConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, 0, 0, Purpose::ModelInit);
    let ch = cfg.level_channels;
    let mut phi = ParamSet::new();
    let mut prev = cfg.in_channels;
    for (level, name) in ENCODER.iter().enumerate() {
        push_conv(&mut phi, &mut rng, &format!("{}.conv1", name), prev, ch[level], 3);
        push_conv(&mut phi, &mut rng, &format!("{}.conv2", name), ch[level], ch[level], 3);
        prev = ch[level];
    }
    let c = cfg.bottleneck_channels();
    push_dense(&mut phi, &mut rng, "scr.fc1", cfg.num_sites, cfg.scr_hidden);
    push_dense(&mut phi, &mut rng, "scr.fc2", cfg.scr_hidden, c);
    push_dense(&mut phi, &mut rng, "scr.fc3", 2 * c, c);

    let mut theta = ParamSet::new();
    let mut below = c;
    for (i, name) in DECODER.iter().enumerate() {
        let level = 3 - i;
        let out = ch[level];
        push_conv(&mut theta, &mut rng, &format!("{}.conv1", name), below + out, out, 3);
        push_conv(&mut theta, &mut rng, &format!("{}.conv2", name), out, out, 3);
        below = out;
    }
    push_conv(&mut theta, &mut rng, "head", ch[0], cfg.num_classes, 1);
    Ok(ModelParams { phi, theta })
}

/// Tape handles for every model parameter, addressable by name.
pub struct ModelVars {
    by_name: BTreeMap<String, Var>,
    phi: Vec<Var>,
    theta: Vec<Var>,
}

impl ModelVars {
    /// Places the parameters on `tape`; each part is trainable only if asked.
    pub fn register(tape: &mut Tape, params: &ModelParams, train_phi: bool, train_theta: bool) -> Self {
        let mut by_name = BTreeMap::new();
        let mut place = |set: &ParamSet, trainable: bool, tape: &mut Tape| -> Vec<Var> {
            set.iter()
                .map(|p| {
                    let v = tape.leaf(p.value.clone(), trainable);
                    by_name.insert(p.name.clone(), v);
                    v
                })
                .collect()
        };
        let phi = place(&params.phi, train_phi, tape);
        let theta = place(&params.theta, train_theta, tape);
        Self {
            by_name,
            phi,
            theta,
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("model", format!("missing parameter {}", name)))
    }

    /// Gradients after `tape.backward`, laid out like `params`.
    pub fn grads(&self, tape: &mut Tape, params: &ModelParams) -> Result<ModelParams> {
        let mut collect = |vars: &[Var], set: &ParamSet| -> Result<ParamSet> {
            set.iter()
                .zip(vars)
                .map(|(p, v)| {
                    Ok(crate::params::Param {
                        name: p.name.clone(),
                        value: Tensor::new(p.value.shape(), tape.take_grad(*v))?,
                    })
                })
                .collect()
        };
        Ok(ModelParams {
            phi: collect(&self.phi, &params.phi)?,
            theta: collect(&self.theta, &params.theta)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Apply the site attention block; when off the bottleneck passes
    /// through unchanged (attention forced to zero).
    pub scr: bool,
    /// Also evaluate the attention vector for every site encoding.
    pub all_sites: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            scr: true,
            all_sites: false,
        }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
    /// Encoder output before attention.
    pub bottleneck: Var,
    /// Attention vector for the requested site (`None` when disabled).
    pub attention: Option<Var>,
    /// Output of the second decoding stage (1/4 resolution).
    pub d2: Var,
    /// Output of the third decoding stage (1/2 resolution).
    pub d3: Var,
    /// Detached attention vectors for sites `0..K`, when requested.
    pub site_attentions: Vec<Var>,
}

fn conv_block(tape: &mut Tape, vars: &ModelVars, name: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for conv in ["conv1", "conv2"] {
        let w = vars.get(&format!("{}.{}.weight", name, conv))?;
        let b = vars.get(&format!("{}.{}.bias", name, conv))?;
        h = tape.conv2d(h, w, b)?;
        h = tape.relu(h);
    }
    Ok(h)
}

fn attention_vector(tape: &mut Tape, vars: &ModelVars, pooled: Var, site: SiteEncoding) -> Result<Var> {
    let fc1_w = vars.get("scr.fc1.weight")?;
    let expected = tape.value(fc1_w).shape()[1];
    if expected != site.num_sites() {
        return Err(Error::shape(
            "scr_attention",
            &[site.num_sites()],
            tape.value(fc1_w).shape(),
        ));
    }
    let code = tape.constant(site.one_hot());
    let h = tape.dense(code, fc1_w, vars.get("scr.fc1.bias")?)?;
    let h = tape.relu(h);
    let expanded = tape.dense(h, vars.get("scr.fc2.weight")?, vars.get("scr.fc2.bias")?)?;
    let joint = tape.concat(&[expanded, pooled])?;
    let a = tape.dense(joint, vars.get("scr.fc3.weight")?, vars.get("scr.fc3.bias")?)?;
    Ok(tape.sigmoid(a))
}

/// Site attention on a bottleneck feature `f`: returns the attention vector
/// and the residual re-weighted feature `f + f ⊗ attention`.
pub fn scr_attention(tape: &mut Tape, vars: &ModelVars, f: Var, site: SiteEncoding) -> Result<(Var, Var)> {
    let pooled = tape.global_avg_pool(f)?;
    let att = attention_vector(tape, vars, pooled, site)?;
    let scaled = tape.channel_scale(f, att)?;
    let out = tape.add(f, scaled)?;
    Ok((att, out))
}

pub fn forward(
    tape: &mut Tape,
    vars: &ModelVars,
    image: Var,
    site: SiteEncoding,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let (_, h, w) = tape.value(image).dims3()?;
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "forward",
            format!("input extents must be positive multiples of 16, got {}x{}", h, w),
        ));
    }
    let mut skips = Vec::with_capacity(4);
    let mut x = image;
    for name in &ENCODER[..4] {
        let s = conv_block(tape, vars, name, x)?;
        skips.push(s);
        x = tape.maxpool2(s)?;
    }
    let f = conv_block(tape, vars, ENCODER[4], x)?;

    let (attention, mut y, site_attentions) = if opts.scr {
        let pooled = tape.global_avg_pool(f)?;
        let att = attention_vector(tape, vars, pooled, site)?;
        let scaled = tape.channel_scale(f, att)?;
        let y = tape.add(f, scaled)?;
        let mut others = Vec::new();
        if opts.all_sites {
            let pooled_detached = tape.stop_gradient(pooled);
            for i in 0..site.num_sites() {
                let v = if i == site.index() {
                    att
                } else {
                    attention_vector(tape, vars, pooled_detached, SiteEncoding::new(i, site.num_sites())?)?
                };
                others.push(tape.stop_gradient(v));
            }
        }
        (Some(att), y, others)
    } else {
        (None, f, Vec::new())
    };

    let mut stages = Vec::with_capacity(4);
    for (name, skip) in DECODER.iter().zip(skips.iter().rev()) {
        let up = tape.upsample2(y)?;
        let cat = tape.concat(&[up, *skip])?;
        y = conv_block(tape, vars, name, cat)?;
        stages.push(y);
    }
    let logits = tape.conv2d(y, vars.get("head.weight")?, vars.get("head.bias")?)?;
    let probs = tape.softmax(logits)?;
    Ok(ForwardOutput {
        logits,
        probs,
        bottleneck: f,
        attention,
        d2: stages[1],
        d3: stages[2],
        site_attentions,
    })
}

/// Negated mean inter-site attention distance.
///
/// `-(1/(K-1)) Σ_{i≠k} mean_c |own_c - sg(other_i,c)|`; the other vectors
/// are detached. With no other sites the result is an exact zero constant.
pub fn contrastive_loss(tape: &mut Tape, own: Var, others: &[Var]) -> Result<Var> {
    if others.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(others.len());
    for &o in others {
        let o = tape.stop_gradient(o);
        let d = tape.sub(own, o)?;
        let d = tape.abs(d);
        terms.push(tape.mean(d));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, -1.0 / others.len() as f64))
}

/// Indices of the other sites' vectors in `site_attentions`.
pub fn other_sites(out: &ForwardOutput, site: SiteEncoding) -> Vec<Var> {
    out.site_attentions
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != site.index())
        .map(|(_, v)| *v)
        .collect()
}

/// Convenience: single-image inference returning class probabilities.
pub fn predict(params: &ModelParams, image: &Tensor, site: SiteEncoding, scr: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params, false, false);
    let x = tape.constant(image.clone());
    let out = forward(
        &mut tape,
        &vars,
        x,
        site,
        ForwardOptions {
            scr,
            all_sites: false,
        },
    )?;
    Ok(tape.value(out.probs).clone())
}

/// Per-pixel argmax of a `[C, H, W]` probability map.
pub fn argmax_classes(probs: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = probs.dims3()?;
    let n = h * w;
    let d = probs.data();
    Ok((0..n)
        .map(|p| {
            let mut best = 0;
            for ci in 1..c {
                if d[ci * n + p] > d[best * n + p] {
                    best = ci;
                }
            }
            best as u8
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(k: usize) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            num_classes: 3,
            level_channels: [2, 3, 4, 5, 6],
            num_sites: k,
            scr_hidden: 4,
        }
    }

    #[test]
    fn build_is_deterministic_and_partitioned() {
        let cfg = small_cfg(3);
        let a = build_model(&cfg, 11).unwrap();
        let b = build_model(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = build_model(&cfg, 12).unwrap();
        assert_ne!(a, c);
        let mut names: Vec<&str> = a.phi.iter().chain(a.theta.iter()).map(|p| p.name.as_str()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(a.phi.iter().all(|p| p.name.starts_with("enc") || p.name.starts_with("bottleneck") || p.name.starts_with("scr")));
        assert!(a.theta.iter().all(|p| p.name.starts_with("dec") || p.name.starts_with("head")));
    }

    #[test]
    fn desk_parameter_count_matches_hand_count() {
        // [8,16,32,64,128], one input channel, three classes, four sites,
        // attention hidden width 32.
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let dense = |n: usize, m: usize| n * m + m;
        let enc = conv(1, 8, 3) + conv(8, 8, 3)
            + conv(8, 16, 3) + conv(16, 16, 3)
            + conv(16, 32, 3) + conv(32, 32, 3)
            + conv(32, 64, 3) + conv(64, 64, 3)
            + conv(64, 128, 3) + conv(128, 128, 3);
        let scr = dense(4, 32) + dense(32, 128) + dense(256, 128);
        let dec = conv(192, 64, 3) + conv(64, 64, 3)
            + conv(96, 32, 3) + conv(32, 32, 3)
            + conv(48, 16, 3) + conv(16, 16, 3)
            + conv(24, 8, 3) + conv(8, 8, 3)
            + conv(8, 3, 1);
        assert_eq!(enc + scr, 332_184);
        assert_eq!(dec, 196_107);
        let cfg = UNetConfig::scaled(1, 3, 4, 2).unwrap();
        let model = build_model(&cfg, 0).unwrap();
        assert_eq!(model.phi.num_elements(), enc + scr);
        assert_eq!(model.theta.num_elements(), dec);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(2);
        cfg.level_channels = [4, 4, 8, 16, 32];
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(0);
        assert!(cfg.validate().is_err());
        cfg.num_sites = 1;
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn probabilities_sum_to_one_and_forward_is_deterministic() {
        let cfg = small_cfg(2);
        let model = build_model(&cfg, 3).unwrap();
        let img = Tensor::from_fn(&[1, 16, 16], |i| ((i * 37) % 17) as f64 / 17.0);
        let site = SiteEncoding::new(1, 2).unwrap();
        let p1 = predict(&model, &img, site, true).unwrap();
        let p2 = predict(&model, &img, site, true).unwrap();
        assert_eq!(p1, p2);
        let n = 16 * 16;
        for p in 0..n {
            let s: f64 = (0..3).map(|c| p1.data()[c * n + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_indivisible_extent() {
        let cfg = small_cfg(1);
        let model = build_model(&cfg, 0).unwrap();
        let img = Tensor::zeros(&[1, 24, 16]);
        let site = SiteEncoding::new(0, 1).unwrap();
        assert!(predict(&model, &img, site, true).is_err());
    }

    #[test]
    fn site_changes_attention_but_not_encoder_output() {
        let cfg = small_cfg(3);
        let model = build_model(&cfg, 5).unwrap();
        let img = Tensor::from_fn(&[1, 16, 16], |i| ((i * 13) % 7) as f64 / 7.0);
        let run = |k: usize| {
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, &model, false, false);
            let x = tape.constant(img.clone());
            let site = SiteEncoding::new(k, 3).unwrap();
            let out = forward(&mut tape, &vars, x, site, ForwardOptions { scr: true, all_sites: true }).unwrap();
            (
                tape.value(out.bottleneck).clone(),
                tape.value(out.attention.unwrap()).clone(),
                out.site_attentions.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>(),
            )
        };
        let (f0, a0, all0) = run(0);
        let (f2, a2, all2) = run(2);
        assert_eq!(f0, f2);
        assert_ne!(a0, a2);
        assert_eq!(all0[0], a0);
        assert_eq!(all0, all2);
        assert!(a0.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn residual_attention_extremes() {
        // Drive fc3 so the sigmoid saturates at 0 and 1.
        let cfg = small_cfg(2);
        let mut model = build_model(&cfg, 9).unwrap();
        let f = Tensor::from_fn(&[6, 2, 2], |i| i as f64 * 0.1 + 0.05);
        for (bias, want_scale) in [(-1e4, 1.0), (1e4, 2.0)] {
            for p in model.phi.iter_mut() {
                if p.name == "scr.fc3.weight" {
                    p.value.data_mut().fill(0.0);
                }
                if p.name == "scr.fc3.bias" {
                    p.value.data_mut().fill(bias);
                }
            }
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, &model, false, false);
            let fv = tape.constant(f.clone());
            let (_, out) = scr_attention(&mut tape, &vars, fv, SiteEncoding::new(0, 2).unwrap()).unwrap();
            for (o, i) in tape.value(out).data().iter().zip(f.data()) {
                assert_eq!(*o, i * want_scale);
            }
        }
    }

    #[test]
    fn attention_rejects_wrong_site_count() {
        let cfg = small_cfg(2);
        let model = build_model(&cfg, 9).unwrap();
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &model, false, false);
        let f = tape.constant(Tensor::zeros(&[6, 2, 2]));
        assert!(scr_attention(&mut tape, &vars, f, SiteEncoding::new(0, 3).unwrap()).is_err());
    }

    #[test]
    fn contrastive_closed_forms() {
        let mut tape = Tape::new();
        let own = tape.param(Tensor::full(&[4], 1.0));
        let other = tape.constant(Tensor::zeros(&[4]));
        let l = contrastive_loss(&mut tape, own, &[other]).unwrap();
        assert_eq!(tape.value(l).item(), -1.0);

        let same = tape.constant(Tensor::full(&[4], 1.0));
        let l = contrastive_loss(&mut tape, own, &[same, same]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let l = contrastive_loss(&mut tape, own, &[]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(!tape.requires_grad(l));
    }

    #[test]
    fn one_hot_has_single_unit_entry() {
        let e = SiteEncoding::new(2, 4).unwrap().one_hot();
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(SiteEncoding::new(4, 4).is_err());
    }
}
