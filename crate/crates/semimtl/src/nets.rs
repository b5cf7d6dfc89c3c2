//! Generator (shared encoder, segmentation and depth decoders) and per-task
//! discriminators.
//!
//! Parameters live in a [`ParamStore`]; a forward pass first binds every
//! parameter as a tape leaf ([`ParamStore::bind`]) and gradients are copied back
//! with [`ParamStore::accumulate`]. A parameter's `requires_grad` flag is its
//! trainability: frozen parameters become non-differentiable leaves, so no
//! gradient is recorded for them while gradient still flows through the ops
//! that consume them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use synscene::Task;
use tensorcore::{spectral_normalize, Gradients, SpectralState, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Negative-side slope of every leaky ReLU in both networks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// θ^sh
    Shared,
    /// θ^seg
    SegDecoder,
    /// θ^depth
    DepthDecoder,
    SegDiscriminator,
    DepthDiscriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Shared,
        ParamGroup::SegDecoder,
        ParamGroup::DepthDecoder,
        ParamGroup::SegDiscriminator,
        ParamGroup::DepthDiscriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Shared => "shared",
            ParamGroup::SegDecoder => "seg",
            ParamGroup::DepthDecoder => "depth",
            ParamGroup::SegDiscriminator => "disc_seg",
            ParamGroup::DepthDiscriminator => "disc_depth",
        }
    }

    pub fn decoder(task: Task) -> Self {
        match task {
            Task::Seg => ParamGroup::SegDecoder,
            Task::Depth => ParamGroup::DepthDecoder,
        }
    }

    pub fn discriminator(task: Task) -> Self {
        match task {
            Task::Seg => ParamGroup::SegDiscriminator,
            Task::Depth => ParamGroup::DepthDiscriminator,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Trainable flag per parameter group present in a model.
pub type TrainabilityMask = BTreeMap<ParamGroup, bool>;

/// Ordered parameter list. Order is fixed at construction and defines the
/// optimizer slot of each parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn push(&mut self, name: String, group: ParamGroup, value: Tensor) -> usize {
        self.params.push(Param { name, group, value: value.with_requires_grad(true) });
        self.params.len() - 1
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = self.params.iter().map(|p| p.group).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Scalar count per group.
    pub fn group_sizes(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group).or_insert(0) += p.value.numel();
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets the trainable flag of `group`; errors if no parameter belongs to it.
    pub fn set_trainable(&mut self, group: ParamGroup, flag: bool) -> Result<()> {
        let mut hit = false;
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.value.set_requires_grad(flag);
            if !flag {
                p.value.clear_grad();
            }
            hit = true;
        }
        if hit {
            Ok(())
        } else {
            Err(Error::UnknownGroup(group.name().to_string()))
        }
    }

    pub fn mask(&self) -> TrainabilityMask {
        let mut m = TrainabilityMask::new();
        for p in &self.params {
            let e = m.entry(p.group).or_insert(true);
            *e &= p.value.requires_grad();
        }
        m
    }

    /// Records every parameter as a leaf; frozen ones do not require grad.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.value)).collect()
    }

    /// Records every parameter as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Adds the tape gradients of `vars` into the trainable parameters.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::config(format!("{} bound vars for {} parameters", vars.len(), self.params.len())));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                if p.value.requires_grad() {
                    p.value.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.clear_grad());
    }

    /// Squared gradient norm per group, over parameters holding a gradient.
    pub fn grad_norm_sq(&self) -> BTreeMap<ParamGroup, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let n: f64 = p.value.grad().map(|g| g.iter().map(|x| x * x).sum()).unwrap_or(0.0);
            *out.entry(p.group).or_insert(0.0) += n;
        }
        out
    }

    /// Replaces all values with `values` (same order and shapes), keeping flags.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::config(format!("{} tensors for {} parameters", values.len(), self.params.len())));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            let flag = p.value.requires_grad();
            p.value = v.with_requires_grad(flag);
        }
        Ok(())
    }
}

fn kaiming<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Result<Tensor> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| Error::config(e.to_string()))?;
    Ok(Tensor::sample(&shape, &dist, rng)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.push(format!("{name}.weight"), group, kaiming([cout, cin, k, k], rng)?);
        let bias = store.push(format!("{name}.bias"), group, Tensor::zeros(&[cout])?);
        Ok(Self { weight, bias, stride, pad })
    }

    fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, vars[self.weight], Some(vars[self.bias]), self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output widths of the stride-2 encoder blocks.
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { in_channels: 3, num_classes: 4, encoder_channels: vec![16, 32, 64], decoder_channels: 32 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.decoder_channels == 0 {
            return Err(Error::config("generator channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config(format!("bad encoder widths {:?}", self.encoder_channels)));
        }
        Ok(())
    }
}

/// Raw generator outputs for the requested tasks.
#[derive(Clone, Copy, Debug)]
pub struct GenOutput {
    /// `N x C x H x W` logits.
    pub seg_logits: Option<Var>,
    /// `N x 1 x H x W`, strictly inside (0, 1).
    pub inv_depth: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    cfg: GeneratorConfig,
    store: ParamStore,
    encoder: Vec<Conv>,
    seg: Vec<Conv>,
    depth: Vec<Conv>,
}

impl GeneratorNet {
    pub fn build<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut encoder = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            encoder.push(Conv::new(&mut store, &format!("enc{i}"), ParamGroup::Shared, cin, c, 3, 2, 1, rng)?);
            cin = c;
        }
        let feat = cin;
        let d = cfg.decoder_channels;
        let g = ParamGroup::SegDecoder;
        let seg = vec![
            Conv::new(&mut store, "seg.conv0", g, 2 * feat, d, 3, 1, 1, rng)?,
            Conv::new(&mut store, "seg.conv1", g, d, d, 3, 1, 1, rng)?,
            Conv::new(&mut store, "seg.head", g, d, cfg.num_classes, 1, 1, 0, rng)?,
        ];
        let g = ParamGroup::DepthDecoder;
        let depth = vec![
            Conv::new(&mut store, "depth.conv0", g, feat, d, 3, 1, 1, rng)?,
            Conv::new(&mut store, "depth.conv1", g, d, d, 3, 1, 1, rng)?,
            Conv::new(&mut store, "depth.head", g, d, 1, 1, 1, 0, rng)?,
        ];
        Ok(Self { cfg: cfg.clone(), store, encoder, seg, depth })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Forward pass computing only the heads in `tasks`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], images: Var, tasks: &[Task]) -> Result<GenOutput> {
        let (_, c, h, w) = tape.try_value(images)?.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::config(format!("generator expects {} input channels, got {c}", self.cfg.in_channels)));
        }
        let mut x = images;
        for conv in &self.encoder {
            let y = conv.apply(tape, vars, x)?;
            x = tape.leaky_relu(y, LEAKY_SLOPE)?;
        }
        let feat = x;
        let (_, _, fh, fw) = tape.value(feat).dims4()?;

        let mut out = GenOutput { seg_logits: None, inv_depth: None };
        if tasks.contains(&Task::Seg) {
            let pooled = tape.global_avg_pool(feat)?;
            let ctx = tape.upsample_bilinear(pooled, fh, fw)?;
            let mut y = tape.concat_channels(feat, ctx)?;
            for conv in &self.seg[..2] {
                let z = conv.apply(tape, vars, y)?;
                y = tape.leaky_relu(z, LEAKY_SLOPE)?;
            }
            let logits = self.seg[2].apply(tape, vars, y)?;
            out.seg_logits = Some(tape.upsample_bilinear(logits, h, w)?);
        }
        if tasks.contains(&Task::Depth) {
            let mut y = feat;
            for conv in &self.depth[..2] {
                let z = conv.apply(tape, vars, y)?;
                y = tape.leaky_relu(z, LEAKY_SLOPE)?;
            }
            let raw = self.depth[2].apply(tape, vars, y)?;
            let d = tape.sigmoid(raw)?;
            out.inv_depth = Some(tape.upsample_bilinear(d, h, w)?);
        }
        Ok(out)
    }

    /// Gradient-free prediction: `(seg_logits, inv_depth)`.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.store.bind_constant(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &vars, x, &Task::ALL)?;
        let seg = tape.value(out.seg_logits.expect("seg requested")).clone();
        let depth = tape.value(out.inv_depth.expect("depth requested")).clone();
        Ok((seg, depth))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Widths of the spectrally normalized hidden layers; a final layer with
    /// one channel per domain class follows.
    pub channels: Vec<usize>,
    /// Power iterations per training forward.
    pub power_iters: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64, 128], power_iters: 1 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(format!("bad discriminator widths {:?}", self.channels)));
        }
        Ok(())
    }

    /// Smallest square input the layer ladder accepts.
    pub fn min_input(&self) -> usize {
        // each 4x4 stride-2 pad-1 layer needs >= 2 input pixels and halves them;
        // the hidden layers plus the class layer
        1 << (self.channels.len() + 1)
    }
}

/// Per-pixel domain classifier over task maps. Class 0 is ground truth,
/// class k is "prediction from dataset k".
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    task: Task,
    in_channels: usize,
    num_classes: usize,
    cfg: DiscriminatorConfig,
    store: ParamStore,
    layers: Vec<Conv>,
    spectral: Vec<SpectralState>,
}

impl DiscriminatorNet {
    /// `num_domains` is K; the output has K + 1 channels.
    pub fn build<R: Rng + ?Sized>(
        task: Task,
        in_channels: usize,
        num_domains: usize,
        cfg: &DiscriminatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_domains < 1 || in_channels == 0 {
            return Err(Error::config(format!(
                "discriminator needs K >= 1 and input channels >= 1, got K={num_domains}, channels={in_channels}"
            )));
        }
        let group = ParamGroup::discriminator(task);
        let mut store = ParamStore::default();
        let mut layers = Vec::new();
        let mut cin = in_channels;
        let widths = cfg.channels.iter().copied().chain(std::iter::once(num_domains + 1));
        for (i, c) in widths.enumerate() {
            layers.push(Conv::new(&mut store, &format!("d{}.conv{i}", task.name()), group, cin, c, 4, 2, 1, rng)?);
            cin = c;
        }
        let spectral = layers[..cfg.channels.len()]
            .iter()
            .map(|l| SpectralState::for_weight(&store.params()[l.weight].value, rng))
            .collect();
        Ok(Self { task, in_channels, num_classes: num_domains + 1, cfg: cfg.clone(), store, layers, spectral })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// K + 1.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn spectral_states(&self) -> &[SpectralState] {
        &self.spectral
    }

    pub fn set_spectral_states(&mut self, states: Vec<SpectralState>) -> Result<()> {
        if states.len() != self.spectral.len() || states.iter().zip(&self.spectral).any(|(a, b)| a.u.len() != b.u.len())
        {
            return Err(Error::config("spectral state layout does not match the discriminator"));
        }
        self.spectral = states;
        Ok(())
    }

    /// Training forward: refines the spectral estimates by the configured
    /// number of power iterations.
    pub fn forward(&mut self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        let n = self.cfg.power_iters;
        self.forward_with(tape, vars, input, n)
    }

    /// Forward with an explicit power-iteration count; `0` keeps `u` fixed.
    pub fn forward_with(&mut self, tape: &mut Tape, vars: &[Var], input: Var, power_iters: usize) -> Result<Var> {
        let (_, c, h, w) = tape.try_value(input)?.dims4()?;
        if c != self.in_channels {
            return Err(Error::config(format!(
                "{} discriminator expects {} input channels, got {c}",
                self.task, self.in_channels
            )));
        }
        let min = self.cfg.min_input();
        if h < min || w < min {
            return Err(Error::config(format!("discriminator input {h}x{w} is smaller than {min}x{min}")));
        }
        let hidden = self.spectral.len();
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let weight = if i < hidden {
                spectral_normalize(tape, vars[layer.weight], &mut self.spectral[i], power_iters)?
            } else {
                vars[layer.weight]
            };
            let y = tape.conv2d(x, weight, Some(vars[layer.bias]), layer.stride, layer.pad)?;
            x = if i < hidden { tape.leaky_relu(y, LEAKY_SLOPE)? } else { y };
        }
        Ok(tape.upsample_bilinear(x, h, w)?)
    }
}

/// One-hot `N x C x H x W` encoding of an `N x H x W` label map.
pub fn one_hot(labels: &[usize], n: usize, classes: usize, h: usize, w: usize) -> Result<Tensor> {
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::config(format!("{} labels for {n}x{h}x{w}", labels.len())));
    }
    let mut data = vec![0.0; n * classes * hw];
    for b in 0..n {
        for s in 0..hw {
            let c = labels[b * hw + s];
            if c >= classes {
                return Err(Error::config(format!("label {c} out of range for {classes} classes")));
            }
            data[(b * classes + c) * hw + s] = 1.0;
        }
    }
    Ok(Tensor::new(&[n, classes, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_names_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(g.name().parse::<ParamGroup>().unwrap(), g);
        }
        assert!(matches!("encoder".parse::<ParamGroup>(), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn one_hot_layout() {
        let t = one_hot(&[1, 0], 1, 2, 1, 2).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(one_hot(&[2], 1, 2, 1, 1).is_err());
    }

    #[test]
    fn min_input_matches_ladder() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.min_input(), 32);
        let mut d = DiscriminatorNet::build(Task::Depth, 1, 2, &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = d.store().bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 1, 32, 32]).unwrap());
        let y = d.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 32, 32]);
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16]).unwrap());
        assert!(d.forward(&mut tape, &vars, x).is_err());
    }
}
