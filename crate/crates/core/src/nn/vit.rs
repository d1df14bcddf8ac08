use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::lora::{Lora, LoraConfig};
use super::trunc_normal;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_embed: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            d_embed: 32,
            d_mlp: 64,
            n_heads: 2,
            n_layers: 4,
            n_classes: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.d_embed,
            self.d_mlp,
            self.n_heads,
            self.n_layers,
            self.n_classes,
        ];
        if fields.contains(&0) {
            return Err(Error::Parameter(format!("all ViT dimensions must be positive: {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Parameter(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.d_embed % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "{} heads do not divide d_embed {}",
                self.n_heads, self.d_embed
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the CLS token.
    pub fn tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Parameter count of the base model (no adapters).
    pub fn parameter_count(&self) -> usize {
        let d = self.d_embed;
        let per_layer = 2 * 2 * d + 4 * (d * d + d) + (d * self.d_mlp + self.d_mlp) + (self.d_mlp * d + d);
        (self.patch_dim() * d + d) + self.tokens() * d + d + self.n_layers * per_layer + 2 * d + (d * self.n_classes + self.n_classes)
    }
}

/// Reweighting and pruning applied to the residual updates of every layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReMemConfig {
    pub alpha_mlp: f64,
    pub alpha_attn: f64,
    pub prune_mlp_top_k: usize,
    pub prune_attn_top_k: usize,
}

impl Default for ReMemConfig {
    fn default() -> Self {
        ReMemConfig::neutral()
    }
}

impl ReMemConfig {
    /// The unmodified transformer.
    pub const fn neutral() -> Self {
        ReMemConfig {
            alpha_mlp: 1.0,
            alpha_attn: 1.0,
            prune_mlp_top_k: 0,
            prune_attn_top_k: 0,
        }
    }

    pub fn reweight(alpha_mlp: f64) -> Self {
        ReMemConfig {
            alpha_mlp,
            ..ReMemConfig::neutral()
        }
    }

    pub fn is_neutral(&self) -> bool {
        *self == ReMemConfig::neutral()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        for (name, a) in [("alpha_mlp", self.alpha_mlp), ("alpha_attn", self.alpha_attn)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {a}")));
            }
        }
        if self.prune_mlp_top_k > n_layers || self.prune_attn_top_k > n_layers {
            return Err(Error::Parameter(format!(
                "prune counts ({}, {}) exceed {n_layers} layers",
                self.prune_mlp_top_k, self.prune_attn_top_k
            )));
        }
        Ok(())
    }

    /// Layers are 0-based here; the topmost `k` layers are pruned.
    pub fn mlp_pruned(&self, layer: usize, n_layers: usize) -> bool {
        layer + self.prune_mlp_top_k >= n_layers
    }

    pub fn attn_pruned(&self, layer: usize, n_layers: usize) -> bool {
        layer + self.prune_attn_top_k >= n_layers
    }
}

/// Compounded multiplier `α·(2−α)^(l_tot−l)` that the MLP output of layer
/// `l` (1-based) carries to the network output under uniform reweighting.
pub fn effective_weight(alpha: f64, layer: usize, total_layers: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if layer == 0 || layer > total_layers {
        return Err(Error::Parameter(format!("layer {layer} outside 1..={total_layers}")));
    }
    Ok(alpha * (2.0 - alpha).powi((total_layers - layer) as i32))
}

/// A named parameter and whether weight decay applies to it.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[d_in, d_out]`, applied as `x · W`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: Tensor::param(trunc_normal(rng, d_in * d_out, INIT_STD), &[d_in, d_out]).expect("shape"),
            bias: Tensor::param(vec![0.0; d_out], &[d_out]).expect("shape"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_rows(&self.bias)
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn params(&self, prefix: &str, out: &mut Vec<Param>) {
        out.push(Param {
            name: format!("{prefix}.weight"),
            tensor: self.weight.clone(),
            decay: true,
        });
        out.push(Param {
            name: format!("{prefix}.bias"),
            tensor: self.bias.clone(),
            decay: false,
        });
    }
}

fn ln_params(d: usize) -> (Tensor, Tensor) {
    (
        Tensor::param(vec![1.0; d], &[d]).expect("shape"),
        Tensor::param(vec![0.0; d], &[d]).expect("shape"),
    )
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub query_lora: Option<Lora>,
    pub value_lora: Option<Lora>,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `W₁`, d_embed × d_mlp.
    pub fc1: Linear,
    /// `W₂`, d_mlp × d_embed.
    pub fc2: Linear,
}

/// Optional edits applied during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Hooks {
    /// Multiplies the post-ReLU activations of one layer's MLP by a
    /// per-neuron mask of length d_mlp.
    pub neuron_mask: Option<(usize, Vec<f64>)>,
}

impl Hooks {
    pub fn zero_neuron(layer: usize, neuron: usize, d_mlp: usize) -> Hooks {
        let mut mask = vec![1.0; d_mlp];
        mask[neuron] = 0.0;
        Hooks {
            neuron_mask: Some((layer, mask)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[b, n_classes]`
    pub logits: Tensor,
    /// Final-layernorm CLS token, `[b, d_embed]`.
    pub cls_embedding: Tensor,
    /// CLS token of the residual stream before the final layernorm.
    pub residual_cls: Tensor,
    /// Post-ReLU MLP activations per layer, `[b·tokens, d_mlp]` with rows
    /// ordered sample-major; `None` for pruned MLP blocks.
    pub mlp_activations: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct VitModel {
    pub config: VitConfig,
    pub patch: Linear,
    /// `[tokens, d_embed]`, row 0 belongs to the CLS token.
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub layers: Vec<Layer>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: Linear,
}

/// Rearranges `[b, c, h, w]` images into `[b·patches, c·p·p]` rows, patches
/// in row-major grid order, each flattened channel-major.
pub fn patchify(images: &Tensor, config: &VitConfig) -> Result<Tensor> {
    let s = images.shape();
    let expect = [config.channels, config.image_size, config.image_size];
    if s.len() != 4 || s[1..] != expect {
        return Err(Error::shape("patchify", s, &expect));
    }
    let b = s[0];
    let (c, size, p) = (config.channels, config.image_size, config.patch_size);
    let side = size / p;
    let mut index = Vec::with_capacity(images.numel());
    for n in 0..b {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for y in 0..p {
                        for x in 0..p {
                            let row = py * p + y;
                            let col = px * p + x;
                            index.push(((n * c + ch) * size + row) * size + col);
                        }
                    }
                }
            }
        }
    }
    images.gather(Rc::new(index), &[b * side * side, config.patch_dim()])
}

fn split_heads_index(b: usize, t: usize, h: usize, dh: usize) -> Rc<Vec<usize>> {
    let d = h * dh;
    let mut idx = Vec::with_capacity(b * t * d);
    for n in 0..b {
        for head in 0..h {
            for tok in 0..t {
                for j in 0..dh {
                    idx.push((n * t + tok) * d + head * dh + j);
                }
            }
        }
    }
    Rc::new(idx)
}

fn merge_heads_index(b: usize, t: usize, h: usize, dh: usize) -> Rc<Vec<usize>> {
    let d = h * dh;
    let mut idx = Vec::with_capacity(b * t * d);
    for n in 0..b {
        for tok in 0..t {
            for head in 0..h {
                for j in 0..dh {
                    idx.push(((n * h + head) * t + tok) * dh + j);
                }
            }
        }
    }
    Rc::new(idx)
}

/// `x̃ = (2−α)·x + α·y`; α = 1 reduces to the plain residual `x + y`.
fn reweighted_residual(x: &Tensor, update: &Tensor, alpha: f64) -> Result<Tensor> {
    if alpha == 1.0 {
        x.add(update)
    } else {
        x.scale(2.0 - alpha).add(&update.scale(alpha))
    }
}

impl Layer {
    fn new(rng: &mut Rng, cfg: &VitConfig) -> Layer {
        let d = cfg.d_embed;
        let (ln1_gain, ln1_bias) = ln_params(d);
        let (ln2_gain, ln2_bias) = ln_params(d);
        Layer {
            ln1_gain,
            ln1_bias,
            query: Linear::new(rng, d, d),
            key: Linear::new(rng, d, d),
            value: Linear::new(rng, d, d),
            out: Linear::new(rng, d, d),
            query_lora: None,
            value_lora: None,
            ln2_gain,
            ln2_bias,
            fc1: Linear::new(rng, d, cfg.d_mlp),
            fc2: Linear::new(rng, cfg.d_mlp, d),
        }
    }

    /// Multi-head self-attention on the pre-normalized stream.
    pub fn attention(&self, x: &Tensor, batch: usize, cfg: &VitConfig) -> Result<Tensor> {
        let t = cfg.tokens();
        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let normed = x.layer_norm(&self.ln1_gain, &self.ln1_bias, LN_EPS)?;
        let project = |lin: &Linear, lora: &Option<Lora>| -> Result<Tensor> {
            match lora {
                Some(l) => l.forward(lin, &normed),
                None => lin.forward(&normed),
            }
        };
        let q = project(&self.query, &self.query_lora)?;
        let k = self.key.forward(&normed)?;
        let v = project(&self.value, &self.value_lora)?;

        let split = split_heads_index(batch, t, h, dh);
        let heads = [batch * h, t, dh];
        let qh = q.gather(split.clone(), &heads)?;
        let kh = k.gather(split.clone(), &heads)?;
        let vh = v.gather(split, &heads)?;
        let scores = qh.batch_matmul(&kh, true)?.scale(1.0 / (dh as f64).sqrt());
        let weights = scores.softmax(1.0)?;
        let ctx = weights.batch_matmul(&vh, false)?;
        let merged = ctx.gather(merge_heads_index(batch, t, h, dh), &[batch * t, cfg.d_embed])?;
        self.out.forward(&merged)
    }

    /// Returns (MLP output, post-ReLU activations).
    pub fn mlp(&self, x: &Tensor, mask: Option<&[f64]>) -> Result<(Tensor, Tensor)> {
        let normed = x.layer_norm(&self.ln2_gain, &self.ln2_bias, LN_EPS)?;
        let mut act = self.fc1.forward(&normed)?.relu();
        if let Some(mask) = mask {
            let rows = act.shape()[0];
            let full: Vec<f64> = (0..rows).flat_map(|_| mask.iter().copied()).collect();
            act = act.mul(&Tensor::new(full, act.shape())?)?;
        }
        let out = self.fc2.forward(&act)?;
        Ok((out, act))
    }
}

impl VitModel {
    pub fn new(config: VitConfig, seed: u64) -> Result<VitModel> {
        config.validate()?;
        let mut rng = rng_for(seed, "vit-init");
        let d = config.d_embed;
        let patch = Linear::new(&mut rng, config.patch_dim(), d);
        let pos_embed = Tensor::param(trunc_normal(&mut rng, config.tokens() * d, INIT_STD), &[config.tokens(), d])?;
        let cls_token = Tensor::param(trunc_normal(&mut rng, d, INIT_STD), &[1, d])?;
        let layers = (0..config.n_layers).map(|_| Layer::new(&mut rng, &config)).collect();
        let (final_gain, final_bias) = ln_params(d);
        let head = Linear::new(&mut rng, d, config.n_classes);
        Ok(VitModel {
            config,
            patch,
            pos_embed,
            cls_token,
            layers,
            final_gain,
            final_bias,
            head,
        })
    }

    /// Every parameter in a fixed order, adapters included when attached.
    pub fn parameters(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.patch.params("patch", &mut out);
        out.push(Param {
            name: "pos_embed".into(),
            tensor: self.pos_embed.clone(),
            decay: false,
        });
        out.push(Param {
            name: "cls_token".into(),
            tensor: self.cls_token.clone(),
            decay: false,
        });
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = format!("layers.{i}");
            out.push(Param {
                name: format!("{pre}.ln1.gain"),
                tensor: layer.ln1_gain.clone(),
                decay: false,
            });
            out.push(Param {
                name: format!("{pre}.ln1.bias"),
                tensor: layer.ln1_bias.clone(),
                decay: false,
            });
            layer.query.params(&format!("{pre}.attn.query"), &mut out);
            layer.key.params(&format!("{pre}.attn.key"), &mut out);
            layer.value.params(&format!("{pre}.attn.value"), &mut out);
            layer.out.params(&format!("{pre}.attn.out"), &mut out);
            if let Some(l) = &layer.query_lora {
                l.params(&format!("{pre}.attn.query_lora"), &mut out);
            }
            if let Some(l) = &layer.value_lora {
                l.params(&format!("{pre}.attn.value_lora"), &mut out);
            }
            out.push(Param {
                name: format!("{pre}.ln2.gain"),
                tensor: layer.ln2_gain.clone(),
                decay: false,
            });
            out.push(Param {
                name: format!("{pre}.ln2.bias"),
                tensor: layer.ln2_bias.clone(),
                decay: false,
            });
            layer.fc1.params(&format!("{pre}.mlp.fc1"), &mut out);
            layer.fc2.params(&format!("{pre}.mlp.fc2"), &mut out);
        }
        out.push(Param {
            name: "final_norm.gain".into(),
            tensor: self.final_gain.clone(),
            decay: false,
        });
        out.push(Param {
            name: "final_norm.bias".into(),
            tensor: self.final_bias.clone(),
            decay: false,
        });
        self.head.params("head", &mut out);
        out
    }

    pub fn trainable_parameters(&self) -> Vec<Param> {
        self.parameters().into_iter().filter(|p| p.tensor.requires_grad()).collect()
    }

    /// Trainable parameters that the forward pass under `remem` reaches;
    /// pruned sublayers are left out so every returned tensor gets a gradient.
    pub fn active_parameters(&self, remem: &ReMemConfig) -> Vec<Param> {
        let n = self.config.n_layers;
        self.trainable_parameters()
            .into_iter()
            .filter(|p| {
                let Some(rest) = p.name.strip_prefix("layers.") else {
                    return true;
                };
                let (idx, sub) = rest.split_once('.').expect("layer parameter names have a sublayer");
                let layer: usize = idx.parse().expect("numeric layer index");
                let attn = sub.starts_with("attn.") || sub.starts_with("ln1.");
                if attn {
                    !remem.attn_pruned(layer, n)
                } else {
                    !remem.mlp_pruned(layer, n)
                }
            })
            .collect()
    }

    /// Replaces the classification head with a fresh one for `n_classes`.
    pub fn reset_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes == 0 {
            return Err(Error::Parameter("head needs at least one class".into()));
        }
        let mut rng = rng_for(seed, "head-init");
        self.head = Linear::new(&mut rng, self.config.d_embed, n_classes);
        self.config.n_classes = n_classes;
        Ok(())
    }

    /// Changes the head to `n_classes` outputs, keeping the trained
    /// weights of the first `min(old, new)` classes and initializing the
    /// rest fresh.
    pub fn resize_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        let (d, old) = (self.config.d_embed, self.config.n_classes);
        let (w, b) = (self.head.weight.to_vec(), self.head.bias.to_vec());
        self.reset_head(n_classes, seed)?;
        let keep = old.min(n_classes);
        let mut nw = self.head.weight.to_vec();
        let mut nb = self.head.bias.to_vec();
        for row in 0..d {
            nw[row * n_classes..row * n_classes + keep].copy_from_slice(&w[row * old..row * old + keep]);
        }
        nb[..keep].copy_from_slice(&b[..keep]);
        self.head.weight.set_data(nw)?;
        self.head.bias.set_data(nb)
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Deep copy with fresh tensors.
    pub fn snapshot(&self) -> VitModel {
        let copy = |t: &Tensor| {
            let c = t.detach();
            c.set_requires_grad(t.requires_grad());
            c
        };
        let lin = |l: &Linear| Linear {
            weight: copy(&l.weight),
            bias: copy(&l.bias),
        };
        let lora = |l: &Option<Lora>| {
            l.as_ref().map(|l| Lora {
                a: copy(&l.a),
                b: copy(&l.b),
                scaling: l.scaling,
            })
        };
        VitModel {
            config: self.config,
            patch: lin(&self.patch),
            pos_embed: copy(&self.pos_embed),
            cls_token: copy(&self.cls_token),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    ln1_gain: copy(&l.ln1_gain),
                    ln1_bias: copy(&l.ln1_bias),
                    query: lin(&l.query),
                    key: lin(&l.key),
                    value: lin(&l.value),
                    out: lin(&l.out),
                    query_lora: lora(&l.query_lora),
                    value_lora: lora(&l.value_lora),
                    ln2_gain: copy(&l.ln2_gain),
                    ln2_bias: copy(&l.ln2_bias),
                    fc1: lin(&l.fc1),
                    fc2: lin(&l.fc2),
                })
                .collect(),
            final_gain: copy(&self.final_gain),
            final_bias: copy(&self.final_bias),
            head: lin(&self.head),
        }
    }

    /// Flat named values, suitable for moving a model across threads.
    pub fn state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.parameters()
            .into_iter()
            .map(|p| (p.name, p.tensor.shape().to_vec(), p.tensor.to_vec()))
            .collect()
    }

    /// Overwrites parameter values from a named state. Every name must match
    /// one parameter of this model with the same shape.
    pub fn load_state(&self, state: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let params = self.parameters();
        for (name, shape, _) in state {
            match params.iter().find(|p| &p.name == name) {
                None => return Err(Error::UnknownTensor(name.clone())),
                Some(p) if p.tensor.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        expected: p.tensor.shape().to_vec(),
                        found: shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        for p in &params {
            if !state.iter().any(|(n, _, _)| n == &p.name) {
                return Err(Error::MissingTensor(p.name.clone()));
            }
        }
        for (name, _, values) in state {
            let p = params.iter().find(|p| &p.name == name).expect("validated");
            p.tensor.set_data(values.clone())?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.tensor.zero_grad();
        }
    }

    pub fn set_trainable(&self, flag: bool) {
        for p in self.parameters() {
            p.tensor.set_requires_grad(flag);
        }
    }

    /// Attaches fresh adapters to every query and value projection and
    /// freezes all base weights.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, "lora-init");
        self.set_trainable(false);
        for layer in &mut self.layers {
            layer.query_lora = Some(Lora::new(&mut rng, layer.query.d_in(), layer.query.d_out(), cfg)?);
            layer.value_lora = Some(Lora::new(&mut rng, layer.value.d_in(), layer.value.d_out(), cfg)?);
        }
        Ok(())
    }

    /// Folds adapters into the base weights, drops them and unfreezes the
    /// model.
    pub fn merge_lora(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if let Some(l) = layer.query_lora.take() {
                l.merge_into(&layer.query)?;
            }
            if let Some(l) = layer.value_lora.take() {
                l.merge_into(&layer.value)?;
            }
        }
        self.set_trainable(true);
        Ok(())
    }

    pub fn forward(&self, remem: &ReMemConfig, images: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(remem, images, &Hooks::default())
    }

    pub fn forward_with(&self, remem: &ReMemConfig, images: &Tensor, hooks: &Hooks) -> Result<ForwardOutput> {
        let cfg = &self.config;
        remem.validate(cfg.n_layers)?;
        let batch = images.shape().first().copied().unwrap_or(0);
        let patches = patchify(images, cfg)?;
        let embedded = self.patch.forward(&patches)?;

        // Prepend CLS per sample: rows [cls, p_0 .. p_{P-1}] for each image.
        let np = cfg.n_patches();
        let d = cfg.d_embed;
        let stacked = embedded.concat_rows(&self.cls_token)?;
        let cls_row = batch * np;
        let mut index = Vec::with_capacity(batch * cfg.tokens() * d);
        for n in 0..batch {
            index.extend(cls_row * d..(cls_row + 1) * d);
            index.extend((n * np) * d..((n + 1) * np) * d);
        }
        let mut x = stacked
            .gather(Rc::new(index), &[batch * cfg.tokens(), d])?
            .add_rows(&self.pos_embed)?;

        let mut activations = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            if !remem.attn_pruned(li, cfg.n_layers) {
                let a = layer.attention(&x, batch, cfg)?;
                x = reweighted_residual(&x, &a, remem.alpha_attn)?;
            }
            if remem.mlp_pruned(li, cfg.n_layers) {
                activations.push(None);
            } else {
                let mask = match &hooks.neuron_mask {
                    Some((l, m)) if *l == li => {
                        if m.len() != cfg.d_mlp {
                            return Err(Error::shape("neuron_mask", &[m.len()], &[cfg.d_mlp]));
                        }
                        Some(m.as_slice())
                    }
                    _ => None,
                };
                let (m, act) = layer.mlp(&x, mask)?;
                x = reweighted_residual(&x, &m, remem.alpha_mlp)?;
                activations.push(Some(act));
            }
        }

        let cls_rows: Vec<usize> = (0..batch).map(|n| n * cfg.tokens()).collect();
        let residual_cls = x.select_rows(&cls_rows)?;
        let cls_embedding = residual_cls.layer_norm(&self.final_gain, &self.final_bias, LN_EPS)?;
        let logits = self.head.forward(&cls_embedding)?;
        Ok(ForwardOutput {
            logits,
            cls_embedding,
            residual_cls,
            mlp_activations: activations,
        })
    }
}
