//! The seven networks: two content encoders (sharing their last residual
//! block), the blur encoder, two generators and two multi-scale
//! discriminators.
//!
//! Parameters live in a flat [`ModelState`] keyed by hierarchical names. The
//! graph builders in this module bind those names to tape leaves through a
//! [`Binder`], so a parameter referenced twice (the shared block) becomes a
//! single leaf whose gradient accumulates from both encoders.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use unblur_autograd::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed;

pub const IN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

/// Name prefix of the residual block both content encoders share.
pub const SHARED_PREFIX: &str = "content_shared.res4";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Blurred,
    Sharp,
}

impl Domain {
    fn tag(self) -> &'static str {
        match self {
            Domain::Blurred => "blurred",
            Domain::Sharp => "sharp",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blurred" => Ok(Domain::Blurred),
            "sharp" => Ok(Domain::Sharp),
            other => Err(Error::Param(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub image_channels: usize,
    /// Channel count of the first convolution; deeper layers use 2× and 4×.
    pub base_width: usize,
    /// Dimension of the blur code.
    pub latent_dim: usize,
    pub disc_scales: usize,
    pub crop_size: usize,
    /// Whether the blur encoder exists and generators are conditioned on a
    /// blur code. Off only for the ablation variants without disentanglement.
    pub blur_encoder: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_channels: 3,
            base_width: 64,
            latent_dim: 8,
            disc_scales: 2,
            crop_size: 128,
            blur_encoder: true,
        }
    }
}

impl NetworkConfig {
    /// Small configuration used for tests and toy experiments.
    pub fn toy(image_channels: usize) -> Self {
        NetworkConfig {
            image_channels,
            base_width: 16,
            crop_size: 32,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_width == 0 || self.latent_dim == 0 {
            return Err(Error::Param(
                "image_channels, base_width and latent_dim must be positive".into(),
            ));
        }
        if self.disc_scales == 0 || self.disc_scales > 6 {
            return Err(Error::Param(format!(
                "disc_scales must be in 1..=6, got {}",
                self.disc_scales
            )));
        }
        let unit = 8usize << (self.disc_scales - 1);
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(unit) {
            return Err(Error::Param(format!(
                "crop_size {} must be a positive multiple of {unit} \
                 (three 2x downsamplings at each of {} discriminator scales)",
                self.crop_size, self.disc_scales
            )));
        }
        Ok(())
    }

    /// Channel count of the content feature grid.
    pub fn content_channels(&self) -> usize {
        4 * self.base_width
    }

    fn code_channels(&self) -> usize {
        if self.blur_encoder {
            self.latent_dim
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    zero: bool,
}

fn conv_spec(specs: &mut Vec<ParamSpec>, name: &str, out: usize, inp: usize, k: usize, bias: bool) {
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![out, inp, k, k],
        zero: false,
    });
    if bias {
        specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![out],
            zero: true,
        });
    }
}

fn res_spec(specs: &mut Vec<ParamSpec>, name: &str, ch: usize, extra_in: usize) {
    conv_spec(specs, &format!("{name}.conv1"), ch, ch + extra_in, 3, false);
    conv_spec(specs, &format!("{name}.conv2"), ch, ch, 3, false);
}

/// Every parameter of the model in canonical order.
fn param_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let (c, w) = (cfg.image_channels, cfg.base_width);
    let mut s = Vec::new();
    for d in [Domain::Blurred, Domain::Sharp] {
        let p = format!("content_{d}");
        conv_spec(&mut s, &format!("{p}.conv1"), w, c, 4, false);
        conv_spec(&mut s, &format!("{p}.conv2"), 2 * w, w, 4, false);
        conv_spec(&mut s, &format!("{p}.conv3"), 4 * w, 2 * w, 4, false);
        for r in 1..=3 {
            res_spec(&mut s, &format!("{p}.res{r}"), 4 * w, 0);
        }
    }
    res_spec(&mut s, SHARED_PREFIX, 4 * w, 0);

    if cfg.blur_encoder {
        let widths = [c, w, 2 * w, 4 * w, 4 * w];
        for i in 0..4 {
            conv_spec(
                &mut s,
                &format!("blur_encoder.conv{}", i + 1),
                widths[i + 1],
                widths[i],
                3,
                true,
            );
        }
        s.push(ParamSpec {
            name: "blur_encoder.fc.weight".into(),
            shape: vec![2 * cfg.latent_dim, 4 * w],
            zero: false,
        });
        s.push(ParamSpec {
            name: "blur_encoder.fc.bias".into(),
            shape: vec![2 * cfg.latent_dim],
            zero: true,
        });
    }

    for d in [Domain::Blurred, Domain::Sharp] {
        let p = format!("gen_{d}");
        res_spec(&mut s, &format!("{p}.res1"), 4 * w, cfg.code_channels());
        for r in 2..=4 {
            res_spec(&mut s, &format!("{p}.res{r}"), 4 * w, 0);
        }
        // transposed-conv weights are [in, out, k, k]
        s.push(ParamSpec {
            name: format!("{p}.up1.weight"),
            shape: vec![4 * w, 2 * w, 4, 4],
            zero: false,
        });
        s.push(ParamSpec {
            name: format!("{p}.up2.weight"),
            shape: vec![2 * w, w, 4, 4],
            zero: false,
        });
        s.push(ParamSpec {
            name: format!("{p}.up3.weight"),
            shape: vec![w, c, 4, 4],
            zero: false,
        });
        s.push(ParamSpec {
            name: format!("{p}.up3.bias"),
            shape: vec![c],
            zero: true,
        });
    }

    for d in [Domain::Blurred, Domain::Sharp] {
        for k in 0..cfg.disc_scales {
            let p = format!("disc_{d}.scale{k}");
            conv_spec(&mut s, &format!("{p}.conv1"), w, c, 4, true);
            conv_spec(&mut s, &format!("{p}.conv2"), 2 * w, w, 4, true);
            conv_spec(&mut s, &format!("{p}.conv3"), 4 * w, 2 * w, 4, true);
            conv_spec(&mut s, &format!("{p}.conv4"), 4 * w, 4 * w, 3, true);
            conv_spec(&mut s, &format!("{p}.conv5"), 1, 4 * w, 3, true);
        }
    }
    s
}

/// Which network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    ContentEncoder,
    BlurEncoder,
    Generator,
    Discriminator,
}

pub fn role_of(name: &str) -> Role {
    if name.starts_with("content_") {
        Role::ContentEncoder
    } else if name.starts_with("blur_encoder") {
        Role::BlurEncoder
    } else if name.starts_with("gen_") {
        Role::Generator
    } else {
        Role::Discriminator
    }
}

/// All learnable parameters plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: NetworkConfig,
    pub seed: u64,
    params: BTreeMap<String, Tensor<f32>>,
}

impl ModelState {
    pub(crate) fn from_parts(
        config: NetworkConfig,
        seed: u64,
        params: BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "`{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter `{}`", spec.name)))
                }
            }
        }
        Ok(ModelState {
            config,
            seed,
            params,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// The final content-encoder layer read through one domain's encoder.
    pub fn content_final_layer(&self, domain: Domain) -> Vec<(&str, &Tensor<f32>)> {
        content_layer_names(domain)
            .into_iter()
            .filter(|n| n.starts_with(SHARED_PREFIX))
            .map(|n| {
                let (k, v) = self.params.get_key_value(&n).expect("known parameter");
                (k.as_str(), v)
            })
            .collect()
    }
}

/// Parameter names a content encoder reads, in evaluation order.
pub fn content_layer_names(domain: Domain) -> Vec<String> {
    let p = format!("content_{domain}");
    let mut names: Vec<String> = (1..=3).map(|i| format!("{p}.conv{i}.weight")).collect();
    for r in 1..=3 {
        for c in 1..=2 {
            names.push(format!("{p}.res{r}.conv{c}.weight"));
        }
    }
    for c in 1..=2 {
        names.push(format!("{SHARED_PREFIX}.conv{c}.weight"));
    }
    names
}

/// Builds all seven networks with N(0, 0.02) weights and zero biases. Each
/// tensor is drawn from its own stream keyed by (seed, name).
pub fn init_model(config: &NetworkConfig, seed_value: u64) -> Result<ModelState> {
    config.validate()?;
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let params = param_specs(config)
        .into_iter()
        .map(|spec| {
            let t = if spec.zero {
                Tensor::zeros(spec.shape)
            } else {
                let mut rng = seed::rng(seed::derive_named(seed_value, &spec.name));
                Tensor::from_fn(spec.shape, |_| normal.sample(&mut rng) as f32)
            };
            (spec.name, t)
        })
        .collect();
    ModelState::from_parts(config.clone(), seed_value, params)
}

/// Binds parameter names to tape leaves. Names accepted by `trainable`
/// become gradient-carrying leaves; all others are constants.
pub struct Binder<'a> {
    state: &'a ModelState,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    vars: HashMap<&'a str, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(state: &'a ModelState, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Binder {
            state,
            trainable: Box::new(trainable),
            vars: HashMap::new(),
        }
    }

    /// Every parameter is a constant.
    pub fn frozen(state: &'a ModelState) -> Self {
        Binder::new(state, |_| false)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.state.config
    }

    pub fn var(&mut self, g: &mut Graph<f32>, name: &str) -> Var {
        let (key, t) = self
            .state
            .params
            .get_key_value(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(v) = self.vars.get(key.as_str()) {
            return *v;
        }
        let v = if (self.trainable)(key) {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        };
        self.vars.insert(key.as_str(), v);
        v
    }

    fn opt_var(&mut self, g: &mut Graph<f32>, name: &str) -> Option<Var> {
        self.state.params.contains_key(name).then(|| self.var(g, name))
    }

    /// Bound leaves that carry gradients, by parameter name.
    pub fn trainable_vars(&self, g: &Graph<f32>) -> Vec<(&'a str, Var)> {
        let mut out: Vec<(&'a str, Var)> = self
            .vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(k, v)| (*k, *v))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    fn conv(&mut self, g: &mut Graph<f32>, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.var(g, &format!("{name}.weight"));
        let b = self.opt_var(g, &format!("{name}.bias"));
        g.conv2d(x, w, b, stride, pad)
    }

    fn conv_t(&mut self, g: &mut Graph<f32>, name: &str, x: Var) -> Var {
        let w = self.var(g, &format!("{name}.weight"));
        let b = self.opt_var(g, &format!("{name}.bias"));
        g.conv_transpose2d(x, w, b, 2, 1)
    }

    /// `skip + IN(conv(ReLU(IN(conv(input)))))`.
    fn res_block(&mut self, g: &mut Graph<f32>, name: &str, input: Var, skip: Var) -> Var {
        let h = self.conv(g, &format!("{name}.conv1"), input, 1, 1);
        let h = g.instance_norm(h, IN_EPS);
        let h = g.relu(h);
        let h = self.conv(g, &format!("{name}.conv2"), h, 1, 1);
        let h = g.instance_norm(h, IN_EPS);
        g.add(skip, h)
    }

    /// Content encoder of `domain` on an `[N, C, H, W]` batch.
    pub fn content_encoder(&mut self, g: &mut Graph<f32>, domain: Domain, x: Var) -> Var {
        let p = format!("content_{domain}");
        let mut h = x;
        for i in 1..=3 {
            h = self.conv(g, &format!("{p}.conv{i}"), h, 2, 1);
            h = g.instance_norm(h, IN_EPS);
            h = g.relu(h);
        }
        for r in 1..=3 {
            h = self.res_block(g, &format!("{p}.res{r}"), h, h);
        }
        self.res_block(g, SHARED_PREFIX, h, h)
    }

    /// Blur encoder; returns `(mu, log_var)`, each `[N, latent_dim]`.
    pub fn blur_encoder(&mut self, g: &mut Graph<f32>, x: Var) -> (Var, Var) {
        assert!(self.config().blur_encoder, "model has no blur encoder");
        let n_latent = self.config().latent_dim;
        let mut h = x;
        for i in 1..=4 {
            h = self.conv(g, &format!("blur_encoder.conv{i}"), h, 2, 1);
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h);
        let w = self.var(g, "blur_encoder.fc.weight");
        let b = self.var(g, "blur_encoder.fc.bias");
        let out = g.linear(pooled, w, Some(b));
        let mu = g.slice_cols(out, 0, n_latent);
        let log_var = g.slice_cols(out, n_latent, n_latent);
        (mu, log_var)
    }

    /// Generator of `domain` from a content grid and optional blur code
    /// `[N, latent_dim]`. Output is tanh-bounded.
    pub fn generator(
        &mut self,
        g: &mut Graph<f32>,
        domain: Domain,
        content: Var,
        code: Option<Var>,
    ) -> Var {
        let p = format!("gen_{domain}");
        assert_eq!(
            code.is_some(),
            self.config().blur_encoder,
            "blur code presence must match the model configuration"
        );
        let input = match code {
            Some(z) => {
                let (_, _, h, w) = g.value(content).dims4();
                let tiled = g.tile_spatial(z, h, w);
                g.concat_channels(content, tiled)
            }
            None => content,
        };
        let mut h = self.res_block(g, &format!("{p}.res1"), input, content);
        for r in 2..=4 {
            h = self.res_block(g, &format!("{p}.res{r}"), h, h);
        }
        for i in 1..=2 {
            h = self.conv_t(g, &format!("{p}.up{i}"), h);
            h = g.instance_norm(h, IN_EPS);
            h = g.relu(h);
        }
        let h = self.conv_t(g, &format!("{p}.up3"), h);
        g.tanh(h)
    }

    /// Multi-scale discriminator; returns per-scale logit maps `[N, 1, h, w]`.
    pub fn discriminator(&mut self, g: &mut Graph<f32>, domain: Domain, x: Var) -> Vec<Var> {
        let scales = self.config().disc_scales;
        let mut input = x;
        let mut out = Vec::with_capacity(scales);
        for k in 0..scales {
            if k > 0 {
                input = g.avg_pool2(input);
            }
            let p = format!("disc_{domain}.scale{k}");
            let mut h = input;
            for i in 1..=3 {
                h = self.conv(g, &format!("{p}.conv{i}"), h, 2, 1);
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            h = self.conv(g, &format!("{p}.conv4"), h, 1, 1);
            h = g.leaky_relu(h, LEAKY_SLOPE);
            out.push(self.conv(g, &format!("{p}.conv5"), h, 1, 1));
        }
        out
    }
}

/// `z_b = mu + noise ∘ exp(log_var / 2)` on the tape.
pub fn reparameterize(g: &mut Graph<f32>, mu: Var, log_var: Var, noise: Var) -> Var {
    let half = g.scale(log_var, 0.5);
    let sigma = g.exp(half);
    let scaled = g.mul(noise, sigma);
    g.add(mu, scaled)
}

/// Content feature grid of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures {
    /// `[1, 4·base_width, H/8, W/8]`
    pub grid: Tensor<f32>,
}

/// Gaussian posterior over the blur code.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurPosterior {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

impl BlurPosterior {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f32> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.log_var).all(|v| v.is_finite())
    }
}

/// A reparameterized sample and the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurCode {
    pub z_b: Vec<f32>,
    pub noise: Vec<f32>,
}

/// One per-scale map of discriminator probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

fn check_image(state: &ModelState, img: &ImageTensor, unit: usize) -> Result<()> {
    let (c, h, w) = img.dims();
    if c != state.config.image_channels {
        return Err(Error::Shape(format!(
            "image has {c} channels, model expects {}",
            state.config.image_channels
        )));
    }
    if h % unit != 0 || w % unit != 0 {
        return Err(Error::Shape(format!(
            "image size {h}x{w} must be divisible by {unit}"
        )));
    }
    Ok(())
}

pub fn content_encode(
    state: &ModelState,
    domain: Domain,
    img: &ImageTensor,
) -> Result<ContentFeatures> {
    check_image(state, img, 8)?;
    let mut g = Graph::new();
    let mut b = Binder::frozen(state);
    let x = g.constant(img.to_tensor());
    let out = b.content_encoder(&mut g, domain, x);
    Ok(ContentFeatures {
        grid: g.value(out).clone(),
    })
}

pub fn blur_encode(state: &ModelState, img: &ImageTensor) -> Result<BlurPosterior> {
    if !state.config.blur_encoder {
        return Err(Error::Param("model was built without a blur encoder".into()));
    }
    check_image(state, img, 1)?;
    let mut g = Graph::new();
    let mut b = Binder::frozen(state);
    let x = g.constant(img.to_tensor());
    let (mu, lv) = b.blur_encoder(&mut g, x);
    Ok(BlurPosterior {
        mu: g.value(mu).data().to_vec(),
        log_var: g.value(lv).data().to_vec(),
    })
}

pub fn sample_blur_code(post: &BlurPosterior, noise: &[f32]) -> Result<BlurCode> {
    if noise.len() != post.dim() || post.log_var.len() != post.dim() {
        return Err(Error::Shape(format!(
            "noise of length {} for a {}-dimensional posterior",
            noise.len(),
            post.dim()
        )));
    }
    let z_b = post
        .mu
        .iter()
        .zip(&post.log_var)
        .zip(noise)
        .map(|((&m, &lv), &z)| m + z * (lv * 0.5).exp())
        .collect();
    Ok(BlurCode {
        z_b,
        noise: noise.to_vec(),
    })
}

pub fn generate(
    state: &ModelState,
    domain: Domain,
    content: &ContentFeatures,
    code: Option<&BlurCode>,
) -> Result<ImageTensor> {
    let cfg = &state.config;
    let shape = content.grid.shape();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != cfg.content_channels() {
        return Err(Error::Shape(format!(
            "content grid {shape:?} does not match [1, {}, h, w]",
            cfg.content_channels()
        )));
    }
    match (code, cfg.blur_encoder) {
        (Some(c), true) if c.z_b.len() == cfg.latent_dim => {}
        (None, false) => {}
        (Some(c), true) => {
            return Err(Error::Shape(format!(
                "blur code of length {}, expected {}",
                c.z_b.len(),
                cfg.latent_dim
            )))
        }
        (Some(_), false) => {
            return Err(Error::Param("model takes no blur code".into()));
        }
        (None, true) => return Err(Error::Param("model requires a blur code".into())),
    }
    let mut g = Graph::new();
    let mut b = Binder::frozen(state);
    let c = g.constant(content.grid.clone());
    let z = code.map(|c| g.constant(Tensor::new(vec![1, c.z_b.len()], c.z_b.clone())));
    let out = b.generator(&mut g, domain, c, z);
    ImageTensor::from_batch(g.value(out), 0)
}

pub fn discriminate(state: &ModelState, domain: Domain, img: &ImageTensor) -> Result<Vec<ScoreMap>> {
    check_image(state, img, 8 << (state.config.disc_scales - 1))?;
    let mut g = Graph::new();
    let mut b = Binder::frozen(state);
    let x = g.constant(img.to_tensor());
    let logits = b.discriminator(&mut g, domain, x);
    Ok(logits
        .into_iter()
        .map(|l| {
            let t = g.value(l);
            let (_, _, h, w) = t.dims4();
            ScoreMap {
                height: h,
                width: w,
                scores: t.data().iter().map(|&v| sigmoid(v as f64)).collect(),
            }
        })
        .collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
