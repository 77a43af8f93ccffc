//! Checkpoints as safetensors files.
//!
//! Tensors: every model parameter under its own name (the shared content
//! block once, under `content_shared.res4.*`), plus optimizer moments as
//! `adam_{d,g}.{m,v}.<name>`. All tensors are little-endian f32.
//!
//! String metadata: `format_version`, `epoch`, `master_seed`, the network
//! configuration as `net.*` keys, the optimizer hyper-parameters and step
//! counts, the resolved training configuration text as `config` and its
//! SHA-256 as `config_hash`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};
use unblur_autograd::Tensor;

use crate::error::{Error, Result};
use crate::nets::{Domain, ModelState, NetworkConfig};
use crate::optim::Adam;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    pub opt_d: Adam,
    pub opt_g: Adam,
    /// Number of completed epochs.
    pub epoch: u64,
    pub config_text: String,
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in self.state.params() {
            buffers.push((name.clone(), t.shape().to_vec(), f32_bytes(t.data())));
        }
        for (tag, opt) in [("adam_d", &self.opt_d), ("adam_g", &self.opt_g)] {
            for (kind, moments) in [("m", opt.first_moments()), ("v", opt.second_moments())] {
                for (name, data) in moments {
                    let shape = self
                        .state
                        .param(name)
                        .map(|t| t.shape().to_vec())
                        .unwrap_or_else(|| vec![data.len()]);
                    buffers.push((format!("{tag}.{kind}.{name}"), shape, f32_bytes(data)));
                }
            }
        }
        let views: Vec<(String, TensorView)> = buffers
            .iter()
            .map(|(n, s, d)| {
                TensorView::new(Dtype::F32, s.clone(), d)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))
            })
            .collect::<Result<_>>()?;

        let cfg = &self.state.config;
        let mut meta = HashMap::new();
        let mut put = |k: &str, v: String| {
            meta.insert(k.to_string(), v);
        };
        put("format_version", FORMAT_VERSION.to_string());
        put("epoch", self.epoch.to_string());
        put("master_seed", self.state.seed.to_string());
        put("net.image_channels", cfg.image_channels.to_string());
        put("net.base_width", cfg.base_width.to_string());
        put("net.latent_dim", cfg.latent_dim.to_string());
        put("net.disc_scales", cfg.disc_scales.to_string());
        put("net.crop_size", cfg.crop_size.to_string());
        put("net.blur_encoder", cfg.blur_encoder.to_string());
        for (tag, opt) in [("adam_d", &self.opt_d), ("adam_g", &self.opt_g)] {
            put(&format!("{tag}.steps"), opt.steps().to_string());
            put(&format!("{tag}.beta1"), opt.beta1.to_string());
            put(&format!("{tag}.beta2"), opt.beta2.to_string());
            put(&format!("{tag}.eps"), opt.eps.to_string());
            put(&format!("{tag}.second_moment"), opt.second_moment.to_string());
        }
        put("config", self.config_text.clone());
        put("config_hash", config_hash(&self.config_text));

        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        // Write to a sibling file first so an interrupted save never leaves a
        // truncated checkpoint behind.
        let tmp = path.with_extension("partial");
        safetensors::serialize_to_file(views, Some(meta), &tmp)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ctx = |e: &dyn std::fmt::Display| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ctx(&e))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| ctx(&"missing metadata"))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| ctx(&e))?;

        let get = |k: &str| -> Result<&String> {
            meta.get(k).ok_or_else(|| ctx(&format!("missing metadata key `{k}`")))
        };
        fn parse<V: std::str::FromStr>(k: &str, s: &str) -> Result<V> {
            s.parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata value `{k}` = `{s}`")))
        }
        let version: u32 = parse("format_version", get("format_version")?)?;
        if version != FORMAT_VERSION {
            return Err(ctx(&format!("unsupported format version {version}")));
        }
        let num = |k: &str| -> Result<usize> { parse(k, get(k)?) };
        let config = NetworkConfig {
            image_channels: num("net.image_channels")?,
            base_width: num("net.base_width")?,
            latent_dim: num("net.latent_dim")?,
            disc_scales: num("net.disc_scales")?,
            crop_size: num("net.crop_size")?,
            blur_encoder: parse("net.blur_encoder", get("net.blur_encoder")?)?,
        };
        let config_text = get("config")?.clone();
        if config_hash(&config_text) != *get("config_hash")? {
            return Err(ctx(&"config hash does not match stored config"));
        }

        let mut params = BTreeMap::new();
        let mut moments: BTreeMap<(String, String), BTreeMap<String, Vec<f32>>> = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(ctx(&format!("`{name}` is not f32")));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let mut parts = name.splitn(3, '.');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(tag @ ("adam_d" | "adam_g")), Some(kind @ ("m" | "v")), Some(param)) => {
                    moments
                        .entry((tag.to_string(), kind.to_string()))
                        .or_default()
                        .insert(param.to_string(), data);
                }
                _ => {
                    params.insert(name, Tensor::new(view.shape().to_vec(), data));
                }
            }
        }
        let seed: u64 = parse("master_seed", get("master_seed")?)?;
        let state = ModelState::from_parts(config, seed, params)?;
        if state.content_final_layer(Domain::Blurred) != state.content_final_layer(Domain::Sharp) {
            return Err(ctx(&"shared content layer differs between encoders"));
        }

        let mut opt = |tag: &str| -> Result<Adam> {
            let f = |k: &str| -> Result<f64> {
                let key = format!("{tag}.{k}");
                parse(&key, get(&key)?)
            };
            let mut a = Adam::new(f("beta1")?, f("beta2")?);
            a.eps = f("eps")?;
            let key = format!("{tag}.second_moment");
            a.second_moment = parse(&key, get(&key)?)?;
            let key = format!("{tag}.steps");
            let steps: u64 = parse(&key, get(&key)?)?;
            let m = moments.remove(&(tag.to_string(), "m".into())).unwrap_or_default();
            let v = moments.remove(&(tag.to_string(), "v".into())).unwrap_or_default();
            for name in m.keys().chain(v.keys()) {
                if state.param(name).is_none() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for unknown parameter `{name}`"
                    )));
                }
            }
            a.restore(steps, m, v);
            Ok(a)
        };
        let opt_d = opt("adam_d")?;
        let opt_g = opt("adam_g")?;
        Ok(Checkpoint {
            state,
            opt_d,
            opt_g,
            epoch: parse("epoch", get("epoch")?)?,
            config_text,
        })
    }
}
