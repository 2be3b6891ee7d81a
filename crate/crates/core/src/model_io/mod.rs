//! Loading encoder parameters from named-tensor containers, with JSON name
//! maps describing how a checkpoint family lays out the text tower.

mod container;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::{
    Activation, Block, EncoderConfig, EncoderModel, LayerNorm, Linear, ReweightMode,
    DEFAULT_REWEIGHT_START, DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};

pub use container::{
    encode_container, write_atomic, write_container, Container, TensorEntry, TensorManifest,
};

/// Metadata key holding the encoder configuration as JSON.
pub const CONFIG_KEY: &str = "stori.config";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkvLayout {
    /// One `3d × d` matrix stacking Q, K and V.
    Packed,
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixLayout {
    /// `out × in`, applied as `x · Wᵀ`.
    OutIn,
    /// `in × out`, applied as `x · W`.
    InOut,
}

/// How one checkpoint family names and lays out the text-tower tensors.
///
/// `tensors` maps role names (`token_embedding`, `ln_1.gamma`, `q.weight`,
/// `qkv.weight`, ...) to checkpoint names; per-block names contain `{i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameMap {
    pub name: String,
    pub activation: Activation,
    pub qkv_layout: QkvLayout,
    pub linear_layout: MatrixLayout,
    pub projection_layout: MatrixLayout,
    #[serde(default)]
    pub num_heads: Option<usize>,
    #[serde(default)]
    pub head_dim: Option<usize>,
    pub tensors: BTreeMap<String, String>,
}

const BUILTIN: [(&str, &str); 4] = [
    ("hf-clip", include_str!("../../assets/name_maps/hf-clip.json")),
    ("openai-clip", include_str!("../../assets/name_maps/openai-clip.json")),
    ("openclip", include_str!("../../assets/name_maps/openclip.json")),
    ("metaclip", include_str!("../../assets/name_maps/metaclip.json")),
];

const GLOBAL_ROLES: [&str; 5] = [
    "token_embedding",
    "positional_embedding",
    "final_ln.gamma",
    "final_ln.beta",
    "text_projection",
];

const BLOCK_ROLES: [&str; 10] = [
    "ln_1.gamma",
    "ln_1.beta",
    "out.weight",
    "out.bias",
    "ln_2.gamma",
    "ln_2.beta",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

impl NameMap {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, json) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown name map {name:?}; built in: {}",
                    Self::builtin_names().join(", ")
                ))
            })?;
        Self::from_json(json)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(json).map_err(|e| Error::json("name map", e))?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    /// A built-in map name or a path to a JSON map.
    pub fn resolve(spec: &str) -> Result<Self> {
        if BUILTIN.iter().any(|(n, _)| *n == spec) {
            Self::builtin(spec)
        } else {
            Self::load(Path::new(spec))
        }
    }

    /// The first built-in map whose token embedding name occurs in `manifest`.
    pub fn detect(manifest: &TensorManifest) -> Result<Self> {
        for name in Self::builtin_names() {
            let map = Self::builtin(name)?;
            if manifest.contains(&map.tensors["token_embedding"]) {
                return Ok(map);
            }
        }
        Err(Error::InvalidConfig(
            "no built-in name map matches the checkpoint; pass one explicitly".into(),
        ))
    }

    fn attention_roles(&self) -> &'static [&'static str] {
        match self.qkv_layout {
            QkvLayout::Packed => &["qkv.weight", "qkv.bias"],
            QkvLayout::Separate => &["q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias"],
        }
    }

    fn validate(&self) -> Result<()> {
        let missing: Vec<&str> = GLOBAL_ROLES
            .iter()
            .chain(BLOCK_ROLES.iter())
            .chain(self.attention_roles())
            .copied()
            .filter(|r| !self.tensors.contains_key(*r))
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "name map {:?} lacks roles: {}",
                self.name,
                missing.join(", ")
            )));
        }
        for role in BLOCK_ROLES.iter().chain(self.attention_roles()) {
            if !self.tensors[*role].contains("{i}") {
                return Err(Error::InvalidConfig(format!(
                    "name map {:?}: per-block role {role} needs an {{i}} placeholder",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn global(&self, role: &str) -> String {
        self.tensors[role].clone()
    }

    fn block(&self, role: &str, i: usize) -> String {
        self.tensors[role].replace("{i}", &i.to_string())
    }

    fn count_blocks(&self, manifest: &TensorManifest) -> usize {
        (0..).take_while(|&i| manifest.contains(&self.block("ln_1.gamma", i))).count()
    }

    /// Every checkpoint name this map needs for `blocks` blocks.
    pub fn required_names(&self, blocks: usize) -> Vec<String> {
        let mut names: Vec<String> = GLOBAL_ROLES.iter().map(|r| self.global(r)).collect();
        for i in 0..blocks {
            for role in BLOCK_ROLES.iter().chain(self.attention_roles()) {
                names.push(self.block(role, i));
            }
        }
        names
    }
}

fn shape_err(name: &str, shape: &[usize], expected: &str) -> Error {
    Error::ShapeMismatch(format!("{name}: shape {shape:?}, expected {expected}"))
}

/// Architecture from tensor shapes, the container's stored configuration
/// and the name map. Fails with every unresolved tensor name listed.
///
/// Without a stored configuration, [`load_model`] then takes the temperature
/// from the checkpoint's logit scale when the map names one.
pub fn infer_config(manifest: &TensorManifest, map: &NameMap) -> Result<EncoderConfig> {
    let blocks = map.count_blocks(manifest);
    let missing: Vec<String> = map
        .required_names(blocks.max(1))
        .into_iter()
        .filter(|n| !manifest.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTensor(missing));
    }
    let dims2 = |role: &str, name: String| -> Result<(usize, usize)> {
        match manifest.shape(&name) {
            Some(&[a, b]) => Ok((a, b)),
            Some(other) => Err(shape_err(&name, other, &format!("a matrix for {role}"))),
            None => Err(Error::MissingTensor(vec![name])),
        }
    };
    let (vocab_size, model_dim) = dims2("token_embedding", map.global("token_embedding"))?;
    let (context_length, _) = dims2("positional_embedding", map.global("positional_embedding"))?;
    let (fc1_a, fc1_b) = dims2("fc1.weight", map.block("fc1.weight", 0))?;
    let mlp_dim = match map.linear_layout {
        MatrixLayout::OutIn => fc1_a,
        MatrixLayout::InOut => fc1_b,
    };
    let (p_a, p_b) = dims2("text_projection", map.global("text_projection"))?;
    let projection_dim = match map.projection_layout {
        MatrixLayout::OutIn => p_a,
        MatrixLayout::InOut => p_b,
    };

    let stored: Option<EncoderConfig> = manifest
        .metadata
        .get(CONFIG_KEY)
        .map(|json| serde_json::from_str(json).map_err(|e| Error::json(CONFIG_KEY, e)))
        .transpose()?;
    let num_heads = match (&stored, map.num_heads, map.head_dim) {
        (Some(c), _, _) => c.num_heads,
        (None, Some(h), _) => h,
        (None, None, Some(hd)) if hd > 0 && model_dim % hd == 0 => model_dim / hd,
        _ => {
            return Err(Error::InvalidConfig(format!(
                "cannot determine the head count for model_dim {model_dim}"
            )))
        }
    };
    let cfg = EncoderConfig {
        vocab_size,
        num_blocks: blocks,
        model_dim,
        num_heads,
        mlp_dim,
        projection_dim,
        context_length,
        activation: stored.as_ref().map_or(map.activation, |c| c.activation),
        layer_norm_eps: stored.as_ref().map_or(1e-5, |c| c.layer_norm_eps),
        reweight_start_block: stored
            .as_ref()
            .map_or(DEFAULT_REWEIGHT_START.min(blocks + 1), |c| c.reweight_start_block),
        reweight_mode: stored
            .as_ref()
            .map_or(ReweightMode::FromBlockOnward, |c| c.reweight_mode),
        temperature: stored.as_ref().map_or(DEFAULT_TEMPERATURE, |c| c.temperature),
    };
    if let Some(c) = &stored {
        if (c.num_blocks, c.model_dim, c.vocab_size) != (cfg.num_blocks, cfg.model_dim, cfg.vocab_size) {
            return Err(Error::ShapeMismatch(format!(
                "stored configuration ({} blocks, dim {}, vocab {}) disagrees with tensor shapes",
                c.num_blocks, c.model_dim, c.vocab_size
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: EncoderModel<f32>,
    pub config: EncoderConfig,
    /// Name map that resolved the tensors.
    pub layout: String,
    /// Container tensors the map did not use (image tower and the like).
    pub unused: Vec<String>,
}

struct Reader<'a> {
    container: &'a Container,
    used: BTreeSet<String>,
}

impl Reader<'_> {
    fn get(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        self.used.insert(name.to_string());
        self.container.tensor_f32(name)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f32>> {
        let (shape, v) = self.get(name)?;
        if shape != [len] {
            return Err(shape_err(name, &shape, &format!("[{len}]")));
        }
        Ok(Array1::from(v))
    }

    /// A matrix returned as `rows × cols` after undoing `layout`.
    fn matrix(&mut self, name: &str, rows: usize, cols: usize, layout: MatrixLayout) -> Result<Array2<f32>> {
        let (shape, v) = self.get(name)?;
        let stored = match layout {
            MatrixLayout::InOut => [rows, cols],
            MatrixLayout::OutIn => [cols, rows],
        };
        if shape != stored {
            return Err(shape_err(name, &shape, &format!("{stored:?}")));
        }
        let a = Array2::from_shape_vec((stored[0], stored[1]), v).expect("shape checked");
        Ok(match layout {
            MatrixLayout::InOut => a,
            MatrixLayout::OutIn => a.reversed_axes().as_standard_layout().to_owned(),
        })
    }
}

/// Load and shape-check a text tower. Unused tensors are reported and logged.
pub fn load_model(path: &Path, map: Option<&NameMap>) -> Result<LoadedModel> {
    let container = Container::open(path)?;
    load_from_container(&container, map)
}

pub fn load_from_container(container: &Container, map: Option<&NameMap>) -> Result<LoadedModel> {
    let manifest = container.manifest()?;
    if manifest.tensors.is_empty() {
        return Err(Error::EmptyModel);
    }
    let map = match map {
        Some(m) => m.clone(),
        None => NameMap::detect(&manifest)?,
    };
    let mut cfg = infer_config(&manifest, &map)?;
    let mut r = Reader {
        container,
        used: BTreeSet::new(),
    };
    let d = cfg.model_dim;
    let lin_layout = map.linear_layout;
    let token_embedding = r.matrix(&map.global("token_embedding"), cfg.vocab_size, d, MatrixLayout::InOut)?;
    let positional_embedding =
        r.matrix(&map.global("positional_embedding"), cfg.context_length, d, MatrixLayout::InOut)?;
    let text_projection = r.matrix(&map.global("text_projection"), d, cfg.projection_dim, map.projection_layout)?;
    let final_ln = LayerNorm {
        gamma: r.vector(&map.global("final_ln.gamma"), d)?,
        beta: r.vector(&map.global("final_ln.beta"), d)?,
    };
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for i in 0..cfg.num_blocks {
        let ln = |g: &str, b: &str, r: &mut Reader| -> Result<LayerNorm<f32>> {
            Ok(LayerNorm {
                gamma: r.vector(&map.block(g, i), d)?,
                beta: r.vector(&map.block(b, i), d)?,
            })
        };
        let ln_1 = ln("ln_1.gamma", "ln_1.beta", &mut r)?;
        let ln_2 = ln("ln_2.gamma", "ln_2.beta", &mut r)?;
        let linear = |role: &str, rows: usize, cols: usize, r: &mut Reader| -> Result<Linear<f32>> {
            Ok(Linear {
                weight: r.matrix(&map.block(&format!("{role}.weight"), i), rows, cols, lin_layout)?,
                bias: r.vector(&map.block(&format!("{role}.bias"), i), cols)?,
            })
        };
        let (q, k, v) = match map.qkv_layout {
            QkvLayout::Separate => (
                linear("q", d, d, &mut r)?,
                linear("k", d, d, &mut r)?,
                linear("v", d, d, &mut r)?,
            ),
            QkvLayout::Packed => {
                let w = r.matrix(&map.block("qkv.weight", i), d, 3 * d, lin_layout)?;
                let b = r.vector(&map.block("qkv.bias", i), 3 * d)?;
                let part = |j: usize| Linear {
                    weight: w.slice(s![.., j * d..(j + 1) * d]).to_owned(),
                    bias: b.slice(s![j * d..(j + 1) * d]).to_owned(),
                };
                (part(0), part(1), part(2))
            }
        };
        blocks.push(Block {
            ln_1,
            q,
            k,
            v,
            out: linear("out", d, d, &mut r)?,
            ln_2,
            fc1: linear("fc1", d, cfg.mlp_dim, &mut r)?,
            fc2: linear("fc2", cfg.mlp_dim, d, &mut r)?,
        });
    }
    if !manifest.metadata.contains_key(CONFIG_KEY) {
        if let Some(name) = map.tensors.get("logit_scale").filter(|n| manifest.contains(n)) {
            let (_, v) = r.get(name)?;
            if let [scale] = v[..] {
                let tau = (-(scale as f64)).exp();
                if tau.is_finite() && tau > 0.0 {
                    cfg.temperature = tau;
                }
            }
        }
    }
    let model = EncoderModel {
        token_embedding,
        positional_embedding,
        blocks,
        final_ln,
        text_projection,
    };
    model.check_shapes(&cfg)?;
    if !model.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    let unused: Vec<String> = manifest
        .tensors
        .keys()
        .filter(|n| !r.used.contains(*n))
        .cloned()
        .collect();
    if !unused.is_empty() {
        log::warn!(
            "{} tensors not used by the text tower (first: {})",
            unused.len(),
            unused[0]
        );
    }
    Ok(LoadedModel {
        model,
        config: cfg,
        layout: map.name.clone(),
        unused,
    })
}

/// Serialize in the `hf-clip` layout with the configuration in the header.
pub fn model_bytes(model: &EncoderModel<f32>, cfg: &EncoderConfig) -> Result<Vec<u8>> {
    if model.blocks.is_empty() || model.token_embedding.is_empty() {
        return Err(Error::EmptyModel);
    }
    cfg.validate()?;
    model.check_shapes(cfg)?;
    if !model.is_finite() {
        return Err(Error::NonFinite("model parameters".into()));
    }
    let map = NameMap::builtin("hf-clip")?;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    let mut put2 = |name: String, a: &Array2<f32>, layout: MatrixLayout| {
        let a = match layout {
            MatrixLayout::InOut => a.to_owned(),
            MatrixLayout::OutIn => a.t().as_standard_layout().to_owned(),
        };
        tensors.push((name, a.shape().to_vec(), a.iter().copied().collect()));
    };
    put2(map.global("token_embedding"), &model.token_embedding, MatrixLayout::InOut);
    put2(map.global("positional_embedding"), &model.positional_embedding, MatrixLayout::InOut);
    put2(map.global("text_projection"), &model.text_projection, map.projection_layout);
    for (i, b) in model.blocks.iter().enumerate() {
        for (role, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("out", &b.out), ("fc1", &b.fc1), ("fc2", &b.fc2)] {
            put2(map.block(&format!("{role}.weight"), i), &l.weight, map.linear_layout);
        }
    }
    let mut put1 = |name: String, a: &Array1<f32>| tensors.push((name, vec![a.len()], a.to_vec()));
    put1(map.global("final_ln.gamma"), &model.final_ln.gamma);
    put1(map.global("final_ln.beta"), &model.final_ln.beta);
    for (i, b) in model.blocks.iter().enumerate() {
        for (role, l) in [("ln_1", &b.ln_1), ("ln_2", &b.ln_2)] {
            put1(map.block(&format!("{role}.gamma"), i), &l.gamma);
            put1(map.block(&format!("{role}.beta"), i), &l.beta);
        }
        for (role, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("out", &b.out), ("fc1", &b.fc1), ("fc2", &b.fc2)] {
            put1(map.block(&format!("{role}.bias"), i), &l.bias);
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert(
        CONFIG_KEY.to_string(),
        serde_json::to_string(cfg).map_err(|e| Error::json(CONFIG_KEY, e))?,
    );
    encode_container(&tensors, &metadata)
}

pub fn save_model(model: &EncoderModel<f32>, cfg: &EncoderConfig, path: &Path) -> Result<()> {
    write_atomic(path, &model_bytes(model, cfg)?)
}
