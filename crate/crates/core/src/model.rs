//! End-to-end matcher: position encoding, an attention body (flat parallel
//! stack, encoder–decoder, or serial baseline), a final projection and the
//! Sinkhorn head. Owns configuration, parameter naming and weight files.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{parallel_layer, serial_layer_pair, HeadMaps, ParallelLayer, SerialLayer, Sharing, DEFAULT_HEADS};
use crate::container::{sha256_hex, Container, Writer};
use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::matcher::{self, extract_matches, matching_loss, score_matrix, Assignment, Correspondences, MatchSet};
use crate::nn::{linear, register_linear};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::unet::{GraphUNet, StageConfig, UNetTrace};
use crate::wave_pe::{mlp_encode, register_mlp_pe, register_wave_pe, wave_encode};

pub const WEIGHTS_KIND: &str = "paraformer-weights";
const DUSTBIN: &str = "bin_score";
const FINAL_PROJ: &str = "final_proj";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Paraformer,
    ParaformerU,
    SerialBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Wave,
    Mlp,
    None,
}

/// Architecture and inference settings. `layers` counts parallel layers, or
/// self/cross pairs for the serial baseline; the encoder–decoder takes its
/// layout from `unet` instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub descriptor_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub pe: PositionEncoding,
    pub sharing: Sharing,
    pub unet: StageConfig,
    /// Diagonal of the identity-initialized final projection; `None` uses
    /// `√descriptor_dim`, which turns the initial scores into cosine
    /// similarities.
    pub score_gain: Option<f32>,
    pub sinkhorn_iterations: usize,
    pub match_threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paraformer()
    }
}

/// Fields that determine parameter names and shapes.
#[derive(Serialize)]
struct Architecture<'a> {
    variant: Variant,
    descriptor_dim: usize,
    layers: Option<usize>,
    heads: usize,
    pe: PositionEncoding,
    sharing: Option<&'a Sharing>,
    unet: Option<&'a StageConfig>,
}

impl ModelConfig {
    pub fn paraformer() -> Self {
        Self {
            variant: Variant::Paraformer,
            descriptor_dim: 256,
            layers: 9,
            heads: DEFAULT_HEADS,
            pe: PositionEncoding::Wave,
            sharing: Sharing::default(),
            unet: StageConfig::default(),
            score_gain: None,
            sinkhorn_iterations: matcher::DEFAULT_ITERATIONS,
            match_threshold: matcher::DEFAULT_THRESHOLD,
            seed: 0,
        }
    }

    pub fn paraformer_u() -> Self {
        Self {
            variant: Variant::ParaformerU,
            layers: StageConfig::default().total_layers(),
            ..Self::paraformer()
        }
    }

    /// Nine self + nine cross layers with the MLP position encoder.
    pub fn serial_baseline() -> Self {
        Self {
            variant: Variant::SerialBaseline,
            pe: PositionEncoding::Mlp,
            sharing: Sharing::none(),
            ..Self::paraformer()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim == 0 {
            return Err(Error::config("descriptor_dim must be positive"));
        }
        if self.heads == 0 || self.descriptor_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "descriptor_dim {} is not divisible by {} heads",
                self.descriptor_dim, self.heads
            )));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(Error::config("sinkhorn_iterations must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::config(format!("match_threshold {} outside [0, 1]", self.match_threshold)));
        }
        if let Some(g) = self.score_gain {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::config(format!("score_gain {g} must be positive")));
            }
        }
        match self.variant {
            Variant::ParaformerU => self.unet.validate(self.descriptor_dim, self.heads),
            _ if self.layers == 0 => Err(Error::config("layers must be at least 1")),
            _ => Ok(()),
        }
    }

    /// Number of attention layers in the body.
    pub fn attention_layers(&self) -> usize {
        match self.variant {
            Variant::Paraformer => self.layers,
            Variant::ParaformerU => self.unet.total_layers(),
            Variant::SerialBaseline => 2 * self.layers,
        }
    }

    /// Smallest keypoint count per image the model accepts.
    pub fn min_points(&self) -> usize {
        match self.variant {
            Variant::ParaformerU => self.unet.min_points(),
            _ => 1,
        }
    }

    /// SHA-256 of the fields that fix parameter names and shapes.
    pub fn architecture_hash(&self) -> String {
        let u = self.variant == Variant::ParaformerU;
        let arch = Architecture {
            variant: self.variant,
            descriptor_dim: self.descriptor_dim,
            layers: (!u).then_some(self.layers),
            heads: self.heads,
            pe: self.pe,
            sharing: (self.variant != Variant::SerialBaseline).then_some(&self.sharing),
            unet: u.then_some(&self.unet),
        };
        sha256_hex(&serde_json::to_vec(&arch).expect("architecture serializes"))
    }
}

#[derive(Clone, Debug)]
enum Body {
    Parallel(Vec<ParallelLayer>),
    UNet(GraphUNet),
    Serial(Vec<(SerialLayer, SerialLayer)>),
}

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    body: Body,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub x: Var,
    pub y: Var,
    pub scores: Var,
    pub alpha: Var,
    pub log_p: Var,
    pub layer_maps: Vec<HeadMaps>,
    pub unet: Option<UNetTrace>,
}

/// Head-averaged maps of one layer, copied off the tape.
#[derive(Clone, Debug)]
pub struct LayerMaps {
    pub self_x: Tensor,
    pub self_y: Tensor,
    pub cross_xy: Tensor,
    pub cross_yx: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// Point count entering each stage (one entry for flat models).
    pub points_x: Vec<usize>,
    pub points_y: Vec<usize>,
    pub matmul_flops: u64,
    pub attention: Option<Vec<LayerMaps>>,
}

#[derive(Clone, Debug)]
pub struct Output {
    pub assignment: Assignment,
    pub matches: MatchSet,
    pub diagnostics: Diagnostics,
}

impl Model {
    /// Deterministic construction from `cfg` and `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = cfg.descriptor_dim;
        match cfg.pe {
            PositionEncoding::Wave => register_wave_pe(&mut params, &mut rng, "pe", c)?,
            PositionEncoding::Mlp => register_mlp_pe(&mut params, &mut rng, "pe", c)?,
            PositionEncoding::None => {}
        }
        let body = match cfg.variant {
            Variant::Paraformer => {
                let layers = (0..cfg.layers)
                    .map(|l| ParallelLayer::new(format!("layers.{l}"), c, cfg.heads, cfg.sharing))
                    .collect::<Result<Vec<_>>>()?;
                for layer in &layers {
                    layer.register(&mut params, &mut rng)?;
                }
                Body::Parallel(layers)
            }
            Variant::ParaformerU => {
                let unet = GraphUNet::new(cfg.unet.clone(), c, cfg.heads, cfg.sharing, cfg.seed)?;
                unet.register(&mut params, &mut rng)?;
                Body::UNet(unet)
            }
            Variant::SerialBaseline => {
                let pairs = (0..cfg.layers)
                    .map(|l| {
                        Ok((
                            SerialLayer::new(format!("layers.{l}.self"), c, cfg.heads)?,
                            SerialLayer::new(format!("layers.{l}.cross"), c, cfg.heads)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (s, x) in &pairs {
                    s.register(&mut params, &mut rng)?;
                    x.register(&mut params, &mut rng)?;
                }
                Body::Serial(pairs)
            }
        };
        let gain = cfg.score_gain.unwrap_or((c as f32).sqrt());
        register_linear(&mut params, &mut rng, FINAL_PROJ, c, c, Init::ScaledIdentity(gain))?;
        params.init(&mut rng, DUSTBIN, vec![1, 1], Init::Constant(matcher::DEFAULT_DUSTBIN))?;
        Ok(Self {
            config: cfg.clone(),
            params,
            body,
        })
    }

    /// Same architecture with `params` swapped in; names and shapes must match.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !same {
            return Err(Error::Checkpoint("parameter layout differs from the model".into()));
        }
        Ok(Self {
            config: self.config.clone(),
            params,
            body: self.body.clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_inputs(&self, kx: &KeypointSet, ky: &KeypointSet) -> Result<()> {
        let c = self.config.descriptor_dim;
        if kx.dim() != c || ky.dim() != c {
            return Err(Error::config(format!(
                "model expects {c}-dim descriptors, got {} and {}",
                kx.dim(),
                ky.dim()
            )));
        }
        let min = self.config.min_points();
        if kx.len() < min || ky.len() < min {
            return Err(Error::contract(format!(
                "{:?} needs at least {min} keypoints per image, got {} and {}",
                self.config.variant,
                kx.len(),
                ky.len()
            )));
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, kp: &KeypointSet) -> Result<Var> {
        match self.config.pe {
            PositionEncoding::Wave => Ok(wave_encode(tape, &self.params, "pe", kp)?.output),
            PositionEncoding::Mlp => mlp_encode(tape, &self.params, "pe", kp),
            PositionEncoding::None => tape.constant(kp.descriptors()),
        }
    }

    /// Records the whole pipeline on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, kx: &KeypointSet, ky: &KeypointSet) -> Result<TapeForward> {
        self.check_inputs(kx, ky)?;
        let mut x = self.encode(tape, kx)?;
        let mut y = self.encode(tape, ky)?;
        let mut layer_maps = Vec::new();
        let mut unet = None;
        match &self.body {
            Body::Parallel(layers) => {
                for layer in layers {
                    let out = parallel_layer(tape, &self.params, layer, x, y)?;
                    x = out.x;
                    y = out.y;
                    layer_maps.push(out.heads);
                }
            }
            Body::UNet(net) => {
                let (ox, oy, trace) = net.forward(tape, &self.params, x, y)?;
                x = ox;
                y = oy;
                unet = Some(trace);
            }
            Body::Serial(pairs) => {
                for (s, c) in pairs {
                    (x, y) = serial_layer_pair(tape, &self.params, s, c, x, y)?;
                }
            }
        }
        let px = linear(tape, &self.params, FINAL_PROJ, x)?;
        let py = linear(tape, &self.params, FINAL_PROJ, y)?;
        let scores = score_matrix(tape, px, py)?;
        let alpha = tape.param(DUSTBIN, self.params.get(DUSTBIN)?)?;
        let log_p = tape.sinkhorn(scores, alpha, self.config.sinkhorn_iterations)?;
        Ok(TapeForward {
            x: px,
            y: py,
            scores,
            alpha,
            log_p,
            layer_maps,
            unet,
        })
    }

    /// Inference with the configured match threshold.
    pub fn forward(&self, kx: &KeypointSet, ky: &KeypointSet) -> Result<Output> {
        self.forward_with(kx, ky, false)
    }

    /// Inference; `retain_maps` copies head-averaged attention maps of the
    /// flat parallel stack into the diagnostics.
    pub fn forward_with(&self, kx: &KeypointSet, ky: &KeypointSet, retain_maps: bool) -> Result<Output> {
        let mut tape = Tape::new();
        let f = self.forward_on_tape(&mut tape, kx, ky)?;
        let assignment = Assignment::from_tape(&tape, f.log_p, tape.scalar(f.alpha), self.config.sinkhorn_iterations);
        let matches = extract_matches(&assignment, self.config.match_threshold);
        let (points_x, points_y) = match &f.unet {
            Some(t) => (t.points_x.clone(), t.points_y.clone()),
            None => (vec![kx.len()], vec![ky.len()]),
        };
        let attention = if retain_maps {
            let mut out = Vec::with_capacity(f.layer_maps.len());
            for heads in &f.layer_maps {
                let avg = heads.average(&mut tape)?;
                out.push(LayerMaps {
                    self_x: tape.to_tensor(avg.self_x),
                    self_y: tape.to_tensor(avg.self_y),
                    cross_xy: tape.to_tensor(avg.cross_xy),
                    cross_yx: tape.to_tensor(avg.cross_yx),
                });
            }
            Some(out)
        } else {
            None
        };
        Ok(Output {
            assignment,
            matches,
            diagnostics: Diagnostics {
                points_x,
                points_y,
                matmul_flops: tape.matmul_flops(),
                attention,
            },
        })
    }

    /// Forward pass plus the matching loss against `gt`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        kx: &KeypointSet,
        ky: &KeypointSet,
        gt: &Correspondences,
    ) -> Result<(Var, TapeForward)> {
        gt.validate(kx.len(), ky.len())?;
        let f = self.forward_on_tape(tape, kx, ky)?;
        let loss = matching_loss(tape, f.log_p, gt)?;
        Ok((loss, f))
    }

    /// Serializes the weights, config and architecture hash.
    pub fn weights_writer(&self, kind: &str, extra: serde_json::Value) -> Result<Writer> {
        let meta = serde_json::json!({
            "config": self.config,
            "config_hash": self.config.architecture_hash(),
            "param_count": self.param_count(),
            "extra": extra,
        });
        let mut w = Writer::new(kind, meta);
        for (name, t) in self.params.iter() {
            w.f32(name, t.shape(), t.data())?;
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.weights_writer(WEIGHTS_KIND, serde_json::Value::Null)?.write(path)
    }

    /// SHA-256 of the serialized weights.
    pub fn weights_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.weights_writer(WEIGHTS_KIND, serde_json::Value::Null)?.to_bytes()?))
    }

    /// Loads weights for `cfg`, rejecting files built for another
    /// architecture or whose arrays do not match the expected layout.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let c = Container::read(path)?;
        c.expect_kind(WEIGHTS_KIND)?;
        Self::from_container(&c, cfg)
    }

    /// The config stored in a weights or checkpoint file.
    pub fn stored_config(c: &Container) -> Result<ModelConfig> {
        let cfg = c
            .meta()
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("file carries no model config".into()))?;
        serde_json::from_value(cfg).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))
    }

    pub fn from_container(c: &Container, cfg: &ModelConfig) -> Result<Self> {
        let want = cfg.architecture_hash();
        let got = c.meta().get("config_hash").and_then(|v| v.as_str()).unwrap_or_default();
        if got != want {
            return Err(Error::Checkpoint(format!(
                "architecture hash {got:.12} does not match config {want:.12}"
            )));
        }
        let mut model = Self::build(cfg, cfg.seed)?;
        let expected: Vec<String> = model.params.names().map(str::to_string).collect();
        let stored = c.entries().iter().filter(|e| !e.name.starts_with("optim.")).count();
        if stored != expected.len() {
            return Err(Error::Checkpoint(format!(
                "file holds {stored} tensors, config expects {}",
                expected.len()
            )));
        }
        for name in expected {
            let (shape, data) = c.f32(&name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let slot = model.params.get_mut(&name)?;
            if shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(model)
    }
}
