//! Parallel self/cross attention layers and the serial self→cross baseline.
//!
//! A parallel layer projects both point sets once, runs self- and
//! cross-attention side by side and fuses the two messages with a two-layer
//! MLP inside a residual connection:
//!
//! ```text
//! x' = x + F_x([merge(self(x)), merge(cross(x ← y))])
//! ```
//!
//! With attention-weight sharing the y→x logits are the transpose of the
//! x→y logits, so the cross-logit product is computed once per head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, mlp, register_linear, register_mlp};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};

/// Default head count.
pub const DEFAULT_HEADS: usize = 4;

/// Which weights a parallel layer shares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sharing {
    /// One Q/K/V projection triple for both self and cross attention.
    pub qkv: bool,
    /// One head-merging projection for both messages.
    pub merge: bool,
    /// One fusion MLP for the x and y branches.
    pub ffn: bool,
    /// Cross logits `Q_y K_xᵀ` replaced by `(Q_x K_yᵀ)ᵀ`.
    pub attn_weights: bool,
}

impl Default for Sharing {
    fn default() -> Self {
        Self {
            qkv: true,
            merge: true,
            ffn: false,
            attn_weights: true,
        }
    }
}

impl Sharing {
    pub fn none() -> Self {
        Self {
            qkv: false,
            merge: false,
            ffn: false,
            attn_weights: false,
        }
    }
}

/// Names and hyperparameters of one parallel layer; the weights live in a
/// [`ParamStore`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelLayer {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub sharing: Sharing,
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config(format!("dim {dim} is not divisible by {heads} heads")));
    }
    Ok(())
}

impl ParallelLayer {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, sharing: Sharing) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            prefix: prefix.into(),
            dim,
            heads,
            sharing,
        })
    }

    fn qkv_names(&self, path: &str) -> [String; 3] {
        let base = if self.sharing.qkv {
            self.prefix.clone()
        } else {
            format!("{}.{path}", self.prefix)
        };
        ["q", "k", "v"].map(|s| format!("{base}.{s}"))
    }

    fn merge_name(&self, path: &str) -> String {
        if self.sharing.merge {
            format!("{}.merge", self.prefix)
        } else {
            format!("{}.{path}.merge", self.prefix)
        }
    }

    fn fuse_name(&self, side: &str) -> String {
        if self.sharing.ffn {
            format!("{}.fuse", self.prefix)
        } else {
            format!("{}.fuse_{side}", self.prefix)
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = self.dim;
        let paths: &[&str] = if self.sharing.qkv { &["self"] } else { &["self", "cross"] };
        for path in paths {
            for name in self.qkv_names(path) {
                register_linear(store, rng, &name, c, c, Init::FanIn)?;
            }
        }
        let paths: &[&str] = if self.sharing.merge { &["self"] } else { &["self", "cross"] };
        for path in paths {
            register_linear(store, rng, &self.merge_name(path), c, c, Init::FanIn)?;
        }
        let sides: &[&str] = if self.sharing.ffn { &["x"] } else { &["x", "y"] };
        for side in sides {
            register_mlp(store, rng, &self.fuse_name(side), &[2 * c, 2 * c, c], Init::Zeros)?;
        }
        Ok(())
    }
}

/// Per-head attention probabilities of one layer.
#[derive(Clone, Debug, Default)]
pub struct HeadMaps {
    pub self_x: Vec<Var>,
    pub self_y: Vec<Var>,
    pub cross_xy: Vec<Var>,
    pub cross_yx: Vec<Var>,
}

/// Head-averaged attention maps: `self_x` is `M×M`, `self_y` `N×N`,
/// `cross_xy` `M×N` (softmax over y) and `cross_yx` `N×M`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub self_x: Var,
    pub self_y: Var,
    pub cross_xy: Var,
    pub cross_yx: Var,
}

/// Mean of equally shaped maps.
pub fn average_heads(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::contract("no attention heads to average"))?;
    let mut acc = first;
    for &m in rest {
        acc = tape.add(acc, m)?;
    }
    if maps.len() == 1 {
        Ok(acc)
    } else {
        tape.scale(acc, 1.0 / maps.len() as f64)
    }
}

impl HeadMaps {
    pub fn average(&self, tape: &mut Tape) -> Result<AttentionMaps> {
        Ok(AttentionMaps {
            self_x: average_heads(tape, &self.self_x)?,
            self_y: average_heads(tape, &self.self_y)?,
            cross_xy: average_heads(tape, &self.cross_xy)?,
            cross_yx: average_heads(tape, &self.cross_yx)?,
        })
    }
}

/// Pre-softmax cross logits per head (unscaled `Q Kᵀ` products).
#[derive(Clone, Debug, Default)]
pub struct CrossLogits {
    pub xy: Vec<Var>,
    pub yx: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub x: Var,
    pub y: Var,
    pub heads: HeadMaps,
    pub cross_logits: CrossLogits,
}

fn split_heads(tape: &mut Tape, a: Var, heads: usize) -> Result<Vec<Var>> {
    let dh = tape.shape(a).1 / heads;
    (0..heads).map(|h| tape.slice_cols(a, h * dh, dh)).collect()
}

/// `softmax(scale · logits) · values`, returning the message and the map.
fn attend(tape: &mut Tape, logits: Var, values: Var, scale: f64) -> Result<(Var, Var)> {
    let probs = tape.softmax_rows(logits, scale)?;
    let msg = tape.matmul_order_free(probs, values)?;
    Ok((msg, probs))
}

fn check_inputs(tape: &Tape, x: Var, y: Var, dim: usize) -> Result<()> {
    let (m, cx) = tape.shape(x);
    let (n, cy) = tape.shape(y);
    if cx != dim || cy != dim {
        return Err(Error::config(format!("layer width {dim}, inputs {cx} and {cy}")));
    }
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput(format!("attention over {m} and {n} points")));
    }
    Ok(())
}

struct Projected {
    q: Vec<Var>,
    k: Vec<Var>,
    v: Vec<Var>,
}

fn project(tape: &mut Tape, store: &ParamStore, names: &[String; 3], x: Var, heads: usize) -> Result<Projected> {
    let q = linear(tape, store, &names[0], x)?;
    let k = linear(tape, store, &names[1], x)?;
    let v = linear(tape, store, &names[2], x)?;
    Ok(Projected {
        q: split_heads(tape, q, heads)?,
        k: split_heads(tape, k, heads)?,
        v: split_heads(tape, v, heads)?,
    })
}

fn self_attention(tape: &mut Tape, p: &Projected, scale: f64) -> Result<(Var, Vec<Var>)> {
    let mut msgs = Vec::with_capacity(p.q.len());
    let mut maps = Vec::with_capacity(p.q.len());
    for h in 0..p.q.len() {
        let logits = tape.matmul_nt(p.q[h], p.k[h])?;
        let (msg, map) = attend(tape, logits, p.v[h], scale)?;
        msgs.push(msg);
        maps.push(map);
    }
    Ok((tape.concat_cols(&msgs)?, maps))
}

pub fn parallel_layer(tape: &mut Tape, store: &ParamStore, layer: &ParallelLayer, x: Var, y: Var) -> Result<LayerOutput> {
    check_inputs(tape, x, y, layer.dim)?;
    let heads = layer.heads;
    let scale = 1.0 / ((layer.dim / heads) as f64).sqrt();

    let self_names = layer.qkv_names("self");
    let px = project(tape, store, &self_names, x, heads)?;
    let py = project(tape, store, &self_names, y, heads)?;
    let (self_x, self_maps_x) = self_attention(tape, &px, scale)?;
    let (self_y, self_maps_y) = self_attention(tape, &py, scale)?;

    let cross_proj;
    let (cx, cy) = if layer.sharing.qkv {
        (&px, &py)
    } else {
        let names = layer.qkv_names("cross");
        cross_proj = (
            project(tape, store, &names, x, heads)?,
            project(tape, store, &names, y, heads)?,
        );
        (&cross_proj.0, &cross_proj.1)
    };

    let mut logits = CrossLogits::default();
    let mut cross_maps = (Vec::new(), Vec::new());
    let mut msgs = (Vec::new(), Vec::new());
    for h in 0..heads {
        let l_xy = tape.matmul_nt(cx.q[h], cy.k[h])?;
        let l_yx = if layer.sharing.attn_weights {
            tape.transpose(l_xy)?
        } else {
            tape.matmul_nt(cy.q[h], cx.k[h])?
        };
        let (mx, ax) = attend(tape, l_xy, cy.v[h], scale)?;
        let (my, ay) = attend(tape, l_yx, cx.v[h], scale)?;
        logits.xy.push(l_xy);
        logits.yx.push(l_yx);
        cross_maps.0.push(ax);
        cross_maps.1.push(ay);
        msgs.0.push(mx);
        msgs.1.push(my);
    }
    let cross_x = tape.concat_cols(&msgs.0)?;
    let cross_y = tape.concat_cols(&msgs.1)?;

    let merge_self = layer.merge_name("self");
    let merge_cross = layer.merge_name("cross");
    let sx = linear(tape, store, &merge_self, self_x)?;
    let sy = linear(tape, store, &merge_self, self_y)?;
    let crx = linear(tape, store, &merge_cross, cross_x)?;
    let cry = linear(tape, store, &merge_cross, cross_y)?;

    let fx = tape.concat_cols(&[sx, crx])?;
    let fy = tape.concat_cols(&[sy, cry])?;
    let dx = mlp(tape, store, &layer.fuse_name("x"), 2, fx)?;
    let dy = mlp(tape, store, &layer.fuse_name("y"), 2, fy)?;
    Ok(LayerOutput {
        x: tape.add(x, dx)?,
        y: tape.add(y, dy)?,
        heads: HeadMaps {
            self_x: self_maps_x,
            self_y: self_maps_y,
            cross_xy: cross_maps.0,
            cross_yx: cross_maps.1,
        },
        cross_logits: logits,
    })
}

/// One message-passing layer of the serial baseline: its own projections,
/// merge and `[feature, message]` MLP, applied to both images.
#[derive(Clone, Debug, PartialEq)]
pub struct SerialLayer {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
}

impl SerialLayer {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            prefix: prefix.into(),
            dim,
            heads,
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = self.dim;
        for s in ["q", "k", "v", "merge"] {
            register_linear(store, rng, &format!("{}.{s}", self.prefix), c, c, Init::FanIn)?;
        }
        register_mlp(store, rng, &format!("{}.mlp", self.prefix), &[2 * c, 2 * c, c], Init::Zeros)
    }

    fn message(&self, tape: &mut Tape, store: &ParamStore, query: Var, source: Var) -> Result<Var> {
        let p = &self.prefix;
        let heads = self.heads;
        let scale = 1.0 / ((self.dim / heads) as f64).sqrt();
        let q = linear(tape, store, &format!("{p}.q"), query)?;
        let k = linear(tape, store, &format!("{p}.k"), source)?;
        let v = linear(tape, store, &format!("{p}.v"), source)?;
        let (q, k, v) = (
            split_heads(tape, q, heads)?,
            split_heads(tape, k, heads)?,
            split_heads(tape, v, heads)?,
        );
        let mut msgs = Vec::with_capacity(heads);
        for h in 0..heads {
            let logits = tape.matmul_nt(q[h], k[h])?;
            msgs.push(attend(tape, logits, v[h], scale)?.0);
        }
        let msg = tape.concat_cols(&msgs)?;
        linear(tape, store, &format!("{p}.merge"), msg)
    }

    fn update(&self, tape: &mut Tape, store: &ParamStore, x: Var, msg: Var) -> Result<Var> {
        let cat = tape.concat_cols(&[x, msg])?;
        let delta = mlp(tape, store, &format!("{}.mlp", self.prefix), 2, cat)?;
        tape.add(x, delta)
    }

    /// Self layer when `cross` is false, cross layer otherwise.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, y: Var, cross: bool) -> Result<(Var, Var)> {
        check_inputs(tape, x, y, self.dim)?;
        let (src_x, src_y) = if cross { (y, x) } else { (x, y) };
        let mx = self.message(tape, store, x, src_x)?;
        let my = self.message(tape, store, y, src_y)?;
        Ok((self.update(tape, store, x, mx)?, self.update(tape, store, y, my)?))
    }
}

/// A self layer followed by a cross layer.
pub fn serial_layer_pair(
    tape: &mut Tape,
    store: &ParamStore,
    self_layer: &SerialLayer,
    cross_layer: &SerialLayer,
    x: Var,
    y: Var,
) -> Result<(Var, Var)> {
    let (x1, y1) = self_layer.forward(tape, store, x, y, false)?;
    cross_layer.forward(tape, store, x1, y1, true)
}
