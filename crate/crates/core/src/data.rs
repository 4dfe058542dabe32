//! Synthetic image pairs related by a random homography.
//!
//! Keypoints of image X are sampled uniformly; each carries a random unit
//! latent descriptor. A fraction of X points are distractors with no partner.
//! The rest are projected through `H`; those landing inside image Y become
//! ground-truth matches with descriptors `normalize(latent + σ·noise)`. Y then
//! receives its own distractors. Y keeps the projection order, with
//! distractors appended.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Writer};
use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::matcher::Correspondences;
use crate::tensor::Tensor;

pub const DATASET_KIND: &str = "paraformer-dataset";
const MAX_RETRIES: usize = 1000;

/// Planar homography with `h[2][2] = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl Homography {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    fn normalized(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if s.abs() < 1e-12 || !s.is_finite() {
            return Err(Error::Numeric("homography with vanishing h33".into()));
        }
        Ok(Self(m.map(|row| row.map(|v| v / s))))
    }

    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::normalized(mat_mul(&self.0, &other.0))
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= 1e-6 {
            return Err(Error::Numeric(format!("homography determinant {d:e} is singular")));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Self::normalized(adj.map(|row| row.map(|v| v / d)))
    }

    /// Maps a point; `None` when it goes to infinity or behind the camera.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w <= 1e-9 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    /// True when the image rectangle maps to a convex, consistently oriented
    /// quadrilateral.
    pub fn preserves_convexity(&self, image_size: (f32, f32)) -> bool {
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let mut q = [(0.0, 0.0); 4];
        for (k, &(x, y)) in corners.iter().enumerate() {
            match self.apply(x, y) {
                Some(p) => q[k] = p,
                None => return false,
            }
        }
        let cross = |k: usize| {
            let (a, b, c) = (q[k], q[(k + 1) % 4], q[(k + 2) % 4]);
            (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0)
        };
        let signs: Vec<f64> = (0..4).map(cross).collect();
        signs.iter().all(|&s| s > 0.0) || signs.iter().all(|&s| s < 0.0)
    }
}

/// Sampling ranges of [`random_homography`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomographyBounds {
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Fraction of the image size.
    pub max_translation: f64,
    /// Bound on `h[2][0]` and `h[2][1]`.
    pub max_perspective: f64,
}

impl Default for HomographyBounds {
    fn default() -> Self {
        Self {
            max_rotation_deg: 25.0,
            min_scale: 0.8,
            max_scale: 1.2,
            max_translation: 0.1,
            max_perspective: 1e-4,
        }
    }
}

impl HomographyBounds {
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            max_translation: 0.0,
            max_perspective: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_rotation_deg >= 0.0
            && self.max_rotation_deg < 90.0
            && self.min_scale > 0.0
            && self.min_scale <= self.max_scale
            && self.max_translation >= 0.0
            && self.max_perspective >= 0.0
            && [self.max_rotation_deg, self.max_scale, self.max_translation, self.max_perspective]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid homography bounds {self:?}")))
        }
    }
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

/// Rotation and scale about the image center, then translation and
/// perspective jitter; degenerate draws are resampled.
pub fn random_homography(rng: &mut ChaCha8Rng, bounds: &HomographyBounds, image_size: (f32, f32)) -> Result<Homography> {
    bounds.validate()?;
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    for _ in 0..MAX_RETRIES {
        let angle = symmetric(rng, bounds.max_rotation_deg).to_radians();
        let scale = if bounds.min_scale == bounds.max_scale {
            bounds.min_scale
        } else {
            rng.random_range(bounds.min_scale..=bounds.max_scale)
        };
        let tx = symmetric(rng, bounds.max_translation) * w;
        let ty = symmetric(rng, bounds.max_translation) * h;
        let px = symmetric(rng, bounds.max_perspective);
        let py = symmetric(rng, bounds.max_perspective);
        let (c, s) = (angle.cos() * scale, angle.sin() * scale);
        let affine = [
            [c, -s, cx + tx - c * cx + s * cy],
            [s, c, cy + ty - s * cx - c * cy],
            [0.0, 0.0, 1.0],
        ];
        // Perspective about the image center keeps the center fixed.
        let to_center = [[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]];
        let persp = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]];
        let from_center = [[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]];
        let p = mat_mul(&from_center, &mat_mul(&persp, &to_center));
        let Ok(hm) = Homography::normalized(mat_mul(&p, &affine)) else {
            continue;
        };
        if hm.det().abs() > 1e-6 && hm.preserves_convexity(image_size) {
            return Ok(hm);
        }
    }
    Err(Error::Numeric("could not sample a non-degenerate homography".into()))
}

/// Generator settings for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub keypoints: usize,
    pub descriptor_dim: usize,
    pub image_size: (f32, f32),
    /// Standard deviation of the per-coordinate descriptor noise.
    pub noise: f64,
    /// Distractors per image as a fraction of `keypoints`.
    pub distractor_frac: f64,
    /// Reprojection tolerance of a ground-truth match, in pixels.
    pub eps_gt: f64,
    pub bounds: HomographyBounds,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            keypoints: 512,
            descriptor_dim: 256,
            image_size: (640.0, 480.0),
            noise: 0.1,
            distractor_frac: 0.25,
            eps_gt: 3.0,
            bounds: HomographyBounds::default(),
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints < 4 {
            return Err(Error::config(format!("need at least 4 keypoints, got {}", self.keypoints)));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::config("descriptor_dim must be positive"));
        }
        let (w, h) = self.image_size;
        if !(w >= 1.0 && h >= 1.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::config(format!("image size {w}x{h}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise {} must be a finite non-negative value", self.noise)));
        }
        if !(0.0..1.0).contains(&self.distractor_frac) {
            return Err(Error::config(format!("distractor_frac {} outside [0, 1)", self.distractor_frac)));
        }
        if !(self.eps_gt > 0.0) {
            return Err(Error::config("eps_gt must be positive"));
        }
        if self.keypoints - self.distractors() < 4 {
            return Err(Error::config("fewer than 4 keypoints remain after distractors"));
        }
        self.bounds.validate()
    }

    pub fn distractors(&self) -> usize {
        (self.keypoints as f64 * self.distractor_frac).round() as usize
    }
}

/// Two keypoint sets with ground-truth labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub x: KeypointSet,
    pub y: KeypointSet,
    pub h: Homography,
    pub gt: Correspondences,
    pub eps_gt: f64,
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(u) = normalize(&v) {
            return u;
        }
    }
}

/// Unit vector in f32 whose norm is 1 within f32 rounding; `None` for ~0.
fn normalize(v: &[f64]) -> Option<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.iter().map(|x| (x / n) as f32).collect())
}

fn random_point(rng: &mut ChaCha8Rng, image_size: (f32, f32)) -> [f32; 3] {
    [
        rng.random_range(0.0..image_size.0),
        rng.random_range(0.0..image_size.1),
        rng.random_range(0.0..=1.0),
    ]
}

fn in_frame(p: (f64, f64), image_size: (f32, f32)) -> Option<(f32, f32)> {
    let (x, y) = (p.0 as f32, p.1 as f32);
    (x >= 0.0 && x < image_size.0 && y >= 0.0 && y < image_size.1).then_some((x, y))
}

fn keypoint_set(points: &[[f32; 3]], descs: &[Vec<f32>], image_size: (f32, f32)) -> Result<KeypointSet> {
    let positions = Tensor::from_rows(points)?;
    let descriptors = Tensor::from_rows(descs)?;
    KeypointSet::new(positions, descriptors, image_size)
}

pub fn make_pair(rng: &mut ChaCha8Rng, cfg: &PairConfig) -> Result<PairSample> {
    cfg.validate()?;
    let n_distract = cfg.distractors();
    for _ in 0..MAX_RETRIES {
        let h = random_homography(rng, &cfg.bounds, cfg.image_size)?;
        let mut xs = Vec::with_capacity(cfg.keypoints);
        let mut xd = Vec::with_capacity(cfg.keypoints);
        let mut ys = Vec::new();
        let mut yd = Vec::new();
        let mut gt = Correspondences::default();
        for i in 0..cfg.keypoints {
            let p = random_point(rng, cfg.image_size);
            let latent = random_unit(rng, cfg.descriptor_dim);
            xs.push(p);
            let projected = if i < cfg.keypoints - n_distract {
                h.apply(p[0] as f64, p[1] as f64).and_then(|q| in_frame(q, cfg.image_size))
            } else {
                None
            };
            match projected {
                Some((qx, qy)) if cfg.noise == 0.0 => {
                    gt.matches.push((i, ys.len()));
                    ys.push([qx, qy, p[2]]);
                    yd.push(latent.clone());
                }
                Some((qx, qy)) => {
                    let noisy: Vec<f64> = latent
                        .iter()
                        .map(|&v| {
                            let z: f64 = StandardNormal.sample(rng);
                            v as f64 + cfg.noise * z
                        })
                        .collect();
                    let d = normalize(&noisy).unwrap_or_else(|| latent.clone());
                    gt.matches.push((i, ys.len()));
                    ys.push([qx, qy, p[2]]);
                    yd.push(d);
                }
                None => gt.unmatched_x.push(i),
            }
            xd.push(latent);
        }
        if gt.matches.len() < 4 {
            continue;
        }
        for _ in 0..n_distract {
            gt.unmatched_y.push(ys.len());
            ys.push(random_point(rng, cfg.image_size));
            yd.push(random_unit(rng, cfg.descriptor_dim));
        }
        return Ok(PairSample {
            x: keypoint_set(&xs, &xd, cfg.image_size)?,
            y: keypoint_set(&ys, &yd, cfg.image_size)?,
            h,
            gt,
            eps_gt: cfg.eps_gt,
        });
    }
    Err(Error::contract("could not sample a pair with at least 4 correspondences"))
}

/// Seed of pair `index` within a dataset generated from `seed`.
pub fn pair_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Pair `index` of the dataset defined by `(cfg, seed)`; independent of any
/// other pair, so pairs may be generated in any order or in parallel.
pub fn make_indexed_pair(cfg: &PairConfig, seed: u64, index: u64) -> Result<PairSample> {
    make_pair(&mut ChaCha8Rng::seed_from_u64(pair_seed(seed, index)), cfg)
}

/// Appends uniformly placed keypoints with random unit descriptors and score
/// 0 until `kp` has `target` points. Returns the padded set and the indices
/// of the added points.
pub fn pad_keypoints(kp: &KeypointSet, target: usize, rng: &mut ChaCha8Rng) -> Result<(KeypointSet, Vec<usize>)> {
    let n = kp.len();
    if target < n {
        return Err(Error::contract(format!("cannot pad {n} keypoints down to {target}")));
    }
    if target == n {
        return Ok((kp.clone(), Vec::new()));
    }
    let size = kp.image_size();
    let mut pos: Vec<[f32; 3]> = (0..n).map(|i| kp.positions().row(i).try_into().expect("3 columns")).collect();
    let mut desc: Vec<Vec<f32>> = (0..n).map(|i| kp.descriptors().row(i).to_vec()).collect();
    for _ in n..target {
        let mut p = random_point(rng, size);
        p[2] = 0.0;
        pos.push(p);
        desc.push(random_unit(rng, kp.dim()));
    }
    Ok((keypoint_set(&pos, &desc, size)?, (n..target).collect()))
}

impl PairSample {
    /// Pads both images to `target` points and labels the padding unmatched.
    pub fn padded(&self, target: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (x, px) = pad_keypoints(&self.x, target.max(self.x.len()), rng)?;
        let (y, py) = pad_keypoints(&self.y, target.max(self.y.len()), rng)?;
        let mut gt = self.gt.clone();
        gt.unmatched_x.extend(px);
        gt.unmatched_y.extend(py);
        Ok(Self {
            x,
            y,
            h: self.h,
            gt,
            eps_gt: self.eps_gt,
        })
    }

    /// Reprojection error of `(i, j)`: distance from `H·x_i` to `y_j`.
    pub fn reprojection_error(&self, i: usize, j: usize) -> f64 {
        let (xi, yi) = self.x.xy(i);
        let (xj, yj) = self.y.xy(j);
        match self.h.apply(xi as f64, yi as f64) {
            Some((u, v)) => ((u - xj as f64).powi(2) + (v - yj as f64).powi(2)).sqrt(),
            None => f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: PairConfig,
    pub seed: u64,
    pub pairs: usize,
    /// Hash of the run manifest that produced the file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

/// A generated split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub pairs: Vec<PairSample>,
}

fn flat_pairs(v: &[(usize, usize)]) -> Vec<u32> {
    v.iter().flat_map(|&(i, j)| [i as u32, j as u32]).collect()
}

fn indices(v: &[usize]) -> Vec<u32> {
    v.iter().map(|&i| i as u32).collect()
}

impl Dataset {
    pub fn generate(cfg: &PairConfig, seed: u64, pairs: usize) -> Result<Self> {
        let pairs_vec = (0..pairs as u64)
            .map(|k| make_indexed_pair(cfg, seed, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            meta: DatasetMeta {
                config: cfg.clone(),
                seed,
                pairs,
                manifest: None,
            },
            pairs: pairs_vec,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_writer(&self) -> Result<Writer> {
        let meta = serde_json::to_value(&self.meta).map_err(|e| Error::contract(e.to_string()))?;
        let mut w = Writer::new(DATASET_KIND, meta);
        for (k, p) in self.pairs.iter().enumerate() {
            for (side, kp) in [("x", &p.x), ("y", &p.y)] {
                w.f32(&format!("{k}.{side}.positions"), kp.positions().shape(), kp.positions().data())?;
                w.f32(&format!("{k}.{side}.descriptors"), kp.descriptors().shape(), kp.descriptors().data())?;
            }
            let hm: Vec<f64> = p.h.0.iter().flatten().copied().collect();
            w.f64(&format!("{k}.h"), &[3, 3], &hm)?;
            w.u32(&format!("{k}.gt.matches"), &[p.gt.matches.len(), 2], &flat_pairs(&p.gt.matches))?;
            w.u32(&format!("{k}.gt.unmatched_x"), &[p.gt.unmatched_x.len()], &indices(&p.gt.unmatched_x))?;
            w.u32(&format!("{k}.gt.unmatched_y"), &[p.gt.unmatched_y.len()], &indices(&p.gt.unmatched_y))?;
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_writer()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        c.expect_kind(DATASET_KIND)?;
        let meta: DatasetMeta = c.meta_as()?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let tensor = |name: String| -> Result<Tensor> {
            let (shape, data) = c.f32(&name)?;
            Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))
        };
        let mut pairs = Vec::with_capacity(meta.pairs);
        for k in 0..meta.pairs {
            let mut sets = Vec::with_capacity(2);
            for side in ["x", "y"] {
                let kp = KeypointSet::new(
                    tensor(format!("{k}.{side}.positions"))?,
                    tensor(format!("{k}.{side}.descriptors"))?,
                    meta.config.image_size,
                )
                .map_err(|e| bad(format!("pair {k} image {side}: {e}")))?;
                sets.push(kp);
            }
            let (_, hv) = c.f64(&format!("{k}.h"))?;
            let hm: [[f64; 3]; 3] = [
                hv[0..3].try_into().map_err(|_| bad(format!("pair {k}: bad homography")))?,
                hv[3..6].try_into().map_err(|_| bad(format!("pair {k}: bad homography")))?,
                hv[6..9].try_into().map_err(|_| bad(format!("pair {k}: bad homography")))?,
            ];
            let (_, m) = c.u32(&format!("{k}.gt.matches"))?;
            let (_, ux) = c.u32(&format!("{k}.gt.unmatched_x"))?;
            let (_, uy) = c.u32(&format!("{k}.gt.unmatched_y"))?;
            let gt = Correspondences {
                matches: m.chunks_exact(2).map(|p| (p[0] as usize, p[1] as usize)).collect(),
                unmatched_x: ux.iter().map(|&i| i as usize).collect(),
                unmatched_y: uy.iter().map(|&i| i as usize).collect(),
            };
            let y = sets.pop().expect("two sets");
            let x = sets.pop().expect("two sets");
            gt.validate(x.len(), y.len()).map_err(|e| bad(format!("pair {k}: {e}")))?;
            pairs.push(PairSample {
                x,
                y,
                h: Homography(hm),
                gt,
                eps_gt: meta.config.eps_gt,
            });
        }
        Ok(Self { meta, pairs })
    }
}
