//! The per-layer neural field: positions on the concentric spheres in,
//! `(r, g, b, opacity)` out.
//!
//! Inputs are `(inverse radius, θ, φ)` normalized to `[0, 1]` and expanded
//! with sines and cosines at octave frequencies. Hidden layers use ReLU; all
//! four outputs pass through a sigmoid, so the fourth channel is read
//! directly as the opacity of that sphere.

use std::fmt;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ModelFormatError, Result};
use crate::nn::{Adam, Mlp, Real};
use crate::raymarch::{composite_backward, composite_sorted, Sample, SampleBatch};
use crate::sphgeom::{ConcentricGrid, Ray, SphericalPoint};

pub const MODEL_MAGIC: [u8; 4] = *b"FNRF";
pub const MODEL_VERSION: u32 = 1;
pub const OUTPUT_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Fovea,
    Mid,
    Far,
}

impl LayerTag {
    pub const ALL: [LayerTag; 3] = [LayerTag::Fovea, LayerTag::Mid, LayerTag::Far];

    pub fn to_byte(self) -> u8 {
        match self {
            LayerTag::Fovea => 0,
            LayerTag::Mid => 1,
            LayerTag::Far => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(LayerTag::Fovea),
            1 => Some(LayerTag::Mid),
            2 => Some(LayerTag::Far),
            _ => None,
        }
    }

    /// Field of view of the images a network for this layer is trained on.
    /// Mid and far layers share the 45° periphery network.
    pub fn training_fov_deg(self) -> f64 {
        match self {
            LayerTag::Fovea => 20.0,
            LayerTag::Mid | LayerTag::Far => 45.0,
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerTag::Fovea => "fovea",
            LayerTag::Mid => "mid",
            LayerTag::Far => "far",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub bands: usize,
    pub include_raw: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            bands: 10,
            include_raw: true,
        }
    }
}

pub const INPUT_COORDS: usize = 3;

impl EncodingConfig {
    pub fn width(&self) -> usize {
        INPUT_COORDS * (2 * self.bands + usize::from(self.include_raw))
    }

    /// Normalized `(inverse radius, θ/π, (φ+π)/2π)`, each in `[0, 1]` for
    /// radii inside `bounds = (r_near, r_far)`.
    pub fn normalize(bounds: (f64, f64), p: &SphericalPoint) -> [f64; 3] {
        let (near, far) = bounds;
        let inv = 1.0 / p.radius;
        let (inv_far, inv_near) = (1.0 / far, 1.0 / near);
        let u0 = if inv_near > inv_far {
            (inv - inv_far) / (inv_near - inv_far)
        } else {
            0.0
        };
        [
            u0,
            p.theta / std::f64::consts::PI,
            (p.phi + std::f64::consts::PI) / (2.0 * std::f64::consts::PI),
        ]
    }

    /// Layout: for each coordinate `u`, `[sin(2⁰πu), cos(2⁰πu), …,
    /// sin(2^(L−1)πu), cos(2^(L−1)πu)]`, then the three raw coordinates when
    /// `include_raw` is set.
    pub fn encode_into(&self, bounds: (f64, f64), p: &SphericalPoint, out: &mut [f64]) {
        let u = Self::normalize(bounds, p);
        let mut k = 0;
        for &uc in &u {
            let (mut s, mut c) = (std::f64::consts::PI * uc).sin_cos();
            for _ in 0..self.bands {
                out[k] = s;
                out[k + 1] = c;
                k += 2;
                // double-angle recurrence
                let s2 = 2.0 * s * c;
                c = (c - s) * (c + s);
                s = s2;
            }
        }
        if self.include_raw {
            out[k..k + 3].copy_from_slice(&u);
        }
    }

    /// Encodes one point. Fails for non-finite or non-positive radius input.
    pub fn encode(&self, bounds: (f64, f64), p: &SphericalPoint) -> Result<Vec<f64>> {
        if !(p.radius.is_finite() && p.theta.is_finite() && p.phi.is_finite()) {
            return Err(Error::NonFinite);
        }
        if p.radius <= 0.0 {
            return Err(Error::Degenerate("non-positive radius"));
        }
        let mut out = vec![0.0; self.width()];
        self.encode_into(bounds, p, &mut out);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Number of hidden ReLU layers.
    pub n_layers: usize,
    /// Width of each hidden layer.
    pub n_channels: usize,
}

impl MlpConfig {
    /// Trainable parameter count for a given encoding width, biases included.
    pub fn n_params(&self, enc_width: usize) -> usize {
        self.n_weights(enc_width) + self.n_layers * self.n_channels + OUTPUT_DIM
    }

    /// Weight-matrix entries only.
    pub fn n_weights(&self, enc_width: usize) -> usize {
        enc_width * self.n_channels
            + (self.n_layers - 1) * self.n_channels * self.n_channels
            + self.n_channels * OUTPUT_DIM
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub color: [f64; 3],
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralField<T = f32> {
    tag: LayerTag,
    grid: ConcentricGrid,
    encoding: EncodingConfig,
    mlp: MlpConfig,
    net: Mlp<T>,
    trained: bool,
}

impl<T: Real> NeuralField<T> {
    /// Randomly initialized field.
    pub fn new(
        tag: LayerTag,
        grid: ConcentricGrid,
        encoding: EncodingConfig,
        mlp: MlpConfig,
        seed: u64,
    ) -> Result<Self> {
        if mlp.n_layers == 0 || mlp.n_channels == 0 {
            return Err(Error::Config(
                "network needs at least one hidden layer and channel".into(),
            ));
        }
        if encoding.bands == 0 {
            return Err(Error::Config("encoding needs at least one band".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new_random(encoding.width(), mlp.n_layers, mlp.n_channels, OUTPUT_DIM, &mut rng);
        Ok(Self {
            tag,
            grid,
            encoding,
            mlp,
            net,
            trained: false,
        })
    }

    /// Wraps existing weights; shapes are checked against the configs.
    pub fn from_parts(
        tag: LayerTag,
        grid: ConcentricGrid,
        encoding: EncodingConfig,
        mlp: MlpConfig,
        net: Mlp<T>,
    ) -> Result<Self> {
        check_shapes(&encoding, &mlp, &net).map_err(Error::Model)?;
        Ok(Self {
            tag,
            grid,
            encoding,
            mlp,
            net,
            trained: false,
        })
    }

    pub fn tag(&self) -> LayerTag {
        self.tag
    }

    pub fn grid(&self) -> &ConcentricGrid {
        &self.grid
    }

    pub fn encoding(&self) -> &EncodingConfig {
        &self.encoding
    }

    pub fn mlp_config(&self) -> &MlpConfig {
        &self.mlp
    }

    pub fn net(&self) -> &Mlp<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn cast<U: Real>(&self) -> NeuralField<U> {
        NeuralField {
            tag: self.tag,
            grid: self.grid.clone(),
            encoding: self.encoding,
            mlp: self.mlp,
            net: self.net.cast(),
            trained: self.trained,
        }
    }

    /// Evaluates the field at points lying on the grid's spheres.
    pub fn forward(&self, points: &[SphericalPoint]) -> Result<Vec<FieldSample>> {
        if points.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let width = self.encoding.width();
        let bounds = (self.grid.r_near(), self.grid.r_far());
        let mut features = Vec::with_capacity(points.len() * width);
        let mut buf = vec![0.0; width];
        for p in points {
            if !(p.radius.is_finite() && p.theta.is_finite() && p.phi.is_finite()) {
                return Err(Error::NonFinite);
            }
            let k = self.grid.nearest_radius_index(p.radius);
            let r = self.grid.radii()[k];
            if (p.radius - r).abs() > 1e-6 * r {
                return Err(Error::OutOfDomain(format!(
                    "radius {} is not a sphere of the grid",
                    p.radius
                )));
            }
            self.encoding.encode_into(bounds, p, &mut buf);
            features.extend(buf.iter().map(|&v| T::from_f64(v)));
        }
        let out = self.net.forward(&features, points.len());
        Ok(out
            .chunks_exact(OUTPUT_DIM)
            .map(|o| FieldSample {
                color: [o[0].to_f64(), o[1].to_f64(), o[2].to_f64()],
                density: o[3].to_f64(),
            })
            .collect())
    }
}

/// Rays with target colours, all taken from images of one field of view.
#[derive(Clone, Debug, Default)]
pub struct RayDataset {
    pub fov_deg: f64,
    pub rays: Vec<Ray>,
    pub targets: Vec<[f32; 3]>,
}

impl RayDataset {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn extend(&mut self, rays: impl IntoIterator<Item = Ray>, targets: impl IntoIterator<Item = [f32; 3]>) {
        self.rays.extend(rays);
        self.targets.extend(targets);
        assert_eq!(self.rays.len(), self.targets.len());
    }
}

/// Loss value and parameter gradients for one batch of rays.
pub struct LossAndGrad<T> {
    pub loss: f64,
    pub grads: Mlp<T>,
}

/// Mean squared RGB error between composited ray colours and targets, with
/// gradients flowing through the compositing weights into the network.
pub fn loss_and_gradients<T: Real>(
    field: &NeuralField<T>,
    rays: &[Ray],
    targets: &[[f64; 3]],
    background: [f64; 3],
) -> Result<LossAndGrad<T>> {
    if rays.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if rays.len() != targets.len() {
        return Err(Error::Config("ray and target counts differ".into()));
    }
    let mut grads = field.net.zeros_like();
    let loss = accumulate_batch(field, rays, |i| targets[i], background, &mut grads);
    Ok(LossAndGrad { loss, grads })
}

fn accumulate_batch<T: Real>(
    field: &NeuralField<T>,
    rays: &[Ray],
    target: impl Fn(usize) -> [f64; 3],
    background: [f64; 3],
    grads: &mut Mlp<T>,
) -> f64 {
    let bounds = (field.grid.r_near(), field.grid.r_far());
    let batch = SampleBatch::build(field, rays, bounds);
    let rows = batch.rows();
    let norm = 1.0 / (3.0 * rays.len() as f64);
    let cache = (rows > 0).then(|| field.net.forward_cached(&batch.features, rows));
    let pred = cache.as_ref().map(|c| c.output()).unwrap_or(&[]);
    let mut d_out = vec![T::ZERO; rows * OUTPUT_DIM];
    let mut loss = 0.0;
    let mut samples = Vec::new();
    let mut d_col = Vec::new();
    let mut d_alpha = Vec::new();
    for i in 0..rays.len() {
        let range = batch.offsets[i]..batch.offsets[i + 1];
        samples.clear();
        for row in range.clone() {
            let p = &pred[row * OUTPUT_DIM..(row + 1) * OUTPUT_DIM];
            samples.push(Sample {
                t: batch.t[row],
                color: [p[0].to_f64(), p[1].to_f64(), p[2].to_f64()],
                alpha: p[3].to_f64(),
            });
        }
        let c = composite_sorted(&samples, background).color;
        let tgt = target(i);
        let mut dc = [0.0; 3];
        for k in 0..3 {
            let r = c[k] - tgt[k];
            loss += r * r * norm;
            dc[k] = 2.0 * r * norm;
        }
        d_col.resize(samples.len(), [0.0; 3]);
        d_alpha.resize(samples.len(), 0.0);
        composite_backward(&samples, background, dc, &mut d_col, &mut d_alpha);
        for (j, row) in range.enumerate() {
            let d = &mut d_out[row * OUTPUT_DIM..(row + 1) * OUTPUT_DIM];
            d[0] = T::from_f64(d_col[j][0]);
            d[1] = T::from_f64(d_col[j][1]);
            d[2] = T::from_f64(d_col[j][2]);
            d[3] = T::from_f64(d_alpha[j]);
        }
    }
    if let Some(cache) = cache {
        field.net.backward(&batch.features, &cache, &d_out, grads);
    }
    loss
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate at the end of training as a fraction of the initial
    /// rate; decay is exponential in the step count. 1.0 disables decay.
    pub final_lr_fraction: f64,
    pub batch_rays: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps per epoch (the epoch ends early).
    pub max_steps_per_epoch: Option<usize>,
    pub background: [f64; 3],
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 5e-4,
            final_lr_fraction: 1.0,
            batch_rays: 4096,
            seed: 0,
            max_steps_per_epoch: None,
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
    pub learning_rate: f64,
}

/// Trains `field` in place with minibatch Adam and returns the per-epoch
/// mean loss. `on_epoch` receives a checkpoint after every epoch.
pub fn train(
    field: &mut NeuralField<f32>,
    data: &RayDataset,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochReport, &NeuralField<f32>),
) -> Result<Vec<f64>> {
    let expected = field.tag.training_fov_deg();
    if (data.fov_deg - expected).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "dataset rendered at {}° but a {} field trains on {}° views",
            data.fov_deg, field.tag, expected
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if schedule.batch_rays == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = {
        let full = data.len().div_ceil(schedule.batch_rays);
        schedule.max_steps_per_epoch.map_or(full, |m| m.min(full))
    };
    let total_steps = (steps_per_epoch * schedule.epochs).max(1);
    let decay = schedule.final_lr_fraction.max(1e-12).powf(1.0 / total_steps as f64);
    let mut adam = Adam::new(&field.net);
    let mut grads = field.net.zeros_like();
    let mut curve = Vec::with_capacity(schedule.epochs);
    let mut lr = schedule.learning_rate;
    let mut batch_rays = Vec::with_capacity(schedule.batch_rays);
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(schedule.batch_rays).take(steps_per_epoch) {
            batch_rays.clear();
            batch_rays.extend(chunk.iter().map(|&i| data.rays[i]));
            grads.params_mut().for_each(|g| *g = 0.0);
            let loss = accumulate_batch(
                field,
                &batch_rays,
                |i| {
                    let t = data.targets[chunk[i]];
                    [t[0] as f64, t[1] as f64, t[2] as f64]
                },
                schedule.background,
                &mut grads,
            );
            adam.step(&mut field.net, &grads, lr);
            lr *= decay;
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let mean_loss = sum / count.max(1) as f64;
        curve.push(mean_loss);
        field.trained = true;
        let report = EpochReport {
            epoch,
            mean_loss,
            steps: adam.steps(),
            learning_rate: lr,
        };
        info!("epoch {epoch}: loss {mean_loss:.6e} lr {lr:.3e}");
        on_epoch(&report, field);
        if epoch >= 10 {
            let window = &curve[epoch - 10..=epoch];
            if window.last() > window.first() {
                warn!(
                    "training loss rose over the last 10 epochs ({:.4e} -> {:.4e})",
                    window[0], window[10]
                );
            }
        }
    }
    Ok(curve)
}

fn check_shapes<T>(
    encoding: &EncodingConfig,
    mlp: &MlpConfig,
    net: &Mlp<T>,
) -> std::result::Result<(), ModelFormatError> {
    if net.layers.len() != mlp.n_layers + 1 {
        return Err(ModelFormatError::Shape(format!(
            "{} layers for {} hidden",
            net.layers.len(),
            mlp.n_layers
        )));
    }
    let mut fan_in = encoding.width();
    for (i, l) in net.layers.iter().enumerate() {
        let out = if i == mlp.n_layers { OUTPUT_DIM } else { mlp.n_channels };
        if l.in_dim != fan_in || l.out_dim != out || l.weight.len() != fan_in * out || l.bias.len() != out {
            return Err(ModelFormatError::Shape(format!(
                "layer {i} is {}x{}, expected {fan_in}x{out}",
                l.in_dim, l.out_dim
            )));
        }
        fan_in = out;
    }
    Ok(())
}

/// Size in bytes of the fixed part of a model file for `n` spheres.
pub fn header_len(n_spheres: usize) -> usize {
    4 + 4 + 1 + 4 + 8 + 8 + 8 * n_spheres + 4 + 1 + 4 + 4
}

impl NeuralField<f32> {
    /// Serializes to the `FNRF` model format (all values little-endian):
    /// magic, u32 version, u8 layer tag, u32 sphere count, f64 r_near,
    /// f64 r_far, f64 radii, u32 bands, u8 include_raw, u32 hidden layers,
    /// u32 channels, then per layer the `in × out` f32 weights row-major
    /// followed by the f32 biases.
    pub fn save(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(header_len(self.grid.n_spheres()) + 4 * self.net.n_params());
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(self.tag.to_byte());
        out.extend_from_slice(&(self.grid.n_spheres() as u32).to_le_bytes());
        out.extend_from_slice(&self.grid.r_near().to_le_bytes());
        out.extend_from_slice(&self.grid.r_far().to_le_bytes());
        for r in self.grid.radii() {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out.extend_from_slice(&(self.encoding.bands as u32).to_le_bytes());
        out.push(u8::from(self.encoding.include_raw));
        out.extend_from_slice(&(self.mlp.n_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.mlp.n_channels as u32).to_le_bytes());
        for l in &self.net.layers {
            for w in l.weight.iter().chain(&l.bias) {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    /// Parses a model written by [`NeuralField::save`]. Loaded fields count
    /// as trained.
    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MODEL_MAGIC {
            return Err(ModelFormatError::BadMagic(magic).into());
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(ModelFormatError::Version(version).into());
        }
        let tag_byte = r.u8()?;
        let tag = LayerTag::from_byte(tag_byte)
            .ok_or_else(|| ModelFormatError::Shape(format!("unknown layer tag {tag_byte}")))?;
        let n = r.u32()? as usize;
        let r_near = r.f64()?;
        let r_far = r.f64()?;
        let radii = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let grid = ConcentricGrid::new(radii, r_near, r_far).map_err(|e| ModelFormatError::Shape(e.to_string()))?;
        let bands = r.u32()? as usize;
        let include_raw = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(ModelFormatError::Shape(format!("include_raw byte {b}")).into()),
        };
        let n_layers = r.u32()? as usize;
        let n_channels = r.u32()? as usize;
        if bands == 0 || n_layers == 0 || n_channels == 0 {
            return Err(ModelFormatError::Shape("zero-sized network".into()).into());
        }
        let encoding = EncodingConfig { bands, include_raw };
        let mlp = MlpConfig { n_layers, n_channels };
        let expected = mlp.n_params(encoding.width());
        let remaining = bytes.len() - r.pos;
        if remaining < 4 * expected {
            return Err(ModelFormatError::Truncated {
                offset: r.pos,
                needed: 4 * expected,
            }
            .into());
        }
        let mut layers = Vec::with_capacity(n_layers + 1);
        let mut fan_in = encoding.width();
        for i in 0..=n_layers {
            let out_dim = if i == n_layers { OUTPUT_DIM } else { n_channels };
            let weight = r.f32s(fan_in * out_dim)?;
            let bias = r.f32s(out_dim)?;
            layers.push(crate::nn::Dense {
                in_dim: fan_in,
                out_dim,
                weight,
                bias,
            });
            fan_in = out_dim;
        }
        if r.pos != bytes.len() {
            return Err(ModelFormatError::TrailingBytes(bytes.len() - r.pos).into());
        }
        let mut field = Self::from_parts(tag, grid, encoding, mlp, Mlp { layers })?;
        field.trained = true;
        Ok(field)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ModelFormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelFormatError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, ModelFormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, ModelFormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, ModelFormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, ModelFormatError> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;
    use crate::nn::Dense;

    fn small_grid() -> ConcentricGrid {
        ConcentricGrid::uniform(2, 1.0, 2.0).unwrap()
    }

    #[test]
    fn encoding_width() {
        let cfg = EncodingConfig::default();
        assert_eq!(cfg.width(), 63);
        let cfg = EncodingConfig {
            bands: 4,
            include_raw: false,
        };
        assert_eq!(cfg.width(), 24);
    }

    #[test]
    fn zero_coordinates_give_unit_cosines() {
        // inverse radius at r_far, θ = 0, φ = −π all normalize to 0
        let cfg = EncodingConfig {
            bands: 5,
            include_raw: false,
        };
        let p = SphericalPoint {
            radius: 2.0,
            theta: 0.0,
            phi: -std::f64::consts::PI,
        };
        let f = cfg.encode((1.0, 2.0), &p).unwrap();
        for pair in f.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn single_band_hand_values() {
        // radius 4/3 over [1, 2]: inverse 0.75 sits halfway between 0.5 and 1
        let cfg = EncodingConfig {
            bands: 1,
            include_raw: true,
        };
        let p = SphericalPoint {
            radius: 4.0 / 3.0,
            theta: 0.0,
            phi: -std::f64::consts::PI,
        };
        let f = cfg.encode((1.0, 2.0), &p).unwrap();
        let want = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.5, 0.0, 0.0];
        for (a, b) in f.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{f:?}");
        }
    }

    #[test]
    fn recurrence_matches_direct_evaluation() {
        let cfg = EncodingConfig::default();
        let p = SphericalPoint {
            radius: 1.7,
            theta: 1.1,
            phi: 0.4,
        };
        let f = cfg.encode((1.0, 3.0), &p).unwrap();
        let u = EncodingConfig::normalize((1.0, 3.0), &p);
        for (c, &uc) in u.iter().enumerate() {
            for j in 0..cfg.bands {
                let a = (2f64.powi(j as i32) * std::f64::consts::PI * uc).sin_cos();
                let k = c * 2 * cfg.bands + 2 * j;
                assert!((f[k] - a.0).abs() < 1e-11);
                assert!((f[k + 1] - a.1).abs() < 1e-11);
            }
        }
        assert!(f.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn encoding_rejects_non_finite() {
        let p = SphericalPoint {
            radius: f64::NAN,
            theta: 0.0,
            phi: 0.0,
        };
        assert!(matches!(
            EncodingConfig::default().encode((1.0, 2.0), &p),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut f: NeuralField<f32> = NeuralField::new(
            LayerTag::Fovea,
            small_grid(),
            EncodingConfig::default(),
            MlpConfig {
                n_layers: 2,
                n_channels: 8,
            },
            1,
        )
        .unwrap();
        let last = f.net_mut().layers.last_mut().unwrap();
        last.weight.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|w| *w = 0.0);
        let pts = [
            SphericalPoint {
                radius: 1.0,
                theta: 0.3,
                phi: 0.1,
            },
            SphericalPoint {
                radius: 2.0,
                theta: 2.3,
                phi: -3.0,
            },
        ];
        for s in f.forward(&pts).unwrap() {
            assert_eq!(s.color, [0.5; 3]);
            assert_eq!(s.density, 0.5);
        }
    }

    #[test]
    fn hand_set_two_wide_network() {
        let encoding = EncodingConfig {
            bands: 1,
            include_raw: false,
        };
        let mlp = MlpConfig {
            n_layers: 1,
            n_channels: 2,
        };
        // features at r_far, θ=0, φ=−π: [0,1, 0,1, 0,1]
        let mut w0 = vec![0.0; 6 * 2];
        w0[1 * 2] = 1.0; // cos feature of coord 0 -> hidden 0
        w0[3 * 2 + 1] = -2.0; // cos feature of coord 1 -> hidden 1
        let hidden = Dense {
            in_dim: 6,
            out_dim: 2,
            weight: w0,
            bias: vec![0.5, 0.5],
        };
        // hidden = relu([1.5, -1.5]) = [1.5, 0]
        let out = Dense {
            in_dim: 2,
            out_dim: 4,
            weight: vec![1.0, -1.0, 0.0, 2.0, 3.0, 3.0, 3.0, 3.0],
            bias: vec![0.0, 0.0, 0.25, -1.0],
        };
        let field: NeuralField<f64> = NeuralField::from_parts(
            LayerTag::Fovea,
            small_grid(),
            encoding,
            mlp,
            Mlp {
                layers: vec![hidden, out],
            },
        )
        .unwrap();
        let p = SphericalPoint {
            radius: 2.0,
            theta: 0.0,
            phi: -std::f64::consts::PI,
        };
        let s = field.forward(&[p]).unwrap()[0];
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((s.color[0] - sig(1.5)).abs() < 1e-15);
        assert!((s.color[1] - sig(-1.5)).abs() < 1e-15);
        assert!((s.color[2] - sig(0.25)).abs() < 1e-15);
        assert!((s.density - sig(2.0)).abs() < 1e-15);
    }

    #[test]
    fn off_grid_radius_rejected() {
        let f: NeuralField<f32> = NeuralField::new(
            LayerTag::Mid,
            small_grid(),
            EncodingConfig::default(),
            MlpConfig {
                n_layers: 1,
                n_channels: 4,
            },
            0,
        )
        .unwrap();
        let p = SphericalPoint {
            radius: 1.5,
            theta: 1.0,
            phi: 0.0,
        };
        assert!(matches!(f.forward(&[p]), Err(Error::OutOfDomain(_))));
        assert!(matches!(f.forward(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn batch_equals_single_evaluation() {
        let f: NeuralField<f32> = NeuralField::new(
            LayerTag::Fovea,
            small_grid(),
            EncodingConfig::default(),
            MlpConfig {
                n_layers: 3,
                n_channels: 16,
            },
            5,
        )
        .unwrap();
        let pts: Vec<SphericalPoint> = (0..9)
            .map(|i| SphericalPoint {
                radius: if i % 2 == 0 { 1.0 } else { 2.0 },
                theta: 0.3 * i as f64,
                phi: -2.0 + 0.4 * i as f64,
            })
            .collect();
        let batch = f.forward(&pts).unwrap();
        for (p, b) in pts.iter().zip(&batch) {
            let single = f.forward(std::slice::from_ref(p)).unwrap()[0];
            assert_eq!(&single, b);
        }
        let same = f.forward(&[pts[3], pts[3]]).unwrap();
        assert_eq!(same[0], same[1]);
    }

    #[test]
    fn matching_prediction_gives_zero_loss() {
        let mut f: NeuralField<f64> = NeuralField::new(
            LayerTag::Fovea,
            small_grid(),
            EncodingConfig {
                bands: 2,
                include_raw: true,
            },
            MlpConfig {
                n_layers: 2,
                n_channels: 8,
            },
            2,
        )
        .unwrap();
        // constant output: zero weights, fixed bias
        let last = f.net_mut().layers.last_mut().unwrap();
        last.weight.iter_mut().for_each(|w| *w = 0.0);
        last.bias = vec![0.3, -0.2, 1.0, 0.0];
        let rays: Vec<Ray> = (0..4)
            .map(|i| Ray::new(Vec3::ZERO, Vec3::new(1.0, 0.1 * i as f64, 0.2)).unwrap())
            .collect();
        let bg = [0.0; 3];
        // two spheres at opacity 0.5 each: c = 0.75·σ(bias)
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let target = [0.75 * sig(0.3), 0.75 * sig(-0.2), 0.75 * sig(1.0)];
        let targets = vec![target; rays.len()];
        let lg = loss_and_gradients(&f, &rays, &targets, bg).unwrap();
        assert!(lg.loss < 1e-30);
        assert!(lg.grads.params().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn doubling_residuals_quadruples_loss() {
        let f: NeuralField<f64> = NeuralField::new(
            LayerTag::Fovea,
            small_grid(),
            EncodingConfig {
                bands: 2,
                include_raw: false,
            },
            MlpConfig {
                n_layers: 1,
                n_channels: 4,
            },
            9,
        )
        .unwrap();
        let rays: Vec<Ray> = (0..3)
            .map(|i| Ray::new(Vec3::new(0.1, 0.0, 0.0), Vec3::new(1.0, -0.2 * i as f64, 0.1)).unwrap())
            .collect();
        let pred: Vec<[f64; 3]> = {
            let out = crate::raymarch::march_rays(&f, &rays, &Default::default());
            out.color
                .iter()
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                .collect()
        };
        let t1: Vec<[f64; 3]> = pred.iter().map(|p| [p[0] - 0.1, p[1] + 0.05, p[2] - 0.02]).collect();
        let t2: Vec<[f64; 3]> = pred.iter().map(|p| [p[0] - 0.2, p[1] + 0.1, p[2] - 0.04]).collect();
        let l1 = loss_and_gradients(&f, &rays, &t1, [0.0; 3]).unwrap().loss;
        let l2 = loss_and_gradients(&f, &rays, &t2, [0.0; 3]).unwrap().loss;
        assert!((l2 / l1 - 4.0).abs() < 1e-5, "{l1} {l2}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let f: NeuralField<f64> = NeuralField::new(
            LayerTag::Fovea,
            small_grid(),
            EncodingConfig::default(),
            MlpConfig {
                n_layers: 1,
                n_channels: 4,
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            loss_and_gradients(&f, &[], &[], [0.0; 3]),
            Err(Error::EmptyBatch)
        ));
    }

    fn field32() -> NeuralField<f32> {
        NeuralField::new(
            LayerTag::Far,
            ConcentricGrid::uniform(4, 0.5, 3.0).unwrap(),
            EncodingConfig {
                bands: 3,
                include_raw: true,
            },
            MlpConfig {
                n_layers: 2,
                n_channels: 6,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let f = field32();
        let bytes = f.save();
        assert_eq!(bytes.len(), header_len(4) + 4 * f.net().n_params());
        let g = NeuralField::load(&bytes).unwrap();
        assert_eq!(g.tag(), f.tag());
        assert_eq!(g.grid(), f.grid());
        for (a, b) in f.net().params().zip(g.net().params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(g.save(), bytes);
    }

    #[test]
    fn load_errors_are_distinct() {
        let bytes = field32().save();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            NeuralField::load(&bad),
            Err(Error::Model(ModelFormatError::BadMagic(_)))
        ));
        assert!(matches!(
            NeuralField::load(&bytes[..bytes.len() - 3]),
            Err(Error::Model(ModelFormatError::Truncated { .. }))
        ));
        assert!(matches!(
            NeuralField::load(&bytes[..10]),
            Err(Error::Model(ModelFormatError::Truncated { .. }))
        ));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(
            NeuralField::load(&ver),
            Err(Error::Model(ModelFormatError::Version(9)))
        ));
        let mut shape = bytes.clone();
        // bump the channel count so the payload no longer matches
        let off = header_len(4) - 4;
        shape[off] = 7;
        assert!(matches!(
            NeuralField::load(&shape),
            Err(Error::Model(ModelFormatError::Truncated { .. }))
                | Err(Error::Model(ModelFormatError::TrailingBytes(_)))
        ));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(
            NeuralField::load(&extra),
            Err(Error::Model(ModelFormatError::TrailingBytes(4)))
        ));
    }

    #[test]
    fn foveal_model_parameter_count() {
        let mlp = MlpConfig {
            n_layers: 4,
            n_channels: 128,
        };
        let width = EncodingConfig::default().width();
        assert_eq!(mlp.n_weights(width), 57_728);
        assert_eq!(mlp.n_params(width), 58_244);
    }
}
