//! Convolutional autoencoder over binary myocardium masks: six stride-2
//! 3x3 convolution layers to a d-dimensional latent code and a mirrored
//! transposed-convolution decoder, with hand-derived gradients and Adam
//! training. Everything is f64 and deterministic per seed.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::stack::BinaryMask;
use crate::synth::split_seed;
use crate::{Error, Result};

/// Negative-side slope of the leaky rectifier used between layers.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Probability clamp for the reconstruction cross-entropy.
const BCE_EPS: f64 = 1e-7;
/// Channel widths through the encoder, input image included.
const ENC_CHANNELS: [usize; 7] = [1, 8, 16, 32, 32, 32, 32];

/// A latent code produced by [`AeModel::encode`]; length is the model's `d`.
pub type LatentVec = Vec<f64>;

/// Optimizer and loop settings for [`train_autoencoder`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Parameter(format!("bad learning rate {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return Err(Error::Parameter(format!("bad adam_epsilon {}", self.adam_epsilon)));
        }
        Ok(())
    }
}

/// Decoder channel widths, final probability map included.
fn dec_channels() -> [usize; 7] {
    let mut c = ENC_CHANNELS;
    c.reverse();
    c
}

/// The autoencoder: parameter tensors stored flat in declaration order
/// (encoder convs, encoder dense, decoder dense, decoder transposed convs;
/// weights before biases within each layer).
#[derive(Clone, Debug, PartialEq)]
pub struct AeModel {
    input_size: usize,
    d: usize,
    tensors: Vec<Vec<f64>>,
}

/// Per-tensor gradients, parallel to the model's tensor list.
#[derive(Clone, Debug)]
pub struct AeGrads {
    pub(crate) tensors: Vec<Vec<f64>>,
}

impl AeGrads {
    /// The gradient tensors, in the model's declaration order.
    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }
}

/// First and second moment accumulators for [`adam_step`].
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &AeModel) -> AdamState {
        let zeros: Vec<Vec<f64>> = model.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// Tensor lengths for a given geometry, in declaration order.
fn tensor_layout(input_size: usize, d: usize) -> Vec<usize> {
    let flat = ENC_CHANNELS[6] * (input_size >> 6) * (input_size >> 6);
    let mut layout = Vec::new();
    for l in 0..6 {
        layout.push(ENC_CHANNELS[l + 1] * ENC_CHANNELS[l] * 9);
        layout.push(ENC_CHANNELS[l + 1]);
    }
    layout.push(d * flat); // encoder dense weight [d][flat]
    layout.push(d);
    layout.push(flat * d); // decoder dense weight [flat][d]
    layout.push(flat);
    let dec = dec_channels();
    for l in 0..6 {
        layout.push(dec[l] * dec[l + 1] * 9); // tconv weight [cin][cout][3][3]
        layout.push(dec[l + 1]);
    }
    layout
}

// ---- layer primitives ------------------------------------------------

/// 3x3 convolution, stride 2, zero padding 1: `n` by `n` input to `n/2`.
fn conv_fwd(x: &[f64], cin: usize, n: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let m = n / 2;
    let mut y = vec![0.0; cout * m * m];
    for co in 0..cout {
        for oy in 0..m {
            for ox in 0..m {
                let mut acc = b[co];
                for ci in 0..cin {
                    let xb = ci * n * n;
                    let wb = (co * cin + ci) * 9;
                    for ky in 0..3usize {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= n as isize {
                            continue;
                        }
                        let row = xb + iy as usize * n;
                        for kx in 0..3usize {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= n as isize {
                                continue;
                            }
                            acc += x[row + ix as usize] * w[wb + ky * 3 + kx];
                        }
                    }
                }
                y[(co * m + oy) * m + ox] = acc;
            }
        }
    }
    y
}

/// Gradients of [`conv_fwd`] w.r.t. input, weights and bias.
fn conv_bwd(
    x: &[f64],
    cin: usize,
    n: usize,
    w: &[f64],
    cout: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = n / 2;
    let mut dx = vec![0.0; cin * n * n];
    let mut dw = vec![0.0; cout * cin * 9];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        for oy in 0..m {
            for ox in 0..m {
                let g = dy[(co * m + oy) * m + ox];
                db[co] += g;
                for ci in 0..cin {
                    let xb = ci * n * n;
                    let wb = (co * cin + ci) * 9;
                    for ky in 0..3usize {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= n as isize {
                            continue;
                        }
                        let row = xb + iy as usize * n;
                        for kx in 0..3usize {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= n as isize {
                                continue;
                            }
                            dw[wb + ky * 3 + kx] += x[row + ix as usize] * g;
                            dx[row + ix as usize] += w[wb + ky * 3 + kx] * g;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// 3x3 transposed convolution, stride 2, padding 1, output padding 1:
/// exactly doubles the spatial size. Weight layout `[cin][cout][3][3]`.
fn tconv_fwd(x: &[f64], cin: usize, n: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let m = 2 * n;
    let mut y = vec![0.0; cout * m * m];
    for co in 0..cout {
        let yb = co * m * m;
        for v in &mut y[yb..yb + m * m] {
            *v = b[co];
        }
    }
    for ci in 0..cin {
        let xb = ci * n * n;
        for iy in 0..n {
            for ix in 0..n {
                let v = x[xb + iy * n + ix];
                for co in 0..cout {
                    let wb = (ci * cout + co) * 9;
                    let yb = co * m * m;
                    for ky in 0..3usize {
                        let oy = (iy * 2 + ky) as isize - 1;
                        if oy < 0 || oy >= m as isize {
                            continue;
                        }
                        let row = yb + oy as usize * m;
                        for kx in 0..3usize {
                            let ox = (ix * 2 + kx) as isize - 1;
                            if ox < 0 || ox >= m as isize {
                                continue;
                            }
                            y[row + ox as usize] += v * w[wb + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`tconv_fwd`] w.r.t. input, weights and bias.
fn tconv_bwd(
    x: &[f64],
    cin: usize,
    n: usize,
    w: &[f64],
    cout: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = 2 * n;
    let mut dx = vec![0.0; cin * n * n];
    let mut dw = vec![0.0; cin * cout * 9];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let yb = co * m * m;
        for i in 0..m * m {
            db[co] += dy[yb + i];
        }
    }
    for ci in 0..cin {
        let xb = ci * n * n;
        for iy in 0..n {
            for ix in 0..n {
                let xv = x[xb + iy * n + ix];
                let mut acc = 0.0;
                for co in 0..cout {
                    let wb = (ci * cout + co) * 9;
                    let yb = co * m * m;
                    for ky in 0..3usize {
                        let oy = (iy * 2 + ky) as isize - 1;
                        if oy < 0 || oy >= m as isize {
                            continue;
                        }
                        let row = yb + oy as usize * m;
                        for kx in 0..3usize {
                            let ox = (ix * 2 + kx) as isize - 1;
                            if ox < 0 || ox >= m as isize {
                                continue;
                            }
                            let g = dy[row + ox as usize];
                            acc += w[wb + ky * 3 + kx] * g;
                            dw[wb + ky * 3 + kx] += xv * g;
                        }
                    }
                }
                dx[xb + iy * n + ix] = acc;
            }
        }
    }
    (dx, dw, db)
}

fn dense_fwd(x: &[f64], w: &[f64], b: &[f64], nout: usize) -> Vec<f64> {
    let nin = x.len();
    let mut y = Vec::with_capacity(nout);
    for o in 0..nout {
        let mut acc = b[o];
        let row = o * nin;
        for i in 0..nin {
            acc += w[row + i] * x[i];
        }
        y.push(acc);
    }
    y
}

fn dense_bwd(x: &[f64], w: &[f64], nout: usize, dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let nin = x.len();
    let mut dx = vec![0.0; nin];
    let mut dw = vec![0.0; nout * nin];
    for o in 0..nout {
        let g = dy[o];
        let row = o * nin;
        for i in 0..nin {
            dw[row + i] = x[i] * g;
            dx[i] += w[row + i] * g;
        }
    }
    (dx, dw, dy.to_vec())
}

fn leaky(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
}

fn leaky_bwd(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy)
        .map(|(&p, &g)| if p > 0.0 { g } else { LEAKY_SLOPE * g })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mask_to_f64(mask: &BinaryMask) -> Vec<f64> {
    mask.pixels().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Everything the backward pass needs from one sample's forward pass.
struct Trace {
    enc_in: Vec<Vec<f64>>,  // a_0 .. a_6 (post-activation inputs per conv)
    enc_pre: Vec<Vec<f64>>, // conv outputs before the rectifier
    dec_dense_pre: Vec<f64>,
    dec_in: Vec<Vec<f64>>,  // t_0 .. t_6 inputs per transposed conv
    dec_pre: Vec<Vec<f64>>, // tconv outputs before the rectifier (layers 0..5)
    probs: Vec<f64>,
}

impl AeModel {
    /// Seeded He-scaled initialization; biases start at zero.
    pub fn init(input_size: usize, d: usize, seed: u64) -> Result<AeModel> {
        if input_size == 0 || input_size % 64 != 0 {
            return Err(Error::Parameter(format!(
                "input_size must be a positive multiple of 64, got {input_size}"
            )));
        }
        if d == 0 {
            return Err(Error::Parameter("latent dimension must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let layout = tensor_layout(input_size, d);
        let flat = ENC_CHANNELS[6] * (input_size >> 6) * (input_size >> 6);
        let dec = dec_channels();
        // Fan-in per weight tensor, in declaration order (None = bias).
        let mut fan_in = Vec::new();
        for l in 0..6 {
            fan_in.push(Some(ENC_CHANNELS[l] * 9));
            fan_in.push(None);
        }
        fan_in.push(Some(flat));
        fan_in.push(None);
        fan_in.push(Some(d));
        fan_in.push(None);
        for l in 0..6 {
            fan_in.push(Some(dec[l] * 9));
            fan_in.push(None);
        }
        let tensors = layout
            .iter()
            .zip(&fan_in)
            .map(|(&len, fin)| match fin {
                Some(f) => {
                    let normal = Normal::new(0.0, (2.0 / *f as f64).sqrt()).expect("valid std");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                }
                None => vec![0.0; len],
            })
            .collect();
        Ok(AeModel { input_size, d, tensors })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn latent_dim(&self) -> usize {
        self.d
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    #[cfg(test)]
    pub(crate) fn tensors_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.tensors
    }

    fn flat_dim(&self) -> usize {
        ENC_CHANNELS[6] * (self.input_size >> 6) * (self.input_size >> 6)
    }

    fn check_mask(&self, mask: &BinaryMask) -> Result<()> {
        if mask.width() != self.input_size || mask.height() != self.input_size {
            return Err(Error::Input(format!(
                "mask is {}x{} but the model expects {0}x{0}",
                mask.width(),
                self.input_size,
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass to the d-dimensional latent code.
    pub fn encode(&self, mask: &BinaryMask) -> Result<LatentVec> {
        self.check_mask(mask)?;
        let mut a = mask_to_f64(mask);
        let mut n = self.input_size;
        for l in 0..6 {
            let pre = conv_fwd(
                &a,
                ENC_CHANNELS[l],
                n,
                &self.tensors[2 * l],
                &self.tensors[2 * l + 1],
                ENC_CHANNELS[l + 1],
            );
            a = leaky(&pre);
            n /= 2;
        }
        Ok(dense_fwd(&a, &self.tensors[12], &self.tensors[13], self.d))
    }

    /// Decodes a latent vector to the sigmoid probability grid (row-major)
    /// and its thresholded binary mask (probability >= 0.5 is foreground).
    pub fn decode(&self, z: &[f64]) -> Result<(Vec<f64>, BinaryMask)> {
        if z.len() != self.d {
            return Err(Error::Input(format!(
                "latent vector has length {} but the model expects {}",
                z.len(),
                self.d
            )));
        }
        let dec = dec_channels();
        let pre = dense_fwd(z, &self.tensors[14], &self.tensors[15], self.flat_dim());
        let mut t = leaky(&pre);
        let mut n = self.input_size >> 6;
        for l in 0..6 {
            let pre = tconv_fwd(
                &t,
                dec[l],
                n,
                &self.tensors[16 + 2 * l],
                &self.tensors[17 + 2 * l],
                dec[l + 1],
            );
            t = if l < 5 { leaky(&pre) } else { pre };
            n *= 2;
        }
        let probs: Vec<f64> = t.iter().map(|&v| sigmoid(v)).collect();
        let size = self.input_size;
        let mask = BinaryMask::from_fn(size, size, |x, y| probs[y * size + x] >= 0.5);
        Ok((probs, mask))
    }

    fn forward_trace(&self, mask: &BinaryMask) -> Trace {
        let dec = dec_channels();
        let mut enc_in = vec![mask_to_f64(mask)];
        let mut enc_pre = Vec::new();
        let mut n = self.input_size;
        for l in 0..6 {
            let pre = conv_fwd(
                enc_in.last().expect("non-empty"),
                ENC_CHANNELS[l],
                n,
                &self.tensors[2 * l],
                &self.tensors[2 * l + 1],
                ENC_CHANNELS[l + 1],
            );
            enc_in.push(leaky(&pre));
            enc_pre.push(pre);
            n /= 2;
        }
        let z = dense_fwd(&enc_in[6], &self.tensors[12], &self.tensors[13], self.d);
        let dec_dense_pre = dense_fwd(&z, &self.tensors[14], &self.tensors[15], self.flat_dim());
        let mut dec_in = vec![leaky(&dec_dense_pre)];
        let mut dec_pre = Vec::new();
        let mut m = self.input_size >> 6;
        for l in 0..6 {
            let pre = tconv_fwd(
                dec_in.last().expect("non-empty"),
                dec[l],
                m,
                &self.tensors[16 + 2 * l],
                &self.tensors[17 + 2 * l],
                dec[l + 1],
            );
            if l < 5 {
                dec_in.push(leaky(&pre));
                dec_pre.push(pre);
            } else {
                dec_in.push(pre);
            }
            m *= 2;
        }
        let probs = dec_in[6].iter().map(|&v| sigmoid(v)).collect();
        // The encoder dense layer is linear, so z doubles as its output and
        // the decoder dense input; stash it in dec_in[0]'s predecessor slot.
        let mut trace = Trace { enc_in, enc_pre, dec_dense_pre, dec_in, dec_pre, probs };
        trace.dec_in.insert(0, z); // dec_in[0] = z, dec_in[1] = dense activation, ...
        trace
    }

    /// Mean clamped per-pixel binary cross-entropy over the batch.
    pub fn reconstruction_loss(&self, batch: &[BinaryMask]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for mask in batch {
            self.check_mask(mask)?;
            let z = self.encode(mask)?;
            let (probs, _) = self.decode(&z)?;
            for (&p, &t) in probs.iter().zip(mask.pixels()) {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                let t = if t { 1.0 } else { 0.0 };
                total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// Loss and exact parameter gradients of [`Self::reconstruction_loss`]
    /// over the batch, accumulated in a fixed order.
    pub fn grad(&self, batch: &[BinaryMask]) -> Result<(f64, AeGrads)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for mask in batch {
            self.check_mask(mask)?;
        }
        let dec = dec_channels();
        let npix = self.input_size * self.input_size;
        let scale = 1.0 / (batch.len() * npix) as f64;
        let mut grads: Vec<Vec<f64>> = self.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut loss = 0.0;
        for mask in batch {
            let trace = self.forward_trace(mask);
            let target = mask_to_f64(mask);
            // Fused sigmoid + clamped BCE gradient w.r.t. the logits. The
            // gradient is exactly zero where the clamp is active, matching
            // finite differences of the computed loss.
            let mut dlogits = Vec::with_capacity(npix);
            for (&p, &t) in trace.probs.iter().zip(&target) {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                loss -= (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln()) * scale;
                let clamped = p <= BCE_EPS || p >= 1.0 - BCE_EPS;
                dlogits.push(if clamped { 0.0 } else { (p - t) * scale });
            }
            // Decoder transposed convolutions, last to first.
            let mut dcur = dlogits;
            let mut m = self.input_size;
            for l in (0..6).rev() {
                m /= 2;
                if l < 5 {
                    dcur = leaky_bwd(&trace.dec_pre[l], &dcur);
                }
                // dec_in[0] is z, so the input of tconv l is dec_in[l + 1].
                let (dx, dw, db) = tconv_bwd(
                    &trace.dec_in[l + 1],
                    dec[l],
                    m,
                    &self.tensors[16 + 2 * l],
                    dec[l + 1],
                    &dcur,
                );
                add_assign(&mut grads[16 + 2 * l], &dw);
                add_assign(&mut grads[17 + 2 * l], &db);
                dcur = dx;
            }
            // Decoder dense (leaky) then encoder dense (linear).
            dcur = leaky_bwd(&trace.dec_dense_pre, &dcur);
            let (dz, dw, db) = dense_bwd(&trace.dec_in[0], &self.tensors[14], self.flat_dim(), &dcur);
            add_assign(&mut grads[14], &dw);
            add_assign(&mut grads[15], &db);
            let (mut dcur, dw, db) = dense_bwd(&trace.enc_in[6], &self.tensors[12], self.d, &dz);
            add_assign(&mut grads[12], &dw);
            add_assign(&mut grads[13], &db);
            // Encoder convolutions, last to first.
            let mut n = self.input_size >> 6;
            for l in (0..6).rev() {
                dcur = leaky_bwd(&trace.enc_pre[l], &dcur);
                let (dx, dw, db) = conv_bwd(
                    &trace.enc_in[l],
                    ENC_CHANNELS[l],
                    n * 2,
                    &self.tensors[2 * l],
                    ENC_CHANNELS[l + 1],
                    &dcur,
                );
                add_assign(&mut grads[2 * l], &dw);
                add_assign(&mut grads[2 * l + 1], &db);
                dcur = dx;
                n *= 2;
            }
        }
        Ok((loss, AeGrads { tensors: grads }))
    }

    /// Writes the versioned binary container: magic `AEV1`, little-endian
    /// `input_size` and `d` as u32, then every parameter tensor as raw
    /// little-endian f64 in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(b"AEV1")?;
        out.write_all(&(self.input_size as u32).to_le_bytes())?;
        out.write_all(&(self.d as u32).to_le_bytes())?;
        for tensor in &self.tensors {
            for &v in tensor {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AeModel> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).map_err(|_| bad_model("file too short"))?;
        if &magic != b"AEV1" {
            return Err(bad_model("bad magic bytes"));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word).map_err(|_| bad_model("missing input_size"))?;
        let input_size = u32::from_le_bytes(word) as usize;
        file.read_exact(&mut word).map_err(|_| bad_model("missing latent dim"))?;
        let d = u32::from_le_bytes(word) as usize;
        if input_size == 0 || input_size % 64 != 0 || d == 0 {
            return Err(bad_model("invalid geometry header"));
        }
        let mut tensors = Vec::new();
        let mut buf = [0u8; 8];
        for len in tensor_layout(input_size, d) {
            let mut tensor = Vec::with_capacity(len);
            for _ in 0..len {
                file.read_exact(&mut buf).map_err(|_| bad_model("truncated tensor data"))?;
                let v = f64::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(bad_model("non-finite parameter"));
                }
                tensor.push(v);
            }
            tensors.push(tensor);
        }
        if file.read(&mut buf)? != 0 {
            return Err(bad_model("trailing bytes after parameters"));
        }
        Ok(AeModel { input_size, d, tensors })
    }
}

fn bad_model(why: &str) -> Error {
    Error::Format(format!("not a valid model file: {why}"))
}

fn add_assign(acc: &mut [f64], delta: &[f64]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

/// One bias-corrected Adam update on a flat parameter tensor.
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
    }
}

/// Applies one Adam step to every model tensor.
pub fn adam_step(model: &mut AeModel, grads: &AeGrads, state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    for (i, tensor) in model.tensors.iter_mut().enumerate() {
        adam_update(tensor, &grads.tensors[i], &mut state.m[i], &mut state.v[i], state.t, cfg);
    }
}

/// Trains a fresh model on the mask dataset. Returns the model and the
/// per-epoch mean loss history (length = `cfg.epochs`). Deterministic per
/// `cfg.rng_seed`; a non-finite loss aborts with a training error carrying
/// the epoch index.
pub fn train_autoencoder(
    masks: &[BinaryMask],
    d: usize,
    cfg: &TrainConfig,
) -> Result<(AeModel, Vec<f64>)> {
    cfg.validate()?;
    let first = masks.first().ok_or_else(|| Error::Input("empty training set".into()))?;
    if masks
        .iter()
        .any(|m| m.width() != first.width() || m.height() != first.height())
    {
        return Err(Error::Input("training masks must share one size".into()));
    }
    if first.width() != first.height() {
        return Err(Error::Input(format!(
            "training masks must be square, got {}x{}",
            first.width(),
            first.height()
        )));
    }
    let mut model = AeModel::init(first.width(), d, split_seed(cfg.rng_seed, 0))?;
    let mut state = AdamState::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..masks.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(split_seed(cfg.rng_seed, 1 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BinaryMask> = chunk.iter().map(|&i| masks[i].clone()).collect();
            let (loss, grads) = model.grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {loss} mid-epoch"),
                });
            }
            adam_step(&mut model, &grads, &mut state, cfg);
            epoch_loss += loss * batch.len() as f64;
        }
        history.push(epoch_loss / masks.len() as f64);
    }
    Ok((model, history))
}
