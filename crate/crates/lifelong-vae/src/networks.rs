//! Dense encoder/decoder parameter containers, initialization, forward passes
//! and teacher-to-student weight transfer with discrete-latent expansion.
//!
//! The encoder maps a flattened image to a `[mu | log_var | logits]` head; the
//! decoder maps a `[z_c | z_d]` latent back to reconstruction logits. Hidden
//! layers use ELU and there are no normalization layers, so forward passes are
//! pure functions of the parameters.

use crate::distributions::{CategoricalParams, GaussianParams, LatentSample};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// Raw log-variance head outputs are squashed into `[-BOUND, BOUND]` with a
/// smooth tanh clamp before use; unbounded variances destabilize early
/// training.
pub const LOG_VAR_BOUND: f64 = 8.0;

/// Architecture descriptor for one encoder/decoder pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    /// Discrete latent size; may grow across students, never shrinks.
    pub discrete_dim: usize,
    /// Continuous latent size; fixed for a run.
    pub continuous_dim: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("hidden_layers", self.hidden_layers),
            ("discrete_dim", self.discrete_dim),
            ("continuous_dim", self.continuous_dim),
        ] {
            if v == 0 {
                return Err(Error::arg("arch", format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Encoder head width: `[mu | log_var | logits]`.
    pub fn head_dim(&self) -> usize {
        2 * self.continuous_dim + self.discrete_dim
    }

    /// Decoder input width: `[z_c | z_d]`.
    pub fn latent_dim(&self) -> usize {
        self.continuous_dim + self.discrete_dim
    }

    /// Same architecture with a different discrete latent size.
    pub fn with_discrete_dim(&self, discrete_dim: usize) -> ArchSpec {
        ArchSpec {
            discrete_dim,
            ..*self
        }
    }

    fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.input_dim, self.hidden_dim)];
        for _ in 1..self.hidden_layers {
            shapes.push((self.hidden_dim, self.hidden_dim));
        }
        shapes.push((self.hidden_dim, self.head_dim()));
        shapes
    }

    fn decoder_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.latent_dim(), self.hidden_dim)];
        for _ in 1..self.hidden_layers {
            shapes.push((self.hidden_dim, self.hidden_dim));
        }
        shapes.push((self.hidden_dim, self.input_dim));
        shapes
    }
}

/// One dense layer; weight is `[fan_in, fan_out]`, bias is `[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Layer {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Layer {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Encoder and decoder parameters plus the architecture they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub arch: ArchSpec,
}

/// Per-pixel Bernoulli logits produced by the decoder.
#[derive(Debug, Clone)]
pub struct BernoulliLogits {
    pub logits: Vec<f64>,
}

impl BernoulliLogits {
    /// Elementwise sigmoid: the mean image.
    pub fn mean(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| stable_sigmoid(l)).collect()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = arch
        .encoder_shapes()
        .into_iter()
        .map(|(i, o)| Layer::glorot(i, o, &mut rng))
        .collect();
    let decoder = arch
        .decoder_shapes()
        .into_iter()
        .map(|(i, o)| Layer::glorot(i, o, &mut rng))
        .collect();
    Ok(ModelState {
        encoder,
        decoder,
        arch: *arch,
    })
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(Layer::param_count)
            .sum()
    }

    /// All parameters in declared order (encoder then decoder, weight then
    /// bias per layer, weights row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.encoder.iter().chain(&self.decoder) {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Overwrite all parameters from a flat slice in declared order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("assign_flat", self.param_count(), flat.len()));
        }
        let mut off = 0;
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for w in layer.weight.iter_mut() {
                *w = flat[off];
                off += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical little-endian byte serialization of all
    /// parameters; stable identity for frozen-teacher checks.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.flatten() {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn forward_dense(
    layers: &[Layer],
    x: &Array2<f64>,
    context: &'static str,
) -> Result<Array2<f64>> {
    let mut h = x.clone();
    let last = layers.len() - 1;
    for (idx, layer) in layers.iter().enumerate() {
        h = h.dot(&layer.weight) + &layer.bias;
        if idx < last {
            h.mapv_inplace(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation in {context} layer {idx}"
            )));
        }
    }
    Ok(h)
}

/// Posterior heads for a batch, one row per sample.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Batched encoder forward; the log-variance head is smooth-clamped.
pub fn encode_batch(m: &ModelState, x: &Array2<f64>) -> Result<EncodedBatch> {
    if x.ncols() != m.arch.input_dim {
        return Err(Error::dim("encode", m.arch.input_dim, x.ncols()));
    }
    let head = forward_dense(&m.encoder, x, "encoder")?;
    let c = m.arch.continuous_dim;
    let j = m.arch.discrete_dim;
    let mu = head.slice(ndarray::s![.., 0..c]).to_owned();
    let log_var = head
        .slice(ndarray::s![.., c..2 * c])
        .mapv(|v| LOG_VAR_BOUND * (v / LOG_VAR_BOUND).tanh());
    let logits = head.slice(ndarray::s![.., 2 * c..2 * c + j]).to_owned();
    Ok(EncodedBatch { mu, log_var, logits })
}

/// Batched decoder forward to reconstruction logits.
pub fn decode_batch(m: &ModelState, z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.ncols() != m.arch.latent_dim() {
        return Err(Error::dim("decode", m.arch.latent_dim(), z.ncols()));
    }
    forward_dense(&m.decoder, z, "decoder")
}

/// Posterior parameters for a single input.
pub fn encode(x: &[f64], m: &ModelState) -> Result<(GaussianParams, CategoricalParams)> {
    let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    let out = encode_batch(m, &x)?;
    Ok((
        GaussianParams::new(out.mu.row(0).to_vec(), out.log_var.row(0).to_vec())?,
        CategoricalParams::new(out.logits.row(0).to_vec())?,
    ))
}

/// Reconstruction logits for a single latent draw.
pub fn decode(z: &LatentSample, m: &ModelState) -> Result<BernoulliLogits> {
    let mut row = z.z_c.clone();
    row.extend(&z.z_d);
    let z = Array2::from_shape_vec((1, row.len()), row).expect("row vector");
    let logits = decode_batch(m, &z)?;
    Ok(BernoulliLogits {
        logits: logits.row(0).to_vec(),
    })
}

/// New student from a frozen teacher. With an unchanged discrete latent this
/// is an exact copy; with a grown one, every layer is copied except the
/// encoder-head units producing the categorical logits and the first decoder
/// layer rows consuming `z_d`, which are re-initialized Glorot from `seed`.
pub fn transfer_weights(teacher: &ModelState, new_arch: &ArchSpec, seed: u64) -> Result<ModelState> {
    let old = &teacher.arch;
    if new_arch.input_dim != old.input_dim
        || new_arch.hidden_dim != old.hidden_dim
        || new_arch.hidden_layers != old.hidden_layers
        || new_arch.continuous_dim != old.continuous_dim
    {
        return Err(Error::arg(
            "new_arch",
            "only the discrete latent size may change across students",
        ));
    }
    if new_arch.discrete_dim < old.discrete_dim {
        return Err(Error::arg(
            "new_arch",
            format!(
                "discrete latent may not shrink ({} -> {})",
                old.discrete_dim, new_arch.discrete_dim
            ),
        ));
    }
    if new_arch.discrete_dim == old.discrete_dim {
        return Ok(teacher.clone());
    }

    let mut student = init_model(new_arch, seed)?;
    let c = new_arch.continuous_dim;

    // Encoder: copy everything; in the head keep only the mu/log_var columns,
    // leaving the categorical-logit columns at their fresh initialization.
    let head = student.encoder.len() - 1;
    for (idx, layer) in teacher.encoder.iter().enumerate() {
        if idx < head {
            student.encoder[idx] = layer.clone();
        } else {
            student.encoder[idx]
                .weight
                .slice_mut(ndarray::s![.., 0..2 * c])
                .assign(&layer.weight.slice(ndarray::s![.., 0..2 * c]));
            student.encoder[idx]
                .bias
                .slice_mut(ndarray::s![0..2 * c])
                .assign(&layer.bias.slice(ndarray::s![0..2 * c]));
        }
    }

    // Decoder: copy everything; in the first layer keep only the z_c input
    // rows, leaving the z_d rows at their fresh initialization.
    for (idx, layer) in teacher.decoder.iter().enumerate() {
        if idx == 0 {
            student.decoder[idx]
                .weight
                .slice_mut(ndarray::s![0..c, ..])
                .assign(&layer.weight.slice(ndarray::s![0..c, ..]));
            student.decoder[idx].bias.assign(&layer.bias);
        } else {
            student.decoder[idx] = layer.clone();
        }
    }

    Ok(student)
}

// ---------------------------------------------------------------------------
// Tape-staged forward passes for training.
// ---------------------------------------------------------------------------

/// Parameter handles for a model staged on a tape, in declared order.
pub struct ModelVars {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
    pub arch: ArchSpec,
}

impl ModelVars {
    /// Parameter vars in the same order as [`ModelState::flatten`].
    pub fn all_vars(&self) -> Vec<(Var, Var)> {
        self.encoder.iter().chain(&self.decoder).cloned().collect()
    }
}

/// Stage model parameters on a tape. `trainable` decides whether gradients
/// will flow into them; frozen teachers are staged as constants.
pub fn stage_model(tape: &mut Tape, m: &ModelState, trainable: bool) -> ModelVars {
    let mut stage = |layer: &Layer| {
        let w = layer.weight.clone();
        let b = layer
            .bias
            .clone()
            .insert_axis(Axis(0));
        if trainable {
            (tape.leaf(w), tape.leaf(b))
        } else {
            (tape.constant(w), tape.constant(b))
        }
    };
    ModelVars {
        encoder: m.encoder.iter().map(&mut stage).collect(),
        decoder: m.decoder.iter().map(&mut stage).collect(),
        arch: m.arch,
    }
}

/// Encoder head vars for a staged model.
pub struct EncoderHeads {
    pub mu: Var,
    pub log_var: Var,
    pub logits: Var,
}

fn dense_graph(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Var {
    let last = layers.len() - 1;
    let mut h = x;
    for (idx, &(w, b)) in layers.iter().enumerate() {
        let lin = tape.matmul(h, w);
        h = tape.add_row(lin, b);
        if idx < last {
            h = tape.elu(h);
        }
    }
    h
}

/// Encoder forward on the tape, splitting the head and smooth-clamping the
/// log-variance exactly as [`encode_batch`] does.
pub fn encoder_graph(tape: &mut Tape, vars: &ModelVars, x: Var) -> EncoderHeads {
    let head = dense_graph(tape, &vars.encoder, x);
    let c = vars.arch.continuous_dim;
    let j = vars.arch.discrete_dim;
    let mu = tape.slice_cols(head, 0, c);
    let raw = tape.slice_cols(head, c, 2 * c);
    let squashed = tape.scale(raw, 1.0 / LOG_VAR_BOUND);
    let squashed = tape.tanh(squashed);
    let log_var = tape.scale(squashed, LOG_VAR_BOUND);
    let logits = tape.slice_cols(head, 2 * c, 2 * c + j);
    EncoderHeads { mu, log_var, logits }
}

/// Decoder forward on the tape to reconstruction logits.
pub fn decoder_graph(tape: &mut Tape, vars: &ModelVars, z: Var) -> Var {
    dense_graph(tape, &vars.decoder, z)
}

/// Collect gradients for a staged model into flat parameter order; parameters
/// the loss never touched contribute zeros.
pub fn flatten_grads(
    tape: &Tape,
    grads: &crate::tape::Gradients,
    vars: &ModelVars,
    param_count: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count);
    for (w, b) in vars.all_vars() {
        match grads.get(w) {
            Some(g) => out.extend(g.iter()),
            None => out.extend(std::iter::repeat(0.0).take(tape.value(w).len())),
        }
        match grads.get(b) {
            Some(g) => out.extend(g.iter()),
            None => out.extend(std::iter::repeat(0.0).take(tape.value(b).len())),
        }
    }
    debug_assert_eq!(out.len(), param_count);
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"LVAE";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a versioned binary checkpoint: architecture, seed lineage, then all
/// parameter arrays in declared order. Byte layout is deterministic, so
/// save -> load -> save reproduces the file exactly.
pub fn save_checkpoint(path: &Path, m: &ModelState, seed_lineage: &[u64]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        m.arch.input_dim,
        m.arch.hidden_dim,
        m.arch.hidden_layers,
        m.arch.discrete_dim,
        m.arch.continuous_dim,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(seed_lineage.len() as u32).to_le_bytes());
    for s in seed_lineage {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for v in m.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Vec<u64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format {
                offset: *off as u64,
                reason: "truncated checkpoint".into(),
            });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let read_u32 = |off: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let version = read_u32(&mut off)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let arch = ArchSpec {
        input_dim: read_u32(&mut off)? as usize,
        hidden_dim: read_u32(&mut off)? as usize,
        hidden_layers: read_u32(&mut off)? as usize,
        discrete_dim: read_u32(&mut off)? as usize,
        continuous_dim: read_u32(&mut off)? as usize,
    };
    let lineage_len = read_u32(&mut off)? as usize;
    let mut lineage = Vec::with_capacity(lineage_len);
    for _ in 0..lineage_len {
        lineage.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
    }
    let mut model = init_model(&arch, 0)?;
    let count = model.param_count();
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        flat.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
    }
    if off != bytes.len() {
        return Err(Error::Format {
            offset: off as u64,
            reason: "trailing bytes after parameters".into(),
        });
    }
    model.assign_flat(&flat)?;
    Ok((model, lineage))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 4,
            hidden_dim: 8,
            hidden_layers: 2,
            discrete_dim: 2,
            continuous_dim: 3,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_glorot_bound() {
        let arch = tiny_arch();
        let a = init_model(&arch, 9).unwrap();
        let b = init_model(&arch, 9).unwrap();
        assert_eq!(a, b);
        let c = init_model(&arch, 10).unwrap();
        assert_ne!(a, c);

        for layer in a.encoder.iter().chain(&a.decoder) {
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }

        // A 4 -> 4 layer stays within the Glorot bound sqrt(6/8).
        let square = ArchSpec {
            input_dim: 4,
            hidden_dim: 4,
            hidden_layers: 1,
            discrete_dim: 1,
            continuous_dim: 1,
        };
        let m = init_model(&square, 3).unwrap();
        let bound = (6.0 / 8.0_f64).sqrt();
        assert!(m.encoder[0].weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn param_count_matches_enumerated_shapes() {
        let arch = tiny_arch();
        let m = init_model(&arch, 0).unwrap();
        // Enumerate layer shapes by hand: encoder 4->8, 8->8, 8->(2*3+2);
        // decoder (3+2)->8, 8->8, 8->4.
        let expected: usize = [(4, 8), (8, 8), (8, 8), (5, 8), (8, 8), (8, 4)]
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum();
        assert_eq!(m.param_count(), expected);
        assert_eq!(m.flatten().len(), expected);
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let arch = tiny_arch();
        let m = init_model(&arch, 1).unwrap();
        let x = vec![0.0; 4];
        let (g, c) = encode(&x, &m).unwrap();
        assert_eq!(g.dim(), 3);
        assert_eq!(c.dim(), 2);
        assert!(g.mu.iter().all(|v| v.is_finite()));
        assert!(g.log_var.iter().all(|v| v.is_finite()));

        let (g2, c2) = encode(&x, &m).unwrap();
        assert_eq!(g.mu, g2.mu);
        assert_eq!(c.logits, c2.logits);

        assert!(encode(&[0.0; 5], &m).is_err());

        let z = LatentSample::new(vec![0.1, -0.2, 0.3], vec![0.25, 0.75]).unwrap();
        let out1 = decode(&z, &m).unwrap();
        let out2 = decode(&z, &m).unwrap();
        assert_eq!(out1.logits, out2.logits);
        assert_eq!(out1.logits.len(), 4);
        let mean = out1.mean();
        assert!(mean.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let arch = tiny_arch();
        let m = init_model(&arch, 2).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 * 0.21 + j as f64 * 0.13).sin());

        let plain = encode_batch(&m, &x).unwrap();
        let mut tape = Tape::new();
        let vars = stage_model(&mut tape, &m, false);
        let xv = tape.constant(x.clone());
        let heads = encoder_graph(&mut tape, &vars, xv);
        for (a, b) in tape.value(heads.mu).iter().zip(plain.mu.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in tape.value(heads.log_var).iter().zip(plain.log_var.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in tape.value(heads.logits).iter().zip(plain.logits.iter()) {
            assert!((a - b).abs() < 1e-14);
        }

        let z = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 - j as f64) * 0.17);
        let plain_dec = decode_batch(&m, &z).unwrap();
        let zv = tape.constant(z);
        let dec = decoder_graph(&mut tape, &vars, zv);
        for (a, b) in tape.value(dec).iter().zip(plain_dec.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let arch = tiny_arch();
        let mut m = init_model(&arch, 5).unwrap();
        let x_row: Vec<f64> = vec![0.3, -0.1, 0.7, 0.2];
        let x = Array2::from_shape_vec((1, 4), x_row.clone()).unwrap();

        // Scalar probe: sum of mu head.
        let loss_of = |m: &ModelState| encode_batch(m, &x).unwrap().mu.sum();

        let mut tape = Tape::new();
        let vars = stage_model(&mut tape, &m, true);
        let xv = tape.constant(x.clone());
        let heads = encoder_graph(&mut tape, &vars, xv);
        let loss = tape.sum_all(heads.mu);
        let grads = tape.backward(loss);
        let analytic = grads.get(vars.encoder[0].0).unwrap().clone();

        let h = 1e-6;
        for &(r, cx) in &[(0usize, 0usize), (1, 3), (3, 7)] {
            let orig = m.encoder[0].weight[[r, cx]];
            m.encoder[0].weight[[r, cx]] = orig + h;
            let up = loss_of(&m);
            m.encoder[0].weight[[r, cx]] = orig - h;
            let down = loss_of(&m);
            m.encoder[0].weight[[r, cx]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[[r, cx]];
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / scale < 1e-6,
                "W[{r},{cx}]: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn decoder_gradient_wrt_latent_matches_finite_differences() {
        let arch = tiny_arch();
        let m = init_model(&arch, 6).unwrap();
        let z = Array2::from_shape_vec((1, 5), vec![0.2, -0.4, 0.1, 0.6, 0.4]).unwrap();

        let mut tape = Tape::new();
        let vars = stage_model(&mut tape, &m, false);
        let zv = tape.leaf(z.clone());
        let out = decoder_graph(&mut tape, &vars, zv);
        let sig = tape.sigmoid(out);
        let loss = tape.sum_all(sig);
        let grads = tape.backward(loss);
        let analytic = grads.get(zv).unwrap().clone();

        let h = 1e-6;
        for j in 0..3 {
            let mut zp = z.clone();
            zp[[0, j]] += h;
            let mut zm = z.clone();
            zm[[0, j]] -= h;
            let up: f64 = decode_batch(&m, &zp).unwrap().mapv(stable_sigmoid).sum();
            let down: f64 = decode_batch(&m, &zm).unwrap().mapv(stable_sigmoid).sum();
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[[0, j]];
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            assert!((a - numeric).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn transfer_with_unchanged_latent_is_bitwise_copy() {
        let arch = tiny_arch();
        let teacher = init_model(&arch, 7).unwrap();
        let student = transfer_weights(&teacher, &arch, 99).unwrap();
        assert_eq!(teacher, student);
    }

    #[test]
    fn transfer_with_grown_latent_reinitializes_only_latent_boundary() {
        let arch = tiny_arch().with_discrete_dim(1);
        let teacher = init_model(&arch, 8).unwrap();
        let teacher_hash = teacher.param_hash();
        let grown = arch.with_discrete_dim(2);
        let student = transfer_weights(&teacher, &grown, 42).unwrap();

        // Teacher untouched.
        assert_eq!(teacher.param_hash(), teacher_hash);

        // Hidden layers equal.
        for idx in 0..teacher.encoder.len() - 1 {
            assert_eq!(teacher.encoder[idx], student.encoder[idx]);
        }
        for idx in 1..teacher.decoder.len() {
            assert_eq!(teacher.decoder[idx], student.decoder[idx]);
        }

        // mu/log_var head columns equal; categorical columns differ.
        let c = arch.continuous_dim;
        let t_head = &teacher.encoder.last().unwrap().weight;
        let s_head = &student.encoder.last().unwrap().weight;
        assert_eq!(
            t_head.slice(ndarray::s![.., 0..2 * c]),
            s_head.slice(ndarray::s![.., 0..2 * c])
        );
        assert_ne!(
            t_head.slice(ndarray::s![.., 2 * c..]).to_owned(),
            s_head.slice(ndarray::s![.., 2 * c..2 * c + 1]).to_owned()
        );

        // z_c rows of the first decoder layer equal; z_d rows fresh.
        let t_dec = &teacher.decoder[0].weight;
        let s_dec = &student.decoder[0].weight;
        assert_eq!(
            t_dec.slice(ndarray::s![0..c, ..]),
            s_dec.slice(ndarray::s![0..c, ..])
        );

        // Deterministic.
        let again = transfer_weights(&teacher, &grown, 42).unwrap();
        assert_eq!(student, again);

        // Shrinking or changing other dims is rejected.
        assert!(transfer_weights(&student, &arch.with_discrete_dim(1), 0).is_err());
        let mut other = grown;
        other.continuous_dim += 1;
        assert!(transfer_weights(&teacher, &other, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let arch = tiny_arch();
        let m = init_model(&arch, 12).unwrap();
        let lineage = vec![12, 77, 4096];

        let p1 = dir.path().join("a.ckpt");
        save_checkpoint(&p1, &m, &lineage).unwrap();
        let (loaded, lin) = load_checkpoint(&p1).unwrap();
        assert_eq!(lin, lineage);
        assert_eq!(m, loaded);

        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p2, &loaded, &lin).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Corrupt magic is a format error.
        let mut bytes = std::fs::read(&p1).unwrap();
        bytes[0] = b'X';
        let p3 = dir.path().join("c.ckpt");
        std::fs::write(&p3, &bytes).unwrap();
        assert!(load_checkpoint(&p3).is_err());
    }
}
