//! Evaluation: negative test ELBO on accumulated test sets and the Frechet
//! distance between feature statistics of generated and test samples.
//!
//! Features come from the penultimate layer of a small dense classifier
//! trained once on the full corpus and frozen (hash-stamped so every method
//! is scored by the same extractor), or optionally from raw pixels.

use crate::data::ImageDataset;
use crate::distributions::gumbel_from_uniform;
use crate::error::{Error, Result};
use crate::networks::{decode_batch, encode_batch, ModelState};
use crate::optim::AdamState;
use crate::seeds;
use crate::tape::Tape;
use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean over test images of the single-draw negative ELBO, averaged over
/// `n_mc` latent draws; deterministic in `seed`. Reported in nats per image.
pub fn negative_test_elbo(
    model: &ModelState,
    testset: &Array2<f64>,
    n_mc: usize,
    seed: u64,
    tau: f64,
) -> Result<f64> {
    let n = testset.nrows();
    if n == 0 {
        return Err(Error::arg("testset", "must be nonempty"));
    }
    if n_mc == 0 {
        return Err(Error::arg("n_mc", "must be at least 1"));
    }
    let enc = encode_batch(model, testset)?;
    let c = model.arch.continuous_dim;
    let j = model.arch.discrete_dim;

    // KL terms depend only on the posteriors.
    let kl_c = enc
        .mu
        .iter()
        .zip(enc.log_var.iter())
        .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
        * 0.5;
    let mut kl_d = 0.0;
    for row in enc.logits.rows() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        kl_d += (j as f64).ln()
            + row
                .iter()
                .map(|&l| {
                    let lp = l - lse;
                    lp.exp() * lp
                })
                .sum::<f64>();
    }

    let mut recon_total = 0.0;
    for draw in 0..n_mc {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(seed, 0x454C, draw as u64));
        let mut z = Array2::zeros((n, c + j));
        for i in 0..n {
            for k in 0..c {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                z[[i, k]] = enc.mu[[i, k]] + (0.5 * enc.log_var[[i, k]]).exp() * eps;
            }
            let noisy: Vec<f64> = (0..j)
                .map(|k| (enc.logits[[i, k]] + gumbel_from_uniform(rng.random())) / tau)
                .collect();
            let m = noisy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let zsum: f64 = noisy.iter().map(|&v| (v - m).exp()).sum();
            for k in 0..j {
                z[[i, c + k]] = (noisy[k] - m).exp() / zsum;
            }
        }
        let logits = decode_batch(model, &z)?;
        recon_total += logits
            .iter()
            .zip(testset.iter())
            .map(|(&l, &x)| softplus(l) - x * l)
            .sum::<f64>();
    }

    Ok((recon_total / n_mc as f64 + kl_c + kl_d) / n as f64)
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

/// Penultimate-layer feature width of the classifier extractor.
pub const FEATURE_DIM: usize = 64;
const EXTRACTOR_HIDDEN: usize = 256;
const EXTRACTOR_CLASSES: usize = 10;

/// Frozen dense classifier whose 64-d penultimate activations serve as the
/// feature space for the Frechet metric.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    weights: Vec<Array2<f64>>,
    biases: Vec<Vec<f64>>,
    input_dim: usize,
    /// SHA-256 over the parameter bytes; identifies the extractor version.
    pub hash: String,
}

impl FeatureExtractor {
    fn compute_hash(weights: &[Array2<f64>], biases: &[Vec<f64>]) -> String {
        let mut hasher = Sha256::new();
        for (w, b) in weights.iter().zip(biases) {
            for v in w.iter().chain(b.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let elu = |m: Array2<f64>| m.mapv(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        let h1 = elu(x.dot(&self.weights[0]) + &row(&self.biases[0]));
        let h2 = elu(h1.dot(&self.weights[1]) + &row(&self.biases[1]));
        let logits = h2.dot(&self.weights[2]) + &row(&self.biases[2]);
        (h2, logits)
    }

    /// Penultimate-layer activations, `[n, 64]`.
    pub fn features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::dim("features", self.input_dim, x.ncols()));
        }
        Ok(self.forward(x).0)
    }

    /// Argmax class predictions.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        if x.ncols() != self.input_dim {
            return Err(Error::dim("predict", self.input_dim, x.ncols()));
        }
        let (_, logits) = self.forward(x);
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Array2<f64>, labels: &[u8]) -> Result<f64> {
        let preds = self.predict(x)?;
        let hits = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == **l as usize)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

const EXTRACTOR_MAGIC: &[u8; 4] = b"LVFX";

/// Persist the frozen extractor with its version hash.
pub fn save_extractor(path: &Path, e: &FeatureExtractor) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EXTRACTOR_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(e.input_dim as u32).to_le_bytes());
    for (w, b) in e.weights.iter().zip(&e.biases) {
        buf.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
        for v in w.iter().chain(b.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_extractor(path: &Path) -> Result<FeatureExtractor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format {
                offset: *off as u64,
                reason: "truncated extractor file".into(),
            });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != EXTRACTOR_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad extractor magic".into(),
        });
    }
    let read_u32 =
        |off: &mut usize| -> Result<u32> { Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap())) };
    let version = read_u32(&mut off)?;
    if version != 1 {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported extractor version {version}"),
        });
    }
    let input_dim = read_u32(&mut off)? as usize;
    let mut weights = Vec::with_capacity(3);
    let mut biases = Vec::with_capacity(3);
    for _ in 0..3 {
        let r = read_u32(&mut off)? as usize;
        let c = read_u32(&mut off)? as usize;
        let mut w = Array2::zeros((r, c));
        for i in 0..r {
            for jj in 0..c {
                w[[i, jj]] = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            }
        }
        let mut b = vec![0.0; c];
        for v in b.iter_mut() {
            *v = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        }
        weights.push(w);
        biases.push(b);
    }
    let hash = FeatureExtractor::compute_hash(&weights, &biases);
    Ok(FeatureExtractor {
        weights,
        biases,
        input_dim,
        hash,
    })
}

/// Train the feature classifier (input -> 256 -> 64 -> 10, ELU) on the full
/// labeled corpus; fails if held-out accuracy stays below 0.90, since the
/// metric would be untrustworthy. Deterministic in `seed`.
pub fn train_feature_classifier(corpus: &ImageDataset, seed: u64) -> Result<FeatureExtractor> {
    let labels = corpus
        .labels
        .as_ref()
        .ok_or_else(|| Error::arg("corpus", "extractor training requires labels"))?;
    let n = corpus.len();
    if n < 20 {
        return Err(Error::arg("corpus", "need at least 20 labeled samples"));
    }
    let dim = corpus.dim();

    // Held-out split: 10%, seeded.
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x4658));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let n_held = (n / 10).max(1);
    let (held_idx, train_idx) = indices.split_at(n_held);
    let held_x = Array2::from_shape_fn((held_idx.len(), dim), |(i, jx)| {
        corpus.images[[held_idx[i], jx]]
    });
    let held_y: Vec<u8> = held_idx.iter().map(|&i| labels[i]).collect();

    // Glorot init.
    let shapes = [
        (dim, EXTRACTOR_HIDDEN),
        (EXTRACTOR_HIDDEN, FEATURE_DIM),
        (FEATURE_DIM, EXTRACTOR_CLASSES),
    ];
    let mut weights: Vec<Array2<f64>> = shapes
        .iter()
        .map(|&(i, o)| {
            let bound = (6.0 / (i + o) as f64).sqrt();
            Array2::from_shape_fn((i, o), |_| rng.random_range(-bound..bound))
        })
        .collect();
    let mut biases: Vec<Vec<f64>> = shapes.iter().map(|&(_, o)| vec![0.0; o]).collect();

    let param_count: usize = shapes.iter().map(|&(i, o)| i * o + o).sum();
    let mut adam = AdamState::new(param_count);
    let batch_size = 128usize;
    let max_epochs = 40usize;
    let mut best_acc = 0.0;
    let mut stale = 0usize;

    for epoch in 0..max_epochs {
        let mut order: Vec<usize> = train_idx.to_vec();
        let mut erng = ChaCha8Rng::seed_from_u64(seeds::derive2(seed, 0x4653, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch_size) {
            let x = Array2::from_shape_fn((chunk.len(), dim), |(i, jx)| {
                corpus.images[[chunk[i], jx]]
            });
            let mut onehot = Array2::zeros((chunk.len(), EXTRACTOR_CLASSES));
            for (i, &idx) in chunk.iter().enumerate() {
                onehot[[i, labels[idx] as usize]] = 1.0;
            }

            let mut tape = Tape::new();
            let wv: Vec<_> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
            let bv: Vec<_> = biases.iter().map(|b| tape.leaf(row(b))).collect();
            let xv = tape.constant(x);
            let mut h = xv;
            for l in 0..3 {
                let lin = tape.matmul(h, wv[l]);
                h = tape.add_row(lin, bv[l]);
                if l < 2 {
                    h = tape.elu(h);
                }
            }
            let lse = tape.log_sum_exp_rows(h);
            let logp = tape.sub_col(h, lse);
            let oh = tape.constant(onehot);
            let picked = tape.mul(oh, logp);
            let rows = tape.sum_rows(picked);
            let mean = tape.mean_all(rows);
            let loss = tape.neg(mean);
            let grads = tape.backward(loss);

            let mut flat_params = Vec::with_capacity(param_count);
            let mut flat_grads = Vec::with_capacity(param_count);
            for l in 0..3 {
                flat_params.extend(weights[l].iter());
                flat_params.extend(biases[l].iter());
                flat_grads.extend(grads.get(wv[l]).unwrap().iter());
                flat_grads.extend(grads.get(bv[l]).unwrap().iter());
            }
            adam.update(&mut flat_params, &flat_grads, 1e-3);
            let mut offp = 0;
            for l in 0..3 {
                for v in weights[l].iter_mut() {
                    *v = flat_params[offp];
                    offp += 1;
                }
                for v in biases[l].iter_mut() {
                    *v = flat_params[offp];
                    offp += 1;
                }
            }
        }

        let probe = FeatureExtractor {
            weights: weights.clone(),
            biases: biases.clone(),
            input_dim: dim,
            hash: String::new(),
        };
        let acc = probe.accuracy(&held_x, &held_y)?;
        if acc > best_acc {
            best_acc = acc;
            stale = 0;
        } else {
            stale += 1;
        }
        if best_acc >= 0.97 || stale >= 5 {
            break;
        }
    }

    if best_acc < 0.90 {
        return Err(Error::Training(format!(
            "feature classifier reached only {best_acc:.3} held-out accuracy (need 0.90)"
        )));
    }
    let hash = FeatureExtractor::compute_hash(&weights, &biases);
    Ok(FeatureExtractor {
        weights,
        biases,
        input_dim: dim,
        hash,
    })
}

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

/// Empirical mean and unbiased covariance of a feature batch.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Array2<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, cov: Array2<f64>, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::arg("n", "need at least 2 samples"));
        }
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dim("cov", mean.len() * mean.len(), cov.len()));
        }
        for i in 0..cov.nrows() {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-10 {
                    return Err(Error::arg("cov", "must be symmetric within 1e-10"));
                }
            }
        }
        Ok(FeatureStats { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Feature space used by [`feature_stats`].
pub enum FeatureMode<'a> {
    RawPixels,
    Classifier(&'a FeatureExtractor),
}

/// Mean and unbiased covariance of extractor features over a sample batch.
pub fn feature_stats(samples: &Array2<f64>, mode: &FeatureMode) -> Result<FeatureStats> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::arg("samples", "need at least 2 samples"));
    }
    let feats = match mode {
        FeatureMode::RawPixels => samples.clone(),
        FeatureMode::Classifier(e) => e.features(samples)?,
    };
    let d = feats.ncols();
    let mean = feats.mean_axis(Axis(0)).expect("nonempty");
    let centered = &feats - &mean.clone().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    // Exact symmetrization; the product above is symmetric only up to float
    // rounding.
    let mut cov_sym = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            cov_sym[[i, j]] = 0.5 * (cov[[i, j]] + cov[[j, i]]);
        }
    }
    FeatureStats::new(mean.to_vec(), cov_sym, n)
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenvalues of a symmetric matrix with the PSD clamp rule: values below
/// zero are clamped to zero when above `-1e-6 * max_eig`, otherwise the
/// matrix is reported as numerically non-PSD.
fn clamped_eigenvalues(m: &DMatrix<f64>, context: &str) -> Result<Vec<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = -1e-6 * max_eig.max(1e-12);
    eig.eigenvalues
        .iter()
        .map(|&l| {
            if l >= 0.0 {
                Ok(l)
            } else if l >= floor {
                Ok(0.0)
            } else {
                Err(Error::Numeric(format!(
                    "{context}: eigenvalue {l} below PSD tolerance {floor}"
                )))
            }
        })
        .collect()
}

/// `Tr((C1 C2)^{1/2})` for PSD inputs, via the symmetric similarity
/// `C1^{1/2} C2 C1^{1/2}`, whose eigenvalues equal those of `C1 C2`.
pub fn trace_sqrt_product(c1: &Array2<f64>, c2: &Array2<f64>) -> Result<f64> {
    if c1.dim() != c2.dim() || c1.nrows() != c1.ncols() {
        return Err(Error::dim("trace_sqrt_product", c1.len(), c2.len()));
    }
    let m1 = to_nalgebra(c1);
    let m2 = to_nalgebra(c2);
    let eig1 = m1.clone().symmetric_eigen();
    let clamped = clamped_eigenvalues(&m1, "c1")?;
    let d = c1.nrows();
    let mut sqrt_diag = DMatrix::zeros(d, d);
    for i in 0..d {
        sqrt_diag[(i, i)] = clamped[i].sqrt();
    }
    let sqrt_c1 = &eig1.eigenvectors * sqrt_diag * eig1.eigenvectors.transpose();
    let inner = &sqrt_c1 * m2 * &sqrt_c1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eigs = clamped_eigenvalues(&sym, "c1*c2")?;
    Ok(eigs.iter().map(|&l| l.sqrt()).sum())
}

/// Frechet distance between two Gaussian feature fits:
/// `||m_a - m_b||^2 + Tr(C_a + C_b - 2 (C_a C_b)^{1/2})`, clamped at zero
/// against rounding.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("frechet_distance", a.dim(), b.dim()));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..a.dim()).map(|i| a.cov[[i, i]]).sum();
    let tr_b: f64 = (0..b.dim()).map(|i| b.cov[[i, i]]).sum();
    let cross = trace_sqrt_product(&a.cov, &b.cov)?;
    Ok((mean_term + tr_a + tr_b - 2.0 * cross).max(0.0))
}

/// Natural log of the Frechet distance, floored away from `ln 0`.
pub fn log_frechet(fd: f64) -> f64 {
    fd.max(1e-12).ln()
}
