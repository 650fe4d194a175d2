//! Latent quantization: additive uniform noise during training (keeps the
//! rate term differentiable), mean-centered rounding at inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::cdf::{LikelihoodModel, SYMBOL_MAX, SYMBOL_MIN};
use crate::tensor::{derive_seed, Tensor};
use crate::{Error, Result};

/// Integer symbols for one latent tensor, laid out like the latent
/// (row-major [h, w, c]).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLatent {
    pub symbols: Vec<i8>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// How many values fell outside the coder support and were clamped.
    pub clamped: u64,
}

impl QuantizedLatent {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// I.i.d. U(-0.5, 0.5) tensor for the training-time relaxation.
pub fn uniform_noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "quantize-noise"));
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

/// Training-mode proxy: y plus uniform noise, off the tape. The training
/// loop adds the same noise as a constant so gradients pass through.
pub fn quantize_train(y: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let noise = uniform_noise(y.shape(), seed);
    let data = y.data().iter().zip(noise.data().iter()).map(|(a, b)| a + b).collect();
    Tensor::new(y.shape().to_vec(), data).expect("length matches")
}

/// Inference-mode quantization: symbols k = round(y - mu_c), reconstruction
/// k + mu_c. Returns the symbols and the dequantized latent the decoder
/// will see.
pub fn quantize_infer(y: &Tensor<f32>, model: &LikelihoodModel) -> Result<(QuantizedLatent, Tensor<f32>)> {
    let shape = y.shape();
    if shape.len() != 3 {
        return Err(Error::shape("quantize", format!("latent must be rank 3, got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if c != model.channels() {
        return Err(Error::shape(
            "quantize",
            format!("latent has {c} channels, entropy model has {}", model.channels()),
        ));
    }
    let mut symbols = Vec::with_capacity(h * w * c);
    let mut recon = Vec::with_capacity(h * w * c);
    let mut clamped = 0u64;
    for (i, &v) in y.data().iter().enumerate() {
        let mu = model.mu[i % c];
        let k = (f64::from(v) - mu).round() as i64;
        let k = if (i64::from(SYMBOL_MIN)..=i64::from(SYMBOL_MAX)).contains(&k) {
            k as i32
        } else {
            clamped += 1;
            k.clamp(i64::from(SYMBOL_MIN), i64::from(SYMBOL_MAX)) as i32
        };
        symbols.push(k as i8);
        recon.push((f64::from(k) + mu) as f32);
    }
    Ok((
        QuantizedLatent { symbols, height: h, width: w, channels: c, clamped },
        Tensor::new([h, w, c], recon)?,
    ))
}

/// Decoder-side dequantization of coded symbols.
pub fn dequantize(q: &QuantizedLatent, model: &LikelihoodModel) -> Result<Tensor<f32>> {
    if q.channels != model.channels() {
        return Err(Error::shape(
            "dequantize",
            format!("symbols have {} channels, entropy model has {}", q.channels, model.channels()),
        ));
    }
    let data = q
        .symbols
        .iter()
        .enumerate()
        .map(|(i, &k)| (f64::from(k) + model.mu[i % q.channels]) as f32)
        .collect();
    Tensor::new([q.height, q.width, q.channels], data)
}
