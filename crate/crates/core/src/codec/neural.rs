//! Dense autoencoder with hand-written reverse-mode gradients.
//!
//! The decoder mirrors the encoder widths. Affine layers alternate with
//! leaky-rectifier activations whose negative slopes are learnable per unit;
//! the latent junction and the final output stay linear. Parameters live in
//! one flat vector with a fixed layout (per layer: weights row-major, then
//! biases, then slopes when the layer is activated), which is also the
//! checkpoint serialization order.

use rand::distributions::Distribution;
use rand_distr::StandardNormal;

use super::{finite_vec, Codec, CodecError};
use crate::rng;

/// Initial value of the learnable negative slopes.
const INITIAL_SLOPE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpec {
    in_dim: usize,
    out_dim: usize,
    w_off: usize,
    b_off: usize,
    /// Offset of the per-unit negative slopes; `None` for linear layers.
    alpha_off: Option<usize>,
}

/// Fully connected autoencoder; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralCodec {
    encoder_widths: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
}

/// Activations cached by a training forward pass.
pub(crate) struct ForwardCache {
    /// `acts[i]` is the input of layer `i`; `acts.last()` is the output.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values of each layer.
    pre: Vec<Vec<f64>>,
}

impl NeuralCodec {
    /// Builds a codec from encoder widths `[n, hidden.., m]`; the decoder is
    /// the mirror image. Weights get zero-mean normal entries with standard
    /// deviation `sqrt(2 / fan_in)`, biases start at zero and slopes at 0.25.
    pub fn new(encoder_widths: Vec<usize>, seed: u64) -> Result<Self, CodecError> {
        if encoder_widths.is_empty() {
            return Err(CodecError::BadArchitecture("need at least one width"));
        }
        if encoder_widths.iter().any(|w| *w == 0) {
            return Err(CodecError::BadArchitecture("zero-sized layer"));
        }

        let stack = full_stack(&encoder_widths);
        let encoder_layers = encoder_widths.len() - 1;
        let total_layers = stack.len() - 1;
        let mut layers = Vec::with_capacity(total_layers);
        let mut off = 0;
        for i in 0..total_layers {
            let (in_dim, out_dim) = (stack[i], stack[i + 1]);
            let activated = i + 1 != encoder_layers && i + 1 != total_layers;
            let w_off = off;
            let b_off = w_off + in_dim * out_dim;
            let alpha_off = if activated { Some(b_off + out_dim) } else { None };
            off = b_off + out_dim + if activated { out_dim } else { 0 };
            layers.push(LayerSpec { in_dim, out_dim, w_off, b_off, alpha_off });
        }

        let mut params = vec![0.0; off];
        let mut rng = rng::stream(seed);
        for layer in &layers {
            let sd = (2.0 / layer.in_dim as f64).sqrt();
            for w in &mut params[layer.w_off..layer.w_off + layer.in_dim * layer.out_dim] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = sd * z;
            }
            if let Some(a_off) = layer.alpha_off {
                params[a_off..a_off + layer.out_dim].fill(INITIAL_SLOPE);
            }
        }
        Ok(Self { encoder_widths, layers, params })
    }

    /// Default desk-scale architecture: `n -> 4m -> m` mirrored.
    pub fn with_default_arch(n: usize, m: usize, seed: u64) -> Result<Self, CodecError> {
        Self::new(vec![n, 4 * m, m], seed)
    }

    /// Rebuilds a codec from serialized widths and parameters.
    pub fn from_parts(encoder_widths: Vec<usize>, params: Vec<f64>) -> Result<Self, CodecError> {
        let mut codec = Self::new(encoder_widths, 0)?;
        if params.len() != codec.params.len() {
            return Err(CodecError::DimensionMismatch {
                got: params.len(),
                want: codec.params.len(),
            });
        }
        codec.params = params;
        Ok(codec)
    }

    pub fn encoder_widths(&self) -> &[usize] {
        &self.encoder_widths
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn encoder_layers(&self) -> usize {
        self.encoder_widths.len() - 1
    }

    fn run_layers(&self, range: std::ops::Range<usize>, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        for layer in &self.layers[range] {
            a = self.layer_forward(layer, &a).0;
        }
        a
    }

    /// Affine + optional activation; returns (output, pre-activation).
    fn layer_forward(&self, layer: &LayerSpec, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = vec![0.0; layer.out_dim];
        for r in 0..layer.out_dim {
            let row = &self.params[layer.w_off + r * layer.in_dim..layer.w_off + (r + 1) * layer.in_dim];
            let mut acc = self.params[layer.b_off + r];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            pre[r] = acc;
        }
        let out = match layer.alpha_off {
            None => pre.clone(),
            Some(a_off) => pre
                .iter()
                .enumerate()
                .map(|(r, z)| if *z >= 0.0 { *z } else { self.params[a_off + r] * z })
                .collect(),
        };
        (out, pre)
    }

    /// Forward pass through the whole stack, keeping the values backprop
    /// needs.
    pub(crate) fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for layer in &self.layers {
            let (out, z) = self.layer_forward(layer, acts.last().unwrap());
            pre.push(z);
            acts.push(out);
        }
        ForwardCache { acts, pre }
    }

    pub(crate) fn output<'c>(&self, cache: &'c ForwardCache) -> &'c [f64] {
        cache.acts.last().unwrap()
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/doutput`; returns
    /// nothing else. `grad` must have the parameter layout and length.
    pub(crate) fn backward(&self, cache: &ForwardCache, dout: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut delta = dout.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            // Through the activation.
            if let Some(a_off) = layer.alpha_off {
                for r in 0..layer.out_dim {
                    let z = cache.pre[i][r];
                    if z < 0.0 {
                        grad[a_off + r] += delta[r] * z;
                        delta[r] *= self.params[a_off + r];
                    }
                }
            }
            // Through the affine map.
            let input = &cache.acts[i];
            let mut prev = vec![0.0; layer.in_dim];
            for r in 0..layer.out_dim {
                let d = delta[r];
                grad[layer.b_off + r] += d;
                let w_row = layer.w_off + r * layer.in_dim;
                for c in 0..layer.in_dim {
                    grad[w_row + c] += d * input[c];
                    prev[c] += self.params[w_row + c] * d;
                }
            }
            delta = prev;
        }
    }
}

fn full_stack(encoder_widths: &[usize]) -> Vec<usize> {
    let mut stack = encoder_widths.to_vec();
    stack.extend(encoder_widths.iter().rev().skip(1));
    stack
}

impl Codec for NeuralCodec {
    fn input_dim(&self) -> usize {
        self.encoder_widths[0]
    }

    fn latent_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap()
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>, CodecError> {
        if x.len() != self.input_dim() {
            return Err(CodecError::DimensionMismatch { got: x.len(), want: self.input_dim() });
        }
        finite_vec(self.run_layers(0..self.encoder_layers(), x))
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>, CodecError> {
        if z.len() != self.latent_dim() {
            return Err(CodecError::DimensionMismatch { got: z.len(), want: self.latent_dim() });
        }
        finite_vec(self.run_layers(self.encoder_layers()..self.layers.len(), z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_parameters_map_everything_to_zero() {
        let mut codec = NeuralCodec::new(vec![5, 3, 2], 1).unwrap();
        codec.params_mut().fill(0.0);
        let x = [1.0, -2.0, 3.0, 0.5, 7.0];
        let z = codec.encode(&x).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let back = codec.decode(&z).unwrap();
        assert!(back.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_manual_recomputation() {
        // 4-2-4 toy network recomputed layer by layer with explicit loops.
        let codec = NeuralCodec::new(vec![4, 2], 3).unwrap();
        let x = [0.5, -1.0, 2.0, 0.25];
        let p = codec.params();
        // Encoder layer: W (2x4) rows then b (2). No activation (latent).
        let mut z = [0.0f64; 2];
        for r in 0..2 {
            let mut acc = p[8 + r];
            for c in 0..4 {
                acc += p[r * 4 + c] * x[c];
            }
            z[r] = acc;
        }
        let enc = codec.encode(&x).unwrap();
        assert_abs_diff_eq!(enc[0], z[0], epsilon = 1e-12);
        assert_abs_diff_eq!(enc[1], z[1], epsilon = 1e-12);
        // Decoder layer: W (4x2) at offset 10, b (4) at offset 18.
        let mut out = [0.0f64; 4];
        for r in 0..4 {
            let mut acc = p[18 + r];
            for c in 0..2 {
                acc += p[10 + r * 2 + c] * z[c];
            }
            out[r] = acc;
        }
        let dec = codec.decode(&enc).unwrap();
        for (a, b) in dec.iter().zip(&out) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn activated_forward_matches_manual_recomputation() {
        let codec = NeuralCodec::new(vec![3, 4, 2], 7).unwrap();
        let x = [0.3, -0.7, 1.1];
        let p = codec.params();
        // Layer 0: 3 -> 4 with slopes. Offsets: W 0..12, b 12..16, a 16..20.
        let mut h = [0.0f64; 4];
        for r in 0..4 {
            let mut acc = p[12 + r];
            for c in 0..3 {
                acc += p[r * 3 + c] * x[c];
            }
            h[r] = if acc >= 0.0 { acc } else { p[16 + r] * acc };
        }
        // Layer 1: 4 -> 2 linear. Offsets: W 20..28, b 28..30.
        let mut z = [0.0f64; 2];
        for r in 0..2 {
            let mut acc = p[28 + r];
            for c in 0..4 {
                acc += p[20 + r * 4 + c] * h[c];
            }
            z[r] = acc;
        }
        let enc = codec.encode(&x).unwrap();
        assert_abs_diff_eq!(enc[0], z[0], epsilon = 1e-12);
        assert_abs_diff_eq!(enc[1], z[1], epsilon = 1e-12);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = NeuralCodec::new(vec![6, 4, 2], 11).unwrap();
        let b = NeuralCodec::new(vec![6, 4, 2], 11).unwrap();
        assert_eq!(a, b);
        let c = NeuralCodec::new(vec![6, 4, 2], 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn decoder_mirrors_encoder() {
        let codec = NeuralCodec::new(vec![8, 6, 4, 2], 5).unwrap();
        assert_eq!(codec.input_dim(), 8);
        assert_eq!(codec.latent_dim(), 2);
        let z = codec.encode(&[0.1; 8]).unwrap();
        assert_eq!(z.len(), 2);
        assert_eq!(codec.decode(&z).unwrap().len(), 8);
    }

    #[test]
    fn from_parts_validates_length() {
        assert!(matches!(
            NeuralCodec::from_parts(vec![4, 2], vec![0.0; 3]),
            Err(CodecError::DimensionMismatch { .. })
        ));
    }
}
