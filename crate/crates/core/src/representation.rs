//! The initiator's autoencoder and the published, query-only encoder.

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::nn::{chain, Activation, Loss, NeuralNet, NnError, Role, TrainConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RepresentationError {
    #[error("latent dimension {latent} must be smaller than input dimension {input}")]
    NotCompressive { latent: usize, input: usize },
    #[error("encoder output ({enc_out}) does not match decoder input ({dec_in})")]
    Mismatch { enc_out: usize, dec_in: usize },
    #[error("decoder output ({dec_out}) does not match encoder input ({enc_in})")]
    Shape { enc_in: usize, dec_out: usize },
    #[error("training set is empty")]
    Empty,
    #[error(transparent)]
    Net(#[from] NnError),
}

/// Layer widths of an encoder/decoder pair. The decoder mirrors the encoder's
/// hidden widths in reverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderArch {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default = "default_output")]
    pub output_activation: Activation,
}

fn default_output() -> Activation {
    Activation::Sigmoid
}

impl AutoencoderArch {
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            latent_dim,
            output_activation: Activation::Sigmoid,
        }
    }

    pub fn with_output(mut self, activation: Activation) -> Self {
        self.output_activation = activation;
        self
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.latent_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = self.encoder_widths();
        w.reverse();
        w
    }

    /// A freshly initialized decoder of this shape (also used for substitute decoders).
    pub fn decoder(&self, seed: u64) -> Result<NeuralNet, NnError> {
        NeuralNet::new(
            chain(&self.decoder_widths(), Activation::Relu, self.output_activation),
            Role::Decoder,
            seed,
        )
    }

    fn encoder(&self, seed: u64) -> Result<NeuralNet, NnError> {
        NeuralNet::new(
            chain(&self.encoder_widths(), Activation::Relu, Activation::Identity),
            Role::Encoder,
            seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    enc: NeuralNet,
    dec: NeuralNet,
}

impl Autoencoder {
    pub fn from_parts(enc: NeuralNet, dec: NeuralNet) -> Result<Self, RepresentationError> {
        if enc.output_dim() != dec.input_dim() {
            return Err(RepresentationError::Mismatch {
                enc_out: enc.output_dim(),
                dec_in: dec.input_dim(),
            });
        }
        if dec.output_dim() != enc.input_dim() {
            return Err(RepresentationError::Shape {
                enc_in: enc.input_dim(),
                dec_out: dec.output_dim(),
            });
        }
        if enc.output_dim() >= enc.input_dim() {
            return Err(RepresentationError::NotCompressive {
                latent: enc.output_dim(),
                input: enc.input_dim(),
            });
        }
        Ok(Self {
            enc: enc.with_role(Role::Encoder),
            dec: dec.with_role(Role::Decoder),
        })
    }

    pub fn encoder(&self) -> &NeuralNet {
        &self.enc
    }

    pub fn decoder(&self) -> &NeuralNet {
        &self.dec
    }

    pub fn into_parts(self) -> (NeuralNet, NeuralNet) {
        (self.enc, self.dec)
    }

    pub fn input_dim(&self) -> usize {
        self.enc.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc.output_dim()
    }

    /// Publishes a copy of the encoder as a query-only handle.
    pub fn publish(&self) -> EncoderHandle {
        EncoderHandle::publish(self.enc.clone())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, NnError> {
        self.dec.forward(z)
    }

    pub fn decode_batch(&self, z: &Matrix) -> Result<Matrix, NnError> {
        self.dec.forward_batch(z)
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix, NnError> {
        self.dec.forward_batch(&self.enc.forward_batch(x)?)
    }
}

/// Trains encoder and decoder jointly on `x -> x` with squared error and splits
/// the result at the latent layer.
pub fn train_autoencoder(
    samples: &Matrix,
    arch: &AutoencoderArch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Autoencoder, RepresentationError> {
    if arch.latent_dim >= arch.input_dim {
        return Err(RepresentationError::NotCompressive {
            latent: arch.latent_dim,
            input: arch.input_dim,
        });
    }
    if samples.is_empty() {
        return Err(RepresentationError::Empty);
    }
    let enc = arch.encoder(seed)?;
    let dec = arch.decoder(crate::seed::derive(seed, 1))?;
    let depth = enc.depth();
    let cfg = TrainConfig {
        loss: Loss::SquaredError,
        ..cfg.clone()
    };
    let trained = enc.stack(&dec)?.train(samples, samples, &cfg)?;
    let (enc, dec) = trained.split_at(depth, Role::Encoder, Role::Decoder);
    Autoencoder::from_parts(enc, dec)
}

/// Query-only access to a published encoder. Clones share the same network and
/// query counter.
///
/// The handle deliberately has no way to read the parameters back:
///
/// ```compile_fail
/// # use ars_core::representation::EncoderHandle;
/// fn leak(h: &EncoderHandle) { let _ = h.parameters(0); }
/// ```
///
/// ```compile_fail
/// # use ars_core::representation::EncoderHandle;
/// fn leak(h: &EncoderHandle) { let _ = &h.net; }
/// ```
#[derive(Clone, Debug)]
pub struct EncoderHandle {
    net: Arc<NeuralNet>,
    queries: Arc<AtomicU64>,
}

impl EncoderHandle {
    pub fn publish(enc: NeuralNet) -> Self {
        Self {
            net: Arc::new(enc.with_role(Role::Encoder)),
            queries: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.net.forward(x)
    }

    /// Encodes every row, preserving order. Counts one query per row.
    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix, NnError> {
        self.queries.fetch_add(x.rows() as u64, Ordering::Relaxed);
        self.net.forward_batch(x)
    }

    /// Total number of samples encoded through this handle and its clones.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// True when both handles refer to the same published encoder.
    pub fn same_encoder(&self, other: &EncoderHandle) -> bool {
        Arc::ptr_eq(&self.net, &other.net) || *self.net == *other.net
    }
}
