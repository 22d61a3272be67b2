//! Small convolutional feature extractor producing `D×K×K` maps per canvas.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `conv(kernel, stride, same padding) → bias → ReLU → max-pool(pool)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Pool window; 1 disables pooling.
    pub pool: usize,
}

impl ConvBlock {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        Self { out_channels, kernel, stride, pool }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock>,
}

impl BackboneConfig {
    /// 64×64 RGB input, three conv3×3/ReLU/pool2 blocks with 16/32/64 channels.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            blocks: vec![
                ConvBlock::new(16, 3, 1, 2),
                ConvBlock::new(32, 3, 1, 2),
                ConvBlock::new(64, 3, 1, 2),
            ],
        }
    }

    /// `(K, D)`: spatial side and channel count of the final feature map.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        let mut side = self.input_size;
        let mut channels = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel == 0 || b.stride == 0 || b.pool == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!("block {i} has a zero size")));
            }
            if b.kernel > side + 2 * b.pad() {
                return Err(Error::Config(format!("block {i}: kernel larger than input {side}")));
            }
            side = (side + 2 * b.pad() - b.kernel) / b.stride + 1;
            if b.pool > side {
                return Err(Error::Config(format!("block {i}: pool {} exceeds side {side}", b.pool)));
            }
            side /= b.pool;
            channels = b.out_channels;
        }
        Ok((side, channels))
    }
}

/// Feature maps of one canvas, `D×K×K`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    kernels: Vec<ParamId>,
    biases: Vec<ParamId>,
    feature_side: usize,
    feature_dim: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (feature_side, feature_dim) = config.output_dims()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = config.in_channels;
        for (i, b) in config.blocks.iter().enumerate() {
            let fan_in = c_in * b.kernel * b.kernel;
            // He-uniform: keeps activation scale through the ReLU stack.
            let bound = (6.0 / fan_in as f64).sqrt();
            let k = Tensor::uniform(&[b.out_channels, c_in, b.kernel, b.kernel], bound, rng);
            kernels.push(store.add(format!("backbone/{i}/kernel"), ParamGroup::Backbone, k));
            biases.push(store.add(
                format!("backbone/{i}/bias"),
                ParamGroup::Backbone,
                Tensor::zeros(&[b.out_channels]),
            ));
            c_in = b.out_channels;
        }
        Ok(Self { config, kernels, biases, feature_side, feature_dim })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `K`.
    pub fn feature_side(&self) -> usize {
        self.feature_side
    }

    /// `D`.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [self.config.in_channels, self.config.input_size, self.config.input_size];
        if shape != want {
            return Err(Error::Input(format!("canvas shape {shape:?}, backbone expects {want:?}")));
        }
        Ok(())
    }

    /// Differentiable forward pass of one canvas.
    pub fn forward(&self, g: &mut Graph, params: &Bindings, pixels: Var) -> Result<Var> {
        self.check_input(g.shape(pixels))?;
        let mut x = pixels;
        for (i, b) in self.config.blocks.iter().enumerate() {
            x = g.conv2d(x, params.var(self.kernels[i]), b.stride, b.pad())?;
            x = g.channel_bias(x, params.var(self.biases[i]))?;
            x = g.relu(x);
            if b.pool > 1 {
                x = g.max_pool2d(x, b.pool)?;
            }
        }
        Ok(x)
    }

    /// Forward pass without gradient tracking.
    pub fn extract(&self, store: &ParamStore, pixels: &Tensor, t: usize) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, |_| false);
        let x = g.constant(pixels.clone());
        let out = self.forward(&mut g, &bound, x)?;
        Ok(FeatureMap { values: g.value(out).clone(), t })
    }

    /// Applies the single shared parameter set to every canvas in order.
    pub fn extract_sequence(&self, store: &ParamStore, canvases: &[Tensor]) -> Result<Vec<FeatureMap>> {
        canvases
            .iter()
            .enumerate()
            .map(|(t, c)| self.extract(store, c, t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_shape_arithmetic() {
        assert_eq!(BackboneConfig::desk().output_dims().unwrap(), (8, 64));
    }

    #[test]
    fn zero_canvas_zero_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(BackboneConfig::desk(), &mut store, &mut rng).unwrap();
        let fm = bb.extract(&store, &Tensor::zeros(&[3, 64, 64]), 0).unwrap();
        assert_eq!(fm.values.shape(), &[64, 8, 8]);
        assert!(fm.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn size_mismatch_is_input_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(BackboneConfig::desk(), &mut store, &mut rng).unwrap();
        assert!(matches!(
            bb.extract(&store, &Tensor::zeros(&[3, 32, 32]), 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = BackboneConfig {
            input_size: 4,
            in_channels: 1,
            blocks: vec![ConvBlock::new(2, 3, 1, 2), ConvBlock::new(2, 3, 1, 2), ConvBlock::new(2, 3, 1, 2)],
        };
        assert!(cfg.output_dims().is_err());
    }
}
