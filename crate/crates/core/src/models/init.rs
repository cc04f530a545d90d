use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use volab_tensor::Tensor;

/// Collects named parameters and buffers during model construction.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Init {
            rng,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    fn gaussian(&mut self, name: String, shape: &[usize], std: f64) {
        let n = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| (std * self.rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        self.params.insert(name, Tensor::from_vec(shape, data).expect("positive shape"));
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) {
        self.params.insert(name, Tensor::zeros(shape));
    }

    /// `[in, out]` weight with std `1/√in` and, optionally, a zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.gaussian(format!("{prefix}.weight"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        if bias {
            self.zeros(format!("{prefix}.bias"), &[fan_out]);
        }
    }

    /// `[out, in, kd, kh, kw]` kernel with He scaling, no bias.
    pub fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: [usize; 3]) {
        let fan_in = in_ch * k.iter().product::<usize>();
        self.gaussian(format!("{name}.weight"), &[out_ch, in_ch, k[0], k[1], k[2]], (2.0 / fan_in as f64).sqrt());
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.params.insert(format!("{prefix}.gamma"), Tensor::ones(&[width]));
        self.zeros(format!("{prefix}.beta"), &[width]);
    }

    pub fn batch_norm(&mut self, prefix: &str, channels: usize) {
        self.layer_norm(prefix, channels);
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::ones(&[channels]));
    }

    /// Small Gaussian (std 0.02) for tokens and embedding tables.
    pub fn embedding(&mut self, name: &str, shape: &[usize]) {
        self.gaussian(name.to_string(), shape, 0.02);
    }
}
