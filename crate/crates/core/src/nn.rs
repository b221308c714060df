//! Small learnable building blocks shared by the video and text sides.

use mmfuse_numcore::{Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Weights drawn from N(0, 1/in), zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let std = 1.0 / (input as f64).sqrt();
        let w = store.add(format!("{name}.w"), group, normal_tensor(rng, vec![input, output], std))?;
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(vec![output]))?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), group, Tensor::full(vec![d], 1.0))?,
            shift: store.add(format!("{name}.shift"), group, Tensor::zeros(vec![d]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps)?;
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul(n, gain)?;
        g.add(y, shift)
    }
}
