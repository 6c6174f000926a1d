//! Network building blocks registered against a `ParameterStore`.

use crate::tensor::{ParameterStore, RngStream, Tensor};
use crate::Result;

/// Weight initialization for a layer.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in +/- sqrt(1 / fan_in).
    Uniform,
    /// All zeros (used for the final projection of distribution heads so
    /// every latent starts as a standard normal).
    Zero,
}

fn init_weights(n: usize, fan_in: usize, init: Init, rng: &mut RngStream) -> Vec<f32> {
    match init {
        Init::Zero => vec![0.0; n],
        Init::Uniform => {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| ((rng.uniform() * 2.0 - 1.0) * bound) as f32)
                .collect()
        }
    }
}

pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            Tensor::param(init_weights(in_dim * out_dim, in_dim, init, rng), &[in_dim, out_dim])?,
        )?;
        let bias = store.register(
            &format!("{name}.bias"),
            Tensor::param(vec![0.0; out_dim], &[out_dim])?,
        )?;
        Ok(Dense { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.dense(&self.weight, &self.bias)
    }
}

pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let k = store.register(
            &format!("{name}.weight"),
            Tensor::param(
                init_weights(out_ch * fan_in, fan_in, Init::Uniform, rng),
                &[out_ch, in_ch, kernel, kernel],
            )?,
        )?;
        let bias = store.register(
            &format!("{name}.bias"),
            Tensor::param(vec![0.0; out_ch], &[out_ch])?,
        )?;
        Ok(Conv2d {
            kernel: k,
            bias,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.kernel, &self.bias, self.stride)
    }
}

pub struct ConvTranspose2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        output_padding: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let k = store.register(
            &format!("{name}.weight"),
            Tensor::param(
                init_weights(in_ch * out_ch * kernel * kernel, fan_in, Init::Uniform, rng),
                &[in_ch, out_ch, kernel, kernel],
            )?,
        )?;
        let bias = store.register(
            &format!("{name}.bias"),
            Tensor::param(vec![0.0; out_ch], &[out_ch])?,
        )?;
        Ok(ConvTranspose2d {
            kernel: k,
            bias,
            stride,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d_transpose(&self.kernel, &self.bias, self.stride, self.output_padding)
    }
}

/// Two fully-connected layers with a central ReLU. Instances along the
/// latent hierarchy share this architecture but never share weights.
pub struct MlpBlock {
    fc1: Dense,
    fc2: Dense,
}

impl MlpBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        final_init: Init,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(MlpBlock {
            fc1: Dense::new(store, &format!("{name}.fc1"), in_dim, hidden, Init::Uniform, rng)?,
            fc2: Dense::new(store, &format!("{name}.fc2"), hidden, out_dim, final_init, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }
}

/// Standard four-gate LSTM cell. The input is always `mu ++ log_var ++ z`;
/// variants that do not condition on the sample feed zeros in the z slot,
/// so parameter shapes agree across variants.
pub struct LstmCell {
    w_input: Tensor,
    w_hidden: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(LstmCell {
            w_input: store.register(
                &format!("{name}.w_input"),
                Tensor::param(
                    init_weights(input_dim * 4 * hidden, input_dim, Init::Uniform, rng),
                    &[input_dim, 4 * hidden],
                )?,
            )?,
            w_hidden: store.register(
                &format!("{name}.w_hidden"),
                Tensor::param(
                    init_weights(hidden * 4 * hidden, hidden, Init::Uniform, rng),
                    &[hidden, 4 * hidden],
                )?,
            )?,
            bias: store.register(
                &format!("{name}.bias"),
                Tensor::param(vec![0.0; 4 * hidden], &[4 * hidden])?,
            )?,
            hidden,
        })
    }

    /// One transition: returns (h, c). Gate order: input, forget, cell, output.
    pub fn forward(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let pre = x
            .dense(&self.w_input, &self.bias)?
            .add(&h.matmul(&self.w_hidden)?)?;
        let hs = self.hidden;
        let i = pre.narrow(1, 0, hs)?.sigmoid();
        let f = pre.narrow(1, hs, hs)?.sigmoid();
        let g = pre.narrow(1, 2 * hs, hs)?.tanh();
        let o = pre.narrow(1, 3 * hs, hs)?.sigmoid();
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh())?;
        Ok((h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lstm_maps_zero_cell_to_zero() {
        // all params zero, c_prev = 0: gates = 0.5, candidate = 0 -> h = c = 0
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(1);
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        cell.w_input.set_data(|d| d.fill(0.0));
        cell.w_hidden.set_data(|d| d.fill(0.0));
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5], &[1, 3]).unwrap();
        let h0 = Tensor::zeros(&[1, 4]);
        let c0 = Tensor::zeros(&[1, 4]);
        let (h, c) = cell.forward(&x, &h0, &c0).unwrap();
        assert_eq!(h.to_vec(), vec![0.0; 4]);
        assert_eq!(c.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn lstm_gradient_through_unrolled_steps() {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(7);
        let cell = LstmCell::new(&mut store, "lstm", 2, 3, &mut rng).unwrap();
        let point = Tensor::from_vec(vec![0.3, -0.8], &[1, 2]).unwrap();
        let err = crate::tensor::grad_check(
            |x| {
                let mut h = Tensor::zeros(&[1, 3]);
                let mut c = Tensor::zeros(&[1, 3]);
                for _ in 0..8 {
                    let (h2, c2) = cell.forward(x, &h, &c)?;
                    h = h2;
                    c = c2;
                }
                Ok(h.sum_all())
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "max relative error {err}");
    }

    #[test]
    fn mlp_block_zero_final_outputs_zero() {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(3);
        let block = MlpBlock::new(&mut store, "m", 4, 8, 6, Init::Zero, &mut rng).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        assert_eq!(block.forward(&x).unwrap().to_vec(), vec![0.0; 6]);
    }
}
