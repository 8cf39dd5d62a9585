//! Temporal convolution, (bi)LSTM, dense projection and dropout.
//!
//! Layers hold [`ParamId`]s into a shared [`ParamStore`]; parameter names
//! follow `<layer>.<field>` and are the keys of the checkpoint format.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Direction, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{Mode, SeedRng};

/// Uniform(−b, b) with b = √(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeedRng) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data length agree")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Same-length temporal convolution, weight C_out×C_in×K with odd K.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_size: usize,
}

impl Conv1dParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel_size}")));
        }
        let w = glorot_uniform(
            &[c_out, c_in, kernel_size],
            c_in * kernel_size,
            c_out * kernel_size,
            rng,
        );
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            c_in,
            c_out,
            kernel_size,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv1d_same(x, w, b)
    }
}

/// Unidirectional LSTM. Gate row blocks are ordered (input, forget, cell,
/// output) in `w_input`, `w_hidden` and `bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParamStore, name: &str, c_in: usize, hidden: usize, rng: &mut SeedRng) -> Result<Self> {
        let g4 = 4 * hidden;
        let w_input = glorot_uniform(&[g4, c_in], c_in, g4, rng);
        let w_hidden = glorot_uniform(&[g4, hidden], hidden, g4, rng);
        let mut bias = Tensor::zeros(&[g4]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(Self {
            w_input: store.add(format!("{name}.w_input"), w_input)?,
            w_hidden: store.add(format!("{name}.w_hidden"), w_hidden)?,
            bias: store.add(format!("{name}.bias"), bias)?,
            c_in,
            hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dir: Direction) -> Result<Var> {
        let wi = tape.param(store, self.w_input);
        let wh = tape.param(store, self.w_hidden);
        let b = tape.param(store, self.bias);
        tape.lstm(x, wi, wh, b, dir)
    }
}

/// Forward and backward LSTMs over the same input; output is `[fwd | bwd]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn init(store: &mut ParamStore, name: &str, c_in: usize, hidden: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            forward: LstmParams::init(store, &format!("{name}.fwd"), c_in, hidden, rng)?,
            backward: LstmParams::init(store, &format!("{name}.bwd"), c_in, hidden, rng)?,
        })
    }

    pub fn out_width(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.forward.forward(tape, store, x, Direction::Forward)?;
        let b = self.backward.forward(tape, store, x, Direction::Backward)?;
        tape.concat_last_axis(&[f, b])
    }
}

/// Per-row affine map `x·weight + bias`, weight D_in×C.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl DenseParams {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                glorot_uniform(&[d_in, d_out], d_in, d_out, rng),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1−rate). Identity when evaluating.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let rng = match mode {
        Mode::Train(rng) if rate > 0.0 => rng,
        _ => return Ok(x),
    };
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(tape.value(x).shape());
    for m in mask.data_mut() {
        *m = if rng.random::<f64>() < rate { 0.0 } else { keep };
    }
    tape.mul_const(x, mask)
}
