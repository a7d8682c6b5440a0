//! Parameterized layers shared by the encoder and the refiner.
//!
//! Layers only hold [`ParamId`]s, so one definition serves any element type:
//! a store can be cast to `f64` and the same layer evaluated on it.

use rand::Rng;

use crate::tensor::{ParamId, ParamStore, Real, Result, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        Self::with_std(store, name, din, dout, bias, 1.0 / (din as f64).sqrt(), rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = if std == 0.0 {
            store.add_zeros(format!("{name}.w"), &[din, dout])?
        } else {
            store.add_normal(format!("{name}.w"), &[din, dout], std, rng)?
        };
        let b = if bias {
            Some(store.add_zeros(format!("{name}.b"), &[dout])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Layer normalization over the last dimension with a learned affine map.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_full(format!("{name}.g"), &[dim], 1.0)?,
            bias: store.add_zeros(format!("{name}.b"), &[dim])?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, NORM_EPS)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(y, g)?;
        tape.add_row(y, b)
    }
}

/// NHWC convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), &[k, k, cin, cout], std, rng)?;
        let b = if bias {
            Some(store.add_zeros(format!("{name}.b"), &[cout])?)
        } else {
            None
        };
        Ok(Self { w, b, stride, pad: k / 2 })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}
