//! Shared network building blocks: dense layers, kernel-3 temporal
//! convolutions, sinusoidal time features, and parameter bookkeeping.

use std::collections::BTreeMap;

use crate::numerics::{Rng, Tape, Tensor, Var};

/// Number of sinusoidal features carried per timestep.
pub const TIME_FEATURES: usize = 8;

/// Sinusoidal features of a diffusion time t ∈ [0, 1]: sin/cos pairs at
/// geometrically spaced frequencies. Smooth in t by construction.
pub fn time_features(t: f64) -> Tensor {
    let mut data = Vec::with_capacity(TIME_FEATURES);
    let mut freq = 1.0;
    for _ in 0..TIME_FEATURES / 2 {
        data.push((std::f64::consts::PI * freq * t).sin());
        data.push((std::f64::consts::PI * freq * t).cos());
        freq *= 2.0;
    }
    Tensor::from_vec(&[TIME_FEATURES], data)
}

/// Xavier-style init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.range_f64(-a, a)).collect();
    Tensor::from_vec(&[rows, cols], data)
}

/// Dense layer: x [L, in] ↦ x·W + b, W [in, out], b [out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Linear {
        Linear {
            w: xavier(fan_in, fan_out, rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn bind(&self, tape: &Tape) -> LinearVars {
        LinearVars {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward(&self, x: &Var) -> Var {
        let rows = x.shape()[0];
        x.matmul(&self.w).add(&self.b.broadcast_rows(rows))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Residual block with a kernel-3 temporal convolution:
/// h ← h + tanh(shift₋₁(h)·W_l + h·W_c + shift₊₁(h)·W_r + b).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub wl: Tensor,
    pub wc: Tensor,
    pub wr: Tensor,
    pub b: Tensor,
}

impl ConvBlock {
    pub fn new(width: usize, rng: &mut Rng) -> ConvBlock {
        ConvBlock {
            wl: xavier(width, width, rng),
            wc: xavier(width, width, rng),
            wr: xavier(width, width, rng),
            b: Tensor::zeros(&[width]),
        }
    }

    pub fn bind(&self, tape: &Tape) -> ConvBlockVars {
        ConvBlockVars {
            wl: tape.leaf(self.wl.clone()),
            wc: tape.leaf(self.wc.clone()),
            wr: tape.leaf(self.wr.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.wl"), &self.wl));
        out.push((format!("{prefix}.wc"), &self.wc));
        out.push((format!("{prefix}.wr"), &self.wr));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.wl"), &mut self.wl));
        out.push((format!("{prefix}.wc"), &mut self.wc));
        out.push((format!("{prefix}.wr"), &mut self.wr));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

pub struct ConvBlockVars {
    pub wl: Var,
    pub wc: Var,
    pub wr: Var,
    pub b: Var,
}

impl ConvBlockVars {
    pub fn forward(&self, h: &Var) -> Var {
        let rows = h.shape()[0];
        let pre = h
            .shift_rows(1)
            .matmul(&self.wl)
            .add(&h.matmul(&self.wc))
            .add(&h.shift_rows(-1).matmul(&self.wr))
            .add(&self.b.broadcast_rows(rows));
        h.add(&pre.tanh())
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.wl"), self.wl.clone()));
        out.push((format!("{prefix}.wc"), self.wc.clone()));
        out.push((format!("{prefix}.wr"), self.wr.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Extracts named gradients for bound parameters after a backward pass.
pub fn grads_by_name(
    bound: &[(String, Var)],
    grads: &crate::numerics::Gradients,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, var) in bound {
        let g = grads.get(var).expect("bound variable on tape");
        out.insert(name.clone(), g);
    }
    out
}

/// Copies arrays from a named map into mutable parameter slots.
/// Missing or shape-mismatched names are reported by full name.
pub fn load_named(
    params: Vec<(String, &mut Tensor)>,
    arrays: &BTreeMap<String, Tensor>,
) -> Result<(), String> {
    for (name, slot) in params {
        let src = arrays
            .get(&name)
            .ok_or_else(|| format!("missing array '{name}'"))?;
        if src.shape() != slot.shape() {
            return Err(format!(
                "array '{}' has shape {:?}, expected {:?}",
                name,
                src.shape(),
                slot.shape()
            ));
        }
        *slot = src.clone();
    }
    Ok(())
}

/// CRC32 (IEEE) over the raw bits of parameters, in name order.
pub fn param_checksum(params: &[(String, &Tensor)]) -> u32 {
    let mut crc = crate::harness::checkpoint::Crc32::new();
    for (name, t) in params {
        crc.update(name.as_bytes());
        for v in t.data() {
            crc.update(&v.to_bits().to_le_bytes());
        }
    }
    crc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_features_smooth_and_bounded() {
        let a = time_features(0.5);
        let b = time_features(0.5 + 1e-6);
        assert_eq!(a.numel(), TIME_FEATURES);
        assert!(a.sub(&b).l2_norm() < 1e-4);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn linear_forward_shapes() {
        let mut rng = Rng::new(1).substream("init");
        let lin = Linear::new(3, 5, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let y = lin.bind(&tape).forward(&x);
        assert_eq!(y.shape(), vec![4, 5]);
    }

    #[test]
    fn conv_block_keeps_shape() {
        let mut rng = Rng::new(2).substream("init");
        let blk = ConvBlock::new(6, &mut rng);
        let tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[5, 6]));
        let y = blk.bind(&tape).forward(&h);
        assert_eq!(y.shape(), vec![5, 6]);
    }
}
