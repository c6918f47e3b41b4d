//! Wavelet-domain mixture-of-experts module: guidance vector, dual gating
//! heads, dense per-band expert mixtures, inverse transform, and the
//! auxiliary load-balancing loss.
//!
//! Each module decomposes a feature map with the orthonormal Haar transform,
//! runs a bank of three low-band experts on the approximation band and three
//! high-band experts on the concatenated detail bands, mixes the bank outputs
//! with softmax gate weights derived from a per-image guidance vector, and
//! recombines. The recombined feature feeds two zero-initialized 1x1 convs
//! that predict affine modulation fields, so the whole branch starts as a
//! no-op.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::experts::{HighExpert, LowExpert, SftParams};
use crate::params::{Binder, ParamStore};
use crate::tensor::{PoolMode, Tape, Tensor};
use crate::wavelet::{dwt2, idwt2, SubBands};

/// Per-image global descriptor shared by every gating head.
#[derive(Clone, Debug)]
pub struct GuidanceVector {
    pub v: Tensor,
}

/// Softmax gate rows for the two expert banks: `low [B,N]`, `high [B,M]`.
#[derive(Clone, Debug)]
pub struct GateWeights {
    pub low: Tensor,
    pub high: Tensor,
}

/// v = concat(GAP(f_enc), GMP(f_enc), GAP(f_prior), GMP(f_prior)).
pub fn build_guidance(tape: &Tape, f_enc: &Tensor, f_prior: &Tensor) -> Result<GuidanceVector> {
    let ea = tape.pool_global(f_enc, PoolMode::Avg)?;
    let em = tape.pool_global(f_enc, PoolMode::Max)?;
    let pa = tape.pool_global(f_prior, PoolMode::Avg)?;
    let pm = tape.pool_global(f_prior, PoolMode::Max)?;
    let v = tape.concat(&[&ea, &em, &pa, &pm], 1)?;
    tape.check_finite(&v, "guidance vector")?;
    Ok(GuidanceVector { v })
}

/// One mixture-of-experts module with its router and modulation head.
#[derive(Clone, Debug)]
pub struct WdMoeModule {
    pub low_bank: Vec<LowExpert>,
    pub high_bank: Vec<HighExpert>,
    pub channels: usize,
    pub guidance_dim: usize,
    pub router_hidden: usize,
}

impl WdMoeModule {
    /// Default banks: low-expert width multipliers {0.5, 1.0, 1.5}, high-expert
    /// kernels {3, 5, 7}.
    pub fn new(channels: usize, guidance_dim: usize) -> Self {
        WdMoeModule {
            low_bank: [0.5, 1.0, 1.5]
                .iter()
                .map(|m| LowExpert { width_multiplier: *m })
                .collect(),
            high_bank: [3, 5, 7].iter().map(|k| HighExpert { kernel_size: *k }).collect(),
            channels,
            guidance_dim,
            router_hidden: 32,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str) {
        let c = self.channels;
        for (i, e) in self.low_bank.iter().enumerate() {
            e.init(store, rng, &format!("{prefix}.low{i}"), c);
        }
        for (j, e) in self.high_bank.iter().enumerate() {
            e.init(store, rng, &format!("{prefix}.high{j}"), 3 * c);
        }
        for head in ["route_low", "route_high"] {
            store.add_linear(rng, &format!("{prefix}.{head}.fc1"), self.guidance_dim, self.router_hidden, false);
            store.add_linear(rng, &format!("{prefix}.{head}.fc2"), self.router_hidden, 3, true);
        }
        store.add_conv(rng, &format!("{prefix}.sft_scale"), c, c, 1, 1, true);
        store.add_conv(rng, &format!("{prefix}.sft_shift"), c, c, 1, 1, true);
    }

    fn head(&self, b: &Binder, prefix: &str, head: &str, v: &Tensor) -> Result<Tensor> {
        let tape = b.tape;
        let h = tape.add(
            &tape.matmul(v, &b.get(&format!("{prefix}.{head}.fc1.w"))?)?,
            &b.get(&format!("{prefix}.{head}.fc1.b"))?,
        )?;
        let logits = tape.add(
            &tape.matmul(&tape.gelu(&h), &b.get(&format!("{prefix}.{head}.fc2.w"))?)?,
            &b.get(&format!("{prefix}.{head}.fc2.b"))?,
        )?;
        tape.check_finite(&logits, "router logits")?;
        tape.softmax_lastdim(&logits)
    }

    /// Dense soft gating over both banks; every expert gets nonzero weight.
    pub fn route(&self, b: &Binder, prefix: &str, v: &GuidanceVector) -> Result<GateWeights> {
        Ok(GateWeights {
            low: self.head(b, prefix, "route_low", &v.v)?,
            high: self.head(b, prefix, "route_high", &v.v)?,
        })
    }

    /// Gate-weighted sum of the band transform over a bank.
    fn mixture(
        b: &Binder,
        gate: &Tensor,
        outputs: &[Tensor],
    ) -> Result<Tensor> {
        let tape = b.tape;
        let batch = gate.shape[0];
        let n = gate.shape[1];
        let cols = tape.split(gate, &vec![1; n], 1)?;
        let mut acc: Option<Tensor> = None;
        for (col, out) in cols.iter().zip(outputs) {
            let g = tape.reshape(col, &[batch, 1, 1, 1])?;
            let term = tape.mul(out, &g)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(&a, &term)?,
            });
        }
        Ok(acc.unwrap())
    }

    /// Applies both expert mixtures in the wavelet domain and recombines.
    pub fn band_transform(
        &self,
        b: &Binder,
        prefix: &str,
        x: &Tensor,
        gates: &GateWeights,
    ) -> Result<Tensor> {
        let tape = b.tape;
        let c = x.shape[1];
        let bands = dwt2(tape, x)?;

        let low_outs: Vec<Tensor> = self
            .low_bank
            .iter()
            .enumerate()
            .map(|(i, e)| e.forward(b, &format!("{prefix}.low{i}"), &bands.ll))
            .collect::<Result<_>>()?;
        let ll = Self::mixture(b, &gates.low, &low_outs)?;

        let high = tape.concat(&[&bands.lh, &bands.hl, &bands.hh], 1)?;
        let high_outs: Vec<Tensor> = self
            .high_bank
            .iter()
            .enumerate()
            .map(|(j, e)| e.forward(b, &format!("{prefix}.high{j}"), &high))
            .collect::<Result<_>>()?;
        let high = Self::mixture(b, &gates.high, &high_outs)?;
        let parts = tape.split(&high, &[c, c, c], 1)?;

        idwt2(
            tape,
            &SubBands {
                ll,
                lh: parts[0].clone(),
                hl: parts[1].clone(),
                hh: parts[2].clone(),
            },
        )
    }

    /// Full module: route, transform the bands, predict modulation fields.
    pub fn forward(
        &self,
        b: &Binder,
        prefix: &str,
        x: &Tensor,
        v: &GuidanceVector,
    ) -> Result<(SftParams, GateWeights)> {
        let tape = b.tape;
        if x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "wd-moe input spatial extent must be even, got {:?}",
                x.shape
            )));
        }
        let gates = self.route(b, prefix, v)?;
        let recombined = self.band_transform(b, prefix, x, &gates)?;
        let scale = tape.conv2d(
            &recombined,
            &b.get(&format!("{prefix}.sft_scale.w"))?,
            Some(&b.get(&format!("{prefix}.sft_scale.b"))?),
            1,
            0,
            1,
        )?;
        let shift = tape.conv2d(
            &recombined,
            &b.get(&format!("{prefix}.sft_shift.w"))?,
            Some(&b.get(&format!("{prefix}.sft_shift.b"))?),
            1,
            0,
            1,
        )?;
        Ok((SftParams { scale, shift }, gates))
    }
}

/// Mean over all gate rows of the squared coefficient of variation of
/// per-expert summed gate probability. Zero iff every expert in every head
/// carries equal importance.
pub fn load_balance_loss(tape: &Tape, all_gates: &[GateWeights]) -> Result<Tensor> {
    assert!(!all_gates.is_empty(), "load_balance_loss on empty gate list");
    let mut heads: Vec<&Tensor> = Vec::new();
    for g in all_gates {
        heads.push(&g.low);
        heads.push(&g.high);
    }
    let mut total: Option<Tensor> = None;
    for gate in &heads {
        let batch = gate.shape[0];
        let n = gate.shape[1];
        let ones = Tensor::constant(vec![1.0; batch], vec![1, batch])?;
        let importance = tape.matmul(&ones, gate)?; // [1, N]
        let mean = tape.scale(&tape.sum_all(&importance), 1.0 / n as f64);
        let diff = tape.sub(&importance, &mean)?;
        let var = tape.scale(&tape.sum_all(&tape.mul(&diff, &diff)?), 1.0 / n as f64);
        let cv2 = tape.div(&var, &tape.mul(&mean, &mean)?)?;
        total = Some(match total {
            None => cv2,
            Some(t) => tape.add(&t, &cv2)?,
        });
    }
    Ok(tape.scale(&total.unwrap(), 1.0 / heads.len() as f64))
}
