//! Multi-scale residual codec.
//!
//! `decompose` splits a latent into per-scale quantized residuals plus the
//! accumulated inputs the AR model consumes; `cascaded_modify` splices
//! externally supplied residuals into the preliminary scales and recomputes
//! everything downstream, so the spliced maps become the new starting point
//! of the generation pathway. With an identity quantizer the decomposition
//! is lossless: the final scale is computed at full resolution, so it
//! absorbs the entire remaining error.

use std::io::{Read, Write};

use crate::bsq::{pack_bits, unpack_bits, BitTokenMap, BsqQuantizer};
use crate::error::{Error, Result};
use crate::numerics::{resize_down, resize_up, Tensor};
use crate::schedule::ScaleSchedule;

/// Residual quantizer plugged into the codec.
#[derive(Clone, Copy, Debug)]
pub enum Quantizer {
    /// Pass residuals through unchanged (the lossless reference path).
    Identity,
    /// Binary spherical quantization.
    Bsq(BsqQuantizer),
}

impl Quantizer {
    fn apply(&self, r: &Tensor) -> Result<(Tensor, Option<BitTokenMap>)> {
        match self {
            Quantizer::Identity => Ok((r.clone(), None)),
            Quantizer::Bsq(q) => {
                let (bits, values) = q.quantize(r)?;
                Ok((values, Some(bits)))
            }
        }
    }
}

/// Per-scale quantized residuals R_k, bit labels (when quantized), and the
/// accumulated inputs F~_k (k = 1..K-1; the AR block for scale 1 uses the
/// condition embedding instead of a stored input).
#[derive(Clone, Debug)]
pub struct ResidualQueue {
    schedule: ScaleSchedule,
    residuals: Vec<Tensor>,
    labels: Option<Vec<BitTokenMap>>,
    inputs: Vec<Tensor>,
}

impl ResidualQueue {
    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    /// Quantized residual value map of scale k (1-based), shape (h_k, w_k, d).
    pub fn residual(&self, k: usize) -> &Tensor {
        &self.residuals[k - 1]
    }

    pub fn residuals(&self) -> &[Tensor] {
        &self.residuals
    }

    /// Accumulated input F~_k (1-based, k < K), shape (h_{k+1}, w_{k+1}, d).
    pub fn input(&self, k: usize) -> &Tensor {
        &self.inputs[k - 1]
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    /// Bit labels per scale; present when the queue was built with BSQ.
    pub fn labels(&self) -> Option<&[BitTokenMap]> {
        self.labels.as_deref()
    }

    pub fn label(&self, k: usize) -> Result<&BitTokenMap> {
        self.labels
            .as_ref()
            .map(|l| &l[k - 1])
            .ok_or_else(|| Error::InvalidArgument("queue has no bit labels (identity quantizer)".into()))
    }
}

fn check_latent(f: &Tensor, schedule: &ScaleSchedule) -> Result<(usize, usize, usize)> {
    let (h, w, d) = f.dims3()?;
    schedule.validate((h, w))?;
    if d != schedule.d() {
        return Err(Error::ShapeMismatch(format!(
            "latent has d={d}, schedule expects d={}",
            schedule.d()
        )));
    }
    Ok((h, w, d))
}

/// Multi-scale decomposition: R_k = Q(down(F - F_{k-1}, (h_k, w_k))) with
/// F_k accumulating the upsampled residuals, and F~_k = down(F_k, scale k+1).
pub fn decompose(f: &Tensor, schedule: &ScaleSchedule, quantizer: &Quantizer) -> Result<ResidualQueue> {
    let (h, w, _) = check_latent(f, schedule)?;
    let k_total = schedule.len();
    let mut residuals = Vec::with_capacity(k_total);
    let mut labels = Vec::with_capacity(k_total);
    let mut inputs = Vec::with_capacity(k_total.saturating_sub(1));
    let mut acc = Tensor::zeros(f.shape());
    for k in 1..=k_total {
        let diff = f.sub(&acc)?;
        let down = resize_down(&diff, schedule.scale(k))?;
        let (value, bits) = quantizer.apply(&down)?;
        acc = acc.add(&resize_up(&value, (h, w))?)?;
        residuals.push(value);
        if let Some(b) = bits {
            labels.push(b);
        }
        if k < k_total {
            inputs.push(resize_down(&acc, schedule.scale(k + 1))?);
        }
    }
    Ok(ResidualQueue {
        schedule: schedule.clone(),
        residuals,
        labels: if labels.len() == k_total { Some(labels) } else { None },
        inputs,
    })
}

/// Sum of upsampled residuals through scale `upto_k`; `upto_k = 0` is the
/// zero tensor (F_0).
pub fn accumulate(rq: &ResidualQueue, upto_k: usize) -> Result<Tensor> {
    let k_total = rq.schedule.len();
    if upto_k > k_total {
        return Err(Error::InvalidArgument(format!(
            "accumulate upto_k={upto_k} exceeds K={k_total}"
        )));
    }
    let (h, w) = rq.schedule.latent();
    let mut acc = Tensor::zeros(&[h, w, rq.schedule.d()]);
    for k in 1..=upto_k {
        acc = acc.add(&resize_up(&rq.residuals[k - 1], (h, w))?)?;
    }
    Ok(acc)
}

/// Cascaded modification: residuals 1..=k_t come from `r_prime` verbatim;
/// later scales are re-derived against the spliced accumulation, and every
/// accumulated input is recomputed. With `r_prime` equal to the ground-truth
/// residuals this reduces exactly to `decompose`.
pub fn cascaded_modify(
    f: &Tensor,
    schedule: &ScaleSchedule,
    r_prime: &[Tensor],
    quantizer: &Quantizer,
) -> Result<ResidualQueue> {
    let (h, w, _) = check_latent(f, schedule)?;
    let k_t = schedule.k_t();
    if r_prime.len() != k_t {
        return Err(Error::ShapeMismatch(format!(
            "expected {k_t} spliced residuals, got {}",
            r_prime.len()
        )));
    }
    for (i, r) in r_prime.iter().enumerate() {
        let (sh, sw) = schedule.scale(i + 1);
        if r.shape() != [sh, sw, schedule.d()] {
            return Err(Error::ShapeMismatch(format!(
                "spliced residual {} has shape {:?}, scale wants ({sh},{sw},{})",
                i + 1,
                r.shape(),
                schedule.d()
            )));
        }
    }

    let k_total = schedule.len();
    let mut residuals = Vec::with_capacity(k_total);
    let mut labels = Vec::with_capacity(k_total);
    let mut inputs = Vec::with_capacity(k_total - 1);
    let mut acc = Tensor::zeros(f.shape());
    let mut have_labels = true;
    for k in 1..=k_total {
        let value = if k <= k_t {
            let value = r_prime[k - 1].clone();
            // Spliced maps are already in quantized space; recover bits from
            // signs so the label stream stays consistent.
            match quantizer {
                Quantizer::Bsq(q) => labels.push(q.quantize(&value)?.0),
                Quantizer::Identity => have_labels = false,
            }
            value
        } else {
            let diff = f.sub(&acc)?;
            let down = resize_down(&diff, schedule.scale(k))?;
            let (value, bits) = quantizer.apply(&down)?;
            match bits {
                Some(b) => labels.push(b),
                None => have_labels = false,
            }
            value
        };
        acc = acc.add(&resize_up(&value, (h, w))?)?;
        residuals.push(value);
        if k < k_total {
            inputs.push(resize_down(&acc, schedule.scale(k + 1))?);
        }
    }
    Ok(ResidualQueue {
        schedule: schedule.clone(),
        residuals,
        labels: if have_labels { Some(labels) } else { None },
        inputs,
    })
}

/// Reconstruction error |accumulate(k) - f|_2 for k = 0..=K.
pub fn reconstruction_errors(rq: &ResidualQueue, f: &Tensor) -> Result<Vec<f64>> {
    (0..=rq.schedule.len())
        .map(|k| {
            let acc = accumulate(rq, k)?;
            let diff = acc.sub(f)?;
            Ok(diff.norm_l2())
        })
        .collect()
}

const STREAM_MAGIC: &[u8; 4] = b"NSTS";

/// Serialize per-scale bit labels: magic, u32 scale count, then per scale a
/// (k, h_k, w_k, d) header and the packed bits.
pub fn write_token_stream(w: &mut impl Write, labels: &[BitTokenMap]) -> Result<()> {
    w.write_all(STREAM_MAGIC)?;
    w.write_all(&(labels.len() as u32).to_le_bytes())?;
    for (i, map) in labels.iter().enumerate() {
        let (h, ww) = map.shape();
        let packed = pack_bits(map);
        w.write_all(&(i as u32 + 1).to_le_bytes())?;
        w.write_all(&(h as u32).to_le_bytes())?;
        w.write_all(&(ww as u32).to_le_bytes())?;
        w.write_all(&(map.d() as u32).to_le_bytes())?;
        w.write_all(&(packed.len() as u32).to_le_bytes())?;
        w.write_all(&packed)?;
    }
    Ok(())
}

pub fn read_token_stream(r: &mut impl Read) -> Result<Vec<BitTokenMap>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STREAM_MAGIC {
        return Err(Error::InvalidArgument("not a token stream (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let k = read_u32(r)? as usize;
        if k != i + 1 {
            return Err(Error::InvalidArgument(format!(
                "token stream scale index {k} out of order (expected {})",
                i + 1
            )));
        }
        let h = read_u32(r)? as usize;
        let w = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let len = read_u32(r)? as usize;
        let mut packed = vec![0u8; len];
        r.read_exact(&mut packed)?;
        out.push(unpack_bits(&packed, (h, w), d)?);
    }
    Ok(out)
}
