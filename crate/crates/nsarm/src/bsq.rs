//! Binary spherical quantization: project d-dimensional token vectors onto
//! unit-sphere sign vertices. Every token dequantizes to (+-1/sqrt(d), ...),
//! so the implicit vocabulary has 2^d entries while all machinery stays O(d).

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Vectors with norm at or below this quantize to the all-positive vertex.
pub const NORM_EPS: f32 = 1e-8;

/// Per-scale h x w grid of d-bit tokens. Bits are stored unpacked (one byte
/// per bit, values 0/1); [`pack_bits`] produces the wire layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTokenMap {
    h: usize,
    w: usize,
    d: usize,
    bits: Vec<u8>,
}

impl BitTokenMap {
    pub fn new(h: usize, w: usize, d: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w * d {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} token map needs {} bits, got {}",
                h,
                w,
                d,
                h * w * d,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("token bits must be 0 or 1".into()));
        }
        Ok(BitTokenMap { h, w, d, bits })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Fraction of bits equal between two maps of the same shape.
    pub fn bit_agreement(&self, other: &BitTokenMap) -> Result<f64> {
        if self.bits.len() != other.bits.len() {
            return Err(Error::ShapeMismatch("bit_agreement on different shapes".into()));
        }
        let same = self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.bits.len() as f64)
    }
}

/// Stateless quantizer configuration: token bit width and the vanishing-norm
/// threshold.
#[derive(Clone, Copy, Debug)]
pub struct BsqQuantizer {
    pub d: usize,
    pub eps: f32,
}

impl BsqQuantizer {
    pub fn new(d: usize) -> Self {
        BsqQuantizer { d, eps: NORM_EPS }
    }

    /// Quantize an (h, w, d) residual map. Each token vector v is normalized
    /// to the unit sphere (v/|v| when |v| > eps) and snapped to its sign
    /// vertex: bit_j = [v_j >= 0], value_j = (2 bit_j - 1)/sqrt(d). Ties and
    /// vanishing vectors map to bit 1.
    pub fn quantize(&self, r: &Tensor) -> Result<(BitTokenMap, Tensor)> {
        let (h, w, d) = r.dims3()?;
        if d != self.d {
            return Err(Error::ShapeMismatch(format!(
                "quantizer configured for d={}, residual has d={d}",
                self.d
            )));
        }
        // Normalization does not move any coordinate across zero, so the
        // sign test on raw coordinates is the sign test on the normalized
        // vector; the eps guard only matters for the documented tie rule.
        let mag = 1.0 / (d as f32).sqrt();
        let mut bits = Vec::with_capacity(h * w * d);
        let mut values = Vec::with_capacity(h * w * d);
        for token in r.data().chunks(d) {
            for &v in token {
                let bit = u8::from(v >= 0.0);
                bits.push(bit);
                values.push(if bit == 1 { mag } else { -mag });
            }
        }
        Ok((
            BitTokenMap::new(h, w, d, bits)?,
            Tensor::from_vec(vec![h, w, d], values)?,
        ))
    }

    pub fn dequantize(&self, tokens: &BitTokenMap) -> Tensor {
        dequantize(tokens)
    }
}

/// bit_j -> (2 bit_j - 1)/sqrt(d).
pub fn dequantize(tokens: &BitTokenMap) -> Tensor {
    let (h, w) = tokens.shape();
    let d = tokens.d();
    let mag = 1.0 / (d as f32).sqrt();
    let data = tokens
        .bits()
        .iter()
        .map(|&b| if b == 1 { mag } else { -mag })
        .collect();
    Tensor::from_vec(vec![h, w, d], data).expect("token map shape is consistent")
}

/// Pack bits row-major by token, then bit index, LSB-first within each byte.
pub fn pack_bits(tokens: &BitTokenMap) -> Vec<u8> {
    let bits = tokens.bits();
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b == 1 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Inverse of [`pack_bits`]; the byte count must match the shape exactly.
pub fn unpack_bits(bytes: &[u8], shape: (usize, usize), d: usize) -> Result<BitTokenMap> {
    let (h, w) = shape;
    let nbits = h * w * d;
    if bytes.len() != nbits.div_ceil(8) {
        return Err(Error::InvalidArgument(format!(
            "packed stream has {} bytes, {}x{}x{d} tokens need {}",
            bytes.len(),
            h,
            w,
            nbits.div_ceil(8)
        )));
    }
    // Padding bits past the payload must be zero.
    if nbits % 8 != 0 {
        let last = bytes[bytes.len() - 1];
        if last >> (nbits % 8) != 0 {
            return Err(Error::InvalidArgument("nonzero padding in packed stream".into()));
        }
    }
    let bits = (0..nbits).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
    BitTokenMap::new(h, w, d, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn vertex_vector_is_fixed_point() {
        let q = BsqQuantizer::new(4);
        let r = Tensor::from_vec(vec![1, 1, 4], vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        let (tokens, rq) = q.quantize(&r).unwrap();
        assert_eq!(tokens.bits(), &[1, 0, 1, 0]);
        assert_eq!(rq.data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn zero_vector_ties_to_positive_vertex() {
        let q = BsqQuantizer::new(4);
        let r = Tensor::zeros(&[1, 1, 4]);
        let (tokens, rq) = q.quantize(&r).unwrap();
        assert_eq!(tokens.bits(), &[1, 1, 1, 1]);
        for &v in rq.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn quantized_tokens_have_unit_norm() {
        let q = BsqQuantizer::new(16);
        let mut rng = Rng::seeded(21);
        let r = rng.fill_normal(&[4, 3, 16], 1.0);
        let (_, rq) = q.quantize(&r).unwrap();
        for token in rq.data().chunks(16) {
            let norm: f64 = token.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn d_mismatch_is_an_error() {
        let q = BsqQuantizer::new(8);
        let r = Tensor::zeros(&[2, 2, 4]);
        assert!(q.quantize(&r).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let t = BitTokenMap::new(1, 1, 1, vec![1]).unwrap();
        assert_eq!(dequantize(&t).data(), &[1.0]);
        let t = BitTokenMap::new(1, 1, 4, vec![0, 0, 0, 0]).unwrap();
        assert_eq!(dequantize(&t).data(), &[-0.5, -0.5, -0.5, -0.5]);
    }

    #[test]
    fn declared_bit_order() {
        // One token, d=8, bits 1,0,0,0,0,0,0,1 -> LSB-first byte 0x81.
        let t = BitTokenMap::new(1, 1, 8, vec![1, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        assert_eq!(pack_bits(&t), vec![0x81]);
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        assert!(unpack_bits(&[0x00], (2, 2), 8).is_err());
        assert!(unpack_bits(&[0x00; 4], (2, 2), 8).is_ok());
    }

    #[test]
    fn quantization_error_bound() {
        // |v/|v| - r_q| <= sqrt(2 - 2/sqrt(d)) for any nonzero v.
        let q = BsqQuantizer::new(16);
        let bound = (2.0 - 2.0 / (16.0f64).sqrt()).sqrt() + 1e-9;
        let mut rng = Rng::seeded(33);
        for _ in 0..200 {
            let r = rng.fill_normal(&[1, 1, 16], 1.0);
            let norm = r.norm_l2();
            if norm < 1e-6 {
                continue;
            }
            let (_, rq) = q.quantize(&r).unwrap();
            let dist: f64 = r
                .data()
                .iter()
                .zip(rq.data())
                .map(|(&v, &qv)| {
                    let e = v as f64 / norm - qv as f64;
                    e * e
                })
                .sum::<f64>()
                .sqrt();
            assert!(dist <= bound, "distance {dist} exceeds bound {bound}");
        }
    }

    proptest! {
        #[test]
        fn quantize_dequantize_is_idempotent(seed in 0u64..500) {
            let q = BsqQuantizer::new(8);
            let mut rng = Rng::seeded(seed);
            let r = rng.fill_normal(&[3, 2, 8], 1.0);
            let (tokens, rq) = q.quantize(&r).unwrap();
            let (tokens2, rq2) = q.quantize(&rq).unwrap();
            prop_assert_eq!(tokens.bits(), tokens2.bits());
            prop_assert_eq!(rq.data(), rq2.data());
            let back = dequantize(&tokens);
            prop_assert_eq!(back.data(), rq.data());
        }

        #[test]
        fn pack_unpack_round_trip(seed in 0u64..500, d in 1usize..24) {
            let mut rng = Rng::seeded(seed);
            let bits: Vec<u8> = (0..3 * 2 * d).map(|_| u8::from(rng.uniform() < 0.5)).collect();
            let t = BitTokenMap::new(3, 2, d, bits).unwrap();
            let packed = pack_bits(&t);
            let back = unpack_bits(&packed, (3, 2), d).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
