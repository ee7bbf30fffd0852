//! Explicit memory (EM) of integer class prototypes.
//!
//! A prototype keeps the integer sum of the quantized features it absorbed
//! and a reduced-precision copy obtained by an arithmetic right shift. The
//! classifier compares a query against the reduced copies by cosine
//! similarity; since cosine ignores scale, the shift only trades resolution
//! for footprint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{shape, Error, Result};
use crate::io_util::{put_signed, write_file, ByteReader};
use crate::numerics::{cossim, norm, ZERO_NORM_THRESHOLD};

const EM_MAGIC: &[u8; 4] = b"OFEM";
const EM_VERSION: u32 = 1;
/// Header value of `right_shift` when each prototype picks its own shift.
pub const PER_CLASS_SHIFT: u32 = u32::MAX;

pub const DEFAULT_FEATURE_BITS: u32 = 8;
pub const DEFAULT_ACCUM_BITS: u32 = 32;
pub const DEFAULT_PROTOTYPE_BITS: u32 = 8;
pub const DEFAULT_MAX_SHOTS: u32 = 512;
/// Widest reduced prototype; anything wider must equal the accumulator width.
pub const MAX_REDUCED_BITS: u32 = 17;

/// Integer widths used along the quantized path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantSpec {
    pub feature_bits: u32,
    pub accum_bits: u32,
    /// Stored prototype width; equal to `accum_bits` for full precision.
    pub prototype_bits: u32,
    /// Fixed right shift, or `None` to pick the minimal shift per prototype.
    pub right_shift: Option<u32>,
    pub max_shots: u32,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            feature_bits: DEFAULT_FEATURE_BITS,
            accum_bits: DEFAULT_ACCUM_BITS,
            prototype_bits: DEFAULT_PROTOTYPE_BITS,
            right_shift: None,
            max_shots: DEFAULT_MAX_SHOTS,
        }
    }
}

impl QuantSpec {
    pub fn full_precision() -> Self {
        Self {
            prototype_bits: DEFAULT_ACCUM_BITS,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(2..=16).contains(&self.feature_bits) {
            return bad(format!("feature_bits {} outside [2, 16]", self.feature_bits));
        }
        if self.accum_bits > 32 {
            return bad(format!("accum_bits {} exceeds 32", self.accum_bits));
        }
        if self.max_shots == 0 {
            return bad("max_shots must be positive".into());
        }
        let needed = self.feature_bits + ceil_log2(self.max_shots);
        if self.accum_bits < needed {
            return bad(format!(
                "accum_bits {} cannot hold {} shots of {}-bit features ({needed} bits needed)",
                self.accum_bits, self.max_shots, self.feature_bits
            ));
        }
        let p = self.prototype_bits;
        if p == 0 || p > self.accum_bits || (p > MAX_REDUCED_BITS && p != self.accum_bits) {
            return bad(format!(
                "prototype_bits {p} must be in [1, {MAX_REDUCED_BITS}] or equal accum_bits ({})",
                self.accum_bits
            ));
        }
        Ok(())
    }

    pub fn is_full_precision(&self) -> bool {
        self.prototype_bits >= self.accum_bits
    }
}

fn ceil_log2(n: u32) -> u32 {
    if n <= 1 {
        0
    } else {
        32 - (n - 1).leading_zeros()
    }
}

#[inline]
fn signed_range(bits: u32) -> (i64, i64) {
    (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
}

/// Symmetric per-vector quantization result.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFeature {
    pub values: Vec<i64>,
    pub scale: f64,
    /// Set when the input was all zeros; values are zero and scale is one.
    pub degenerate: bool,
}

impl QuantizedFeature {
    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&q| q as f64 * self.scale).collect()
    }
}

/// `qᵢ = clamp(round(θᵢ / s))` with `s = max|θ| / (2^{b−1} − 1)`.
pub fn quantize_feature(theta_p: &[f64], feature_bits: u32) -> Result<QuantizedFeature> {
    if !(2..=16).contains(&feature_bits) {
        return Err(Error::InvalidConfig(format!("feature_bits {feature_bits} outside [2, 16]")));
    }
    if theta_p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite feature".into()));
    }
    let max_abs = theta_p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(QuantizedFeature {
            values: vec![0; theta_p.len()],
            scale: 1.0,
            degenerate: true,
        });
    }
    let (lo, hi) = signed_range(feature_bits);
    let scale = max_abs / hi as f64;
    let values = theta_p
        .iter()
        .map(|&v| ((v / scale).round() as i64).clamp(lo, hi))
        .collect();
    Ok(QuantizedFeature {
        values,
        scale,
        degenerate: false,
    })
}

/// Sign vector with zero mapped to `+1`.
pub fn bipolarize<T: PartialOrd + Default>(x: &[T]) -> Vec<i8> {
    let zero = T::default();
    x.iter().map(|v| if *v >= zero { 1 } else { -1 }).collect()
}

/// A stored class prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: u32,
    /// Sum of the quantized features of all absorbed shots.
    pub accum: Vec<i64>,
    pub count: u32,
    /// Reduced representation, `bits` wide.
    pub quantized: Vec<i64>,
    pub bits: u32,
    pub scale_shift: u32,
}

impl Prototype {
    /// A full-precision prototype over an accumulator.
    pub fn new(class_id: u32, accum: Vec<i64>, count: u32, accum_bits: u32) -> Self {
        Self {
            class_id,
            quantized: accum.clone(),
            accum,
            count,
            bits: accum_bits,
            scale_shift: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.accum.len()
    }

    pub fn max_abs(&self) -> u64 {
        self.accum.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }

    /// Real-valued prototype as stored: `quantized · 2^shift / count`, or the
    /// sign vector in 1-bit mode.
    pub fn dequantized(&self) -> Vec<f64> {
        if self.bits == 1 {
            return self.quantized.iter().map(|&v| v as f64).collect();
        }
        let scale = (1u64 << self.scale_shift) as f64;
        let count = self.count.max(1) as f64;
        self.quantized.iter().map(|&v| v as f64 * scale / count).collect()
    }

    /// Mean of the absorbed quantized features, from the accumulator.
    pub fn mean(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.accum.iter().map(|&v| v as f64 / c).collect()
    }
}

/// Minimal shift such that `max_abs >> shift < 2^{target_bits−1}`.
pub fn shift_for_magnitude(max_abs: u64, target_bits: u32) -> u32 {
    let bitlen = 64 - max_abs.leading_zeros();
    bitlen.saturating_sub(target_bits.saturating_sub(1))
}

/// Minimal right shift bringing every accumulator entry into `target_bits`.
pub fn choose_shift(proto: &Prototype, target_bits: u32) -> u32 {
    shift_for_magnitude(proto.max_abs(), target_bits)
}

/// Rebuilds the reduced representation from the accumulator.
///
/// Each entry is arithmetically shifted right by `shift` (rounding toward
/// −∞). One bit is the sign vector, independent of `shift`.
pub fn reduce_precision(proto: &Prototype, target_bits: u32, shift: u32) -> Result<Prototype> {
    if !(1..=63).contains(&target_bits) {
        return Err(Error::InvalidConfig(format!("target bit width {target_bits}")));
    }
    let mut out = proto.clone();
    out.bits = target_bits;
    if target_bits == 1 {
        out.quantized = bipolarize(&proto.accum).into_iter().map(i64::from).collect();
        out.scale_shift = 0;
        return Ok(out);
    }
    let (lo, hi) = signed_range(target_bits);
    let shift = shift.min(63);
    out.quantized = proto
        .accum
        .iter()
        .map(|&v| {
            let s = v >> shift;
            if s < lo || s > hi {
                Err(Error::OverflowAfterShift {
                    value: s,
                    bits: target_bits,
                    shift,
                })
            } else {
                Ok(s)
            }
        })
        .collect::<Result<_>>()?;
    out.scale_shift = shift;
    Ok(out)
}

/// Footprint of `num_classes` prototypes packed at `bits` per entry.
pub fn memory_bytes(num_classes: usize, d_p: usize, bits: u32) -> u64 {
    (num_classes as u64 * d_p as u64 * bits as u64).div_ceil(8)
}

/// Result of a nearest-prototype lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class_id: u32,
    /// Cosine score per stored class, in ascending class-id order.
    pub scores: Vec<f64>,
}

/// Ordered collection of prototypes sharing `d_p` and a [`QuantSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitMemory {
    d_p: usize,
    spec: QuantSpec,
    prototypes: BTreeMap<u32, Prototype>,
}

impl ExplicitMemory {
    pub fn new(d_p: usize, spec: QuantSpec) -> Result<Self> {
        spec.validate()?;
        if d_p == 0 {
            return Err(shape("prototype dimension must be positive"));
        }
        Ok(Self {
            d_p,
            spec,
            prototypes: BTreeMap::new(),
        })
    }

    pub fn d_p(&self) -> usize {
        self.d_p
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.prototypes.contains_key(&class_id)
    }

    pub fn get(&self, class_id: u32) -> Option<&Prototype> {
        self.prototypes.get(&class_id)
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.prototypes.keys().copied().collect()
    }

    pub fn prototypes(&self) -> impl Iterator<Item = &Prototype> {
        self.prototypes.values()
    }

    /// Stores a new class from its accumulated features, reducing it to the
    /// configured prototype width.
    pub fn add_class(&mut self, class_id: u32, accum: Vec<i64>, count: u32) -> Result<&Prototype> {
        if self.contains(class_id) {
            return Err(Error::DuplicateClass(class_id));
        }
        if accum.len() != self.d_p {
            return Err(shape(format!("prototype of length {} for d_p {}", accum.len(), self.d_p)));
        }
        if count == 0 {
            return Err(Error::EmptySampleSet(class_id));
        }
        if count > self.spec.max_shots {
            return Err(Error::ShotLimitExceeded {
                class_id,
                max_shots: self.spec.max_shots,
            });
        }
        let (lo, hi) = signed_range(self.spec.accum_bits);
        if accum.iter().any(|&v| v < lo || v > hi) {
            return Err(Error::AccumulatorOverflow {
                class_id,
                bits: self.spec.accum_bits,
            });
        }
        let proto = Prototype::new(class_id, accum, count, self.spec.accum_bits);
        let proto = self.reduce_to_spec(&proto)?;
        Ok(self.prototypes.entry(class_id).or_insert(proto))
    }

    fn reduce_to_spec(&self, proto: &Prototype) -> Result<Prototype> {
        if self.spec.is_full_precision() {
            return Ok(Prototype::new(proto.class_id, proto.accum.clone(), proto.count, self.spec.accum_bits));
        }
        let bits = self.spec.prototype_bits;
        let shift = self.spec.right_shift.unwrap_or_else(|| choose_shift(proto, bits));
        reduce_precision(proto, bits, shift)
    }

    /// The same memory re-quantized at `bits` per prototype entry.
    pub fn with_precision(&self, bits: u32, right_shift: Option<u32>) -> Result<Self> {
        let spec = QuantSpec {
            prototype_bits: bits.min(self.spec.accum_bits),
            right_shift,
            ..self.spec.clone()
        };
        let mut out = Self::new(self.d_p, spec)?;
        for p in self.prototypes.values() {
            let reduced = out.reduce_to_spec(p)?;
            out.prototypes.insert(p.class_id, reduced);
        }
        Ok(out)
    }

    /// Nearest prototype by cosine similarity; ties go to the smallest id.
    pub fn classify(&self, theta_p: &[f64]) -> Result<Classification> {
        if self.prototypes.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if theta_p.len() != self.d_p {
            return Err(shape(format!("query of length {} for d_p {}", theta_p.len(), self.d_p)));
        }
        if norm(theta_p) < ZERO_NORM_THRESHOLD {
            return Err(Error::ZeroNorm);
        }
        let mut scores = Vec::with_capacity(self.prototypes.len());
        let mut best: Option<(u32, f64)> = None;
        for p in self.prototypes.values() {
            let s = cossim(theta_p, &p.dequantized())?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((p.class_id, s));
            }
            scores.push(s);
        }
        Ok(Classification {
            class_id: best.map(|(c, _)| c).unwrap(),
            scores,
        })
    }

    pub fn footprint_bytes(&self) -> u64 {
        memory_bytes(self.len(), self.d_p, self.spec.prototype_bits)
    }

    /// Snapshot in the `OFEM` container at the stored precision.
    pub fn to_bytes(&self) -> Vec<u8> {
        let bits = self.spec.prototype_bits;
        let width = bits.div_ceil(8) as usize;
        let mut out = Vec::new();
        out.extend_from_slice(EM_MAGIC);
        for v in [
            EM_VERSION,
            self.prototypes.len() as u32,
            self.d_p as u32,
            bits,
            self.spec.right_shift.unwrap_or(PER_CLASS_SHIFT),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in self.prototypes.values() {
            out.extend_from_slice(&p.class_id.to_le_bytes());
            out.extend_from_slice(&p.count.to_le_bytes());
            for &v in &p.quantized {
                put_signed(&mut out, v, width);
            }
        }
        out
    }

    /// Reads an `OFEM` snapshot.
    ///
    /// Full-precision snapshots restore the accumulators exactly. Reduced
    /// snapshots restore the stored values; the accumulator is rebuilt as
    /// `quantized << shift`, where the shift is zero if it was chosen per class.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::FormatVersionMismatch(format!("memory snapshot: {what}"));
        let mut r = ByteReader::new(bytes);
        if r.take(4) != Some(EM_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let mut header = [0u32; 5];
        for h in header.iter_mut() {
            *h = r.u32().ok_or_else(|| bad("truncated header"))?;
        }
        let [version, n, d_p, bits, shift] = header;
        if version != EM_VERSION {
            return Err(bad(&format!("version {version}, expected {EM_VERSION}")));
        }
        let spec = QuantSpec {
            prototype_bits: bits,
            right_shift: (shift != PER_CLASS_SHIFT).then_some(shift),
            accum_bits: DEFAULT_ACCUM_BITS.max(bits),
            ..QuantSpec::default()
        };
        let mut em = Self::new(d_p as usize, spec).map_err(|e| bad(&e.to_string()))?;
        let width = bits.div_ceil(8) as usize;
        let applied_shift = if shift == PER_CLASS_SHIFT { 0 } else { shift };
        for _ in 0..n {
            let class_id = r.u32().ok_or_else(|| bad("truncated record"))?;
            let count = r.u32().ok_or_else(|| bad("truncated record"))?;
            let quantized = (0..d_p)
                .map(|_| r.signed(width).ok_or_else(|| bad("truncated payload")))
                .collect::<Result<Vec<_>>>()?;
            if em.contains(class_id) {
                return Err(bad(&format!("class {class_id} repeated")));
            }
            let full = em.spec.is_full_precision();
            let proto = Prototype {
                class_id,
                accum: if full || bits == 1 {
                    quantized.clone()
                } else {
                    quantized.iter().map(|&v| v << applied_shift).collect()
                },
                count,
                quantized,
                bits: if full { em.spec.accum_bits } else { bits },
                scale_shift: if full || bits == 1 { 0 } else { applied_shift },
            };
            em.prototypes.insert(class_id, proto);
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(em)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One row of a precision sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub bits: u32,
    pub memory_bytes: u64,
    pub accuracy: f64,
}

/// Re-quantizes the memory at each width and measures accuracy on
/// `(θ_p, label)` pairs. Widths at or above the accumulator width evaluate the
/// full-precision prototypes.
pub fn precision_sweep(em: &ExplicitMemory, test: &[(Vec<f64>, u32)], bits: &[u32]) -> Result<Vec<SweepRow>> {
    if test.is_empty() {
        return Err(shape("precision sweep needs a nonempty test set"));
    }
    bits.iter()
        .map(|&b| {
            let width = b.min(em.spec.accum_bits);
            let reduced = em.with_precision(width, None)?;
            let mut correct = 0usize;
            for (theta, label) in test {
                if reduced.classify(theta)?.class_id == *label {
                    correct += 1;
                }
            }
            Ok(SweepRow {
                bits: width,
                memory_bytes: memory_bytes(em.len(), em.d_p, width),
                accuracy: correct as f64 / test.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn em_with(protos: &[(u32, Vec<i64>)], spec: QuantSpec) -> ExplicitMemory {
        let d = protos[0].1.len();
        let mut em = ExplicitMemory::new(d, spec).unwrap();
        for (id, acc) in protos {
            em.add_class(*id, acc.clone(), 1).unwrap();
        }
        em
    }

    #[test]
    fn spec_validation() {
        assert!(QuantSpec::default().validate().is_ok());
        assert!(QuantSpec::full_precision().validate().is_ok());
        let tight = QuantSpec { accum_bits: 17, prototype_bits: 17, ..Default::default() };
        assert!(tight.validate().is_ok());
        assert!(QuantSpec { accum_bits: 16, prototype_bits: 8, ..Default::default() }.validate().is_err());
        assert!(QuantSpec { prototype_bits: 20, ..Default::default() }.validate().is_err());
        assert!(QuantSpec { prototype_bits: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn quantize_feature_examples() {
        let q = quantize_feature(&[1.0, -1.0], 8).unwrap();
        assert_eq!(q.values, vec![127, -127]);
        assert_eq!(q.scale, 1.0 / 127.0);
        assert!(!q.degenerate);
        let z = quantize_feature(&[0.0; 3], 8).unwrap();
        assert_eq!((z.values, z.scale, z.degenerate), (vec![0; 3], 1.0, true));
    }

    #[test]
    fn quantize_reconstruction_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let q = quantize_feature(&v, 8).unwrap();
            for (a, b) in q.dequantize().iter().zip(&v) {
                assert!((a - b).abs() <= q.scale / 2.0 + 1e-15);
            }
        }
    }

    #[test]
    fn classify_examples() {
        let em = em_with(&[(0, vec![1, 0]), (1, vec![0, 1])], QuantSpec::full_precision());
        let c = em.classify(&[1.0, 0.0]).unwrap();
        assert_eq!(c.class_id, 0);
        assert_eq!(c.scores, vec![1.0, 0.0]);
        assert_eq!(em.classify(&[1.0, 1.0]).unwrap().class_id, 0);
        assert!(matches!(em.classify(&[0.0, 0.0]), Err(Error::ZeroNorm)));
        let empty = ExplicitMemory::new(2, QuantSpec::default()).unwrap();
        assert!(matches!(empty.classify(&[1.0, 0.0]), Err(Error::EmptyMemory)));
    }

    #[test]
    fn classify_matches_brute_force_at_full_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let protos: Vec<(u32, Vec<i64>)> = (0..10)
            .map(|i| (i * 3 + 1, (0..16).map(|_| rng.random_range(-500..500)).collect()))
            .collect();
        let em = em_with(&protos, QuantSpec::full_precision());
        for _ in 0..100 {
            let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut best = (0u32, f64::NEG_INFINITY);
            for (id, acc) in &protos {
                let p: Vec<f64> = acc.iter().map(|&v| v as f64).collect();
                let s = crate::numerics::dot(&q, &p) / (crate::numerics::norm(&q) * crate::numerics::norm(&p));
                if s > best.1 {
                    best = (*id, s);
                }
            }
            assert_eq!(em.classify(&q).unwrap().class_id, best.0);
        }
    }

    #[test]
    fn classify_is_scale_invariant_in_the_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let protos: Vec<(u32, Vec<i64>)> = (0..6).map(|i| (i, (0..8).map(|_| rng.random_range(-99..99)).collect())).collect();
        let em = em_with(&protos, QuantSpec::default());
        for _ in 0..50 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = rng.random_range(0.01..100.0);
            let qs: Vec<f64> = q.iter().map(|v| v * c).collect();
            let (a, b) = (em.classify(&q).unwrap(), em.classify(&qs).unwrap());
            assert_eq!(a.class_id, b.class_id);
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduce_precision_examples() {
        let p = Prototype::new(0, vec![512, -7, 3], 1, 32);
        let same = reduce_precision(&p, 32, 0).unwrap();
        assert_eq!(same.quantized, p.accum);
        let r = reduce_precision(&p, 8, 9).unwrap();
        assert_eq!(r.quantized, vec![1, -1, 0]);
        assert_eq!(r.scale_shift, 9);
        assert!(matches!(reduce_precision(&p, 8, 1), Err(Error::OverflowAfterShift { .. })));
        let sign = reduce_precision(&p, 1, 0).unwrap();
        assert_eq!(sign.quantized, vec![1, -1, 1]);
    }

    #[test]
    fn choose_shift_examples() {
        let p = Prototype::new(0, vec![65535, -3], 1, 32);
        assert_eq!(choose_shift(&p, 8), 9);
        let p = Prototype::new(0, vec![3, -1], 1, 32);
        assert_eq!(choose_shift(&p, 8), 0);
    }

    #[test]
    fn choose_shift_is_minimal_exhaustively() {
        for target in [2u32, 3, 5, 8, 12] {
            let limit = 1u64 << (target - 1);
            for m in 0..=(1u64 << 20) {
                let s = shift_for_magnitude(m, target);
                assert!(m >> s < limit);
                assert!(s == 0 || (m >> (s - 1)) >= limit);
            }
        }
    }

    #[test]
    fn shifted_negative_extremes_fit() {
        // Arithmetic shift rounds toward −∞, so a negative maximum may land
        // on −2^{b−1}, which is still representable.
        let p = Prototype::new(0, vec![-255, 255, -1], 1, 32);
        let s = choose_shift(&p, 8);
        let r = reduce_precision(&p, 8, s).unwrap();
        assert!(r.quantized.iter().all(|&v| (-128..=127).contains(&v)));
        assert_eq!(r.quantized[2], -1);
    }

    #[test]
    fn bipolarize_examples() {
        assert_eq!(bipolarize(&[0.5, -2.0, 0.0]), vec![1, -1, 1]);
        let x = [3i64, -4, 0, 9];
        assert_eq!(bipolarize(&bipolarize(&x)), bipolarize(&x));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let v: Vec<f64> = (0..12)
                .map(|_| {
                    let m = rng.random_range(0.01..2.0);
                    if rng.random::<bool>() { m } else { -m }
                })
                .collect();
            let b: Vec<f64> = bipolarize(&v).into_iter().map(f64::from).collect();
            assert!(cossim(&b, &v).unwrap() > 0.0);
        }
    }

    #[test]
    fn memory_accounting() {
        assert_eq!(memory_bytes(100, 256, 3), 9600);
        assert_eq!(memory_bytes(100, 256, 8), 25600);
        assert_eq!(memory_bytes(100, 256, 32), 102_400);
        assert_eq!(memory_bytes(3, 5, 3), 6);
    }

    #[test]
    fn add_class_guards() {
        let spec = QuantSpec { accum_bits: 17, prototype_bits: 8, max_shots: 512, ..Default::default() };
        let mut em = ExplicitMemory::new(2, spec).unwrap();
        em.add_class(4, vec![65024, -65024], 512).unwrap();
        assert!(matches!(em.add_class(4, vec![1, 1], 1), Err(Error::DuplicateClass(4))));
        assert!(matches!(em.add_class(5, vec![65536, 0], 1), Err(Error::AccumulatorOverflow { .. })));
        assert!(matches!(em.add_class(6, vec![1, 0], 513), Err(Error::ShotLimitExceeded { .. })));
        assert!(matches!(em.add_class(7, vec![1], 1), Err(Error::ShapeMismatch(_))));
        assert_eq!(em.get(4).unwrap().quantized, vec![127, -127]);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let protos: Vec<(u32, Vec<i64>)> = (0..4).map(|i| (i * 7, (0..6).map(|_| rng.random_range(-9000..9000)).collect())).collect();
        for spec in [
            QuantSpec::full_precision(),
            QuantSpec::default(),
            QuantSpec { prototype_bits: 3, right_shift: Some(12), ..Default::default() },
            QuantSpec { prototype_bits: 1, ..Default::default() },
        ] {
            let em = em_with(&protos, spec.clone());
            let bytes = em.to_bytes();
            let back = ExplicitMemory::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.class_ids(), em.class_ids());
            for (a, b) in back.prototypes().zip(em.prototypes()) {
                assert_eq!(a.quantized, b.quantized);
                assert_eq!(a.count, b.count);
            }
            if spec.is_full_precision() {
                assert_eq!(back, em);
            }
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(back.classify(&q).unwrap(), em.classify(&q).unwrap());
        }
        let bytes = em_with(&protos, QuantSpec::default()).to_bytes();
        assert!(matches!(ExplicitMemory::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::FormatVersionMismatch(_))));
        let mut wrong = bytes.clone();
        wrong[1] = b'X';
        assert!(matches!(ExplicitMemory::from_bytes(&wrong), Err(Error::FormatVersionMismatch(_))));
    }

    #[test]
    fn sweep_full_precision_row_matches_unquantized_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let protos: Vec<(u32, Vec<i64>)> = (0..5).map(|i| (i, (0..10).map(|_| rng.random_range(-3000..3000)).collect())).collect();
        let em = em_with(&protos, QuantSpec::full_precision());
        let test: Vec<(Vec<f64>, u32)> = (0..40)
            .map(|_| ((0..10).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0..5)))
            .collect();
        let rows = precision_sweep(&em, &test, &[32, 8, 3, 1]).unwrap();
        let direct = test.iter().filter(|(q, l)| em.classify(q).unwrap().class_id == *l).count() as f64 / 40.0;
        assert_eq!(rows[0].accuracy, direct);
        assert_eq!(rows.iter().map(|r| r.memory_bytes).collect::<Vec<_>>(), vec![200, 50, 19, 7]);
    }
}
