//! Group-wise weight quantization, 8-bit activation fake-quantization,
//! simulated BF16 storage and bit accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::Linear;
use crate::scalar::{round_half_even, Scalar};

/// Bits charged per group for its scale.
pub const SCALE_BITS: u64 = 16;
/// Bits per weight of the high-precision format.
pub const HIGH_BITS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    /// 4 or 8.
    pub bits: u8,
    /// Consecutive weights along an output row sharing one scale; the last
    /// group of a row may be shorter.
    pub group_size: usize,
    pub symmetric: bool,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: 32,
            symmetric: true,
        }
    }
}

impl QuantSpec {
    pub fn w4(group_size: usize) -> Self {
        Self {
            bits: 4,
            group_size,
            symmetric: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits != 4 && self.bits != 8 {
            return Err(Error::InvalidSpec(format!("bits must be 4 or 8, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidSpec("group_size must be positive".into()));
        }
        Ok(())
    }

    /// Largest symmetric code, `2^(bits−1) − 1`.
    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Code range `[lo, hi]` for this spec.
    pub fn code_range(&self) -> (i32, i32) {
        if self.symmetric {
            (-self.qmax(), self.qmax())
        } else {
            (-(1 << (self.bits - 1)), self.qmax())
        }
    }
}

/// Low-bit weight matrix: integer codes plus one scale per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub spec: QuantSpec,
    /// Row-major, one per weight.
    pub codes: Vec<i8>,
    /// Row-major over `(row, group)`.
    pub scales: Vec<T>,
    /// Present only for asymmetric specs.
    pub zero_points: Option<Vec<i8>>,
}

impl<T: Scalar> QuantizedTensor<T> {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.spec.group_size)
    }

    pub fn num_groups(&self) -> usize {
        self.rows * self.groups_per_row()
    }

    #[inline]
    pub fn group_index(&self, row: usize, col: usize) -> usize {
        row * self.groups_per_row() + col / self.spec.group_size
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.codes.len() != self.rows * self.cols {
            return Err(Error::dims("quantized codes", self.rows * self.cols, self.codes.len()));
        }
        if self.scales.len() != self.num_groups() {
            return Err(Error::dims("quantized scales", self.num_groups(), self.scales.len()));
        }
        if let Some(zp) = &self.zero_points {
            if zp.len() != self.num_groups() {
                return Err(Error::dims("quantized zero points", self.num_groups(), zp.len()));
            }
        }
        let (lo, hi) = self.spec.code_range();
        if let Some(c) = self.codes.iter().find(|&&c| (c as i32) < lo || (c as i32) > hi) {
            return Err(Error::InvalidSpec(format!("code {c} outside [{lo}, {hi}]")));
        }
        if self.scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("quantization scale".into()));
        }
        Ok(())
    }

    /// Multiplies every scale of `row` by `g`.
    pub fn scale_row(&mut self, row: usize, g: T) {
        let gpr = self.groups_per_row();
        for s in &mut self.scales[row * gpr..(row + 1) * gpr] {
            *s *= g;
        }
    }
}

/// Quantizes a single group as a `1 × len` tensor.
pub fn quantize_group<T: Scalar>(values: &[T], spec: QuantSpec) -> Result<QuantizedTensor<T>> {
    if values.is_empty() {
        return Err(Error::Empty("quantization group"));
    }
    let m = DenseMatrix::from_vec(1, values.len(), values.to_vec())?;
    quantize_matrix(
        &m,
        QuantSpec {
            group_size: values.len().max(spec.group_size),
            ..spec
        },
    )
}

/// Quantizes `w` with groups running along each output row.
pub fn quantize_matrix<T: Scalar>(w: &DenseMatrix<T>, spec: QuantSpec) -> Result<QuantizedTensor<T>> {
    spec.validate()?;
    if !w.is_finite() {
        return Err(Error::NonFinite("weights to quantize".into()));
    }
    let (rows, cols) = w.shape();
    let gpr = cols.div_ceil(spec.group_size);
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * gpr);
    let mut zero_points = (!spec.symmetric).then(Vec::new);
    for r in 0..rows {
        for chunk in w.row(r).chunks(spec.group_size) {
            if spec.symmetric {
                let (scale, c) = symmetric_group(chunk, spec);
                scales.push(scale);
                codes.extend(c);
            } else {
                let (scale, zp, c) = asymmetric_group(chunk, spec);
                scales.push(scale);
                if let Some(z) = zero_points.as_mut() {
                    z.push(zp);
                }
                codes.extend(c);
            }
        }
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        spec,
        codes,
        scales,
        zero_points,
    })
}

fn symmetric_group<T: Scalar>(chunk: &[T], spec: QuantSpec) -> (T, Vec<i8>) {
    let qmax = spec.qmax();
    let amax = chunk.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
    if amax == T::zero() {
        // Degenerate all-zero group.
        return (T::one(), vec![0; chunk.len()]);
    }
    let scale = amax / T::lit(qmax as f64);
    let codes = chunk
        .iter()
        .map(|&v| clamp_code(round_half_even(v / scale), -qmax, qmax))
        .collect();
    (scale, codes)
}

fn asymmetric_group<T: Scalar>(chunk: &[T], spec: QuantSpec) -> (T, i8, Vec<i8>) {
    let (lo, hi) = spec.code_range();
    let vmin = chunk.iter().fold(T::zero(), |a, &v| a.min(v));
    let vmax = chunk.iter().fold(T::zero(), |a, &v| a.max(v));
    if vmax == vmin {
        return (T::one(), 0, vec![0; chunk.len()]);
    }
    let scale = (vmax - vmin) / T::lit((hi - lo) as f64);
    let zp = clamp_code(T::lit(lo as f64) - round_half_even(vmin / scale), lo, hi);
    let codes = chunk
        .iter()
        .map(|&v| clamp_code(round_half_even(v / scale) + T::lit(zp as f64), lo, hi))
        .collect();
    (scale, zp, codes)
}

fn clamp_code<T: Scalar>(x: T, lo: i32, hi: i32) -> i8 {
    let v = x.to_i32().unwrap_or(0);
    v.clamp(lo, hi) as i8
}

/// Reconstructs `code × scale` (minus the zero point when present).
pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Result<DenseMatrix<T>> {
    q.validate()?;
    let mut out = DenseMatrix::zeros(q.rows, q.cols);
    for r in 0..q.rows {
        for c in 0..q.cols {
            let g = q.group_index(r, c);
            let zp = q.zero_points.as_ref().map_or(0, |z| z[g]) as f64;
            let code = T::lit(q.codes[r * q.cols + c] as f64 - zp);
            out[(r, c)] = code * q.scales[g];
        }
    }
    Ok(out)
}

/// Truncates to the BF16 grid: 8 significant bits, exponent range unchanged.
pub fn snap_bf16<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    if !v.is_finite() {
        return x;
    }
    // f64 carries 52 explicit mantissa bits; BF16 keeps 7.
    let bits = v.to_bits() & !((1u64 << 45) - 1);
    T::lit(f64::from_bits(bits))
}

pub fn snap_bf16_matrix<T: Scalar>(m: &DenseMatrix<T>) -> DenseMatrix<T> {
    m.map(snap_bf16)
}

/// Per-tensor symmetric 8-bit activation fake-quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant<T> {
    pub scale: T,
}

impl<T: Scalar> ActQuant<T> {
    pub const QMAX: i32 = 127;

    /// Range taken from the calibration absolute maximum.
    pub fn from_absmax(absmax: T) -> Self {
        let scale = if absmax > T::zero() {
            absmax / T::lit(Self::QMAX as f64)
        } else {
            T::one()
        };
        Self { scale }
    }

    #[inline]
    pub fn apply(&self, x: T) -> T {
        let q = round_half_even(x / self.scale)
            .max(T::lit(-Self::QMAX as f64))
            .min(T::lit(Self::QMAX as f64));
        q * self.scale
    }

    pub fn apply_slice(&self, xs: &mut [T]) {
        for x in xs {
            *x = self.apply(*x);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Precision {
    High16,
    W4,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::High16 => "HIGH16",
            Precision::W4 => "W4",
        }
    }
}

/// Ordered layer → precision assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BitWidthMap {
    pub entries: Vec<(String, Precision)>,
}

impl BitWidthMap {
    pub fn uniform<S: AsRef<str>>(ids: &[S], p: Precision) -> Self {
        Self {
            entries: ids.iter().map(|id| (id.as_ref().to_string(), p)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<Precision> {
        self.entries.iter().find(|(l, _)| l == id).map(|&(_, p)| p)
    }

    pub fn set(&mut self, id: &str, p: Precision) {
        match self.entries.iter_mut().find(|(l, _)| l == id) {
            Some(e) => e.1 = p,
            None => self.entries.push((id.to_string(), p)),
        }
    }

    pub fn count(&self, p: Precision) -> usize {
        self.entries.iter().filter(|(_, q)| *q == p).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn high_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.count(Precision::High16) as f64 / self.entries.len() as f64
        }
    }
}

/// A network whose dense layers can be addressed by id.
pub trait QuantizableModel<T: Scalar> {
    /// Ids of every quantizable layer in forward order.
    fn layer_ids(&self) -> Vec<String>;
    fn layer(&self, id: &str) -> Option<&Linear<T>>;
    fn layer_mut(&mut self, id: &str) -> Option<&mut Linear<T>>;
}

fn check_coverage<T: Scalar, M: QuantizableModel<T>>(model: &M, bitmap: &BitWidthMap) -> Result<()> {
    let ids = model.layer_ids();
    if let Some((bad, _)) = bitmap.entries.iter().find(|(id, _)| !ids.contains(id)) {
        return Err(Error::UnknownLayer(bad.clone()));
    }
    if let Some(missing) = ids.iter().find(|id| bitmap.get(id).is_none()) {
        return Err(Error::MissingLayer(missing.clone()));
    }
    Ok(())
}

/// Applies a bit-width map: W4 layers become group-quantized with 8-bit
/// input fake-quantization, HIGH16 layers are snapped to the BF16 grid.
/// Biases and any other parameters are left alone.
pub fn quantize_model<T, M>(model: &M, bitmap: &BitWidthMap, spec: QuantSpec) -> Result<M>
where
    T: Scalar,
    M: QuantizableModel<T> + Clone,
{
    spec.validate()?;
    check_coverage(model, bitmap)?;
    let mut out = model.clone();
    for (id, p) in &bitmap.entries {
        let layer = out
            .layer_mut(id)
            .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
        match p {
            Precision::W4 => layer.quantize_w4(spec)?,
            Precision::High16 => layer.snap_high16(),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub total_bits: u64,
    pub baseline_bits: u64,
    pub reduction_fraction: f64,
}

/// Weight storage in bits against an all-HIGH16 baseline.
pub fn memory_report<T, M>(model: &M, bitmap: &BitWidthMap, group_size: usize) -> Result<MemoryReport>
where
    T: Scalar,
    M: QuantizableModel<T>,
{
    check_coverage(model, bitmap)?;
    let mut total = 0u64;
    let mut baseline = 0u64;
    for id in model.layer_ids() {
        let layer = model.layer(&id).ok_or_else(|| Error::UnknownLayer(id.clone()))?;
        let (rows, cols) = (layer.out_dim() as u64, layer.in_dim() as u64);
        let weights = rows * cols;
        baseline += weights * HIGH_BITS;
        total += match bitmap.get(&id) {
            Some(Precision::W4) => {
                weights * 4 + rows * cols.div_ceil(group_size as u64) * SCALE_BITS
            }
            _ => weights * HIGH_BITS,
        };
    }
    let reduction_fraction = if baseline == 0 {
        0.0
    } else {
        1.0 - total as f64 / baseline as f64
    };
    Ok(MemoryReport {
        total_bits: total,
        baseline_bits: baseline,
        reduction_fraction,
    })
}
