//! Dense layer with the optional pieces quantization attaches to it.

use serde::{Deserialize, Serialize};

use crate::csrc::{LowRankCompensation, PreRotation};
use crate::error::{ensure_len, Error, Result};
use crate::linalg::DenseMatrix;
use crate::quant::{dequantize, quantize_matrix, snap_bf16_matrix, ActQuant, QuantSpec, QuantizedTensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum WeightFormat {
    Full,
    High16,
    W4,
}

/// `y = post(W · aq(Rᵀx) + b)` where the rotation `R`, activation quantizer
/// `aq` and low-rank post-affine are all optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    name: String,
    /// Effective weights used by the forward pass (dequantized when W4).
    weight: DenseMatrix<T>,
    quant: Option<QuantizedTensor<T>>,
    format: WeightFormat,
    bias: Vec<T>,
    input_rotation: Option<PreRotation<T>>,
    act_quant: Option<ActQuant<T>>,
    /// Calibration absolute maximum of the (rotated) input.
    input_absmax: Option<T>,
    post: Option<LowRankCompensation<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: impl Into<String>, weight: DenseMatrix<T>, bias: Vec<T>) -> Result<Self> {
        ensure_len("Linear bias", weight.rows(), bias.len())?;
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self {
            name: name.into(),
            weight,
            quant: None,
            format: WeightFormat::Full,
            bias,
            input_rotation: None,
            act_quant: None,
            input_absmax: None,
            post: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &DenseMatrix<T> {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn format(&self) -> WeightFormat {
        self.format
    }

    pub fn quantized(&self) -> Option<&QuantizedTensor<T>> {
        self.quant.as_ref()
    }

    pub fn input_rotation(&self) -> Option<&PreRotation<T>> {
        self.input_rotation.as_ref()
    }

    pub fn act_quant(&self) -> Option<&ActQuant<T>> {
        self.act_quant.as_ref()
    }

    pub fn input_absmax(&self) -> Option<T> {
        self.input_absmax
    }

    pub fn post(&self) -> Option<&LowRankCompensation<T>> {
        self.post.as_ref()
    }

    /// True when the layer is a bare `W x + b`.
    pub fn is_plain(&self) -> bool {
        self.input_rotation.is_none() && self.act_quant.is_none() && self.post.is_none()
    }

    /// Replaces full-precision weights, e.g. after a closed-form refit.
    pub fn set_parameters(&mut self, weight: DenseMatrix<T>, bias: Vec<T>) -> Result<()> {
        ensure_len("Linear::set_parameters rows", self.out_dim(), weight.rows())?;
        ensure_len("Linear::set_parameters cols", self.in_dim(), weight.cols())?;
        ensure_len("Linear::set_parameters bias", self.out_dim(), bias.len())?;
        self.weight = weight;
        self.bias = bias;
        self.quant = None;
        self.format = WeightFormat::Full;
        Ok(())
    }

    /// Mutable access to full-precision weights (gradient checks).
    pub fn weight_mut(&mut self) -> Result<&mut DenseMatrix<T>> {
        if self.format != WeightFormat::Full {
            return Err(Error::UnsupportedLayer {
                layer: self.name.clone(),
                reason: "weights are quantized".into(),
            });
        }
        Ok(&mut self.weight)
    }

    pub fn set_input_absmax(&mut self, absmax: T) {
        self.input_absmax = Some(absmax);
    }

    /// Folds an input rotation into the weights: `W ← W · blockdiag(R)`,
    /// with inputs mapped through `Rᵀ` at run time so `W x` is unchanged.
    pub fn attach_rotation(&mut self, rot: PreRotation<T>) -> Result<()> {
        ensure_len("rotation dimension", self.in_dim(), rot.dim())?;
        if self.format != WeightFormat::Full || self.input_rotation.is_some() {
            return Err(Error::UnsupportedLayer {
                layer: self.name.clone(),
                reason: "rotation must be attached to an unrotated full-precision layer".into(),
            });
        }
        self.weight = rot.fold_into_weights(&self.weight)?;
        self.input_rotation = Some(rot);
        self.input_absmax = None;
        Ok(())
    }

    /// Group-quantizes the weights and enables 8-bit input fake-quantization
    /// when a calibration range has been recorded.
    pub fn quantize_w4(&mut self, spec: QuantSpec) -> Result<()> {
        let q = quantize_matrix(&self.weight, spec)?;
        self.weight = dequantize(&q)?;
        self.quant = Some(q);
        self.format = WeightFormat::W4;
        self.act_quant = self.input_absmax.map(ActQuant::from_absmax);
        Ok(())
    }

    pub fn snap_high16(&mut self) {
        self.weight = snap_bf16_matrix(&self.weight);
        self.quant = None;
        self.format = WeightFormat::High16;
        self.act_quant = None;
    }

    /// Folds a per-output-channel affine `y ← g ⊙ y + d`: quantized layers
    /// absorb `g` into their group scales, others into their weight rows.
    pub fn fold_row_affine(&mut self, g: &[T], d: &[T]) -> Result<()> {
        ensure_len("row affine scale", self.out_dim(), g.len())?;
        ensure_len("row affine shift", self.out_dim(), d.len())?;
        if self.post.is_some() {
            return Err(Error::AlreadyCompensated(self.name.clone()));
        }
        match self.quant.as_mut() {
            Some(q) => {
                for (row, &gr) in g.iter().enumerate() {
                    q.scale_row(row, gr);
                }
                self.weight = dequantize(q)?;
            }
            None => {
                for (row, &gr) in g.iter().enumerate() {
                    for w in self.weight.row_mut(row) {
                        *w *= gr;
                    }
                }
            }
        }
        for ((b, &gr), &dr) in self.bias.iter_mut().zip(g).zip(d) {
            *b = gr * *b + dr;
        }
        Ok(())
    }

    pub fn set_post(&mut self, comp: LowRankCompensation<T>) -> Result<()> {
        ensure_len("post-affine dimension", self.out_dim(), comp.dim())?;
        if self.post.is_some() {
            return Err(Error::AlreadyCompensated(self.name.clone()));
        }
        self.post = Some(comp);
        Ok(())
    }

    /// Input as seen by the weight matrix: rotated, then fake-quantized.
    pub fn prepare_input(&self, x: &[T]) -> Result<Vec<T>> {
        ensure_len("Linear input", self.in_dim(), x.len())?;
        let mut v = match &self.input_rotation {
            Some(r) => r.rotate(x)?,
            None => x.to_vec(),
        };
        if let Some(aq) = &self.act_quant {
            aq.apply_slice(&mut v);
        }
        Ok(v)
    }

    /// `W x + b` on an already prepared input.
    pub fn affine(&self, prepared: &[T]) -> Result<Vec<T>> {
        let mut y = self.weight.matvec(prepared)?;
        for (yi, &b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        Ok(y)
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let y = self.affine(&self.prepare_input(x)?)?;
        match &self.post {
            Some(p) => p.apply(&y),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantSpec;

    fn layer() -> Linear<f64> {
        let w = DenseMatrix::from_fn(3, 4, |i, j| 0.1 * (i as f64 + 1.0) - 0.07 * j as f64);
        Linear::new("l", w, vec![0.5, -0.25, 1.0]).unwrap()
    }

    #[test]
    fn forward_is_affine() {
        let l = layer();
        let y = l.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15);
        assert!((y[2] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn bias_length_checked() {
        let w = DenseMatrix::<f64>::zeros(2, 2);
        assert!(Linear::new("x", w, vec![0.0]).is_err());
    }

    #[test]
    fn doubling_fold_doubles_dequantized_weights() {
        let mut l = layer();
        l.quantize_w4(QuantSpec::default()).unwrap();
        let before = l.weight().clone();
        let scales_before = l.quantized().unwrap().scales.clone();
        l.fold_row_affine(&[2.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(l.weight(), &before.scale(2.0));
        let scales_after = &l.quantized().unwrap().scales;
        for (a, b) in scales_after.iter().zip(&scales_before) {
            assert_eq!(*a, 2.0 * b);
        }
        assert_eq!(l.bias(), &[1.0, -0.5, 2.0]);
    }

    #[test]
    fn act_quant_enabled_only_with_range() {
        let mut l = layer();
        l.quantize_w4(QuantSpec::default()).unwrap();
        assert!(l.act_quant().is_none());
        let mut l = layer();
        l.set_input_absmax(2.0);
        l.quantize_w4(QuantSpec::default()).unwrap();
        assert!(l.act_quant().is_some());
    }

    #[test]
    fn quantized_weights_reject_mutation() {
        let mut l = layer();
        l.snap_high16();
        assert!(l.weight_mut().is_err());
    }
}
