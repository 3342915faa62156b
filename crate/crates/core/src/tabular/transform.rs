use serde::{Deserialize, Serialize};

use crate::error::{data_err, invalid_arg, Result};

/// Invertible per-dimension map applied to targets before density modelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetTransform {
    Identity,
    Log10,
    Standardize { location: Vec<f64>, scale: Vec<f64> },
}

impl TargetTransform {
    /// z-score transform fitted on a row-major `N x P` block (population
    /// standard deviation; a zero spread falls back to scale 1).
    pub fn fit_standardize(targets: &[f64], p: usize) -> Result<Self> {
        if p == 0 || targets.is_empty() || !targets.len().is_multiple_of(p) {
            return Err(invalid_arg!(
                "cannot fit standardization on {} values with P={p}",
                targets.len()
            ));
        }
        let n = (targets.len() / p) as f64;
        let mut location = vec![0.0; p];
        for row in targets.chunks_exact(p) {
            for (m, y) in location.iter_mut().zip(row) {
                *m += y;
            }
        }
        location.iter_mut().for_each(|m| *m /= n);
        let mut scale = vec![0.0; p];
        for row in targets.chunks_exact(p) {
            for ((s, y), m) in scale.iter_mut().zip(row).zip(&location) {
                *s += (y - m) * (y - m);
            }
        }
        for s in &mut scale {
            *s = (*s / n).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Ok(TargetTransform::Standardize { location, scale })
    }

    fn check_dims(&self, p: usize) -> Result<()> {
        match self {
            TargetTransform::Standardize { location, .. } if location.len() != p => Err(
                invalid_arg!("transform fitted for P={} applied to P={p}", location.len()),
            ),
            _ => Ok(()),
        }
    }

    /// Transform one target row in place.
    pub fn apply_row(&self, y: &mut [f64]) -> Result<()> {
        self.check_dims(y.len())?;
        match self {
            TargetTransform::Identity => {}
            TargetTransform::Log10 => {
                for v in y.iter_mut() {
                    if !(*v > 0.0) {
                        return Err(data_err!("log10 transform needs positive targets, got {v}"));
                    }
                    *v = v.log10();
                }
            }
            TargetTransform::Standardize { location, scale } => {
                for ((v, m), s) in y.iter_mut().zip(location).zip(scale) {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }

    pub fn invert_row(&self, y: &mut [f64]) -> Result<()> {
        self.check_dims(y.len())?;
        match self {
            TargetTransform::Identity => {}
            TargetTransform::Log10 => y.iter_mut().for_each(|v| *v = 10f64.powf(*v)),
            TargetTransform::Standardize { location, scale } => {
                for ((v, m), s) in y.iter_mut().zip(location).zip(scale) {
                    *v = *v * s + m;
                }
            }
        }
        Ok(())
    }

    /// `log |det dT/dy|` at an original-space row. Adding it to a model-space
    /// log density gives the original-space log density.
    pub fn log_jacobian(&self, y: &[f64]) -> Result<f64> {
        self.check_dims(y.len())?;
        Ok(match self {
            TargetTransform::Identity => 0.0,
            TargetTransform::Log10 => {
                let mut acc = 0.0;
                for v in y {
                    if !(*v > 0.0) {
                        return Err(data_err!("log10 transform needs positive targets, got {v}"));
                    }
                    acc -= (v * std::f64::consts::LN_10).ln();
                }
                acc
            }
            TargetTransform::Standardize { scale, .. } => {
                -scale.iter().map(|s| s.ln()).sum::<f64>()
            }
        })
    }

    /// Apply to a row-major `N x P` block.
    pub fn apply(&self, targets: &[f64], p: usize) -> Result<Vec<f64>> {
        let mut out = targets.to_vec();
        for row in out.chunks_exact_mut(p) {
            self.apply_row(row)?;
        }
        Ok(out)
    }

    pub fn invert(&self, targets: &[f64], p: usize) -> Result<Vec<f64>> {
        let mut out = targets.to_vec();
        for row in out.chunks_exact_mut(p) {
            self.invert_row(row)?;
        }
        Ok(out)
    }
}

/// Transforms applied left to right (e.g. `log10` then `standardize`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetPipeline {
    pub steps: Vec<TargetTransform>,
}

impl TargetPipeline {
    pub fn new(steps: Vec<TargetTransform>) -> Self {
        Self { steps }
    }

    pub fn apply_row(&self, y: &mut [f64]) -> Result<()> {
        self.steps.iter().try_for_each(|t| t.apply_row(y))
    }

    pub fn invert_row(&self, y: &mut [f64]) -> Result<()> {
        self.steps.iter().rev().try_for_each(|t| t.invert_row(y))
    }

    /// Jacobian correction of the composed map at an original-space row.
    pub fn log_jacobian(&self, y: &[f64]) -> Result<f64> {
        let mut cur = y.to_vec();
        let mut acc = 0.0;
        for t in &self.steps {
            acc += t.log_jacobian(&cur)?;
            t.apply_row(&mut cur)?;
        }
        Ok(acc)
    }

    pub fn apply(&self, targets: &[f64], p: usize) -> Result<Vec<f64>> {
        let mut out = targets.to_vec();
        for row in out.chunks_exact_mut(p) {
            self.apply_row(row)?;
        }
        Ok(out)
    }

    pub fn invert(&self, targets: &[f64], p: usize) -> Result<Vec<f64>> {
        let mut out = targets.to_vec();
        for row in out.chunks_exact_mut(p) {
            self.invert_row(row)?;
        }
        Ok(out)
    }
}
