use std::path::Path;

use super::config::AdamWConfig;
use crate::error::{Error, Result};
use crate::model::{read_blob, write_blob, Blob, Params};
use crate::tensor::{Scalar, Tensor};

pub const OPTIMIZER_MAGIC: [u8; 8] = *b"RGEOPTS1";

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One AdamW update with optional global-norm clipping. Returns the
    /// gradient norm before clipping.
    pub fn update(
        &mut self,
        params: &mut Params<T>,
        grads: &[Tensor<T>],
        lr: f64,
        cfg: &AdamWConfig,
    ) -> Result<f64> {
        if grads.len() != params.tensors().len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.tensors().len()
            )));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "gradient norm is {norm} at step {}",
                self.step + 1
            )));
        }
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = T::of_f64(1.0 / (1.0 - b1.powi(t)));
        let c2 = T::of_f64(1.0 / (1.0 - b2.powi(t)));
        let (b1, b2, eps) = (T::of_f64(b1), T::of_f64(b2), T::of_f64(cfg.eps));
        let (one, clip, lr_t) = (T::one(), T::of_f64(clip), T::of_f64(lr));
        let decay = T::of_f64(lr * cfg.weight_decay);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decays = p.shape().len() >= 2;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = gv * clip;
                *mv = b1 * *mv + (one - b1) * g;
                *vv = b2 * *vv + (one - b2) * g * g;
                if decays {
                    *pv -= decay * *pv;
                }
                *pv -= lr_t * (*mv * c1) / ((*vv * c2).sqrt() + eps);
            }
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = Blob {
            magic: OPTIMIZER_MAGIC,
            header: vec![self.step, self.m.len() as u64],
            tensors: self.m.iter().chain(&self.v).cloned().collect(),
        };
        write_blob(path, &blob)
    }

    pub fn load(path: &Path, params: &Params<T>) -> Result<Self> {
        let blob: Blob<T> = read_blob(path, OPTIMIZER_MAGIC)?;
        let n = params.tensors().len();
        if blob.header.len() != 2 || blob.header[1] as usize != n || blob.tensors.len() != 2 * n {
            return Err(Error::Format(format!(
                "{}: optimizer state does not match the model",
                path.display()
            )));
        }
        let mut tensors = blob.tensors;
        let v = tensors.split_off(n);
        for (t, p) in tensors
            .iter()
            .chain(&v)
            .zip(params.tensors().iter().cycle())
        {
            if t.shape() != p.shape() {
                return Err(Error::Format(format!(
                    "{}: moment shape mismatch",
                    path.display()
                )));
            }
        }
        Ok(Self {
            m: tensors,
            v,
            step: blob.header[0],
        })
    }
}
