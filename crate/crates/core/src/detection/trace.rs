use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which epochs enter a `t`-epoch gradient window ending at epoch `j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Epochs `j − t + 1 ..= j`, divisor `t`.
    #[default]
    Inclusive,
    /// Epochs `j − t ..= j` (`t + 1` terms), divisor `t`.
    Literal,
}

impl WindowMode {
    pub fn terms(self, t: usize) -> usize {
        match self {
            WindowMode::Inclusive => t,
            WindowMode::Literal => t + 1,
        }
    }
}

/// Gradient and loss history of one training sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientTrace {
    pub id: String,
    epochs: VecDeque<usize>,
    grads: VecDeque<Vec<f32>>,
    losses: VecDeque<(usize, f64)>,
}

impl GradientTrace {
    pub fn new(id: impl Into<String>) -> Self {
        GradientTrace {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.epochs.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn losses(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.losses.iter().copied()
    }

    /// Appends one epoch, evicting the oldest entries beyond `capacity`
    /// gradients and `loss_capacity` losses.
    pub fn push(
        &mut self,
        epoch: usize,
        grad: Vec<f32>,
        loss: f64,
        capacity: usize,
        loss_capacity: usize,
    ) -> Result<()> {
        if let Some(&last) = self.epochs.back() {
            if epoch <= last {
                return Err(Error::Data(format!(
                    "{}: epoch {epoch} recorded after epoch {last}",
                    self.id
                )));
            }
        }
        self.epochs.push_back(epoch);
        self.grads.push_back(grad);
        self.losses.push_back((epoch, loss));
        while self.epochs.len() > capacity {
            self.epochs.pop_front();
            self.grads.pop_front();
        }
        while self.losses.len() > loss_capacity {
            self.losses.pop_front();
        }
        Ok(())
    }

    /// Gradients of the `terms` consecutive epochs ending at `j`.
    pub fn window(&self, j: usize, terms: usize) -> Result<Vec<&[f32]>> {
        let missing = || {
            Error::InsufficientWindow(format!(
                "{}: need epochs {}..={j}, have {:?}",
                self.id,
                (j + 1).saturating_sub(terms),
                self.epochs
            ))
        };
        if terms == 0 || j + 1 < terms {
            return Err(missing());
        }
        let end = self.epochs.iter().position(|&e| e == j).ok_or_else(missing)?;
        if end + 1 < terms {
            return Err(missing());
        }
        let start = end + 1 - terms;
        for (k, &e) in self.epochs.range(start..=end).enumerate() {
            if e != j + 1 - terms + k {
                return Err(missing());
            }
        }
        Ok(self.grads.range(start..=end).map(Vec::as_slice).collect())
    }

    /// Losses of the `t` consecutive epochs ending at `j`.
    pub fn loss_window(&self, j: usize, t: usize) -> Result<Vec<f64>> {
        let found: Vec<f64> = self
            .losses
            .iter()
            .filter(|(e, _)| *e <= j && *e + t > j)
            .map(|&(_, l)| l)
            .collect();
        if t == 0 || found.len() != t {
            return Err(Error::InsufficientWindow(format!(
                "{}: need {t} losses ending at epoch {j}, found {}",
                self.id,
                found.len()
            )));
        }
        Ok(found)
    }
}

/// Average-pools a `(C, H, W)` map by 2 until it holds at most `max_dim`
/// values or a spatial extent turns odd. Returns the flattened values and
/// the total pooling factor.
pub fn pool_to_cap(map: &Tensor<f32>, max_dim: usize) -> Result<(Vec<f32>, usize)> {
    let (c, mut h, mut w) = map.dims3()?;
    let mut data = map.data().to_vec();
    let mut factor = 1;
    while c * h * w > max_dim && h % 2 == 0 && w % 2 == 0 && h > 1 && w > 1 {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let at = |yy: usize, xx: usize| data[(ch * h + yy) * w + xx] as f64;
                    let s = at(2 * y, 2 * x)
                        + at(2 * y, 2 * x + 1)
                        + at(2 * y + 1, 2 * x)
                        + at(2 * y + 1, 2 * x + 1);
                    out[(ch * oh + y) * ow + x] = (s / 4.0) as f32;
                }
            }
        }
        data = out;
        h = oh;
        w = ow;
        factor *= 2;
    }
    Ok((data, factor))
}

/// Default cap on stored gradient dimensions: a 4-class 64×64 map.
pub const DEFAULT_MAX_DIM: usize = 4 * 64 * 64;

/// Per-sample gradient traces for all training samples.
///
/// Holds at most `window_t + 1` gradient vectors per sample, so peak memory
/// is about `N · (window_t + 1) · D` single-precision values.
#[derive(Clone, Debug)]
pub struct GradientStore {
    window_t: usize,
    max_dim: usize,
    dim: Option<usize>,
    pool_factor: usize,
    traces: BTreeMap<String, GradientTrace>,
}

impl GradientStore {
    pub fn new(window_t: usize, max_dim: usize) -> Result<Self> {
        if window_t == 0 || max_dim == 0 {
            return Err(Error::Config("window length and dimension cap must be >= 1".into()));
        }
        Ok(GradientStore {
            window_t,
            max_dim,
            dim: None,
            pool_factor: 1,
            traces: BTreeMap::new(),
        })
    }

    pub fn window_t(&self) -> usize {
        self.window_t
    }

    /// Stored vector dimension, fixed by the first write.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn max_dim(&self) -> usize {
        self.max_dim
    }

    /// Spatial pooling factor applied before storage (1 = full resolution).
    pub fn pool_factor(&self) -> usize {
        self.pool_factor
    }

    pub fn trace(&self, id: &str) -> Option<&GradientTrace> {
        self.traces.get(id)
    }

    pub fn traces(&self) -> impl Iterator<Item = &GradientTrace> {
        self.traces.values()
    }

    /// Records one sample's logit gradient and loss for `epoch`.
    pub fn record_epoch(&mut self, id: &str, epoch: usize, logit_grad: &Tensor<f32>, loss: f64) -> Result<()> {
        let (vector, factor) = pool_to_cap(logit_grad, self.max_dim)?;
        self.record_vector(id, epoch, vector, loss)?;
        self.pool_factor = factor;
        Ok(())
    }

    /// Records an already flattened gradient vector.
    pub fn record_vector(&mut self, id: &str, epoch: usize, vector: Vec<f32>, loss: f64) -> Result<()> {
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(Error::Shape(format!(
                    "{id}: gradient has dimension {} but the store holds {d}",
                    vector.len()
                )))
            }
            None => self.dim = Some(vector.len()),
            _ => {}
        }
        let (cap, loss_cap) = (self.window_t + 1, self.window_t);
        self.traces
            .entry(id.to_string())
            .or_insert_with(|| GradientTrace::new(id))
            .push(epoch, vector, loss, cap, loss_cap)
    }
}
