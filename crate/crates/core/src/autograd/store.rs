use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Named trainable parameters with their gradient accumulators and
/// optimizer moments.
///
/// Values are reference counted so that a [`Graph`](super::Graph) can hold
/// them without copying; updates go through copy-on-write.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    values: Vec<Arc<Tensor>>,
    grads: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.names.len());
        let shape = value.shape().to_vec();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.values.push(Arc::new(value));
        self.grads.push(Tensor::zeros(&shape));
        self.first_moment.push(Tensor::zeros(&shape));
        self.second_moment.push(Tensor::zeros(&shape));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.grads[id.0].add_assign(grad);
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in &mut self.grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        norm
    }

    /// One AdamW update over every parameter. Gradients are left in place.
    pub fn adamw_step(&mut self, opt: &AdamW) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - opt.beta1.powi(t);
        let bias2 = 1.0 - opt.beta2.powi(t);
        for i in 0..self.values.len() {
            let value = Arc::make_mut(&mut self.values[i]);
            let grad = self.grads[i].data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                *p -= opt.lr * opt.weight_decay * *p;
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
    }

    /// Writes `<stem>.manifest` (one `name<TAB>shape<TAB>byte offset` line per
    /// parameter) and `<stem>.bin` (little-endian `f64` payload).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut manifest = String::from("# name\tshape\toffset\n");
        let mut payload = Vec::with_capacity(self.num_values() * 8);
        for (name, value) in self.names.iter().zip(&self.values) {
            let shape = value
                .shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!("{name}\t{shape}\t{}\n", payload.len()));
            for v in value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(format!("{stem}.manifest")), manifest)?;
        let mut file = fs::File::create(dir.join(format!("{stem}.bin")))?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<ParamStore> {
        let manifest_path = dir.join(format!("{stem}.manifest"));
        let manifest = fs::read_to_string(&manifest_path)?;
        let payload = fs::read(dir.join(format!("{stem}.bin")))?;
        let bad = |message: String| Error::Checkpoint {
            path: manifest_path.clone(),
            message,
        };
        let mut store = ParamStore::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(format!("line {}: expected 3 fields", lineno + 1)));
            }
            let shape = if fields[1].is_empty() {
                Vec::new()
            } else {
                fields[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?
            };
            let offset: usize = fields[2]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
            let count: usize = shape.iter().product();
            let end = offset + count * 8;
            if end > payload.len() {
                return Err(bad(format!("parameter {} runs past payload end", fields[0])));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            store.add(fields[0], Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }
}
