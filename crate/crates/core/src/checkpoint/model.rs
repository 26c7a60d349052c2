use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ArchSpec;
use crate::error::{Error, Result};
use crate::numerics::{seeded, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pretrained,
    Task,
    Merged,
    Distilled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub role: Role,
    pub task_id: Option<String>,
    /// Hash of the pretrained parameters this checkpoint descends from.
    #[serde(with = "hex_u64")]
    pub base_fingerprint: u64,
}

/// Fingerprints travel as 16-digit hex strings so JSON readers with
/// 53-bit integers do not round them.
pub(crate) mod hex_u64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Matrix,
}

/// Architecture, named parameter tensors in layer order, and provenance.
///
/// Layer `l` owns `layer{l}.weight` (`out x in`) at index `2l` and
/// `layer{l}.bias` (`1 x out`) at index `2l + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    arch: ArchSpec,
    params: Vec<Param>,
    pub meta: Meta,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input to layer `l`.
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub logits: Matrix,
}

pub fn param_names(arch: &ArchSpec) -> Vec<String> {
    (0..arch.num_layers())
        .flat_map(|l| [format!("layer{l}.weight"), format!("layer{l}.bias")])
        .collect()
}

/// 64-bit digest of parameter names, shapes and values.
pub fn fingerprint_params(params: &[Param]) -> u64 {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        h.update((p.tensor.rows() as u64).to_le_bytes());
        h.update((p.tensor.cols() as u64).to_le_bytes());
        for v in p.tensor.values() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

impl ModelCheckpoint {
    /// Assembles a checkpoint, checking names and shapes against `arch`.
    pub fn new(arch: ArchSpec, params: Vec<Param>, meta: Meta) -> Result<Self> {
        let names = param_names(&arch);
        if params.len() != names.len() {
            return Err(Error::shape(format!(
                "architecture needs {} tensors, got {}",
                names.len(),
                params.len()
            )));
        }
        for (l, spec) in arch.layers().iter().enumerate() {
            let w = &params[2 * l];
            let b = &params[2 * l + 1];
            if w.name != names[2 * l] || b.name != names[2 * l + 1] {
                return Err(Error::shape(format!(
                    "expected tensors {} and {}, got {} and {}",
                    names[2 * l],
                    names[2 * l + 1],
                    w.name,
                    b.name
                )));
            }
            if w.tensor.shape() != (spec.out_dim, spec.in_dim) || b.tensor.shape() != (1, spec.out_dim) {
                return Err(Error::shape(format!(
                    "layer {l}: weight {:?} bias {:?} for {}->{}",
                    w.tensor.shape(),
                    b.tensor.shape(),
                    spec.in_dim,
                    spec.out_dim
                )));
            }
        }
        Ok(Self { arch, params, meta })
    }

    /// Builds a pretrained-role checkpoint from tensors; the fingerprint is
    /// computed from the tensors themselves.
    pub fn pretrained_from_tensors(arch: ArchSpec, tensors: Vec<Matrix>) -> Result<Self> {
        let params = param_names(&arch)
            .into_iter()
            .zip(tensors)
            .map(|(name, tensor)| Param { name, tensor })
            .collect::<Vec<_>>();
        let base_fingerprint = fingerprint_params(&params);
        Self::new(
            arch,
            params,
            Meta {
                role: Role::Pretrained,
                task_id: None,
                base_fingerprint,
            },
        )
    }

    /// Seeded He-uniform weights, zero biases, role `pretrained`.
    pub fn init(arch: ArchSpec, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut tensors = Vec::with_capacity(2 * arch.num_layers());
        for spec in arch.layers() {
            let bound = (6.0 / spec.in_dim as f64).sqrt();
            tensors.push(Matrix::random_uniform(spec.out_dim, spec.in_dim, bound, &mut rng));
            tensors.push(Matrix::zeros(1, spec.out_dim));
        }
        Self::pretrained_from_tensors(arch, tensors).expect("shapes follow the architecture")
    }

    /// All-zero parameters (uniform predictions), role `pretrained`.
    pub fn zeros(arch: ArchSpec) -> Self {
        let tensors = arch
            .layers()
            .iter()
            .flat_map(|s| [Matrix::zeros(s.out_dim, s.in_dim), Matrix::zeros(1, s.out_dim)])
            .collect();
        Self::pretrained_from_tensors(arch, tensors).expect("shapes follow the architecture")
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn num_layers(&self) -> usize {
        self.arch.num_layers()
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.params[2 * layer].tensor
    }

    pub fn bias(&self, layer: usize) -> &Matrix {
        &self.params[2 * layer + 1].tensor
    }

    /// Layer index owning parameter `index`.
    pub fn layer_of(param_index: usize) -> usize {
        param_index / 2
    }

    pub fn role(&self) -> Role {
        self.meta.role
    }

    pub fn task_id(&self) -> Option<&str> {
        self.meta.task_id.as_deref()
    }

    pub fn with_task_id(mut self, task_id: impl Into<String>) -> Self {
        self.meta.task_id = Some(task_id.into());
        self
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.meta.role = role;
        self
    }

    /// Same architecture and same pretrained ancestry.
    pub fn is_merge_compatible(&self, other: &ModelCheckpoint) -> bool {
        self.arch == other.arch && self.meta.base_fingerprint == other.meta.base_fingerprint
    }

    /// New checkpoint sharing this one's arch with replaced tensors.
    pub fn with_tensors(&self, tensors: Vec<Matrix>, meta: Meta) -> Result<Self> {
        let params = self
            .params
            .iter()
            .zip(tensors)
            .map(|(p, tensor)| Param {
                name: p.name.clone(),
                tensor,
            })
            .collect();
        Self::new(self.arch.clone(), params, meta)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.params.iter().map(|p| &p.tensor)
    }

    /// All parameter values concatenated in params order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.values().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.arch.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.arch.num_params()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn forward_trace(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.cols() != self.arch.input_dim() {
            return Err(Error::shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.arch.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre_activations = Vec::with_capacity(self.num_layers());
        let mut h = batch.clone();
        for (l, spec) in self.arch.layers().iter().enumerate() {
            let mut z = h.matmul_transposed(self.weight(l))?;
            let b = self.bias(l).values();
            for i in 0..z.rows() {
                for (v, &bj) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
            let act = spec.activation;
            let out = z.map(|v| act.apply(v));
            inputs.push(h);
            pre_activations.push(z);
            h = out;
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            logits: h,
        })
    }

    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(batch)?.logits)
    }

    /// Class probabilities, one softmax-normalized row per input row.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(batch)?))
    }

    /// Gradients of a scalar loss with respect to every parameter tensor,
    /// given the loss gradient at the logits.
    pub fn backward(&self, batch: &Matrix, loss_grad_at_logits: &Matrix) -> Result<Vec<Matrix>> {
        let trace = self.forward_trace(batch)?;
        self.backward_from_trace(&trace, loss_grad_at_logits)
    }

    pub fn backward_from_trace(&self, trace: &ForwardTrace, loss_grad_at_logits: &Matrix) -> Result<Vec<Matrix>> {
        if loss_grad_at_logits.shape() != trace.logits.shape() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} vs logits {:?}",
                loss_grad_at_logits.shape(),
                trace.logits.shape()
            )));
        }
        let n_layers = self.num_layers();
        let mut grads = vec![None; 2 * n_layers];
        let mut upstream = loss_grad_at_logits.clone();
        for l in (0..n_layers).rev() {
            let act = self.arch.layers()[l].activation;
            let z = &trace.pre_activations[l];
            let mut dz = upstream;
            for (g, &zv) in dz.values_mut().iter_mut().zip(z.values()) {
                *g *= act.derivative(zv);
            }
            grads[2 * l] = Some(dz.transpose().matmul(&trace.inputs[l])?);
            grads[2 * l + 1] = Some(dz.column_sums());
            if l > 0 {
                upstream = dz.matmul(self.weight(l))?;
            } else {
                break;
            }
        }
        Ok(grads.into_iter().map(|g| g.expect("every layer visited")).collect())
    }
}

/// Free-function form of [`ModelCheckpoint::forward`].
pub fn forward(ckpt: &ModelCheckpoint, batch: &Matrix) -> Result<Matrix> {
    ckpt.forward(batch)
}

/// Free-function form of [`ModelCheckpoint::backward`].
pub fn backward(ckpt: &ModelCheckpoint, batch: &Matrix, loss_grad_at_logits: &Matrix) -> Result<Vec<Matrix>> {
    ckpt.backward(batch, loss_grad_at_logits)
}
