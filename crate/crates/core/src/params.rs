//! Parameter storage with group-level freezing, checksums and checkpoints.
//!
//! All models of a run share one [`ParamStore`]. Each parameter belongs to a
//! [`ParamGroup`]; only groups marked trainable hand out gradient-tracking
//! tensors, and only they accept updates through [`ParamStore::update`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use candle_core::{DType, Device, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::rng::{randn, seeded_rng};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "semsr-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Autoencoder,
    Extractor,
    /// Core denoising U-Net.
    Backbone,
    /// LR-conditioned control branch and its zero convolutions.
    Control,
    /// Prompt and semantic cross-attention blocks.
    Attention,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Autoencoder,
        ParamGroup::Extractor,
        ParamGroup::Backbone,
        ParamGroup::Control,
        ParamGroup::Attention,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Autoencoder => "autoencoder",
            ParamGroup::Extractor => "extractor",
            ParamGroup::Backbone => "backbone",
            ParamGroup::Control => "control",
            ParamGroup::Attention => "attention",
        }
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

struct Entry {
    var: Var,
    group: ParamGroup,
}

struct Inner {
    dtype: DType,
    seed: u64,
    entries: RwLock<BTreeMap<String, Entry>>,
    trainable: RwLock<BTreeSet<ParamGroup>>,
}

/// Shared, thread-safe parameter store.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
}

/// Handle to one parameter held by a layer.
#[derive(Clone)]
pub struct Param {
    name: Arc<str>,
    var: Var,
    group: ParamGroup,
    store: Arc<Inner>,
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("group", &self.group)
            .field("shape", &self.var.dims())
            .finish()
    }
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_trainable(&self) -> bool {
        self.store.trainable.read().unwrap().contains(&self.group)
    }

    /// Tensor for use in a forward pass. Frozen parameters come back detached
    /// so no gradient graph is built through them.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_detached_tensor()
        }
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Inner {
                dtype,
                seed,
                entries: RwLock::new(BTreeMap::new()),
                trainable: RwLock::new(BTreeSet::new()),
            }),
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    pub fn builder(&self, prefix: &str, group: ParamGroup) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: prefix.to_string(),
            group,
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init, group: ParamGroup) -> Result<Param> {
        let dtype = self.inner.dtype;
        let dev = Device::Cpu;
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, dtype, &dev)?,
            Init::Ones => Tensor::ones(shape, dtype, &dev)?,
            Init::Const(c) => (Tensor::ones(shape, DType::F64, &dev)? * c)?.to_dtype(dtype)?,
            Init::Normal(std) => {
                let mut rng = seeded_rng(self.inner.seed, &["param", &name]);
                (randn(&mut rng, shape, DType::F64)? * std)?.to_dtype(dtype)?
            }
        };
        let var = Var::from_tensor(&t)?;
        let mut entries = self.inner.entries.write().unwrap();
        if entries.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        entries.insert(
            name.clone(),
            Entry {
                var: var.clone(),
                group,
            },
        );
        Ok(Param {
            name: name.into(),
            var,
            group,
            store: self.inner.clone(),
        })
    }

    /// Mark exactly these groups as trainable; all others become frozen.
    pub fn set_trainable(&self, groups: &[ParamGroup]) {
        let mut t = self.inner.trainable.write().unwrap();
        t.clear();
        t.extend(groups.iter().copied());
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        self.inner.trainable.read().unwrap().iter().copied().collect()
    }

    pub fn is_group_trainable(&self, group: ParamGroup) -> bool {
        self.inner.trainable.read().unwrap().contains(&group)
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.entries.read().unwrap().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.inner.entries.read().unwrap().get(name).map(|e| e.group)
    }

    /// Parameters (name, var) in the given groups, sorted by name.
    pub fn params_in(&self, groups: &[ParamGroup]) -> Vec<(String, Var)> {
        self.inner
            .entries
            .read()
            .unwrap()
            .iter()
            .filter(|(_, e)| groups.contains(&e.group))
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn numel_in(&self, groups: &[ParamGroup]) -> usize {
        self.params_in(groups)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let entries = self.inner.entries.read().unwrap();
        let e = entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(e.var.as_detached_tensor())
    }

    /// Replace a parameter's value. Rejected for parameters in frozen groups.
    pub fn update(&self, name: &str, value: &Tensor) -> Result<()> {
        let entries = self.inner.entries.read().unwrap();
        let e = entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if !self.is_group_trainable(e.group) {
            return Err(Error::FrozenParameter(name.to_string()));
        }
        set_var(&e.var, value, name)
    }

    /// Overwrite a parameter from stored weights, regardless of freezing.
    /// Used when loading checkpoints and copying pretrained weights.
    pub fn restore(&self, name: &str, value: &Tensor) -> Result<()> {
        let entries = self.inner.entries.read().unwrap();
        let e = entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        set_var(&e.var, value, name)
    }

    /// SHA-256 over names, shapes and values of every parameter in `groups`.
    pub fn checksum(&self, groups: &[ParamGroup]) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.params_in(groups) {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update(tensor_bytes(var.as_tensor())?);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Snapshot every parameter as detached tensors.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.inner
            .entries
            .read()
            .unwrap()
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_detached_tensor().copy().unwrap()))
            .collect()
    }

    /// Load parameters present in `tensors`. Every store parameter must be present.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.names() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            self.restore(&name, &t.to_dtype(self.dtype())?)?;
        }
        Ok(())
    }
}

fn set_var(var: &Var, value: &Tensor, name: &str) -> Result<()> {
    if var.dims() != value.dims() {
        return Err(Error::ShapeMismatch {
            op: "param update",
            lhs: var.dims().to_vec(),
            rhs: value.dims().to_vec(),
        });
    }
    let value = value.to_dtype(var.dtype())?.detach();
    var.set(&value).map_err(|e| {
        Error::Checkpoint(format!("failed to set `{name}`: {e}"))
    })
}

/// Scoped constructor for parameters, in the spirit of a var builder.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        Self {
            store: self.store.clone(),
            prefix: if self.prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}.{}", self.prefix, name)
            },
            group: self.group,
        }
    }

    pub fn with_group(&self, group: ParamGroup) -> Self {
        Self {
            group,
            ..self.clone()
        }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init, self.group)
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => {
            return Err(Error::Checkpoint(format!("unsupported dtype {other:?}")));
        }
    })
}

fn tensor_from_bytes(dtype: DType, shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
    let dev = Device::Cpu;
    Ok(match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        DType::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

/// Weight archive: named tensors plus string metadata, stored as safetensors
/// with a format/version header in the metadata block.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut views = Vec::with_capacity(self.tensors.len());
        let mut buffers = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let dtype = match t.dtype() {
                DType::F32 => safetensors::Dtype::F32,
                DType::F64 => safetensors::Dtype::F64,
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
            };
            buffers.push((name.clone(), dtype, t.dims().to_vec(), tensor_bytes(t)?));
        }
        for (name, dtype, shape, bytes) in &buffers {
            let view = safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            views.push((name.clone(), view));
        }
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("format_version".into(), CHECKPOINT_VERSION.into());
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        safetensors::serialize_to_file(views, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        match (metadata.get("format"), metadata.get("format_version")) {
            (Some(f), Some(v)) if f == CHECKPOINT_FORMAT && v == CHECKPOINT_VERSION => {}
            (f, v) => {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported header format={f:?} version={v:?}",
                    path.display()
                )))
            }
        }
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let dtype = match view.dtype() {
                safetensors::Dtype::F32 => DType::F32,
                safetensors::Dtype::F64 => DType::F64,
                other => {
                    return Err(Error::Checkpoint(format!("unsupported dtype {other:?}")))
                }
            };
            tensors.insert(name, tensor_from_bytes(dtype, view.shape(), view.data())?);
        }
        Ok(Self { tensors, metadata })
    }
}

/// Adam optimizer with serializable moment state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads`. Parameters absent from the
    /// gradient store are left untouched.
    pub fn step(
        &mut self,
        store: &ParamStore,
        params: &[(String, Var)],
        grads: &candle_core::backprop::GradStore,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (var.as_detached_tensor() - (delta * self.lr)?)?;
            store.update(name, &next)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    pub fn write_state(&self, ckpt: &mut Checkpoint) {
        for (name, (m, v)) in &self.moments {
            ckpt.tensors.insert(format!("adam.m.{name}"), m.clone());
            ckpt.tensors.insert(format!("adam.v.{name}"), v.clone());
        }
        ckpt.metadata.insert("adam.step".into(), self.step.to_string());
        ckpt.metadata.insert("adam.lr".into(), self.lr.to_string());
    }

    pub fn read_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.step = ckpt
            .metadata
            .get("adam.step")
            .map(|s| s.parse::<u64>())
            .transpose()
            .map_err(|e| Error::Checkpoint(format!("bad adam.step: {e}")))?
            .unwrap_or(0);
        self.moments.clear();
        for (key, m) in &ckpt.tensors {
            if let Some(name) = key.strip_prefix("adam.m.") {
                let v = ckpt
                    .tensors
                    .get(&format!("adam.v.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing adam.v.{name}")))?;
                self.moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(())
    }
}

/// Stable checksum of a group set, tagged with the group names.
pub fn group_checksums(store: &ParamStore, groups: &[ParamGroup]) -> Result<BTreeMap<ParamGroup, String>> {
    groups
        .iter()
        .map(|g| Ok((*g, store.checksum(&[*g])?)))
        .collect()
}
