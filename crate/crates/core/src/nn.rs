//! Parameter storage and the handful of differentiable building blocks shared
//! by the fusion transformer and the toy denoiser.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// How a parameter is initialized the first time it is requested.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-a, a]`.
    Uniform(f64),
}

/// Something a model can pull named parameters from.
pub trait ParamSource {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Named trainable parameters in a deterministic (sorted) order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(value)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.into(), var);
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Fresh trainable copy; the copy never aliases this store's storage.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(Self { vars })
    }

    /// Detached value copies, suitable for a frozen model.
    pub fn frozen(&self) -> Result<FrozenParams> {
        let mut tensors = BTreeMap::new();
        for (name, var) in &self.vars {
            tensors.insert(name.clone(), var.as_tensor().detach().copy()?);
        }
        Ok(FrozenParams { tensors })
    }

    /// Overwrites every stored value from `tensors`, which must cover exactly
    /// the same names and shapes. Models built on this store observe the new
    /// values because the update happens in place.
    pub fn assign_from(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Load(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let value = tensors
                .get(name)
                .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?;
            if value.dims() != var.dims() {
                return Err(Error::Load(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    /// Overwrites the named subset in place; unknown names are an error.
    pub fn overlay<'a>(
        &self,
        tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
    ) -> Result<()> {
        for (name, value) in tensors {
            let var = self
                .vars
                .get(name)
                .ok_or_else(|| Error::Load(format!("unknown parameter {name}")))?;
            check_shape(name, var.dims(), value.dims())?;
            var.set(&value.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn content_hash(&self) -> Result<String> {
        hash_tensors(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }
}

impl ParamSource for ParamStore {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?;
        check_shape(name, var.dims(), shape)?;
        Ok(var.as_tensor().clone())
    }
}

/// Immutable parameter values with no gradient tracking.
#[derive(Debug, Clone)]
pub struct FrozenParams {
    tensors: BTreeMap<String, Tensor>,
}

impl FrozenParams {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn content_hash(&self) -> Result<String> {
        hash_tensors(self.tensors.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Trainable copy of these values.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.insert(name.clone(), &t.copy()?)?;
        }
        Ok(store)
    }
}

impl ParamSource for FrozenParams {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?;
        check_shape(name, t.dims(), shape)?;
        Ok(t.clone())
    }
}

/// Creates parameters on first request, drawing values from a seeded stream.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    pub dtype: DType,
    pub device: Device,
}

impl ParamSource for Initializer<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.store.get(name).is_some() {
            return Err(Error::contract(format!("parameter {name} defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::Uniform(a) => {
                let dist = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.store.insert(name, &t)
    }
}

fn check_shape(name: &str, have: &[usize], want: &[usize]) -> Result<()> {
    if have != want {
        return Err(Error::Load(format!(
            "parameter {name}: stored shape {have:?}, model expects {want:?}"
        )));
    }
    Ok(())
}

/// SHA-256 over names, shapes and little-endian f64 values.
pub fn hash_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in to_vec(t)? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn to_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Parameter-free normalization over the last axis: zero mean, unit
/// (population) variance, `eps` added to the variance.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub fn layer_norm_affine(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm(x, eps)?
        .broadcast_mul(gain)?
        .broadcast_add(bias)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// `x @ weight^T + bias` for `x` of shape `(..., in)` and `weight` of shape
/// `(out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&weight.t()?)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn save_tensors(
    tensors: &BTreeMap<String, Tensor>,
    metadata: Option<HashMap<String, String>>,
    path: &Path,
) -> Result<()> {
    let mut views = Vec::with_capacity(tensors.len());
    let mut buffers = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = to_vec(t)?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), t.dims().to_vec(), bytes));
    }
    for (name, shape, bytes) in &buffers {
        let view =
            safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), bytes)?;
        views.push((name.clone(), view));
    }
    let data = safetensors::serialize(views, metadata)?;
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub struct LoadedTensors {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

pub fn load_tensors(path: &Path, dtype: DType, device: &Device) -> Result<LoadedTensors> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&data)?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let st = safetensors::SafeTensors::deserialize(&data)?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F64 {
            return Err(Error::Load(format!("{name}: expected f64 blob")));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), device)?.to_dtype(dtype)?;
        tensors.insert(name, t);
    }
    Ok(LoadedTensors { tensors, metadata })
}
