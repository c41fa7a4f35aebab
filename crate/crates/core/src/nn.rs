//! Small neural-network toolkit on top of candle tensors.
//!
//! Convolutions go through an explicit im2col/col2im pair so that both the
//! forward and the backward pass reduce to matrix products.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::RngStream;

struct Im2Col {
    k: usize,
    pad: usize,
}

struct Col2Im {
    k: usize,
    pad: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn im2col_impl<T: Copy + Default>(src: &[T], b: usize, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<T> {
    let kk = c * k * k;
    let p = pad as isize;
    let mut out = vec![T::default(); b * h * w * kk];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = &mut out[((bi * h + y) * w + x) * kk..][..kk];
                let mut idx = 0;
                for ci in 0..c {
                    let plane = &src[(bi * c + ci) * h * w..][..h * w];
                    for dy in 0..k {
                        let yy = y as isize + dy as isize - p;
                        for dx in 0..k {
                            let xx = x as isize + dx as isize - p;
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                row[idx] = plane[yy as usize * w + xx as usize];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn col2im_impl<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Vec<T> {
    let kk = c * k * k;
    let p = pad as isize;
    let mut out = vec![T::default(); b * c * h * w];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = &src[((bi * h + y) * w + x) * kk..][..kk];
                let mut idx = 0;
                for ci in 0..c {
                    let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                    for dy in 0..k {
                        let yy = y as isize + dy as isize - p;
                        for dx in 0..k {
                            let xx = x as isize + dx as isize - p;
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                plane[yy as usize * w + xx as usize] += row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let shape = Shape::from((b, h * w, c * self.k * self.k));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_impl(contiguous_slice(v, l)?, b, c, h, w, self.k, self.pad)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_impl(contiguous_slice(v, l)?, b, c, h, w, self.k, self.pad)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let g = grad.contiguous()?.apply_op1_no_bwd(&Col2Im { k: self.k, pad: self.pad, c, h, w })?;
        Ok(Some(g))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, _, _) = l.shape().dims3()?;
        let (c, h, w) = (self.c, self.h, self.w);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_impl(contiguous_slice(v, l)?, b, c, h, w, self.k, self.pad)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_impl(contiguous_slice(v, l)?, b, c, h, w, self.k, self.pad)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Same-padded, stride-1 2-D convolution with an odd square kernel.
pub fn conv2d_same(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let (co, ci, k, _) = weight.dims4()?;
    let out = if k == 1 {
        let xm = x.reshape((b, ci, h * w))?;
        let wm = weight.reshape((co, ci))?;
        wm.broadcast_matmul(&xm)?.reshape((b, co, h, w))?
    } else {
        let cols = x.contiguous()?.apply_op1(Im2Col { k, pad: k / 2 })?;
        let wm = weight.reshape((co, ci * k * k))?.t()?;
        cols.broadcast_matmul(&wm)?.transpose(1, 2)?.reshape((b, co, h, w))?
    };
    Ok(match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, co, 1, 1))?)?,
        None => out,
    })
}

/// Named trainable parameters with seeded initialization.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { vars: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert_values(&mut self, name: &str, values: Vec<f32>, shape: Shape) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.vars.insert(name.to_string(), v);
        Ok(out)
    }

    /// Normal init scaled by `gain / sqrt(fan_in)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &RngStream) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let std = (gain / (fan_in as f64).sqrt()) as f32;
        let values = rng.named(name).normal_vec(n).into_iter().map(|v| v * std).collect();
        self.insert_values(name, values, Shape::from(shape.to_vec()))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert_values(name, vec![0.0; n], Shape::from(shape.to_vec()))
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Replaces every parameter with the tensor of the same name.
    pub fn load_from(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!("`{name}`: {:?} vs {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// 2-D convolution layer (same padding).
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &RngStream) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, 2f64.sqrt(), rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[cout])?;
        Ok(Self { weight, bias })
    }

    /// Zero-initialized weights, for output projections.
    pub fn zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[cout, cin, k, k])?;
        let bias = store.zeros(&format!("{name}.bias"), &[cout])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_same(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, gain: f64, rng: &RngStream) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[dout, din], din, gain, rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[dout])?;
        Ok(Self { weight, bias })
    }

    /// `(B, din) -> (B, dout)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Writes tensors plus a JSON metadata blob (stored as a `u8` tensor) to safetensors.
pub fn save_checkpoint(path: &Path, mut tensors: HashMap<String, Tensor>, meta: &serde_json::Value) -> Result<()> {
    let bytes = serde_json::to_vec(meta)?;
    let n = bytes.len();
    tensors.insert("__meta__".into(), Tensor::from_vec(bytes, n, &Device::Cpu)?);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(HashMap<String, Tensor>, serde_json::Value)> {
    let mut tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    let meta = tensors
        .remove("__meta__")
        .ok_or_else(|| Error::Data(format!("{} has no metadata", path.display())))?;
    let bytes: Vec<u8> = meta.to_vec1()?;
    Ok((tensors, serde_json::from_slice(&bytes)?))
}

/// Elementwise SiLU.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// Per-row log-softmax cross entropy averaged over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, _) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} logits rows for {} labels", labels.len())));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), logits.device())?;
    let lsm = candle_nn::ops::log_softmax(logits, 1)?;
    Ok(lsm.gather(&idx, 1)?.neg()?.mean_all()?)
}

/// Straight-through estimator: forward value of `hard`, gradient of `soft`.
pub fn straight_through(soft: &Tensor, hard: &Tensor) -> Result<Tensor> {
    Ok((soft + (hard - soft)?.detach())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_candle_reference() {
        let dev = Device::Cpu;
        let rng = RngStream::new(0, 0);
        let x = rng.named("x").normal_tensor((2, 3, 7, 6), &dev).unwrap();
        let w = rng.named("w").normal_tensor((4, 3, 3, 3), &dev).unwrap();
        let ours = conv2d_same(&x, &w, None).unwrap();
        let theirs = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let diff = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let rng = RngStream::new(1, 0);
        let x = rng.named("x").normal_tensor((1, 2, 5, 5), &dev).unwrap().to_dtype(DType::F64).unwrap();
        let w = rng.named("w").normal_tensor((3, 2, 3, 3), &dev).unwrap().to_dtype(DType::F64).unwrap();
        let xv = Var::from_tensor(&x).unwrap();
        let f = |t: &Tensor| conv2d_same(t, &w, None).unwrap().sqr().unwrap().sum_all().unwrap();
        let g = f(xv.as_tensor()).backward().unwrap();
        let grad: Vec<f64> = g.get(&xv).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in [0usize, 7, 24, 49] {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fp = f(&Tensor::from_vec(p, (1, 2, 5, 5), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fm = f(&Tensor::from_vec(m, (1, 2, 5, 5), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1.0), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        store.normal("a", &[2, 3], 3, 1.0, &RngStream::new(3, 0)).unwrap();
        let path = dir.path().join("ck.safetensors");
        save_checkpoint(&path, store.tensors(), &serde_json::json!({"kind": "test"})).unwrap();
        let (tensors, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta["kind"], "test");
        let mut other = ParamStore::new(DType::F32, Device::Cpu);
        other.zeros("a", &[2, 3]).unwrap();
        other.load_from(&tensors).unwrap();
        let a: Vec<f32> = store.get("a").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = other.get("a").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
