//! Reference interpreter: NHWC activations, HWIO convolution weights,
//! wide accumulation (f64 for floats, i64 for integers) then a cast to the
//! output dtype.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{Conv2dAttrs, DType, Graph, OpAttrs, TensorKind};

/// A dense tensor in canonical row-major layout. Values are stored as `f64`,
/// which holds every i8/i32 value and every f32 value exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

/// Rounds or saturates `v` to what `dtype` can hold.
pub fn cast(dtype: DType, v: f64) -> f64 {
    match dtype {
        DType::F32 | DType::F16 => v as f32 as f64,
        DType::I32 => v.round().clamp(i32::MIN as f64, i32::MAX as f64),
        DType::I8 => v.round().clamp(i8::MIN as f64, i8::MAX as f64),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Interp(format!("{} elements for shape {shape:?}", data.len())));
        }
        Ok(TensorValue { shape, dtype, data: data.into_iter().map(|v| cast(dtype, v)).collect() })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        TensorValue { shape: shape.to_vec(), dtype, data: vec![0.0; shape.iter().product()] }
    }

    /// Elements `[begin, end)` along `axis`.
    pub fn slice(&self, axis: usize, begin: usize, end: usize) -> Result<Self> {
        if axis >= self.shape.len() || begin >= end || end > self.shape[axis] {
            return Err(Error::Interp(format!("slice [{begin},{end}) of axis {axis} on {:?}", self.shape)));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut data = Vec::with_capacity(outer * (end - begin) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + begin * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - begin;
        Ok(TensorValue { shape, dtype: self.dtype, data })
    }

    pub fn concat(parts: &[&TensorValue], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Interp("concat of nothing".into()))?;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(TensorValue { shape, dtype: first.dtype, data })
    }
}

fn conv2d(x: &TensorValue, w: &TensorValue, a: &Conv2dAttrs, out_shape: &[usize], dtype: DType) -> Vec<f64> {
    let (n, h, wd, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oy, ox, k) = (out_shape[1], out_shape[2], out_shape[3]);
    let cg = c / a.groups;
    let kg = k / a.groups;
    let xs = strides(&x.shape);
    let ws = strides(&w.shape);
    let int = !dtype.is_float();
    let mut out = Vec::with_capacity(n * oy * ox * k);
    for b in 0..n {
        for y in 0..oy {
            for xo in 0..ox {
                for ko in 0..k {
                    let g = ko / kg;
                    let mut acc_f = 0.0f64;
                    let mut acc_i = 0i64;
                    for ky in 0..a.kernel_h {
                        let iy = (y * a.stride_h + ky) as isize - a.pad_t as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..a.kernel_w {
                            let ix = (xo * a.stride_w + kx) as isize - a.pad_l as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cg {
                                let xv = x.data[b * xs[0] + iy as usize * xs[1] + ix as usize * xs[2] + g * cg + ci];
                                let wv = w.data[ky * ws[0] + kx * ws[1] + ci * ws[2] + ko];
                                if int {
                                    acc_i += xv as i64 * wv as i64;
                                } else {
                                    acc_f += xv * wv;
                                }
                            }
                        }
                    }
                    out.push(if int { acc_i as f64 } else { acc_f });
                }
            }
        }
    }
    out
}

fn dense(x: &TensorValue, w: &TensorValue, dtype: DType) -> Vec<f64> {
    let (n, inp) = (x.shape[0], x.shape[1]);
    let outp = w.shape[1];
    let int = !dtype.is_float();
    let mut out = Vec::with_capacity(n * outp);
    for b in 0..n {
        for o in 0..outp {
            let mut acc_f = 0.0f64;
            let mut acc_i = 0i64;
            for i in 0..inp {
                let (xv, wv) = (x.data[b * inp + i], w.data[i * outp + o]);
                if int {
                    acc_i += xv as i64 * wv as i64;
                } else {
                    acc_f += xv * wv;
                }
            }
            out.push(if int { acc_i as f64 } else { acc_f });
        }
    }
    out
}

fn maxpool(x: &TensorValue, window: usize, stride: usize, out_shape: &[usize]) -> Vec<f64> {
    let xs = strides(&x.shape);
    let (n, oy, ox, c) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let mut out = Vec::with_capacity(n * oy * ox * c);
    for b in 0..n {
        for y in 0..oy {
            for xo in 0..ox {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..window {
                        for kx in 0..window {
                            let v = x.data[b * xs[0] + (y * stride + ky) * xs[1] + (xo * stride + kx) * xs[2] + ch];
                            m = m.max(v);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Executes `g` and returns every output-kind tensor.
pub fn interpret(
    g: &Graph,
    inputs: &BTreeMap<String, TensorValue>,
    weights: &BTreeMap<String, TensorValue>,
) -> Result<BTreeMap<String, TensorValue>> {
    let mut env: HashMap<&str, TensorValue> = HashMap::new();
    for t in g.tensors() {
        let src = match t.kind {
            TensorKind::Input => inputs,
            TensorKind::Weight => weights,
            _ => continue,
        };
        let v = src.get(&t.name).ok_or_else(|| Error::MissingInput(t.name.clone()))?;
        if v.shape != t.shape {
            return Err(Error::Interp(format!("`{}` has shape {:?}, expected {:?}", t.name, v.shape, t.shape)));
        }
        env.insert(&t.name, TensorValue { shape: v.shape.clone(), dtype: t.dtype, data: v.data.clone() });
    }
    for &i in g.topo_order() {
        let op = &g.operators()[i];
        let out_info = g.tensor(op.output()).expect("validated");
        let args: Vec<&TensorValue> = op
            .inputs
            .iter()
            .map(|n| env.get(n.as_str()).ok_or_else(|| Error::MissingInput(n.clone())))
            .collect::<Result<_>>()?;
        let dtype = out_info.dtype;
        let value = match &op.attrs {
            OpAttrs::Conv2d(a) => TensorValue::new(out_info.shape.clone(), dtype, conv2d(args[0], args[1], a, &out_info.shape, dtype))?,
            OpAttrs::Dense => TensorValue::new(out_info.shape.clone(), dtype, dense(args[0], args[1], dtype))?,
            OpAttrs::Add => {
                let data = args[0].data.iter().zip(&args[1].data).map(|(a, b)| a + b).collect();
                TensorValue::new(out_info.shape.clone(), dtype, data)?
            }
            OpAttrs::Relu => {
                let data = args[0].data.iter().map(|&v| v.max(0.0)).collect();
                TensorValue::new(out_info.shape.clone(), dtype, data)?
            }
            OpAttrs::MaxPool2d(a) => {
                TensorValue::new(out_info.shape.clone(), dtype, maxpool(args[0], a.window, a.stride, &out_info.shape))?
            }
            OpAttrs::Slice(a) => args[0].slice(a.axis, a.begin, a.end)?,
            OpAttrs::Concat(a) => TensorValue::concat(&args, a.axis)?,
        };
        if value.shape != out_info.shape {
            return Err(Error::Interp(format!("`{}` produced shape {:?}", op.name, value.shape)));
        }
        env.insert(op.output(), value);
    }
    let mut out = BTreeMap::new();
    for t in g.output_tensors() {
        let v = env.remove(t.name.as_str()).ok_or_else(|| Error::Interp(format!("output `{}` never produced", t.name)))?;
        out.insert(t.name.clone(), v);
    }
    Ok(out)
}

/// Seeded random values for every weight and input tensor: uniform in
/// [-1, 1) for floats, integers in [-8, 8] otherwise. Returns `(weights, inputs)`.
pub fn random_tensors(g: &Graph, seed: u64) -> (BTreeMap<String, TensorValue>, BTreeMap<String, TensorValue>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for t in g.tensors() {
        let target = match t.kind {
            TensorKind::Weight => &mut weights,
            TensorKind::Input => &mut inputs,
            _ => continue,
        };
        let n: usize = t.shape.iter().product();
        let data = (0..n)
            .map(|_| if t.dtype.is_float() { rng.gen_range(-1.0..1.0) } else { rng.gen_range(-8i32..=8) as f64 })
            .collect();
        let v = TensorValue::new(t.shape.clone(), t.dtype, data).expect("sized above");
        target.insert(t.name.clone(), v);
    }
    (weights, inputs)
}
