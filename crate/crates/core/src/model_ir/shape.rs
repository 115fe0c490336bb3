use crate::error::{Error, Result};

use super::{OpAttrs, TensorInfo, TensorKind};

fn shape_err(op: &str, detail: impl Into<String>) -> Error {
    Error::Shape { op: op.to_string(), detail: detail.into() }
}

fn arity(op: &str, inputs: &[&TensorInfo], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

fn rank(op: &str, t: &TensorInfo, r: usize) -> Result<()> {
    if t.shape.len() != r {
        return Err(shape_err(op, format!("`{}` must have rank {r}, has {:?}", t.name, t.shape)));
    }
    Ok(())
}

/// Output extent of a strided window over `input` padded by `pad`.
fn windowed(op: &str, input: usize, pad: usize, window: usize, stride: usize) -> Result<usize> {
    if stride == 0 || window == 0 {
        return Err(shape_err(op, "window and stride must be positive"));
    }
    let padded = input + pad;
    if padded < window {
        return Err(shape_err(op, format!("window {window} larger than padded extent {padded}")));
    }
    Ok((padded - window) / stride + 1)
}

/// Infers the output shape of an operator and checks its inputs for consistency.
pub fn infer_output_shape(op: &str, attrs: &OpAttrs, inputs: &[&TensorInfo]) -> Result<Vec<usize>> {
    match attrs {
        OpAttrs::Conv2d(a) => {
            arity(op, inputs, 2)?;
            let (x, w) = (inputs[0], inputs[1]);
            rank(op, x, 4)?;
            rank(op, w, 4)?;
            if w.kind != TensorKind::Weight {
                return Err(shape_err(op, format!("filter `{}` must be a weight tensor", w.name)));
            }
            let [n, h, wd, c] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
            let [fy, fx, cg, k] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
            if a.groups == 0 || c % a.groups != 0 || k % a.groups != 0 {
                return Err(shape_err(op, format!("groups {} must divide C={c} and K={k}", a.groups)));
            }
            if cg * a.groups != c {
                return Err(shape_err(
                    op,
                    format!("input channels {c} != weight channels {cg} x groups {}", a.groups),
                ));
            }
            if fy != a.kernel_h || fx != a.kernel_w {
                return Err(shape_err(op, format!("kernel attrs {}x{} vs weight {fy}x{fx}", a.kernel_h, a.kernel_w)));
            }
            let oy = windowed(op, h, a.pad_t + a.pad_b, fy, a.stride_h)?;
            let ox = windowed(op, wd, a.pad_l + a.pad_r, fx, a.stride_w)?;
            Ok(vec![n, oy, ox, k])
        }
        OpAttrs::Dense => {
            arity(op, inputs, 2)?;
            let (x, w) = (inputs[0], inputs[1]);
            rank(op, x, 2)?;
            rank(op, w, 2)?;
            if w.kind != TensorKind::Weight {
                return Err(shape_err(op, format!("`{}` must be a weight tensor", w.name)));
            }
            if x.shape[1] != w.shape[0] {
                return Err(shape_err(op, format!("IN mismatch: {} vs {}", x.shape[1], w.shape[0])));
            }
            Ok(vec![x.shape[0], w.shape[1]])
        }
        OpAttrs::Add => {
            arity(op, inputs, 2)?;
            if inputs[0].shape != inputs[1].shape {
                return Err(shape_err(op, format!("{:?} vs {:?}", inputs[0].shape, inputs[1].shape)));
            }
            Ok(inputs[0].shape.clone())
        }
        OpAttrs::Relu => {
            arity(op, inputs, 1)?;
            Ok(inputs[0].shape.clone())
        }
        OpAttrs::MaxPool2d(a) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            rank(op, x, 4)?;
            let oy = windowed(op, x.shape[1], 0, a.window, a.stride)?;
            let ox = windowed(op, x.shape[2], 0, a.window, a.stride)?;
            Ok(vec![x.shape[0], oy, ox, x.shape[3]])
        }
        OpAttrs::Slice(a) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if a.axis >= x.shape.len() || a.begin >= a.end || a.end > x.shape[a.axis] {
                return Err(shape_err(
                    op,
                    format!("slice [{}, {}) on axis {} of {:?}", a.begin, a.end, a.axis, x.shape),
                ));
            }
            let mut shape = x.shape.clone();
            shape[a.axis] = a.end - a.begin;
            Ok(shape)
        }
        OpAttrs::Concat(a) => {
            if inputs.is_empty() {
                return Err(shape_err(op, "concat needs at least one input"));
            }
            let first = &inputs[0].shape;
            if a.axis >= first.len() {
                return Err(shape_err(op, format!("axis {} out of range", a.axis)));
            }
            let mut shape = first.clone();
            shape[a.axis] = 0;
            for t in inputs {
                let same = t.shape.len() == first.len()
                    && t.shape.iter().zip(first).enumerate().all(|(d, (x, y))| d == a.axis || x == y);
                if !same {
                    return Err(shape_err(op, format!("`{}` {:?} incompatible with {:?}", t.name, t.shape, first)));
                }
                shape[a.axis] += t.shape[a.axis];
            }
            Ok(shape)
        }
    }
}

/// Arithmetic operation count (two per MAC for conv/dense, one per output
/// element for elementwise ops, window area per output for pooling, zero for
/// pure data movement).
pub fn op_count(attrs: &OpAttrs, inputs: &[&TensorInfo], out: &[usize]) -> u64 {
    let out_elems: u64 = out.iter().map(|&e| e as u64).product();
    match attrs {
        OpAttrs::Conv2d(a) => {
            let w = &inputs[1].shape;
            let (fy, fx, cg) = (w[0] as u64, w[1] as u64, w[2] as u64);
            let _ = a;
            2 * out_elems * cg * fy * fx
        }
        OpAttrs::Dense => 2 * out_elems * inputs[1].shape[0] as u64,
        OpAttrs::Add | OpAttrs::Relu => out_elems,
        OpAttrs::MaxPool2d(a) => (a.window * a.window) as u64 * out_elems,
        OpAttrs::Slice(_) | OpAttrs::Concat(_) => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{DType, TensorKind};

    fn t(name: &str, shape: &[usize], kind: TensorKind) -> TensorInfo {
        TensorInfo::new(name, shape, DType::F32, kind)
    }

    #[test]
    fn dense_ops() {
        let x = t("x", &[1, 784], TensorKind::Input);
        let w = t("w", &[784, 128], TensorKind::Weight);
        assert_eq!(op_count(&OpAttrs::Dense, &[&x, &w], &[1, 128]), 200_704);
    }

    #[test]
    fn add_counts_elements_and_slice_is_free() {
        let a = t("a", &[1, 8, 8, 32], TensorKind::Input);
        assert_eq!(op_count(&OpAttrs::Add, &[&a, &a], &[1, 8, 8, 32]), 2048);
        let s = OpAttrs::Slice(crate::model_ir::SliceAttrs { axis: 1, begin: 0, end: 4 });
        assert_eq!(op_count(&s, &[&a], &[1, 4, 8, 32]), 0);
    }

    #[test]
    fn strided_padded_conv_shape() {
        let x = t("x", &[1, 9, 9, 4], TensorKind::Input);
        let w = t("w", &[3, 3, 4, 8], TensorKind::Weight);
        let a = OpAttrs::Conv2d(crate::model_ir::Conv2dAttrs::square(3, 2, 1));
        assert_eq!(infer_output_shape("c", &a, &[&x, &w]).unwrap(), vec![1, 5, 5, 8]);
    }

    #[test]
    fn depthwise_ops_use_channels_per_group() {
        let x = t("x", &[1, 8, 8, 16], TensorKind::Input);
        let w = t("w", &[3, 3, 1, 16], TensorKind::Weight);
        let a = OpAttrs::Conv2d(crate::model_ir::Conv2dAttrs::square(3, 1, 1).with_groups(16));
        let out = infer_output_shape("dw", &a, &[&x, &w]).unwrap();
        assert_eq!(out, vec![1, 8, 8, 16]);
        assert_eq!(op_count(&a, &[&x, &w], &out), 2 * 8 * 8 * 16 * 9);
    }
}
