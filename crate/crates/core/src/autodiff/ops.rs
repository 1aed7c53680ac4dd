use super::graph::{InterpMode, Op};
use super::kernels::{self, ConvGeom};
use super::{AutodiffError, Result, Tensor};

fn dim_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(AutodiffError::Dimension { op, detail })
}

impl<'g> Tensor<'g> {
    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor<'g> {
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let node = &nodes[self.id];
            (node.shape.clone(), node.value.iter().map(|&v| f(v)).collect())
        };
        self.graph.push(shape, value, op)
    }

    fn binary(&self, other: &Tensor<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tensor<'g>> {
        self.graph.check_owner(other)?;
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return dim_err(name, format!("{:?} vs {:?}", a.shape, b.shape));
            }
            (a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
        };
        Ok(self.graph.push(shape, value, op))
    }

    pub fn add(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, factor: f64) -> Tensor<'g> {
        self.unary(|v| v * factor, Op::Scale(self.id, factor))
    }

    pub fn neg(&self) -> Tensor<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'g> {
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Tensor<'g> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Tensor<'g> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Tensor<'g> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sigmoid(&self) -> Tensor<'g> {
        self.unary(crate::losses::sigmoid, Op::Sigmoid(self.id))
    }

    /// `x[c, ...] + bias[c]` for a leading channel axis.
    pub fn add_channel_bias(&self, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.graph.check_owner(bias)?;
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            if b.shape.len() != 1 || x.shape.first() != Some(&b.shape[0]) {
                return dim_err("add_channel_bias", format!("{:?} + {:?}", x.shape, b.shape));
            }
            let inner = x.value.len() / b.value.len().max(1);
            let value = x
                .value
                .iter()
                .enumerate()
                .map(|(i, v)| v + b.value[i / inner])
                .collect();
            (x.shape.clone(), value)
        };
        Ok(self.graph.push(shape, value, Op::AddChannelBias(self.id, bias.id)))
    }

    /// Multiplies every element by a single-element tensor.
    pub fn mul_scalar(&self, k: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.graph.check_owner(k)?;
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let (x, kn) = (&nodes[self.id], &nodes[k.id]);
            if kn.value.len() != 1 {
                return dim_err("mul_scalar", format!("factor has shape {:?}", kn.shape));
            }
            let kv = kn.value[0];
            (x.shape.clone(), x.value.iter().map(|v| v * kv).collect())
        };
        Ok(self.graph.push(shape, value, Op::MulScalar(self.id, k.id)))
    }

    pub fn matmul(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.graph.check_owner(other)?;
        let (m, k, n, value) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return dim_err("matmul", format!("{:?} x {:?}", a.shape, b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut value = vec![0.0; m * n];
            kernels::gemm(m, k, n, &a.value, false, &b.value, false, &mut value, 0.0);
            (m, k, n, value)
        };
        Ok(self.graph.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<'g>> {
        let (rows, cols, value) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return dim_err("transpose", format!("expected a matrix, got {:?}", a.shape));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut value = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    value[c * rows + r] = a.value[r * cols + c];
                }
            }
            (rows, cols, value)
        };
        Ok(self.graph.push(vec![cols, rows], value, Op::Transpose { a: self.id, rows, cols }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.value.len() {
                return dim_err("reshape", format!("{:?} -> {shape:?}", a.shape));
            }
            a.value.clone()
        };
        Ok(self.graph.push(shape.to_vec(), value, Op::Reshape(self.id)))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'g>> {
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            if axis >= a.shape.len() || start + len > a.shape[axis] {
                return dim_err("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape));
            }
            let (outer, extent, inner) = kernels::axis_blocks(&a.shape, axis);
            let mut value = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                value.extend_from_slice(&a.value[(o * extent + start) * inner..(o * extent + start + len) * inner]);
            }
            let mut shape = a.shape.clone();
            shape[axis] = len;
            (shape, value)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<'g>> {
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            if axis >= a.shape.len() {
                return dim_err("softmax", format!("axis {axis} of {:?}", a.shape));
            }
            (a.shape.clone(), kernels::softmax_forward(&a.value, &a.shape, axis))
        };
        Ok(self.graph.push(shape, value, Op::Softmax { a: self.id, axis }))
    }

    pub fn sum(&self) -> Tensor<'g> {
        let total = self.data().iter().sum();
        self.graph.push(vec![], vec![total], Op::Sum(self.id))
    }

    /// Mean over `axes`; reduced axes are removed from the shape.
    pub fn mean(&self, axes: &[usize]) -> Result<Tensor<'g>> {
        let (shape, value, out_index, count) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let rank = a.shape.len();
            if axes.iter().any(|&ax| ax >= rank) {
                return dim_err("mean", format!("axes {axes:?} of {:?}", a.shape));
            }
            let keep: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
            let out_shape: Vec<usize> = keep.iter().map(|&d| a.shape[d]).collect();
            let count: usize = (0..rank).filter(|d| axes.contains(d)).map(|d| a.shape[d]).product();
            if count == 0 {
                return dim_err("mean", "mean over an empty extent".into());
            }
            let out_len: usize = out_shape.iter().product();
            let mut index = vec![0usize; rank];
            let mut out_index = Vec::with_capacity(a.value.len());
            let mut value = vec![0.0; out_len];
            for &v in &a.value {
                let o = keep.iter().fold(0, |acc, &d| acc * a.shape[d] + index[d]);
                out_index.push(o);
                value[o] += v;
                for d in (0..rank).rev() {
                    index[d] += 1;
                    if index[d] < a.shape[d] {
                        break;
                    }
                    index[d] = 0;
                }
            }
            value.iter_mut().for_each(|v| *v /= count as f64);
            (out_shape, value, out_index, count)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Mean {
                a: self.id,
                out_index,
                count,
            },
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor<'g>> {
        let rank = self.shape().len();
        if rank == 0 {
            return self.reshape(&[]);
        }
        self.mean(&(0..rank).collect::<Vec<_>>())
    }

    /// Zero-padded cross-correlation. `self` is `(C_in, H, W)` or
    /// `(N, C_in, H, W)`; `weight` is `(C_out, C_in, kh, kw)`.
    pub fn conv2d(&self, weight: &Tensor<'g>, stride: usize, padding: usize) -> Result<Tensor<'g>> {
        self.graph.check_owner(weight)?;
        let (shape, value, geom, batch, cout) = {
            let nodes = self.graph.nodes.borrow();
            let (x, w) = (&nodes[self.id], &nodes[weight.id]);
            let (batch, cin, h, wd) = match x.shape.as_slice() {
                &[c, h, w] => (1, c, h, w),
                &[n, c, h, w] => (n, c, h, w),
                other => return dim_err("conv2d", format!("input must be 3-D or 4-D, got {other:?}")),
            };
            let &[cout, wcin, kh, kw] = w.shape.as_slice() else {
                return dim_err("conv2d", format!("weight must be 4-D, got {:?}", w.shape));
            };
            if wcin != cin {
                return dim_err("conv2d", format!("input has {cin} channels, weight expects {wcin}"));
            }
            if stride == 0 {
                return dim_err("conv2d", "stride must be positive".into());
            }
            if kh > h + 2 * padding || kw > wd + 2 * padding {
                return dim_err(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, wd + 2 * padding),
                );
            }
            let oh = (h + 2 * padding - kh) / stride + 1;
            let ow = (wd + 2 * padding - kw) / stride + 1;
            let geom = ConvGeom {
                cin,
                h,
                w: wd,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
            };
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let in_size = cin * h * wd;
            let mut value = vec![0.0; batch * cout * ncols];
            let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * ncols }];
            for n in 0..batch {
                let xn = &x.value[n * in_size..(n + 1) * in_size];
                let colsn: &[f64] = if geom.is_pointwise() {
                    xn
                } else {
                    kernels::im2col(xn, &geom, &mut cols);
                    &cols
                };
                let out = &mut value[n * cout * ncols..(n + 1) * cout * ncols];
                kernels::gemm(cout, rows, ncols, &w.value, false, colsn, false, out, 0.0);
            }
            let shape = if x.shape.len() == 3 {
                vec![cout, oh, ow]
            } else {
                vec![batch, cout, oh, ow]
            };
            (shape, value, geom, batch, cout)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                batch,
                cout,
            },
        ))
    }

    /// Spatial resize of a `(C, H, W)` map.
    pub fn interpolate(&self, out_h: usize, out_w: usize, mode: InterpMode) -> Result<Tensor<'g>> {
        if out_h == 0 || out_w == 0 {
            return dim_err("interpolate", format!("zero target extent {out_h}x{out_w}"));
        }
        let (value, channels, rows, cols, in_hw) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let &[channels, ih, iw] = a.shape.as_slice() else {
                return dim_err("interpolate", format!("expected (C, H, W), got {:?}", a.shape));
            };
            if ih == 0 || iw == 0 {
                return dim_err("interpolate", "empty input map".into());
            }
            let table = match mode {
                InterpMode::Nearest => kernels::nearest_table,
                InterpMode::Bilinear => kernels::bilinear_table,
            };
            let rows = table(ih, out_h);
            let cols = table(iw, out_w);
            let mut value = vec![0.0; channels * out_h * out_w];
            for c in 0..channels {
                let src = &a.value[c * ih * iw..(c + 1) * ih * iw];
                for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                        value[(c * out_h + oy) * out_w + ox] = src[y0 * iw + x0] * (1.0 - fy) * (1.0 - fx)
                            + src[y0 * iw + x1] * (1.0 - fy) * fx
                            + src[y1 * iw + x0] * fy * (1.0 - fx)
                            + src[y1 * iw + x1] * fy * fx;
                    }
                }
            }
            (value, channels, rows, cols, (ih, iw))
        };
        Ok(self.graph.push(
            vec![channels, out_h, out_w],
            value,
            Op::Interpolate {
                a: self.id,
                channels,
                rows,
                cols,
                in_hw,
            },
        ))
    }
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat<'g>(xs: &[Tensor<'g>], axis: usize) -> Result<Tensor<'g>> {
    let Some(first) = xs.first() else {
        return dim_err("concat", "no inputs".into());
    };
    let graph = first.graph;
    for t in xs {
        graph.check_owner(t)?;
    }
    let (shape, value) = {
        let nodes = graph.nodes.borrow();
        let base = &nodes[first.id].shape;
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} of {base:?}"));
        }
        let mut total = 0;
        for t in xs {
            let s = &nodes[t.id].shape;
            let compatible = s.len() == base.len() && s.iter().zip(base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return dim_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_blocks(&shape, axis);
        let mut value = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for t in xs {
                let node = &nodes[t.id];
                let extent = node.shape[axis];
                value.extend_from_slice(&node.value[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        (shape, value)
    };
    Ok(graph.push(
        shape,
        value,
        Op::Concat {
            inputs: xs.iter().map(|t| t.id).collect(),
            axis,
        },
    ))
}
