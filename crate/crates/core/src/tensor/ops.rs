use super::kernels::{self, ConvGeom};
use super::Tensor;

pub(super) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f32),
    AddScalar(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Powf(Tensor, f32),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Softplus(Tensor),
    LeakyRelu(Tensor, f32),
    SumTo(Tensor),
    BroadcastTo(Tensor),
    Reshape(Tensor),
    Transpose(Tensor),
    MatMul(Tensor, Tensor),
    Conv2d(Tensor, Tensor, ConvGeom),
    ConvInputGrad(Tensor, Tensor, ConvGeom),
    ConvWeightGrad(Tensor, Tensor, ConvGeom),
    AvgPool2(Tensor),
    Upsample2(Tensor),
    Translate(Tensor, Vec<(isize, isize)>),
    Gather(Tensor, std::rc::Rc<Vec<usize>>),
    ScatterAdd(Tensor, std::rc::Rc<Vec<usize>>),
}

impl Op {
    pub(super) fn inputs(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Conv2d(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Scale(a, _)
            | AddScalar(a)
            | Exp(a)
            | Log(a)
            | Powf(a, _)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | LeakyRelu(a, _)
            | SumTo(a)
            | BroadcastTo(a)
            | Reshape(a)
            | Transpose(a)
            | AvgPool2(a)
            | Upsample2(a)
            | Translate(a, _)
            | Gather(a, _)
            | ScatterAdd(a, _) => vec![a],
        }
    }

    /// Vector-Jacobian products for each input, skipping inputs whose
    /// `need` flag is false.
    pub(super) fn vjp(&self, out: &Tensor, g: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
        use Op::*;
        let want = |i: usize, f: &dyn Fn() -> Tensor| if need[i] { Some(f()) } else { None };
        match self {
            Add(a, b) => vec![want(0, &|| g.sum_to(a.shape())), want(1, &|| g.sum_to(b.shape()))],
            Sub(a, b) => vec![
                want(0, &|| g.sum_to(a.shape())),
                want(1, &|| g.scale(-1.0).sum_to(b.shape())),
            ],
            Mul(a, b) => vec![
                want(0, &|| g.mul(b).sum_to(a.shape())),
                want(1, &|| g.mul(a).sum_to(b.shape())),
            ],
            Div(a, b) => vec![
                want(0, &|| g.div(b).sum_to(a.shape())),
                want(1, &|| g.mul(out).div(b).scale(-1.0).sum_to(b.shape())),
            ],
            Scale(_, c) => vec![want(0, &|| g.scale(*c))],
            AddScalar(_) => vec![want(0, &|| g.clone())],
            Exp(_) => vec![want(0, &|| g.mul(out))],
            Log(a) => vec![want(0, &|| g.div(a))],
            Powf(a, p) => vec![want(0, &|| g.mul(&a.powf(p - 1.0).scale(*p)))],
            Tanh(_) => vec![want(0, &|| g.mul(&out.square().scale(-1.0).add_scalar(1.0)))],
            Sigmoid(_) => vec![want(0, &|| g.mul(&out.mul(&out.scale(-1.0).add_scalar(1.0))))],
            Softplus(a) => vec![want(0, &|| g.mul(&a.sigmoid()))],
            LeakyRelu(a, slope) => vec![want(0, &|| {
                let mask: Vec<f32> = a.data().iter().map(|&v| if v > 0.0 { 1.0 } else { *slope }).collect();
                g.mul(&Tensor::from_vec(mask, a.shape()))
            })],
            SumTo(a) => vec![want(0, &|| g.broadcast_to(a.shape()))],
            BroadcastTo(a) => vec![want(0, &|| g.sum_to(a.shape()))],
            Reshape(a) => vec![want(0, &|| g.reshape(a.shape()))],
            Transpose(_) => vec![want(0, &|| g.t())],
            MatMul(a, b) => vec![want(0, &|| g.matmul(&b.t())), want(1, &|| a.t().matmul(g))],
            Conv2d(x, w, geom) => vec![
                want(0, &|| conv_input_grad(g, w, geom, x.dim(0))),
                want(1, &|| conv_weight_grad(x, g, geom)),
            ],
            // y = A(g, w): adjoint of conv2d in x.
            ConvInputGrad(gin, w, geom) => vec![
                want(0, &|| g.conv2d_geom(w, geom)),
                want(1, &|| conv_weight_grad(g, gin, geom)),
            ],
            // y = B(x, gin): adjoint of conv2d in w.
            ConvWeightGrad(x, gin, geom) => vec![
                want(0, &|| conv_input_grad(gin, g, geom, x.dim(0))),
                want(1, &|| x.conv2d_geom(g, geom)),
            ],
            AvgPool2(_) => vec![want(0, &|| g.upsample2().scale(0.25))],
            Upsample2(_) => vec![want(0, &|| g.avg_pool2().scale(4.0))],
            Translate(_, shifts) => vec![want(0, &|| {
                let back: Vec<(isize, isize)> = shifts.iter().map(|&(y, x)| (-y, -x)).collect();
                g.translate(&back)
            })],
            Gather(a, idx) => vec![want(0, &|| g.scatter_add(idx.clone(), a.shape()))],
            ScatterAdd(a, idx) => vec![want(0, &|| g.gather(idx.clone(), Some(a.shape())))],
        }
    }
}

fn conv_input_grad(g: &Tensor, w: &Tensor, geom: &ConvGeom, batch: usize) -> Tensor {
    let data = kernels::conv2d_input_grad(g.data(), w.data(), batch, geom);
    let shape = vec![batch, geom.in_channels, geom.height, geom.width];
    Tensor::from_op(data, shape, Op::ConvInputGrad(g.clone(), w.clone(), *geom))
}

fn conv_weight_grad(x: &Tensor, g: &Tensor, geom: &ConvGeom) -> Tensor {
    let data = kernels::conv2d_weight_grad(x.data(), g.data(), x.dim(0), geom);
    let shape = vec![geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w];
    Tensor::from_op(data, shape, Op::ConvWeightGrad(x.clone(), g.clone(), *geom))
}

fn unary(x: &Tensor, f: impl Fn(f32) -> f32, op: Op) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), op)
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32, op: Op) -> Tensor {
    let shape = kernels::broadcast_shapes(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()));
    let data = kernels::zip_map(a.data(), a.shape(), b.data(), b.shape(), &shape, f);
    Tensor::from_op(data, shape, op)
}

fn spatial(x: &Tensor) -> (usize, usize, usize) {
    let r = x.shape().len();
    assert!(r >= 2, "spatial op needs at least 2 dims, got {:?}", x.shape());
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    (x.numel() / (h * w).max(1), h, w)
}

fn numerically_stable_softplus(v: f32) -> f32 {
    if v > 20.0 {
        v
    } else if v < -20.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

fn stable_sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a + b, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a - b, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a * b, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a / b, Op::Div(self.clone(), other.clone()))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        unary(self, |v| v * c, Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        unary(self, |v| v + c, Op::AddScalar(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f32::exp, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f32::ln, Op::Log(self.clone()))
    }

    pub fn powf(&self, p: f32) -> Tensor {
        unary(self, |v| v.powf(p), Op::Powf(self.clone(), p))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f32::tanh, Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, stable_sigmoid, Op::Sigmoid(self.clone()))
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, numerically_stable_softplus, Op::Softplus(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        unary(
            self,
            |v| if v > 0.0 { v } else { v * slope },
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    /// Sums over every axis where `target` has extent 1 (after left-padding
    /// `target` with ones), returning a tensor of shape `target`.
    pub fn sum_to(&self, target: &[usize]) -> Tensor {
        if self.shape() == target {
            return self.clone();
        }
        let rank = self.shape().len();
        assert!(target.len() <= rank, "cannot sum {:?} to {:?}", self.shape(), target);
        let padded = kernels::padded(target, rank);
        let data = kernels::sum_to(self.data(), self.shape(), &padded);
        Tensor::from_op(data, target.to_vec(), Op::SumTo(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let data = kernels::broadcast_to(self.data(), self.shape(), shape);
        Tensor::from_op(data, shape.to_vec(), Op::BroadcastTo(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f32)
    }

    /// Mean over the axes where `target` has extent 1.
    pub fn mean_to(&self, target: &[usize]) -> Tensor {
        let kept: usize = target.iter().product();
        self.sum_to(target).scale(kept as f32 / self.numel() as f32)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "cannot reshape {:?} to {:?}",
            self.shape(),
            shape
        );
        if self.shape() == shape {
            return self.clone();
        }
        Tensor::from_op(self.data().to_vec(), shape.to_vec(), Op::Reshape(self.clone()))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "t() needs a matrix");
        let (r, c) = (self.dim(0), self.dim(1));
        let data = kernels::transpose2(self.data(), r, c);
        Tensor::from_op(data, vec![c, r], Op::Transpose(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2 && self.dim(1) == other.dim(0),
            "matmul shape mismatch {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.dim(0), self.dim(1), other.dim(1));
        let data = kernels::matmul(self.data(), other.data(), m, k, n);
        Tensor::from_op(data, vec![m, n], Op::MatMul(self.clone(), other.clone()))
    }

    /// 2-D convolution of an `[N, C, H, W]` input with `[O, C, kh, kw]` weights.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (xs, ws) = (self.shape(), weight.shape());
        assert!(
            xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1],
            "conv2d shapes {xs:?} {ws:?}"
        );
        let geom = ConvGeom {
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        self.conv2d_geom(weight, &geom)
    }

    fn conv2d_geom(&self, weight: &Tensor, geom: &ConvGeom) -> Tensor {
        let data = kernels::conv2d(self.data(), weight.data(), self.dim(0), geom);
        let shape = vec![self.dim(0), geom.out_channels, geom.out_h(), geom.out_w()];
        Tensor::from_op(data, shape, Op::Conv2d(self.clone(), weight.clone(), *geom))
    }

    pub fn avg_pool2(&self) -> Tensor {
        let (planes, h, w) = spatial(self);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let data = kernels::avg_pool2(self.data(), planes, h, w);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] /= 2;
        shape[r - 1] /= 2;
        Tensor::from_op(data, shape, Op::AvgPool2(self.clone()))
    }

    pub fn upsample2(&self) -> Tensor {
        let (planes, h, w) = spatial(self);
        let data = kernels::upsample2(self.data(), planes, h, w);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        Tensor::from_op(data, shape, Op::Upsample2(self.clone()))
    }

    /// Shifts sample `n` of an `[N, C, H, W]` tensor by `shifts[n] = (dy, dx)`
    /// pixels, filling vacated pixels with zero.
    pub fn translate(&self, shifts: &[(isize, isize)]) -> Tensor {
        assert_eq!(self.shape().len(), 4);
        assert_eq!(shifts.len(), self.dim(0));
        let data = kernels::translate(self.data(), self.shape(), shifts);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Translate(self.clone(), shifts.to_vec()),
        )
    }

    pub fn max_pool2d(&self, kernel: usize, stride: usize, pad: usize) -> Tensor {
        let (planes, h, w) = spatial(self);
        let (_, idx, oh, ow) = kernels::max_pool(self.data(), planes, h, w, kernel, stride, pad);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.gather(std::rc::Rc::new(idx), Some(&shape))
    }

    /// `out[i] = self[idx[i]]` over flat indices.
    fn gather(&self, idx: std::rc::Rc<Vec<usize>>, shape: Option<&[usize]>) -> Tensor {
        let data: Vec<f32> = idx.iter().map(|&i| self.data()[i]).collect();
        let shape = shape.map(<[usize]>::to_vec).unwrap_or_else(|| vec![idx.len()]);
        Tensor::from_op(data, shape, Op::Gather(self.clone(), idx))
    }

    /// Adjoint of [`Tensor::gather`]: `out[idx[i]] += self[i]`.
    fn scatter_add(&self, idx: std::rc::Rc<Vec<usize>>, shape: &[usize]) -> Tensor {
        let mut data = vec![0.0; shape.iter().product()];
        for (v, &i) in self.data().iter().zip(idx.iter()) {
            data[i] += v;
        }
        Tensor::from_op(data, shape.to_vec(), Op::ScatterAdd(self.clone(), idx))
    }
}
