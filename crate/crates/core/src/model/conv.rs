//! Fused stride-1 "same" convolution for the CPU backend.
//!
//! Each image is unfolded into a `[C_in*k*k, H*W]` patch buffer and multiplied
//! by the `[C_out, C_in*k*k]` kernel. The backward pass recomputes patches per
//! image instead of keeping a full-batch im2col tensor alive, which keeps
//! memory traffic close to the gemm cost.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor, WithDType};
use candle_nn::{Init, VarBuilder};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv ops require contiguous input"),
    }
}

/// Writes the zero-padded patches of one `[C, H, W]` image into `out`.
fn im2col<T: Copy + Default>(img: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    out.fill(T::default());
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k * k + ky * k + kx) * hw;
                let dst = &mut out[row..row + hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                let x0 = (-ox).max(0) as usize;
                let x1 = ((w as isize) - ox).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w + (x0 as isize + ox) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&plane[s..s + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients onto one image.
fn col2im<T: Copy + std::ops::AddAssign>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k * k + ky * k + kx) * hw;
                let src = &cols[row..row + hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                let x0 = (-ox).max(0) as usize;
                let x1 = ((w as isize) - ox).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    for x in x0..x1 {
                        plane[s + (x as isize + ox) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    b: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Dims {
    fn patch_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn conv_forward<T: LinalgScalar + Default>(x: &[T], weight: &[T], bias: &[T], d: Dims) -> Vec<T> {
    let hw = d.h * d.w;
    let kk = d.patch_rows();
    let kernel = ArrayView2::from_shape((d.c_out, kk), weight).expect("kernel shape");
    let mut out = vec![T::zero(); d.b * d.c_out * hw];
    let mut cols = vec![T::zero(); kk * hw];
    for b in 0..d.b {
        let img = &x[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        let dst = &mut out[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias[o]);
        }
        let mut dst = ArrayViewMut2::from_shape((d.c_out, hw), dst).expect("output shape");
        let patches = if d.k == 1 {
            ArrayView2::from_shape((kk, hw), img).expect("patch shape")
        } else {
            im2col(img, d.c_in, d.h, d.w, d.k, &mut cols);
            ArrayView2::from_shape((kk, hw), &cols[..]).expect("patch shape")
        };
        general_mat_mul(T::one(), &kernel, &patches, T::one(), &mut dst);
    }
    out
}

struct ConvGrads<T> {
    input: Vec<T>,
    weight: Vec<T>,
    bias: Vec<T>,
}

fn conv_backward<T: LinalgScalar + Default + std::ops::AddAssign>(
    x: &[T],
    weight: &[T],
    grad: &[T],
    d: Dims,
) -> ConvGrads<T> {
    let hw = d.h * d.w;
    let kk = d.patch_rows();
    let kernel = ArrayView2::from_shape((d.c_out, kk), weight).expect("kernel shape");
    let mut g_input = vec![T::zero(); x.len()];
    let mut g_weight = vec![T::zero(); weight.len()];
    let mut g_bias = vec![T::zero(); d.c_out];
    let mut cols = vec![T::zero(); kk * hw];
    let mut g_cols = vec![T::zero(); kk * hw];
    for b in 0..d.b {
        let img = &x[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        let g_out = &grad[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        for (o, row) in g_out.chunks(hw).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            g_bias[o] += s;
        }
        let g_out = ArrayView2::from_shape((d.c_out, hw), g_out).expect("grad shape");
        let patches = if d.k == 1 {
            ArrayView2::from_shape((kk, hw), img).expect("patch shape")
        } else {
            im2col(img, d.c_in, d.h, d.w, d.k, &mut cols);
            ArrayView2::from_shape((kk, hw), &cols[..]).expect("patch shape")
        };
        let mut gw = ArrayViewMut2::from_shape((d.c_out, kk), &mut g_weight[..]).expect("kernel shape");
        general_mat_mul(T::one(), &g_out, &patches.t(), T::one(), &mut gw);

        let g_img = &mut g_input[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        if d.k == 1 {
            let mut gi = ArrayViewMut2::from_shape((kk, hw), g_img).expect("input shape");
            general_mat_mul(T::one(), &kernel.t(), &g_out, T::zero(), &mut gi);
        } else {
            let mut gc = ArrayViewMut2::from_shape((kk, hw), &mut g_cols[..]).expect("patch shape");
            general_mat_mul(T::one(), &kernel.t(), &g_out, T::zero(), &mut gc);
            col2im(&g_cols, d.c_in, d.h, d.w, d.k, g_img);
        }
    }
    ConvGrads {
        input: g_input,
        weight: g_weight,
        bias: g_bias,
    }
}

struct FusedConv;

fn dims_of(input: &Layout, weight: &Layout) -> candle_core::Result<Dims> {
    let (b, c_in, h, w) = input.shape().dims4()?;
    let (c_out, c_w, k, k2) = weight.shape().dims4()?;
    if c_w != c_in || k != k2 || k % 2 == 0 {
        candle_core::bail!(
            "conv: kernel {:?} incompatible with input {:?}",
            weight.shape(),
            input.shape()
        );
    }
    Ok(Dims { b, c_in, c_out, h, w, k })
}

impl CustomOp3 for FusedConv {
    fn name(&self) -> &'static str {
        "fused-conv2d-same"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims_of(l1, l2)?;
        let shape = Shape::from((d.b, d.c_out, d.h, d.w));
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(wt), CpuStorage::F32(bs)) => CpuStorage::F32(conv_forward(
                contiguous(x, l1)?,
                contiguous(wt, l2)?,
                contiguous(bs, l3)?,
                d,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(wt), CpuStorage::F64(bs)) => CpuStorage::F64(conv_forward(
                contiguous(x, l1)?,
                contiguous(wt, l2)?,
                contiguous(bs, l3)?,
                d,
            )),
            _ => candle_core::bail!("conv: unsupported dtype {:?}", s1.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: WithDType + LinalgScalar + Default + std::ops::AddAssign>(
            input: &Tensor,
            weight: &Tensor,
            bias: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
            let (b, c_in, h, w) = input.dims4()?;
            let (c_out, _, k, _) = weight.dims4()?;
            let d = Dims { b, c_in, c_out, h, w, k };
            let x = input.flatten_all()?.to_vec1::<T>()?;
            let wt = weight.flatten_all()?.to_vec1::<T>()?;
            let g = grad.flatten_all()?.to_vec1::<T>()?;
            let grads = conv_backward(&x, &wt, &g, d);
            let dev = input.device();
            Ok((
                Some(Tensor::from_vec(grads.input, input.shape(), dev)?),
                Some(Tensor::from_vec(grads.weight, weight.shape(), dev)?),
                Some(Tensor::from_vec(grads.bias, bias.shape(), dev)?),
            ))
        }
        match input.dtype() {
            candle_core::DType::F32 => run::<f32>(input, weight, bias, grad_res),
            candle_core::DType::F64 => run::<f64>(input, weight, bias, grad_res),
            dt => candle_core::bail!("conv backward: unsupported dtype {dt:?}"),
        }
    }
}

/// `max(x, 0) + slope * min(x, 0)` with a direct backward.
struct LeakyRelu(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                let s = self.0 as f32;
                CpuStorage::F32(contiguous(v, layout)?.iter().map(|&x| if x > 0.0 { x } else { s * x }).collect())
            }
            CpuStorage::F64(v) => {
                let s = self.0;
                CpuStorage::F64(contiguous(v, layout)?.iter().map(|&x| if x > 0.0 { x } else { s * x }).collect())
            }
            other => candle_core::bail!("leaky-relu: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // slope where x <= 0, 1 elsewhere
        let scale = arg.gt(0.0)?.to_dtype(arg.dtype())?.affine(1.0 - self.0, self.0)?;
        Ok(Some((grad_res * scale)?))
    }
}

pub(crate) fn leaky_relu(xs: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(LeakyRelu(slope))
}

/// Stride-1 "same" convolution with an odd square kernel and a bias.
pub fn conv2d_same(xs: &Tensor, weight: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, FusedConv)
}

#[derive(Debug)]
pub(crate) struct Conv2d {
    weight: Tensor,
    bias: Tensor,
}

impl Conv2d {
    pub(crate) fn new(c_in: usize, c_out: usize, kernel: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let weight = vb.get_with_hints((c_out, c_in, kernel, kernel), "weight", Init::Const(0.0))?;
        let bias = vb.get_with_hints(c_out, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    pub(crate) fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        conv2d_same(xs, &self.weight, &self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn compare(k: usize) {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 5, 6), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 4, &dev).unwrap()).unwrap();
        let ours = conv2d_same(&x, &w, &b).unwrap();
        let reference = x
            .conv2d(&w, k / 2, 1, 1, 1)
            .unwrap()
            .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let max_diff = |a: &Tensor, b: &Tensor| {
            (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
        };
        assert!(max_diff(&ours, &reference) < 1e-12);

        let probe = Tensor::randn(0f64, 1.0, ours.shape(), &dev).unwrap();
        let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (&reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn matches_candle_conv_3x3() {
        compare(3);
    }

    #[test]
    fn matches_candle_conv_1x1() {
        compare(1);
    }

    #[test]
    fn leaky_relu_matches_definition() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::new(&[-2.0f64, -0.5, 0.5, 3.0], &dev).unwrap()).unwrap();
        let y = leaky_relu(&x, 0.1).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![-0.2, -0.05, 0.5, 3.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec1::<f64>().unwrap(), vec![0.1, 0.1, 1.0, 1.0]);
    }
}
