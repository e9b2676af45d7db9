//! 2x nearest upsampling and 2x2 max pooling with direct backward passes.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("resample ops require contiguous input"),
    }
}

fn host(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

fn upsample<T: Copy + Default>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::default(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let srow = &src[p * h * w + (y / 2) * w..p * h * w + (y / 2) * w + w];
            let drow = &mut out[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

fn sum_pool(src: &[f64], planes: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out[p * h * w + (y / 2) * w + x / 2] += src[p * oh * ow + y * ow + x];
            }
        }
    }
    out
}

fn max_pool<T: Copy + PartialOrd>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i = base + 2 * y * w + 2 * x;
                let mut m = src[i];
                for j in [i + 1, i + w, i + w + 1] {
                    if src[j] > m {
                        m = src[j];
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

struct Upsample2x;
struct MaxPool2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let shape = Shape::from((b, c, 2 * h, 2 * w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(upsample(contiguous(v, layout)?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample(contiguous(v, layout)?, b * c, h, w)),
            other => candle_core::bail!("upsample: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let g = sum_pool(&host(grad_res)?, b * c, 2 * h, 2 * w);
        Ok(Some(Tensor::from_vec(g, (b, c, h, w), arg.device())?.to_dtype(arg.dtype())?))
    }
}

impl CustomOp1 for MaxPool2x {
    fn name(&self) -> &'static str {
        "max-pool-2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("max-pool-2x needs even spatial dims, got {h}x{w}");
        }
        let shape = Shape::from((b, c, h / 2, w / 2));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(max_pool(contiguous(v, layout)?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(max_pool(contiguous(v, layout)?, b * c, h, w)),
            other => candle_core::bail!("max-pool: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    /// Routes each window's gradient to the first position holding the max.
    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let x = host(arg)?;
        let g = host(grad_res)?;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; x.len()];
        for p in 0..b * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i = base + 2 * y * w + 2 * xx;
                    let mut best = i;
                    for j in [i + 1, i + w, i + w + 1] {
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    out[best] += g[p * oh * ow + y * ow + xx];
                }
            }
        }
        Ok(Some(Tensor::from_vec(out, (b, c, h, w), arg.device())?.to_dtype(arg.dtype())?))
    }
}

pub fn upsample2x(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(Upsample2x)
}

pub fn max_pool2x(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(MaxPool2x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn check_against_candle(ours: fn(&Tensor) -> candle_core::Result<Tensor>, theirs: fn(&Tensor) -> candle_core::Result<Tensor>) {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 6), &dev).unwrap()).unwrap();
        let a = ours(&x).unwrap();
        let b = theirs(&x).unwrap();
        let diff = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
        let w = Tensor::randn(0f64, 1.0, a.shape(), &dev).unwrap();
        let ga = (&a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (&b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let d = (ga.get(&x).unwrap() - gb.get(&x).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn upsample_matches_candle() {
        check_against_candle(upsample2x, |x| {
            let (_, _, h, w) = x.dims4()?;
            x.upsample_nearest2d(2 * h, 2 * w)
        });
    }

    #[test]
    fn max_pool_forward_matches_candle() {
        let x = Tensor::randn(0f64, 1.0, (2, 3, 4, 6), &Device::Cpu).unwrap();
        let a = max_pool2x(&x).unwrap();
        let b = x.max_pool2d(2).unwrap();
        let diff = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    // candle's own max-pool backward scales by the window's max-mask mean, so
    // the gradient is checked against central differences instead.
    #[test]
    fn max_pool_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let data: Vec<f64> = (0..48).map(|i| ((i * 37) % 48) as f64 * 0.1 - 2.0).collect();
        let x = Var::from_tensor(&Tensor::from_vec(data.clone(), (1, 2, 4, 6), &dev).unwrap()).unwrap();
        let w = Tensor::from_vec((0..12).map(|i| i as f64 - 5.5).collect::<Vec<_>>(), (1, 2, 2, 3), &dev).unwrap();
        let f = |v: &[f64]| -> f64 {
            let t = Tensor::from_vec(v.to_vec(), (1, 2, 4, 6), &dev).unwrap();
            (max_pool2x(&t).unwrap() * &w).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let g = (max_pool2x(&x).unwrap() * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = g.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..data.len() {
            let mut up = data.clone();
            let mut down = data.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "index {i}: {fd} vs {}", g[i]);
        }
    }
}
