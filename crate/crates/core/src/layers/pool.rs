//! Non-overlapping max and average pooling over `[m, C, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{DsgError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2d {
    pub kind: PoolKind,
    /// Window size and stride.
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct PoolContext {
    in_shape: Vec<usize>,
    /// Flat input index of each output's maximum (max pooling only).
    argmax: Vec<usize>,
}

impl Pool2d {
    pub fn max(size: usize) -> Self {
        Self { kind: PoolKind::Max, size }
    }

    pub fn avg(size: usize) -> Self {
        Self { kind: PoolKind::Avg, size }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.size, w / self.size)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, PoolContext)> {
        let [m, c, h, w] = match *x.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(DsgError::dim("pool", x.shape(), &[0, 0, 0, 0])),
        };
        let k = self.size;
        if k == 0 || h < k || w < k {
            return Err(DsgError::param("pool_size", format!("{k} for {h}x{w} input")));
        }
        let (oh, ow) = self.output_hw(h, w);
        let src = x.data();
        let mut out = Vec::with_capacity(m * c * oh * ow);
        let mut argmax = Vec::new();
        for plane in 0..m * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    let mut sum = 0.0f32;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            sum += src[i];
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    match self.kind {
                        PoolKind::Max => {
                            out.push(src[best]);
                            argmax.push(best);
                        }
                        PoolKind::Avg => out.push(sum / (k * k) as f32),
                    }
                }
            }
        }
        Ok((
            Tensor::from_parts(vec![m, c, oh, ow], out),
            PoolContext {
                in_shape: x.shape().to_vec(),
                argmax,
            },
        ))
    }

    pub fn backward(&self, ctx: &PoolContext, g: &Tensor) -> Result<Tensor> {
        let (m, c, h, w) = match *ctx.in_shape {
            [a, b, c, d] => (a, b, c, d),
            _ => unreachable!("pool context holds a rank-4 shape"),
        };
        let k = self.size;
        let (oh, ow) = self.output_hw(h, w);
        if g.shape() != [m, c, oh, ow] {
            return Err(DsgError::dim("pool_backward", g.shape(), &[m, c, oh, ow]));
        }
        let mut out = vec![0.0f32; m * c * h * w];
        match self.kind {
            PoolKind::Max => {
                for (&i, &gv) in ctx.argmax.iter().zip(g.data()) {
                    out[i] += gv;
                }
            }
            PoolKind::Avg => {
                let share = 1.0 / (k * k) as f32;
                for plane in 0..m * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(plane * oh + oy) * ow + ox] * share;
                            for dy in 0..k {
                                for dx in 0..k {
                                    out[plane * h * w + (oy * k + dy) * w + ox * k + dx] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(ctx.in_shape.clone(), out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_forward_backward() {
        let x = Tensor::new([1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 7., 6.]).unwrap();
        let p = Pool2d::max(2);
        let (y, ctx) = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[5., 7.]);
        let g = p.backward(&ctx, &Tensor::new([1, 1, 1, 2], vec![1., 2.]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0., 1., 0., 0., 0., 0., 2., 0.]);
    }

    #[test]
    fn avg_pool_forward_backward() {
        let x = Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 6.]).unwrap();
        let p = Pool2d::avg(2);
        let (y, ctx) = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[3.]);
        let g = p.backward(&ctx, &Tensor::new([1, 1, 1, 1], vec![4.]).unwrap()).unwrap();
        assert_eq!(g.data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn odd_sizes_floor() {
        let p = Pool2d::max(2);
        let (y, _) = p.forward(&Tensor::zeros([2, 3, 5, 5])).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        assert!(p.forward(&Tensor::zeros([1, 1, 1, 1])).is_err());
    }
}
