use super::kernels::{self, conv2d_transpose_with, conv2d_with, conv_kernel_grad, ConvGeometry};
use super::{Real, Var};
use crate::error::Result;

impl<'t, T: Real> Var<'t, T> {
    /// Strided "same" convolution of `[B, W, H, Cin]` with `[KW, KH, Cin, Cout]`.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        let (xv, kv) = (self.value(), kernel.value());
        let out = kernels::conv2d(&xv, &kv, stride)?;
        let [b, w, h, ci] = xv.shape().try_into().unwrap();
        let [kw, kh, _, co] = kv.shape().try_into().unwrap();
        let geom = ConvGeometry::new(b, w, h, kw, kh, stride);
        Ok(self.tape().push(
            out,
            &[self.id(), kernel.id()],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| conv2d_transpose_with(g.data(), kv.data(), &geom, ci, co));
                let gk = needs[1].then(|| conv_kernel_grad(xv.data(), g.data(), &geom, ci, co));
                vec![gx, gk]
            }),
        ))
    }

    /// Transposed strided convolution of `[B, Wy, Hy, Cy]` with
    /// `[KW, KH, Cout, Cy]`, producing `[B, out_w, out_h, Cout]`.
    pub fn conv2d_transpose(self, kernel: Var<'t, T>, stride: usize, out_w: usize, out_h: usize) -> Result<Var<'t, T>> {
        let (yv, kv) = (self.value(), kernel.value());
        let out = kernels::conv2d_transpose(&yv, &kv, stride, out_w, out_h)?;
        let [b, _, _, cy] = yv.shape().try_into().unwrap();
        let [kw, kh, co, _] = kv.shape().try_into().unwrap();
        let geom = ConvGeometry::new(b, out_w, out_h, kw, kh, stride);
        Ok(self.tape().push(
            out,
            &[self.id(), kernel.id()],
            Box::new(move |g, needs| {
                let gy = needs[0].then(|| conv2d_with(g.data(), kv.data(), &geom, co, cy));
                let gk = needs[1].then(|| conv_kernel_grad(g.data(), yv.data(), &geom, co, cy));
                vec![gy, gk]
            }),
        ))
    }
}
