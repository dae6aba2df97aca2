//! Per-sample forward and backward kernels for every layer kind.

use super::{LayerSpec, Real};

/// Layer-specific data kept between forward and backward.
pub(super) enum Aux<T> {
    None,
    /// im2col matrix of a convolution input.
    Cols(Vec<T>),
    /// Flat input index of each max-pool output.
    Argmax(Vec<usize>),
}

pub(super) fn output_shape(layer: &LayerSpec, ins: &[&Vec<usize>]) -> Result<Vec<usize>, String> {
    let single = || -> Result<&Vec<usize>, String> {
        if ins.len() != 1 {
            return Err(format!("expects exactly one input, got {}", ins.len()));
        }
        Ok(ins[0])
    };
    let spatial = |s: &Vec<usize>| -> Result<(usize, usize, usize), String> {
        if s.len() != 3 {
            return Err(format!("expects a [C, H, W] input, got {s:?}"));
        }
        Ok((s[0], s[1], s[2]))
    };
    match *layer {
        LayerSpec::Dense { out } | LayerSpec::Prototype { out, .. } => {
            single()?;
            if out == 0 {
                return Err("zero output width".into());
            }
            Ok(vec![out])
        }
        LayerSpec::Conv2d {
            out,
            kernel,
            stride,
            dilation,
            padding,
        } => {
            let (_, h, w) = spatial(single()?)?;
            if out == 0 || kernel == 0 || stride == 0 || dilation == 0 {
                return Err("conv parameters must be positive".into());
            }
            let field = super::receptive_field(kernel, dilation);
            if h + 2 * padding < field || w + 2 * padding < field {
                return Err(format!("input {h}x{w} smaller than receptive field {field}"));
            }
            Ok(vec![
                out,
                (h + 2 * padding - field) / stride + 1,
                (w + 2 * padding - field) / stride + 1,
            ])
        }
        LayerSpec::Relu | LayerSpec::ExpHead { .. } => Ok(single()?.clone()),
        LayerSpec::SoftmaxHead => {
            let s = single()?;
            if s.len() != 1 && s.len() != 3 {
                return Err(format!("softmax expects [C] or [C, H, W], got {s:?}"));
            }
            Ok(s.clone())
        }
        LayerSpec::MaxPool2d { size, stride } | LayerSpec::AvgPool2d { size, stride } => {
            let (c, h, w) = spatial(single()?)?;
            if size == 0 || stride == 0 || size > h || size > w {
                return Err(format!("pool window {size} does not fit {h}x{w}"));
            }
            Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
        }
        LayerSpec::GlobalAvgPool => {
            let (c, _, _) = spatial(single()?)?;
            Ok(vec![c])
        }
        LayerSpec::Upsample { factor } => {
            let (c, h, w) = spatial(single()?)?;
            if factor == 0 {
                return Err("upsample factor must be positive".into());
            }
            Ok(vec![c, h * factor, w * factor])
        }
        LayerSpec::Concat => {
            if ins.len() < 2 {
                return Err("concat needs at least two inputs".into());
            }
            let first = ins[0];
            let mut channels = 0;
            for s in ins {
                if s.len() != first.len() || s[1..] != first[1..] {
                    return Err(format!("concat inputs disagree: {first:?} vs {s:?}"));
                }
                channels += s[0];
            }
            let mut out = first.clone();
            out[0] = channels;
            Ok(out)
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dil: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(layer: &LayerSpec, in_shape: &[usize], out_shape: &[usize]) -> ConvGeom {
    let LayerSpec::Conv2d {
        kernel,
        stride,
        dilation,
        padding,
        ..
    } = *layer
    else {
        unreachable!()
    };
    ConvGeom {
        c: in_shape[0],
        h: in_shape[1],
        w: in_shape[2],
        k: kernel,
        stride,
        dil: dilation,
        pad: padding,
        ho: out_shape[1],
        wo: out_shape[2],
    }
}

/// Source indices and weights of half-pixel-aligned bilinear upsampling
/// along one axis.
fn upsample_taps(len_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len_in * factor)
        .map(|o| {
            let x = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len_in - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

pub(super) fn forward<T: Real>(
    layer: &LayerSpec,
    ins: &[&[T]],
    in_shapes: &[&[usize]],
    out_shape: &[usize],
    w: Option<&[T]>,
    b: Option<&[T]>,
) -> (Vec<T>, Aux<T>) {
    let n_out: usize = out_shape.iter().product();
    let x = ins[0];
    match *layer {
        LayerSpec::Dense { out } => {
            let (w, b) = (w.unwrap(), b.unwrap());
            let mut y = b.to_vec();
            T::gemm(out, x.len(), 1, w, false, x, false, &mut y, true);
            (y, Aux::None)
        }
        LayerSpec::Prototype { out, offset } => {
            let bias = T::from_real(offset + (out as f64).ln());
            let y = w
                .unwrap()
                .chunks(x.len())
                .map(|c| bias - x.iter().zip(c).map(|(&xi, &ci)| (xi - ci) * (xi - ci)).sum::<T>())
                .collect();
            (y, Aux::None)
        }
        LayerSpec::Conv2d { out, .. } => {
            let (w, b) = (w.unwrap(), b.unwrap());
            let g = conv_geom(layer, in_shapes[0], out_shape);
            let hw = g.ho * g.wo;
            let mut y = vec![T::zero(); n_out];
            for (o, row) in y.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
            let kk = g.c * g.k * g.k;
            if g.is_pointwise() {
                T::gemm(out, kk, hw, w, false, x, false, &mut y, true);
                (y, Aux::None)
            } else {
                let mut cols = vec![T::zero(); kk * hw];
                im2col(x, &g, &mut cols);
                T::gemm(out, kk, hw, w, false, &cols, false, &mut y, true);
                (y, Aux::Cols(cols))
            }
        }
        LayerSpec::Relu => (x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(), Aux::None),
        LayerSpec::ExpHead { clamp } => {
            let c = T::from_real(clamp);
            (x.iter().map(|&v| v.max(-c).min(c).exp()).collect(), Aux::None)
        }
        LayerSpec::SoftmaxHead => {
            let s = in_shapes[0];
            let channels = s[0];
            let plane: usize = s[1..].iter().product();
            let mut y = vec![T::zero(); x.len()];
            for p in 0..plane {
                let mut max = T::neg_infinity();
                for ch in 0..channels {
                    max = max.max(x[ch * plane + p]);
                }
                let mut sum = T::zero();
                for ch in 0..channels {
                    let e = (x[ch * plane + p] - max).exp();
                    y[ch * plane + p] = e;
                    sum += e;
                }
                for ch in 0..channels {
                    y[ch * plane + p] = y[ch * plane + p] / sum;
                }
            }
            (y, Aux::None)
        }
        LayerSpec::MaxPool2d { size, stride } => {
            let (c, h, wd) = (in_shapes[0][0], in_shapes[0][1], in_shapes[0][2]);
            let (ho, wo) = (out_shape[1], out_shape[2]);
            let mut y = Vec::with_capacity(n_out);
            let mut arg = Vec::with_capacity(n_out);
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = ci * h * wd + oy * stride * wd + ox * stride;
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = ci * h * wd + (oy * stride + dy) * wd + ox * stride + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        y.push(x[best]);
                        arg.push(best);
                    }
                }
            }
            (y, Aux::Argmax(arg))
        }
        LayerSpec::AvgPool2d { size, stride } => {
            let (c, h, wd) = (in_shapes[0][0], in_shapes[0][1], in_shapes[0][2]);
            let (ho, wo) = (out_shape[1], out_shape[2]);
            let scale = T::from_real(1.0 / (size * size) as f64);
            let mut y = Vec::with_capacity(n_out);
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for dy in 0..size {
                            let base = ci * h * wd + (oy * stride + dy) * wd + ox * stride;
                            for dx in 0..size {
                                acc += x[base + dx];
                            }
                        }
                        y.push(acc * scale);
                    }
                }
            }
            (y, Aux::None)
        }
        LayerSpec::GlobalAvgPool => {
            let c = in_shapes[0][0];
            let plane = x.len() / c;
            let scale = T::from_real(1.0 / plane as f64);
            (
                x.chunks(plane).map(|p| p.iter().copied().sum::<T>() * scale).collect(),
                Aux::None,
            )
        }
        LayerSpec::Upsample { factor } => {
            let (c, h, wd) = (in_shapes[0][0], in_shapes[0][1], in_shapes[0][2]);
            let ty = upsample_taps(h, factor);
            let tx = upsample_taps(wd, factor);
            let (ho, wo) = (h * factor, wd * factor);
            let mut y = Vec::with_capacity(n_out);
            for ci in 0..c {
                let plane = &x[ci * h * wd..(ci + 1) * h * wd];
                for &(y0, y1, fy) in &ty {
                    let fy = T::from_real(fy);
                    for &(x0, x1, fx) in &tx {
                        let fx = T::from_real(fx);
                        let top = plane[y0 * wd + x0] * (T::one() - fx) + plane[y0 * wd + x1] * fx;
                        let bot = plane[y1 * wd + x0] * (T::one() - fx) + plane[y1 * wd + x1] * fx;
                        y.push(top * (T::one() - fy) + bot * fy);
                    }
                }
            }
            debug_assert_eq!(y.len(), c * ho * wo);
            (y, Aux::None)
        }
        LayerSpec::Concat => {
            let mut y = Vec::with_capacity(n_out);
            for part in ins {
                y.extend_from_slice(part);
            }
            (y, Aux::None)
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    layer: &LayerSpec,
    ins: &[&[T]],
    in_shapes: &[&[usize]],
    out: &[T],
    out_shape: &[usize],
    aux: &Aux<T>,
    dout: &[T],
    w: Option<&[T]>,
    dparams: Option<(&mut Vec<T>, &mut Vec<T>)>,
    dins: &mut [Vec<T>],
) {
    let x = ins[0];
    match *layer {
        LayerSpec::Dense { out: n_out } => {
            let (dw, db) = dparams.unwrap();
            let n_in = x.len();
            db.iter_mut().zip(dout).for_each(|(a, g)| *a += *g);
            // dW += g ⊗ x
            T::gemm(n_out, 1, n_in, dout, false, x, false, dw, true);
            T::gemm(n_in, n_out, 1, w.unwrap(), true, dout, false, &mut dins[0], false);
        }
        LayerSpec::Prototype { .. } => {
            let (dw, _) = dparams.unwrap();
            let n_in = x.len();
            let dx = &mut dins[0];
            for (j, (c, &g)) in w.unwrap().chunks(n_in).zip(dout).enumerate() {
                let g2 = g + g;
                for (i, (&xi, &ci)) in x.iter().zip(c).enumerate() {
                    let d = g2 * (xi - ci);
                    dw[j * n_in + i] += d;
                    dx[i] -= d;
                }
            }
        }
        LayerSpec::Conv2d { out: n_out, .. } => {
            let (dw, db) = dparams.unwrap();
            let g = conv_geom(layer, in_shapes[0], out_shape);
            let hw = g.ho * g.wo;
            let kk = g.c * g.k * g.k;
            for (o, row) in dout.chunks(hw).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
            let w = w.unwrap();
            match aux {
                Aux::Cols(cols) => {
                    T::gemm(n_out, hw, kk, dout, false, cols, true, dw, true);
                    let mut dcols = vec![T::zero(); kk * hw];
                    T::gemm(kk, n_out, hw, w, true, dout, false, &mut dcols, false);
                    col2im(&dcols, &g, &mut dins[0]);
                }
                _ => {
                    T::gemm(n_out, hw, kk, dout, false, x, true, dw, true);
                    T::gemm(kk, n_out, hw, w, true, dout, false, &mut dins[0], false);
                }
            }
        }
        LayerSpec::Relu => {
            for ((d, &v), &g) in dins[0].iter_mut().zip(x).zip(dout) {
                *d = if v > T::zero() { g } else { T::zero() };
            }
        }
        LayerSpec::ExpHead { clamp } => {
            let c = T::from_real(clamp);
            for (((d, &v), &y), &g) in dins[0].iter_mut().zip(x).zip(out).zip(dout) {
                *d = if v > -c && v < c { g * y } else { T::zero() };
            }
        }
        LayerSpec::SoftmaxHead => {
            let s = in_shapes[0];
            let channels = s[0];
            let plane: usize = s[1..].iter().product();
            for p in 0..plane {
                let mut dot = T::zero();
                for ch in 0..channels {
                    dot += dout[ch * plane + p] * out[ch * plane + p];
                }
                for ch in 0..channels {
                    let i = ch * plane + p;
                    dins[0][i] = out[i] * (dout[i] - dot);
                }
            }
        }
        LayerSpec::MaxPool2d { .. } => {
            let Aux::Argmax(arg) = aux else { unreachable!() };
            for (&i, &g) in arg.iter().zip(dout) {
                dins[0][i] += g;
            }
        }
        LayerSpec::AvgPool2d { size, stride } => {
            let (c, h, wd) = (in_shapes[0][0], in_shapes[0][1], in_shapes[0][2]);
            let (ho, wo) = (out_shape[1], out_shape[2]);
            let scale = T::from_real(1.0 / (size * size) as f64);
            let mut it = dout.iter();
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = *it.next().unwrap() * scale;
                        for dy in 0..size {
                            let base = ci * h * wd + (oy * stride + dy) * wd + ox * stride;
                            for dx in 0..size {
                                dins[0][base + dx] += g;
                            }
                        }
                    }
                }
            }
        }
        LayerSpec::GlobalAvgPool => {
            let c = in_shapes[0][0];
            let plane = x.len() / c;
            let scale = T::from_real(1.0 / plane as f64);
            for (ci, chunk) in dins[0].chunks_mut(plane).enumerate() {
                let g = dout[ci] * scale;
                chunk.iter_mut().for_each(|d| *d = g);
            }
        }
        LayerSpec::Upsample { factor } => {
            let (c, h, wd) = (in_shapes[0][0], in_shapes[0][1], in_shapes[0][2]);
            let ty = upsample_taps(h, factor);
            let tx = upsample_taps(wd, factor);
            let mut it = dout.iter();
            for ci in 0..c {
                let plane = &mut dins[0][ci * h * wd..(ci + 1) * h * wd];
                for &(y0, y1, fy) in &ty {
                    let fy = T::from_real(fy);
                    for &(x0, x1, fx) in &tx {
                        let fx = T::from_real(fx);
                        let g = *it.next().unwrap();
                        let gt = g * (T::one() - fy);
                        let gb = g * fy;
                        plane[y0 * wd + x0] += gt * (T::one() - fx);
                        plane[y0 * wd + x1] += gt * fx;
                        plane[y1 * wd + x0] += gb * (T::one() - fx);
                        plane[y1 * wd + x1] += gb * fx;
                    }
                }
            }
        }
        LayerSpec::Concat => {
            let mut offset = 0;
            for d in dins.iter_mut() {
                let n = d.len();
                d.copy_from_slice(&dout[offset..offset + n]);
                offset += n;
            }
        }
    }
}
