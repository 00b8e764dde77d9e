//! Small encoder/decoder segmentation network with a hand-written backward
//! pass, split into a feature extractor (everything up to the pixel
//! embeddings) and a 1x1 classifier on top of them.
//!
//! Topology for `stride = s` and `channels = [c0, .., cL-1]` with
//! `L = log2(s) + 1`:
//!
//! ```text
//! image -> enc0 (3x3/2, relu) -> ... -> encL-1 (3x3/2, relu)   [stride 2s]
//!       -> ctx (3x3/1, relu) -> nearest x2 up
//!       -> concat with encL-2 output                           [stride s]
//!       -> fuse (1x1, relu, cL-2 ch) -> proj (1x1, d ch) = features
//!       -> cls (1x1, |C| ch) = logits
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub feature_dim: usize,
    pub stride: usize,
    /// Encoder widths; length must be `log2(stride) + 1`.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            feature_dim: 64,
            stride: 4,
            channels: vec![16, 32, 48],
            num_classes: 4,
            init_seed: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(Error::config("backbone.feature_dim", "must be >= 8"));
        }
        if ![2, 4, 8].contains(&self.stride) {
            return Err(Error::config("backbone.stride", "must be one of 2, 4, 8"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("backbone.num_classes", "must be >= 2"));
        }
        let want = self.stride.trailing_zeros() as usize + 1;
        if self.channels.len() != want {
            return Err(Error::config(
                "backbone.channels",
                format!("stride {} needs {want} encoder widths", self.stride),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("backbone.channels", "widths must be positive"));
        }
        Ok(())
    }

    /// Input dimensions must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.stride * 2
    }

    fn fuse_width(&self) -> usize {
        self.channels[self.channels.len() - 2]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Names, shapes and offsets of every tensor in a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub config: BackboneConfig,
    pub params: Vec<ParamSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            params.push(ParamSpec {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        };
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            push(format!("enc{i}.weight"), vec![c, cin, 3, 3]);
            push(format!("enc{i}.bias"), vec![c]);
            cin = c;
        }
        let deep = *config.channels.last().unwrap();
        push("ctx.weight".into(), vec![deep, deep, 3, 3]);
        push("ctx.bias".into(), vec![deep]);
        let skip = config.fuse_width();
        let f = config.fuse_width();
        push("fuse.weight".into(), vec![f, deep + skip, 1, 1]);
        push("fuse.bias".into(), vec![f]);
        push("proj.weight".into(), vec![config.feature_dim, f, 1, 1]);
        push("proj.bias".into(), vec![config.feature_dim]);
        push("cls.weight".into(), vec![config.num_classes, config.feature_dim]);
        push("cls.bias".into(), vec![config.num_classes]);
        Ok(Layout {
            config: config.clone(),
            params,
            total: offset,
        })
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    fn span(&self, name: &str) -> std::ops::Range<usize> {
        let p = self.find(name).expect("layout entry");
        p.offset..p.offset + p.len
    }
}

/// Flat parameter vector plus its shared layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub layout: Arc<Layout>,
    pub data: Vec<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn config(&self) -> &BackboneConfig {
        &self.layout.config
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout
            .find(name)
            .map(|p| &self.data[p.offset..p.offset + p.len])
    }

    fn slice(&self, name: &str) -> &[F] {
        &self.data[self.layout.span(name)]
    }

    pub fn zeros_like(&self) -> Vec<F> {
        vec![F::zero(); self.data.len()]
    }

    pub fn same_layout(&self, other: &ModelParams<F>) -> bool {
        self.layout.params == other.layout.params
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64_lossy()).unwrap_or(G::nan()))
                .collect(),
        }
    }
}

/// Deterministic He-style initialization from `config.init_seed`.
pub fn init_model<F: Real>(config: &BackboneConfig) -> Result<ModelParams<F>> {
    let layout = Layout::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut data = vec![F::zero(); layout.total];
    for p in &layout.params {
        if p.name.ends_with(".bias") {
            continue;
        }
        let fan_in: usize = p.shape[1..].iter().product();
        let gain = if p.name.starts_with("proj") || p.name.starts_with("cls") {
            1.0
        } else {
            2.0
        };
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in &mut data[p.offset..p.offset + p.len] {
            *v = F::lit(normal.sample(&mut rng));
        }
    }
    Ok(ModelParams {
        layout: Arc::new(layout),
        data,
    })
}

/// NCHW image batch, inputs rescaled from [0,1] to [-1,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<F> {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Real> ImageBatch<F> {
    pub fn from_samples<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut n = 0;
        let mut dims = None;
        let mut data = Vec::new();
        for s in samples {
            match dims {
                None => dims = Some((s.height, s.width)),
                Some(d) if d != (s.height, s.width) => {
                    return Err(Error::shape("batch images differ in size"))
                }
                _ => {}
            }
            let hw = s.height * s.width;
            let base = data.len();
            data.resize(base + 3 * hw, F::zero());
            for p in 0..hw {
                for c in 0..3 {
                    data[base + c * hw + p] = F::lit(s.image[p * 3 + c] as f64 * 2.0 - 1.0);
                }
            }
            n += 1;
        }
        let (height, width) = dims.ok_or_else(|| Error::shape("empty batch"))?;
        Ok(ImageBatch {
            n,
            height,
            width,
            data,
        })
    }

    fn image(&self, i: usize) -> &[F] {
        let sz = 3 * self.height * self.width;
        &self.data[i * sz..(i + 1) * sz]
    }
}

/// Per-pixel outputs at feature resolution. Rows are pixels in
/// (image, y, x) order.
#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub features: Matrix<F>,
    pub logits: Matrix<F>,
    pub probs: Matrix<F>,
    pub confidence: Vec<F>,
    pub hard_labels: Vec<u8>,
}

impl<F: Real> ForwardOutput<F> {
    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    /// Bilinear (half-pixel centers) upsampling of image `i`'s probabilities
    /// to `out_h x out_w`; rows are output pixels.
    pub fn upsampled_probs(&self, i: usize, out_h: usize, out_w: usize) -> Matrix<F> {
        let c = self.num_classes();
        let (h, w) = (self.height, self.width);
        let base = i * h * w;
        let mut out = Matrix::zeros(out_h * out_w, c);
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let coord = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        };
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, sx, w);
                let wts = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let row = out.row_mut(oy * out_w + ox);
                for (yy, xx, wt) in wts {
                    let src = self.probs.row(base + yy * w + xx);
                    let wt = F::lit(wt);
                    for k in 0..c {
                        row[k] = row[k] + wt * src[k];
                    }
                }
            }
        }
        out
    }
}

/// Softmax per row, confidence and argmax (lowest index wins ties).
pub fn softmax_outputs<F: Real>(logits: &Matrix<F>) -> (Matrix<F>, Vec<F>, Vec<u8>) {
    let mut probs = logits.clone();
    let mut conf = Vec::with_capacity(logits.rows());
    let mut hard = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let r = probs.row_mut(i);
        let m = r.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in r.iter_mut() {
            *v = *v / s;
        }
        let mut best = 0;
        let mut best_v = r[0];
        for (k, &v) in r.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        conf.push(best_v);
        hard.push(best as u8);
    }
    (probs, conf, hard)
}

struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

fn im2col<F: Real>(x: &[F], conv: &Conv, h: usize, w: usize) -> (Vec<F>, usize, usize) {
    let (oh, ow) = (conv.out_dim(h), conv.out_dim(w));
    let k = conv.k;
    let kk = conv.cin * k * k;
    let mut cols = vec![F::zero(); kk * oh * ow];
    for c in 0..conv.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[c * h * w + iy as usize * w..c * h * w + (iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im<F: Real>(cols: &[F], conv: &Conv, h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let k = conv.k;
    let mut x = vec![F::zero(); conv.cin * h * w];
    for c in 0..conv.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut x[base + ix as usize];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out = W * cols + b` for a `(cout x K)` weight and `(K x P)` columns.
fn conv_apply<F: Real>(weight: &[F], bias: &[F], cols: &[F], cout: usize, kk: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); cout * p];
    for (o, &b) in bias.iter().enumerate() {
        out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b);
    }
    F::gemm(false, false, cout, p, kk, F::one(), weight, cols, F::one(), &mut out);
    out
}

/// Accumulates weight/bias gradients and returns the gradient wrt `cols`.
#[allow(clippy::too_many_arguments)]
fn conv_backward<F: Real>(
    weight: &[F],
    cols: &[F],
    dout: &[F],
    cout: usize,
    kk: usize,
    p: usize,
    dweight: &mut [F],
    dbias: &mut [F],
    need_input_grad: bool,
) -> Option<Vec<F>> {
    F::gemm(false, true, cout, kk, p, F::one(), dout, cols, F::one(), dweight);
    for o in 0..cout {
        let s: F = dout[o * p..(o + 1) * p].iter().copied().sum();
        dbias[o] = dbias[o] + s;
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![F::zero(); kk * p];
    F::gemm(true, false, kk, p, cout, F::one(), weight, dout, F::zero(), &mut dcols);
    Some(dcols)
}

fn relu_inplace<F: Real>(v: &mut [F]) {
    for x in v.iter_mut() {
        if *x < F::zero() {
            *x = F::zero();
        }
    }
}

fn relu_backward<F: Real>(out: &[F], grad: &mut [F]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Intermediate activations of one image, kept for the backward pass.
struct ImageCache<F> {
    enc_cols: Vec<Vec<F>>,
    enc_out: Vec<Vec<F>>,
    enc_dims: Vec<(usize, usize)>,
    ctx_cols: Vec<F>,
    ctx_out: Vec<F>,
    concat: Vec<F>,
    fuse_out: Vec<F>,
}

/// Everything `backward` needs from a forward pass.
pub struct ForwardCache<F> {
    images: Vec<ImageCache<F>>,
    in_dims: (usize, usize),
    feat_dims: (usize, usize),
    features: Matrix<F>,
}

fn upsample2<F: Real>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ch * oh * ow + y * ow + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn upsample2_backward<F: Real>(g: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![F::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let d = &mut out[ch * h * w + (y / 2) * w + xx / 2];
                *d = *d + g[ch * oh * ow + y * ow + xx];
            }
        }
    }
    out
}

struct Net<'a, F> {
    params: &'a ModelParams<F>,
    cfg: &'a BackboneConfig,
}

impl<'a, F: Real> Net<'a, F> {
    fn enc_conv(&self, i: usize) -> Conv {
        let cin = if i == 0 { 3 } else { self.cfg.channels[i - 1] };
        Conv {
            cin,
            cout: self.cfg.channels[i],
            k: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn ctx_conv(&self) -> Conv {
        let c = *self.cfg.channels.last().unwrap();
        Conv {
            cin: c,
            cout: c,
            k: 3,
            stride: 1,
            pad: 1,
        }
    }

    /// Returns pixel-major features `(h'w' x d)` and the cache.
    fn forward_image(&self, x: &[F], h: usize, w: usize) -> (Vec<F>, ImageCache<F>) {
        let l = self.cfg.channels.len();
        let mut cur = x.to_vec();
        let (mut ch, mut cw) = (h, w);
        let mut enc_cols = Vec::with_capacity(l);
        let mut enc_out = Vec::with_capacity(l);
        let mut enc_dims = Vec::with_capacity(l);
        for i in 0..l {
            let conv = self.enc_conv(i);
            let (cols, oh, ow) = im2col(&cur, &conv, ch, cw);
            let wname = format!("enc{i}.weight");
            let bname = format!("enc{i}.bias");
            let mut out = conv_apply(
                self.params.slice(&wname),
                self.params.slice(&bname),
                &cols,
                conv.cout,
                conv.cin * 9,
                oh * ow,
            );
            relu_inplace(&mut out);
            enc_cols.push(cols);
            enc_out.push(out.clone());
            enc_dims.push((oh, ow));
            cur = out;
            ch = oh;
            cw = ow;
        }
        let ctx = self.ctx_conv();
        let (ctx_cols, _, _) = im2col(&cur, &ctx, ch, cw);
        let mut ctx_out = conv_apply(
            self.params.slice("ctx.weight"),
            self.params.slice("ctx.bias"),
            &ctx_cols,
            ctx.cout,
            ctx.cin * 9,
            ch * cw,
        );
        relu_inplace(&mut ctx_out);

        let deep = ctx.cout;
        let up = upsample2(&ctx_out, deep, ch, cw);
        let (fh, fw) = enc_dims[l - 2];
        debug_assert_eq!((fh, fw), (ch * 2, cw * 2));
        let p = fh * fw;
        let mut concat = up;
        concat.extend_from_slice(&enc_out[l - 2]);
        let fwid = self.cfg.fuse_width();
        let mut fuse_out = conv_apply(
            self.params.slice("fuse.weight"),
            self.params.slice("fuse.bias"),
            &concat,
            fwid,
            deep + fwid,
            p,
        );
        relu_inplace(&mut fuse_out);
        let d = self.cfg.feature_dim;
        let z_chw = conv_apply(
            self.params.slice("proj.weight"),
            self.params.slice("proj.bias"),
            &fuse_out,
            d,
            fwid,
            p,
        );
        let mut z = vec![F::zero(); p * d];
        for c in 0..d {
            for q in 0..p {
                z[q * d + c] = z_chw[c * p + q];
            }
        }
        (
            z,
            ImageCache {
                enc_cols,
                enc_out,
                enc_dims,
                ctx_cols,
                ctx_out,
                concat,
                fuse_out,
            },
        )
    }

    fn backward_image(&self, cache: &ImageCache<F>, dz: &[F], in_dims: (usize, usize), grad: &mut [F]) {
        let layout = &self.params.layout;
        let l = self.cfg.channels.len();
        let d = self.cfg.feature_dim;
        let fwid = self.cfg.fuse_width();
        let (fh, fw) = cache.enc_dims[l - 2];
        let p = fh * fw;

        let mut dz_chw = vec![F::zero(); d * p];
        for q in 0..p {
            for c in 0..d {
                dz_chw[c * p + q] = dz[q * d + c];
            }
        }
        let (wr, br) = (layout.span("proj.weight"), layout.span("proj.bias"));
        let (gw, gb) = split_two(grad, wr.clone(), br.clone());
        let mut dfuse = conv_backward(
            self.params.slice("proj.weight"),
            &cache.fuse_out,
            &dz_chw,
            d,
            fwid,
            p,
            gw,
            gb,
            true,
        )
        .unwrap();
        relu_backward(&cache.fuse_out, &mut dfuse);

        let deep = *self.cfg.channels.last().unwrap();
        let (wr, br) = (layout.span("fuse.weight"), layout.span("fuse.bias"));
        let (gw, gb) = split_two(grad, wr, br);
        let dconcat = conv_backward(
            self.params.slice("fuse.weight"),
            &cache.concat,
            &dfuse,
            fwid,
            deep + fwid,
            p,
            gw,
            gb,
            true,
        )
        .unwrap();
        let (dup, dskip) = dconcat.split_at(deep * p);
        let (dh, dw) = (fh / 2, fw / 2);
        let mut dctx = upsample2_backward(dup, deep, dh, dw);
        relu_backward(&cache.ctx_out, &mut dctx);

        let ctx = self.ctx_conv();
        let (wr, br) = (layout.span("ctx.weight"), layout.span("ctx.bias"));
        let (gw, gb) = split_two(grad, wr, br);
        let dcols = conv_backward(
            self.params.slice("ctx.weight"),
            &cache.ctx_cols,
            &dctx,
            ctx.cout,
            ctx.cin * 9,
            dh * dw,
            gw,
            gb,
            true,
        )
        .unwrap();
        let mut dcur = col2im(&dcols, &ctx, dh, dw, dh, dw);

        for i in (0..l).rev() {
            if i == l - 2 {
                for (a, b) in dcur.iter_mut().zip(dskip) {
                    *a = *a + *b;
                }
            }
            relu_backward(&cache.enc_out[i], &mut dcur);
            let conv = self.enc_conv(i);
            let (oh, ow) = cache.enc_dims[i];
            let (ih, iw) = if i == 0 { in_dims } else { cache.enc_dims[i - 1] };
            let wname = format!("enc{i}.weight");
            let (wr, br) = (layout.span(&wname), layout.span(&format!("enc{i}.bias")));
            let (gw, gb) = split_two(grad, wr, br);
            let dcols = conv_backward(
                self.params.slice(&wname),
                &cache.enc_cols[i],
                &dcur,
                conv.cout,
                conv.cin * 9,
                oh * ow,
                gw,
                gb,
                i > 0,
            );
            if let Some(dcols) = dcols {
                dcur = col2im(&dcols, &conv, ih, iw, oh, ow);
            }
        }
    }
}

/// Mutable views of two disjoint ranges (`a` before `b`).
fn split_two<F>(
    v: &mut [F],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [F], &mut [F]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = v.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

/// Forward pass that also returns what `backward` needs.
pub fn forward_train<F: Real>(
    params: &ModelParams<F>,
    images: &ImageBatch<F>,
) -> Result<(ForwardOutput<F>, ForwardCache<F>)> {
    run_forward(params, images, true).map(|(o, c)| (o, c.expect("cache requested")))
}

/// Inference-only forward pass.
pub fn forward<F: Real>(params: &ModelParams<F>, images: &ImageBatch<F>) -> Result<ForwardOutput<F>> {
    run_forward(params, images, false).map(|(o, _)| o)
}

fn run_forward<F: Real>(
    params: &ModelParams<F>,
    images: &ImageBatch<F>,
    keep: bool,
) -> Result<(ForwardOutput<F>, Option<ForwardCache<F>>)> {
    let cfg = params.config();
    let m = cfg.input_multiple();
    if images.height % m != 0 || images.width % m != 0 {
        return Err(Error::shape(format!(
            "input {}x{} must be divisible by {m} (stride {})",
            images.height, images.width, cfg.stride
        )));
    }
    if images.n == 0 {
        return Err(Error::shape("empty batch"));
    }
    let net = Net { params, cfg };
    let (fh, fw) = (images.height / cfg.stride, images.width / cfg.stride);
    let p = fh * fw;
    let d = cfg.feature_dim;
    let mut feats = Vec::with_capacity(images.n * p * d);
    let mut caches = Vec::new();
    for i in 0..images.n {
        let (z, cache) = net.forward_image(images.image(i), images.height, images.width);
        feats.extend_from_slice(&z);
        if keep {
            caches.push(cache);
        }
    }
    let features = Matrix::from_vec(images.n * p, d, feats)?;
    let logits = classify(params, &features);
    let (probs, confidence, hard_labels) = softmax_outputs(&logits);
    let out = ForwardOutput {
        batch: images.n,
        height: fh,
        width: fw,
        features: features.clone(),
        logits,
        probs,
        confidence,
        hard_labels,
    };
    let cache = keep.then(|| ForwardCache {
        images: caches,
        in_dims: (images.height, images.width),
        feat_dims: (fh, fw),
        features,
    });
    Ok((out, cache))
}

/// The classifier: per-pixel affine map from features to logits.
pub fn classify<F: Real>(params: &ModelParams<F>, features: &Matrix<F>) -> Matrix<F> {
    let cfg = params.config();
    let (c, d) = (cfg.num_classes, cfg.feature_dim);
    let rows = features.rows();
    let bias = params.slice("cls.bias");
    let mut logits = Matrix::zeros(rows, c);
    for i in 0..rows {
        logits.row_mut(i).copy_from_slice(bias);
    }
    F::gemm(
        false,
        true,
        rows,
        c,
        d,
        F::one(),
        features.as_slice(),
        params.slice("cls.weight"),
        F::one(),
        logits.as_mut_slice(),
    );
    logits
}

/// Backpropagates `dL/dfeatures` and `dL/dlogits` (either may be `None`)
/// into a flat gradient with the same layout as `params`.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    dfeatures: Option<&Matrix<F>>,
    dlogits: Option<&Matrix<F>>,
) -> Result<Vec<F>> {
    let cfg = params.config();
    let (c, d) = (cfg.num_classes, cfg.feature_dim);
    let rows = cache.features.rows();
    let mut grad = params.zeros_like();
    let mut dz = match dfeatures {
        Some(m) => {
            if m.rows() != rows || m.cols() != d {
                return Err(Error::shape("feature gradient shape mismatch"));
            }
            m.clone()
        }
        None => Matrix::zeros(rows, d),
    };
    if let Some(dg) = dlogits {
        if dg.rows() != rows || dg.cols() != c {
            return Err(Error::shape("logit gradient shape mismatch"));
        }
    }
    let net = Net { params, cfg };
    let p = cache.feat_dims.0 * cache.feat_dims.1;
    let (wr, br) = (params.layout.span("cls.weight"), params.layout.span("cls.bias"));
    let cls_w = params.slice("cls.weight");
    // Image by image so that images with no incoming gradient contribute
    // nothing at all (not even rounding-free zeros).
    for (i, ic) in cache.images.iter().enumerate() {
        let span = i * p..(i + 1) * p;
        let dz_img = &mut dz.as_mut_slice()[span.start * d..span.end * d];
        let mut active = dz_img.iter().any(|v| *v != F::zero());
        if let Some(dg) = dlogits {
            let dg_img = &dg.as_slice()[span.start * c..span.end * c];
            if dg_img.iter().any(|v| *v != F::zero()) {
                active = true;
                let feats = &cache.features.as_slice()[span.start * d..span.end * d];
                let (gw, gb) = split_two(&mut grad, wr.clone(), br.clone());
                F::gemm(true, false, c, d, p, F::one(), dg_img, feats, F::one(), gw);
                for q in 0..p {
                    for (b, &g) in gb.iter_mut().zip(&dg_img[q * c..(q + 1) * c]) {
                        *b = *b + g;
                    }
                }
                F::gemm(false, false, p, d, c, F::one(), dg_img, cls_w, F::one(), dz_img);
            }
        }
        if active {
            let dz_img = &dz.as_slice()[span.start * d..span.end * d];
            net.backward_image(ic, dz_img, cache.in_dims, &mut grad);
        }
    }
    Ok(grad)
}

/// A student and its exponential-moving-average teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentTeacherPair<F> {
    pub student: ModelParams<F>,
    pub teacher: ModelParams<F>,
    pub ema_decay: F,
}

impl<F: Real> StudentTeacherPair<F> {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ModelParams<F>, ema_decay: F) -> Self {
        StudentTeacherPair {
            teacher: student.clone(),
            student,
            ema_decay,
        }
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
pub fn ema_update<F: Real>(pair: &mut StudentTeacherPair<F>) -> Result<()> {
    if !pair.student.same_layout(&pair.teacher) || pair.student.len() != pair.teacher.len() {
        return Err(Error::Internal("student/teacher layouts differ".into()));
    }
    let a = pair.ema_decay;
    let b = F::one() - a;
    for (t, &s) in pair.teacher.data.iter_mut().zip(&pair.student.data) {
        *t = a * *t + b * s;
    }
    Ok(())
}
