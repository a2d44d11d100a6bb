//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node referring
//! to earlier nodes; [`Tape::backward`] walks the records in reverse and
//! accumulates gradients. All arithmetic is double precision and the
//! evaluation order is fixed, so repeated runs are bit-identical.
//!
//! Losses with constant targets (focal, dice, partial cross-entropy,
//! gated-CRF) are fused nodes with hand-derived adjoints; everything else is
//! composed from the primitive ops below.

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Clamp bound used inside logarithms of the fused losses.
pub const PROB_EPS: f64 = 1e-6;

/// Precomputed pairwise bilateral weights for the gated-CRF loss.
///
/// For each pixel `i` of an `h x w` grid and each offset `(dy, dx)` in the
/// square window of the given radius (excluding the center), stores the
/// kernel value `K(i, j)`, or 0 where the pair is gated out (out of bounds
/// or either endpoint invalid). `n_pairs` counts the valid ordered pairs.
#[derive(Clone, Debug)]
pub struct GcrfKernel {
    pub h: usize,
    pub w: usize,
    pub radius: usize,
    pub offsets: Vec<(isize, isize)>,
    /// Row-major `[pixel][offset]`, 0.0 for gated pairs.
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
    pub n_pairs: usize,
}

impl GcrfKernel {
    /// Builds the bilateral kernel table from an RGB image at mask
    /// resolution. `rgb` is `[3, h, w]` row-major, `gate` marks pixels that
    /// may participate in pairs.
    pub fn new(
        rgb: &[f64],
        gate: &[bool],
        h: usize,
        w: usize,
        radius: usize,
        sigma_xy: f64,
        sigma_rgb: f64,
        weight: f64,
    ) -> Self {
        assert_eq!(rgb.len(), 3 * h * w);
        assert_eq!(gate.len(), h * w);
        let mut offsets = Vec::new();
        let r = radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                if dy != 0 || dx != 0 {
                    offsets.push((dy, dx));
                }
            }
        }
        let mut weights = vec![0.0; h * w * offsets.len()];
        let mut n_pairs = 0usize;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !gate[i] {
                    continue;
                }
                for (oi, &(dy, dx)) in offsets.iter().enumerate() {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !gate[j] {
                        continue;
                    }
                    let d_xy = (dy * dy + dx * dx) as f64;
                    let mut d_rgb = 0.0;
                    for c in 0..3 {
                        let dv = rgb[c * h * w + i] - rgb[c * h * w + j];
                        d_rgb += dv * dv;
                    }
                    let k = weight
                        * (-d_xy / (2.0 * sigma_xy * sigma_xy)
                            - d_rgb / (2.0 * sigma_rgb * sigma_rgb))
                            .exp();
                    weights[i * offsets.len() + oi] = k;
                    n_pairs += 1;
                }
            }
        }
        GcrfKernel {
            h,
            w,
            radius,
            offsets,
            weights,
            valid: gate.to_vec(),
            n_pairs,
        }
    }
}

enum Op {
    Leaf,
    /// a + b, identical shapes.
    Add(usize, usize),
    /// Elementwise a * b, identical shapes.
    Mul(usize, usize),
    /// mul * a + add, elementwise with scalar constants. The additive
    /// constant is folded into the forward value; backward needs only mul.
    Affine { a: usize, mul: f64 },
    /// Sum of several same-shaped nodes.
    SumN(Vec<usize>),
    Sigmoid(usize),
    Tanh(usize),
    /// 2-d matrix product `[m,k] x [k,n]`.
    MatMul(usize, usize),
    /// 2-d transpose.
    Transpose(usize),
    Reshape(usize),
    /// `[k] x [k,m] -> [m]`.
    VecMatMul(usize, usize),
    /// `[r,c] + bias[c]` broadcast over rows.
    AddRowBias(usize, usize),
    /// `[c,h,w] + bias[c]` broadcast over positions.
    AddChanBias(usize, usize),
    /// `[c] -> [c,h,w]`, value repeated at every position.
    BroadcastChan { vec: usize, h: usize, w: usize },
    /// Spatial mean `[c,h,w] -> [c]`.
    MeanSpatial(usize),
    /// Channel concat of two `[*,h,w]` maps.
    ConcatChan(usize, usize),
    /// 1-d concat.
    ConcatVec(usize, usize),
    /// Stack `[d]` vectors into `[n,d]`.
    StackRows(Vec<usize>),
    /// Row `r` of `[n,d] -> [d]`.
    GatherRow { mat: usize, row: usize },
    /// Channel fiber at `(r,c)` of `[c,h,w] -> [c]`.
    GatherPos { map: usize, row: usize, col: usize },
    /// Rows of an embedding table `[v,d]` by constant indices.
    Embedding { table: usize, indices: Vec<usize> },
    /// Same-padded 2-d convolution, `[ci,h,w] * [co,ci,k,k]`.
    Conv2d { input: usize, weight: usize, stride: usize },
    /// Bilinear x2 upsampling of `[c,h,w]`.
    UpsampleBilinear2(usize),
    /// Per-kernel 1x1 dynamic convolution: `[c,h,w] x [k,c] -> [k,h,w]`.
    DynamicConv { feat: usize, kernels: usize },
    /// Mean focal loss of probabilities against a binary map.
    Focal { probs: usize, targets: Vec<u8>, alpha: f64, gamma: f64 },
    /// Mean (over leading axis) dice loss of `[k,h,w]` against one mask.
    Dice { probs: usize, target: Vec<f64>, eps: f64 },
    /// Partial cross-entropy over pixels labeled 0/1; -1 is ignored.
    Pce { probs: usize, labels: Vec<i8> },
    /// Pairwise gated-CRF energy with a precomputed bilateral kernel.
    Gcrf { probs: usize, kernel: GcrfKernel },
}

struct Node {
    data: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { data: standard(data), op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].data
    }

    /// Value of a scalar node.
    pub fn value(&self, v: Var) -> f64 {
        let d = &self.nodes[v.0].data;
        debug_assert_eq!(d.len(), 1);
        d.iter().copied().next().unwrap()
    }

    pub fn leaf(&mut self, data: ArrayD<f64>) -> Var {
        self.push(data, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.push(scalar(v), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].data.shape(), self.nodes[b.0].data.shape());
        let data = &self.nodes[a.0].data + &self.nodes[b.0].data;
        self.push(data, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].data.shape(), self.nodes[b.0].data.shape());
        let data = &self.nodes[a.0].data * &self.nodes[b.0].data;
        self.push(data, Op::Mul(a.0, b.0))
    }

    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let data = self.nodes[a.0].data.mapv(|v| mul * v + add);
        self.push(data, Op::Affine { a: a.0, mul })
    }

    pub fn sum_n(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut data = self.nodes[terms[0].0].data.clone();
        for t in &terms[1..] {
            data += &self.nodes[t.0].data;
        }
        self.push(data, Op::SumN(terms.iter().map(|v| v.0).collect()))
    }

    pub fn mean_n(&mut self, terms: &[Var]) -> Var {
        let s = self.sum_n(terms);
        self.affine(s, 1.0 / terms.len() as f64, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(data, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.mapv(f64::tanh);
        self.push(data, Op::Tanh(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].data);
        let bv = as2(&self.nodes[b.0].data);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let data = av.dot(&bv).into_dyn();
        self.push(data, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = as2(&self.nodes[a.0].data);
        let data = av.t().to_owned().into_dyn();
        self.push(data, Op::Transpose(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.nodes[a.0].data.len(), n, "reshape size");
        let flat: Vec<f64> = self.nodes[a.0].data.iter().copied().collect();
        let data = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        self.push(data, Op::Reshape(a.0))
    }

    pub fn vec_matmul(&mut self, vec: Var, mat: Var) -> Var {
        let v = &self.nodes[vec.0].data;
        let m = as2(&self.nodes[mat.0].data);
        assert_eq!(v.ndim(), 1);
        assert_eq!(v.len(), m.nrows());
        let vs = v.as_slice().unwrap();
        let mut out = vec![0.0; m.ncols()];
        for (k, &vk) in vs.iter().enumerate() {
            let row = m.row(k);
            for (j, o) in out.iter_mut().enumerate() {
                *o += vk * row[j];
            }
        }
        let data = ArrayD::from_shape_vec(IxDyn(&[m.ncols()]), out).unwrap();
        self.push(data, Op::VecMatMul(vec.0, mat.0))
    }

    pub fn add_row_bias(&mut self, mat: Var, bias: Var) -> Var {
        let m = as2(&self.nodes[mat.0].data);
        let b = &self.nodes[bias.0].data;
        assert_eq!(b.ndim(), 1);
        assert_eq!(m.ncols(), b.len());
        let bs = b.as_slice().unwrap();
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x += bs[j];
            }
        }
        self.push(out.into_dyn(), Op::AddRowBias(mat.0, bias.0))
    }

    pub fn add_chan_bias(&mut self, map: Var, bias: Var) -> Var {
        let shape = self.nodes[map.0].data.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let b = self.nodes[bias.0].data.as_slice().unwrap().to_vec();
        assert_eq!(b.len(), c);
        let mut data = self.nodes[map.0].data.clone();
        let ds = data.as_slice_mut().unwrap();
        for ci in 0..c {
            let base = ci * h * w;
            for p in 0..h * w {
                ds[base + p] += b[ci];
            }
        }
        self.push(data, Op::AddChanBias(map.0, bias.0))
    }

    pub fn broadcast_chan(&mut self, vec: Var, h: usize, w: usize) -> Var {
        let v = self.nodes[vec.0].data.as_slice().unwrap().to_vec();
        let c = v.len();
        let mut data = vec![0.0; c * h * w];
        for (ci, &val) in v.iter().enumerate() {
            for p in 0..h * w {
                data[ci * h * w + p] = val;
            }
        }
        let data = ArrayD::from_shape_vec(IxDyn(&[c, h, w]), data).unwrap();
        self.push(data, Op::BroadcastChan { vec: vec.0, h, w })
    }

    pub fn mean_spatial(&mut self, map: Var) -> Var {
        let shape = self.nodes[map.0].data.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let ms = self.nodes[map.0].data.as_slice().unwrap();
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for p in 0..h * w {
                s += ms[ci * h * w + p];
            }
            out[ci] = s * inv;
        }
        let data = ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap();
        self.push(data, Op::MeanSpatial(map.0))
    }

    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].data.shape().to_vec();
        let sb = self.nodes[b.0].data.shape().to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(&sa[1..], &sb[1..]);
        let mut data = Vec::with_capacity((sa[0] + sb[0]) * sa[1] * sa[2]);
        data.extend_from_slice(self.nodes[a.0].data.as_slice().unwrap());
        data.extend_from_slice(self.nodes[b.0].data.as_slice().unwrap());
        let data =
            ArrayD::from_shape_vec(IxDyn(&[sa[0] + sb[0], sa[1], sa[2]]), data).unwrap();
        self.push(data, Op::ConcatChan(a.0, b.0))
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Var {
        let mut data = self.nodes[a.0].data.as_slice().unwrap().to_vec();
        data.extend_from_slice(self.nodes[b.0].data.as_slice().unwrap());
        let n = data.len();
        let data = ArrayD::from_shape_vec(IxDyn(&[n]), data).unwrap();
        self.push(data, Op::ConcatVec(a.0, b.0))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let d = self.nodes[rows[0].0].data.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let rd = &self.nodes[r.0].data;
            assert_eq!(rd.ndim(), 1);
            assert_eq!(rd.len(), d);
            data.extend_from_slice(rd.as_slice().unwrap());
        }
        let data = ArrayD::from_shape_vec(IxDyn(&[rows.len(), d]), data).unwrap();
        self.push(data, Op::StackRows(rows.iter().map(|v| v.0).collect()))
    }

    pub fn gather_row(&mut self, mat: Var, row: usize) -> Var {
        let m = as2(&self.nodes[mat.0].data);
        assert!(row < m.nrows());
        let data = m.row(row).to_owned().into_dyn();
        self.push(data, Op::GatherRow { mat: mat.0, row })
    }

    pub fn gather_pos(&mut self, map: Var, row: usize, col: usize) -> Var {
        let shape = self.nodes[map.0].data.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(row < h && col < w);
        let ms = self.nodes[map.0].data.as_slice().unwrap();
        let mut out = vec![0.0; c];
        for (ci, o) in out.iter_mut().enumerate() {
            *o = ms[ci * h * w + row * w + col];
        }
        let data = ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap();
        self.push(data, Op::GatherPos { map: map.0, row, col })
    }

    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = as2(&self.nodes[table.0].data);
        let d = t.ncols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < t.nrows(), "embedding index out of range");
            data.extend(t.row(i).iter().copied());
        }
        let data = ArrayD::from_shape_vec(IxDyn(&[indices.len(), d]), data).unwrap();
        self.push(
            data,
            Op::Embedding { table: table.0, indices: indices.to_vec() },
        )
    }

    /// Same-padded convolution with odd kernel size and stride 1 or 2.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize) -> Var {
        let ishape = self.nodes[input.0].data.shape().to_vec();
        let wshape = self.nodes[weight.0].data.shape().to_vec();
        assert_eq!(ishape.len(), 3);
        assert_eq!(wshape.len(), 4);
        let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (co, ci_w, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(ci, ci_w);
        assert_eq!(kh, kw);
        assert_eq!(kh % 2, 1, "odd kernels only");
        let pad = kh / 2;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let cols = im2col(
            self.nodes[input.0].data.as_slice().unwrap(),
            ci,
            h,
            w,
            kh,
            stride,
            pad,
            ho,
            wo,
        );
        let w2 = as2_shaped(&self.nodes[weight.0].data, co, ci * kh * kw);
        // dot may return an F-layout result; standard() restores logical order
        // before the buffer is reinterpreted with a new shape.
        let out2 = standard(w2.dot(&cols).into_dyn());
        let data = ArrayD::from_shape_vec(
            IxDyn(&[co, ho, wo]),
            out2.into_raw_vec_and_offset().0,
        )
        .unwrap();
        self.push(data, Op::Conv2d { input: input.0, weight: weight.0, stride })
    }

    pub fn upsample_bilinear2(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].data.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let ytab = bilinear_axis_table(h);
        let xtab = bilinear_axis_table(w);
        let src = self.nodes[a.0].data.as_slice().unwrap();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            let ibase = ci * h * w;
            let obase = ci * ho * wo;
            for oy in 0..ho {
                let (y0, y1, fy) = ytab[oy];
                for ox in 0..wo {
                    let (x0, x1, fx) = xtab[ox];
                    let v = (1.0 - fy) * (1.0 - fx) * src[ibase + y0 * w + x0]
                        + (1.0 - fy) * fx * src[ibase + y0 * w + x1]
                        + fy * (1.0 - fx) * src[ibase + y1 * w + x0]
                        + fy * fx * src[ibase + y1 * w + x1];
                    out[obase + oy * wo + ox] = v;
                }
            }
        }
        let data = ArrayD::from_shape_vec(IxDyn(&[c, ho, wo]), out).unwrap();
        self.push(data, Op::UpsampleBilinear2(a.0))
    }

    /// Applies each row of `kernels` as a 1x1 convolution over `feat`.
    pub fn dynamic_conv(&mut self, feat: Var, kernels: Var) -> Var {
        let fs = self.nodes[feat.0].data.shape().to_vec();
        let ks = self.nodes[kernels.0].data.shape().to_vec();
        assert_eq!(fs.len(), 3);
        assert_eq!(ks.len(), 2);
        assert_eq!(fs[0], ks[1], "kernel length must equal channel count");
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let k = ks[0];
        let f = self.nodes[feat.0].data.as_slice().unwrap();
        let g = self.nodes[kernels.0].data.as_slice().unwrap();
        let mut out = vec![0.0; k * h * w];
        for ki in 0..k {
            let obase = ki * h * w;
            for ci in 0..c {
                let gv = g[ki * c + ci];
                let ibase = ci * h * w;
                for p in 0..h * w {
                    out[obase + p] += gv * f[ibase + p];
                }
            }
        }
        let data = ArrayD::from_shape_vec(IxDyn(&[k, h, w]), out).unwrap();
        self.push(data, Op::DynamicConv { feat: feat.0, kernels: kernels.0 })
    }

    /// Mean focal loss over all cells of a probability map.
    pub fn focal_loss(&mut self, probs: Var, targets: &[u8], alpha: f64, gamma: f64) -> Var {
        let p = self.nodes[probs.0].data.as_slice().unwrap();
        assert_eq!(p.len(), targets.len());
        let mut total = 0.0;
        for (pv, &t) in p.iter().zip(targets) {
            let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total += if t == 1 {
                -alpha * (1.0 - pc).powf(gamma) * pc.ln()
            } else {
                -(1.0 - alpha) * pc.powf(gamma) * (1.0 - pc).ln()
            };
        }
        let v = total / targets.len() as f64;
        self.push(
            scalar(v),
            Op::Focal { probs: probs.0, targets: targets.to_vec(), alpha, gamma },
        )
    }

    /// Dice loss of `[k,h,w]` probabilities against one `[h,w]` mask,
    /// averaged over the k leading slices.
    pub fn dice_loss(&mut self, probs: Var, target: &[f64], eps: f64) -> Var {
        let shape = self.nodes[probs.0].data.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (k, hw) = (shape[0], shape[1] * shape[2]);
        assert_eq!(target.len(), hw);
        let p = self.nodes[probs.0].data.as_slice().unwrap();
        let sum_y2: f64 = target.iter().map(|y| y * y).sum();
        let mut total = 0.0;
        for ki in 0..k {
            let pk = &p[ki * hw..(ki + 1) * hw];
            let mut num = 0.0;
            let mut sum_p2 = 0.0;
            for (pv, yv) in pk.iter().zip(target) {
                num += pv * yv;
                sum_p2 += pv * pv;
            }
            total += 1.0 - (2.0 * num + eps) / (sum_p2 + sum_y2 + eps);
        }
        let v = total / k as f64;
        self.push(
            scalar(v),
            Op::Dice { probs: probs.0, target: target.to_vec(), eps },
        )
    }

    /// Binary cross-entropy over pixels labeled 0 or 1, ignoring -1,
    /// averaged over masks. Returns the node and whether any labeled pixel
    /// existed (false means the loss is identically zero).
    pub fn pce_loss(&mut self, probs: Var, labels: &[i8]) -> (Var, bool) {
        let shape = self.nodes[probs.0].data.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (k, hw) = (shape[0], shape[1] * shape[2]);
        assert_eq!(labels.len(), hw);
        let n_labeled = labels.iter().filter(|&&l| l >= 0).count();
        let p = self.nodes[probs.0].data.as_slice().unwrap();
        let mut total = 0.0;
        if n_labeled > 0 {
            for ki in 0..k {
                let pk = &p[ki * hw..(ki + 1) * hw];
                let mut s = 0.0;
                for (pv, &l) in pk.iter().zip(labels) {
                    let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    match l {
                        1 => s -= pc.ln(),
                        0 => s -= (1.0 - pc).ln(),
                        _ => {}
                    }
                }
                total += s / n_labeled as f64;
            }
            total /= k as f64;
        }
        let var = self.push(
            scalar(total),
            Op::Pce { probs: probs.0, labels: labels.to_vec() },
        );
        (var, n_labeled > 0)
    }

    /// Gated-CRF pairwise energy of `[k,h,w]` probabilities, averaged over
    /// masks and normalized by the valid ordered-pair count.
    pub fn gcrf_loss(&mut self, probs: Var, kernel: &GcrfKernel) -> Var {
        let shape = self.nodes[probs.0].data.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (k, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(h, kernel.h);
        assert_eq!(w, kernel.w);
        let p = self.nodes[probs.0].data.as_slice().unwrap();
        let hw = h * w;
        let noff = kernel.offsets.len();
        let mut total = 0.0;
        if kernel.n_pairs > 0 {
            for ki in 0..k {
                let pk = &p[ki * hw..(ki + 1) * hw];
                let mut e = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let pi = pk[i];
                        for (oi, &(dy, dx)) in kernel.offsets.iter().enumerate() {
                            let kv = kernel.weights[i * noff + oi];
                            if kv == 0.0 {
                                continue;
                            }
                            let j = (y as isize + dy) as usize * w
                                + (x as isize + dx) as usize;
                            let pj = pk[j];
                            e += kv * (pi * (1.0 - pj) + (1.0 - pi) * pj);
                        }
                    }
                }
                total += e / kernel.n_pairs as f64;
            }
            total /= k as f64;
        }
        self.push(
            scalar(total),
            Op::Gcrf { probs: probs.0, kernel: kernel.clone() },
        )
    }

    /// Reverse pass from a scalar root. Gradients of nodes off the path
    /// stay `None`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].data.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone(), self);
                accumulate(grads, *b, g.clone(), self);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * &self.nodes[*b].data, self);
                accumulate(grads, *b, g * &self.nodes[*a].data, self);
            }
            Op::Affine { a, mul } => {
                accumulate(grads, *a, g.mapv(|v| v * mul), self);
            }
            Op::SumN(terms) => {
                for &t in terms {
                    accumulate(grads, t, g.clone(), self);
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.data;
                let da = g * &y.mapv(|v| v * (1.0 - v));
                accumulate(grads, *a, da, self);
            }
            Op::Tanh(a) => {
                let y = &node.data;
                let da = g * &y.mapv(|v| 1.0 - v * v);
                accumulate(grads, *a, da, self);
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                let av = as2(&self.nodes[*a].data);
                let bv = as2(&self.nodes[*b].data);
                accumulate(grads, *a, g2.dot(&bv.t()).into_dyn(), self);
                accumulate(grads, *b, av.t().dot(&g2).into_dyn(), self);
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, as2(g).t().to_owned().into_dyn(), self);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].data.shape().to_vec();
                let flat: Vec<f64> = g.iter().copied().collect();
                let da = ArrayD::from_shape_vec(IxDyn(&shape), flat).unwrap();
                accumulate(grads, *a, da, self);
            }
            Op::VecMatMul(vec, mat) => {
                let gv = g.as_slice().unwrap();
                let v = self.nodes[*vec].data.as_slice().unwrap();
                let m = as2(&self.nodes[*mat].data);
                let mut dv = vec![0.0; v.len()];
                for (k, dvk) in dv.iter_mut().enumerate() {
                    let row = m.row(k);
                    for (j, &gj) in gv.iter().enumerate() {
                        *dvk += row[j] * gj;
                    }
                }
                let mut dm = vec![0.0; v.len() * gv.len()];
                for (k, &vk) in v.iter().enumerate() {
                    for (j, &gj) in gv.iter().enumerate() {
                        dm[k * gv.len() + j] = vk * gj;
                    }
                }
                accumulate(
                    grads,
                    *vec,
                    ArrayD::from_shape_vec(IxDyn(&[v.len()]), dv).unwrap(),
                    self,
                );
                accumulate(
                    grads,
                    *mat,
                    ArrayD::from_shape_vec(IxDyn(&[v.len(), gv.len()]), dm).unwrap(),
                    self,
                );
            }
            Op::AddRowBias(mat, bias) => {
                accumulate(grads, *mat, g.clone(), self);
                let g2 = as2(g);
                let mut db = vec![0.0; g2.ncols()];
                for row in g2.rows() {
                    for (j, v) in row.iter().enumerate() {
                        db[j] += v;
                    }
                }
                accumulate(
                    grads,
                    *bias,
                    ArrayD::from_shape_vec(IxDyn(&[db.len()]), db).unwrap(),
                    self,
                );
            }
            Op::AddChanBias(map, bias) => {
                accumulate(grads, *map, g.clone(), self);
                let shape = node.data.shape();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                let gs = g.as_slice().unwrap();
                let mut db = vec![0.0; c];
                for (ci, dbc) in db.iter_mut().enumerate() {
                    for p in 0..hw {
                        *dbc += gs[ci * hw + p];
                    }
                }
                accumulate(
                    grads,
                    *bias,
                    ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap(),
                    self,
                );
            }
            Op::BroadcastChan { vec, h, w } => {
                let gs = g.as_slice().unwrap();
                let c = self.nodes[*vec].data.len();
                let mut dv = vec![0.0; c];
                for (ci, dvc) in dv.iter_mut().enumerate() {
                    for p in 0..h * w {
                        *dvc += gs[ci * h * w + p];
                    }
                }
                accumulate(
                    grads,
                    *vec,
                    ArrayD::from_shape_vec(IxDyn(&[c]), dv).unwrap(),
                    self,
                );
            }
            Op::MeanSpatial(map) => {
                let shape = self.nodes[*map].data.shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let inv = 1.0 / (h * w) as f64;
                let gs = g.as_slice().unwrap();
                let mut dm = vec![0.0; c * h * w];
                for ci in 0..c {
                    let gv = gs[ci] * inv;
                    for p in 0..h * w {
                        dm[ci * h * w + p] = gv;
                    }
                }
                accumulate(
                    grads,
                    *map,
                    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dm).unwrap(),
                    self,
                );
            }
            Op::ConcatChan(a, b) => {
                let ca = self.nodes[*a].data.shape()[0];
                let shape = node.data.shape();
                let hw = shape[1] * shape[2];
                let gs = g.as_slice().unwrap();
                let da = gs[..ca * hw].to_vec();
                let dbv = gs[ca * hw..].to_vec();
                let sb = self.nodes[*b].data.shape().to_vec();
                accumulate(
                    grads,
                    *a,
                    ArrayD::from_shape_vec(IxDyn(&[ca, shape[1], shape[2]]), da).unwrap(),
                    self,
                );
                accumulate(
                    grads,
                    *b,
                    ArrayD::from_shape_vec(IxDyn(&sb), dbv).unwrap(),
                    self,
                );
            }
            Op::ConcatVec(a, b) => {
                let na = self.nodes[*a].data.len();
                let gs = g.as_slice().unwrap();
                accumulate(
                    grads,
                    *a,
                    ArrayD::from_shape_vec(IxDyn(&[na]), gs[..na].to_vec()).unwrap(),
                    self,
                );
                accumulate(
                    grads,
                    *b,
                    ArrayD::from_shape_vec(IxDyn(&[gs.len() - na]), gs[na..].to_vec())
                        .unwrap(),
                    self,
                );
            }
            Op::StackRows(rows) => {
                let d = node.data.shape()[1];
                let gs = g.as_slice().unwrap();
                for (i, &r) in rows.iter().enumerate() {
                    let dr = gs[i * d..(i + 1) * d].to_vec();
                    accumulate(
                        grads,
                        r,
                        ArrayD::from_shape_vec(IxDyn(&[d]), dr).unwrap(),
                        self,
                    );
                }
            }
            Op::GatherRow { mat, row } => {
                let shape = self.nodes[*mat].data.shape().to_vec();
                let mut dm = vec![0.0; shape[0] * shape[1]];
                let gs = g.as_slice().unwrap();
                dm[row * shape[1]..(row + 1) * shape[1]].copy_from_slice(gs);
                accumulate(
                    grads,
                    *mat,
                    ArrayD::from_shape_vec(IxDyn(&shape), dm).unwrap(),
                    self,
                );
            }
            Op::GatherPos { map, row, col } => {
                let shape = self.nodes[*map].data.shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let gs = g.as_slice().unwrap();
                let mut dm = vec![0.0; c * h * w];
                for ci in 0..c {
                    dm[ci * h * w + row * w + col] = gs[ci];
                }
                accumulate(
                    grads,
                    *map,
                    ArrayD::from_shape_vec(IxDyn(&shape), dm).unwrap(),
                    self,
                );
            }
            Op::Embedding { table, indices } => {
                let shape = self.nodes[*table].data.shape().to_vec();
                let d = shape[1];
                let gs = g.as_slice().unwrap();
                let mut dt = vec![0.0; shape[0] * d];
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += gs[i * d + j];
                    }
                }
                accumulate(
                    grads,
                    *table,
                    ArrayD::from_shape_vec(IxDyn(&shape), dt).unwrap(),
                    self,
                );
            }
            Op::Conv2d { input, weight, stride } => {
                self.conv2d_backward(*input, *weight, *stride, &node.data, g, grads);
            }
            Op::UpsampleBilinear2(a) => {
                let shape = self.nodes[*a].data.shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (2 * h, 2 * w);
                let ytab = bilinear_axis_table(h);
                let xtab = bilinear_axis_table(w);
                let gs = g.as_slice().unwrap();
                let mut da = vec![0.0; c * h * w];
                for ci in 0..c {
                    let obase = ci * ho * wo;
                    let ibase = ci * h * w;
                    for oy in 0..ho {
                        let (y0, y1, fy) = ytab[oy];
                        for ox in 0..wo {
                            let (x0, x1, fx) = xtab[ox];
                            let gv = gs[obase + oy * wo + ox];
                            da[ibase + y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                            da[ibase + y0 * w + x1] += (1.0 - fy) * fx * gv;
                            da[ibase + y1 * w + x0] += fy * (1.0 - fx) * gv;
                            da[ibase + y1 * w + x1] += fy * fx * gv;
                        }
                    }
                }
                accumulate(
                    grads,
                    *a,
                    ArrayD::from_shape_vec(IxDyn(&shape), da).unwrap(),
                    self,
                );
            }
            Op::DynamicConv { feat, kernels } => {
                let fs = self.nodes[*feat].data.shape().to_vec();
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                let k = self.nodes[*kernels].data.shape()[0];
                let hw = h * w;
                let f = self.nodes[*feat].data.as_slice().unwrap();
                let gk = self.nodes[*kernels].data.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut df = vec![0.0; c * hw];
                let mut dg = vec![0.0; k * c];
                for ki in 0..k {
                    let gout = &gs[ki * hw..(ki + 1) * hw];
                    for ci in 0..c {
                        let fb = &f[ci * hw..(ci + 1) * hw];
                        let gv = gk[ki * c + ci];
                        let mut s = 0.0;
                        let dfb = &mut df[ci * hw..(ci + 1) * hw];
                        for p in 0..hw {
                            s += gout[p] * fb[p];
                            dfb[p] += gv * gout[p];
                        }
                        dg[ki * c + ci] = s;
                    }
                }
                accumulate(
                    grads,
                    *feat,
                    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), df).unwrap(),
                    self,
                );
                accumulate(
                    grads,
                    *kernels,
                    ArrayD::from_shape_vec(IxDyn(&[k, c]), dg).unwrap(),
                    self,
                );
            }
            Op::Focal { probs, targets, alpha, gamma } => {
                let p = self.nodes[*probs].data.as_slice().unwrap();
                let gv = g.iter().copied().next().unwrap();
                let inv = gv / targets.len() as f64;
                let mut dp = vec![0.0; p.len()];
                for (i, (&pv, &t)) in p.iter().zip(targets).enumerate() {
                    if pv <= PROB_EPS || pv >= 1.0 - PROB_EPS {
                        continue;
                    }
                    dp[i] = inv
                        * if t == 1 {
                            alpha * gamma * (1.0 - pv).powf(gamma - 1.0) * pv.ln()
                                - alpha * (1.0 - pv).powf(*gamma) / pv
                        } else {
                            -(1.0 - alpha) * gamma * pv.powf(gamma - 1.0) * (1.0 - pv).ln()
                                + (1.0 - alpha) * pv.powf(*gamma) / (1.0 - pv)
                        };
                }
                let shape = self.nodes[*probs].data.shape().to_vec();
                accumulate(
                    grads,
                    *probs,
                    ArrayD::from_shape_vec(IxDyn(&shape), dp).unwrap(),
                    self,
                );
            }
            Op::Dice { probs, target, eps } => {
                let shape = self.nodes[*probs].data.shape().to_vec();
                let (k, hw) = (shape[0], shape[1] * shape[2]);
                let p = self.nodes[*probs].data.as_slice().unwrap();
                let gv = g.iter().copied().next().unwrap();
                let sum_y2: f64 = target.iter().map(|y| y * y).sum();
                let mut dp = vec![0.0; p.len()];
                for ki in 0..k {
                    let pk = &p[ki * hw..(ki + 1) * hw];
                    let mut num = 0.0;
                    let mut sum_p2 = 0.0;
                    for (pv, yv) in pk.iter().zip(target) {
                        num += pv * yv;
                        sum_p2 += pv * pv;
                    }
                    let n = 2.0 * num + eps;
                    let d = sum_p2 + sum_y2 + eps;
                    let dpk = &mut dp[ki * hw..(ki + 1) * hw];
                    for (i, (pv, yv)) in pk.iter().zip(target).enumerate() {
                        // d/dp of -(n/d): -(2y*d - n*2p)/d^2
                        dpk[i] = gv / k as f64 * (-(2.0 * yv * d - n * 2.0 * pv) / (d * d));
                    }
                }
                accumulate(
                    grads,
                    *probs,
                    ArrayD::from_shape_vec(IxDyn(&shape), dp).unwrap(),
                    self,
                );
            }
            Op::Pce { probs, labels } => {
                let shape = self.nodes[*probs].data.shape().to_vec();
                let (k, hw) = (shape[0], shape[1] * shape[2]);
                let n_labeled = labels.iter().filter(|&&l| l >= 0).count();
                let mut dp = vec![0.0; k * hw];
                if n_labeled > 0 {
                    let p = self.nodes[*probs].data.as_slice().unwrap();
                    let gv = g.iter().copied().next().unwrap();
                    let inv = gv / (k * n_labeled) as f64;
                    for ki in 0..k {
                        for (i, &l) in labels.iter().enumerate() {
                            let pv = p[ki * hw + i];
                            if pv <= PROB_EPS || pv >= 1.0 - PROB_EPS {
                                continue;
                            }
                            dp[ki * hw + i] = match l {
                                1 => -inv / pv,
                                0 => inv / (1.0 - pv),
                                _ => 0.0,
                            };
                        }
                    }
                }
                accumulate(
                    grads,
                    *probs,
                    ArrayD::from_shape_vec(IxDyn(&shape), dp).unwrap(),
                    self,
                );
            }
            Op::Gcrf { probs, kernel } => {
                let shape = self.nodes[*probs].data.shape().to_vec();
                let (k, h, w) = (shape[0], shape[1], shape[2]);
                let hw = h * w;
                let noff = kernel.offsets.len();
                let mut dp = vec![0.0; k * hw];
                if kernel.n_pairs > 0 {
                    let p = self.nodes[*probs].data.as_slice().unwrap();
                    let gv = g.iter().copied().next().unwrap();
                    let inv = gv / (k * kernel.n_pairs) as f64;
                    for ki in 0..k {
                        let pk = &p[ki * hw..(ki + 1) * hw];
                        let dpk = &mut dp[ki * hw..(ki + 1) * hw];
                        for y in 0..h {
                            for x in 0..w {
                                let i = y * w + x;
                                for (oi, &(dy, dx)) in kernel.offsets.iter().enumerate() {
                                    let kv = kernel.weights[i * noff + oi];
                                    if kv == 0.0 {
                                        continue;
                                    }
                                    let j = (y as isize + dy) as usize * w
                                        + (x as isize + dx) as usize;
                                    // ordered pair (i,j): d/dp_i and d/dp_j
                                    dpk[i] += inv * kv * (1.0 - 2.0 * pk[j]);
                                    dpk[j] += inv * kv * (1.0 - 2.0 * pk[i]);
                                }
                            }
                        }
                    }
                }
                accumulate(
                    grads,
                    *probs,
                    ArrayD::from_shape_vec(IxDyn(&shape), dp).unwrap(),
                    self,
                );
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: usize,
        weight: usize,
        stride: usize,
        out: &ArrayD<f64>,
        g: &ArrayD<f64>,
        grads: &mut [Option<ArrayD<f64>>],
    ) {
        let ishape = self.nodes[input].data.shape().to_vec();
        let wshape = self.nodes[weight].data.shape().to_vec();
        let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (co, kh) = (wshape[0], wshape[2]);
        let pad = kh / 2;
        let oshape = out.shape();
        let (ho, wo) = (oshape[1], oshape[2]);
        let cols = im2col(
            self.nodes[input].data.as_slice().unwrap(),
            ci,
            h,
            w,
            kh,
            stride,
            pad,
            ho,
            wo,
        );
        let g2 = as2_shaped(g, co, ho * wo);
        // dW = g2 . cols^T; dot may return an F-layout result, so restore
        // logical order before reinterpreting the buffer as the weight shape.
        let dw = standard(g2.dot(&cols.t()).into_dyn());
        accumulate(
            grads,
            weight,
            ArrayD::from_shape_vec(IxDyn(&wshape), dw.into_raw_vec_and_offset().0).unwrap(),
            self,
        );
        // dCols = W^T . g2, then scatter back
        let w2 = as2_shaped(&self.nodes[weight].data, co, ci * kh * kh);
        let dcols = w2.t().dot(&g2);
        let mut dinput = vec![0.0; ci * h * w];
        let dcs = dcols.as_slice().unwrap();
        let mut row = 0usize;
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kh {
                    let rbase = row * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dinput[c * h * w + iy as usize * w + ix as usize] +=
                                dcs[rbase + oy * wo + ox];
                        }
                    }
                    row += 1;
                }
            }
        }
        accumulate(
            grads,
            input,
            ArrayD::from_shape_vec(IxDyn(&ishape), dinput).unwrap(),
            self,
        );
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: usize, delta: ArrayD<f64>, _tape: &Tape) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(standard(delta)),
    }
}

/// Rebuilds an array in C layout if needed; every node and gradient is kept
/// C-contiguous so ops can read raw slices.
fn standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.shape().to_vec();
        let v: Vec<f64> = a.iter().copied().collect();
        ArrayD::from_shape_vec(IxDyn(&shape), v).unwrap()
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

/// Views any contiguous array as a `rows x cols` matrix.
fn as2_shaped(a: &ArrayD<f64>, rows: usize, cols: usize) -> ndarray::ArrayView2<'_, f64> {
    ndarray::ArrayView2::from_shape((rows, cols), a.as_slice().unwrap()).unwrap()
}

/// `(i0, i1, frac)` source taps per output index for x2 bilinear upsampling
/// with half-pixel centers.
fn bilinear_axis_table(n: usize) -> Vec<(usize, usize, f64)> {
    let mut tab = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let i0f = src.floor();
        let frac = src - i0f;
        let i0 = i0f.max(0.0) as usize;
        let i0 = i0.min(n - 1);
        let i1 = ((i0f as isize + 1).max(0) as usize).min(n - 1);
        tab.push((i0, i1, frac));
    }
    tab
}

fn im2col(
    input: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array2<f64> {
    let mut cols = ndarray::Array2::<f64>::zeros((ci * k * k, ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    let mut row = 0usize;
    for c in 0..ci {
        let ibase = c * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let rbase = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ibase + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[rbase + oy * wo + ox] = input[src + ix as usize];
                    }
                }
                row += 1;
            }
        }
    }
    cols
}
