//! Slice-level forward/backward kernels. Loop orders are fixed so results
//! are bitwise reproducible.

use crate::tensor::{gemm, MatRef, Scalar};

/// Geometry of one 2-D cross-correlation over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `None` when the dilated kernel does not fit the padded input.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Option<Self> {
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || w + 2 * padding < span_w || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            dilation,
            out_h: (h + 2 * padding - span_h) / stride + 1,
            out_w: (w + 2 * padding - span_w) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1 kernel, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    #[inline]
    fn src(&self, o: usize, k: usize) -> Option<usize> {
        let v = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (v >= 0).then_some(v as usize)
    }
}

/// Unfold `x` (`channels × h × w`) into `cols` (`channels·kh·kw × out_h·out_w`).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ki).filter(|&iy| iy < g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kj) {
                                    Some(ix) if ix < g.w => src[ix],
                                    _ => T::zero(),
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncol = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    if let Some(iy) = g.src(oy, ki).filter(|&iy| iy < g.h) {
                        let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = g.src(ox, kj).filter(|&ix| ix < g.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Hyper-parameters of a grouped, dilated 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn same(dilation: usize) -> Self {
        Self {
            padding: dilation,
            dilation,
            ..Self::default()
        }
    }

    pub fn padded(padding: usize) -> Self {
        Self {
            padding,
            ..Self::default()
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            ..Self::default()
        }
    }

    pub fn depthwise(channels: usize, padding: usize) -> Self {
        Self {
            padding,
            groups: channels,
            ..Self::default()
        }
    }
}

/// Shapes of a validated conv2d: batch, in/out channels, per-group geometry.
#[derive(Clone, Copy, Debug)]
pub struct ConvPlan {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub geom: ConvGeom,
}

impl ConvPlan {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    pub fn out_len(&self) -> usize {
        self.batch * self.cout * self.geom.col_cols()
    }
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.geom.col_cols() * self.geom.col_rows()) as u64
    }

    fn path(&self) -> ConvPath {
        let g = &self.geom;
        if g.stride != 1 || g.is_pointwise() {
            ConvPath::Im2col
        } else if self.groups == 1 && self.cin >= SHIFTED_MIN_CHANNELS {
            ConvPath::Shifted
        } else if self.groups == self.cin && self.groups == self.cout {
            ConvPath::Depthwise
        } else {
            ConvPath::Im2col
        }
    }
}

/// Below this many input channels the per-tap GEMMs are too thin to beat im2col.
const SHIFTED_MIN_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvPath {
    Im2col,
    /// One GEMM per kernel tap over a zero-padded copy of the input.
    Shifted,
    Depthwise,
}

/// Padded layout for the shifted path. Outputs are computed on rows of
/// the padded width; the trailing `pw - out_w` columns of each row are
/// discarded. Planes are spaced so that no tap's view of one channel
/// reaches the next.
struct Padded {
    pw: usize,
    plane: usize,
    wide: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let pw = g.w + 2 * g.padding;
        let ph = g.h + 2 * g.padding;
        let span_w = g.dilation * (g.kw - 1) + 1;
        Self {
            pw,
            plane: ph * pw + span_w,
            wide: g.out_h * pw,
        }
    }

    fn tap(&self, g: &ConvGeom, ki: usize, kj: usize) -> usize {
        ki * g.dilation * self.pw + kj * g.dilation
    }
}

fn pad_into<T: Scalar>(x: &[T], g: &ConvGeom, lay: &Padded, channels: usize, buf: &mut [T]) {
    buf.fill(T::zero());
    for c in 0..channels {
        for iy in 0..g.h {
            let dst = c * lay.plane + (iy + g.padding) * lay.pw + g.padding;
            buf[dst..dst + g.w].copy_from_slice(&x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w]);
        }
    }
}

fn shifted_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, plan: &ConvPlan) -> Vec<T> {
    let g = plan.geom;
    let lay = Padded::new(&g);
    let (cin, cout) = (plan.cin, plan.cout);
    let taps = g.kh * g.kw;
    let ncol = g.col_cols();
    let mut xp = vec![T::zero(); cin * lay.plane];
    let mut wide = vec![T::zero(); cout * lay.wide];
    let mut out = vec![T::zero(); plan.out_len()];
    for b in 0..plan.batch {
        pad_into(
            &x[b * cin * g.h * g.w..(b + 1) * cin * g.h * g.w],
            &g,
            &lay,
            cin,
            &mut xp,
        );
        wide.fill(T::zero());
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let start = lay.tap(&g, ki, kj);
                // SAFETY: the views stay inside `w`, `xp` and `wide` by construction of `Padded`.
                unsafe {
                    T::gemm_raw(
                        cout,
                        cin,
                        lay.wide,
                        T::one(),
                        w.as_ptr().add(ki * g.kw + kj),
                        (cin * taps) as isize,
                        taps as isize,
                        xp.as_ptr().add(start),
                        lay.plane as isize,
                        1,
                        T::one(),
                        wide.as_mut_ptr(),
                        lay.wide as isize,
                        1,
                    );
                }
            }
        }
        for co in 0..cout {
            let bv = bias.map_or(T::zero(), |bs| bs[co]);
            let dst = &mut out[(b * cout + co) * ncol..(b * cout + co + 1) * ncol];
            for oy in 0..g.out_h {
                let src = &wide[co * lay.wide + oy * lay.pw..co * lay.wide + oy * lay.pw + g.out_w];
                for (d, &s) in dst[oy * g.out_w..(oy + 1) * g.out_w].iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
    }
    out
}

fn shifted_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    plan: &ConvPlan,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let g = plan.geom;
    let lay = Padded::new(&g);
    let (cin, cout) = (plan.cin, plan.cout);
    let taps = g.kh * g.kw;
    let ncol = g.col_cols();
    let hw = g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut xp = vec![T::zero(); cin * lay.plane];
    let mut xt = if need.1 {
        vec![T::zero(); cin * lay.plane]
    } else {
        Vec::new()
    };
    let mut dxp = vec![T::zero(); cin * lay.plane];
    let mut dyw = vec![T::zero(); cout * lay.wide];
    for b in 0..plan.batch {
        for co in 0..cout {
            for oy in 0..g.out_h {
                let src = &dy[(b * cout + co) * ncol + oy * g.out_w..(b * cout + co) * ncol + (oy + 1) * g.out_w];
                dyw[co * lay.wide + oy * lay.pw..co * lay.wide + oy * lay.pw + g.out_w].copy_from_slice(src);
            }
        }
        if let Some(dw) = dw.as_mut() {
            pad_into(&x[b * cin * hw..(b + 1) * cin * hw], &g, &lay, cin, &mut xp);
            // channels-last copy so each tap's view is a row-major [positions, cin] block
            for c in 0..cin {
                for (j, &v) in xp[c * lay.plane..(c + 1) * lay.plane].iter().enumerate() {
                    xt[j * cin + c] = v;
                }
            }
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let start = lay.tap(&g, ki, kj);
                    // SAFETY: see `shifted_forward`; garbage columns of `dyw` are zero.
                    unsafe {
                        T::gemm_raw(
                            cout,
                            lay.wide,
                            cin,
                            T::one(),
                            dyw.as_ptr(),
                            lay.wide as isize,
                            1,
                            xt.as_ptr().add(start * cin),
                            cin as isize,
                            1,
                            T::one(),
                            dw.as_mut_ptr().add(ki * g.kw + kj),
                            (cin * taps) as isize,
                            taps as isize,
                        );
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dxp.fill(T::zero());
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let start = lay.tap(&g, ki, kj);
                    // SAFETY: rows of the destination view are `plane` apart and
                    // each spans less than `plane`, so they never alias.
                    unsafe {
                        T::gemm_raw(
                            cin,
                            cout,
                            lay.wide,
                            T::one(),
                            w.as_ptr().add(ki * g.kw + kj),
                            taps as isize,
                            (cin * taps) as isize,
                            dyw.as_ptr(),
                            lay.wide as isize,
                            1,
                            T::one(),
                            dxp.as_mut_ptr().add(start),
                            lay.plane as isize,
                            1,
                        );
                    }
                }
            }
            for c in 0..cin {
                for iy in 0..g.h {
                    let src = c * lay.plane + (iy + g.padding) * lay.pw + g.padding;
                    let dst = (b * cin + c) * hw + iy * g.w;
                    for (d, &s) in dx[dst..dst + g.w].iter_mut().zip(&dxp[src..src + g.w]) {
                        *d += s;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Output columns `ox` whose input column `ox + kj·d - p` lies inside the
/// row, or `None` when no column does.
fn valid_cols(g: &ConvGeom, kj: usize) -> Option<(usize, usize)> {
    let off = kj * g.dilation;
    let lo = g.padding.saturating_sub(off);
    let hi = (g.w + g.padding).saturating_sub(off).min(g.out_w);
    (lo < hi).then_some((lo, hi))
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, plan: &ConvPlan) -> Vec<T> {
    let g = plan.geom;
    let (hw, ncol, taps) = (g.h * g.w, g.col_cols(), g.kh * g.kw);
    let mut out = vec![T::zero(); plan.out_len()];
    for b in 0..plan.batch {
        for c in 0..plan.cout {
            let xs = &x[(b * plan.cin + c) * hw..(b * plan.cin + c + 1) * hw];
            let os = &mut out[(b * plan.cout + c) * ncol..(b * plan.cout + c + 1) * ncol];
            let bv = bias.map_or(T::zero(), |bs| bs[c]);
            os.fill(bv);
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = w[c * taps + ki * g.kw + kj];
                    let Some((lo, hi)) = valid_cols(&g, kj) else { continue };
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ki).filter(|&iy| iy < g.h) else {
                            continue;
                        };
                        let ix0 = lo + kj * g.dilation - g.padding;
                        let src = &xs[iy * g.w + ix0..iy * g.w + ix0 + (hi - lo)];
                        for (o, &v) in os[oy * g.out_w + lo..oy * g.out_w + hi].iter_mut().zip(src) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    plan: &ConvPlan,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let g = plan.geom;
    let (hw, ncol, taps) = (g.h * g.w, g.col_cols(), g.kh * g.kw);
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    for b in 0..plan.batch {
        for c in 0..plan.cout {
            let xoff = (b * plan.cin + c) * hw;
            let dys = &dy[(b * plan.cout + c) * ncol..(b * plan.cout + c + 1) * ncol];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wi = c * taps + ki * g.kw + kj;
                    let Some((lo, hi)) = valid_cols(&g, kj) else { continue };
                    let ix0 = lo + kj * g.dilation - g.padding;
                    let mut acc = T::zero();
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ki).filter(|&iy| iy < g.h) else {
                            continue;
                        };
                        let drow = &dys[oy * g.out_w + lo..oy * g.out_w + hi];
                        let at = xoff + iy * g.w + ix0;
                        if dw.is_some() {
                            for (&d, &v) in drow.iter().zip(&x[at..at + (hi - lo)]) {
                                acc += d * v;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wv = w[wi];
                            for (o, &d) in dx[at..at + (hi - lo)].iter_mut().zip(drow) {
                                *o += wv * d;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, plan: &ConvPlan) -> Vec<T> {
    match plan.path() {
        ConvPath::Shifted => shifted_forward(x, w, bias, plan),
        ConvPath::Depthwise => depthwise_forward(x, w, bias, plan),
        ConvPath::Im2col => conv2d_forward_im2col(x, w, bias, plan),
    }
}

/// Reference path: unfold every image with [`im2col`] and multiply.
pub fn conv2d_forward_im2col<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, plan: &ConvPlan) -> Vec<T> {
    let g = plan.geom;
    let (cin_g, cout_g) = (plan.cin_g(), plan.cout_g());
    let hw_in = g.h * g.w;
    let ncol = g.col_cols();
    let krows = g.col_rows();
    let mut out = vec![T::zero(); plan.out_len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); krows * ncol]
    };
    for b in 0..plan.batch {
        for grp in 0..plan.groups {
            let xs = &x[(b * plan.cin + grp * cin_g) * hw_in..(b * plan.cin + (grp + 1) * cin_g) * hw_in];
            let col_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let ws = &w[grp * cout_g * krows..(grp + 1) * cout_g * krows];
            let os = &mut out[(b * plan.cout + grp * cout_g) * ncol..(b * plan.cout + (grp + 1) * cout_g) * ncol];
            gemm(
                MatRef::new(ws, cout_g, krows),
                MatRef::new(col_ref, krows, ncol),
                T::zero(),
                os,
            );
        }
        if let Some(bias) = bias {
            for co in 0..plan.cout {
                let bv = bias[co];
                for v in &mut out[(b * plan.cout + co) * ncol..(b * plan.cout + co + 1) * ncol] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of conv2d. Returns `(dx, dw, db)`, each only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    plan: &ConvPlan,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (dx, dw) = match plan.path() {
        ConvPath::Shifted => shifted_backward(x, w, dy, plan, need),
        ConvPath::Depthwise => depthwise_backward(x, w, dy, plan, need),
        ConvPath::Im2col => {
            let (dx, dw, db) = conv2d_backward_im2col(x, w, dy, plan, need);
            return (dx, dw, db);
        }
    };
    (dx, dw, need.2.then(|| bias_grad(dy, plan)))
}

fn bias_grad<T: Scalar>(dy: &[T], plan: &ConvPlan) -> Vec<T> {
    let ncol = plan.geom.col_cols();
    let mut db = vec![T::zero(); plan.cout];
    for b in 0..plan.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            for &v in &dy[(b * plan.cout + co) * ncol..(b * plan.cout + co + 1) * ncol] {
                *acc += v;
            }
        }
    }
    db
}

#[allow(clippy::type_complexity)]
pub fn conv2d_backward_im2col<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    plan: &ConvPlan,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let g = plan.geom;
    let (cin_g, cout_g) = (plan.cin_g(), plan.cout_g());
    let hw_in = g.h * g.w;
    let ncol = g.col_cols();
    let krows = g.col_rows();
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); plan.cout]);
    let mut cols = vec![T::zero(); krows * ncol];
    for b in 0..plan.batch {
        for grp in 0..plan.groups {
            let xoff = (b * plan.cin + grp * cin_g) * hw_in;
            let xs = &x[xoff..xoff + cin_g * hw_in];
            let dys = &dy[(b * plan.cout + grp * cout_g) * ncol..(b * plan.cout + (grp + 1) * cout_g) * ncol];
            let ws = &w[grp * cout_g * krows..(grp + 1) * cout_g * krows];
            if let Some(dw) = dw.as_mut() {
                let col_ref: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut cols);
                    &cols
                };
                gemm(
                    MatRef::new(dys, cout_g, ncol),
                    MatRef::t(col_ref, ncol, krows),
                    T::one(),
                    &mut dw[grp * cout_g * krows..(grp + 1) * cout_g * krows],
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[xoff..xoff + cin_g * hw_in];
                if g.is_pointwise() {
                    gemm(
                        MatRef::t(ws, krows, cout_g),
                        MatRef::new(dys, cout_g, ncol),
                        T::one(),
                        dxs,
                    );
                } else {
                    gemm(
                        MatRef::t(ws, krows, cout_g),
                        MatRef::new(dys, cout_g, ncol),
                        T::zero(),
                        &mut cols,
                    );
                    col2im(&cols, &g, dxs);
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                for &v in &dy[(b * plan.cout + co) * ncol..(b * plan.cout + co + 1) * ncol] {
                    *acc += v;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Shapes of a transposed convolution with weight `[cin, cout, kh, kw]`.
/// `geom` describes the adjoint convolution: its input is the transposed
/// conv's output (`cout` channels) and its output grid is the transposed
/// conv's input grid.
#[derive(Clone, Copy, Debug)]
pub struct ConvTPlan {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl ConvTPlan {
    pub fn out_len(&self) -> usize {
        self.batch * self.cout * self.geom.h * self.geom.w
    }
}

pub fn conv_t_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, plan: &ConvTPlan) -> Vec<T> {
    let g = plan.geom;
    let hw_in = g.col_cols();
    let hw_out = g.h * g.w;
    let krows = g.col_rows();
    let mut out = vec![T::zero(); plan.out_len()];
    let mut cols = vec![T::zero(); krows * hw_in];
    for b in 0..plan.batch {
        let xs = &x[b * plan.cin * hw_in..(b + 1) * plan.cin * hw_in];
        gemm(
            MatRef::t(w, krows, plan.cin),
            MatRef::new(xs, plan.cin, hw_in),
            T::zero(),
            &mut cols,
        );
        let os = &mut out[b * plan.cout * hw_out..(b + 1) * plan.cout * hw_out];
        col2im(&cols, &g, os);
        if let Some(bias) = bias {
            for co in 0..plan.cout {
                for v in &mut os[co * hw_out..(co + 1) * hw_out] {
                    *v += bias[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn conv_t_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    plan: &ConvTPlan,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let g = plan.geom;
    let hw_in = g.col_cols();
    let hw_out = g.h * g.w;
    let krows = g.col_rows();
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); plan.cout]);
    let mut cols = vec![T::zero(); krows * hw_in];
    for b in 0..plan.batch {
        let dys = &dy[b * plan.cout * hw_out..(b + 1) * plan.cout * hw_out];
        if dx.is_some() || dw.is_some() {
            im2col(dys, &g, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::new(w, plan.cin, krows),
                MatRef::new(&cols, krows, hw_in),
                T::zero(),
                &mut dx[b * plan.cin * hw_in..(b + 1) * plan.cin * hw_in],
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[b * plan.cin * hw_in..(b + 1) * plan.cin * hw_in];
            gemm(
                MatRef::new(xs, plan.cin, hw_in),
                MatRef::t(&cols, hw_in, krows),
                T::one(),
                dw,
            );
        }
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                for &v in &dys[co * hw_out..(co + 1) * hw_out] {
                    *acc += v;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Source taps of a half-pixel bilinear resize along one axis.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `planes` images of `h×w` to `oh×ow`.
pub fn resize_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let ly = T::of(ly);
            let hy = T::one() - ly;
            for &(x0, x1, lx) in &tx {
                let lx = T::of(lx);
                let hx = T::one() - lx;
                let v = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
                out.push(v);
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let hx = T::one() - lx;
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * hy * hx;
                d[y0 * w + x1] += v * hy * lx;
                d[y1 * w + x0] += v * ly * hx;
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = crate::tensor::strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Walk `out` row-major, calling `f(out_index, off_a, off_b)`.
pub fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank - 1;
    let mut i = 0;
    while i < total {
        let (mut a, mut b) = (oa, ob);
        for _ in 0..out[last] {
            f(i, a, b);
            i += 1;
            a += sa[last];
            b += sb[last];
        }
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn fast_paths_match_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // (cin, cout, groups, h, w, k, padding, dilation)
        let cases = [
            (10, 4, 1, 6, 5, 3, 1, 1),
            (8, 3, 1, 7, 7, 3, 2, 2),
            (9, 1, 1, 9, 8, 7, 3, 1),
            (8, 2, 1, 4, 6, 3, 0, 1),
            (4, 4, 4, 8, 6, 5, 2, 1),
            (3, 3, 3, 5, 5, 3, 1, 1),
            (2, 2, 2, 6, 7, 3, 2, 2),
            (3, 3, 3, 4, 4, 3, 0, 1),
            (3, 3, 3, 1, 1, 5, 2, 1),
            (2, 2, 2, 2, 3, 5, 2, 1),
            (8, 2, 1, 1, 2, 3, 1, 1),
        ];
        for (cin, cout, groups, h, w, k, p, d) in cases {
            let geom = ConvGeom::new(cin / groups, h, w, k, k, 1, p, d).unwrap();
            let plan = ConvPlan {
                batch: 2,
                cin,
                cout,
                groups,
                geom,
            };
            assert_ne!(plan.path(), ConvPath::Im2col);
            let x = rand_vec(&mut rng, 2 * cin * h * w);
            let wt = rand_vec(&mut rng, cout * geom.col_rows());
            let bias = rand_vec(&mut rng, cout);
            let dy = rand_vec(&mut rng, plan.out_len());
            let fast = conv2d_forward(&x, &wt, Some(&bias), &plan);
            let slow = conv2d_forward_im2col(&x, &wt, Some(&bias), &plan);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-12);
            assert!(close(&fast, &slow), "forward {:?}", (cin, cout, groups, h, w, k, p, d));
            let need = (true, true, true);
            let (fx, fw, fb) = conv2d_backward(&x, &wt, &dy, &plan, need);
            let (sx, sw, sb) = conv2d_backward_im2col(&x, &wt, &dy, &plan, need);
            assert!(close(&fx.unwrap(), &sx.unwrap()));
            assert!(close(&fw.unwrap(), &sw.unwrap()));
            assert!(close(&fb.unwrap(), &sb.unwrap()));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| ((i * 3) % 5) as f64 - 2.0)
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn geometry_output_size() {
        let g = ConvGeom::new(1, 5, 5, 3, 3, 1, 0, 2).unwrap();
        assert_eq!((g.out_h, g.out_w), (1, 1));
        assert!(ConvGeom::new(1, 4, 4, 3, 3, 1, 0, 2).is_none());
        let g = ConvGeom::new(1, 7, 9, 3, 3, 2, 1, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 5));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4, 4], &[2, 3, 1, 1]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[4], &[2, 1]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_forward(&x, 1, 3, 4, 3, 4), x);
    }
}
