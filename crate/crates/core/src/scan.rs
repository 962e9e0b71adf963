//! Selective state-space scan.
//!
//! For every batch entry `b` and channel `d` (a "lane") the state
//! `h ∈ R^N` evolves as
//!
//! ```text
//! h_t = exp(Δ_t A_d) ⊙ h_{t-1} + Δ_t B_t x_t,    h_0 = 0
//! y_t = C_t · h_t + D_d x_t
//! ```
//!
//! Two forward implementations share one lane kernel: a sequential sweep,
//! and a chunked variant that summarizes every chunk as an affine map
//! `h -> a ⊙ h + b`, composes the maps along the lane, and then replays each
//! chunk from its boundary state. The chunked variant parallelizes over
//! `(lane, chunk)` and keeps only chunk-boundary states for backward,
//! recomputing interior states on the way back.

use crate::error::{contract_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::parallel::map_range;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_STATE_SIZE: usize = 16;
pub const DEFAULT_CHUNK: usize = 64;

/// How the recurrence is evaluated. Both produce the same values up to
/// rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Chunked(usize),
}

impl Default for ScanMode {
    fn default() -> Self {
        ScanMode::Chunked(DEFAULT_CHUNK)
    }
}

/// Inputs of one scan.
///
/// Shapes: `x`, `delta`: `[B, L, Din]`; `a`: `[Din, N]`; `b`, `c`:
/// `[B, L, N]`; `d`: `[Din]`.
#[derive(Debug, Clone)]
pub struct ScanInputs<T: Scalar> {
    pub x: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Tensor<T>,
}

/// Gradients with respect to every [`ScanInputs`] field.
#[derive(Debug, Clone)]
pub struct ScanGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub din: usize,
    pub state: usize,
}

impl ScanDims {
    fn lanes(&self) -> usize {
        self.batch * self.din
    }
}

fn check_dims(x: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize], d: &[usize]) -> Result<ScanDims> {
    if x.len() != 3 {
        return Err(dim_err!("scan: x must be [B, L, Din], got {x:?}"));
    }
    if a.len() != 2 {
        return Err(dim_err!("scan: A must be [Din, N], got {a:?}"));
    }
    let dims = ScanDims { batch: x[0], len: x[1], din: x[2], state: a[1] };
    if delta != x {
        return Err(dim_err!("scan: delta shape {delta:?} differs from x {x:?}"));
    }
    if a[0] != dims.din {
        return Err(dim_err!("scan: A has {} rows, expected Din = {}", a[0], dims.din));
    }
    let bc = [dims.batch, dims.len, dims.state];
    if b != bc || c != bc {
        return Err(dim_err!("scan: B {b:?} and C {c:?} must be {bc:?}"));
    }
    if d != [dims.din] {
        return Err(dim_err!("scan: D shape {d:?}, expected [{}]", dims.din));
    }
    Ok(dims)
}

fn check_values<T: Scalar>(delta: &[T], a: &[T]) -> Result<()> {
    if let Some(v) = delta.iter().find(|v| !(**v > T::zero()) || !v.is_finite()) {
        return Err(contract_err!("scan: step sizes must be positive and finite, found {v}"));
    }
    if let Some(v) = a.iter().find(|v| !(**v <= T::zero()) || !v.is_finite()) {
        return Err(contract_err!("scan: state matrix entries must be <= 0, found {v}"));
    }
    Ok(())
}

impl<T: Scalar> ScanInputs<T> {
    /// Checks shapes, `delta > 0` and `A <= 0`.
    pub fn validate(&self) -> Result<ScanDims> {
        let dims = check_dims(
            self.x.shape(),
            self.delta.shape(),
            self.a.shape(),
            self.b.shape(),
            self.c.shape(),
            self.d.shape(),
        )?;
        check_values(self.delta.data(), self.a.data())?;
        Ok(dims)
    }

    fn raw(&self, dims: ScanDims) -> Raw<'_, T> {
        Raw::new(dims, self.x.data(), self.delta.data(), self.a.data(), self.b.data(), self.c.data(), self.d.data())
    }
}

/// Zero-order-hold transition and Euler input matrices, both `[B, L, Din, N]`:
/// `Abar = exp(Δ A)`, `Bbar = Δ B`.
pub fn discretize_zoh<T: Scalar>(delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dims, _) = zoh_dims(delta.shape(), a.shape(), b.shape())?;
    check_values(delta.data(), a.data())?;
    Ok(zoh_forward(dims, delta.data(), a.data(), b.data()))
}

fn zoh_dims(delta: &[usize], a: &[usize], b: &[usize]) -> Result<(ScanDims, Vec<usize>)> {
    if delta.len() != 3 || a.len() != 2 || b.len() != 3 {
        return Err(dim_err!("discretize: expected delta [B, L, Din], A [Din, N], B [B, L, N]"));
    }
    let dims = ScanDims { batch: delta[0], len: delta[1], din: delta[2], state: a[1] };
    if a[0] != dims.din || b != [dims.batch, dims.len, dims.state] {
        return Err(dim_err!("discretize: inconsistent shapes delta {delta:?}, A {a:?}, B {b:?}"));
    }
    Ok((dims, vec![dims.batch, dims.len, dims.din, dims.state]))
}

fn zoh_forward<T: Scalar>(dims: ScanDims, delta: &[T], a: &[T], b: &[T]) -> (Tensor<T>, Tensor<T>) {
    let ScanDims { batch, len, din, state: n } = dims;
    let total = batch * len * din * n;
    let (mut abar, mut bbar) = (Vec::with_capacity(total), Vec::with_capacity(total));
    for bt in 0..batch * len {
        for d in 0..din {
            let dt = delta[bt * din + d];
            for k in 0..n {
                abar.push((dt * a[d * n + k]).exp());
                bbar.push(dt * b[bt * n + k]);
            }
        }
    }
    let shape = vec![batch, len, din, n];
    (Tensor::from_parts(shape.clone(), abar), Tensor::from_parts(shape, bbar))
}

/// Borrowed inputs plus lane-major copies of `x` and `delta`.
struct Raw<'a, T> {
    dims: ScanDims,
    xl: Vec<T>,
    dtl: Vec<T>,
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    d: &'a [T],
}

impl<'a, T: Scalar> Raw<'a, T> {
    fn new(dims: ScanDims, x: &[T], delta: &[T], a: &'a [T], b: &'a [T], c: &'a [T], d: &'a [T]) -> Self {
        Self { dims, xl: to_lanes(dims, x), dtl: to_lanes(dims, delta), a, b, c, d }
    }

    fn lane(&self, lane: usize) -> Lane<'_, T> {
        let ScanDims { len, din, state: n, .. } = self.dims;
        let (bi, di) = (lane / din, lane % din);
        Lane {
            n,
            x: &self.xl[lane * len..(lane + 1) * len],
            dt: &self.dtl[lane * len..(lane + 1) * len],
            a: &self.a[di * n..(di + 1) * n],
            b: &self.b[bi * len * n..(bi + 1) * len * n],
            c: &self.c[bi * len * n..(bi + 1) * len * n],
            d: self.d[di],
        }
    }
}

/// `[B, L, Din]` -> `[B, Din, L]`.
fn to_lanes<T: Scalar>(dims: ScanDims, v: &[T]) -> Vec<T> {
    let ScanDims { batch, len, din, .. } = dims;
    let mut out = vec![T::zero(); v.len()];
    for b in 0..batch {
        for t in 0..len {
            for d in 0..din {
                out[(b * din + d) * len + t] = v[(b * len + t) * din + d];
            }
        }
    }
    out
}

/// `[B, Din, L]` -> `[B, L, Din]`, from one `Vec` per lane.
fn from_lanes<T: Scalar>(dims: ScanDims, lanes: &[Vec<T>]) -> Vec<T> {
    let ScanDims { batch, len, din, .. } = dims;
    let mut out = vec![T::zero(); batch * len * din];
    for (lane, v) in lanes.iter().enumerate() {
        let (b, d) = (lane / din, lane % din);
        for (t, &val) in v.iter().enumerate() {
            out[(b * len + t) * din + d] = val;
        }
    }
    out
}

/// One `(batch, channel)` lane.
struct Lane<'a, T> {
    n: usize,
    x: &'a [T],
    dt: &'a [T],
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    d: T,
}

impl<T: Scalar> Lane<'_, T> {
    /// Advances `h` over step `t`.
    #[inline]
    fn step(&self, t: usize, h: &mut [T]) {
        let (dt, u) = (self.dt[t], self.dt[t] * self.x[t]);
        let b = &self.b[t * self.n..(t + 1) * self.n];
        for ((hk, &ak), &bk) in h.iter_mut().zip(self.a).zip(b) {
            *hk = (dt * ak).exp() * *hk + u * bk;
        }
    }

    #[inline]
    fn readout(&self, t: usize, h: &[T]) -> T {
        let c = &self.c[t * self.n..(t + 1) * self.n];
        c.iter().zip(h).map(|(&ck, &hk)| ck * hk).sum::<T>() + self.d * self.x[t]
    }

    /// Outputs for `t0..t1` starting from state `h`, which is advanced in place.
    fn forward(&self, t0: usize, t1: usize, h: &mut [T]) -> Vec<T> {
        (t0..t1)
            .map(|t| {
                self.step(t, h);
                self.readout(t, h)
            })
            .collect()
    }

    /// Affine summary `(a, b)` of steps `t0..t1`: `h_out = a ⊙ h_in + b`.
    fn summarize(&self, t0: usize, t1: usize) -> (Vec<T>, Vec<T>) {
        let mut b = vec![T::zero(); self.n];
        for t in t0..t1 {
            self.step(t, &mut b);
        }
        let total: T = self.dt[t0..t1].iter().copied().sum();
        (self.a.iter().map(|&ak| (ak * total).exp()).collect(), b)
    }

    /// Reverse sweep over `t0..t1` from start state `h0`.
    ///
    /// `carry` enters as the gradient reaching `h_{t1-1}` from later steps and
    /// leaves as the gradient reaching `h_{t0-1}`.
    fn backward(&self, t0: usize, t1: usize, h0: &[T], gy: &[T], carry: &mut [T], out: &mut LaneGrads<T>) {
        let n = self.n;
        let mut hs = vec![T::zero(); (t1 - t0) * n];
        let mut h = h0.to_vec();
        for t in t0..t1 {
            self.step(t, &mut h);
            hs[(t - t0) * n..(t - t0 + 1) * n].copy_from_slice(&h);
        }
        for t in (t0..t1).rev() {
            let (dt, xv, g) = (self.dt[t], self.x[t], gy[t]);
            let h_t = &hs[(t - t0) * n..(t - t0 + 1) * n];
            let h_prev = if t > t0 { &hs[(t - t0 - 1) * n..(t - t0) * n] } else { h0 };
            let (b, c) = (&self.b[t * n..(t + 1) * n], &self.c[t * n..(t + 1) * n]);
            let (mut gx, mut gdt) = (self.d * g, T::zero());
            for k in 0..n {
                let lam = c[k] * g + carry[k];
                let ak = (dt * self.a[k]).exp();
                out.c[t * n + k] = g * h_t[k];
                out.b[t * n + k] = lam * dt * xv;
                gx += lam * dt * b[k];
                let g_a = lam * h_prev[k] * ak;
                gdt += lam * b[k] * xv + g_a * self.a[k];
                out.a[k] += g_a * dt;
                carry[k] = ak * lam;
            }
            out.x[t] = gx;
            out.dt[t] = gdt;
            out.d += g * xv;
        }
    }
}

struct LaneGrads<T> {
    x: Vec<T>,
    dt: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    d: T,
}

impl<T: Scalar> LaneGrads<T> {
    fn new(len: usize, n: usize) -> Self {
        Self {
            x: vec![T::zero(); len],
            dt: vec![T::zero(); len],
            a: vec![T::zero(); n],
            b: vec![T::zero(); len * n],
            c: vec![T::zero(); len * n],
            d: T::zero(),
        }
    }
}

fn chunk_count(len: usize, chunk: usize) -> usize {
    len.div_ceil(chunk)
}

fn check_chunk(len: usize, chunk: usize) -> Result<()> {
    if chunk == 0 || chunk > len {
        return Err(contract_err!("scan: chunk {chunk} outside 1..={len}"));
    }
    Ok(())
}

fn forward_sequential<T: Scalar>(raw: &Raw<'_, T>) -> Vec<T> {
    let dims = raw.dims;
    let lanes = map_range(dims.lanes(), |lane| {
        let mut h = vec![T::zero(); dims.state];
        raw.lane(lane).forward(0, dims.len, &mut h)
    });
    from_lanes(dims, &lanes)
}

/// Chunk-start states of every lane, `[lane][chunk][N]` flattened.
fn boundary_states<T: Scalar>(raw: &Raw<'_, T>, chunk: usize) -> Vec<T> {
    let ScanDims { len, state: n, .. } = raw.dims;
    let chunks = chunk_count(len, chunk);
    let summaries = map_range(raw.dims.lanes() * chunks, |i| {
        let (lane, c) = (i / chunks, i % chunks);
        raw.lane(lane).summarize(c * chunk, ((c + 1) * chunk).min(len))
    });
    let mut starts = vec![T::zero(); raw.dims.lanes() * chunks * n];
    for lane in 0..raw.dims.lanes() {
        for c in 1..chunks {
            let (a, b) = &summaries[lane * chunks + c - 1];
            let base = (lane * chunks + c) * n;
            for k in 0..n {
                starts[base + k] = a[k] * starts[base - n + k] + b[k];
            }
        }
    }
    starts
}

fn forward_chunked<T: Scalar>(raw: &Raw<'_, T>, chunk: usize, starts: &[T]) -> Vec<T> {
    let ScanDims { len, state: n, .. } = raw.dims;
    let chunks = chunk_count(len, chunk);
    let pieces = map_range(raw.dims.lanes() * chunks, |i| {
        let (lane, c) = (i / chunks, i % chunks);
        let mut h = starts[i * n..(i + 1) * n].to_vec();
        raw.lane(lane).forward(c * chunk, ((c + 1) * chunk).min(len), &mut h)
    });
    let lanes: Vec<Vec<T>> = pieces.chunks(chunks).map(|p| p.concat()).collect();
    from_lanes(raw.dims, &lanes)
}

/// Runs the reverse sweep of every lane. `starts` holds chunk-start states
/// for chunked mode; `None` recomputes each lane from `h_0 = 0` in one segment.
fn backward_lanes<T: Scalar>(raw: &Raw<'_, T>, gy: &[T], chunk: usize, starts: Option<&[T]>) -> ScanGrads<T> {
    let dims = raw.dims;
    let ScanDims { batch, len, din, state: n } = dims;
    let gyl = to_lanes(dims, gy);
    let chunks = chunk_count(len, chunk);
    let zero = vec![T::zero(); n];
    let lanes = map_range(dims.lanes(), |lane| {
        let view = raw.lane(lane);
        let gy = &gyl[lane * len..(lane + 1) * len];
        let mut out = LaneGrads::new(len, n);
        let mut carry = vec![T::zero(); n];
        match starts {
            Some(starts) => {
                for c in (0..chunks).rev() {
                    let h0 = &starts[(lane * chunks + c) * n..(lane * chunks + c + 1) * n];
                    view.backward(c * chunk, ((c + 1) * chunk).min(len), h0, gy, &mut carry, &mut out);
                }
            }
            None => view.backward(0, len, &zero, gy, &mut carry, &mut out),
        }
        out
    });

    let gx = from_lanes(dims, &lanes.iter().map(|g| g.x.clone()).collect::<Vec<_>>());
    let gdt = from_lanes(dims, &lanes.iter().map(|g| g.dt.clone()).collect::<Vec<_>>());
    let mut ga = vec![T::zero(); din * n];
    let mut gd = vec![T::zero(); din];
    let mut gb = vec![T::zero(); batch * len * n];
    let mut gc = vec![T::zero(); batch * len * n];
    for (lane, g) in lanes.iter().enumerate() {
        let (bi, di) = (lane / din, lane % din);
        for k in 0..n {
            ga[di * n + k] += g.a[k];
        }
        gd[di] += g.d;
        let span = bi * len * n..(bi + 1) * len * n;
        for (o, &v) in gb[span.clone()].iter_mut().zip(&g.b) {
            *o += v;
        }
        for (o, &v) in gc[span].iter_mut().zip(&g.c) {
            *o += v;
        }
    }
    let s3 = vec![batch, len, din];
    let sn = vec![batch, len, n];
    ScanGrads {
        x: Tensor::from_parts(s3.clone(), gx),
        delta: Tensor::from_parts(s3, gdt),
        a: Tensor::from_parts(vec![din, n], ga),
        b: Tensor::from_parts(sn.clone(), gb),
        c: Tensor::from_parts(sn, gc),
        d: Tensor::from_parts(vec![din], gd),
    }
}

/// Reference implementation: one sequential sweep per lane.
pub fn scan_sequential<T: Scalar>(inputs: &ScanInputs<T>) -> Result<Tensor<T>> {
    let dims = inputs.validate()?;
    let y = forward_sequential(&inputs.raw(dims));
    Ok(Tensor::from_parts(inputs.x.shape().to_vec(), y))
}

/// Chunked evaluation with `1 <= chunk <= L`. A single chunk runs the
/// sequential path.
pub fn scan_chunked<T: Scalar>(inputs: &ScanInputs<T>, chunk: usize) -> Result<Tensor<T>> {
    let dims = inputs.validate()?;
    check_chunk(dims.len, chunk)?;
    let raw = inputs.raw(dims);
    let y = if chunk == dims.len {
        forward_sequential(&raw)
    } else {
        forward_chunked(&raw, chunk, &boundary_states(&raw, chunk))
    };
    Ok(Tensor::from_parts(inputs.x.shape().to_vec(), y))
}

/// Gradients of `sum(y ⊙ y_grad)` with respect to all inputs.
pub fn scan_backward<T: Scalar>(inputs: &ScanInputs<T>, y_grad: &Tensor<T>, mode: ScanMode) -> Result<ScanGrads<T>> {
    let dims = inputs.validate()?;
    if y_grad.shape() != inputs.x.shape() {
        return Err(dim_err!("scan_backward: y_grad {:?} vs x {:?}", y_grad.shape(), inputs.x.shape()));
    }
    let raw = inputs.raw(dims);
    Ok(match mode {
        ScanMode::Sequential => backward_lanes(&raw, y_grad.data(), dims.len, None),
        ScanMode::Chunked(chunk) => {
            check_chunk(dims.len, chunk)?;
            let starts = boundary_states(&raw, chunk);
            backward_lanes(&raw, y_grad.data(), chunk, Some(&starts))
        }
    })
}

/// All hidden states `h_t`, `[B, L, Din, N]`, from the sequential sweep.
pub fn scan_states<T: Scalar>(inputs: &ScanInputs<T>) -> Result<Tensor<T>> {
    let dims = inputs.validate()?;
    let ScanDims { batch, len, din, state: n } = dims;
    let raw = inputs.raw(dims);
    let lanes = map_range(dims.lanes(), |lane| {
        let view = raw.lane(lane);
        let mut h = vec![T::zero(); n];
        let mut hs = Vec::with_capacity(len * n);
        for t in 0..len {
            view.step(t, &mut h);
            hs.extend_from_slice(&h);
        }
        hs
    });
    let mut out = vec![T::zero(); batch * len * din * n];
    for (lane, hs) in lanes.iter().enumerate() {
        let (b, d) = (lane / din, lane % din);
        for t in 0..len {
            let o = ((b * len + t) * din + d) * n;
            out[o..o + n].copy_from_slice(&hs[t * n..(t + 1) * n]);
        }
    }
    Ok(Tensor::from_parts(vec![batch, len, din, n], out))
}

impl<T: Scalar> Graph<T> {
    /// Differentiable selective scan; see [`ScanInputs`] for shapes.
    ///
    /// `ScanMode::Chunked(c)` with `c > L` is clamped to one chunk.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let dims =
            check_dims(self.shape(x), self.shape(delta), self.shape(a), self.shape(b), self.shape(c), self.shape(d))?;
        check_values(self.value(delta).data(), self.value(a).data())?;
        let chunk = match mode {
            ScanMode::Sequential => dims.len,
            ScanMode::Chunked(0) => return Err(contract_err!("scan: chunk must be >= 1")),
            ScanMode::Chunked(c) => c.min(dims.len),
        };
        let raw = Raw::new(
            dims,
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
        );
        let (y, starts) = if chunk == dims.len {
            (forward_sequential(&raw), None)
        } else {
            let starts = boundary_states(&raw, chunk);
            (forward_chunked(&raw, chunk, &starts), Some(starts))
        };
        let out = Tensor::from_parts(vec![dims.batch, dims.len, dims.din], y);
        Ok(self.op(
            out,
            &[x, delta, a, b, c, d],
            Box::new(move |ctx| {
                let i = &ctx.inputs;
                let raw = Raw::new(dims, i[0].data(), i[1].data(), i[2].data(), i[3].data(), i[4].data(), i[5].data());
                let g = backward_lanes(&raw, ctx.grad.data(), chunk, starts.as_deref());
                vec![Some(g.x), Some(g.delta), Some(g.a), Some(g.b), Some(g.c), Some(g.d)]
            }),
        ))
    }

    /// Differentiable [`discretize_zoh`]: returns `(Abar, Bbar)`.
    pub fn discretize_zoh(&mut self, delta: Var, a: Var, b: Var) -> Result<(Var, Var)> {
        let (dims, _) = zoh_dims(self.shape(delta), self.shape(a), self.shape(b))?;
        check_values(self.value(delta).data(), self.value(a).data())?;
        let (abar, bbar) = zoh_forward(dims, self.value(delta).data(), self.value(a).data(), self.value(b).data());
        let ScanDims { batch, len, din, state: n } = dims;
        let abar_saved = abar.data().to_vec();
        let abar_var = self.op(
            abar,
            &[delta, a],
            Box::new(move |ctx| {
                let (g, dl, av) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gdl = vec![T::zero(); batch * len * din];
                let mut ga = vec![T::zero(); din * n];
                for bt in 0..batch * len {
                    for d in 0..din {
                        for k in 0..n {
                            let i = (bt * din + d) * n + k;
                            let ge = g[i] * abar_saved[i];
                            gdl[bt * din + d] += ge * av[d * n + k];
                            ga[d * n + k] += ge * dl[bt * din + d];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![batch, len, din], gdl)), Some(Tensor::from_parts(vec![din, n], ga))]
            }),
        );
        let bbar_var = self.op(
            bbar,
            &[delta, b],
            Box::new(move |ctx| {
                let (g, dl, bv) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gdl = vec![T::zero(); batch * len * din];
                let mut gb = vec![T::zero(); batch * len * n];
                for bt in 0..batch * len {
                    for d in 0..din {
                        for k in 0..n {
                            let i = (bt * din + d) * n + k;
                            gdl[bt * din + d] += g[i] * bv[bt * n + k];
                            gb[bt * n + k] += g[i] * dl[bt * din + d];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(vec![batch, len, din], gdl)),
                    Some(Tensor::from_parts(vec![batch, len, n], gb)),
                ]
            }),
        );
        Ok((abar_var, bbar_var))
    }
}

/// Seeded random inputs satisfying the scan invariants.
pub fn random_inputs<T: Scalar>(dims: ScanDims, seed: u64) -> ScanInputs<T> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ScanDims { batch, len, din, state: n } = dims;
    let mut gen =
        |shape: Vec<usize>, lo: f64, hi: f64| Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)));
    ScanInputs {
        x: gen(vec![batch, len, din], -1.0, 1.0),
        delta: gen(vec![batch, len, din], 0.01, 0.5),
        a: gen(vec![din, n], -2.0, -0.1),
        b: gen(vec![batch, len, n], -1.0, 1.0),
        c: gen(vec![batch, len, n], -1.0, 1.0),
        d: gen(vec![din], -1.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(batch: usize, len: usize, din: usize, state: usize) -> ScanDims {
        ScanDims { batch, len, din, state }
    }

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn zoh_closed_form() {
        let (abar, bbar) =
            discretize_zoh(&t(vec![1, 1, 1], &[1.0]), &t(vec![1, 1], &[-1.0]), &t(vec![1, 1, 1], &[1.0])).unwrap();
        assert!((abar.item() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(bbar.item(), 1.0);
        let (abar, _) =
            discretize_zoh(&t(vec![1, 1, 1], &[0.7]), &t(vec![1, 1], &[0.0]), &t(vec![1, 1, 1], &[1.0])).unwrap();
        assert_eq!(abar.item(), 1.0);
        let (abar, bbar) =
            discretize_zoh(&t(vec![1, 1, 1], &[1e-12]), &t(vec![1, 1], &[-3.0]), &t(vec![1, 1, 1], &[2.0])).unwrap();
        assert!((abar.item() - 1.0).abs() < 1e-11 && bbar.item() < 1e-11);
    }

    #[test]
    fn nonpositive_delta_rejected() {
        let r = discretize_zoh(&t(vec![1, 1, 1], &[0.0]), &t(vec![1, 1], &[-1.0]), &t(vec![1, 1, 1], &[1.0]));
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn cumulative_sum_case() {
        let inputs = ScanInputs {
            x: t(vec![1, 3, 1], &[1.0, 1.0, 1.0]),
            delta: Tensor::ones(vec![1, 3, 1]),
            a: Tensor::zeros(vec![1, 1]),
            b: Tensor::ones(vec![1, 3, 1]),
            c: Tensor::ones(vec![1, 3, 1]),
            d: Tensor::zeros(vec![1]),
        };
        assert_eq!(scan_sequential(&inputs).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(scan_chunked(&inputs, 1).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn single_step_closed_form() {
        let inp = random_inputs::<f64>(dims(1, 1, 2, 3), 4);
        let y = scan_sequential(&inp).unwrap();
        for d in 0..2 {
            let dt = inp.delta.data()[d];
            let h: f64 = (0..3).map(|k| inp.c.data()[k] * dt * inp.b.data()[k] * inp.x.data()[d]).sum();
            assert!((y.data()[d] - (h + inp.d.data()[d] * inp.x.data()[d])).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let mut inp = random_inputs::<f64>(dims(2, 9, 3, 4), 1);
        inp.x = Tensor::zeros(vec![2, 9, 3]);
        assert!(scan_sequential(&inp).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunked_matches_sequential() {
        let inp = random_inputs::<f64>(dims(2, 64, 4, 8), 11);
        let y = scan_sequential(&inp).unwrap();
        for chunk in [1, 5, 63, 64] {
            assert!(scan_chunked(&inp, chunk).unwrap().max_abs_diff(&y) < 1e-12, "chunk {chunk}");
        }
        assert_eq!(scan_chunked(&inp, 64).unwrap(), y);
        assert!(scan_chunked(&inp, 0).is_err());
        assert!(scan_chunked(&inp, 65).is_err());
    }

    #[test]
    fn affine_composition() {
        let inp = random_inputs::<f64>(dims(1, 2, 1, 3), 2);
        let raw = inp.raw(inp.validate().unwrap());
        let lane = raw.lane(0);
        let (a1, b1) = lane.summarize(0, 1);
        let (a2, b2) = lane.summarize(1, 2);
        let (a12, b12) = lane.summarize(0, 2);
        let h = [0.3, -0.7, 1.1];
        for k in 0..3 {
            let two_step = a2[k] * (a1[k] * h[k] + b1[k]) + b2[k];
            assert!((two_step - (a12[k] * h[k] + b12[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn skip_only_gradient() {
        let mut inp = random_inputs::<f64>(dims(1, 5, 2, 3), 3);
        inp.c = Tensor::zeros(vec![1, 5, 3]);
        let gy = Tensor::from_fn(vec![1, 5, 2], |i| i as f64 - 4.0);
        let g = scan_backward(&inp, &gy, ScanMode::Sequential).unwrap();
        for i in 0..10 {
            assert_eq!(g.x.data()[i], inp.d.data()[i % 2] * gy.data()[i]);
        }
    }

    #[test]
    fn chunked_backward_matches_sequential() {
        let inp = random_inputs::<f64>(dims(2, 23, 3, 4), 5);
        let gy = Tensor::from_fn(vec![2, 23, 3], |i| ((i * 13) % 7) as f64 - 3.0);
        let s = scan_backward(&inp, &gy, ScanMode::Sequential).unwrap();
        for chunk in [1, 4, 23] {
            let c = scan_backward(&inp, &gy, ScanMode::Chunked(chunk)).unwrap();
            for (p, q) in [(&s.x, &c.x), (&s.delta, &c.delta), (&s.a, &c.a), (&s.b, &c.b), (&s.c, &c.c), (&s.d, &c.d)] {
                assert!(p.max_abs_diff(q) < 1e-10, "chunk {chunk}");
            }
        }
    }

    #[test]
    fn graph_op_matches_raw_kernels() {
        let inp = random_inputs::<f64>(dims(1, 10, 2, 3), 9);
        let mut g = Graph::new();
        let mut vars = Vec::new();
        for t in [&inp.x, &inp.delta, &inp.a, &inp.b, &inp.c, &inp.d] {
            vars.push(g.param(t.clone()));
        }
        let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], ScanMode::Chunked(3)).unwrap();
        assert!(g.value(y).max_abs_diff(&scan_sequential(&inp).unwrap()) < 1e-12);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let raw = scan_backward(&inp, &Tensor::ones(vec![1, 10, 2]), ScanMode::Sequential).unwrap();
        assert!(g.grad(vars[1]).unwrap().max_abs_diff(&raw.delta) < 1e-10);
        assert!(g.grad(vars[2]).unwrap().max_abs_diff(&raw.a) < 1e-10);
    }

    #[test]
    fn states_match_zoh_recurrence() {
        let inp = random_inputs::<f64>(dims(1, 6, 2, 2), 8);
        let hs = scan_states(&inp).unwrap();
        let (abar, bbar) = discretize_zoh(&inp.delta, &inp.a, &inp.b).unwrap();
        let mut h = [0.0; 4];
        for t in 0..6 {
            for d in 0..2 {
                for k in 0..2 {
                    let i = (t * 2 + d) * 2 + k;
                    h[d * 2 + k] = abar.data()[i] * h[d * 2 + k] + bbar.data()[i] * inp.x.data()[t * 2 + d];
                    assert!((hs.data()[i] - h[d * 2 + k]).abs() < 1e-14);
                }
            }
        }
    }
}
