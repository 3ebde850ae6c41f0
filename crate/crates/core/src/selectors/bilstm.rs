//! Bidirectional LSTM selector with hand-written backpropagation through
//! time.
//!
//! Parameters live in one flat `f64` vector. Block order (also the order of
//! the checkpoint file):
//!
//! ```text
//! w_in    H x D     input projection
//! b_in    H
//! w_fwd   4H x H    forward direction, projected input -> gates
//! u_fwd   4H x H    forward direction, recurrent
//! b_fwd   4H
//! w_bwd   4H x H    backward direction
//! u_bwd   4H x H
//! b_bwd   4H
//! head_w  2H        scoring head over [h_fwd; h_bwd]
//! head_b  1
//! ```
//!
//! Gate rows are ordered input, forget, cell candidate, output.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, SeededRng};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SELW1";

#[derive(Clone, Copy, Debug, PartialEq)]
struct DirOffsets {
    w: usize,
    u: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layout {
    d: usize,
    h: usize,
    w_in: usize,
    b_in: usize,
    dirs: [DirOffsets; 2],
    head_w: usize,
    head_b: usize,
    len: usize,
}

impl Layout {
    fn new(d: usize, h: usize) -> Self {
        let w_in = 0;
        let b_in = w_in + h * d;
        let mut off = b_in + h;
        let mut dir = || {
            let o = DirOffsets {
                w: off,
                u: off + 4 * h * h,
                b: off + 8 * h * h,
            };
            off += 8 * h * h + 4 * h;
            o
        };
        let dirs = [dir(), dir()];
        let head_w = off;
        let head_b = head_w + 2 * h;
        Layout {
            d,
            h,
            w_in,
            b_in,
            dirs,
            head_w,
            head_b,
            len: head_b + 1,
        }
    }
}

/// Trainable selector parameters.
///
/// `version` counts applied updates; selection outcomes carry it so a
/// gradient is never computed against parameters that have since moved.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    layout: Layout,
    version: u64,
    data: Vec<f64>,
}

impl SelectorParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let layout = Layout::new(input_dim, hidden);
        Self {
            layout,
            version: 0,
            data: vec![0.0; layout.len],
        }
    }

    /// Weights uniform in `±1/sqrt(H)`, biases zero except the forget-gate
    /// bias, which starts at 1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let l = p.layout;
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut fill = |range: std::ops::Range<usize>, data: &mut [f64]| {
            for x in &mut data[range] {
                *x = bound * (2.0 * rng.uniform() - 1.0);
            }
        };
        fill(l.w_in..l.b_in, &mut p.data);
        for dir in l.dirs {
            fill(dir.w..dir.b, &mut p.data);
            for x in &mut p.data[dir.b + hidden..dir.b + 2 * hidden] {
                *x = 1.0;
            }
        }
        fill(l.head_w..l.head_b, &mut p.data);
        p
    }

    pub fn from_flat(input_dim: usize, hidden: usize, version: u64, data: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(input_dim, hidden);
        if data.len() != layout.len {
            return Err(Error::DimensionMismatch {
                expected: layout.len,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(Self {
            layout,
            version,
            data,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layout.d
    }

    pub fn hidden(&self) -> usize {
        self.layout.h
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutates the parameters in place and bumps the version.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.data);
        self.version += 1;
    }

    /// Same shape, different values, same version (for finite differences).
    pub fn with_values(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.data.len());
        Self {
            layout: self.layout,
            version: self.version,
            data: values.to_vec(),
        }
    }

    pub fn write_checkpoint(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.layout.d as u32).to_le_bytes())?;
        out.write_all(&(self.layout.h as u32).to_le_bytes())?;
        out.write_all(&(self.version as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.data.len());
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |r: String| Error::load(origin, r);
        if bytes.len() < 17 {
            return Err(err("truncated checkpoint header".into()));
        }
        if &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(err("bad magic, expected \"SELW1\"".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (d, h, version) = (u32_at(5) as usize, u32_at(9) as usize, u32_at(13) as u64);
        let layout = Layout::new(d, h);
        let body = &bytes[17..];
        if body.len() != 8 * layout.len {
            return Err(err(format!(
                "expected {} parameters for input_dim={d}, hidden={h}, found {} bytes",
                layout.len,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(d, h, version, data).map_err(|e| err(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::read_checkpoint(&bytes, &path.display().to_string())
    }
}

/// Named parameter block, for inspection and hand-built parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamBlock {
    InputWeights,
    InputBias,
    /// Projected input to gates; direction 0 is forward, 1 is backward.
    GateWeights(usize),
    Recurrent(usize),
    GateBias(usize),
    HeadWeights,
    HeadBias,
}

impl SelectorParams {
    fn block_range(&self, block: ParamBlock) -> std::ops::Range<usize> {
        let l = self.layout;
        let h = l.h;
        match block {
            ParamBlock::InputWeights => l.w_in..l.b_in,
            ParamBlock::InputBias => l.b_in..l.b_in + h,
            ParamBlock::GateWeights(d) => l.dirs[d].w..l.dirs[d].u,
            ParamBlock::Recurrent(d) => l.dirs[d].u..l.dirs[d].b,
            ParamBlock::GateBias(d) => l.dirs[d].b..l.dirs[d].b + 4 * h,
            ParamBlock::HeadWeights => l.head_w..l.head_b,
            ParamBlock::HeadBias => l.head_b..l.head_b + 1,
        }
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        &self.data[self.block_range(block)]
    }

    /// Mutable access to one block; bumps the version like [`Self::update`].
    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        let r = self.block_range(block);
        self.version += 1;
        &mut self.data[r]
    }
}

#[derive(Clone, Debug)]
struct DirTrace {
    /// Post-activation gates per time step, `N x 4H`.
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    n: usize,
    /// Presentation order: step `t` reads pool position `order[t]`.
    order: Vec<usize>,
    x: Vec<f64>,
    z: Vec<f64>,
    dirs: [DirTrace; 2],
    /// One logit per pool position (pool order, not presentation order).
    pub logits: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn run_direction(p: &[f64], off: DirOffsets, h: usize, z: &[f64], n: usize, reverse: bool) -> DirTrace {
    let g4 = 4 * h;
    let w = &p[off.w..off.u];
    let u = &p[off.u..off.b];
    let b = &p[off.b..off.b + g4];
    let mut gates = Vec::with_capacity(n * g4);
    for _ in 0..n {
        gates.extend_from_slice(b);
    }
    // gates (N x 4H) += Z (N x H) * W^T
    gemm(n, h, g4, z, (h, 1), w, (1, h), &mut gates, (g4, 1));
    let mut c = vec![0.0; n * h];
    let mut hs = vec![0.0; n * h];
    let steps: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    let mut prev: Option<usize> = None;
    for &t in &steps {
        let a = &mut gates[t * g4..(t + 1) * g4];
        if let Some(tp) = prev {
            let hp = &hs[tp * h..(tp + 1) * h];
            for (j, aj) in a.iter_mut().enumerate() {
                *aj += dot(&u[j * h..(j + 1) * h], hp);
            }
        }
        for k in 0..h {
            let i = sigmoid(a[k]);
            let f = sigmoid(a[h + k]);
            let g = a[2 * h + k].tanh();
            let o = sigmoid(a[3 * h + k]);
            a[k] = i;
            a[h + k] = f;
            a[2 * h + k] = g;
            a[3 * h + k] = o;
            let c_prev = prev.map_or(0.0, |tp| c[tp * h + k]);
            let ct = f * c_prev + i * g;
            c[t * h + k] = ct;
            hs[t * h + k] = o * ct.tanh();
        }
        prev = Some(t);
    }
    DirTrace { gates, c, h: hs }
}

/// Gradients of one direction; adds into `grad` and `dz`.
#[allow(clippy::too_many_arguments)]
fn backprop_direction(
    p: &[f64],
    off: DirOffsets,
    h: usize,
    n: usize,
    reverse: bool,
    z: &[f64],
    tr: &DirTrace,
    dh_direct: &[f64],
    grad: &mut [f64],
    dz: &mut [f64],
) {
    let g4 = 4 * h;
    let w = &p[off.w..off.u];
    let u = &p[off.u..off.b];
    // processing order of the forward pass, and each step's predecessor
    let steps: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    let prev_of = |pos: usize| if pos == 0 { None } else { Some(steps[pos - 1]) };

    let mut da_all = vec![0.0; n * g4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for pos in (0..n).rev() {
        let t = steps[pos];
        let tp = prev_of(pos);
        let gt = &tr.gates[t * g4..(t + 1) * g4];
        let da = &mut da_all[t * g4..(t + 1) * g4];
        for k in 0..h {
            let (i, f, g, o) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
            let tc = tr.c[t * h + k].tanh();
            let dh = dh_direct[t * h + k] + dh_next[k];
            let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            let c_prev = tp.map_or(0.0, |q| tr.c[q * h + k]);
            da[k] = dc * g * i * (1.0 - i);
            da[h + k] = dc * c_prev * f * (1.0 - f);
            da[2 * h + k] = dc * i * (1.0 - g * g);
            da[3 * h + k] = dh * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        dh_next.iter_mut().for_each(|x| *x = 0.0);
        if tp.is_some() {
            for (j, &daj) in da.iter().enumerate() {
                if daj != 0.0 {
                    axpy(daj, &u[j * h..(j + 1) * h], &mut dh_next);
                }
            }
        }
    }

    let (gw, rest) = grad[off.w..].split_at_mut(4 * h * h);
    let (gu, rest) = rest.split_at_mut(4 * h * h);
    let gb = &mut rest[..g4];
    for t in 0..n {
        for (g, d) in gb.iter_mut().zip(&da_all[t * g4..(t + 1) * g4]) {
            *g += d;
        }
    }
    // gW (4H x H) += DA^T (4H x N) * Z (N x H)
    gemm(g4, n, h, &da_all, (1, g4), z, (h, 1), gw, (h, 1));
    // dZ (N x H) += DA (N x 4H) * W (4H x H)
    gemm(n, g4, h, &da_all, (g4, 1), w, (h, 1), dz, (h, 1));
    // gU += DA^T * H_prev, where row t of H_prev is the state before step t
    let mut h_prev = vec![0.0; n * h];
    for pos in 1..n {
        let (t, q) = (steps[pos], steps[pos - 1]);
        h_prev[t * h..(t + 1) * h].copy_from_slice(&tr.h[q * h..(q + 1) * h]);
    }
    gemm(g4, n, h, &da_all, (1, g4), &h_prev, (h, 1), gu, (h, 1));
}

/// `C (m x n) += A (m x k) * B (k x n)` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len());
    assert!(last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index the kernel touches is bounded by the asserts above,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl SelectorParams {
    /// Runs both directions over `inputs` (one feature vector per pool
    /// position) in the given presentation order.
    pub fn forward<V: AsRef<[f64]>>(&self, inputs: &[V], order: &[usize]) -> Result<ForwardTrace> {
        let l = self.layout;
        let (d, h, n) = (l.d, l.h, inputs.len());
        if order.len() != n {
            return Err(Error::InvalidArgument("order length differs from pool size".into()));
        }
        let mut x = Vec::with_capacity(n * d);
        for &o in order {
            let v = inputs
                .get(o)
                .ok_or_else(|| Error::InvalidArgument(format!("order entry {o} out of range")))?
                .as_ref();
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
            x.extend_from_slice(v);
        }
        let p = &self.data;
        let w_in = &p[l.w_in..l.b_in];
        let b_in = &p[l.b_in..l.b_in + h];
        let mut z = vec![0.0; n * h];
        for t in 0..n {
            let xt = &x[t * d..(t + 1) * d];
            for j in 0..h {
                z[t * h + j] = b_in[j] + dot(&w_in[j * d..(j + 1) * d], xt);
            }
        }
        let fwd = run_direction(p, l.dirs[0], h, &z, n, false);
        let bwd = run_direction(p, l.dirs[1], h, &z, n, true);
        let head_f = &p[l.head_w..l.head_w + h];
        let head_b = &p[l.head_w + h..l.head_b];
        let bias = p[l.head_b];
        let mut logits = vec![0.0; n];
        for t in 0..n {
            let s = dot(head_f, &fwd.h[t * h..(t + 1) * h]) + dot(head_b, &bwd.h[t * h..(t + 1) * h]) + bias;
            logits[order[t]] = s;
        }
        Ok(ForwardTrace {
            n,
            order: order.to_vec(),
            x,
            z,
            dirs: [fwd, bwd],
            logits,
        })
    }

    /// Gradient of `sum_i dlogits[i] * logit_i` with respect to every
    /// parameter, given upstream gradients indexed by pool position.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<Vec<f64>> {
        let l = self.layout;
        let (d, h, n) = (l.d, l.h, trace.n);
        if dlogits.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: dlogits.len(),
            });
        }
        let p = &self.data;
        let mut grad = vec![0.0; l.len];
        // upstream gradient in presentation order
        let g: Vec<f64> = trace.order.iter().map(|&o| dlogits[o]).collect();

        let head_f = &p[l.head_w..l.head_w + h];
        let head_b = &p[l.head_w + h..l.head_b];
        let mut dh_f = vec![0.0; n * h];
        let mut dh_b = vec![0.0; n * h];
        for t in 0..n {
            if g[t] == 0.0 {
                continue;
            }
            grad[l.head_b] += g[t];
            axpy(g[t], &trace.dirs[0].h[t * h..(t + 1) * h], &mut grad[l.head_w..l.head_w + h]);
            axpy(g[t], &trace.dirs[1].h[t * h..(t + 1) * h], &mut grad[l.head_w + h..l.head_b]);
            axpy(g[t], head_f, &mut dh_f[t * h..(t + 1) * h]);
            axpy(g[t], head_b, &mut dh_b[t * h..(t + 1) * h]);
        }

        let mut dz = vec![0.0; n * h];
        backprop_direction(p, l.dirs[0], h, n, false, &trace.z, &trace.dirs[0], &dh_f, &mut grad, &mut dz);
        backprop_direction(p, l.dirs[1], h, n, true, &trace.z, &trace.dirs[1], &dh_b, &mut grad, &mut dz);

        let (gw_in, rest) = grad[l.w_in..].split_at_mut(h * d);
        let gb_in = &mut rest[..h];
        for t in 0..n {
            let xt = &trace.x[t * d..(t + 1) * d];
            for j in 0..h {
                let dzj = dz[t * h + j];
                gb_in[j] += dzj;
                axpy(dzj, xt, &mut gw_in[j * d..(j + 1) * d]);
            }
        }
        Ok(grad)
    }
}
