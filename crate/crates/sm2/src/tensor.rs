//! Dense tensor arithmetic on a reverse-mode autodiff tape.
//!
//! Everything above this module (the transformer, the losses, the training
//! loop) is built from the op set defined here. Tensors are row-major flat
//! buffers; the only broadcasting is scalar-with-tensor. Graphs are append-only
//! arenas, so node ids are already topologically sorted and `backward` is a
//! single reverse sweep that touches each node exactly once.
//!
//! The whole module is generic over [`Scalar`] so the same graph code runs in
//! f32 (default compute) and f64 (gradient-check mode used by the oracles).

use num_traits::Float;

/// Float abstraction: f32 for production compute, f64 for verification.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    /// C = op(A) x op(B) with optional transposes.
    Matmul {
        a: TensorId,
        b: TensorId,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// Row-broadcast bias add: out[t, j] = a[t, j] + v[j].
    AddRow {
        a: TensorId,
        v: TensorId,
    },
    /// Scalar-tensor broadcast: out[i] = a[i] + s[0].
    AddScalarTensor {
        a: TensorId,
        s: TensorId,
    },
    Scale {
        a: TensorId,
        c: S,
    },
    AddConst {
        a: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Relu {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    /// ln(max(x, floor)); zero gradient below the floor.
    LogClamped {
        a: TensorId,
        floor: S,
    },
    /// Softmax over the last axis.
    Softmax {
        a: TensorId,
    },
    MaskedFill {
        a: TensorId,
        mask: Vec<bool>,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: S,
    },
    /// Row lookup into an embedding table.
    Embed {
        table: TensorId,
        ids: Vec<u32>,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    SliceCols {
        a: TensorId,
        start: usize,
        len: usize,
    },
    /// out[i] = a[i, cols[i]].
    RowGather {
        a: TensorId,
        cols: Vec<u32>,
    },
    /// Same data, new shape.
    Reshape {
        a: TensorId,
    },
    SumAll {
        a: TensorId,
    },
    MeanAll {
        a: TensorId,
    },
    /// Inverted dropout; mask entries are 0 or 1, kept values scaled by 1/(1-p).
    Dropout {
        a: TensorId,
        mask: Vec<bool>,
        scale: S,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::AddScalarTensor { .. } => "add_scalar_tensor",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LogClamped { .. } => "log_clamped",
            Op::Softmax { .. } => "softmax",
            Op::MaskedFill { .. } => "masked_fill",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embed { .. } => "embed",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::RowGather { .. } => "row_gather",
            Op::Reshape { .. } => "reshape",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node<S: Scalar> {
    data: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only computation graph.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` call w.r.t. `id`, if it was tracked.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(&shape),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape, Op::Leaf, requires_grad)
    }

    /// Leaf that never tracks gradients (masks, positional tables, token ids).
    pub fn constant(&mut self, data: Vec<S>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: S) -> TensorId {
        self.constant(vec![v], vec![])
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, op: Op<S>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        if !matches!(op, Op::Leaf) {
            check_finite(&data, op.name());
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            requires_grad,
        });
        id
    }

    fn rg2(&self, a: TensorId, b: TensorId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.matmul_t(a, b, false, false)
    }

    /// a x b^T
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.matmul_t(a, b, false, true)
    }

    pub fn matmul_t(&mut self, a: TensorId, b: TensorId, ta: bool, tb: bool) -> TensorId {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul: expected 2-d operands, got {:?} and {:?}",
            sa,
            sb
        );
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(
            ka, kb,
            "matmul: inner dimensions differ ({:?} x {:?}, ta={}, tb={})",
            sa, sb, ta, tb
        );
        let k = ka;
        let mut out = vec![S::zero(); m * n];
        matmul_kernel(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            ta,
            tb,
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg2(a, b);
        self.push(out, vec![m, n], Op::Matmul { a, b, ta, tb, m, k, n }, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa, sb, "add: shape mismatch {:?} vs {:?}", sa, sb);
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let shape = sa.clone();
        let rg = self.rg2(a, b);
        self.push(data, shape, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let nb = self.scale(b, S::from_f64(-1.0));
        self.add(a, nb)
    }

    pub fn add_row(&mut self, a: TensorId, v: TensorId) -> TensorId {
        let sa = self.nodes[a.0].shape.clone();
        let sv = &self.nodes[v.0].shape;
        assert!(
            sa.len() == 2 && sv.len() == 1 && sv[0] == sa[1],
            "add_row: shape mismatch {:?} vs {:?}",
            sa,
            sv
        );
        let d = sa[1];
        let vd = &self.nodes[v.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(vd.iter()) {
                *x = *x + *y;
            }
        }
        let rg = self.rg2(a, v);
        self.push(data, sa, Op::AddRow { a, v }, rg)
    }

    pub fn add_scalar_tensor(&mut self, a: TensorId, s: TensorId) -> TensorId {
        assert_eq!(
            numel(&self.nodes[s.0].shape),
            1,
            "add_scalar_tensor: rhs must be a scalar, got {:?}",
            self.nodes[s.0].shape
        );
        let sv = self.nodes[s.0].data[0];
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x + sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg2(a, s);
        self.push(data, shape, Op::AddScalarTensor { a, s }, rg)
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::Scale { a, c }, rg)
    }

    pub fn add_const(&mut self, a: TensorId, c: S) -> TensorId {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::AddConst { a }, rg)
    }

    /// 1 - a, elementwise.
    pub fn one_minus(&mut self, a: TensorId) -> TensorId {
        let neg = self.scale(a, S::from_f64(-1.0));
        self.add_const(neg, S::one())
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa, sb, "mul: shape mismatch {:?} vs {:?}", sa, sb);
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let shape = sa.clone();
        let rg = self.rg2(a, b);
        self.push(data, shape, Op::Mul { a, b }, rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let z = S::zero();
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x.max(z)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let one = S::one();
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::Sigmoid { a }, rg)
    }

    pub fn log_clamped(&mut self, a: TensorId, floor: S) -> TensorId {
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::LogClamped { a, floor }, rg)
    }

    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        assert!(!shape.is_empty(), "softmax: scalar input");
        let cols = *shape.last().unwrap();
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::Softmax { a }, rg)
    }

    /// Replace entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: TensorId, mask: Vec<bool>, fill: S) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        assert_eq!(
            mask.len(),
            numel(&shape),
            "masked_fill: mask length {} vs shape {:?}",
            mask.len(),
            shape
        );
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::MaskedFill { a, mask }, rg)
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: S) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("layer_norm: scalar input");
        assert_eq!(self.nodes[gamma.0].shape, vec![d], "layer_norm: gamma shape");
        assert_eq!(self.nodes[beta.0].shape, vec![d], "layer_norm: beta shape");
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(d) {
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..d {
                row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        self.push(data, shape, Op::LayerNorm { x, gamma, beta, eps }, rg)
    }

    pub fn embed(&mut self, table: TensorId, ids: &[u32]) -> TensorId {
        let st = &self.nodes[table.0].shape;
        assert_eq!(st.len(), 2, "embed: table must be 2-d, got {:?}", st);
        let (v, d) = (st[0], st[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "embed: id {} out of range for table rows {}", id, v);
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        self.push(
            data,
            vec![ids.len(), d],
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.nodes[parts[0].0].shape[0];
        let mut total = 0usize;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            assert!(
                sp.len() == 2 && sp[0] == rows,
                "concat_cols: part shape {:?} incompatible with {} rows",
                sp,
                rows
            );
            total += sp[1];
        }
        let mut data = vec![S::zero(); rows * total];
        let mut off = 0usize;
        for &p in parts {
            let w = self.nodes[p.0].shape[1];
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push(
            data,
            vec![rows, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let sa = &self.nodes[a.0].shape;
        assert!(sa.len() == 2, "slice_cols: input must be 2-d, got {:?}", sa);
        let (rows, cols) = (sa[0], sa[1]);
        assert!(
            start + len <= cols,
            "slice_cols: range {}..{} out of {} columns",
            start,
            start + len,
            cols
        );
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data[r * cols + start..r * cols + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, vec![rows, len], Op::SliceCols { a, start, len }, rg)
    }

    pub fn row_gather(&mut self, a: TensorId, cols: &[u32]) -> TensorId {
        let sa = &self.nodes[a.0].shape;
        assert_eq!(sa.len(), 2, "row_gather: input must be 2-d, got {:?}", sa);
        let (rows, width) = (sa[0], sa[1]);
        assert_eq!(cols.len(), rows, "row_gather: {} indices for {} rows", cols.len(), rows);
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in cols.iter().enumerate() {
            let c = c as usize;
            assert!(c < width, "row_gather: column {} out of {}", c, width);
            data.push(self.nodes[a.0].data[r * width + c]);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            data,
            vec![rows],
            Op::RowGather {
                a,
                cols: cols.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            numel(&shape),
            self.nodes[a.0].data.len(),
            "reshape: {:?} incompatible with {} elements",
            shape,
            self.nodes[a.0].data.len()
        );
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, Op::Reshape { a }, rg)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut s = S::zero();
        for &x in &self.nodes[a.0].data {
            s = s + x;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![], Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len();
        assert!(n > 0, "mean_all: empty tensor");
        let mut s = S::zero();
        for &x in &self.nodes[a.0].data {
            s = s + x;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s / S::from_usize(n)], vec![], Op::MeanAll { a }, rg)
    }

    /// Inverted dropout with a caller-supplied keep mask (true = keep).
    pub fn dropout(&mut self, a: TensorId, keep: Vec<bool>, p: f64) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        assert_eq!(keep.len(), numel(&shape), "dropout: mask length mismatch");
        assert!((0.0..1.0).contains(&p), "dropout: p must be in [0,1), got {}", p);
        let scale = S::from_f64(1.0 / (1.0 - p));
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(keep.iter())
            .map(|(&x, &k)| if k { x * scale } else { S::zero() })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            data,
            shape,
            Op::Dropout {
                a,
                mask: keep,
                scale,
            },
            rg,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills gradients for every node that
    /// requires grad; tracked leaves not on a path to the loss get zeros.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            numel(&self.nodes[loss.0].shape),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss.0].shape
        );
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![S::zero(); n.data.len()])
                } else {
                    None
                }
            })
            .collect();
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.grads[loss.0].as_mut().unwrap()[0] = S::one();

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            // Take this node's grad; inputs live strictly earlier on the tape.
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn add_grad(&mut self, id: TensorId, f: impl FnOnce(&Tape<S>, &mut [S])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let mut buf = self.grads[id.0].take().unwrap();
        f(self, &mut buf);
        self.grads[id.0] = Some(buf);
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        // The dispatch clones small attr vectors out of the op to keep borrows
        // simple; the payloads are index lists, not data tensors.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb, m, k, n } => {
                let (a, b, ta, tb, m, k, n) = (*a, *b, *ta, *tb, *m, *k, *n);
                self.add_grad(a, |t, ga| {
                    // d op(A) = G x op(B)^T, then undo the A transpose.
                    if !ta {
                        matmul_kernel_acc(g, &t.nodes[b.0].data, false, !tb, m, n, k, ga);
                    } else {
                        matmul_kernel_acc(&t.nodes[b.0].data, g, tb, true, k, n, m, ga);
                    }
                });
                self.add_grad(b, |t, gb| {
                    if !tb {
                        matmul_kernel_acc(&t.nodes[a.0].data, g, !ta, false, k, m, n, gb);
                    } else {
                        matmul_kernel_acc(g, &t.nodes[a.0].data, true, ta, n, m, k, gb);
                    }
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |_, ga| axpy(ga, g, S::one()));
                self.add_grad(b, |_, gb| axpy(gb, g, S::one()));
            }
            Op::AddRow { a, v } => {
                let (a, v) = (*a, *v);
                let d = self.nodes[v.0].data.len();
                self.add_grad(a, |_, ga| axpy(ga, g, S::one()));
                self.add_grad(v, |_, gv| {
                    for row in g.chunks(d) {
                        for (gj, &x) in gv.iter_mut().zip(row.iter()) {
                            *gj = *gj + x;
                        }
                    }
                });
            }
            Op::AddScalarTensor { a, s } => {
                let (a, s) = (*a, *s);
                self.add_grad(a, |_, ga| axpy(ga, g, S::one()));
                self.add_grad(s, |_, gs| {
                    let mut acc = S::zero();
                    for &x in g {
                        acc = acc + x;
                    }
                    gs[0] = gs[0] + acc;
                });
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                self.add_grad(a, |_, ga| axpy(ga, g, c));
            }
            Op::AddConst { a } => {
                let a = *a;
                self.add_grad(a, |_, ga| axpy(ga, g, S::one()));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |t, ga| {
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(&t.nodes[b.0].data) {
                        *x = *x + gi * bi;
                    }
                });
                self.add_grad(b, |t, gb| {
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(&t.nodes[a.0].data) {
                        *x = *x + gi * ai;
                    }
                });
            }
            Op::Relu { a } => {
                let a = *a;
                self.add_grad(a, |t, ga| {
                    for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(&t.nodes[a.0].data) {
                        if xi > S::zero() {
                            *x = *x + gi;
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let out = i;
                self.add_grad(a, |t, ga| {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(&t.nodes[out].data) {
                        *x = *x + gi * yi * (S::one() - yi);
                    }
                });
            }
            Op::LogClamped { a, floor } => {
                let (a, floor) = (*a, *floor);
                self.add_grad(a, |t, ga| {
                    for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(&t.nodes[a.0].data) {
                        if xi > floor {
                            *x = *x + gi / xi;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let a = *a;
                let out = i;
                let cols = *self.nodes[i].shape.last().unwrap();
                self.add_grad(a, |t, ga| {
                    let y = &t.nodes[out].data;
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut dot = S::zero();
                        for j in 0..cols {
                            dot = dot + yr[j] * gr[j];
                        }
                        let gar = &mut ga[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            gar[j] = gar[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::MaskedFill { a, .. } => {
                let a = *a;
                let mask = match &self.nodes[i].op {
                    Op::MaskedFill { mask, .. } => mask.clone(),
                    _ => unreachable!(),
                };
                self.add_grad(a, |_, ga| {
                    for ((x, &gi), &m) in ga.iter_mut().zip(g).zip(mask.iter()) {
                        if !m {
                            *x = *x + gi;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = *self.nodes[i].shape.last().unwrap();
                let rows = self.nodes[i].data.len() / d;
                // Recompute per-row moments; cheaper than caching at desk scale.
                self.add_grad(beta, |_, gb| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                });
                self.add_grad(gamma, |t, gg| {
                    let xs = &t.nodes[x.0].data;
                    for r in 0..rows {
                        let xr = &xs[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(xr, eps);
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * (xr[j] - mean) * inv_std;
                        }
                    }
                });
                self.add_grad(x, |t, gx| {
                    let xs = &t.nodes[x.0].data;
                    let gam = &t.nodes[gamma.0].data;
                    let dn = S::from_usize(d);
                    for r in 0..rows {
                        let xr = &xs[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(xr, eps);
                        let mut sum_dy = S::zero();
                        let mut sum_dy_xhat = S::zero();
                        for j in 0..d {
                            let dy = gr[j] * gam[j];
                            let xhat = (xr[j] - mean) * inv_std;
                            sum_dy = sum_dy + dy;
                            sum_dy_xhat = sum_dy_xhat + dy * xhat;
                        }
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dy = gr[j] * gam[j];
                            let xhat = (xr[j] - mean) * inv_std;
                            gxr[j] = gxr[j]
                                + inv_std * (dy - sum_dy / dn - xhat * sum_dy_xhat / dn);
                        }
                    }
                });
            }
            Op::Embed { table, .. } => {
                let table = *table;
                let ids = match &self.nodes[i].op {
                    Op::Embed { ids, .. } => ids.clone(),
                    _ => unreachable!(),
                };
                let d = self.nodes[i].shape[1];
                self.add_grad(table, |_, gt| {
                    for (t, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        let src = &g[t * d..(t + 1) * d];
                        for (x, &y) in dst.iter_mut().zip(src) {
                            *x = *x + y;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let total = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let mut off = 0usize;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    let o = off;
                    self.add_grad(p, |_, gp| {
                        for r in 0..rows {
                            let src = &g[r * total + o..r * total + o + w];
                            let dst = &mut gp[r * w..(r + 1) * w];
                            for (x, &y) in dst.iter_mut().zip(src) {
                                *x = *x + y;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let rows = self.nodes[i].shape[0];
                let cols = self.nodes[a.0].shape[1];
                self.add_grad(a, |_, ga| {
                    for r in 0..rows {
                        let dst = &mut ga[r * cols + start..r * cols + start + len];
                        let src = &g[r * len..(r + 1) * len];
                        for (x, &y) in dst.iter_mut().zip(src) {
                            *x = *x + y;
                        }
                    }
                });
            }
            Op::RowGather { a, .. } => {
                let a = *a;
                let cols = match &self.nodes[i].op {
                    Op::RowGather { cols, .. } => cols.clone(),
                    _ => unreachable!(),
                };
                let width = self.nodes[a.0].shape[1];
                self.add_grad(a, |_, ga| {
                    for (r, &c) in cols.iter().enumerate() {
                        ga[r * width + c as usize] = ga[r * width + c as usize] + g[r];
                    }
                });
            }
            Op::Reshape { a } => {
                let a = *a;
                self.add_grad(a, |_, ga| axpy(ga, g, S::one()));
            }
            Op::SumAll { a } => {
                let a = *a;
                self.add_grad(a, |_, ga| {
                    for x in ga.iter_mut() {
                        *x = *x + g[0];
                    }
                });
            }
            Op::MeanAll { a } => {
                let a = *a;
                let n = self.nodes[a.0].data.len();
                self.add_grad(a, |_, ga| {
                    let gi = g[0] / S::from_usize(n);
                    for x in ga.iter_mut() {
                        *x = *x + gi;
                    }
                });
            }
            Op::Dropout { a, .. } => {
                let a = *a;
                let (mask, scale) = match &self.nodes[i].op {
                    Op::Dropout { mask, scale, .. } => (mask.clone(), *scale),
                    _ => unreachable!(),
                };
                self.add_grad(a, |_, ga| {
                    for ((x, &gi), &m) in ga.iter_mut().zip(g).zip(mask.iter()) {
                        if m {
                            *x = *x + gi * scale;
                        }
                    }
                });
            }
        }
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S], c: S) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x = *x + y * c;
    }
}

/// out = op(A) x op(B), overwriting out.
#[allow(clippy::too_many_arguments)]
fn matmul_kernel<S: Scalar>(
    a: &[S],
    b: &[S],
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    for x in out.iter_mut() {
        *x = S::zero();
    }
    matmul_kernel_acc(a, b, ta, tb, m, k, n, out);
}

/// out += op(A) x op(B). A is m x k after its transpose, B is k x n.
#[allow(clippy::too_many_arguments)]
fn matmul_kernel_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    match (ta, tb) {
        (false, false) => {
            // axpy over rows of B; vectorizes well.
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // Dot products of contiguous rows. Four independent accumulator
            // lanes let the reduction vectorize despite float non-assoc.
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let chunks = k / 4;
                    let (mut s0, mut s1, mut s2, mut s3) =
                        (S::zero(), S::zero(), S::zero(), S::zero());
                    for c in 0..chunks {
                        let x = &arow[c * 4..c * 4 + 4];
                        let y = &brow[c * 4..c * 4 + 4];
                        s0 = s0 + x[0] * y[0];
                        s1 = s1 + x[1] * y[1];
                        s2 = s2 + x[2] * y[2];
                        s3 = s3 + x[3] * y[3];
                    }
                    let mut s = (s0 + s1) + (s2 + s3);
                    for p in chunks * 4..k {
                        s = s + arow[p] * brow[p];
                    }
                    *o = *o + s;
                }
            }
        }
        (true, false) => {
            // A stored k x m: out[i,:] += A[p,i] * B[p,:].
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (true, true) => {
            // Rare path: materialize nothing, walk strided.
            for i in 0..m {
                for j in 0..n {
                    let mut s = S::zero();
                    for p in 0..k {
                        s = s + a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] = out[i * n + j] + s;
                }
            }
        }
    }
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut mx = row[0];
    for &x in row.iter() {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_usize(row.len());
    let mut mean = S::zero();
    for &x in row {
        mean = mean + x;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &x in row {
        let d = x - mean;
        var = var + d * d;
    }
    var = var / n;
    (mean, (var + eps).sqrt().recip())
}

fn check_finite<S: Scalar>(data: &[S], op: &str) {
    for &x in data {
        if !x.is_finite() {
            panic!("non-finite output in op `{}`: {}", op, x);
        }
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Per-parameter Adam accumulators.
#[derive(Clone, Debug, Default)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Bias-corrected Adam over a set of named flat parameter buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub slots: Vec<AdamSlot>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(sizes: &[usize], beta1: f32, beta2: f32, eps: f32) -> Self {
        AdamState {
            slots: sizes
                .iter()
                .map(|&n| AdamSlot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One optimizer step over all parameter buffers. `params[i]` and
    /// `grads[i]` must match `slots[i]` in length.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f32) {
        assert_eq!(params.len(), self.slots.len(), "adam: parameter group count");
        assert_eq!(grads.len(), self.slots.len(), "adam: gradient group count");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()) {
            assert_eq!(p.len(), slot.m.len(), "adam: shape mismatch");
            assert_eq!(g.len(), slot.m.len(), "adam: shape mismatch");
            for i in 0..p.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = slot.m[i] as f64 / bc1;
                let vhat = slot.v[i] as f64 / bc2;
                p[i] -= (lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
    }
}
