//! Reverse-mode autodiff over a flat tape of tensor ops.
//!
//! Tensors are dense `f64` buffers with explicit shapes. Each op appends one
//! node; [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a differentiable
//! leaf. Shape errors are programmer errors and panic.

use std::collections::BTreeMap;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct T(pub usize);

/// Dense tensor: C-order data plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "data/shape mismatch");
        Self { data, shape }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { data: vec![0.0; shape.iter().product()], shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(T, T),
    Sub(T, T),
    Mul(T, T),
    /// `k * x + c` elementwise; only the slope matters for the backward pass.
    Affine(T, f64),
    /// `a + b` where `b.shape` is a suffix of `a.shape`.
    AddBcastTail(T, T),
    /// `a[i, ...] * s[i]` where `s` is 1-D of length `a.shape[0]`.
    MulBcastHead(T, T),
    /// 2-D `[m,k] x [k,n]`.
    Matmul(T, T),
    /// Batched `[B,m,k] x [B,k,n]`.
    BmmNN(T, T),
    /// Batched `[B,m,k] x [B,n,k]ᵀ -> [B,m,n]`.
    BmmNT(T, T),
    SoftmaxLast(T),
    LayerNormLast { x: T, gamma: T, beta: T },
    Gelu(T),
    Sum(T),
    Mean(T),
    ConcatLast(T, T),
    /// Concat two 3-D tensors along axis 1.
    ConcatAxis1(T, T),
    GatherRows { table: T, idx: Vec<usize> },
    Reshape(T),
    Permute { x: T, perm: Vec<usize> },
    /// `[B,T,d] -> [B,d]`, picking token `idx`.
    SelectAxis1 { x: T, idx: usize },
    Conv2d { x: T, w: T, b: T, stride: usize, pad: usize },
    Upsample2x(T),
}

const LN_EPS: f64 = 1e-5;

/// Gradients produced by [`Tape::backward`], indexed by tensor handle.
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    /// Gradient for `t`, if it participated in the loss.
    pub fn get(&self, t: T) -> Option<&[f64]> {
        self.0.get(t.0).and_then(|g| g.as_deref())
    }
}

/// Flat compute graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    param_nodes: BTreeMap<String, T>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, val: Tensor, op: Op, needs: bool) -> T {
        self.vals.push(val);
        self.ops.push(op);
        self.needs_grad.push(needs);
        T(self.vals.len() - 1)
    }

    fn needs(&self, t: T) -> bool {
        self.needs_grad[t.0]
    }

    /// Differentiable leaf (a parameter copy or any input whose gradient is
    /// wanted).
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> T {
        self.push(Tensor::new(data, shape.to_vec()), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> T {
        self.push(Tensor::new(data, shape.to_vec()), Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> T {
        self.constant(vec![0.0; shape.iter().product()], shape)
    }

    /// Bind a named parameter from `store` as a differentiable leaf. Repeat
    /// binds of the same name return the same node, so shared weights
    /// accumulate gradient through graph fan-out.
    pub fn param(&mut self, store: &crate::nn::optim::ParamStore, name: &str) -> T {
        if let Some(&t) = self.param_nodes.get(name) {
            return t;
        }
        let tensor = store.get(name);
        let t = self.leaf(tensor.data.clone(), &tensor.shape);
        self.param_nodes.insert(name.to_string(), t);
        t
    }

    /// Stop-gradient: copy a value onto the tape as a constant leaf.
    pub fn detach(&mut self, x: T) -> T {
        let v = self.vals[x.0].clone();
        self.push(v, Op::Leaf, false)
    }

    pub fn val(&self, t: T) -> &Tensor {
        &self.vals[t.0]
    }

    pub fn shape(&self, t: T) -> &[usize] {
        &self.vals[t.0].shape
    }

    pub fn scalar(&self, t: T) -> f64 {
        assert_eq!(self.vals[t.0].numel(), 1, "not a scalar");
        self.vals[t.0].data[0]
    }

    pub fn add(&mut self, a: T, b: T) -> T {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = zip_map(&self.vals[a.0].data, &self.vals[b.0].data, |x, y| x + y);
        let shape = self.vals[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(data, shape), Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: T, b: T) -> T {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = zip_map(&self.vals[a.0].data, &self.vals[b.0].data, |x, y| x - y);
        let shape = self.vals[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(data, shape), Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: T, b: T) -> T {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = zip_map(&self.vals[a.0].data, &self.vals[b.0].data, |x, y| x * y);
        let shape = self.vals[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(data, shape), Op::Mul(a, b), needs)
    }

    /// `k * x + c` elementwise.
    pub fn affine(&mut self, x: T, k: f64, c: f64) -> T {
        let data = self.vals[x.0].data.iter().map(|v| k * v + c).collect();
        let shape = self.vals[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(data, shape), Op::Affine(x, k), needs)
    }

    pub fn scale(&mut self, x: T, k: f64) -> T {
        self.affine(x, k, 0.0)
    }

    /// `a + b` broadcasting `b` over leading axes of `a` (`b.shape` must be a
    /// suffix of `a.shape`). Covers bias add and positional embedding add.
    pub fn add_bcast_tail(&mut self, a: T, b: T) -> T {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == sb[..],
            "broadcast tail mismatch: {sa:?} vs {sb:?}"
        );
        let nb: usize = sb.iter().product();
        let data: Vec<f64> = self.vals[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.vals[b.0].data[i % nb])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(data, sa), Op::AddBcastTail(a, b), needs)
    }

    /// `out[i, ...] = a[i, ...] * s[i]` with `s` 1-D of length `a.shape[0]`.
    pub fn mul_bcast_head(&mut self, a: T, s: T) -> T {
        let sa = self.shape(a).to_vec();
        assert_eq!(self.shape(s), &[sa[0]], "per-sample scale must be [batch]");
        let per: usize = sa[1..].iter().product();
        let mut data = self.vals[a.0].data.clone();
        for (i, chunk) in data.chunks_mut(per).enumerate() {
            let k = self.vals[s.0].data[i];
            for x in chunk {
                *x *= k;
            }
        }
        let needs = self.needs(a) || self.needs(s);
        self.push(Tensor::new(data, sa), Op::MulBcastHead(a, s), needs)
    }

    pub fn matmul(&mut self, a: T, b: T) -> T {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.vals[a.0].data, &self.vals[b.0].data, &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(out, vec![m, n]), Op::Matmul(a, b), needs)
    }

    pub fn bmm_nn(&mut self, a: T, b: T) -> T {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm_nn {sa:?} x {sb:?}"
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_into(
                &self.vals[a.0].data[i * m * k..(i + 1) * m * k],
                &self.vals[b.0].data[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(out, vec![bs, m, n]), Op::BmmNN(a, b), needs)
    }

    /// `out[i] = a[i] @ b[i]ᵀ`.
    pub fn bmm_nt(&mut self, a: T, b: T) -> T {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            "bmm_nt {sa:?} x {sb:?}"
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let av = &self.vals[a.0].data[i * m * k..(i + 1) * m * k];
            let bv = &self.vals[b.0].data[i * n * k..(i + 1) * n * k];
            let ov = &mut out[i * m * n..(i + 1) * m * n];
            for r in 0..m {
                for c in 0..n {
                    let mut acc = 0.0;
                    for z in 0..k {
                        acc += av[r * k + z] * bv[c * k + z];
                    }
                    ov[r * n + c] = acc;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(out, vec![bs, m, n]), Op::BmmNT(a, b), needs)
    }

    pub fn softmax_last(&mut self, x: T) -> T {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("softmax needs rank >= 1");
        let mut data = self.vals[x.0].data.clone();
        for row in data.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(data, shape), Op::SoftmaxLast(x), needs)
    }

    pub fn layernorm_last(&mut self, x: T, gamma: T, beta: T) -> T {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layernorm needs rank >= 1");
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let mut data = self.vals[x.0].data.clone();
        let g = &self.vals[gamma.0].data;
        let b = &self.vals[beta.0].data;
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Tensor::new(data, shape), Op::LayerNormLast { x, gamma, beta }, needs)
    }

    pub fn gelu(&mut self, x: T) -> T {
        let data = self.vals[x.0].data.iter().map(|&v| gelu_val(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(data, shape), Op::Gelu(x), needs)
    }

    pub fn sum(&mut self, x: T) -> T {
        let s = self.vals[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::new(vec![s], vec![1]), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: T) -> T {
        let n = self.vals[x.0].numel() as f64;
        let s = self.vals[x.0].data.iter().sum::<f64>() / n;
        let needs = self.needs(x);
        self.push(Tensor::new(vec![s], vec![1]), Op::Mean(x), needs)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: T, b: T) -> T {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    pub fn concat_last(&mut self, a: T, b: T) -> T {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat_last leading dims differ");
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&self.vals[a.0].data[r * da..(r + 1) * da]);
            data.extend_from_slice(&self.vals[b.0].data[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(data, shape), Op::ConcatLast(a, b), needs)
    }

    /// Concat 3-D tensors `[B,Ta,d]` and `[B,Tb,d]` into `[B,Ta+Tb,d]`.
    pub fn concat_axis1(&mut self, a: T, b: T) -> T {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2]);
        let (bs, ta, tb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let mut data = Vec::with_capacity(bs * (ta + tb) * d);
        for i in 0..bs {
            data.extend_from_slice(&self.vals[a.0].data[i * ta * d..(i + 1) * ta * d]);
            data.extend_from_slice(&self.vals[b.0].data[i * tb * d..(i + 1) * tb * d]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(data, vec![bs, ta + tb, d]), Op::ConcatAxis1(a, b), needs)
    }

    /// Row lookup: `table [V,d]`, `idx` of length n, out `[n,d]`.
    pub fn gather_rows(&mut self, table: T, idx: &[usize]) -> T {
        let st = self.shape(table).to_vec();
        assert_eq!(st.len(), 2, "gather_rows table must be 2-D");
        let d = st[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.vals[table.0].data[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            Tensor::new(data, vec![idx.len(), d]),
            Op::GatherRows { table, idx: idx.to_vec() },
            needs,
        )
    }

    pub fn reshape(&mut self, x: T, shape: &[usize]) -> T {
        assert_eq!(
            self.vals[x.0].numel(),
            shape.iter().product::<usize>(),
            "reshape numel mismatch"
        );
        let data = self.vals[x.0].data.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(data, shape.to_vec()), Op::Reshape(x), needs)
    }

    pub fn permute(&mut self, x: T, perm: &[usize]) -> T {
        let sx = self.shape(x).to_vec();
        assert_eq!(perm.len(), sx.len(), "permute rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let data = permute_data(&self.vals[x.0].data, &sx, perm);
        let needs = self.needs(x);
        self.push(
            Tensor::new(data, out_shape),
            Op::Permute { x, perm: perm.to_vec() },
            needs,
        )
    }

    /// Pick token `idx` along axis 1 of a 3-D tensor: `[B,T,d] -> [B,d]`.
    pub fn select_axis1(&mut self, x: T, idx: usize) -> T {
        let sx = self.shape(x).to_vec();
        assert!(sx.len() == 3 && idx < sx[1], "select_axis1 out of range");
        let (bs, t, d) = (sx[0], sx[1], sx[2]);
        let mut data = Vec::with_capacity(bs * d);
        for i in 0..bs {
            let at = (i * t + idx) * d;
            data.extend_from_slice(&self.vals[x.0].data[at..at + d]);
        }
        let needs = self.needs(x);
        self.push(Tensor::new(data, vec![bs, d]), Op::SelectAxis1 { x, idx }, needs)
    }

    /// 2-D convolution, `x [B,Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: T, w: T, b: T, stride: usize, pad: usize) -> T {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1], "conv2d {sx:?} w {sw:?}");
        assert_eq!(self.shape(b), &[sw[0]]);
        let (bs, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xv = &self.vals[x.0].data;
        let wv = &self.vals[w.0].data;
        let bv = &self.vals[b.0].data;
        let mut out = vec![0.0; bs * cout * ho * wo];
        for bi in 0..bs {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xv[((bi * cin + ci) * h + iy as usize) * wd
                                        + ix as usize]
                                        * wv[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::new(out, vec![bs, cout, ho, wo]),
            Op::Conv2d { x, w, b, stride, pad },
            needs,
        )
    }

    /// Nearest-neighbor 2x spatial upsample of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, x: T) -> T {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4);
        let (bs, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let mut out = vec![0.0; bs * c * 4 * h * w];
        let xv = &self.vals[x.0].data;
        for bc in 0..bs * c {
            for y in 0..2 * h {
                for xw in 0..2 * w {
                    out[(bc * 2 * h + y) * 2 * w + xw] = xv[(bc * h + y / 2) * w + xw / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(out, vec![bs, c, 2 * h, 2 * w]), Op::Upsample2x(x), needs)
    }

    /// Backpropagate from scalar `loss` through the whole tape.
    pub fn backward(&mut self, loss: T) -> Grads {
        assert_eq!(self.vals[loss.0].numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.needs_grad[i] {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    /// Sum gradients of all bound parameter nodes, keyed by parameter name.
    pub fn collect_param_grads(&self, grads: &Grads) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &t) in &self.param_nodes {
            if let Some(g) = grads.get(t) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], t: T, delta: &[f64]) {
        if !self.needs_grad[t.0] {
            return;
        }
        let slot = &mut grads[t.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, &self.vals[b.0].data, |x, y| x * y);
                let gb = zip_map(g, &self.vals[a.0].data, |x, y| x * y);
                self.accum(grads, *a, &ga);
                self.accum(grads, *b, &gb);
            }
            Op::Affine(x, k) => {
                let gx: Vec<f64> = g.iter().map(|v| v * k).collect();
                self.accum(grads, *x, &gx);
            }
            Op::AddBcastTail(a, b) => {
                self.accum(grads, *a, g);
                if self.needs_grad[b.0] {
                    let nb = self.vals[b.0].numel();
                    let mut gb = vec![0.0; nb];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % nb] += v;
                    }
                    self.accum(grads, *b, &gb);
                }
            }
            Op::MulBcastHead(a, s) => {
                let per = self.vals[a.0].numel() / self.shape(*a)[0];
                if self.needs_grad[a.0] {
                    let mut ga = g.to_vec();
                    for (bi, chunk) in ga.chunks_mut(per).enumerate() {
                        let k = self.vals[s.0].data[bi];
                        for v in chunk {
                            *v *= k;
                        }
                    }
                    self.accum(grads, *a, &ga);
                }
                if self.needs_grad[s.0] {
                    let av = &self.vals[a.0].data;
                    let mut gs = vec![0.0; self.shape(*a)[0]];
                    for (bi, gsv) in gs.iter_mut().enumerate() {
                        for j in 0..per {
                            *gsv += g[bi * per + j] * av[bi * per + j];
                        }
                    }
                    self.accum(grads, *s, &gs);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs_grad[a.0] {
                    // dA = g @ Bᵀ
                    let bv = &self.vals[b.0].data;
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for z in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += g[r * n + c] * bv[z * n + c];
                            }
                            ga[r * k + z] = acc;
                        }
                    }
                    self.accum(grads, *a, &ga);
                }
                if self.needs_grad[b.0] {
                    // dB = Aᵀ @ g
                    let av = &self.vals[a.0].data;
                    let mut gb = vec![0.0; k * n];
                    for z in 0..k {
                        for r in 0..m {
                            let x = av[r * k + z];
                            for c in 0..n {
                                gb[z * n + c] += x * g[r * n + c];
                            }
                        }
                    }
                    self.accum(grads, *b, &gb);
                }
            }
            Op::BmmNN(a, b) => {
                let (bs, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = self.shape(*b)[2];
                if self.needs_grad[a.0] {
                    let bv = &self.vals[b.0].data;
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        for r in 0..m {
                            for z in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += g[(i * m + r) * n + c] * bv[(i * k + z) * n + c];
                                }
                                ga[(i * m + r) * k + z] = acc;
                            }
                        }
                    }
                    self.accum(grads, *a, &ga);
                }
                if self.needs_grad[b.0] {
                    let av = &self.vals[a.0].data;
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        for z in 0..k {
                            for r in 0..m {
                                let x = av[(i * m + r) * k + z];
                                for c in 0..n {
                                    gb[(i * k + z) * n + c] += x * g[(i * m + r) * n + c];
                                }
                            }
                        }
                    }
                    self.accum(grads, *b, &gb);
                }
            }
            Op::BmmNT(a, b) => {
                let (bs, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = self.shape(*b)[1];
                if self.needs_grad[a.0] {
                    // dA[i] = g[i] @ B[i]
                    let bv = &self.vals[b.0].data;
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        for r in 0..m {
                            for z in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += g[(i * m + r) * n + c] * bv[(i * n + c) * k + z];
                                }
                                ga[(i * m + r) * k + z] = acc;
                            }
                        }
                    }
                    self.accum(grads, *a, &ga);
                }
                if self.needs_grad[b.0] {
                    // dB[i] = g[i]ᵀ @ A[i]
                    let av = &self.vals[a.0].data;
                    let mut gb = vec![0.0; bs * n * k];
                    for i in 0..bs {
                        for c in 0..n {
                            for z in 0..k {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += g[(i * m + r) * n + c] * av[(i * m + r) * k + z];
                                }
                                gb[(i * n + c) * k + z] = acc;
                            }
                        }
                    }
                    self.accum(grads, *b, &gb);
                }
            }
            Op::SoftmaxLast(x) => {
                let d = *self.shape(T(i)).last().unwrap();
                let y = &self.vals[i].data;
                let mut gx = vec![0.0; y.len()];
                for (row, (yr, gr)) in y.chunks(d).zip(g.chunks(d)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[row * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, &gx);
            }
            Op::LayerNormLast { x, gamma, beta } => {
                let d = *self.shape(T(i)).last().unwrap();
                let xv = &self.vals[x.0].data;
                let gv = &self.vals[gamma.0].data;
                let rows = xv.len() / d;
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
                    let ghat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_ghat = ghat.iter().sum::<f64>() / d as f64;
                    let mean_gx: f64 =
                        ghat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = (ghat[j] - mean_ghat - xhat[j] * mean_gx) * rstd;
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                }
                self.accum(grads, *x, &gx);
                self.accum(grads, *gamma, &gg);
                self.accum(grads, *beta, &gb);
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = self.vals[x.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| gi * gelu_grad(v))
                    .collect();
                self.accum(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.vals[x.0].numel()];
                self.accum(grads, *x, &gx);
            }
            Op::Mean(x) => {
                let n = self.vals[x.0].numel();
                let gx = vec![g[0] / n as f64; n];
                self.accum(grads, *x, &gx);
            }
            Op::ConcatLast(a, b) => {
                let da = *self.shape(*a).last().unwrap();
                let db = *self.shape(*b).last().unwrap();
                let rows = self.vals[a.0].numel() / da;
                let mut ga = vec![0.0; rows * da];
                let mut gb = vec![0.0; rows * db];
                for r in 0..rows {
                    let base = r * (da + db);
                    ga[r * da..(r + 1) * da].copy_from_slice(&g[base..base + da]);
                    gb[r * db..(r + 1) * db].copy_from_slice(&g[base + da..base + da + db]);
                }
                self.accum(grads, *a, &ga);
                self.accum(grads, *b, &gb);
            }
            Op::ConcatAxis1(a, b) => {
                let (bs, ta, d) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let tb = self.shape(*b)[1];
                let mut ga = vec![0.0; bs * ta * d];
                let mut gb = vec![0.0; bs * tb * d];
                for bi in 0..bs {
                    let base = bi * (ta + tb) * d;
                    ga[bi * ta * d..(bi + 1) * ta * d]
                        .copy_from_slice(&g[base..base + ta * d]);
                    gb[bi * tb * d..(bi + 1) * tb * d]
                        .copy_from_slice(&g[base + ta * d..base + (ta + tb) * d]);
                }
                self.accum(grads, *a, &ga);
                self.accum(grads, *b, &gb);
            }
            Op::GatherRows { table, idx } => {
                if self.needs_grad[table.0] {
                    let d = self.shape(*table)[1];
                    let mut gt = vec![0.0; self.vals[table.0].numel()];
                    for (r, &row) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[row * d + j] += g[r * d + j];
                        }
                    }
                    self.accum(grads, *table, &gt);
                }
            }
            Op::Reshape(x) => self.accum(grads, *x, g),
            Op::Permute { x, perm } => {
                let inv = inverse_perm(perm);
                let out_shape = self.shape(T(i)).to_vec();
                let gx = permute_data(g, &out_shape, &inv);
                self.accum(grads, *x, &gx);
            }
            Op::SelectAxis1 { x, idx } => {
                let (bs, t, d) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let mut gx = vec![0.0; bs * t * d];
                for bi in 0..bs {
                    gx[(bi * t + idx) * d..(bi * t + idx) * d + d]
                        .copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                self.accum(grads, *x, &gx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (bs, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wd + 2 * pad - kw) / stride + 1;
                let xv = &self.vals[x.0].data;
                let wv = &self.vals[w.0].data;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; cout];
                for bi in 0..bs {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[((bi * cout + co) * ho + oy) * wo + ox];
                                gb[co] += go;
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((bi * cin + ci) * h + iy as usize) * wd
                                                + ix as usize;
                                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                            gx[xi] += wv[wi] * go;
                                            gw[wi] += xv[xi] * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, &gx);
                self.accum(grads, *w, &gw);
                self.accum(grads, *b, &gb);
            }
            Op::Upsample2x(x) => {
                let sx = self.shape(*x).to_vec();
                let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let mut gx = vec![0.0; self.vals[x.0].numel()];
                for i in 0..bc {
                    for y in 0..2 * h {
                        for xw in 0..2 * w {
                            gx[(i * h + y / 2) * w + xw / 2] += g[(i * 2 * h + y) * 2 * w + xw];
                        }
                    }
                }
                self.accum(grads, *x, &gx);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        for z in 0..k {
            let x = a[r * k + z];
            if x == 0.0 {
                continue;
            }
            let brow = &b[z * n..(z + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                orow[c] += x * brow[c];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for &v in data {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[d];
        }
        let _ = v;
        let mut dst = 0;
        for (od, &p) in perm.iter().enumerate() {
            dst += idx[p] * out_strides[od];
        }
        out[dst] = data[src];
        // Odometer increment over the input multi-index.
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
