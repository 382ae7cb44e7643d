//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node; calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients. Convolutions are lowered to im2col + GEMM
//! (`matrixmultiply::dgemm`); the column buffer is rebuilt in the backward
//! pass instead of being cached, trading a little compute for memory.
//!
//! Everything is single-threaded and allocation order is fixed, so a forward
//! pass is bit-reproducible for identical inputs.

use crate::error::{Error, Result};

/// Dense row-major f64 array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interpret as C×H×W.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(format!("expected 3-d tensor, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum BroadcastKind {
    /// x[c,h,w] - v[c]
    SubVec,
    /// x[c,h,w] / v[c]
    DivVec,
    /// x[c,h,w] * v[c]
    MulVec,
    /// x[c,h,w] + v[c]
    AddVec,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    OneMinus(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LogClamped(NodeId, f64),
    MeanAll(NodeId),
    MeanHw(NodeId),
    Broadcast(NodeId, NodeId, BroadcastKind),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2(NodeId),
    ConcatC(NodeId, NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<u8>,
        scale: f64,
    },
    SobelHv(NodeId),
    L1Loss(NodeId, NodeId),
    CrossEntropy2d {
        logits: NodeId,
        labels: Vec<u8>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass. Nodes are append-only; `backward` fills `grads`.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    /// FNV-1a hash over every non-smooth decision taken during the forward
    /// pass (ReLU signs, pool argmaxes, dropout masks, log clamps). Two
    /// forward passes with equal signatures lie on the same smooth piece of
    /// the loss surface, which is what finite-difference checks require.
    sig: u64,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), sig: FNV_OFFSET }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kink_signature(&self) -> u64 {
        self.sig
    }

    fn sig_byte(&mut self, b: u8) {
        self.sig = (self.sig ^ b as u64).wrapping_mul(FNV_PRIME);
    }

    fn sig_u32(&mut self, v: u32) {
        for b in v.to_le_bytes() {
            self.sig_byte(b);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.idx()].as_ref()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// New leaf carrying a copy of `id`'s value; gradients do not flow past it.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.leaf(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * k).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Scale(x, k))
    }

    pub fn add_const(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a + k).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::AddConst(x))
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| 1.0 - a).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::OneMinus(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.sqrt()).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let mut data = Vec::with_capacity(v.numel());
        let mut bits: u8 = 0;
        let mut nbits = 0;
        let mut sig = self.sig;
        for &a in v.data() {
            let pos = a > 0.0;
            data.push(if pos { a } else { 0.0 });
            bits = (bits << 1) | pos as u8;
            nbits += 1;
            if nbits == 8 {
                sig = (sig ^ bits as u64).wrapping_mul(FNV_PRIME);
                bits = 0;
                nbits = 0;
            }
        }
        if nbits > 0 {
            sig = (sig ^ bits as u64).wrapping_mul(FNV_PRIME);
        }
        self.sig = sig;
        self.push(Tensor::from_vec(&shape, data), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let mut data = Vec::with_capacity(v.numel());
        let mut sig = self.sig;
        for &a in v.data() {
            let pos = a > 0.0;
            data.push(if pos { a } else { slope * a });
            sig = (sig ^ pos as u64).wrapping_mul(FNV_PRIME);
        }
        self.sig = sig;
        self.push(Tensor::from_vec(&shape, data), Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.tanh()).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Sigmoid(x))
    }

    /// ln(max(x, floor)); gradient is zero where the clamp binds.
    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let mut data = Vec::with_capacity(v.numel());
        let mut sig = self.sig;
        for &a in v.data() {
            let clamped = a < floor;
            data.push(if clamped { floor.ln() } else { a.ln() });
            sig = (sig ^ clamped as u64).wrapping_mul(FNV_PRIME);
        }
        self.sig = sig;
        self.push(Tensor::from_vec(&shape, data), Op::LogClamped(x, floor))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    /// Spatial mean per channel: C×H×W → C.
    pub fn mean_hw(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (c, h, w) = v.dims3().expect("mean_hw expects 3-d input");
        let hw = h * w;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let s: f64 = v.data()[ch * hw..(ch + 1) * hw].iter().sum();
            out.push(s / hw as f64);
        }
        self.push(Tensor::from_vec(&[c], out), Op::MeanHw(x))
    }

    fn broadcast(&mut self, x: NodeId, v: NodeId, kind: BroadcastKind) -> NodeId {
        let xv = self.value(x);
        let vv = self.value(v);
        let (c, h, w) = xv.dims3().expect("broadcast expects 3-d input");
        assert_eq!(vv.shape(), &[c], "broadcast vector length mismatch");
        let hw = h * w;
        let mut data = Vec::with_capacity(xv.numel());
        for ch in 0..c {
            let k = vv.data()[ch];
            let src = &xv.data()[ch * hw..(ch + 1) * hw];
            match kind {
                BroadcastKind::SubVec => data.extend(src.iter().map(|a| a - k)),
                BroadcastKind::DivVec => data.extend(src.iter().map(|a| a / k)),
                BroadcastKind::MulVec => data.extend(src.iter().map(|a| a * k)),
                BroadcastKind::AddVec => data.extend(src.iter().map(|a| a + k)),
            }
        }
        self.push(Tensor::from_vec(&[c, h, w], data), Op::Broadcast(x, v, kind))
    }

    pub fn sub_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.broadcast(x, v, BroadcastKind::SubVec)
    }

    pub fn div_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.broadcast(x, v, BroadcastKind::DivVec)
    }

    pub fn mul_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.broadcast(x, v, BroadcastKind::MulVec)
    }

    pub fn add_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.broadcast(x, v, BroadcastKind::AddVec)
    }

    /// 2-d convolution (cross-correlation), zero padding, square kernel.
    /// x: Ci×H×W, w: Co×Ci×K×K, b: Co.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, h, wd) = xv.dims3().expect("conv2d input must be 3-d");
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert_eq!(kh, kw, "conv2d expects square kernels");
        let (ho, wo) = conv_out_dims(h, wd, kh, stride, pad);
        assert!(ho > 0 && wo > 0, "conv2d output would be empty");

        let cols = im2col(xv.data(), ci, h, wd, kh, stride, pad, ho, wo);
        let k = ci * kh * kw;
        let n = ho * wo;
        let mut out = vec![0.0; co * n];
        unsafe {
            matrixmultiply::dgemm(
                co, k, n, 1.0, wv.data().as_ptr(), k as isize, 1, cols.as_ptr(), n as isize, 1, 0.0,
                out.as_mut_ptr(), n as isize, 1,
            );
        }
        if let Some(bid) = b {
            let bv = self.value(bid);
            assert_eq!(bv.shape(), &[co], "conv2d bias length mismatch");
            for c in 0..co {
                let bias = bv.data()[c];
                for o in &mut out[c * n..(c + 1) * n] {
                    *o += bias;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[co, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad },
        )
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3().expect("max_pool2 input must be 3-d");
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        let data = xv.data();
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i00 = base + (2 * oy) * w + 2 * ox;
                    let idxs = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = idxs[0];
                    for &i in &idxs[1..] {
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        for &a in &argmax {
            self.sig_u32(a);
        }
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3().expect("upsample2 input must be 3-d");
        let (ho, wo) = (h * 2, w * 2);
        let mut out = vec![0.0; c * ho * wo];
        let data = xv.data();
        for ch in 0..c {
            for y in 0..h {
                let src = &data[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                for dy in 0..2 {
                    let row = &mut out[ch * ho * wo + (2 * y + dy) * wo..ch * ho * wo + (2 * y + dy + 1) * wo];
                    for x0 in 0..w {
                        row[2 * x0] = src[x0];
                        row[2 * x0 + 1] = src[x0];
                    }
                }
            }
        }
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::Upsample2(x))
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (ca, ha, wa) = va.dims3().expect("concat_c input must be 3-d");
        let (cb, hb, wb) = vb.dims3().expect("concat_c input must be 3-d");
        assert_eq!((ha, wa), (hb, wb), "concat_c spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        self.push(Tensor::from_vec(&[ca + cb, ha, wa], data), Op::ConcatC(a, b))
    }

    /// Inverted dropout: kept activations are scaled by 1/(1-p).
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut impl rand::Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let scale = 1.0 / (1.0 - p);
        let mut mask = Vec::with_capacity(xv.numel());
        let mut data = Vec::with_capacity(xv.numel());
        for &a in xv.data() {
            let keep = rng.gen::<f64>() >= p;
            mask.push(keep as u8);
            data.push(if keep { a * scale } else { 0.0 });
        }
        let mut sig = self.sig;
        for &m in &mask {
            sig = (sig ^ m as u64).wrapping_mul(FNV_PRIME);
        }
        self.sig = sig;
        self.push(Tensor::from_vec(&shape, data), Op::Dropout { x, mask, scale })
    }

    /// Per-channel horizontal and vertical Sobel responses with reflection
    /// padding: C×H×W → 2C×H×W, channel 2c horizontal, 2c+1 vertical.
    pub fn sobel_hv(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3().expect("sobel_hv input must be 3-d");
        assert!(h >= 3 && w >= 3, "sobel_hv needs at least 3x3 input");
        let out = sobel_forward(xv.data(), c, h, w);
        self.push(Tensor::from_vec(&[2 * c, h, w], out), Op::SobelHv(x))
    }

    /// Mean absolute difference, reduced to a scalar. The per-element
    /// comparison pattern enters the kink signature: each |x - y| has a
    /// kink at zero, and the subgradient picks a branch there.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l1_loss shape mismatch");
        let n = va.numel() as f64;
        let mut s = 0.0;
        let mut sig = self.sig;
        let mut bits: u8 = 0;
        let mut nbits = 0;
        for (x, y) in va.data().iter().zip(vb.data()) {
            s += (x - y).abs();
            let branch = (((x > y) as u8) << 1) | (x < y) as u8;
            bits = (bits << 2) | branch;
            nbits += 2;
            if nbits == 8 {
                sig = (sig ^ bits as u64).wrapping_mul(FNV_PRIME);
                bits = 0;
                nbits = 0;
            }
        }
        if nbits > 0 {
            sig = (sig ^ bits as u64).wrapping_mul(FNV_PRIME);
        }
        self.sig = sig;
        self.push(Tensor::scalar(s / n), Op::L1Loss(a, b))
    }

    /// Pixel-wise softmax cross-entropy: logits K×H×W vs labels H×W.
    pub fn cross_entropy_2d(&mut self, logits: NodeId, labels: &[u8]) -> NodeId {
        let lv = self.value(logits);
        let (k, h, w) = lv.dims3().expect("cross_entropy_2d logits must be 3-d");
        let hw = h * w;
        assert_eq!(labels.len(), hw, "label count mismatch");
        let data = lv.data();
        let mut probs = vec![0.0; k * hw];
        let mut loss = 0.0;
        for p in 0..hw {
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(data[c * hw + p]);
            }
            let mut denom = 0.0;
            for c in 0..k {
                denom += (data[c * hw + p] - maxv).exp();
            }
            let lse = maxv + denom.ln();
            let lab = labels[p] as usize;
            assert!(lab < k, "label out of range");
            loss += lse - data[lab * hw + p];
            for c in 0..k {
                probs[c * hw + p] = (data[c * hw + p] - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss / hw as f64),
            Op::CrossEntropy2d { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Backpropagate from a scalar root. Gradients accumulate; leaves keep
    /// theirs until the tape is dropped.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        self.grads[root.idx()] = Some(Tensor::scalar(1.0));
        for i in (0..=root.idx()).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_back(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let idx = id.idx();
        if self.grads[idx].is_none() {
            let shape = self.nodes[idx].value.shape().to_vec();
            self.grads[idx] = Some(Tensor::zeros(&shape));
        }
        f(self.grads[idx].as_mut().unwrap().data_mut());
    }

    fn step_back(&mut self, i: usize, g: &Tensor) {
        // Ops only reference earlier nodes, so (values of parents, grad of i)
        // never alias. Values are read through raw clones where the borrow
        // checker cannot see the split; parent values are small or needed
        // anyway, and hot paths (conv) use scratch buffers instead.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                let gd = g.data().to_vec();
                self.acc(a, |ga| for (x, y) in ga.iter_mut().zip(&gd) { *x += y });
                self.acc(b, |gb| for (x, y) in gb.iter_mut().zip(&gd) { *x += y });
            }
            &Op::Sub(a, b) => {
                let gd = g.data().to_vec();
                self.acc(a, |ga| for (x, y) in ga.iter_mut().zip(&gd) { *x += y });
                self.acc(b, |gb| for (x, y) in gb.iter_mut().zip(&gd) { *x -= y });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                let gd = g.data();
                let ga: Vec<f64> = gd.iter().zip(&bv).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = gd.iter().zip(&av).map(|(g, a)| g * a).collect();
                self.acc(a, |d| for (x, y) in d.iter_mut().zip(&ga) { *x += y });
                self.acc(b, |d| for (x, y) in d.iter_mut().zip(&gb) { *x += y });
            }
            &Op::Scale(x, k) => {
                let gd = g.data().to_vec();
                self.acc(x, |gx| for (d, s) in gx.iter_mut().zip(&gd) { *d += k * s });
            }
            &Op::AddConst(x) => {
                let gd = g.data().to_vec();
                self.acc(x, |gx| for (d, s) in gx.iter_mut().zip(&gd) { *d += s });
            }
            &Op::OneMinus(x) => {
                let gd = g.data().to_vec();
                self.acc(x, |gx| for (d, s) in gx.iter_mut().zip(&gd) { *d -= s });
            }
            &Op::Sqrt(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let gd = g.data();
                let gx: Vec<f64> = gd.iter().zip(&y).map(|(g, y)| g / (2.0 * y)).collect();
                self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gx) { *a += b });
            }
            &Op::Relu(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let gd = g.data();
                let gx: Vec<f64> = gd.iter().zip(&y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gx) { *a += b });
            }
            &Op::LeakyRelu(x, slope) => {
                let xv = self.value(x).data().to_vec();
                let gd = g.data();
                let gx: Vec<f64> = gd
                    .iter()
                    .zip(&xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else { slope * *g })
                    .collect();
                self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gx) { *a += b });
            }
            &Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let gd = g.data();
                let gx: Vec<f64> = gd.iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gx) { *a += b });
            }
            &Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let gd = g.data();
                let gx: Vec<f64> = gd.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gx) { *a += b });
            }
            &Op::LogClamped(x, floor) => {
                let xv = self.value(x).data().to_vec();
                let gd = g.data();
                let gx: Vec<f64> = gd
                    .iter()
                    .zip(&xv)
                    .map(|(g, x)| if *x >= floor { g / x } else { 0.0 })
                    .collect();
                self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gx) { *a += b });
            }
            &Op::MeanAll(x) => {
                let n = self.value(x).numel() as f64;
                let gs = g.item() / n;
                self.acc(x, |d| for a in d.iter_mut() { *a += gs });
            }
            &Op::MeanHw(x) => {
                let (c, h, w) = self.value(x).dims3().unwrap();
                let hw = h * w;
                let gd = g.data().to_vec();
                self.acc(x, |d| {
                    for ch in 0..c {
                        let gs = gd[ch] / hw as f64;
                        for a in &mut d[ch * hw..(ch + 1) * hw] {
                            *a += gs;
                        }
                    }
                });
            }
            &Op::Broadcast(x, v, kind) => {
                let xv = self.value(x).data().to_vec();
                let vv = self.value(v).data().to_vec();
                let (c, h, w) = self.value(x).dims3().unwrap();
                let hw = h * w;
                let gd = g.data().to_vec();
                match kind {
                    BroadcastKind::SubVec | BroadcastKind::AddVec => {
                        let sign = if matches!(kind, BroadcastKind::SubVec) { -1.0 } else { 1.0 };
                        self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gd) { *a += b });
                        self.acc(v, |d| {
                            for ch in 0..c {
                                let s: f64 = gd[ch * hw..(ch + 1) * hw].iter().sum();
                                d[ch] += sign * s;
                            }
                        });
                    }
                    BroadcastKind::DivVec => {
                        self.acc(x, |d| {
                            for ch in 0..c {
                                let k = vv[ch];
                                for (a, b) in d[ch * hw..(ch + 1) * hw].iter_mut().zip(&gd[ch * hw..(ch + 1) * hw]) {
                                    *a += b / k;
                                }
                            }
                        });
                        self.acc(v, |d| {
                            for ch in 0..c {
                                let k = vv[ch];
                                let mut s = 0.0;
                                for (gb, xb) in gd[ch * hw..(ch + 1) * hw].iter().zip(&xv[ch * hw..(ch + 1) * hw]) {
                                    s += gb * xb;
                                }
                                d[ch] -= s / (k * k);
                            }
                        });
                    }
                    BroadcastKind::MulVec => {
                        self.acc(x, |d| {
                            for ch in 0..c {
                                let k = vv[ch];
                                for (a, b) in d[ch * hw..(ch + 1) * hw].iter_mut().zip(&gd[ch * hw..(ch + 1) * hw]) {
                                    *a += b * k;
                                }
                            }
                        });
                        self.acc(v, |d| {
                            for ch in 0..c {
                                let mut s = 0.0;
                                for (gb, xb) in gd[ch * hw..(ch + 1) * hw].iter().zip(&xv[ch * hw..(ch + 1) * hw]) {
                                    s += gb * xb;
                                }
                                d[ch] += s;
                            }
                        });
                    }
                }
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (ci, h, wd) = xv.dims3().unwrap();
                let ws = wv.shape().to_vec();
                let (co, kh) = (ws[0], ws[2]);
                let (ho, wo) = conv_out_dims(h, wd, kh, stride, pad);
                let n = ho * wo;
                let k = ci * kh * kh;
                let cols = im2col(xv.data(), ci, h, wd, kh, stride, pad, ho, wo);
                let wdata = wv.data().to_vec();
                let gd = g.data();

                if let Some(bid) = b {
                    let mut gb = vec![0.0; co];
                    for c in 0..co {
                        gb[c] = gd[c * n..(c + 1) * n].iter().sum();
                    }
                    self.acc(bid, |d| for (a, b) in d.iter_mut().zip(&gb) { *a += b });
                }

                // grad_w[co,k] += grad_out[co,n] · cols[k,n]^T
                let mut gw = vec![0.0; co * k];
                unsafe {
                    matrixmultiply::dgemm(
                        co, n, k, 1.0, gd.as_ptr(), n as isize, 1, cols.as_ptr(), 1, n as isize, 0.0,
                        gw.as_mut_ptr(), k as isize, 1,
                    );
                }
                self.acc(w, |d| for (a, b) in d.iter_mut().zip(&gw) { *a += b });

                // grad_cols[k,n] = w[co,k]^T · grad_out[co,n], then scatter.
                let mut gcols = vec![0.0; k * n];
                unsafe {
                    matrixmultiply::dgemm(
                        k, co, n, 1.0, wdata.as_ptr(), 1, k as isize, gd.as_ptr(), n as isize, 1, 0.0,
                        gcols.as_mut_ptr(), n as isize, 1,
                    );
                }
                let gx = col2im(&gcols, ci, h, wd, kh, stride, pad, ho, wo);
                self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gx) { *a += b });
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let am = argmax.clone();
                let gd = g.data().to_vec();
                self.acc(x, |d| {
                    for (o, &src) in am.iter().enumerate() {
                        d[src as usize] += gd[o];
                    }
                });
            }
            &Op::Upsample2(x) => {
                let (c, h, w) = self.value(x).dims3().unwrap();
                let (ho, wo) = (h * 2, w * 2);
                let gd = g.data().to_vec();
                self.acc(x, |d| {
                    for ch in 0..c {
                        for y in 0..h {
                            for x0 in 0..w {
                                let mut s = 0.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        s += gd[ch * ho * wo + (2 * y + dy) * wo + 2 * x0 + dx];
                                    }
                                }
                                d[ch * h * w + y * w + x0] += s;
                            }
                        }
                    }
                });
            }
            &Op::ConcatC(a, b) => {
                let na = self.value(a).numel();
                let gd = g.data().to_vec();
                self.acc(a, |d| for (x, y) in d.iter_mut().zip(&gd[..na]) { *x += y });
                self.acc(b, |d| for (x, y) in d.iter_mut().zip(&gd[na..]) { *x += y });
            }
            Op::Dropout { x, mask, scale } => {
                let x = *x;
                let scale = *scale;
                let mk = mask.clone();
                let gd = g.data().to_vec();
                self.acc(x, |d| {
                    for ((a, b), m) in d.iter_mut().zip(&gd).zip(&mk) {
                        if *m == 1 {
                            *a += b * scale;
                        }
                    }
                });
            }
            &Op::SobelHv(x) => {
                let (c, h, w) = self.value(x).dims3().unwrap();
                let gx = sobel_backward(g.data(), c, h, w);
                self.acc(x, |d| for (a, b) in d.iter_mut().zip(&gx) { *a += b });
            }
            &Op::L1Loss(a, b) => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                let gs = g.item() / av.len() as f64;
                let signs: Vec<f64> = av
                    .iter()
                    .zip(&bv)
                    .map(|(x, y)| {
                        if x > y {
                            gs
                        } else if x < y {
                            -gs
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(a, |d| for (x, s) in d.iter_mut().zip(&signs) { *x += s });
                self.acc(b, |d| for (x, s) in d.iter_mut().zip(&signs) { *x -= s });
            }
            Op::CrossEntropy2d { logits, labels, probs } => {
                let logits = *logits;
                let (k, h, w) = self.value(logits).dims3().unwrap();
                let hw = h * w;
                let gs = g.item() / hw as f64;
                let probs = probs.clone();
                let labels = labels.clone();
                self.acc(logits, |d| {
                    for p in 0..hw {
                        for c in 0..k {
                            let onehot = (labels[p] as usize == c) as u8 as f64;
                            d[c * hw + p] += gs * (probs[c * hw + p] - onehot);
                        }
                    }
                });
            }
        }
    }
}

pub fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Lower a zero-padded convolution input to a [Ci·K·K, Ho·Wo] column matrix.
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; ci * k * k * n];
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..((c * k + ky) * k + kx + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a column-matrix gradient back onto the (unpadded) input layout.
fn col2im(
    cols: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; ci * h * w];
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * n..((c * k + ky) * k + kx + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &row[oy * wo..(oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Reflect an out-of-range index back into [0, n): ...c b a | a b c... .
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

fn sobel_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * c * h * w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x0 in 0..w {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for dy in 0..3 {
                    let iy = reflect_index(y as isize + dy as isize - 1, h);
                    for dx in 0..3 {
                        let ix = reflect_index(x0 as isize + dx as isize - 1, w);
                        let v = plane[iy * w + ix];
                        gx += SOBEL_X[dy][dx] * v;
                        // vertical kernel is the transpose
                        gy += SOBEL_X[dx][dy] * v;
                    }
                }
                out[(2 * ch) * h * w + y * w + x0] = gx;
                out[(2 * ch + 1) * h * w + y * w + x0] = gy;
            }
        }
    }
    out
}

fn sobel_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let gh = &g[(2 * ch) * h * w..(2 * ch + 1) * h * w];
        let gv = &g[(2 * ch + 1) * h * w..(2 * ch + 2) * h * w];
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x0 in 0..w {
                let go_h = gh[y * w + x0];
                let go_v = gv[y * w + x0];
                for dy in 0..3 {
                    let iy = reflect_index(y as isize + dy as isize - 1, h);
                    for dx in 0..3 {
                        let ix = reflect_index(x0 as isize + dx as isize - 1, w);
                        plane[iy * w + ix] += SOBEL_X[dy][dx] * go_h + SOBEL_X[dx][dy] * go_v;
                    }
                }
            }
        }
    }
    gx
}
