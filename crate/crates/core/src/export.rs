//! Model and checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PCNN" | version u16 | kind u16 (0 model, 1 checkpoint)
//! input c, h, w u32 | classes u32 | arch (u16 length + UTF-8)
//! record count u32 | records... | CRC32 of everything before it, u32
//!
//! record = tag u8 | name (u16 length + UTF-8) | payload length u32 | payload
//! ```
//!
//! | tag  | record      | payload |
//! |------|-------------|---------|
//! | 1    | conv        | out, in, kh, kw, stride, pad u32; f32 weights |
//! | 2    | binary conv | out, in, kh, kw, stride, pad, groups u32; binarize-input u8; scale f32; u64 words |
//! | 3    | batch norm  | channels u32; eps, momentum f32; gamma, beta, mean, var f32 |
//! | 4    | max pool    | size u32 |
//! | 5    | global avg  | empty |
//! | 6    | linear      | out, in u32; f32 weights; f32 bias |
//! | 7    | residual    | has-shortcut u8; body count u32; body records; shortcut record |
//! | 0x40 | projection  | I, in_base, kh, kw, J u32; norm u8; f32 `C`; f32 `W` (checkpoints only) |
//! | 0x41 | optimizer   | buffer count u32; per buffer: length u32, f32 values |
//! | 0x42 | train state | iteration u64; epoch u64; config text (u32 length); history |
//!
//! Model files carry only the quantized kernels `D` (packed, one bit per
//! weight) for projection layers; `C` and `W` appear only in checkpoints.

use std::path::Path;

use crate::bitpack::{xnor_conv, PackedActivations, PackedKernel};
use crate::error::{PcnnError, Result};
use crate::layers::{BatchNorm2d, FpConv, GlobalAvgPool, Linear, MaxPool2};
use crate::network::{build_model, Layer, Network};
use crate::projection::OmegaNorm;
use crate::tensor::{conv2d_grouped, Kernel4, KernelShape, Tensor4};
use crate::trainer::{EpochMetrics, OptimizerState, TrainConfig, TrainState, Trainer};

pub const MAGIC: &[u8; 4] = b"PCNN";
pub const VERSION: u16 = 1;
pub const KIND_MODEL: u16 = 0;
pub const KIND_CHECKPOINT: u16 = 1;

pub const TAG_CONV: u8 = 1;
pub const TAG_BINCONV: u8 = 2;
pub const TAG_BN: u8 = 3;
pub const TAG_MAXPOOL: u8 = 4;
pub const TAG_GAP: u8 = 5;
pub const TAG_LINEAR: u8 = 6;
pub const TAG_RESIDUAL: u8 = 7;
pub const TAG_PROJ_PARAMS: u8 = 0x40;
pub const TAG_OPTIMIZER: u8 = 0x41;
pub const TAG_TRAIN_STATE: u8 = 0x42;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn dim(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension fits in u32"));
    }
    fn f32(&mut self, v: f32) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for &x in v {
            self.f32(x);
        }
    }
    fn str16(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("name fits in u16"));
        self.0.extend(s.as_bytes());
    }
    fn record(&mut self, tag: u8, name: &str, payload: &[u8]) {
        self.u8(tag);
        self.str16(name);
        self.dim(payload.len());
        self.0.extend(payload);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            PcnnError::Format(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| PcnnError::Format("array too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| PcnnError::Format("name is not UTF-8".into()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parsed file header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub kind: u16,
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub arch: String,
}

/// One top-level or nested record, payload undecoded.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub tag: u8,
    pub name: String,
    pub payload: Vec<u8>,
}

fn write_header(w: &mut Writer, kind: u16, net: &Network) {
    w.0.extend(MAGIC);
    w.u16(VERSION);
    w.u16(kind);
    let (c, h, wd) = net.spec.input;
    for v in [c, h, wd, net.spec.classes] {
        w.dim(v);
    }
    w.str16(&net.spec.arch);
}

fn encode_layer(w: &mut Writer, layer: &Layer) -> Result<()> {
    let mut p = Writer::default();
    let tag = match layer {
        Layer::Conv(c) => {
            let s = c.weight.shape();
            for v in [s.out_ch, s.in_ch, s.kh, s.kw, c.stride, c.pad] {
                p.dim(v);
            }
            p.f32s(c.weight.data());
            TAG_CONV
        }
        Layer::Proj(n) => {
            let l = &n.layer;
            let q = l.quantize()?;
            let scale = q
                .omega
                .binary_scale()
                .ok_or_else(|| PcnnError::Format(format!("layer {} is not binary", l.name)))?;
            let packed = PackedKernel::pack(&q.d, scale)?;
            let s = packed.shape();
            for v in [s.out_ch, s.in_ch, s.kh, s.kw, l.stride, l.pad, l.num_projections()] {
                p.dim(v);
            }
            p.u8(l.binarize_input as u8);
            p.f32(scale);
            for &word in packed.words() {
                p.u64(word);
            }
            TAG_BINCONV
        }
        Layer::BatchNorm(b) => {
            p.dim(b.channels());
            p.f32(b.eps);
            p.f32(b.momentum);
            for v in [&b.gamma, &b.beta, &b.running_mean, &b.running_var] {
                p.f32s(v);
            }
            TAG_BN
        }
        Layer::MaxPool(m) => {
            p.dim(m.size);
            TAG_MAXPOOL
        }
        Layer::GlobalAvgPool(_) => TAG_GAP,
        Layer::Linear(l) => {
            p.dim(l.out_features);
            p.dim(l.in_features);
            p.f32s(&l.weight);
            p.f32s(&l.bias);
            TAG_LINEAR
        }
        Layer::Residual(r) => {
            p.u8(r.shortcut.is_some() as u8);
            p.dim(r.body.len());
            for l in &r.body {
                encode_layer(&mut p, l)?;
            }
            if let Some(s) = &r.shortcut {
                encode_layer(&mut p, s)?;
            }
            TAG_RESIDUAL
        }
    };
    w.record(tag, layer.name(), &p.0);
    Ok(())
}

fn finish(mut w: Writer) -> Vec<u8> {
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

/// Serialized inference model: quantized kernels only.
pub fn model_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    write_header(&mut w, KIND_MODEL, net);
    w.dim(net.layers.len());
    for l in &net.layers {
        encode_layer(&mut w, l)?;
    }
    Ok(finish(w))
}

pub fn export_model(net: &Network, path: &Path) -> Result<()> {
    crate::trainer::write_file(path, &model_bytes(net)?)
}

/// Serialized training state: the model records followed by `C`/`W` of
/// every projection layer, optimizer buffers and the train state.
pub fn checkpoint_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let net = &t.net;
    let nodes = net.proj_nodes();
    let mut w = Writer::default();
    write_header(&mut w, KIND_CHECKPOINT, net);
    w.dim(net.layers.len() + nodes.len() + 2);
    for l in &net.layers {
        encode_layer(&mut w, l)?;
    }
    for n in nodes {
        let l = &n.layer;
        let s = l.kernels().shape();
        let mut p = Writer::default();
        for v in [s.out_ch, s.in_ch, s.kh, s.kw, l.num_projections()] {
            p.dim(v);
        }
        p.u8(l.omega_norm.code());
        p.f32s(l.kernels().data());
        p.f32s(l.projections());
        w.record(TAG_PROJ_PARAMS, &l.name, &p.0);
    }
    let mut p = Writer::default();
    p.dim(t.optimizer.buffers.len());
    for b in &t.optimizer.buffers {
        p.dim(b.len());
        p.f32s(b);
    }
    w.record(TAG_OPTIMIZER, "optimizer", &p.0);

    let mut p = Writer::default();
    p.u64(t.state.iteration);
    p.u64(t.state.epoch as u64);
    let cfg = t.config.to_text();
    p.dim(cfg.len());
    p.0.extend(cfg.as_bytes());
    p.dim(t.state.history.len());
    for m in &t.state.history {
        p.u64(m.epoch as u64);
        p.u64(m.iter);
        for v in [m.loss_s, m.loss_p, m.loss_total, m.train_acc, m.test_acc, m.lr1, m.lr2, m.cluster_fraction] {
            p.f64(v);
        }
    }
    w.record(TAG_TRAIN_STATE, "train_state", &p.0);
    Ok(finish(w))
}

/// Verify magic, version and checksum, and split into header and records.
pub fn parse_file(bytes: &[u8]) -> Result<(Header, Vec<Record>)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(PcnnError::Format("bad magic, not a PCNN file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(PcnnError::Integrity { stored, computed });
    }
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(PcnnError::Format(format!("unsupported version {version}")));
    }
    let kind = r.u16()?;
    if kind > KIND_CHECKPOINT {
        return Err(PcnnError::Format(format!("unknown file kind {kind}")));
    }
    let input = (r.dim()?, r.dim()?, r.dim()?);
    let classes = r.dim()?;
    let arch = r.str16()?;
    let count = r.dim()?;
    let records = read_records(&mut r, count)?;
    if !r.done() {
        return Err(PcnnError::Format("trailing bytes after records".into()));
    }
    Ok((
        Header {
            version,
            kind,
            input,
            classes,
            arch,
        },
        records,
    ))
}

fn read_records(r: &mut Reader<'_>, count: usize) -> Result<Vec<Record>> {
    (0..count)
        .map(|_| {
            let tag = r.u8()?;
            let name = r.str16()?;
            let len = r.dim()?;
            Ok(Record {
                tag,
                name,
                payload: r.take(len)?.to_vec(),
            })
        })
        .collect()
}

/// Nested records of a residual payload: `(body, shortcut)`.
pub fn residual_children(rec: &Record) -> Result<(Vec<Record>, Option<Record>)> {
    let mut r = Reader::new(&rec.payload);
    let has_shortcut = r.u8()? != 0;
    let n = r.dim()?;
    let mut body = read_records(&mut r, n + has_shortcut as usize)?;
    if !r.done() {
        return Err(PcnnError::Format(format!("{}: trailing bytes in residual", rec.name)));
    }
    let shortcut = if has_shortcut { body.pop() } else { None };
    Ok((body, shortcut))
}

/// Binary convolution with packed kernels, evaluated by XNOR/popcount when
/// its input is binarized.
#[derive(Clone, Debug)]
pub struct BinConv {
    pub name: String,
    pub kernel: PackedKernel,
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
    pub binarize_input: bool,
}

impl BinConv {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        if self.binarize_input {
            let packed = PackedActivations::from_signs(x);
            if x.shape().c != self.kernel.shape().in_ch * self.groups {
                return Err(PcnnError::shape("binary conv input", x.shape(), self.kernel.shape()));
            }
            Ok(xnor_conv(&packed, &self.kernel, self.stride, self.pad)?.to_f32(self.kernel.scale(), 1.0))
        } else {
            conv2d_grouped(x, &self.kernel.unpack(), self.stride, self.pad, self.groups)
        }
    }
}

#[derive(Clone, Debug)]
pub enum InferLayer {
    Conv(FpConv),
    Binary(BinConv),
    BatchNorm(BatchNorm2d),
    MaxPool(MaxPool2),
    GlobalAvgPool(GlobalAvgPool),
    Linear(Linear),
    Residual {
        name: String,
        body: Vec<InferLayer>,
        shortcut: Option<Box<InferLayer>>,
    },
}

impl InferLayer {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            InferLayer::Conv(l) => l.forward_eval(x),
            InferLayer::Binary(l) => l.forward(x),
            InferLayer::BatchNorm(l) => l.forward_eval(x),
            InferLayer::MaxPool(l) => l.forward_eval(x),
            InferLayer::GlobalAvgPool(l) => l.forward_eval(x),
            InferLayer::Linear(l) => l.forward_eval(x),
            InferLayer::Residual { body, shortcut, .. } => {
                let mut y = x.clone();
                for l in body {
                    y = l.forward(&y)?;
                }
                let s = match shortcut {
                    Some(l) => l.forward(x)?,
                    None => x.clone(),
                };
                if s.shape() != y.shape() {
                    return Err(PcnnError::shape("residual add", y.shape(), s.shape()));
                }
                Tensor4::new(y.shape(), y.data().iter().zip(s.data()).map(|(a, b)| a + b).collect())
            }
        }
    }
}

/// Imported model, read-only.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub header: Header,
    pub layers: Vec<InferLayer>,
}

fn decode_layer(rec: &Record) -> Result<InferLayer> {
    let mut r = Reader::new(&rec.payload);
    let name = rec.name.clone();
    let layer = match rec.tag {
        TAG_CONV => {
            let (o, i, kh, kw) = (r.dim()?, r.dim()?, r.dim()?, r.dim()?);
            let (stride, pad) = (r.dim()?, r.dim()?);
            let shape = KernelShape::new(o, i, kh, kw);
            let w = Kernel4::new(shape, r.f32s(shape.len())?)?;
            InferLayer::Conv(FpConv::new(name, w, stride, pad))
        }
        TAG_BINCONV => {
            let (o, i, kh, kw) = (r.dim()?, r.dim()?, r.dim()?, r.dim()?);
            let (stride, pad, groups) = (r.dim()?, r.dim()?, r.dim()?);
            let binarize_input = r.u8()? != 0;
            let scale = r.f32()?;
            let shape = KernelShape::new(o, i, kh, kw);
            let n_words = shape.per_kernel().div_ceil(64) * o;
            let words = (0..n_words).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            if groups == 0 || o % groups != 0 || stride == 0 {
                return Err(PcnnError::Format(format!("{name}: bad groups/stride {groups}/{stride}")));
            }
            InferLayer::Binary(BinConv {
                name,
                kernel: PackedKernel::from_words(shape, scale, words)?,
                groups,
                stride,
                pad,
                binarize_input,
            })
        }
        TAG_BN => {
            let c = r.dim()?;
            let mut b = BatchNorm2d::new(name, c);
            b.eps = r.f32()?;
            b.momentum = r.f32()?;
            b.gamma = r.f32s(c)?;
            b.beta = r.f32s(c)?;
            b.running_mean = r.f32s(c)?;
            b.running_var = r.f32s(c)?;
            InferLayer::BatchNorm(b)
        }
        TAG_MAXPOOL => InferLayer::MaxPool(MaxPool2::new(name, r.dim()?)),
        TAG_GAP => InferLayer::GlobalAvgPool(GlobalAvgPool::new(name)),
        TAG_LINEAR => {
            let (o, i) = (r.dim()?, r.dim()?);
            let w = r.f32s(o * i)?;
            let b = r.f32s(o)?;
            InferLayer::Linear(Linear::new(name, o, i, w, b)?)
        }
        TAG_RESIDUAL => {
            let (body, shortcut) = residual_children(rec)?;
            return Ok(InferLayer::Residual {
                name,
                body: body.iter().map(decode_layer).collect::<Result<_>>()?,
                shortcut: shortcut.as_ref().map(decode_layer).transpose()?.map(Box::new),
            });
        }
        t => return Err(PcnnError::Format(format!("{name}: unexpected record tag 0x{t:02x}"))),
    };
    if !r.done() {
        return Err(PcnnError::Format(format!("{}: payload has trailing bytes", rec.name)));
    }
    Ok(layer)
}

impl InferenceModel {
    /// Load from model or checkpoint bytes; checkpoint-only records are skipped.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, records) = parse_file(bytes)?;
        let mut layers = Vec::new();
        for rec in &records {
            if rec.tag >= TAG_PROJ_PARAMS {
                if header.kind == KIND_MODEL {
                    return Err(PcnnError::Format(format!("model file holds training record `{}`", rec.name)));
                }
                continue;
            }
            layers.push(decode_layer(rec)?);
        }
        Ok(InferenceModel { header, layers })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let (c, h, w) = self.header.input;
        let s = x.shape();
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(PcnnError::shape("model input", s, (c, h, w)));
        }
        let mut y = x.clone();
        for l in &self.layers {
            y = l.forward(&y)?;
        }
        Ok(y)
    }

    pub fn num_classes(&self) -> usize {
        self.header.classes
    }

    pub fn layers_flat(&self) -> Vec<&InferLayer> {
        fn walk<'a>(l: &'a InferLayer, out: &mut Vec<&'a InferLayer>) {
            out.push(l);
            if let InferLayer::Residual { body, shortcut, .. } = l {
                for b in body {
                    walk(b, out);
                }
                if let Some(s) = shortcut {
                    walk(s, out);
                }
            }
        }
        let mut out = Vec::new();
        for l in &self.layers {
            walk(l, &mut out);
        }
        out
    }
}

pub fn import_model(path: &Path) -> Result<InferenceModel> {
    let bytes = std::fs::read(path).map_err(|e| PcnnError::io(path.display().to_string(), e))?;
    InferenceModel::from_bytes(&bytes)
}

fn flatten<'a>(records: &'a [Record], out: &mut Vec<Record>) -> Result<()> {
    for rec in records {
        if rec.tag == TAG_RESIDUAL {
            let (body, shortcut) = residual_children(rec)?;
            flatten(&body, out)?;
            if let Some(s) = shortcut {
                flatten(std::slice::from_ref(&s), out)?;
            }
        } else {
            out.push(rec.clone());
        }
    }
    Ok(())
}

fn mismatch(name: &str, what: &str) -> PcnnError {
    PcnnError::Format(format!("checkpoint layer `{name}`: {what} does not match the configured model"))
}

/// Rebuild a trainer from checkpoint bytes.
pub fn trainer_from_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    let (header, records) = parse_file(bytes)?;
    if header.kind != KIND_CHECKPOINT {
        return Err(PcnnError::Format("not a checkpoint file".into()));
    }
    let mut flat = Vec::new();
    flatten(&records, &mut flat)?;
    let find = |tag: u8, name: &str| flat.iter().find(|r| r.tag == tag && r.name == name);

    let state_rec = find(TAG_TRAIN_STATE, "train_state").ok_or_else(|| PcnnError::Format("missing train state".into()))?;
    let mut r = Reader::new(&state_rec.payload);
    let iteration = r.u64()?;
    let epoch = r.u64()? as usize;
    let n = r.dim()?;
    let cfg_text = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| PcnnError::Format("config text is not UTF-8".into()))?;
    let config = TrainConfig::parse(&cfg_text)?;
    let mut history = Vec::new();
    for _ in 0..r.dim()? {
        let e = r.u64()? as usize;
        let it = r.u64()?;
        let mut v = [0.0f64; 8];
        for x in &mut v {
            *x = r.f64()?;
        }
        history.push(EpochMetrics {
            epoch: e,
            iter: it,
            loss_s: v[0],
            loss_p: v[1],
            loss_total: v[2],
            train_acc: v[3],
            test_acc: v[4],
            lr1: v[5],
            lr2: v[6],
            cluster_fraction: v[7],
        });
    }

    let opt_rec = find(TAG_OPTIMIZER, "optimizer").ok_or_else(|| PcnnError::Format("missing optimizer state".into()))?;
    let mut r = Reader::new(&opt_rec.payload);
    let mut buffers = Vec::new();
    for _ in 0..r.dim()? {
        let n = r.dim()?;
        buffers.push(r.f32s(n)?);
    }

    let mut spec = config.model_spec()?;
    spec.input = header.input;
    spec.classes = header.classes;
    spec.arch = header.arch.clone();
    let mut net = build_model(&spec, config.seed)?;
    for layer in net.layers.iter_mut() {
        fill_layer(layer, &find)?;
    }
    Ok(Trainer {
        config,
        net,
        state: TrainState {
            iteration,
            epoch,
            history,
        },
        optimizer: OptimizerState { buffers },
    })
}

fn fill_layer<'r>(layer: &mut Layer, find: &dyn Fn(u8, &str) -> Option<&'r Record>) -> Result<()> {
    let name = layer.name().to_string();
    match layer {
        Layer::Conv(c) => {
            let rec = find(TAG_CONV, &name).ok_or_else(|| mismatch(&name, "record"))?;
            match decode_layer(rec)? {
                InferLayer::Conv(d) if d.weight.shape() == c.weight.shape() && (d.stride, d.pad) == (c.stride, c.pad) => {
                    c.weight = d.weight
                }
                _ => return Err(mismatch(&name, "conv shape")),
            }
        }
        Layer::BatchNorm(b) => {
            let rec = find(TAG_BN, &name).ok_or_else(|| mismatch(&name, "record"))?;
            match decode_layer(rec)? {
                InferLayer::BatchNorm(d) if d.channels() == b.channels() => {
                    b.gamma = d.gamma;
                    b.beta = d.beta;
                    b.running_mean = d.running_mean;
                    b.running_var = d.running_var;
                    b.eps = d.eps;
                    b.momentum = d.momentum;
                }
                _ => return Err(mismatch(&name, "channel count")),
            }
        }
        Layer::Linear(l) => {
            let rec = find(TAG_LINEAR, &name).ok_or_else(|| mismatch(&name, "record"))?;
            match decode_layer(rec)? {
                InferLayer::Linear(d) if (d.out_features, d.in_features) == (l.out_features, l.in_features) => {
                    l.weight = d.weight;
                    l.bias = d.bias;
                }
                _ => return Err(mismatch(&name, "linear shape")),
            }
        }
        Layer::Proj(n) => {
            let rec = find(TAG_PROJ_PARAMS, &name).ok_or_else(|| mismatch(&name, "projection record"))?;
            let mut r = Reader::new(&rec.payload);
            let shape = KernelShape::new(r.dim()?, r.dim()?, r.dim()?, r.dim()?);
            let j = r.dim()?;
            let norm = OmegaNorm::from_code(r.u8()?).ok_or_else(|| mismatch(&name, "norm code"))?;
            if shape != n.layer.kernels().shape() || j != n.layer.num_projections() {
                return Err(mismatch(&name, "kernel shape"));
            }
            let c = r.f32s(shape.len())?;
            let w = r.f32s(j * shape.kh * shape.kw)?;
            n.layer.kernels_mut().data_mut().copy_from_slice(&c);
            n.layer.projections_mut().copy_from_slice(&w);
            n.layer.omega_norm = norm;
            n.clear();
        }
        Layer::Residual(res) => {
            for l in &mut res.body {
                fill_layer(l, find)?;
            }
            if let Some(s) = &mut res.shortcut {
                fill_layer(s, find)?;
            }
        }
        Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => {}
    }
    Ok(())
}
