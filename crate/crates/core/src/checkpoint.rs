//! Versioned binary model checkpoints. One container serves both stages:
//!
//! magic `TSDF` · format version u32 · kind u32 (1 = encoder,
//! 2 = aggregator) · fixed-width config block · tensor count u64 · then per
//! parameter, in model initialization order: name (u16 length + bytes),
//! rank u32, dims u32 each, values as little-endian f32.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::aggregator::{AggregatorConfig, AggregatorModel, Variant};
use crate::mae::{EncoderModel, MAEConfig};
use crate::nn::ParamSet;
use crate::tensor::{Result, Tensor, TensorError};

const MAGIC: [u8; 4] = *b"TSDF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Encoder,
    Aggregator,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Encoder => 1,
            CheckpointKind::Aggregator => 2,
        }
    }
}

fn corrupt(msg: String) -> TensorError {
    TensorError::Invalid { op: "load_checkpoint", msg }
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b).map_err(|e| TensorError::io("save_checkpoint", e))
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn params(&mut self, params: &ParamSet<f32>) -> Result<()> {
        self.u64(params.iter().count() as u64)?;
        for (name, tensor) in params.iter() {
            self.u32(name.len() as u32)?;
            self.bytes(name.as_bytes())?;
            self.u32(tensor.shape().len() as u32)?;
            for &d in tensor.shape() {
                self.u32(d as u32)?;
            }
            for v in tensor.data() {
                self.bytes(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inp.read_exact(&mut buf).map_err(|_| corrupt("truncated file".into()))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn apply_params(&mut self, params: &mut ParamSet<f32>) -> Result<()> {
        let expect = params.iter().count() as u64;
        let count = self.u64()?;
        if count != expect {
            return Err(corrupt(format!("checkpoint has {count} tensors, model needs {expect}")));
        }
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            if name_len > 4096 {
                return Err(corrupt("implausible parameter name length".into()));
            }
            let name = String::from_utf8(self.bytes(name_len)?)
                .map_err(|_| corrupt("parameter name is not utf-8".into()))?;
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(corrupt(format!("implausible rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = self.bytes(len * 4)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let tensor = Tensor::new(shape, data)?;
            params
                .set_by_name(&name, tensor)
                .map_err(|e| corrupt(format!("parameter {name}: {e}")))?;
        }
        let mut extra = [0u8; 1];
        if self.inp.read(&mut extra).map_err(|e| TensorError::io("load_checkpoint", e))? != 0 {
            return Err(corrupt("trailing bytes after last tensor".into()));
        }
        Ok(())
    }
}

fn open_writer(path: &Path, kind: CheckpointKind) -> Result<Writer<BufWriter<std::fs::File>>> {
    let file = std::fs::File::create(path).map_err(|e| TensorError::io("save_checkpoint", e))?;
    let mut w = Writer { out: BufWriter::new(file) };
    w.bytes(&MAGIC)?;
    w.u32(VERSION)?;
    w.u32(kind.code())?;
    Ok(w)
}

fn open_reader(path: &Path) -> Result<(Reader<BufReader<std::fs::File>>, CheckpointKind)> {
    let file = std::fs::File::open(path).map_err(|e| TensorError::io("load_checkpoint", e))?;
    let mut r = Reader { inp: BufReader::new(file) };
    if r.bytes(4)? != MAGIC {
        return Err(corrupt("bad magic: not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let kind = match r.u32()? {
        1 => CheckpointKind::Encoder,
        2 => CheckpointKind::Aggregator,
        other => return Err(corrupt(format!("unknown checkpoint kind {other}"))),
    };
    Ok((r, kind))
}

/// Read just the header to learn what a checkpoint contains.
pub fn peek_kind(path: &Path) -> Result<CheckpointKind> {
    Ok(open_reader(path)?.1)
}

pub fn save_encoder(path: &Path, model: &EncoderModel<f32>) -> Result<()> {
    let mut w = open_writer(path, CheckpointKind::Encoder)?;
    let c = &model.cfg;
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.encoder_dim,
        c.encoder_layers,
        c.encoder_heads,
        c.decoder_dim,
        c.decoder_layers,
        usize::from(c.norm_masked_patches),
    ] {
        w.u32(v as u32)?;
    }
    w.f64(c.mask_ratio)?;
    w.params(&model.params)?;
    w.out.flush().map_err(|e| TensorError::io("save_checkpoint", e))?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<EncoderModel<f32>> {
    let (mut r, kind) = open_reader(path)?;
    if kind != CheckpointKind::Encoder {
        return Err(corrupt("checkpoint holds an aggregator, not an encoder".into()));
    }
    let mut fields = [0usize; 9];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let cfg = MAEConfig {
        image_size: fields[0],
        patch_size: fields[1],
        channels: fields[2],
        encoder_dim: fields[3],
        encoder_layers: fields[4],
        encoder_heads: fields[5],
        decoder_dim: fields[6],
        decoder_layers: fields[7],
        norm_masked_patches: fields[8] != 0,
        mask_ratio: r.f64()?,
    };
    let mut model = EncoderModel::init(cfg, 0)?;
    r.apply_params(&mut model.params)?;
    Ok(model)
}

pub fn save_aggregator(path: &Path, model: &AggregatorModel<f32>) -> Result<()> {
    let mut w = open_writer(path, CheckpointKind::Aggregator)?;
    let c = &model.cfg;
    let variant = match c.variant {
        Variant::Bilinear => 0,
        Variant::SelfAttention => 1,
    };
    for v in [c.d, c.d_prime, c.conv_out_channels, c.conv_kernel, c.n_class, variant] {
        w.u32(v as u32)?;
    }
    w.f64(c.lambda1)?;
    w.f64(c.lambda2)?;
    w.params(&model.params)?;
    w.out.flush().map_err(|e| TensorError::io("save_checkpoint", e))?;
    Ok(())
}

pub fn load_aggregator(path: &Path) -> Result<AggregatorModel<f32>> {
    let (mut r, kind) = open_reader(path)?;
    if kind != CheckpointKind::Aggregator {
        return Err(corrupt("checkpoint holds an encoder, not an aggregator".into()));
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let cfg = AggregatorConfig {
        d: fields[0],
        d_prime: fields[1],
        conv_out_channels: fields[2],
        conv_kernel: fields[3],
        n_class: fields[4],
        variant: if fields[5] == 0 { Variant::Bilinear } else { Variant::SelfAttention },
        lambda1: r.f64()?,
        lambda2: r.f64()?,
    };
    let mut model = AggregatorModel::init(cfg, 0)?;
    r.apply_params(&mut model.params)?;
    Ok(model)
}
