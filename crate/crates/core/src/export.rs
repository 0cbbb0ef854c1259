//! PSF1: a small self-describing binary format for trained UNET sanitizers.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "PSF1" | u32 version | u16 C, H, W | u32 op_count | op* | u32 crc32
//! ```
//!
//! Each op starts with a `u8` kind: `0` conv2d (`u16 in, out, kh, kw, stride,
//! pad`, then `f32` weights `[out, in, kh, kw]` and `f32` bias `[out]`), `1`
//! leaky ReLU (`f32` slope), `2` 2×2 max-pool, `3` nearest 2× upsample, `4`
//! channel concat with the output of an earlier op (`u32` op index; channel
//! order is `[current, source]`), `5` sigmoid. The CRC32 covers every byte
//! after the magic.
//!
//! Training metadata (α, mode, seed, timestamp, whether the bundle is the
//! trainable stage of a stochastic sanitizer) lives in a JSON sidecar next to
//! the binary so the binary layout stays fixed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::models::{SanitizerKind, SanitizerModel, Stage, UnetS, LEAKY_SLOPE};
use crate::nn::layers::{concat_channels, leaky_relu, maxpool2, sigmoid, upsample2};
use crate::nn::{Conv2d, Tensor};

pub const PSF1_MAGIC: [u8; 4] = *b"PSF1";
pub const PSF1_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d(Conv2d),
    LeakyRelu(f32),
    MaxPool,
    Upsample,
    ConcatSkip { source: u32 },
    Sigmoid,
}

impl Op {
    fn kind(&self) -> u8 {
        match self {
            Op::Conv2d(_) => 0,
            Op::LeakyRelu(_) => 1,
            Op::MaxPool => 2,
            Op::Upsample => 3,
            Op::ConcatSkip { .. } => 4,
            Op::Sigmoid => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub architecture: String,
    #[serde(default)]
    pub stochastic: bool,
    pub alpha: Option<f64>,
    pub mode: Option<String>,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
}

impl Default for BundleMetadata {
    fn default() -> Self {
        Self {
            architecture: "unet-s".into(),
            stochastic: false,
            alpha: None,
            mode: None,
            seed: None,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanitizerBundle {
    pub format_version: u32,
    pub input_shape: ImageShape,
    pub ops: Vec<Op>,
    pub metadata: BundleMetadata,
}

/// Sidecar path holding the JSON metadata for a bundle at `path`.
pub fn metadata_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

impl SanitizerBundle {
    /// The normative 18-op listing of a UNET-S.
    pub fn from_unet(unet: &UnetS, metadata: BundleMetadata) -> Self {
        let conv = |c: &Conv2d| Op::Conv2d(c.clone());
        let act = || Op::LeakyRelu(LEAKY_SLOPE);
        let ops = vec![
            conv(&unet.enc1),
            act(),
            conv(&unet.down1),
            act(),
            conv(&unet.down2),
            act(),
            conv(&unet.mid),
            act(),
            Op::Upsample,
            Op::ConcatSkip { source: 3 },
            conv(&unet.up1),
            act(),
            Op::Upsample,
            Op::ConcatSkip { source: 1 },
            conv(&unet.up2),
            act(),
            conv(&unet.out),
            Op::Sigmoid,
        ];
        Self {
            format_version: PSF1_VERSION,
            input_shape: unet.input_shape,
            ops,
            metadata,
        }
    }

    /// Rebuild a UNET-S, rejecting any op list that deviates from the
    /// normative topology.
    pub fn to_unet(&self) -> Result<UnetS> {
        let reference = Self::from_unet(&UnetS::zeroed(self.input_shape), self.metadata.clone());
        if reference.ops.len() != self.ops.len() {
            return Err(Error::format(
                "op_count",
                format!("expected {} ops, found {}", reference.ops.len(), self.ops.len()),
            ));
        }
        let mut convs = Vec::with_capacity(7);
        for (i, (want, got)) in reference.ops.iter().zip(&self.ops).enumerate() {
            let same = match (want, got) {
                (Op::Conv2d(a), Op::Conv2d(b)) => {
                    (a.in_ch, a.out_ch, a.kernel, a.stride, a.pad) == (b.in_ch, b.out_ch, b.kernel, b.stride, b.pad)
                }
                (Op::LeakyRelu(a), Op::LeakyRelu(b)) => a == b,
                (a, b) => a == b,
            };
            if !same {
                return Err(Error::format("ops", format!("op {i} does not match the UNET-S topology")));
            }
            if let Op::Conv2d(c) = got {
                convs.push(c.clone());
            }
        }
        let mut it = convs.into_iter();
        let mut next = || it.next().expect("seven convolutions checked above");
        Ok(UnetS {
            input_shape: self.input_shape,
            enc1: next(),
            down1: next(),
            down2: next(),
            mid: next(),
            up1: next(),
            up2: next(),
            out: next(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&PSF1_MAGIC);
        buf.extend_from_slice(&self.format_version.to_le_bytes());
        let (c, h, w) = self.input_shape;
        for d in [c, h, w] {
            buf.extend_from_slice(&(d as u16).to_le_bytes());
        }
        buf.extend_from_slice(&(self.ops.len() as u32).to_le_bytes());
        for op in &self.ops {
            buf.push(op.kind());
            match op {
                Op::Conv2d(conv) => {
                    for d in [conv.in_ch, conv.out_ch, conv.kernel, conv.kernel, conv.stride, conv.pad] {
                        buf.extend_from_slice(&(d as u16).to_le_bytes());
                    }
                    for v in conv.weight.iter().chain(&conv.bias) {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Op::LeakyRelu(slope) => buf.extend_from_slice(&slope.to_le_bytes()),
                Op::ConcatSkip { source } => buf.extend_from_slice(&source.to_le_bytes()),
                Op::MaxPool | Op::Upsample | Op::Sigmoid => {}
            }
        }
        let crc = crc32fast::hash(&buf[4..]);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    /// Parse and validate PSF1 bytes. Metadata is not part of the binary and
    /// comes back as the default.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != PSF1_MAGIC {
            return Err(Error::format("magic", "file does not start with \"PSF1\""));
        }
        if bytes.len() < 8 {
            return Err(Error::format("version", "truncated before version"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != PSF1_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        if bytes.len() < 8 + 6 + 4 + 4 {
            return Err(Error::format("header", "truncated header"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if crc32fast::hash(&bytes[4..body_end]) != stored {
            return Err(Error::format("checksum", "CRC32 mismatch"));
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: 8,
        };
        let c = r.u16("input_shape")? as usize;
        let h = r.u16("input_shape")? as usize;
        let w = r.u16("input_shape")? as usize;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::format("input_shape", format!("degenerate shape ({c}, {h}, {w})")));
        }
        let op_count = r.u32("op_count")? as usize;
        let mut ops = Vec::with_capacity(op_count.min(1024));
        for i in 0..op_count {
            let op = match r.u8("op_kind")? {
                0 => {
                    let mut dims = [0usize; 6];
                    for d in &mut dims {
                        *d = r.u16("conv2d")? as usize;
                    }
                    let [in_ch, out_ch, kh, kw, stride, pad] = dims;
                    if kh != kw || kh == 0 || stride == 0 || in_ch == 0 || out_ch == 0 {
                        return Err(Error::format("conv2d", format!("op {i} has unsupported geometry {dims:?}")));
                    }
                    let weight = r.f32s("conv2d_weights", out_ch * in_ch * kh * kw)?;
                    let bias = r.f32s("conv2d_bias", out_ch)?;
                    Op::Conv2d(Conv2d {
                        in_ch,
                        out_ch,
                        kernel: kh,
                        stride,
                        pad,
                        weight,
                        bias,
                    })
                }
                1 => Op::LeakyRelu(r.f32("leaky_relu")?),
                2 => Op::MaxPool,
                3 => Op::Upsample,
                4 => {
                    let source = r.u32("concat_skip")?;
                    if source as usize >= i {
                        return Err(Error::format(
                            "concat_skip",
                            format!("op {i} references op {source}, which does not precede it"),
                        ));
                    }
                    Op::ConcatSkip { source }
                }
                5 => Op::Sigmoid,
                k => return Err(Error::format("op_kind", format!("op {i} has unknown kind {k}"))),
            };
            ops.push(op);
        }
        if r.pos != r.bytes.len() {
            return Err(Error::format("trailer", format!("{} unexpected bytes after ops", r.bytes.len() - r.pos)));
        }
        let bundle = Self {
            format_version: version,
            input_shape: (c, h, w),
            ops,
            metadata: BundleMetadata::default(),
        };
        bundle.output_shapes()?;
        Ok(bundle)
    }

    /// Per-op output shapes, validating channel counts along the way.
    pub fn output_shapes(&self) -> Result<Vec<ImageShape>> {
        let mut shapes: Vec<ImageShape> = Vec::with_capacity(self.ops.len());
        let mut cur = self.input_shape;
        for (i, op) in self.ops.iter().enumerate() {
            let bad = |reason: String| Error::format("ops", format!("op {i}: {reason}"));
            cur = match op {
                Op::Conv2d(conv) => {
                    if conv.in_ch != cur.0 {
                        return Err(bad(format!("conv expects {} channels, gets {}", conv.in_ch, cur.0)));
                    }
                    if cur.1 + 2 * conv.pad < conv.kernel || cur.2 + 2 * conv.pad < conv.kernel {
                        return Err(bad("conv kernel larger than padded input".into()));
                    }
                    let (h, w) = conv.output_hw(cur.1, cur.2);
                    (conv.out_ch, h, w)
                }
                Op::MaxPool => {
                    if cur.1 % 2 != 0 || cur.2 % 2 != 0 {
                        return Err(bad("max-pool needs even spatial size".into()));
                    }
                    (cur.0, cur.1 / 2, cur.2 / 2)
                }
                Op::Upsample => (cur.0, cur.1 * 2, cur.2 * 2),
                Op::ConcatSkip { source } => {
                    let src = shapes[*source as usize];
                    if (src.1, src.2) != (cur.1, cur.2) {
                        return Err(bad(format!("skip source {source} has spatial size {:?}", (src.1, src.2))));
                    }
                    (cur.0 + src.0, cur.1, cur.2)
                }
                Op::LeakyRelu(_) | Op::Sigmoid => cur,
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Interpret the op list directly, independent of [`UnetS`].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [_, c, h, w] = x.shape();
        if (c, h, w) != self.input_shape {
            return Err(Error::Shape {
                expected: self.input_shape,
                actual: (c, h, w),
            });
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        let mut cur = x.clone();
        for op in &self.ops {
            cur = match op {
                Op::Conv2d(conv) => conv.forward(&cur),
                Op::LeakyRelu(slope) => {
                    leaky_relu(&mut cur, *slope);
                    cur
                }
                Op::MaxPool => maxpool2(&cur).0,
                Op::Upsample => upsample2(&cur),
                Op::ConcatSkip { source } => concat_channels(&cur, &outputs[*source as usize]),
                Op::Sigmoid => {
                    sigmoid(&mut cur);
                    cur
                }
            };
            outputs.push(cur.clone());
        }
        Ok(cur)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, field: &'static str, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(field, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(field, 1)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(field, 2)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(field, 4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, field: &'static str, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(field, n.checked_mul(4).ok_or_else(|| Error::format(field, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

/// Write `bytes` to `path` via a temporary sibling and a rename, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Export the trainable UNET stage of `model` to `path` (plus metadata sidecar).
pub fn export_sanitizer(model: &SanitizerModel, metadata: BundleMetadata, path: &Path) -> Result<SanitizerBundle> {
    let unet = match &model.stage {
        Stage::Unet(u) => u,
        Stage::Identity => return Err(Error::config("identity sanitizer has no UNET to export")),
    };
    let metadata = BundleMetadata {
        stochastic: model.kind == SanitizerKind::Stochastic,
        ..metadata
    };
    let bundle = SanitizerBundle::from_unet(unet, metadata);
    write_atomic(path, &bundle.encode())?;
    write_atomic(&metadata_path(path), &serde_json::to_vec_pretty(&bundle.metadata)?)?;
    Ok(bundle)
}

/// Read a bundle and its sidecar (if present).
pub fn read_bundle(path: &Path) -> Result<SanitizerBundle> {
    let mut bundle = SanitizerBundle::decode(&fs::read(path)?)?;
    let meta = metadata_path(path);
    if meta.exists() {
        bundle.metadata = serde_json::from_slice(&fs::read(meta)?)?;
    }
    Ok(bundle)
}

/// Import a sanitizer. Stochastic bundles come back without their resampler;
/// attach one with [`SanitizerModel::set_resampler`].
pub fn import_sanitizer(path: &Path) -> Result<SanitizerModel> {
    let bundle = read_bundle(path)?;
    let unet = bundle.to_unet()?;
    Ok(if bundle.metadata.stochastic {
        SanitizerModel::stochastic(Stage::Unet(unet), bundle.input_shape, None)
    } else {
        SanitizerModel::deterministic(unet)
    })
}

/// Import and check the input shape against the data it will be applied to.
pub fn import_sanitizer_for(path: &Path, expected: ImageShape) -> Result<SanitizerModel> {
    let model = import_sanitizer(path)?;
    if model.input_shape != expected {
        return Err(Error::Shape {
            expected,
            actual: model.input_shape,
        });
    }
    Ok(model)
}
