//! Little-endian checkpoint container for models and adapter sets.
//!
//! ```text
//! magic "IFTK" | version u32 | kind u8 (0 = model, 1 = adapters)
//! | in_channels u32 | height u32 | width u32 | conv1_padding u32
//! model:    5 x (weight tensor, bias tensor)
//! adapters: method_len u32 | method utf-8 | count u32
//!           | count x (src u32 | dst u32 | rank u32 | A tensor | B tensor)
//! tensor:   ndim u32 | dims u32 x ndim | f32 x product(dims)
//! ```
//!
//! Files are written to a sibling temp file and renamed into place.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, NUM_LAYERS};
use crate::peft::{Method, PeftModel};
use crate::tensor::{LayerParams, Tensor};

const MAGIC: &[u8; 4] = b"IFTK";
const VERSION: u32 = 1;
const KIND_MODEL: u8 = 0;
const KIND_ADAPTERS: u8 = 1;

fn write_tensor(w: &mut impl Write, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> std::io::Result<Tensor<f32>> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    if ndim > 8 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "tensor rank too large",
        ));
    }
    let shape = (0..ndim)
        .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Tensor::new(&shape, data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(path, e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        body(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

fn write_header(w: &mut impl Write, kind: u8, spec: &ModelSpec) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(kind)?;
    for v in [
        spec.in_channels,
        spec.height,
        spec.width,
        spec.conv1_padding,
    ] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path, kind: u8) -> Result<ModelSpec> {
    let trunc = |_| Error::Truncated {
        path: path.to_path_buf(),
        detail: "checkpoint header".into(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: u32::from_be_bytes(magic),
            expected: u32::from_be_bytes(*MAGIC),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("unsupported version {version}"),
        });
    }
    let found = r.read_u8().map_err(trunc)?;
    if found != kind {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("expected kind {kind}, found {found}"),
        });
    }
    let mut f = [0usize; 4];
    for v in &mut f {
        *v = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    }
    ModelSpec::new(f[0], f[1], f[2], f[3])
}

fn body_error(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            path: path.to_path_buf(),
            detail: "checkpoint body".into(),
        },
        _ => Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        },
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra).map_err(|e| Error::io(path, e))? {
        0 => Ok(()),
        _ => Err(Error::Format {
            what: "checkpoint",
            detail: "trailing bytes".into(),
        }),
    }
}

pub fn save_model(path: &Path, model: &Model<f32>) -> Result<()> {
    write_atomic(path, |w| {
        write_header(w, KIND_MODEL, model.spec())?;
        for layer in model.layers() {
            write_tensor(w, &layer.weight)?;
            write_tensor(w, &layer.bias)?;
        }
        Ok(())
    })
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let mut r = open(path)?;
    let spec = read_header(&mut r, path, KIND_MODEL)?;
    let layers = (0..NUM_LAYERS)
        .map(|_| {
            Ok(LayerParams {
                weight: read_tensor(&mut r)?,
                bias: read_tensor(&mut r)?,
            })
        })
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(body_error(path))?;
    expect_eof(&mut r, path)?;
    Model::from_layers(spec, layers)
}

pub fn save_adapters(path: &Path, peft: &PeftModel<f32>) -> Result<()> {
    write_atomic(path, |w| {
        write_header(w, KIND_ADAPTERS, peft.model.spec())?;
        let name = peft.method.name().as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        w.write_u32::<LittleEndian>(peft.adapters.len() as u32)?;
        for ad in &peft.adapters {
            for v in [ad.src, ad.dst, ad.rank()] {
                w.write_u32::<LittleEndian>(v as u32)?;
            }
            write_tensor(w, &ad.a)?;
            write_tensor(w, &ad.b)?;
        }
        Ok(())
    })
}

/// Loads an adapter set and attaches it to `model`.
pub fn load_adapters(path: &Path, model: Model<f32>) -> Result<PeftModel<f32>> {
    let mut r = open(path)?;
    let spec = read_header(&mut r, path, KIND_ADAPTERS)?;
    if spec != *model.spec() {
        return Err(Error::InvalidArgument(
            "adapter checkpoint targets a different model shape".into(),
        ));
    }
    let err = body_error(path);
    let len = r.read_u32::<LittleEndian>().map_err(&err)? as usize;
    if len > 64 {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "method name too long".into(),
        });
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(&err)?;
    let method: Method = String::from_utf8_lossy(&name).parse()?;
    let count = r.read_u32::<LittleEndian>().map_err(&err)? as usize;
    let mut adapters = Vec::with_capacity(count.min(16));
    for _ in 0..count {
        let src = r.read_u32::<LittleEndian>().map_err(&err)? as usize;
        let dst = r.read_u32::<LittleEndian>().map_err(&err)? as usize;
        let rank = r.read_u32::<LittleEndian>().map_err(&err)? as usize;
        let a = read_tensor(&mut r).map_err(&err)?;
        let b = read_tensor(&mut r).map_err(&err)?;
        if a.shape().first() != Some(&rank) || b.shape().get(1) != Some(&rank) {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("adapter {src}->{dst} factors disagree with rank {rank}"),
            });
        }
        adapters.push(Adapter { a, b, src, dst });
    }
    expect_eof(&mut r, path)?;
    PeftModel::from_parts(method, model, adapters)
}
