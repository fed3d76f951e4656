//! File formats: result tables, dataset CSV, model checkpoints and the
//! population manifest.

use std::io::{Read, Write};
use std::path::Path;

use gradfisher_core::fedsim::{Composition, User};
use gradfisher_core::model::{Activation, DenseLayer};
use gradfisher_core::{Example, Matrix, ModelParams, Vector};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] gradfisher_core::Error),
}

/// 17 significant digits, so every value reads back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// An in-memory CSV file with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

fn csv_writer<W: Write>(inner: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(inner)
}

/// One row per example: the integer label, then the d input values.
pub fn write_dataset<W: Write>(out: W, data: &[Example]) -> Result<(), FormatError> {
    let d = data.first().map_or(0, |e| e.x.len());
    let mut w = csv_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (row, e) in data.iter().enumerate() {
        if e.x.len() != d {
            return Err(FormatError::Row {
                row: row + 1,
                message: format!("{} features, expected {d}", e.x.len()),
            });
        }
        let mut rec = vec![e.y.to_string()];
        rec.extend(e.x.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_dataset`]. A header row is optional.
pub fn read_dataset<R: Read>(input: R) -> Result<Vec<Example>, FormatError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    let mut d = None;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |message: String| FormatError::Row { row, message };
        if i == 0 && rec.get(0).is_some_and(|s| s.parse::<usize>().is_err()) {
            continue;
        }
        let y = rec
            .get(0)
            .ok_or_else(|| bad("empty row".into()))?
            .parse::<usize>()
            .map_err(|e| bad(format!("label: {e}")))?;
        let x = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("feature {s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if x.is_empty() {
            return Err(bad("no features".into()));
        }
        match d {
            None => d = Some(x.len()),
            Some(d) if d != x.len() => return Err(bad(format!("{} features, expected {d}", x.len()))),
            _ => {}
        }
        out.push(Example::new(x, y));
    }
    Ok(out)
}

const MAGIC: &[u8; 8] = b"GFCKPT01";

fn put_u64<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u64).to_le_bytes())
}

fn get_u64<R: Read>(r: &mut R) -> Result<usize, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| FormatError::Checkpoint("size overflow".into()))
}

fn get_f64s<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Vec<f64>, FormatError> {
    let bytes = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| FormatError::Checkpoint("size overflow".into()))?;
    let mut buf = Vec::new();
    r.take(bytes as u64).read_to_end(&mut buf)?;
    if buf.len() != bytes {
        return Err(FormatError::Checkpoint("truncated".into()));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Layout (all little-endian): magic, input dim, layer count, then per
/// extractor layer (width, activation 0 = ReLU / 1 = identity), class count,
/// then every parameter block row-major as f64 in [`ModelParams::blocks`]
/// order.
pub fn write_checkpoint<W: Write>(mut out: W, params: &ModelParams) -> Result<(), FormatError> {
    out.write_all(MAGIC)?;
    put_u64(&mut out, params.input_dim())?;
    put_u64(&mut out, params.layers.len())?;
    for l in &params.layers {
        put_u64(&mut out, l.weight.rows())?;
        put_u64(&mut out, matches!(l.activation, Activation::Identity) as usize)?;
    }
    put_u64(&mut out, params.n_classes())?;
    for block in params.blocks() {
        for v in block {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams, FormatError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::Checkpoint("wrong magic".into()));
    }
    let input_dim = get_u64(&mut input)?;
    let n_layers = get_u64(&mut input)?;
    if n_layers == 0 || n_layers > 1024 {
        return Err(FormatError::Checkpoint(format!("{n_layers} layers")));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let width = get_u64(&mut input)?;
        let activation = match get_u64(&mut input)? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            k => return Err(FormatError::Checkpoint(format!("activation code {k}"))),
        };
        shapes.push((width, activation));
    }
    let n_classes = get_u64(&mut input)?;
    let mut layers = Vec::with_capacity(n_layers);
    let mut fan_in = input_dim;
    for (width, activation) in shapes {
        let w = get_f64s(&mut input, width, fan_in)?;
        let b = get_f64s(&mut input, width, 1)?;
        layers.push(DenseLayer {
            weight: Matrix::from_vec(width, fan_in, w)?,
            bias: Vector(b),
            activation,
        });
        fan_in = width;
    }
    let hw = get_f64s(&mut input, n_classes, fan_in)?;
    let hb = get_f64s(&mut input, n_classes, 1)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FormatError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    let params = ModelParams {
        layers,
        head_weight: Matrix::from_vec(n_classes, fan_in, hw)?,
        head_bias: Vector(hb),
    };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), FormatError> {
    write_checkpoint(std::io::BufWriter::new(std::fs::File::create(path)?), params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, FormatError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestUser {
    pub user_id: usize,
    pub label_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationManifest {
    pub seed: u64,
    pub composition: String,
    pub batch_size: usize,
    pub users: Vec<ManifestUser>,
}

pub fn composition_name(c: Composition) -> String {
    match c {
        Composition::Random => "random".into(),
        Composition::SingleClass { class: Some(k) } => format!("single-class:{k}"),
        Composition::SingleClass { class: None } => "single-class".into(),
        Composition::KOfBatch { c, k } => format!("{k}-of-batch:{c}"),
    }
}

pub fn manifest(seed: u64, composition: Composition, users: &[User], n_classes: usize) -> PopulationManifest {
    PopulationManifest {
        seed,
        composition: composition_name(composition),
        batch_size: users.first().map_or(0, |u| u.batch.len()),
        users: users
            .iter()
            .map(|u| ManifestUser {
                user_id: u.user_id,
                label_histogram: u.label_histogram(n_classes),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradfisher_core::model::Architecture;
    use gradfisher_core::RandomSource;

    #[test]
    fn float_format_round_trips() {
        for v in [
            0.1,
            -1.0 / 3.0,
            1e-300,
            6.02e23,
            0.0,
            -0.0,
            f64::MIN_POSITIVE,
            123456789.123456789,
        ] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_opt(None), "");
    }

    #[test]
    fn table_uses_lf() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "2".into()]);
        assert_eq!(t.to_bytes(), b"a,b\n1,2\n");
    }

    #[test]
    fn dataset_round_trip() {
        let data = vec![
            Example::new(vec![0.1, -2.5, 3.0], 4),
            Example::new(vec![1e-20, 0.0, -7.25], 0),
        ];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("label,x0,x1,x2\n"));
        assert_eq!(read_dataset(&buf[..]).unwrap(), data);
        // Headerless input is accepted too.
        assert_eq!(read_dataset(&b"1,0.5,2\n0,1,1\n"[..]).unwrap().len(), 2);
    }

    #[test]
    fn dataset_errors_name_the_row() {
        let e = read_dataset(&b"label,x0\n1,0.5\n2,abc\n"[..]).unwrap_err();
        assert!(matches!(e, FormatError::Row { row: 3, .. }), "{e}");
        let e = read_dataset(&b"1,0.5,1\n2,0.1\n"[..]).unwrap_err();
        assert!(matches!(e, FormatError::Row { row: 2, .. }), "{e}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut arch = Architecture::default();
        arch.feature_activation = Activation::Identity;
        let p = ModelParams::init(&arch, RandomSource::new(3, 1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let n: usize = p.blocks().iter().map(|b| b.len()).sum();
        assert_eq!(buf.len(), 8 + 8 * (2 + 2 * 3 + 1) + 8 * n);
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), p);
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
