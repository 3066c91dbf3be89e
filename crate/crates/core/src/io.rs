//! Model files, dataset files, PGM image grids and metrics CSV.
//!
//! Model file layout (little-endian):
//!
//! ```text
//! "EINM1" | u32 header length | JSON header | tensor blobs | u32 CRC32
//! ```
//!
//! Each blob is `u32 ndim`, `ndim x u64` dims, then `f64` data in row-major
//! order. The checksum covers everything between the magic and itself, so a
//! truncated file always fails the checksum before anything else is parsed.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::compiler::{compile, Layer, LayeredCircuit};
use crate::error::PersistError;
use crate::expfam::ExpFamily;
use crate::model::{EinsumNetwork, ImageShape, LayerWeights, Parameters};
use crate::structures::{RegionGraph, StructureConfig};
use crate::trainer::{EpochMetrics, MixtureModel};

pub const MODEL_MAGIC: &[u8; 5] = b"EINM1";
pub const DATASET_MAGIC: &[u8; 5] = b"EIND1";
const FORMAT_VERSION: u32 = 1;

/// Everything persisted for a trained model. A single network is stored as a
/// one-component mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub mixture: MixtureModel,
    pub structure: Option<StructureConfig>,
    pub image: Option<ImageShape>,
    /// Free-form training record (configuration, metrics summary, ...).
    pub provenance: serde_json::Value,
}

impl ModelFile {
    pub fn new(net: EinsumNetwork) -> Self {
        ModelFile {
            mixture: MixtureModel::single(net),
            structure: None,
            image: None,
            provenance: serde_json::Value::Null,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    family: ExpFamily,
    k: usize,
    k_root: usize,
    structure: Option<StructureConfig>,
    image: Option<ImageShape>,
    region_graph: serde_json::Value,
    plan: LayeredCircuit,
    components: usize,
    provenance: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

fn tensor_list(net: &EinsumNetwork, c: usize) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (li, w) in net.params.layers.iter().enumerate() {
        match w {
            LayerWeights::Einsum(w) => out.push((
                format!("component{c}.layer{li}.einsum"),
                w.shape().to_vec(),
                w.iter().cloned().collect(),
            )),
            LayerWeights::Mixing(w) => out.push((
                format!("component{c}.layer{li}.mixing"),
                w.shape().to_vec(),
                w.iter().cloned().collect(),
            )),
        }
    }
    let phi = &net.params.leaves;
    out.push((
        format!("component{c}.leaves"),
        phi.shape().to_vec(),
        phi.iter().cloned().collect(),
    ));
    out
}

/// Serializes a model file to bytes.
pub fn model_to_bytes(model: &ModelFile) -> Vec<u8> {
    let first = &model.mixture.components[0];
    let mut tensors = vec![(
        "mixture.weights".to_string(),
        vec![model.mixture.weights.len()],
        model.mixture.weights.clone(),
    )];
    for (c, net) in model.mixture.components.iter().enumerate() {
        tensors.extend(tensor_list(net, c));
    }
    let header = Header {
        format: FORMAT_VERSION,
        family: first.family,
        k: first.circuit.k,
        k_root: first.circuit.k_root,
        structure: model.structure.clone(),
        image: model.image,
        region_graph: serde_json::from_str(&first.graph.to_json()).expect("graph json"),
        plan: first.circuit.clone(),
        components: model.mixture.components.len(),
        provenance: model.provenance.clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorInfo {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut body = Vec::new();
    body.extend_from_slice(&(header.len() as u32).to_le_bytes());
    body.extend_from_slice(&header);
    for (_, shape, data) in &tensors {
        body.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(MODEL_MAGIC.len() + body.len() + 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PersistError> {
        if self.pos + n > self.buf.len() {
            return Err(PersistError::Data(format!("unexpected end of data reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_blob(r: &mut Reader, info: &TensorInfo) -> Result<ArrayD<f64>, PersistError> {
    let ndim = r.u32(&info.name)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64(&info.name)? as usize);
    }
    if shape != info.shape {
        return Err(PersistError::Shape {
            tensor: info.name.clone(),
            detail: format!("header declares {:?}, blob has {:?}", info.shape, shape),
        });
    }
    let len: usize = shape.iter().product();
    let bytes = r.take(len * 8, &info.name)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length matches shape"))
}

fn expect_shape(name: &str, got: &[usize], want: &[usize]) -> Result<(), PersistError> {
    if got != want {
        return Err(PersistError::Shape {
            tensor: name.to_string(),
            detail: format!("model expects {want:?}, file has {got:?}"),
        });
    }
    Ok(())
}

/// Parses and verifies a model file.
pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelFile, PersistError> {
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(PersistError::Magic { expected: "EINM1" });
    }
    let rest = &bytes[MODEL_MAGIC.len()..];
    if rest.len() < 4 {
        return Err(PersistError::Checksum {
            stored: 0,
            computed: crc32fast::hash(&[]),
        });
    }
    let (body, tail) = rest.split_at(rest.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(PersistError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    let header_len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| PersistError::Header(e.to_string()))?;
    if header.format != FORMAT_VERSION {
        return Err(PersistError::Header(format!(
            "unsupported format version {}",
            header.format
        )));
    }
    let graph = RegionGraph::from_json(&header.region_graph.to_string())
        .map_err(|e| PersistError::Header(format!("region graph: {e}")))?;
    let circuit = compile(&graph, header.k, header.k_root)?;
    if circuit != header.plan {
        return Err(PersistError::Header(
            "stored layer plan does not match the region graph".into(),
        ));
    }
    let mut infos = header.tensors.iter();
    let mut next = |r: &mut Reader| -> Result<(String, ArrayD<f64>), PersistError> {
        let info = infos
            .next()
            .ok_or_else(|| PersistError::Header("fewer tensors declared than required".into()))?;
        Ok((info.name.clone(), read_blob(r, info)?))
    };

    let (name, weights) = next(&mut r)?;
    expect_shape(&name, weights.shape(), &[header.components])?;
    let weights: Vec<f64> = weights.iter().cloned().collect();
    let (d_vars, k, replica) = (circuit.d_vars, circuit.k, circuit.replica.num_replica);
    let mut components = Vec::with_capacity(header.components);
    for _ in 0..header.components {
        let mut layers = Vec::with_capacity(circuit.layers.len());
        for layer in &circuit.layers {
            let (name, t) = next(&mut r)?;
            layers.push(match layer {
                Layer::Einsum(plan) => {
                    expect_shape(&name, t.shape(), &[plan.len(), plan.k_out, k, k])?;
                    LayerWeights::Einsum(t.into_dimensionality().expect("checked shape"))
                }
                Layer::Mixing(plan) => {
                    expect_shape(&name, t.shape(), &[plan.len(), plan.dmax])?;
                    LayerWeights::Mixing(t.into_dimensionality().expect("checked shape"))
                }
            });
        }
        let (name, t) = next(&mut r)?;
        expect_shape(&name, t.shape(), &[d_vars, k, replica, header.family.stat_dim()])?;
        let leaves: Array4<f64> = t.into_dimensionality().expect("checked shape");
        components.push(EinsumNetwork {
            graph: graph.clone(),
            circuit: circuit.clone(),
            family: header.family,
            params: Parameters { layers, leaves },
        });
    }
    if r.pos != body.len() {
        return Err(PersistError::Data("trailing bytes after the last tensor".into()));
    }
    Ok(ModelFile {
        mixture: MixtureModel { components, weights },
        structure: header.structure,
        image: header.image,
        provenance: header.provenance,
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<(), PersistError> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile, PersistError> {
    model_from_bytes(&fs::read(path)?)
}

/// Element type of a binary dataset payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Divide `u8` payloads by 255.
    pub scale_u8: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { scale_u8: true }
    }
}

/// Loads a binary (`EIND1`) or CSV dataset. CSV files may start with a header
/// row, detected as a first row with any non-numeric field.
pub fn load_dataset(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Array2<f64>, PersistError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(DATASET_MAGIC) {
        dataset_from_binary(&bytes, opts)
    } else {
        dataset_from_csv(&bytes)
    }
}

pub fn dataset_from_binary(bytes: &[u8], opts: LoadOptions) -> Result<Array2<f64>, PersistError> {
    if !bytes.starts_with(DATASET_MAGIC) {
        return Err(PersistError::Magic { expected: "EIND1" });
    }
    let mut r = Reader {
        buf: bytes,
        pos: DATASET_MAGIC.len(),
    };
    let n = r.u32("sample count")? as usize;
    let d = r.u32("variable count")? as usize;
    let dtype = r.take(1, "dtype")?[0];
    let values: Vec<f64> = match dtype {
        0 => r
            .take(n * d * 4, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        1 => r
            .take(n * d, "payload")?
            .iter()
            .map(|&b| if opts.scale_u8 { b as f64 / 255.0 } else { b as f64 })
            .collect(),
        other => return Err(PersistError::Data(format!("unknown dtype code {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(PersistError::Data("payload longer than N x D".into()));
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("length checked"))
}

pub fn dataset_from_csv(bytes: &[u8]) -> Result<Array2<f64>, PersistError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| PersistError::Data(e.to_string()))?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(PersistError::Data(format!("row {}: {e}", i + 1))),
        }
    }
    let d = rows.first().map_or(0, |r| r.len());
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(PersistError::Data(format!(
            "row {} has {} fields, expected {d}",
            i + 1,
            r.len()
        )));
    }
    let n = rows.len();
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rectangular"))
}

pub fn save_dataset_binary(path: impl AsRef<Path>, x: &Array2<f64>, dtype: DType) -> Result<(), PersistError> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(x.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(x.ncols() as u32).to_le_bytes());
    match dtype {
        DType::F32 => {
            out.push(0);
            for v in x.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        DType::U8 => {
            out.push(1);
            for v in x.iter() {
                if !(0.0..=255.0).contains(v) || v.fract() != 0.0 {
                    return Err(PersistError::Data(format!("{v} is not a byte value")));
                }
                out.push(*v as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, x: &Array2<f64>) -> Result<(), PersistError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PersistError::Data(e.to_string()))?;
    for row in x.outer_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| PersistError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes images (one per row of `x`, `height x width` pixels each) as a
/// binary 8-bit PGM grid with `cols` images per grid row. Pixels are
/// `round(v · scale)` clamped to `0..=255`.
pub fn write_pgm_grid(
    path: impl AsRef<Path>,
    x: &Array2<f64>,
    shape: ImageShape,
    cols: usize,
    scale: f64,
) -> Result<(), PersistError> {
    let ImageShape { height, width } = shape;
    if x.ncols() != height * width {
        return Err(PersistError::Data(format!(
            "{} values per image, expected {height}x{width}",
            x.ncols()
        )));
    }
    let n = x.nrows();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let (gw, gh) = (cols * width, rows * height);
    let mut pixels = vec![0u8; gw * gh];
    for (i, img) in x.outer_iter().enumerate() {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..height {
            for xx in 0..width {
                let v = (img[y * width + xx] * scale).round().clamp(0.0, 255.0);
                pixels[(gy * height + y) * gw + gx * width + xx] = v as u8;
            }
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{gw} {gh}\n255\n")?;
    f.write_all(&pixels)?;
    Ok(())
}

/// Reads a binary 8-bit PGM into `(height, width, pixels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>), PersistError> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PersistError::Data("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(PersistError::Magic { expected: "P5" });
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| PersistError::Data(format!("PGM header: {e}")))
    };
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(PersistError::Data(format!("only 8-bit PGM is supported, maxval {max}")));
    }
    let data = bytes
        .get(pos + 1..pos + 1 + w * h)
        .ok_or_else(|| PersistError::Data("truncated PGM".into()))?;
    Ok((h, w, data.to_vec()))
}

/// Writes per-epoch metrics with columns `epoch,train_ll,valid_ll,wall_seconds`.
pub fn write_metrics(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<(), PersistError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PersistError::Data(e.to_string()))?;
    let err = |e: csv::Error| PersistError::Data(e.to_string());
    w.write_record(["epoch", "train_ll", "valid_ll", "wall_seconds"])
        .map_err(err)?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.train_ll.to_string(),
            m.valid_ll.map_or(String::new(), |v| v.to_string()),
            m.wall_seconds.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine;
    use crate::model::InitOptions;
    use crate::oracle::{random_fixture, FixtureSpec};
    use crate::structures::{poon_domingos, SplitAxes};

    fn sample_model() -> ModelFile {
        let cfg = StructureConfig::Pd {
            height: 2,
            width: 3,
            delta: vec![1],
            axes: SplitAxes::Both,
        };
        let rg = poon_domingos(2, 3, &cfg).unwrap();
        let net = EinsumNetwork::random(rg, 3, 2, ExpFamily::Gaussian, &InitOptions::default(), 4).unwrap();
        ModelFile {
            mixture: MixtureModel::single(net),
            structure: Some(cfg),
            image: Some(ImageShape { height: 2, width: 3 }),
            provenance: serde_json::json!({"epochs": 3}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample_model();
        let back = model_from_bytes(&model_to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        let f = random_fixture(1, &FixtureSpec::default());
        let m = ModelFile::new(f.net.clone());
        let back = model_from_bytes(&model_to_bytes(&m)).unwrap();
        let marg = vec![false; f.net.d_vars()];
        let a = engine::forward(&f.net, f.x.view(), &marg).unwrap().log_likelihood;
        let b = engine::forward(&back.mixture.components[0], f.x.view(), &marg)
            .unwrap()
            .log_likelihood;
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncation_fails_the_checksum() {
        let bytes = model_to_bytes(&sample_model());
        for cut in [bytes.len() - 1, bytes.len() / 2, 12, 7] {
            assert!(
                matches!(model_from_bytes(&bytes[..cut]), Err(PersistError::Checksum { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn wrong_magic_is_reported() {
        let mut bytes = model_to_bytes(&sample_model());
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(PersistError::Magic { .. })));
    }

    #[test]
    fn shape_disagreement_names_the_tensor() {
        let m = sample_model();
        let bytes = model_to_bytes(&m);
        // Rewrite the header so one tensor claims a different shape, then
        // re-seal the checksum.
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[9..9 + header_len]).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(header).unwrap();
        let tensors = json["tensors"].as_array_mut().unwrap();
        let last = tensors.last_mut().unwrap();
        let name = last["name"].as_str().unwrap().to_string();
        last["shape"][0] = serde_json::json!(99);
        let header = serde_json::to_vec(&json).unwrap();
        let mut body = (header.len() as u32).to_le_bytes().to_vec();
        body.extend_from_slice(&header);
        body.extend_from_slice(&bytes[9 + header_len..bytes.len() - 4]);
        let mut out = MODEL_MAGIC.to_vec();
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        match model_from_bytes(&out) {
            Err(PersistError::Shape { tensor, .. }) => assert_eq!(tensor, name),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn csv_and_binary_agree() {
        let dir = tempfile::tempdir().unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let csv_path = dir.path().join("d.csv");
        fs::write(&csv_path, "a,b,c\n0,1,2\n3,4,5\n6,7,8\n9,10,11\n12,13,14\n").unwrap();
        let bin_f32 = dir.path().join("d.f32");
        let bin_u8 = dir.path().join("d.u8");
        save_dataset_binary(&bin_f32, &x, DType::F32).unwrap();
        save_dataset_binary(&bin_u8, &x, DType::U8).unwrap();
        let raw = LoadOptions { scale_u8: false };
        assert_eq!(load_dataset(&csv_path, raw).unwrap(), x);
        assert_eq!(load_dataset(&bin_f32, raw).unwrap(), x);
        assert_eq!(load_dataset(&bin_u8, raw).unwrap(), x);
        assert_eq!(
            load_dataset(&bin_u8, LoadOptions::default()).unwrap(),
            x.mapv(|v| v / 255.0)
        );
        let plain = dir.path().join("p.csv");
        save_csv(&plain, &x).unwrap();
        assert_eq!(load_dataset(&plain, raw).unwrap(), x);
    }

    #[test]
    fn ragged_csv_is_rejected() {
        assert!(dataset_from_csv(b"1,2\n3\n").is_err());
        assert!(dataset_from_csv(b"1,2\n3,x\n").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 / 11.0);
        write_pgm_grid(&p, &x, ImageShape { height: 2, width: 2 }, 2, 255.0).unwrap();
        let (h, w, px) = read_pgm(&p).unwrap();
        assert_eq!((h, w), (4, 4));
        assert_eq!(px[0], 0);
        assert_eq!(px[2], (4.0f64 / 11.0 * 255.0).round() as u8);
        assert_eq!(px[15], 0);
    }

    #[test]
    fn metrics_csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = vec![EpochMetrics {
            epoch: 1,
            train_ll: -1.5,
            valid_ll: None,
            wall_seconds: 0.25,
        }];
        write_metrics(&p, &m).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "epoch,train_ll,valid_ll,wall_seconds\n1,-1.5,,0.25\n");
    }
}
