//! On-disk formats.
//!
//! Arrays are stored as: magic `PACEARR\0`, u32 LE rank, rank × u64 LE dims,
//! then the row-major little-endian payload (f64, or i64 for labels).
//! A dataset is a directory holding `manifest.json` and one array file per
//! field. A model is a single file: magic `PACEMDL\0`, u64 LE header length,
//! a JSON header, then the arrays μ, Σ, α, H, β in that framing.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{PaceError, Result};
use crate::model::{ConceptBank, Dataset, HeadParams, ImageRecord, Split, TrainConfig};
use crate::numkit::SpdMatrix;
use crate::synth::GroundTruth;

pub const ARRAY_MAGIC: &[u8; 8] = b"PACEARR\0";
pub const MODEL_MAGIC: &[u8; 8] = b"PACEMDL\0";
pub const FORMAT_VERSION: u32 = 1;

fn header(dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * dims.len());
    out.extend_from_slice(ARRAY_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

/// Serialize an f64 array with the given shape.
pub fn encode_f64(dims: &[usize], data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = header(dims);
    out.reserve(8 * data.len());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_i64(dims: &[usize], data: &[i64]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = header(dims);
    out.reserve(8 * data.len());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Sequential reader over one or more framed arrays in a byte buffer.
pub struct ArrayReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: PathBuf,
}

impl<'a> ArrayReader<'a> {
    pub fn new(bytes: &'a [u8], file: impl Into<PathBuf>) -> Self {
        ArrayReader {
            bytes,
            pos: 0,
            file: file.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(PaceError::format(
                &self.file,
                format!("truncated {what} at byte {}", self.pos),
            )),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        if self.take(8, "magic")? != ARRAY_MAGIC {
            return Err(PaceError::format(&self.file, "bad array magic"));
        }
        let rank = u32::from_le_bytes(self.take(4, "rank")?.try_into().expect("4 bytes"));
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = self.u64("dimension")?;
            dims.push(usize::try_from(d).map_err(|_| PaceError::format(&self.file, "dimension overflows usize"))?);
        }
        Ok(dims)
    }

    fn payload_len(&self, dims: &[usize]) -> Result<usize> {
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| PaceError::format(&self.file, "array size overflows"))
    }

    pub fn read_f64(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let dims = self.dims()?;
        let bytes = self.take(self.payload_len(&dims)?, "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((dims, data))
    }

    pub fn read_i64(&mut self) -> Result<(Vec<usize>, Vec<i64>)> {
        let dims = self.dims()?;
        let bytes = self.take(self.payload_len(&dims)?, "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((dims, data))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(PaceError::format(
                &self.file,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PaceError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PaceError::io(path, e))
}

pub fn write_array_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    write_file(path, &encode_f64(dims, data))
}

pub fn read_array_f64(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = read_file(path)?;
    let mut r = ArrayReader::new(&bytes, path);
    let out = r.read_f64()?;
    r.finish()?;
    Ok(out)
}

pub fn read_array_i64(path: &Path) -> Result<(Vec<usize>, Vec<i64>)> {
    let bytes = read_file(path)?;
    let mut r = ArrayReader::new(&bytes, path);
    let out = r.read_i64()?;
    r.finish()?;
    Ok(out)
}

fn expect_dims(file: &Path, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(PaceError::format(file, format!("shape {got:?} does not match manifest {want:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub embeddings: String,
    pub attentions: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed_embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed_attentions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub d: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub split: Vec<Split>,
    pub has_perturbed: bool,
    pub files: DatasetFiles,
    pub ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed_ids: Option<Vec<String>>,
}

pub const MANIFEST: &str = "manifest.json";

fn flatten<'a>(records: impl Iterator<Item = &'a ImageRecord>, pick: impl Fn(&ImageRecord) -> Vec<f64>) -> Vec<f64> {
    records.flat_map(pick).collect()
}

/// Write `dataset` into `dir` (created if missing).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PaceError::io(dir, e))?;
    let m = dataset.len();
    let j = dataset.num_patches().unwrap_or(0);
    let d = dataset.dim().unwrap_or(0);
    let twins = dataset.records.iter().filter(|r| r.perturbed.is_some()).count();
    if twins != 0 && twins != m {
        return Err(PaceError::Domain(format!(
            "{twins} of {m} records have perturbed twins; the format needs all or none"
        )));
    }
    let has_perturbed = m > 0 && twins == m;
    let twin = |r: &ImageRecord| -> ImageRecord { (**r.perturbed.as_ref().expect("checked")).clone() };

    let files = DatasetFiles {
        embeddings: "embeddings.bin".into(),
        attentions: "attentions.bin".into(),
        labels: "labels.bin".into(),
        perturbed_embeddings: has_perturbed.then(|| "perturbed_embeddings.bin".into()),
        perturbed_attentions: has_perturbed.then(|| "perturbed_attentions.bin".into()),
    };
    write_array_f64(
        &dir.join(&files.embeddings),
        &[m, j, d],
        &flatten(dataset.records.iter(), |r| r.embeddings.iter().copied().collect()),
    )?;
    write_array_f64(
        &dir.join(&files.attentions),
        &[m, j],
        &flatten(dataset.records.iter(), |r| r.attentions.to_vec()),
    )?;
    let labels: Vec<i64> = dataset.records.iter().map(|r| r.predicted_label as i64).collect();
    write_file(&dir.join(&files.labels), &encode_i64(&[m], &labels))?;
    if has_perturbed {
        write_array_f64(
            &dir.join(files.perturbed_embeddings.as_ref().expect("set")),
            &[m, j, d],
            &flatten(dataset.records.iter(), |r| twin(r).embeddings.iter().copied().collect()),
        )?;
        write_array_f64(
            &dir.join(files.perturbed_attentions.as_ref().expect("set")),
            &[m, j],
            &flatten(dataset.records.iter(), |r| twin(r).attentions.to_vec()),
        )?;
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        d,
        j,
        n: dataset.num_classes,
        m,
        split: dataset.splits.clone(),
        has_perturbed,
        files,
        ids: dataset.records.iter().map(|r| r.id.clone()).collect(),
        perturbed_ids: has_perturbed.then(|| dataset.records.iter().map(|r| twin(r).id).collect()),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), text.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = read_file(&path)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| PaceError::format(&path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(PaceError::format(&path, format!("unsupported version {}", manifest.version)));
    }
    if manifest.split.len() != manifest.m || manifest.ids.len() != manifest.m {
        return Err(PaceError::format(&path, "split/ids length differs from M"));
    }
    if manifest.has_perturbed
        && (manifest.files.perturbed_embeddings.is_none()
            || manifest.files.perturbed_attentions.is_none()
            || manifest.perturbed_ids.as_ref().map(Vec::len) != Some(manifest.m))
    {
        return Err(PaceError::format(&path, "has_perturbed is set but twin files or ids are missing"));
    }
    Ok(manifest)
}

fn read_f64_shaped(path: &Path, want: &[usize]) -> Result<Vec<f64>> {
    let (dims, data) = read_array_f64(path)?;
    expect_dims(path, &dims, want)?;
    Ok(data)
}

fn build_records(
    ids: &[String],
    emb: &[f64],
    att: &[f64],
    labels: &[usize],
    j: usize,
    d: usize,
    file: &Path,
) -> Result<Vec<ImageRecord>> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let e = Array2::from_shape_vec((j, d), emb[i * j * d..(i + 1) * j * d].to_vec()).expect("sized");
            let a = Array1::from(att[i * j..(i + 1) * j].to_vec());
            ImageRecord::new(id.clone(), e, a, labels[i]).map_err(|e| PaceError::format(file, e.to_string()))
        })
        .collect()
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let (m, j, d) = (manifest.m, manifest.j, manifest.d);
    let f = &manifest.files;
    let emb_path = dir.join(&f.embeddings);
    let emb = read_f64_shaped(&emb_path, &[m, j, d])?;
    let att = read_f64_shaped(&dir.join(&f.attentions), &[m, j])?;
    let label_path = dir.join(&f.labels);
    let (dims, raw) = read_array_i64(&label_path)?;
    expect_dims(&label_path, &dims, &[m])?;
    let labels = raw
        .iter()
        .map(|&l| {
            usize::try_from(l)
                .ok()
                .filter(|&l| l < manifest.n)
                .ok_or_else(|| PaceError::format(&label_path, format!("label {l} outside 0..{}", manifest.n)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = build_records(&manifest.ids, &emb, &att, &labels, j, d, &emb_path)?;
    if manifest.has_perturbed {
        let pe_path = dir.join(f.perturbed_embeddings.as_ref().expect("validated"));
        let pe = read_f64_shaped(&pe_path, &[m, j, d])?;
        let pa = read_f64_shaped(&dir.join(f.perturbed_attentions.as_ref().expect("validated")), &[m, j])?;
        let ids = manifest.perturbed_ids.as_ref().expect("validated");
        let twins = build_records(ids, &pe, &pa, &labels, j, d, &pe_path)?;
        records = records
            .into_iter()
            .zip(twins)
            .map(|(r, t)| r.with_perturbed(t))
            .collect::<Result<Vec<_>>>()?;
    }
    Dataset::new(records, manifest.split, manifest.n).map_err(|e| PaceError::format(dir.join(MANIFEST), e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub config: TrainConfig,
}

/// A trained model as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub bank: ConceptBank,
    pub head: HeadParams,
    pub config: TrainConfig,
}

pub fn encode_model(model: &SavedModel) -> Vec<u8> {
    let (k, d) = model.bank.means.dim();
    let header = ModelHeader {
        version: FORMAT_VERSION,
        k,
        d,
        n: model.head.num_classes(),
        config: model.config.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend(encode_f64(&[k, d], &model.bank.means.iter().copied().collect::<Vec<_>>()));
    let covs: Vec<f64> = model.bank.covs.iter().flat_map(|c| c.as_array().iter().copied()).collect();
    out.extend(encode_f64(&[k, d, d], &covs));
    out.extend(encode_f64(&[k], &model.bank.alpha.to_vec()));
    out.extend(encode_f64(&[header.n, k], &model.head.eta.iter().copied().collect::<Vec<_>>()));
    out.extend(encode_f64(&[k], &model.head.beta.to_vec()));
    out
}

pub fn decode_model(bytes: &[u8], file: &Path) -> Result<SavedModel> {
    let bad = |reason: String| PaceError::format(file, reason);
    if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
        return Err(bad("bad model magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated model header".into()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported model version {}", header.version)));
    }
    let (k, d, n) = (header.k, header.d, header.n);
    let mut r = ArrayReader::new(&bytes[end..], file);
    let mut next = |want: &[usize], name: &str| -> Result<Vec<f64>> {
        let (dims, data) = r.read_f64()?;
        if dims != want {
            return Err(PaceError::format(
                file,
                format!("{name} has shape {dims:?}, header implies {want:?}"),
            ));
        }
        Ok(data)
    };
    let means = Array2::from_shape_vec((k, d), next(&[k, d], "mu")?).expect("sized");
    let covs = Array3::from_shape_vec((k, d, d), next(&[k, d, d], "sigma")?).expect("sized");
    let alpha = Array1::from(next(&[k], "alpha")?);
    let eta = Array2::from_shape_vec((n, k), next(&[n, k], "H")?).expect("sized");
    let beta = Array1::from(next(&[k], "beta")?);
    r.finish()?;
    let covs = covs
        .axis_iter(Axis(0))
        .map(|c| SpdMatrix::new(c.to_owned()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| bad(e.to_string()))?;
    let bank = ConceptBank::new(means, covs, alpha).map_err(|e| bad(e.to_string()))?;
    Ok(SavedModel {
        bank,
        head: HeadParams { eta, beta },
        config: header.config,
    })
}

pub fn save_model(model: &SavedModel, path: &Path) -> Result<()> {
    write_file(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    decode_model(&read_file(path)?, path)
}

fn matrix_json(m: ArrayView2<f64>) -> serde_json::Value {
    json!(m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

/// JSON sidecar describing the latent variables of a synthetic dataset.
pub fn ground_truth_json(truth: &GroundTruth) -> serde_json::Value {
    let mut out = json!({
        "theta": truth.theta.iter().map(|t| t.to_vec()).collect::<Vec<_>>(),
        "z": truth.z,
    });
    if let Some(bank) = &truth.bank {
        out["means"] = matrix_json(bank.means.view());
        out["covariances"] = json!(bank.covs.iter().map(|c| matrix_json(c.view())).collect::<Vec<_>>());
        out["alpha"] = json!(bank.alpha.to_vec());
    }
    if let Some(head) = &truth.head {
        out["eta"] = matrix_json(head.eta.view());
    }
    if let Some(enc) = &truth.encoder {
        out["encoder"] = matrix_json(enc.view());
        out["palette"] = json!(crate::synth::Palette::ALL.iter().map(|p| p.name()).collect::<Vec<_>>());
    }
    out
}

pub fn save_ground_truth(truth: &GroundTruth, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&ground_truth_json(truth)).expect("json serializes");
    write_file(path, text.as_bytes())
}
