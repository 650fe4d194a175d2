//! Dataset container: aligned (RAW, target, V, D) records plus a text
//! manifest holding the exact field parameters for every capture.
//!
//! Layout: `RCDS` magic, version byte, record count (u32 LE), manifest byte
//! offset (u64 LE), then the records, then a UTF-8 `key = value` manifest.
//! Each record is capture-id (u32), H and W (u16 each), and four tagged
//! tensors (tag byte, rank byte, u32 dims, f32 LE payload).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::field::{capture_rng, DistortionField, FieldParams};
use super::isp::{reference_isp, ToneParams};
use super::mosaic::{degrade, RawCapture};
use super::scene::SceneImage;
use crate::tensor::{derive_seed, Tensor};
use crate::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"RCDS";
const DATASET_VERSION: u8 = 1;

const TAG_RAW: u8 = 0;
const TAG_TARGET: u8 = 1;
const TAG_VIGNETTE: u8 = 2;
const TAG_DARK: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub captures: u32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub tone: ToneParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { captures: 256, height: 256, width: 256, seed: 1, tone: ToneParams::default() }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.captures == 0 {
            return Err(Error::Invalid("dataset needs at least one capture".into()));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Invalid(format!(
                "capture dims must be positive and even, got {}x{}",
                self.height, self.width
            )));
        }
        self.tone.validate()
    }

    /// Train/eval split over capture ids: the first floor(0.9·N) captures
    /// train, the rest are held out (256 -> 230 train / 26 eval). At least
    /// one capture always trains.
    pub fn split(&self) -> (Vec<u32>, Vec<u32>) {
        let n = self.captures;
        let train = ((9 * u64::from(n) / 10) as u32).max(1).min(n);
        ((0..train).collect(), (train..n).collect())
    }
}

/// One stored capture, fully materialized.
#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub capture_id: u32,
    pub height: usize,
    pub width: usize,
    pub raw: Tensor<f32>,
    pub target: Tensor<f32>,
    pub vignette: Tensor<f32>,
    pub dark: Tensor<f32>,
}

impl DatasetRecord {
    /// Rebuild a capture view over this record so crops can be taken from
    /// it. Noise params are not needed once the RAW is materialized.
    pub fn as_capture(&self) -> RawCapture {
        RawCapture {
            capture_id: self.capture_id,
            height: self.height,
            width: self.width,
            raw: self.raw.clone(),
            field: DistortionField {
                height: self.height,
                width: self.width,
                vignette: self.vignette.clone(),
                dark: self.dark.clone(),
                sigma_r: 0.0,
                gain: 0.0,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub records: Vec<DatasetRecord>,
    pub field_params: BTreeMap<u32, FieldParams>,
    pub train_ids: Vec<u32>,
    pub eval_ids: Vec<u32>,
}

impl Dataset {
    pub fn record(&self, capture_id: u32) -> Result<&DatasetRecord> {
        self.records
            .iter()
            .find(|r| r.capture_id == capture_id)
            .ok_or_else(|| Error::Invalid(format!("capture {capture_id} not in dataset")))
    }
}

/// Generate one capture worth of data. Every random stream is derived from
/// (seed, capture-id, role), so captures are independent of generation
/// order and of each other.
pub fn generate_capture(
    config: &DatasetConfig,
    capture_id: u32,
) -> Result<(DatasetRecord, FieldParams)> {
    let (h, w) = (config.height, config.width);
    let mut scene_rng = capture_rng(config.seed, capture_id, "scene");
    let scene = SceneImage::generate(&mut scene_rng, h, w)?;
    let mut field_rng = capture_rng(config.seed, capture_id, "field");
    let params = FieldParams::sample(&mut field_rng, h, w);
    let field = DistortionField::from_params(&params, h, w);
    let capture = degrade(&scene, &field, config.seed, capture_id)?;
    let target = reference_isp(&scene, &config.tone)?;
    Ok((
        DatasetRecord {
            capture_id,
            height: h,
            width: w,
            raw: capture.raw,
            target,
            vignette: field.vignette,
            dark: field.dark,
        },
        params,
    ))
}

fn push_tensor(buf: &mut Vec<u8>, tag: u8, t: &Tensor<f32>) {
    buf.push(tag);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn manifest_text(config: &DatasetConfig, params: &BTreeMap<u32, FieldParams>) -> String {
    let (train, eval) = config.split();
    let ids = |v: &[u32]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let mut m = String::new();
    let _ = writeln!(m, "captures = {}", config.captures);
    let _ = writeln!(m, "height = {}", config.height);
    let _ = writeln!(m, "width = {}", config.width);
    let _ = writeln!(m, "seed = {}", config.seed);
    let _ = writeln!(m, "tone = {}", serde_json::to_string(&config.tone).expect("tone serializes"));
    let _ = writeln!(m, "train = {}", ids(&train));
    let _ = writeln!(m, "eval = {}", ids(&eval));
    for (id, p) in params {
        let _ = writeln!(m, "field.{id} = {}", serde_json::to_string(p).expect("params serialize"));
    }
    m
}

/// Build the dataset file at `path`. Byte-identical across rebuilds with
/// the same config.
pub fn build_dataset(config: &DatasetConfig, path: &Path) -> Result<()> {
    config.validate()?;
    let mut body = Vec::new();
    let mut all_params = BTreeMap::new();
    for id in 0..config.captures {
        let (rec, params) = generate_capture(config, id)?;
        body.extend_from_slice(&rec.capture_id.to_le_bytes());
        body.extend_from_slice(&(rec.height as u16).to_le_bytes());
        body.extend_from_slice(&(rec.width as u16).to_le_bytes());
        push_tensor(&mut body, TAG_RAW, &rec.raw);
        push_tensor(&mut body, TAG_TARGET, &rec.target);
        push_tensor(&mut body, TAG_VIGNETTE, &rec.vignette);
        push_tensor(&mut body, TAG_DARK, &rec.dark);
        all_params.insert(id, params);
    }

    let header_len = 4 + 1 + 4 + 8;
    let manifest_offset = (header_len + body.len()) as u64;
    let mut file = Vec::with_capacity(manifest_offset as usize + 4096);
    file.extend_from_slice(&DATASET_MAGIC);
    file.push(DATASET_VERSION);
    file.extend_from_slice(&config.captures.to_le_bytes());
    file.extend_from_slice(&manifest_offset.to_le_bytes());
    file.extend_from_slice(&body);
    file.extend_from_slice(manifest_text(config, &all_params).as_bytes());

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&file)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

fn read_tensor(c: &mut Cursor, want_tag: u8) -> Result<Tensor<f32>> {
    let tag = c.u8()?;
    if tag != want_tag {
        return Err(Error::Invalid(format!("record tensor tag {tag}, expected {want_tag}")));
    }
    let rank = c.u8()? as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Invalid(format!("implausible tensor rank {rank} in dataset")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = c.u32()? as usize;
        len = len.checked_mul(d).ok_or_else(|| Error::Invalid("tensor dims overflow".into()))?;
        shape.push(d);
    }
    let bytes = c.bytes(len * 4)?;
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Invalid(format!("malformed manifest line: {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    Ok(kv)
}

fn manifest_get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key).map(String::as_str).ok_or_else(|| Error::Invalid(format!("manifest missing key {key}")))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.bytes(4)? != DATASET_MAGIC {
        return Err(Error::Invalid("not a dataset file (bad magic)".into()));
    }
    let version = c.u8()?;
    if version != DATASET_VERSION {
        return Err(Error::Invalid(format!("unsupported dataset version {version}")));
    }
    let count = c.u32()?;
    let manifest_offset = c.u64()? as usize;
    if manifest_offset > buf.len() {
        return Err(Error::Truncated { offset: buf.len() });
    }

    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let capture_id = c.u32()?;
        let height = c.u16()? as usize;
        let width = c.u16()? as usize;
        let raw = read_tensor(&mut c, TAG_RAW)?;
        let target = read_tensor(&mut c, TAG_TARGET)?;
        let vignette = read_tensor(&mut c, TAG_VIGNETTE)?;
        let dark = read_tensor(&mut c, TAG_DARK)?;
        if raw.shape() != [height, width] || target.shape() != [height, width, 3] {
            return Err(Error::Invalid(format!("capture {capture_id} tensors disagree with dims")));
        }
        records.push(DatasetRecord { capture_id, height, width, raw, target, vignette, dark });
    }
    if c.pos != manifest_offset {
        return Err(Error::Invalid(format!(
            "records end at byte {} but manifest offset says {manifest_offset}",
            c.pos
        )));
    }

    let text = std::str::from_utf8(&buf[manifest_offset..])
        .map_err(|_| Error::Invalid("manifest is not UTF-8".into()))?;
    let kv = parse_manifest(text)?;
    let parse_ids = |s: &str| -> Result<Vec<u32>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|t| t.parse::<u32>().map_err(|_| Error::Invalid(format!("bad id list entry {t}"))))
            .collect()
    };
    let config = DatasetConfig {
        captures: manifest_get(&kv, "captures")?.parse().map_err(|_| Error::Invalid("bad captures".into()))?,
        height: manifest_get(&kv, "height")?.parse().map_err(|_| Error::Invalid("bad height".into()))?,
        width: manifest_get(&kv, "width")?.parse().map_err(|_| Error::Invalid("bad width".into()))?,
        seed: manifest_get(&kv, "seed")?.parse().map_err(|_| Error::Invalid("bad seed".into()))?,
        tone: serde_json::from_str(manifest_get(&kv, "tone")?)
            .map_err(|e| Error::Invalid(format!("bad tone params: {e}")))?,
    };
    let train_ids = parse_ids(manifest_get(&kv, "train")?)?;
    let eval_ids = parse_ids(manifest_get(&kv, "eval")?)?;
    let mut field_params = BTreeMap::new();
    for (k, v) in &kv {
        if let Some(id) = k.strip_prefix("field.") {
            let id: u32 = id.parse().map_err(|_| Error::Invalid(format!("bad field key {k}")))?;
            let p: FieldParams =
                serde_json::from_str(v).map_err(|e| Error::Invalid(format!("bad field params for {id}: {e}")))?;
            field_params.insert(id, p);
        }
    }
    if records.len() != count as usize || field_params.len() != count as usize {
        return Err(Error::Invalid("manifest and records disagree on capture count".into()));
    }

    Ok(Dataset { config, records, field_params, train_ids, eval_ids })
}

/// Deterministic stream of (capture-id, origin) crop picks for training.
/// Uses its own derived rng so data order is independent of model init.
pub fn crop_plan(seed: u64, ids: &[u32], h: usize, w: usize, crop: usize, count: usize) -> Vec<(u32, usize, usize)> {
    use rand::Rng;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "crop-plan"));
    (0..count)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            let m = 2 * rng.gen_range(0..=(h - crop) / 2);
            let n = 2 * rng.gen_range(0..=(w - crop) / 2);
            (id, m, n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> DatasetConfig {
        DatasetConfig { captures: 6, height: 32, width: 32, seed: 9, tone: ToneParams::default() }
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.rcds");
        let b = dir.path().join("b.rcds");
        let cfg = tiny_config();
        build_dataset(&cfg, &a).unwrap();
        build_dataset(&cfg, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn split_takes_floor_tenth_for_eval() {
        let cfg = DatasetConfig { captures: 256, ..tiny_config() };
        let (train, eval) = cfg.split();
        assert_eq!(train.len(), 230);
        assert_eq!(eval.len(), 26);
        assert_eq!(eval[0], 230);
        assert_eq!(*eval.last().unwrap(), 255);
    }

    #[test]
    fn roundtrip_preserves_tensors_and_manifest() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.rcds");
        let cfg = tiny_config();
        build_dataset(&cfg, &path).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.config, cfg);
        assert_eq!(ds.records.len(), 6);
        assert_eq!(ds.train_ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(ds.eval_ids, vec![5]);
        let (rec, params) = generate_capture(&cfg, 3).unwrap();
        assert!(ds.record(3).unwrap().raw.bit_eq(&rec.raw));
        assert_eq!(ds.field_params[&3], params);
    }

    #[test]
    fn manifest_params_regenerate_stored_maps() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.rcds");
        let cfg = tiny_config();
        build_dataset(&cfg, &path).unwrap();
        let ds = load_dataset(&path).unwrap();
        for rec in &ds.records {
            let p = &ds.field_params[&rec.capture_id];
            let v = p.vignette_map(rec.height, rec.width);
            let d = p.dark_map(rec.height, rec.width);
            for (a, b) in v.data().iter().zip(rec.vignette.data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in d.data().iter().zip(rec.dark.data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.rcds");
        build_dataset(&tiny_config(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(200);
        let cut = dir.path().join("cut.rcds");
        fs::write(&cut, &bytes).unwrap();
        match load_dataset(&cut) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.rcds");
        fs::write(&path, b"NOPE____________________").unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn crop_plan_is_deterministic_and_even_aligned() {
        let ids = vec![0, 1, 2];
        let a = crop_plan(5, &ids, 32, 32, 16, 50);
        let b = crop_plan(5, &ids, 32, 32, 16, 50);
        assert_eq!(a, b);
        for &(id, m, n) in &a {
            assert!(ids.contains(&id));
            assert_eq!(m % 2, 0);
            assert_eq!(n % 2, 0);
            assert!(m + 16 <= 32 && n + 16 <= 32);
        }
        let c = crop_plan(6, &ids, 32, 32, 16, 50);
        assert_ne!(a, c);
    }
}
