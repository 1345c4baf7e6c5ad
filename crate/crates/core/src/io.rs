//! Tensor container format, checkpoints, experiment configuration and
//! display export.
//!
//! Container layout, all little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `RSBP` |
//! | 2 | format version (u16) |
//! | 1 | dtype: 1 = f32, 2 = f64 |
//! | 1 | rank |
//! | 4·rank | dims (u32 each) |
//! | 4 | metadata length (u32) |
//! | n | metadata, UTF-8 JSON |
//! | rest | row-major payload |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};
use crate::eval::{IterativeOptions, Method};
use crate::geometry::{Image, Sinogram, Unit, ViewGeometry};
use crate::nn::{ModelConfig, ModelParams, ModelVariant, Real, Tensor};
use crate::phantom::PhantomSpec;
use crate::physics::PhysicsConstants;
use crate::sbp::{SbpOptions, SbpTensor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"RSBP";
pub const FORMAT_VERSION: u16 = 1;
/// Version of the checkpoint metadata schema.
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => f32::DTYPE_CODE,
            DType::F64 => f64::DTYPE_CODE,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    /// Values widened to `f64`; exact for both dtypes.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    fn to_real<T: Real>(&self) -> Vec<T> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }

    fn from_real<T: Real>(values: &[T]) -> Self {
        match T::DTYPE_CODE {
            1 => Payload::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            _ => Payload::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dims: Vec<usize>,
    pub payload: Payload,
    pub metadata: Value,
}

impl Container {
    pub fn new(dims: Vec<usize>, payload: Payload, metadata: Value) -> Result<Self> {
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(invalid!("dims {dims:?} do not fit the container header"));
        }
        let count: usize = dims.iter().product();
        if count != payload.len() {
            return Err(invalid!(
                "dims {dims:?} describe {count} values, payload has {}",
                payload.len()
            ));
        }
        Ok(Container {
            dims,
            payload,
            metadata,
        })
    }

    pub fn dtype(&self) -> DType {
        self.payload.dtype()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        let mut out = Vec::with_capacity(16 + meta.len() + self.payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, dtype, metadata, payload) = parse_header(bytes)?;
        let count: usize = dims.iter().product();
        let expected = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, dims {dims:?} need {expected}",
                payload.len()
            )));
        }
        let payload = match dtype {
            DType::F32 => Payload::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
        };
        Container::new(dims, payload, metadata)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Container::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Metadata field `key` as a string, if present.
    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).and_then(Value::as_str)
    }
}

/// Header summary without decoding the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub version: u16,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub metadata: Value,
    pub payload_bytes: usize,
}

type RawParts<'a> = (Vec<usize>, DType, Value, &'a [u8]);

fn parse_header(bytes: &[u8]) -> Result<RawParts<'_>> {
    let short = || Error::Format("file ends inside the header".into());
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).ok_or_else(short)?;
        let s = bytes.get(*pos..end).ok_or_else(short)?;
        *pos = end;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format("missing RSBP magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let dtype = DType::from_code(take(&mut pos, 1)?[0])?;
    let ndim = take(&mut pos, 1)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize);
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let metadata = serde_json::from_slice(take(&mut pos, meta_len)?)
        .map_err(|e| Error::Format(format!("metadata is not valid JSON: {e}")))?;
    Ok((dims, dtype, metadata, &bytes[pos..]))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<ContainerHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let version = bytes
        .get(4..6)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .unwrap_or_default();
    let (dims, dtype, metadata, payload) = parse_header(&bytes)?;
    Ok(ContainerHeader {
        version,
        dtype,
        dims,
        metadata,
        payload_bytes: payload.len(),
    })
}

fn unit_name(unit: Unit) -> Value {
    serde_json::to_value(unit).expect("unit serializes")
}

fn unit_of(c: &Container) -> Result<Unit> {
    let v = c
        .metadata
        .get("unit")
        .ok_or_else(|| Error::Format("container has no unit tag".into()))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("bad unit tag: {e}")))
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    match c.meta_str("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Format(format!("expected a {kind} container, found {other:?}"))),
    }
}

pub fn image_container(img: &Image) -> Container {
    let n = img.side();
    Container::new(
        vec![n, n],
        Payload::F64(img.data().to_vec()),
        json!({"kind": "image", "unit": unit_name(img.unit())}),
    )
    .expect("image dims match its data")
}

pub fn image_from_container(c: &Container) -> Result<Image> {
    expect_kind(c, "image")?;
    match c.dims[..] {
        [h, w] if h == w => Image::from_vec(h, c.payload.to_f64(), unit_of(c)?),
        _ => Err(Error::Format(format!("image dims {:?} are not square", c.dims))),
    }
}

/// Sinogram as `(M, N)`, one row per view.
pub fn sinogram_container(s: &Sinogram) -> Container {
    Container::new(
        vec![s.n_views(), s.n_detectors()],
        Payload::F64(s.to_flat()),
        json!({"kind": "sinogram"}),
    )
    .expect("sinogram dims match its data")
}

pub fn sinogram_from_container(c: &Container) -> Result<Sinogram> {
    expect_kind(c, "sinogram")?;
    match c.dims[..] {
        [m, n] => Sinogram::from_flat(m, n, &c.payload.to_f64()),
        _ => Err(Error::Format(format!("sinogram dims {:?} are not rank 2", c.dims))),
    }
}

/// SBP tensor as `(M, N, N)`.
pub fn sbp_container(t: &SbpTensor) -> Container {
    Container::new(
        vec![t.n_views(), t.side(), t.side()],
        Payload::F64(t.to_flat()),
        json!({"kind": "sbp", "unit": unit_name(t.unit())}),
    )
    .expect("sbp dims match its data")
}

pub fn sbp_from_container(c: &Container) -> Result<SbpTensor> {
    expect_kind(c, "sbp")?;
    match c.dims[..] {
        [m, h, w] if h == w => SbpTensor::from_flat(m, h, &c.payload.to_f64(), unit_of(c)?),
        _ => Err(Error::Format(format!("sbp dims {:?} are not (M, N, N)", c.dims))),
    }
}

pub fn tensor_container<T: Real>(t: &Tensor<T>, metadata: Value) -> Container {
    Container::new(t.shape().to_vec(), Payload::from_real(t.data()), metadata)
        .expect("tensor dims match its data")
}

/// Tensor in the stored precision converted to `T`; bit-exact when `T`
/// matches the stored dtype or widens it.
pub fn tensor_from_container<T: Real>(c: &Container) -> Result<Tensor<T>> {
    Tensor::try_from_vec(c.dims.clone(), c.payload.to_real())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Checkpoint: every tensor of `params` concatenated in name order into one
/// rank-1 payload, with names, shapes, variant and architecture in the
/// metadata.
pub fn params_container<T: Real>(params: &ModelParams<T>, config: &ModelConfig) -> Container {
    let entries: Vec<ParamEntry> = params
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let flat = params.flatten();
    Container::new(
        vec![flat.len()],
        Payload::from_real(&flat),
        json!({
            "kind": "model_params",
            "version": PARAMS_VERSION,
            "variant": config.variant,
            "config": config,
            "entries": entries,
        }),
    )
    .expect("flattened params are rank 1")
}

pub fn params_from_container<T: Real>(c: &Container) -> Result<(ModelConfig, ModelParams<T>)> {
    expect_kind(c, "model_params")?;
    let version = c.metadata.get("version").and_then(Value::as_u64);
    if version != Some(PARAMS_VERSION as u64) {
        return Err(Error::Format(format!("unsupported checkpoint version {version:?}")));
    }
    let config: ModelConfig = serde_json::from_value(c.metadata["config"].clone())
        .map_err(|e| Error::Format(format!("bad model config: {e}")))?;
    let variant: ModelVariant = serde_json::from_value(c.metadata["variant"].clone())
        .map_err(|e| Error::Format(format!("bad variant: {e}")))?;
    if variant != config.variant {
        return Err(Error::Format(format!(
            "variant {variant} disagrees with config {}",
            config.variant
        )));
    }
    let entries: Vec<ParamEntry> = serde_json::from_value(c.metadata["entries"].clone())
        .map_err(|e| Error::Format(format!("bad entry list: {e}")))?;
    let values: Vec<T> = c.payload.to_real();
    let mut params = ModelParams::new();
    let mut offset = 0;
    for e in entries {
        let len: usize = e.shape.iter().product();
        let chunk = values
            .get(offset..offset + len)
            .ok_or_else(|| Error::Format("entry list exceeds payload".into()))?;
        params.insert(e.name, Tensor::from_vec(e.shape, chunk.to_vec()));
        offset += len;
    }
    if offset != values.len() {
        return Err(Error::Format("payload longer than the entry list".into()));
    }
    Ok((config, params))
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<()> {
    params_container(params, config).write(path)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams<T>)> {
    params_from_container(&Container::read(path)?)
}

/// Linear map of `[lo, hi]` HU onto `0..=255`, clamped, rounding half away
/// from zero.
pub fn export_display(img: &Image, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(lo < hi) {
        return Err(invalid!("display window needs lo < hi, got [{lo}, {hi}]"));
    }
    if img.unit() != Unit::Hu {
        return Err(invalid!("display export expects an HU image"));
    }
    Ok(img
        .data()
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).clamp(0.0, 255.0).round() as u8)
        .collect())
}

/// Binary PGM (P5) bytes for a square 8-bit image.
pub fn pgm_bytes(side: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != side * side {
        return Err(invalid!("{} pixels for a {side}x{side} image", pixels.len()));
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Writes `img` as a PGM under the `[lo, hi]` HU window.
pub fn write_pgm(path: impl AsRef<Path>, img: &Image, lo: f64, hi: f64) -> Result<()> {
    let path = path.as_ref();
    let bytes = pgm_bytes(img.side(), &export_display(img, lo, hi)?)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub n_pixels: usize,
    pub n_views: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_pixels: 64,
            n_views: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub mu_per_cm: f64,
    pub pitch_cm: f64,
    pub lambda0: f64,
    /// Add measurement noise to simulated sinograms.
    pub noise: bool,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        let p = PhysicsConstants::default();
        PhysicsConfig {
            mu_per_cm: p.mu,
            pitch_cm: p.pitch,
            lambda0: p.lambda0,
            noise: true,
        }
    }
}

impl PhysicsConfig {
    pub fn constants(&self) -> Result<PhysicsConstants> {
        PhysicsConstants::new(self.mu_per_cm, self.pitch_cm, self.lambda0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub count: usize,
    pub split_ratio: f64,
    /// Master seed of the dataset.
    pub seed: u64,
    pub n_objects: [usize; 2],
    pub density_range_hu: [f64; 2],
    pub container: bool,
    pub container_hu: f64,
    pub supersample: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let s = PhantomSpec::default();
        PhantomConfig {
            count: 200,
            split_ratio: 0.8,
            seed: s.seed,
            n_objects: s.n_objects,
            density_range_hu: s.density_range_hu,
            container: s.container,
            container_hu: s.container_hu,
            supersample: s.supersample,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self, n_pixels: usize) -> PhantomSpec {
        PhantomSpec {
            n_pixels,
            n_objects: self.n_objects,
            density_range_hu: self.density_range_hu,
            container: self.container,
            container_hu: self.container_hu,
            supersample: self.supersample,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: ModelVariant,
    pub depth: usize,
    pub hidden: usize,
    pub base_width: usize,
    pub peephole: bool,
    pub filtered_sbp: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(ModelVariant::RsbpCnn, 1);
        ModelSection {
            variant: m.variant,
            depth: m.depth,
            hidden: m.hidden,
            base_width: m.base_width,
            peephole: m.peephole,
            filtered_sbp: true,
        }
    }
}

impl ModelSection {
    pub fn config(&self, variant: ModelVariant, n_views: usize) -> ModelConfig {
        ModelConfig {
            variant,
            n_views,
            hidden: self.hidden,
            depth: self.depth,
            base_width: self.base_width,
            peephole: self.peephole,
        }
    }

    pub fn sbp_options(&self) -> SbpOptions {
        SbpOptions {
            filtered: self.filtered_sbp,
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![
        Method::Fbp,
        Method::Neural(ModelVariant::FbpCnn),
        Method::Neural(ModelVariant::SbpCnn),
        Method::Neural(ModelVariant::RsbpCnn),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    pub iterative: IterativeOptions,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            methods: default_methods(),
            iterative: IterativeOptions::default(),
        }
    }
}

/// Whole-experiment configuration. Every section and key is optional and
/// falls back to the desk-scale defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub physics: PhysicsConfig,
    pub phantom: PhantomConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn view_geometry(&self) -> Result<ViewGeometry> {
        ViewGeometry::new(self.geometry.n_pixels, self.geometry.n_views)
    }

    pub fn model_config(&self, variant: ModelVariant) -> ModelConfig {
        self.model.config(variant, self.geometry.n_views)
    }

    /// Checks every section; all failures map to [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.view_geometry().map_err(wrap)?;
        self.physics.constants().map_err(wrap)?;
        self.phantom.spec(self.geometry.n_pixels).validate().map_err(wrap)?;
        if self.phantom.count < 2 || !(self.phantom.split_ratio > 0.0 && self.phantom.split_ratio < 1.0) {
            return Err(Error::Config(
                "phantom.count must be at least 2 and phantom.split_ratio inside (0, 1)".into(),
            ));
        }
        let model = self.model_config(self.model.variant);
        model.validate().map_err(wrap)?;
        self.train.validate(&model).map_err(wrap)?;
        if self.train.patch_in > self.geometry.n_pixels {
            return Err(Error::Config(format!(
                "train.patch_in {} exceeds the image side {}",
                self.train.patch_in, self.geometry.n_pixels
            )));
        }
        if self.eval.methods.is_empty() {
            return Err(Error::Config("eval.methods is empty".into()));
        }
        if self.eval.iterative.iterations == 0 {
            return Err(Error::Config("eval.iterative.iterations must be at least 1".into()));
        }
        Ok(())
    }
}
