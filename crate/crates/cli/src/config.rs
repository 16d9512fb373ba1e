//! Run configuration: TOML with top-level keys plus [model], [dataset], and
//! [train] tables. Every key has a default; unknown keys are rejected so a
//! typo fails loudly instead of silently training the wrong model.

use std::path::PathBuf;

use magicflow_core::datagen::ClassProfile;
use magicflow_core::{FlowError, FlowTask, Result};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Pick a schedule from the sample shape: 1x1 spatial -> toy,
    /// both sides multiples of 8 and at least 16 -> multiscale,
    /// both sides even -> reduced.
    Auto,
    Multiscale,
    Reduced,
    Toy,
}

#[derive(Clone, Debug)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden: usize,
    pub emb_width: usize,
    pub emb_channels: usize,
    pub s_max: f64,
    /// Coupling steps for the toy schedule; ignored by the image schedules.
    pub toy_steps: usize,
}

#[derive(Clone, Debug)]
pub enum DataSource {
    Phantom { profiles: Vec<ClassProfile>, n_per_class: usize, height: usize, width: usize },
    Gaussians { classes: usize, n_per_class: usize, separation: f64 },
    Moons { n_per_class: usize },
    Dir { path: PathBuf },
}

#[derive(Clone, Debug)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Quantize-then-dequantize depth applied before training; 0 disables.
    /// Defaults to 8 for the phantom generator and 0 otherwise.
    pub quantize_bits: u32,
}

#[derive(Clone, Debug)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub task: FlowTask,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut root: Table = text
            .parse()
            .map_err(|e| FlowError::Config(format!("config parse: {e}")))?;

        let task = match take_string(&mut root, "", "task", "generation")?.as_str() {
            "generation" => FlowTask::Generation,
            "classification" => FlowTask::Classification,
            other => {
                return Err(FlowError::Config(format!(
                    "task: expected \"generation\" or \"classification\", got {other:?}"
                )))
            }
        };
        let seed = take_u64(&mut root, "", "seed", 0)?;
        let out_dir = PathBuf::from(take_string(&mut root, "", "out_dir", "out")?);
        let model = parse_model(take_section(&mut root, "model")?)?;
        let dataset = parse_dataset(take_section(&mut root, "dataset")?)?;
        let train = parse_train(take_section(&mut root, "train")?)?;
        reject_unknown(&root, "")?;

        Ok(RunConfig { task, seed, out_dir, model, dataset, train })
    }

    /// Read and parse; a missing or unreadable file is an I/O error, not a
    /// config error.
    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| e.in_context(&path.display().to_string()))
    }
}

fn parse_model(mut t: Table) -> Result<ModelSection> {
    let sec = "model";
    let kind = match take_string(&mut t, sec, "kind", "auto")?.as_str() {
        "auto" => ModelKind::Auto,
        "multiscale" => ModelKind::Multiscale,
        "reduced" => ModelKind::Reduced,
        "toy" => ModelKind::Toy,
        other => {
            return Err(FlowError::Config(format!(
                "[model] kind: expected auto|multiscale|reduced|toy, got {other:?}"
            )))
        }
    };
    let hidden = take_usize(&mut t, sec, "hidden", 8, 1)?;
    let emb_width = take_usize(&mut t, sec, "emb_width", 16, 1)?;
    let emb_channels = take_usize(&mut t, sec, "emb_channels", 4, 1)?;
    let s_max = take_positive_f64(&mut t, sec, "s_max", 2.0)?;
    let toy_steps = take_usize(&mut t, sec, "toy_steps", 6, 1)?;
    reject_unknown(&t, sec)?;
    Ok(ModelSection { kind, hidden, emb_width, emb_channels, s_max, toy_steps })
}

fn parse_dataset(mut t: Table) -> Result<DatasetSection> {
    let sec = "dataset";
    let kind = take_string(&mut t, sec, "kind", "phantom")?;
    let bits_explicit = match t.remove("quantize_bits") {
        None => None,
        Some(Value::Integer(i)) if (0..=16).contains(&i) => Some(i as u32),
        Some(Value::Integer(i)) => {
            return Err(FlowError::Config(format!(
                "[dataset] quantize_bits: must be in 0..=16, got {i}"
            )))
        }
        Some(v) => return Err(bad_type(sec, "quantize_bits", "an integer", &v)),
    };

    let source = match kind.as_str() {
        "phantom" => {
            let n_per_class = take_usize(&mut t, sec, "n_per_class", 64, 1)?;
            let height = take_usize(&mut t, sec, "height", 16, 4)?;
            let width = take_usize(&mut t, sec, "width", 16, 4)?;
            let profiles = parse_profiles(t.remove("profiles"))?;
            DataSource::Phantom { profiles, n_per_class, height, width }
        }
        "conditional-gaussians" => {
            let classes = take_usize(&mut t, sec, "classes", 3, 1)?;
            let n_per_class = take_usize(&mut t, sec, "n_per_class", 64, 1)?;
            let separation = take_f64(&mut t, sec, "separation", 4.0)?;
            if !(separation >= 0.0) {
                return Err(FlowError::Config(format!(
                    "[dataset] separation: must be >= 0, got {separation}"
                )));
            }
            DataSource::Gaussians { classes, n_per_class, separation }
        }
        "two-moons-conditional" => {
            let n_per_class = take_usize(&mut t, sec, "n_per_class", 64, 1)?;
            DataSource::Moons { n_per_class }
        }
        "dir" => {
            let path = match t.remove("path") {
                Some(Value::String(s)) => PathBuf::from(s),
                Some(v) => return Err(bad_type(sec, "path", "a string", &v)),
                None => {
                    return Err(FlowError::Config(
                        "[dataset] path: required when kind = \"dir\"".into(),
                    ))
                }
            };
            DataSource::Dir { path }
        }
        other => {
            return Err(FlowError::Config(format!(
                "[dataset] kind: expected phantom|conditional-gaussians|two-moons-conditional|dir, got {other:?}"
            )))
        }
    };
    reject_unknown(&t, sec)?;

    let quantize_bits =
        bits_explicit.unwrap_or(if matches!(source, DataSource::Phantom { .. }) { 8 } else { 0 });
    if quantize_bits > 0
        && matches!(source, DataSource::Gaussians { .. } | DataSource::Moons { .. })
    {
        return Err(FlowError::Config(
            "[dataset] quantize_bits: 2-D point data is not on a [0,1] grid and cannot be quantized"
                .into(),
        ));
    }
    Ok(DatasetSection { source, quantize_bits })
}

/// Default class trio: clean, noisy, and blurred phantoms.
fn default_profiles() -> Vec<ClassProfile> {
    vec![
        ClassProfile::new(0, 0.02, 0.0, 0.0),
        ClassProfile::new(1, 0.08, 0.0, 0.0),
        ClassProfile::new(2, 0.02, 1.5, 0.0),
    ]
}

fn parse_profiles(v: Option<Value>) -> Result<Vec<ClassProfile>> {
    let arr = match v {
        None => return Ok(default_profiles()),
        Some(Value::Array(a)) => a,
        Some(v) => return Err(bad_type("dataset", "profiles", "an array of tables", &v)),
    };
    if arr.is_empty() {
        return Err(FlowError::Config(
            "[dataset] profiles: needs at least one entry".into(),
        ));
    }
    let mut out = Vec::with_capacity(arr.len());
    for (i, item) in arr.into_iter().enumerate() {
        let sec = format!("dataset.profiles[{i}]");
        let mut pt = match item {
            Value::Table(t) => t,
            v => return Err(bad_type(&sec, "entry", "a table", &v)),
        };
        let noise_std = take_f64(&mut pt, &sec, "noise_std", 0.0)?;
        let blur_sigma = take_f64(&mut pt, &sec, "blur_sigma", 0.0)?;
        let bias_amplitude = take_f64(&mut pt, &sec, "bias_amplitude", 0.0)?;
        let seed_offset = take_u64(&mut pt, &sec, "seed_offset", i as u64)?;
        reject_unknown(&pt, &sec)?;
        let mut p = ClassProfile::new(i, noise_std, blur_sigma, bias_amplitude);
        p.seed_offset = seed_offset;
        out.push(p);
    }
    Ok(out)
}

fn parse_train(mut t: Table) -> Result<TrainSection> {
    let sec = "train";
    let epochs = take_usize(&mut t, sec, "epochs", 10, 1)?;
    let batch_size = take_usize(&mut t, sec, "batch_size", 32, 1)?;
    let learning_rate = take_positive_f64(&mut t, sec, "learning_rate", 1e-3)?;
    let clip_norm = take_positive_f64(&mut t, sec, "clip_norm", 50.0)?;
    reject_unknown(&t, sec)?;
    Ok(TrainSection { epochs, batch_size, learning_rate, clip_norm })
}

// --------------------------------------------------------------- key helpers

fn section_label(sec: &str) -> String {
    if sec.is_empty() {
        "top level".into()
    } else {
        format!("[{sec}]")
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
        _ => "an unsupported value",
    }
}

fn bad_type(sec: &str, key: &str, want: &str, got: &Value) -> FlowError {
    FlowError::Config(format!("{} {key}: expected {want}, got {}", section_label(sec), kind_of(got)))
}

fn take_section(root: &mut Table, key: &str) -> Result<Table> {
    match root.remove(key) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(v) => Err(bad_type("", key, "a table", &v)),
    }
}

fn take_string(t: &mut Table, sec: &str, key: &str, default: &str) -> Result<String> {
    match t.remove(key) {
        None => Ok(default.to_string()),
        Some(Value::String(s)) => Ok(s),
        Some(v) => Err(bad_type(sec, key, "a string", &v)),
    }
}

fn take_u64(t: &mut Table, sec: &str, key: &str, default: u64) -> Result<u64> {
    match t.remove(key) {
        None => Ok(default),
        Some(Value::Integer(i)) if i >= 0 => Ok(i as u64),
        Some(Value::Integer(i)) => {
            Err(FlowError::Config(format!("{} {key}: must be >= 0, got {i}", section_label(sec))))
        }
        Some(v) => Err(bad_type(sec, key, "an integer", &v)),
    }
}

fn take_usize(t: &mut Table, sec: &str, key: &str, default: usize, min: usize) -> Result<usize> {
    match t.remove(key) {
        None => Ok(default),
        Some(Value::Integer(i)) if i >= min as i64 => Ok(i as usize),
        Some(Value::Integer(i)) => Err(FlowError::Config(format!(
            "{} {key}: must be at least {min}, got {i}",
            section_label(sec)
        ))),
        Some(v) => Err(bad_type(sec, key, "an integer", &v)),
    }
}

fn take_f64(t: &mut Table, sec: &str, key: &str, default: f64) -> Result<f64> {
    match t.remove(key) {
        None => Ok(default),
        Some(Value::Float(x)) => Ok(x),
        Some(Value::Integer(i)) => Ok(i as f64),
        Some(v) => Err(bad_type(sec, key, "a number", &v)),
    }
}

fn take_positive_f64(t: &mut Table, sec: &str, key: &str, default: f64) -> Result<f64> {
    let x = take_f64(t, sec, key, default)?;
    if !(x > 0.0) {
        return Err(FlowError::Config(format!(
            "{} {key}: must be positive, got {x}",
            section_label(sec)
        )));
    }
    Ok(x)
}

fn reject_unknown(t: &Table, sec: &str) -> Result<()> {
    if let Some(k) = t.keys().next() {
        return Err(FlowError::Config(format!(
            "{}: unknown key `{k}`",
            section_label(sec)
        )));
    }
    Ok(())
}
