//! Run configuration: flat `key = value` files with `[section]` headers.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Values are layered: defaults, then the config file, then `--set
//! section.key=value` overrides and dedicated flags. All problems found
//! while layering and validating are collected and reported together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eatformer::data::AugmentPolicy;
use eatformer::train::OptimConfig;
use eatformer::{DType, ModelSpec, StageSpec};

/// Output root used when neither `run.out` nor the environment variable is set.
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const OUT_ROOT_ENV: &str = "EATFORMER_OUT";

/// `(section, key, default)`. Empty model values mean "take it from the preset".
const KEYS: &[(&str, &str, &str)] = &[
    ("model", "preset", "desk"),
    ("model", "resolution", ""),
    ("model", "depths", ""),
    ("model", "channels", ""),
    ("model", "heads", ""),
    ("model", "split_ratio", ""),
    ("model", "downsample", ""),
    ("model", "mdmsa", ""),
    ("model", "stem_channels", ""),
    ("model", "mlp_ratio", ""),
    ("model", "local_kernel", ""),
    ("optim", "learning_rate", "0.008"),
    ("optim", "beta1", "0.9"),
    ("optim", "beta2", "0.999"),
    ("optim", "eps", "1e-8"),
    ("optim", "epochs", "30"),
    ("optim", "batch_size", "50"),
    ("optim", "precision", "32"),
    ("data", "dataset", "synth"),
    ("data", "dir", ""),
    ("data", "classes", ""),
    ("data", "per_class", "0"),
    ("data", "train_per_class", "100"),
    ("data", "val_per_class", "30"),
    ("data", "seed", "0"),
    ("data", "permute_labels", "false"),
    ("augment", "rotation_max_deg", "0"),
    ("augment", "zoom_min", "1"),
    ("augment", "zoom_max", "1"),
    ("augment", "hflip_prob", "0"),
    ("run", "seed", "0"),
    ("run", "threads", "1"),
    ("run", "verification", "false"),
    ("run", "out", ""),
    ("run", "eval_batch", "100"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Gtsrb(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Class subset (GTSRB); empty keeps every class.
    pub classes: Vec<usize>,
    /// Per-class cap on both splits (GTSRB); 0 keeps everything.
    pub per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
    /// Shuffle training labels (the permutation control).
    pub permute_labels: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `num_classes` is provisional until the dataset is loaded.
    pub model: ModelSpec,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub threads: usize,
    /// 64-bit, one thread, zeroed timing column: byte-identical reruns.
    pub verification: bool,
    pub out: Option<PathBuf>,
    pub eval_batch: usize,
}

/// Raw layered values, keyed by `section.key`.
#[derive(Clone, Debug)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
    explicit: BTreeMap<String, bool>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        ConfigMap {
            values: KEYS
                .iter()
                .map(|(s, k, v)| (format!("{s}.{k}"), v.to_string()))
                .collect(),
            explicit: BTreeMap::new(),
        }
    }
}

/// Drops a `#` or `;` comment that starts a line or follows whitespace,
/// so values such as `a#b` survive.
fn strip_comment(line: &str) -> &str {
    let mut prev_space = true;
    for (i, c) in line.char_indices() {
        if prev_space && (c == '#' || c == ';') {
            return &line[..i];
        }
        prev_space = c.is_whitespace();
    }
    line
}

impl ConfigMap {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if !self.values.contains_key(key) {
            return Err(format!("unknown configuration key {key:?}"));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        self.explicit.insert(key.to_string(), true);
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), String> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| format!("override {assignment:?} is not of the form section.key=value"))?;
        self.set(key.trim(), value)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains_key(key)
    }

    /// Layers `text` on top of the current values. Returns every problem found.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Vec<String> {
        let mut errs = Vec::new();
        let mut section: Option<String> = None;
        // Keys under an unknown section were already reported with it.
        let mut in_unknown = false;
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                in_unknown = !KEYS.iter().any(|(s, _, _)| *s == name);
                if !in_unknown {
                    section = Some(name.to_string());
                } else {
                    errs.push(format!("{at}: unknown section [{name}]"));
                    section = None;
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errs.push(format!("{at}: expected key = value, got {line:?}"));
                continue;
            };
            if in_unknown {
                continue;
            }
            match &section {
                Some(s) => {
                    if let Err(e) = self.set(&format!("{s}.{}", key.trim()), value) {
                        errs.push(format!("{at}: {e}"));
                    }
                }
                None => errs.push(format!("{at}: key {:?} outside any [section]", key.trim())),
            }
        }
        errs
    }

    pub fn apply_file(&mut self, path: &Path) -> Vec<String> {
        match std::fs::read_to_string(path) {
            Ok(text) => self.apply_text(&text, &path.display().to_string()),
            Err(e) => vec![format!("cannot read config file {}: {e}", path.display())],
        }
    }
}

struct Parser<'a> {
    map: &'a ConfigMap,
    errs: Vec<String>,
}

impl Parser<'_> {
    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let raw = self.map.get(key);
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errs
                    .push(format!("{key} = {raw:?} is not a valid {}", std::any::type_name::<T>()));
                None
            }
        }
    }

    fn bool(&mut self, key: &str) -> Option<bool> {
        match self.map.get(key) {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            other => {
                self.errs.push(format!("{key} = {other:?} is not a boolean"));
                None
            }
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Option<Vec<T>> {
        let raw = self.map.get(key);
        if raw.is_empty() {
            return Some(Vec::new());
        }
        let parsed: Result<Vec<T>, _> = raw.split(',').map(|s| s.trim().parse()).collect();
        match parsed {
            Ok(v) => Some(v),
            Err(_) => {
                self.errs.push(format!("{key} = {raw:?} is not a comma-separated list"));
                None
            }
        }
    }

    fn flags(&mut self, key: &str) -> Option<Vec<bool>> {
        let raw = self.map.get(key).to_string();
        if raw.is_empty() {
            return Some(Vec::new());
        }
        let mut out = Vec::new();
        for part in raw.split(',') {
            match part.trim() {
                "1" | "true" => out.push(true),
                "0" | "false" => out.push(false),
                other => {
                    self.errs.push(format!("{key}: {other:?} is not 0/1"));
                    return None;
                }
            }
        }
        Some(out)
    }

    /// Overrides one per-stage field when the key was given.
    fn stage_field<T: std::str::FromStr + Clone>(
        &mut self,
        spec: &mut ModelSpec,
        key: &str,
        values: Option<Vec<T>>,
        apply: fn(&mut StageSpec, T),
    ) {
        let Some(values) = values else { return };
        if !self.map.is_explicit(key) || values.is_empty() {
            return;
        }
        let stages = spec.stages.len();
        let values = if values.len() == 1 {
            vec![values[0].clone(); stages]
        } else {
            values
        };
        if values.len() != stages {
            self.errs
                .push(format!("{key} lists {} values for {stages} stages", values.len()));
            return;
        }
        for (s, v) in spec.stages.iter_mut().zip(values) {
            apply(s, v);
        }
    }
}

fn preset(name: &str) -> Option<ModelSpec> {
    match name {
        "desk" => Some(ModelSpec::desk(3)),
        "micro" => Some(ModelSpec::micro(3)),
        "desk224" => Some(ModelSpec::desk_224(3)),
        _ => None,
    }
}

fn model_spec(p: &mut Parser<'_>) -> ModelSpec {
    let name = p.map.get("model.preset").to_string();
    let mut spec = preset(&name).unwrap_or_else(|| {
        p.errs
            .push(format!("model.preset {name:?} is not one of desk, micro, desk224"));
        ModelSpec::desk(3)
    });

    // Depths define the stage count; the other lists must then match it.
    if p.map.is_explicit("model.depths") {
        if let Some(depths) = p.list::<usize>("model.depths") {
            if !depths.is_empty() {
                let template = spec.stages.last().cloned().expect("presets have stages");
                spec.stages.resize(depths.len(), template);
                for (s, d) in spec.stages.iter_mut().zip(depths) {
                    s.depth = d;
                }
            }
        }
    }
    let channels = p.list::<usize>("model.channels");
    p.stage_field(&mut spec, "model.channels", channels, |s, v| s.channels = v);
    let heads = p.list::<usize>("model.heads");
    p.stage_field(&mut spec, "model.heads", heads, |s, v| s.heads = v);
    let ratios = p.list::<f64>("model.split_ratio");
    p.stage_field(&mut spec, "model.split_ratio", ratios, |s, v| s.split_ratio = v);
    let down = p.flags("model.downsample");
    p.stage_field(&mut spec, "model.downsample", down, |s, v| s.downsample = v);
    let md = p.flags("model.mdmsa");
    p.stage_field(&mut spec, "model.mdmsa", md, |s, v| s.use_mdmsa = v);

    if p.map.is_explicit("model.resolution") {
        if let Some(r) = p.parse::<usize>("model.resolution") {
            spec.input_resolution = (r, r);
        }
    }
    if p.map.is_explicit("model.stem_channels") {
        if let Some(c) = p.parse("model.stem_channels") {
            spec.stem_channels = c;
        }
    }
    if p.map.is_explicit("model.mlp_ratio") {
        if let Some(r) = p.parse("model.mlp_ratio") {
            spec.mlp_ratio = r;
        }
    }
    if p.map.is_explicit("model.local_kernel") {
        if let Some(k) = p.parse("model.local_kernel") {
            spec.local_kernel = k;
        }
    }
    spec
}

impl RunConfig {
    /// Typed view of `map`, or every parse and validation problem.
    pub fn from_map(map: &ConfigMap) -> Result<Self, Vec<String>> {
        let mut p = Parser { map, errs: Vec::new() };
        let model = model_spec(&mut p);

        let precision = match p.map.get("optim.precision") {
            "32" => DType::F32,
            "64" => DType::F64,
            other => {
                p.errs.push(format!("optim.precision {other:?} must be 32 or 64"));
                DType::F32
            }
        };
        let optim = OptimConfig {
            learning_rate: p.parse("optim.learning_rate").unwrap_or(0.0),
            beta1: p.parse("optim.beta1").unwrap_or(0.9),
            beta2: p.parse("optim.beta2").unwrap_or(0.999),
            eps: p.parse("optim.eps").unwrap_or(1e-8),
            epochs: p.parse("optim.epochs").unwrap_or(1),
            batch_size: p.parse("optim.batch_size").unwrap_or(1),
            precision,
        };

        let kind = match p.map.get("data.dataset") {
            "synth" => DatasetKind::Synth,
            "gtsrb" => {
                let dir = p.map.get("data.dir");
                if dir.is_empty() {
                    p.errs
                        .push("data.dataset = gtsrb requires data.dir (or --data-dir)".to_string());
                } else if !Path::new(dir).is_dir() {
                    p.errs.push(format!("dataset directory {dir} does not exist"));
                }
                DatasetKind::Gtsrb(PathBuf::from(dir))
            }
            other => {
                p.errs.push(format!("data.dataset {other:?} must be synth or gtsrb"));
                DatasetKind::Synth
            }
        };
        let data = DataConfig {
            kind,
            classes: p.list("data.classes").unwrap_or_default(),
            per_class: p.parse("data.per_class").unwrap_or(0),
            train_per_class: p.parse("data.train_per_class").unwrap_or(1),
            val_per_class: p.parse("data.val_per_class").unwrap_or(1),
            seed: p.parse("data.seed").unwrap_or(0),
            permute_labels: p.bool("data.permute_labels").unwrap_or(false),
        };

        let seed: u64 = p.parse("run.seed").unwrap_or(0);
        let augment = AugmentPolicy {
            rotation_max_deg: p.parse("augment.rotation_max_deg").unwrap_or(0.0),
            zoom_range: (
                p.parse("augment.zoom_min").unwrap_or(1.0),
                p.parse("augment.zoom_max").unwrap_or(1.0),
            ),
            hflip_prob: p.parse("augment.hflip_prob").unwrap_or(0.0),
            seed,
        };
        let out = match p.map.get("run.out") {
            "" => None,
            dir => Some(PathBuf::from(dir)),
        };
        let mut cfg = RunConfig {
            model,
            optim,
            data,
            augment,
            seed,
            threads: p.parse("run.threads").unwrap_or(1),
            verification: p.bool("run.verification").unwrap_or(false),
            out,
            eval_batch: p.parse("run.eval_batch").unwrap_or(100),
        };
        let mut errs = p.errs;
        if cfg.verification {
            cfg.optim.precision = DType::F64;
            cfg.threads = 1;
        }
        errs.extend(cfg.violations());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut errs = self.model.violations();
        errs.extend(self.optim.violations());
        errs.extend(self.augment.violations());
        if self.model.input_resolution.0 < 16 && self.data.kind == DatasetKind::Synth {
            errs.push("the synthetic dataset needs a resolution of at least 16".to_string());
        }
        if self.data.train_per_class == 0 || self.data.val_per_class == 0 {
            errs.push("data.train_per_class and data.val_per_class must be >= 1".to_string());
        }
        if self.threads == 0 {
            errs.push("run.threads must be >= 1".to_string());
        }
        if self.eval_batch == 0 {
            errs.push("run.eval_batch must be >= 1".to_string());
        }
        errs
    }

    /// Output directory: `run.out`, else `$EATFORMER_OUT/<name>`, else `runs/<name>`.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
        let dataset = match self.data.kind {
            DatasetKind::Synth => "synth",
            DatasetKind::Gtsrb(_) => "gtsrb",
        };
        root.join(format!("{command}-{dataset}-seed{}", self.seed))
    }

    /// The fully resolved configuration in the input format; feeding it back
    /// reproduces this configuration.
    pub fn resolved(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let stages = &self.model.stages;
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "preset = desk");
        let _ = writeln!(s, "resolution = {}", self.model.input_resolution.0);
        let _ = writeln!(
            s,
            "depths = {}",
            join(stages.iter().map(|x| x.depth.to_string()).collect())
        );
        let _ = writeln!(
            s,
            "channels = {}",
            join(stages.iter().map(|x| x.channels.to_string()).collect())
        );
        let _ = writeln!(
            s,
            "heads = {}",
            join(stages.iter().map(|x| x.heads.to_string()).collect())
        );
        let _ = writeln!(
            s,
            "split_ratio = {}",
            join(stages.iter().map(|x| x.split_ratio.to_string()).collect())
        );
        let _ = writeln!(
            s,
            "downsample = {}",
            join(stages.iter().map(|x| flag(x.downsample)).collect())
        );
        let _ = writeln!(
            s,
            "mdmsa = {}",
            join(stages.iter().map(|x| flag(x.use_mdmsa)).collect())
        );
        let _ = writeln!(s, "stem_channels = {}", self.model.stem_channels);
        let _ = writeln!(s, "mlp_ratio = {}", self.model.mlp_ratio);
        let _ = writeln!(s, "local_kernel = {}", self.model.local_kernel);
        let o = &self.optim;
        let _ = writeln!(s, "\n[optim]");
        let _ = writeln!(s, "learning_rate = {}", o.learning_rate);
        let _ = writeln!(s, "beta1 = {}", o.beta1);
        let _ = writeln!(s, "beta2 = {}", o.beta2);
        let _ = writeln!(s, "eps = {:e}", o.eps);
        let _ = writeln!(s, "epochs = {}", o.epochs);
        let _ = writeln!(s, "batch_size = {}", o.batch_size);
        let _ = writeln!(s, "precision = {}", o.precision.bits());
        let d = &self.data;
        let _ = writeln!(s, "\n[data]");
        match &d.kind {
            DatasetKind::Synth => {
                let _ = writeln!(s, "dataset = synth");
            }
            DatasetKind::Gtsrb(dir) => {
                let _ = writeln!(s, "dataset = gtsrb");
                let _ = writeln!(s, "dir = {}", dir.display());
            }
        }
        let _ = writeln!(
            s,
            "classes = {}",
            join(d.classes.iter().map(ToString::to_string).collect())
        );
        let _ = writeln!(s, "per_class = {}", d.per_class);
        let _ = writeln!(s, "train_per_class = {}", d.train_per_class);
        let _ = writeln!(s, "val_per_class = {}", d.val_per_class);
        let _ = writeln!(s, "seed = {}", d.seed);
        let _ = writeln!(s, "permute_labels = {}", d.permute_labels);
        let a = &self.augment;
        let _ = writeln!(s, "\n[augment]");
        let _ = writeln!(s, "rotation_max_deg = {}", a.rotation_max_deg);
        let _ = writeln!(s, "zoom_min = {}", a.zoom_range.0);
        let _ = writeln!(s, "zoom_max = {}", a.zoom_range.1);
        let _ = writeln!(s, "hflip_prob = {}", a.hflip_prob);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "verification = {}", self.verification);
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out = {}", out.display());
        }
        let _ = writeln!(s, "eval_batch = {}", self.eval_batch);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::from_map(&ConfigMap::default()).unwrap();
        assert_eq!(cfg.model, ModelSpec::desk(3));
        assert_eq!(cfg.optim, OptimConfig::default());
        assert_eq!(cfg.data.kind, DatasetKind::Synth);
    }

    #[test]
    fn sections_comments_and_overrides() {
        let mut map = ConfigMap::default();
        let errs = map.apply_text(
            "# comment\n[optim]\nepochs = 5 ; trailing\nlearning_rate=0.001\n\n[model]  # header comment\npreset = micro\nheads = 2\n[run]\nout = runs/a#b\n",
            "test",
        );
        assert!(errs.is_empty(), "{errs:?}");
        map.set_assignment("optim.epochs=7").unwrap();
        let cfg = RunConfig::from_map(&map).unwrap();
        assert_eq!(cfg.optim.epochs, 7);
        assert_eq!(cfg.optim.learning_rate, 0.001);
        assert!(cfg.model.stages.iter().all(|s| s.heads == 2));
        assert_eq!(cfg.model.input_resolution, (16, 16));
        assert_eq!(map.get("run.out"), "runs/a#b");
    }

    #[test]
    fn every_problem_is_listed() {
        let mut map = ConfigMap::default();
        let errs = map.apply_text("[bogus]\nx = 1\n[optim]\nepochs = many\nnonsense\n", "f");
        assert_eq!(errs.len(), 2, "{errs:?}");
        map.set("optim.batch_size", "0").unwrap();
        map.set("optim.beta1", "1.5").unwrap();
        map.set("optim.epochs", "many").unwrap();
        let errs = RunConfig::from_map(&map).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn missing_dataset_dir_is_named() {
        let mut map = ConfigMap::default();
        map.set("data.dataset", "gtsrb").unwrap();
        map.set("data.dir", "/definitely/not/here").unwrap();
        let errs = RunConfig::from_map(&map).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("/definitely/not/here")), "{errs:?}");
    }

    #[test]
    fn verification_forces_64_bit_single_thread() {
        let mut map = ConfigMap::default();
        map.set("run.verification", "true").unwrap();
        map.set("run.threads", "4").unwrap();
        let cfg = RunConfig::from_map(&map).unwrap();
        assert_eq!(cfg.optim.precision, DType::F64);
        assert_eq!(cfg.threads, 1);
    }

    #[test]
    fn resolved_round_trips() {
        let mut map = ConfigMap::default();
        map.set("model.preset", "micro").unwrap();
        map.set("augment.hflip_prob", "0.5").unwrap();
        map.set("data.classes", "1,3").unwrap();
        map.set("run.out", "/tmp/x").unwrap();
        let cfg = RunConfig::from_map(&map).unwrap();
        let mut again = ConfigMap::default();
        assert!(again.apply_text(&cfg.resolved(), "resolved").is_empty());
        assert_eq!(RunConfig::from_map(&again).unwrap(), cfg);
    }
}
