//! Sectioned key-value experiment configuration.
//!
//! ```text
//! # comment
//! [experiment]
//! seed = 7
//! ```
//!
//! Keys are unique within a section. Unknown sections and keys are errors so
//! typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{AugmentationConfig, SyntheticTaskSpec, DESIRABLE, PRIVATE};
use crate::error::{Error, Result};
use crate::networks::{ArchitectureSpec, NormVariant};
use crate::objectives::{EncoderObjective, PrivacyUpdateMode, Utility, DEFAULT_ALPHA};
use crate::optim::LrSchedule;
use crate::trainer::TrainConfig;
use crate::verify::VerifyConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    /// Parses the whole text, reporting every malformed line at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut errs = Vec::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let ln = i + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_string();
                if ini.sections.contains_key(&name) {
                    errs.push(format!("line {ln}: section [{name}] repeated"));
                }
                ini.sections.entry(name.clone()).or_default();
                section = Some(name);
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {ln}: expected `key = value`, got `{line}`"));
                continue;
            };
            let Some(sec) = &section else {
                errs.push(format!("line {ln}: key outside any section"));
                continue;
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            let map = ini.sections.get_mut(sec).expect("section inserted above");
            if map.insert(k.clone(), v).is_some() {
                errs.push(format!("line {ln}: key `{k}` repeated in [{sec}]"));
            }
        }
        if errs.is_empty() {
            Ok(ini)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { spec: SyntheticTaskSpec, samples: usize },
    /// CSV manifest; the private task is membership of `target`.
    Manifest { path: PathBuf, target: String, side: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSource,
    pub encoder: ArchitectureSpec,
    pub train: TrainConfig,
    pub verify: VerifyConfig,
    /// Tasks evaluated by `verify` when none are given on the command line.
    pub verify_tasks: Vec<String>,
    pub workers: usize,
}

impl ExperimentConfig {
    /// Small synthetic experiment with desk-scale schedules.
    pub fn desk(seed: u64) -> Self {
        let spec = SyntheticTaskSpec { seed, ..SyntheticTaskSpec::default() };
        let objective = EncoderObjective {
            privacy: PrivacyUpdateMode::LabelFlip,
            utility: Utility::DesirableTasks(vec![DESIRABLE.into()]),
            alpha: DEFAULT_ALPHA,
        };
        Self {
            name: "desk".into(),
            seed,
            data: DataSource::Synthetic { spec, samples: 4000 },
            encoder: ArchitectureSpec::desk_encoder([3, 32, 32], [8, 8, 8]),
            train: TrainConfig::desk(objective, seed),
            verify: VerifyConfig::desk(seed),
            verify_tasks: vec![PRIVATE.into(), DESIRABLE.into()],
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut take = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(v)) => errs.extend(v),
            Err(e) => errs.push(e.to_string()),
        };
        match &self.data {
            DataSource::Synthetic { spec, samples } => {
                take(spec.validate());
                if *samples < 100 {
                    take(Err(Error::usage(format!("synthetic samples {samples} below 100"))));
                }
            }
            DataSource::Manifest { target, side, .. } => {
                if target.is_empty() {
                    take(Err(Error::usage("manifest source needs a target category")));
                }
                if *side == 0 {
                    take(Err(Error::usage("image side must be positive")));
                }
            }
        }
        take(self.encoder.shapes().map(|_| ()));
        take(self.train.validate());
        take(self.verify.validate());
        if self.train.seed != self.seed || self.verify.seed != self.seed {
            take(Err(Error::usage("training and verification seeds must equal the experiment seed")));
        }
        if self.workers == 0 {
            take(Err(Error::usage("workers must be positive")));
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            if self.encoder.input != [spec.channels, spec.size, spec.size] {
                take(Err(Error::usage(format!(
                    "encoder input {:?} does not match {}x{}x{} images",
                    self.encoder.input, spec.channels, spec.size, spec.size
                ))));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Reads a config file. Keys left out keep their [`ExperimentConfig::desk`]
    /// values; every problem found is reported together.
    pub fn from_ini(text: &str) -> Result<Self> {
        let ini = Ini::parse(text)?;
        let mut r = Reader { ini: &ini, errs: Vec::new(), used: BTreeMap::new() };
        let seed = r.parse("experiment", "seed").unwrap_or(0);
        let mut cfg = ExperimentConfig::desk(seed);
        if let Some(v) = r.raw("experiment", "name") {
            cfg.name = v.to_string();
        }
        cfg.workers = r.parse("experiment", "workers").unwrap_or(cfg.workers);

        let source = r.raw("data", "source").unwrap_or("synthetic").to_string();
        match source.as_str() {
            "synthetic" => {
                let mut spec = SyntheticTaskSpec { seed, ..SyntheticTaskSpec::default() };
                r.set(&mut spec.seed, "data", "seed");
                r.set(&mut spec.size, "data", "size");
                r.set(&mut spec.channels, "data", "channels");
                r.set(&mut spec.cues, "data", "cues");
                r.set(&mut spec.noise, "data", "noise");
                r.set(&mut spec.glyph_amplitude, "data", "glyph_amplitude");
                r.set(&mut spec.tint_amplitude, "data", "tint_amplitude");
                r.set(&mut spec.texture_amplitude, "data", "texture_amplitude");
                r.set(&mut spec.bar_amplitude, "data", "bar_amplitude");
                r.set(&mut spec.gradient_amplitude, "data", "gradient_amplitude");
                let samples = r.parse("data", "samples").unwrap_or(4000);
                cfg.encoder.input = [spec.channels, spec.size, spec.size];
                cfg.data = DataSource::Synthetic { spec, samples };
            }
            "manifest" => {
                let path = r.raw("data", "manifest").map(PathBuf::from);
                let target = r.raw("data", "target").map(str::to_string);
                let side = r.parse("data", "side").unwrap_or(32);
                match (path, target) {
                    (Some(path), Some(target)) => {
                        cfg.encoder.input = [3, side, side];
                        cfg.data = DataSource::Manifest { path, target: target.clone(), side };
                        cfg.train.private_task = target.clone();
                        cfg.train.objective.utility = Utility::VarianceOnly;
                        cfg.verify_tasks = vec![target];
                    }
                    _ => r.errs.push("[data] manifest source needs `manifest` and `target`".into()),
                }
            }
            other => r.errs.push(format!("[data] unknown source `{other}`")),
        }

        if let Some(arch) = r.parse::<ArchitectureSpec>("encoder", "architecture") {
            cfg.encoder = arch;
        } else {
            let variant = r.parse::<NormVariant>("encoder", "variant").unwrap_or(NormVariant::PerLocationNoBias);
            let widths = r.list::<usize>("encoder", "widths").unwrap_or_else(|| vec![8, 8, 8]);
            match <[usize; 3]>::try_from(widths.as_slice()) {
                Ok(w) => cfg.encoder = ArchitectureSpec::encoder_variant(cfg.encoder.input, w, variant),
                Err(_) => r.errs.push(format!("[encoder] widths needs exactly 3 values, got {widths:?}")),
            }
        }

        let t = &mut cfg.train;
        t.seed = seed;
        r.set(&mut t.batch, "training", "batch");
        r.set(&mut t.warmup, "training", "warmup");
        r.set(&mut t.iterations, "training", "iterations");
        let period = (t.iterations as f64 / 4.3).round().max(1.0) as u64;
        t.encoder_lr = LrSchedule::StepDecay { base: 1e-3, factor: LrSchedule::quarter_decade(), period };
        r.set(&mut t.classifier_lr, "training", "classifier_lr");
        r.set(&mut t.encoder_lr, "training", "encoder_lr");
        r.set(&mut t.objective.privacy, "training", "privacy_loss");
        r.set(&mut t.objective.alpha, "training", "alpha");
        if let Some(u) = r.raw("training", "utility") {
            t.objective.utility = parse_utility(u);
        }
        r.set(&mut t.private_task, "training", "private_task");
        r.set(&mut t.classifier_steps, "training", "classifier_steps");
        r.set(&mut t.encoder_steps, "training", "encoder_steps");
        if let Some(w) = r.list("training", "classifier_widths") {
            t.classifier_widths = w;
        }
        r.set(&mut t.eval_every, "training", "eval_every");
        r.set(&mut t.eval_samples, "training", "eval_samples");
        r.set(&mut t.probe_samples, "training", "probe_samples");
        r.set(&mut t.collapse_patience, "training", "collapse_patience");
        if let Some(a) = r.raw("training", "augment") {
            t.augment = r.augmentation("training", a, cfg.encoder.input[1]);
        }

        let v = &mut cfg.verify;
        v.seed = seed;
        r.set(&mut v.lr, "verification", "lr");
        r.set(&mut v.drop_factor, "verification", "drop_factor");
        r.set(&mut v.batch, "verification", "batch");
        r.set(&mut v.eval_every, "verification", "eval_every");
        r.set(&mut v.window, "verification", "window");
        r.set(&mut v.delta, "verification", "delta");
        r.set(&mut v.max_iterations, "verification", "max_iterations");
        if let Some(w) = r.list("verification", "classifier_widths") {
            v.classifier_widths = w;
        }
        if let Some(a) = r.raw("verification", "augment") {
            v.augment = r.augmentation("verification", a, cfg.encoder.input[1]);
        }
        if let Some(tasks) = r.list::<String>("verification", "tasks") {
            cfg.verify_tasks = tasks;
        }

        for (sec, keys) in &ini.sections {
            for k in keys.keys() {
                if !r.used.get(sec).is_some_and(|s: &Vec<String>| s.contains(k)) {
                    r.errs.push(format!("[{sec}] unknown key `{k}`"));
                }
            }
        }
        if !r.errs.is_empty() {
            return Err(Error::Config(r.errs));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `from_ini(to_ini())` reproduces the config.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[experiment]\nname = {}\nseed = {}\nworkers = {}\n", self.name, self.seed, self.workers);
        match &self.data {
            DataSource::Synthetic { spec, samples } => {
                let _ = writeln!(
                    w,
                    "[data]\nsource = synthetic\nsamples = {samples}\nseed = {}\nsize = {}\nchannels = {}\ncues = {}\nnoise = {}\n\
                     glyph_amplitude = {}\ntint_amplitude = {}\ntexture_amplitude = {}\nbar_amplitude = {}\n\
                     gradient_amplitude = {}\n",
                    spec.seed,
                    spec.size,
                    spec.channels,
                    spec.cues,
                    spec.noise,
                    spec.glyph_amplitude,
                    spec.tint_amplitude,
                    spec.texture_amplitude,
                    spec.bar_amplitude,
                    spec.gradient_amplitude
                );
            }
            DataSource::Manifest { path, target, side } => {
                let _ = writeln!(
                    w,
                    "[data]\nsource = manifest\nmanifest = {}\ntarget = {target}\nside = {side}\n",
                    path.display()
                );
            }
        }
        let _ = writeln!(w, "[encoder]\narchitecture = {}\n", self.encoder);
        let t = &self.train;
        let _ = writeln!(
            w,
            "[training]\nbatch = {}\nwarmup = {}\niterations = {}\nclassifier_lr = {}\nencoder_lr = {}\n\
             privacy_loss = {}\nutility = {}\nalpha = {}\nprivate_task = {}\nclassifier_steps = {}\n\
             encoder_steps = {}\nclassifier_widths = {}\neval_every = {}\neval_samples = {}\n\
             probe_samples = {}\ncollapse_patience = {}\naugment = {}\n",
            t.batch,
            t.warmup,
            t.iterations,
            t.classifier_lr,
            t.encoder_lr,
            t.objective.privacy,
            utility_text(&t.objective.utility),
            t.objective.alpha,
            t.private_task,
            t.classifier_steps,
            t.encoder_steps,
            join(&t.classifier_widths),
            t.eval_every,
            t.eval_samples,
            t.probe_samples,
            t.collapse_patience,
            augment_text(&t.augment)
        );
        let v = &self.verify;
        let _ = write!(
            w,
            "[verification]\nlr = {}\ndrop_factor = {}\nbatch = {}\neval_every = {}\nwindow = {}\ndelta = {}\n\
             max_iterations = {}\nclassifier_widths = {}\naugment = {}\ntasks = {}\n",
            v.lr,
            v.drop_factor,
            v.batch,
            v.eval_every,
            v.window,
            v.delta,
            v.max_iterations,
            join(&v.classifier_widths),
            augment_text(&v.augment),
            join(&self.verify_tasks)
        );
        s
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_ini())
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

fn utility_text(u: &Utility) -> String {
    match u {
        Utility::VarianceOnly => "variance".into(),
        Utility::DesirableTasks(t) => format!("tasks {}", join(t)),
    }
}

fn parse_utility(s: &str) -> Utility {
    match s.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["variance"] | [] => Utility::VarianceOnly,
        ["tasks", rest @ ..] => Utility::DesirableTasks(rest.iter().map(|t| t.to_string()).collect()),
        // A bare task list reads as desirable tasks.
        names => Utility::DesirableTasks(names.iter().map(|t| t.to_string()).collect()),
    }
}

fn augment_text(a: &Option<AugmentationConfig>) -> String {
    match a {
        None => "none".into(),
        Some(a) => format!("{} {} {}", a.scale_min, a.scale_max, a.crop),
    }
}

struct Reader<'a> {
    ini: &'a Ini,
    errs: Vec<String>,
    used: BTreeMap<String, Vec<String>>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, sec: &str, key: &str) -> Option<&'a str> {
        let v = self.ini.get(sec, key)?;
        self.used.entry(sec.into()).or_default().push(key.into());
        Some(v)
    }

    fn parse<T: FromStr>(&mut self, sec: &str, key: &str) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(sec, key)?.to_string();
        match v.parse() {
            Ok(x) => Some(x),
            Err(e) => {
                self.errs.push(format!("[{sec}] {key} = `{v}`: {e}"));
                None
            }
        }
    }

    fn set<T: FromStr>(&mut self, slot: &mut T, sec: &str, key: &str)
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.parse(sec, key) {
            *slot = v;
        }
    }

    fn list<T: FromStr>(&mut self, sec: &str, key: &str) -> Option<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(sec, key)?.to_string();
        let mut out = Vec::new();
        for tok in v.split_whitespace() {
            match tok.parse() {
                Ok(x) => out.push(x),
                Err(e) => {
                    self.errs.push(format!("[{sec}] {key}: `{tok}`: {e}"));
                    return None;
                }
            }
        }
        Some(out)
    }

    /// `none`, `desk`, or `SCALE_MIN SCALE_MAX CROP`.
    fn augmentation(&mut self, sec: &str, v: &str, side: usize) -> Option<AugmentationConfig> {
        let toks: Vec<&str> = v.split_whitespace().collect();
        match toks.as_slice() {
            ["none"] => None,
            ["desk"] => Some(AugmentationConfig::desk(side)),
            [a, b, c] => match (a.parse(), b.parse(), c.parse()) {
                (Ok(scale_min), Ok(scale_max), Ok(crop)) => Some(AugmentationConfig { scale_min, scale_max, crop }),
                _ => {
                    self.errs.push(format!("[{sec}] augment: cannot parse `{v}`"));
                    None
                }
            },
            _ => {
                self.errs.push(format!("[{sec}] augment: expected none, desk or `min max crop`, got `{v}`"));
                None
            }
        }
    }
}
