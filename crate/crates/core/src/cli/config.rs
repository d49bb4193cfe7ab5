//! Flat `key = value` run configuration.
//!
//! ```text
//! # sinusoid GP-VIB
//! model = gpvib
//! task.family = sinusoid
//! task.shots = 5
//! train.episodes = 20000
//! ```
//!
//! Lists use commas (`net.hidden = 40,40`), ranges are `lo,hi`. Unknown keys
//! are errors. Defaults depend on `model` and `task.family`; the resolved
//! document written next to a run lists every setting in effect.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::features::{Activation, FeatureNet};
use crate::gpvib::{EncoderKind, GpVib, SolvePath, TaskKind, VibConfig};
use crate::kernels::{KernelKind, KernelSpec};
use crate::maml::{Maml, MamlConfig};
use crate::tasks::{load_tasks, TaskGenSpec};
use crate::trainer::{Model, ModelKind, TrainConfig};

/// How the linear-kernel multiplier is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelVariance {
    /// `1 / M`.
    Auto,
    Fixed(f64),
    /// `exp(v) / M` with `v` learned.
    Trainable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub out: Option<PathBuf>,
    pub task: TaskGenSpec,
    pub train: TrainConfig,
    pub vib: VibConfig,
    pub kernel_variance: KernelVariance,
    pub net: NetConfig,
    pub maml: MamlConfig,
}

const KEYS: &[&str] = &[
    "model",
    "out",
    "seed",
    "task.family",
    "task.amp_range",
    "task.phase_range",
    "task.x_range",
    "task.shots",
    "task.shots_max",
    "task.query",
    "task.ways",
    "task.query_per_class",
    "task.dim",
    "task.spread",
    "task.center_scale",
    "task.path",
    "train.episodes",
    "train.meta_batch",
    "train.lr",
    "train.out_scale_lr",
    "train.eval_every",
    "train.eval_tasks",
    "vib.beta",
    "vib.mc_samples",
    "vib.kernel",
    "vib.kernel_variance",
    "vib.kernel_v",
    "vib.encoder",
    "vib.log_noise",
    "vib.path",
    "net.hidden",
    "net.activation",
    "net.augment",
    "maml.inner_lr",
    "maml.inner_steps_train",
    "maml.inner_steps_test",
    "maml.beta",
    "maml.init_log_s",
    "maml.mc_samples",
    "maml.first_order",
];

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.into(), msg: msg.into() }
}

/// Reads `key = value` lines into a map, rejecting unknown and repeated keys.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(bad(k, "unknown key"));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(bad(k, "given more than once"));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    kv: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.kv.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`"))),
        }
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parse(key, default)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad(key, "must be finite"))
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(bad(key, format!("expected true or false, got `{v}`"))),
        }
    }

    fn range(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                let num = |s: &str| s.parse::<f64>().ok().filter(|x| x.is_finite());
                match parts.as_slice() {
                    [a, b] => match (num(a), num(b)) {
                        (Some(a), Some(b)) => Ok((a, b)),
                        _ => Err(bad(key, format!("cannot parse range `{v}`"))),
                    },
                    _ => Err(bad(key, format!("expected `lo,hi`, got `{v}`"))),
                }
            }
        }
    }

    fn choice<T: Copy>(&self, key: &str, default: T, options: &[(&str, T)]) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => options.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                bad(key, format!("`{v}` is not one of {}", names.join(", ")))
            }),
        }
    }
}

const ACTIVATIONS: &[(&str, Activation)] = &[("relu", Activation::Relu), ("tanh", Activation::Tanh)];
const KERNELS: &[(&str, KernelKind)] = &[("linear", KernelKind::Linear), ("cosine", KernelKind::Cosine)];
const ENCODERS: &[(&str, EncoderKind)] =
    &[("exact", EncoderKind::Exact), ("amortized", EncoderKind::Amortized), ("simplified", EncoderKind::Simplified)];
const PATHS: &[(&str, SolvePath)] = &[("direct", SolvePath::Direct), ("woodbury", SolvePath::Woodbury)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, t)| *t == v).map(|(n, _)| *n).expect("every variant is listed")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&parse_kv(text)?)
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let r = Reader { kv };
        let model: ModelKind = match r.raw("model") {
            None => ModelKind::Gpvib,
            Some(v) => v.parse().map_err(|e: String| bad("model", e))?,
        };
        let family = r.raw("task.family").unwrap_or("sinusoid");
        let task = match family {
            "sinusoid" => {
                let d = TaskGenSpec::sinusoid(5);
                let TaskGenSpec::Sinusoid { amp_range, phase_range, x_range, query, .. } = d else { unreachable!() };
                let shots_max = match r.raw("task.shots_max") {
                    None | Some("none") => None,
                    Some(_) => Some(r.parse("task.shots_max", 0usize)?),
                };
                TaskGenSpec::Sinusoid {
                    amp_range: r.range("task.amp_range", amp_range)?,
                    phase_range: r.range("task.phase_range", phase_range)?,
                    x_range: r.range("task.x_range", x_range)?,
                    shots: r.parse("task.shots", 5)?,
                    shots_max,
                    query: r.parse("task.query", query)?,
                }
            }
            "synthetic_classes" => {
                let TaskGenSpec::SyntheticClasses { query_per_class, dim, spread, center_scale, .. } =
                    TaskGenSpec::synthetic_classes(5, 5)
                else {
                    unreachable!()
                };
                TaskGenSpec::SyntheticClasses {
                    ways: r.parse("task.ways", 5)?,
                    shots: r.parse("task.shots", 5)?,
                    query_per_class: r.parse("task.query_per_class", query_per_class)?,
                    dim: r.parse("task.dim", dim)?,
                    spread: r.f64("task.spread", spread)?,
                    center_scale: r.f64("task.center_scale", center_scale)?,
                }
            }
            "from_file" => {
                let path = r.raw("task.path").ok_or_else(|| bad("task.path", "required for task.family = from_file"))?;
                TaskGenSpec::FromFile { path: PathBuf::from(path) }
            }
            other => return Err(bad("task.family", format!("`{other}` is not one of sinusoid, synthetic_classes, from_file"))),
        };
        for (key, families) in [
            ("task.amp_range", &["sinusoid"][..]),
            ("task.phase_range", &["sinusoid"]),
            ("task.x_range", &["sinusoid"]),
            ("task.shots_max", &["sinusoid"]),
            ("task.query", &["sinusoid"]),
            ("task.shots", &["sinusoid", "synthetic_classes"]),
            ("task.ways", &["synthetic_classes"]),
            ("task.query_per_class", &["synthetic_classes"]),
            ("task.dim", &["synthetic_classes"]),
            ("task.spread", &["synthetic_classes"]),
            ("task.center_scale", &["synthetic_classes"]),
            ("task.path", &["from_file"]),
        ] {
            if r.raw(key).is_some() && !families.contains(&family) {
                return Err(bad(key, format!("does not apply to task.family = {family}")));
            }
        }
        let (kind, input_dim) = resolve_task_shape(&task)?;
        task.validate()?;
        let regression = kind == TaskKind::Regression;
        if model != ModelKind::Gpvib && !regression {
            return Err(bad("model", format!("{model} supports regression tasks only")));
        }

        let base_train = if regression { TrainConfig::regression() } else { TrainConfig::classification() };
        let seed = match r.raw("seed") {
            None => base_train.seed,
            Some(v) => v.parse().map_err(|_| bad("seed", format!("cannot parse `{v}`")))?,
        };
        let train = TrainConfig {
            episodes: r.parse("train.episodes", base_train.episodes)?,
            meta_batch: r.parse("train.meta_batch", base_train.meta_batch)?,
            lr: r.f64("train.lr", base_train.lr)?,
            out_scale_lr: r.f64("train.out_scale_lr", base_train.out_scale_lr)?,
            seed,
            eval_every: r.parse("train.eval_every", base_train.eval_every)?,
            eval_tasks: r.parse("train.eval_tasks", base_train.eval_tasks)?,
            checkpoint: None,
        };
        train.validate().map_err(|e| prefix(e, "train."))?;

        let (hidden, augment) = if regression { (vec![40, 40], false) } else { (vec![64, 64], true) };
        let net = NetConfig {
            hidden: match r.raw("net.hidden") {
                None => hidden,
                Some(v) => v
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().ok().filter(|&n| n > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("net.hidden", format!("expected positive layer sizes, got `{v}`")))?,
            },
            activation: r.choice("net.activation", Activation::Relu, ACTIVATIONS)?,
            augment: r.bool("net.augment", augment)?,
        };
        if net.hidden.is_empty() {
            return Err(bad("net.hidden", "needs at least one layer"));
        }

        let base_vib = if regression { VibConfig::regression(1) } else { VibConfig::classification() };
        let kernel_kind = r.choice("vib.kernel", KernelKind::Linear, KERNELS)?;
        let default_variance = if regression && kernel_kind == KernelKind::Linear { KernelVariance::Auto } else { KernelVariance::Trainable };
        let kernel_variance = match r.raw("vib.kernel_variance") {
            None => default_variance,
            Some("auto") => KernelVariance::Auto,
            Some("trainable") => KernelVariance::Trainable,
            Some(v) => match v.parse::<f64>() {
                Ok(c) if c > 0.0 && c.is_finite() => KernelVariance::Fixed(c),
                _ => return Err(bad("vib.kernel_variance", format!("expected auto, trainable or a positive number, got `{v}`"))),
            },
        };
        if kernel_kind == KernelKind::Cosine && kernel_variance != KernelVariance::Trainable {
            return Err(bad("vib.kernel_variance", "the cosine kernel scale is always trainable"));
        }
        let vib = VibConfig {
            beta: r.f64("vib.beta", base_vib.beta)?,
            mc_samples: r.parse("vib.mc_samples", base_vib.mc_samples)?,
            kernel: KernelSpec { kind: kernel_kind, v: r.f64("vib.kernel_v", 0.0)?, fixed_variance: None },
            encoder: r.choice("vib.encoder", base_vib.encoder, ENCODERS)?,
            log_noise: r.f64("vib.log_noise", base_vib.log_noise)?,
            path: r.choice("vib.path", base_vib.path, PATHS)?,
        };
        vib.validate().map_err(|e| prefix(e, "vib."))?;
        if !regression && vib.encoder == EncoderKind::Exact {
            return Err(bad("vib.encoder", "the exact posterior needs a regression task"));
        }

        let md = MamlConfig::default();
        let maml = MamlConfig {
            inner_lr: r.f64("maml.inner_lr", md.inner_lr)?,
            inner_steps_train: r.parse("maml.inner_steps_train", md.inner_steps_train)?,
            inner_steps_test: r.parse("maml.inner_steps_test", md.inner_steps_test)?,
            beta: r.f64("maml.beta", md.beta)?,
            init_log_s: r.f64("maml.init_log_s", md.init_log_s)?,
            mc_samples: r.parse("maml.mc_samples", md.mc_samples)?,
            first_order: r.bool("maml.first_order", md.first_order)?,
        };
        maml.validate()?;

        let cfg = RunConfig {
            model,
            out: r.raw("out").map(PathBuf::from),
            task,
            train,
            vib,
            kernel_variance,
            net,
            maml,
        };
        cfg.build_model_for(kind, input_dim)?;
        Ok(cfg)
    }

    /// Task kind and input dimension of the configured family.
    pub fn task_shape(&self) -> Result<(TaskKind, usize)> {
        resolve_task_shape(&self.task)
    }

    pub fn build_model(&self) -> Result<Model> {
        let (kind, dim) = self.task_shape()?;
        self.build_model_for(kind, dim)
    }

    fn build_model_for(&self, kind: TaskKind, input_dim: usize) -> Result<Model> {
        match self.model {
            ModelKind::Gpvib => {
                let net = FeatureNet::new(input_dim, &self.net.hidden, self.net.activation, self.net.augment);
                let mut vib = self.vib.clone();
                vib.kernel.fixed_variance = match self.kernel_variance {
                    KernelVariance::Auto => Some(1.0 / net.feature_dim() as f64),
                    KernelVariance::Fixed(c) => Some(c),
                    KernelVariance::Trainable => None,
                };
                Ok(Model::Gpvib(GpVib::new(net, vib, kind)?))
            }
            ModelKind::Maml | ModelKind::StochasticMaml => Ok(Model::Maml(Maml::new(
                input_dim,
                &self.net.hidden,
                self.net.activation,
                self.maml.clone(),
                self.model == ModelKind::StochasticMaml,
            ))),
        }
    }

    /// Every setting in effect, in a form [`RunConfig::parse`] accepts.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let range = |(a, b): (f64, f64)| format!("{a:?},{b:?}");
        put("model", self.model.to_string());
        if let Some(out) = &self.out {
            put("out", out.display().to_string());
        }
        put("seed", self.train.seed.to_string());
        match &self.task {
            TaskGenSpec::Sinusoid { amp_range, phase_range, x_range, shots, shots_max, query } => {
                put("task.family", "sinusoid".into());
                put("task.amp_range", range(*amp_range));
                put("task.phase_range", range(*phase_range));
                put("task.x_range", range(*x_range));
                put("task.shots", shots.to_string());
                put("task.shots_max", shots_max.map_or("none".into(), |m| m.to_string()));
                put("task.query", query.to_string());
            }
            TaskGenSpec::SyntheticClasses { ways, shots, query_per_class, dim, spread, center_scale } => {
                put("task.family", "synthetic_classes".into());
                put("task.ways", ways.to_string());
                put("task.shots", shots.to_string());
                put("task.query_per_class", query_per_class.to_string());
                put("task.dim", dim.to_string());
                put("task.spread", format!("{spread:?}"));
                put("task.center_scale", format!("{center_scale:?}"));
            }
            TaskGenSpec::FromFile { path } => {
                put("task.family", "from_file".into());
                put("task.path", path.display().to_string());
            }
        }
        let t = &self.train;
        put("train.episodes", t.episodes.to_string());
        put("train.meta_batch", t.meta_batch.to_string());
        put("train.lr", format!("{:?}", t.lr));
        put("train.out_scale_lr", format!("{:?}", t.out_scale_lr));
        put("train.eval_every", t.eval_every.to_string());
        put("train.eval_tasks", t.eval_tasks.to_string());
        put("net.hidden", self.net.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        put("net.activation", name_of(ACTIVATIONS, self.net.activation).into());
        put("net.augment", self.net.augment.to_string());
        match self.model {
            ModelKind::Gpvib => {
                let v = &self.vib;
                put("vib.beta", format!("{:?}", v.beta));
                put("vib.mc_samples", v.mc_samples.to_string());
                put("vib.kernel", name_of(KERNELS, v.kernel.kind).into());
                put(
                    "vib.kernel_variance",
                    match self.kernel_variance {
                        KernelVariance::Auto => "auto".into(),
                        KernelVariance::Trainable => "trainable".into(),
                        KernelVariance::Fixed(c) => format!("{c:?}"),
                    },
                );
                put("vib.kernel_v", format!("{:?}", v.kernel.v));
                put("vib.encoder", name_of(ENCODERS, v.encoder).into());
                put("vib.log_noise", format!("{:?}", v.log_noise));
                put("vib.path", name_of(PATHS, v.path).into());
            }
            ModelKind::Maml | ModelKind::StochasticMaml => {
                let m = &self.maml;
                put("maml.inner_lr", format!("{:?}", m.inner_lr));
                put("maml.inner_steps_train", m.inner_steps_train.to_string());
                put("maml.inner_steps_test", m.inner_steps_test.to_string());
                put("maml.beta", format!("{:?}", m.beta));
                put("maml.init_log_s", format!("{:?}", m.init_log_s));
                put("maml.mc_samples", m.mc_samples.to_string());
                put("maml.first_order", m.first_order.to_string());
            }
        }
        s
    }
}

fn prefix(e: Error, p: &str) -> Error {
    match e {
        Error::Config { key, msg } if !key.contains('.') => Error::Config { key: format!("{p}{key}"), msg },
        other => other,
    }
}

fn resolve_task_shape(task: &TaskGenSpec) -> Result<(TaskKind, usize)> {
    if let (Some(k), Some(d)) = (task.kind(), task.input_dim()) {
        return Ok((k, d));
    }
    let TaskGenSpec::FromFile { path } = task else { unreachable!("generated families know their shape") };
    let tasks = load_tasks(path).map_err(|e| bad("task.path", e.to_string()))?;
    let first = tasks.first().ok_or_else(|| bad("task.path", format!("{} holds no tasks", path.display())))?;
    if tasks.iter().any(|t| t.kind != first.kind || t.input_dim() != first.input_dim()) {
        return Err(bad("task.path", "tasks in the file disagree on kind or input dimension"));
    }
    Ok((first.kind, first.input_dim()))
}
