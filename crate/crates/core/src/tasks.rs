//! Task families and the line-oriented task file format.
//!
//! A task file is a sequence of blocks:
//!
//! ```text
//! #task kind=classification:3 shots=1
//! s(0.5,-1.25)=0
//! s(2,0.75)=1
//! s(-1,-1)=2
//! q(0.25,0.5)=1
//! ```
//!
//! Rows start with the role (`s` support, `q` query), the comma-separated
//! inputs in parentheses, then `=` and the target. Numbers use `.` as the
//! decimal separator. Other lines starting with `#` and blank lines are
//! ignored.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpvib::{Task, TaskKind};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum TaskGenSpec {
    /// `y = A sin(x + phase)`, noiseless. With `shots_max` the support size
    /// is drawn uniformly from `shots..=shots_max` per task.
    Sinusoid {
        amp_range: (f64, f64),
        phase_range: (f64, f64),
        x_range: (f64, f64),
        shots: usize,
        #[serde(default)]
        shots_max: Option<usize>,
        query: usize,
    },
    /// Gaussian clusters: centers `N(0, center_scale^2 I)`, points
    /// `center + N(0, spread^2 I)`.
    SyntheticClasses { ways: usize, shots: usize, query_per_class: usize, dim: usize, spread: f64, center_scale: f64 },
    /// Tasks read from a task file; the seed picks one.
    FromFile { path: PathBuf },
}

impl TaskGenSpec {
    pub fn sinusoid(shots: usize) -> Self {
        TaskGenSpec::Sinusoid {
            amp_range: (0.1, 5.0),
            phase_range: (0.0, std::f64::consts::PI),
            x_range: (-5.0, 5.0),
            shots,
            shots_max: None,
            query: 50,
        }
    }

    pub fn synthetic_classes(ways: usize, shots: usize) -> Self {
        TaskGenSpec::SyntheticClasses { ways, shots, query_per_class: 15, dim: 16, spread: 1.0, center_scale: 2.0 }
    }

    /// Same family with a different number of shots.
    pub fn with_shots(&self, k: usize) -> Self {
        let mut s = self.clone();
        match &mut s {
            TaskGenSpec::Sinusoid { shots, shots_max, .. } => {
                *shots = k;
                *shots_max = None;
            }
            TaskGenSpec::SyntheticClasses { shots, .. } => *shots = k,
            TaskGenSpec::FromFile { .. } => {}
        }
        s
    }

    pub fn shots(&self) -> Option<usize> {
        match self {
            TaskGenSpec::Sinusoid { shots, .. } | TaskGenSpec::SyntheticClasses { shots, .. } => Some(*shots),
            TaskGenSpec::FromFile { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        let range = |key: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                bad(key, format!("empty range [{lo}, {hi}]"))
            }
        };
        match self {
            TaskGenSpec::Sinusoid { amp_range, phase_range, x_range, shots, shots_max, .. } => {
                range("task.amp_range", *amp_range)?;
                range("task.phase_range", *phase_range)?;
                range("task.x_range", *x_range)?;
                if *shots == 0 {
                    return bad("task.shots", "must be >= 1".into());
                }
                if shots_max.is_some_and(|m| m < *shots) {
                    return bad("task.shots_max", "must be >= task.shots".into());
                }
            }
            TaskGenSpec::SyntheticClasses { ways, shots, dim, spread, center_scale, .. } => {
                if *ways < 2 {
                    return bad("task.ways", "classification needs at least 2 classes".into());
                }
                if *shots == 0 {
                    return bad("task.shots", "must be >= 1".into());
                }
                if *dim == 0 {
                    return bad("task.dim", "must be >= 1".into());
                }
                if !(*spread >= 0.0 && *center_scale >= 0.0) {
                    return bad("task.spread", "scales must be non-negative".into());
                }
            }
            TaskGenSpec::FromFile { .. } => {}
        }
        Ok(())
    }

    pub fn kind(&self) -> Option<TaskKind> {
        match self {
            TaskGenSpec::Sinusoid { .. } => Some(TaskKind::Regression),
            TaskGenSpec::SyntheticClasses { ways, .. } => Some(TaskKind::Classification { n_classes: *ways }),
            TaskGenSpec::FromFile { .. } => None,
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            TaskGenSpec::Sinusoid { .. } => Some(1),
            TaskGenSpec::SyntheticClasses { dim, .. } => Some(*dim),
            TaskGenSpec::FromFile { .. } => None,
        }
    }
}

/// Ground truth of a sinusoid task, for plotting and error curves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws a sinusoid task and returns its ground truth alongside.
pub fn sample_sinusoid(spec: &TaskGenSpec, seed: u64) -> Result<(Task, Sinusoid)> {
    let TaskGenSpec::Sinusoid { amp_range, phase_range, x_range, shots, shots_max, query } = spec else {
        return Err(Error::Invalid("not a sinusoid family".into()));
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shots = match shots_max {
        Some(hi) => rng.random_range(*shots..=*hi),
        None => *shots,
    };
    let truth = Sinusoid { amplitude: draw(&mut rng, *amp_range), phase: draw(&mut rng, *phase_range) };
    let xs: Vec<f64> = (0..shots + query).map(|_| draw(&mut rng, *x_range)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| truth.eval(x)).collect();
    let task = Task::new(
        Matrix::column(&xs[..shots]),
        ys[..shots].to_vec(),
        Matrix::column(&xs[shots..]),
        ys[shots..].to_vec(),
        TaskKind::Regression,
    )?;
    Ok((task, truth))
}

/// Class centers and task of a synthetic classification draw.
pub fn sample_classes(spec: &TaskGenSpec, seed: u64) -> Result<(Task, Matrix)> {
    let TaskGenSpec::SyntheticClasses { ways, shots, query_per_class, dim, spread, center_scale } = spec else {
        return Err(Error::Invalid("not a synthetic classification family".into()));
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Matrix::from_fn(*ways, *dim, |_, _| center_scale * rng.sample::<f64, _>(StandardNormal));
    let point = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..*dim).map(|i| centers[(n, i)] + spread * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let block = |count: usize, rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
        // Interleaved by class so any prefix of `k * ways` rows is balanced.
        let mut xs = Vec::with_capacity(count * ways * dim);
        let mut ys = Vec::with_capacity(count * ways);
        for _ in 0..count {
            for n in 0..*ways {
                xs.extend(point(n, rng));
                ys.push(n as f64);
            }
        }
        (xs, ys)
    };
    let (xs, ys) = block(*shots, &mut rng);
    let (xq, yq) = block(*query_per_class, &mut rng);
    let kind = TaskKind::Classification { n_classes: *ways };
    let task = Task::new(
        Matrix::from_vec(ys.len(), *dim, xs)?,
        ys,
        Matrix::from_vec(yq.len(), *dim, xq)?,
        yq,
        kind,
    )?;
    Ok((task, centers))
}

/// Deterministic task draw for `(spec, seed)`.
pub fn sample_task(spec: &TaskGenSpec, seed: u64) -> Result<Task> {
    match spec {
        TaskGenSpec::Sinusoid { .. } => Ok(sample_sinusoid(spec, seed)?.0),
        TaskGenSpec::SyntheticClasses { .. } => Ok(sample_classes(spec, seed)?.0),
        TaskGenSpec::FromFile { path } => {
            let tasks = load_tasks(path)?;
            if tasks.is_empty() {
                return Err(Error::Invalid(format!("{} holds no tasks", path.display())));
            }
            Ok(tasks[(seed % tasks.len() as u64) as usize].clone())
        }
    }
}

/// SplitMix64 finalizer; decorrelates seeds derived from small integers.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of stream `stream` under a base seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix_seed(mix_seed(mix_seed(base) ^ stream) ^ index)
}

pub fn format_tasks(tasks: &[Task]) -> String {
    let mut out = String::new();
    for t in tasks {
        let (kind, shots) = match t.kind {
            TaskKind::Regression => ("regression".to_string(), t.n_support()),
            TaskKind::Classification { n_classes } => (format!("classification:{n_classes}"), t.n_support() / n_classes),
        };
        let _ = writeln!(out, "#task kind={kind} shots={shots}");
        for (role, x, y) in [("s", &t.x_support, &t.y_support), ("q", &t.x_query, &t.y_query)] {
            for (j, yj) in y.iter().enumerate() {
                let xs: Vec<String> = x.row_slice(j).iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{role}({})={}", xs.join(","), fmt_target(*yj, t.kind));
            }
        }
    }
    out
}

fn fmt_target(y: f64, kind: TaskKind) -> String {
    match kind {
        TaskKind::Regression => format!("{y:?}"),
        TaskKind::Classification { .. } => format!("{}", y as usize),
    }
}

pub fn save_tasks(tasks: &[Task], path: &Path) -> Result<()> {
    std::fs::write(path, format_tasks(tasks))?;
    Ok(())
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_tasks(&text)
}

struct Pending {
    kind: TaskKind,
    header_line: usize,
    dim: Option<usize>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    xq: Vec<f64>,
    yq: Vec<f64>,
}

impl Pending {
    fn finish(self) -> Result<Task> {
        let d = self.dim.unwrap_or(0);
        let rows = |v: &[f64]| if d == 0 { 0 } else { v.len() / d };
        let parse_err = |e: Error| Error::Parse { line: self.header_line, msg: e.to_string() };
        let xs = Matrix::from_vec(rows(&self.xs), d, self.xs.clone()).map_err(parse_err)?;
        let xq = Matrix::from_vec(rows(&self.xq), d, self.xq.clone()).map_err(parse_err)?;
        Task::new(xs, self.ys, xq, self.yq, self.kind).map_err(parse_err)
    }
}

pub fn parse_tasks(text: &str) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    let mut cur: Option<Pending> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#task") {
            if let Some(p) = cur.take() {
                tasks.push(p.finish()?);
            }
            cur = Some(Pending { kind: parse_header(rest).map_err(err)?, header_line: line_no, dim: None, xs: vec![], ys: vec![], xq: vec![], yq: vec![] });
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let p = cur.as_mut().ok_or_else(|| err("data row before any `#task` header".into()))?;
        let (role, x, y) = parse_row(line, p.kind).map_err(err)?;
        match p.dim {
            None => p.dim = Some(x.len()),
            Some(d) if d != x.len() => return Err(err(format!("row has {} inputs, expected {d}", x.len()))),
            _ => {}
        }
        let (xv, yv) = if role == 's' { (&mut p.xs, &mut p.ys) } else { (&mut p.xq, &mut p.yq) };
        xv.extend(x);
        yv.push(y);
    }
    if let Some(p) = cur.take() {
        tasks.push(p.finish()?);
    }
    Ok(tasks)
}

fn parse_header(rest: &str) -> std::result::Result<TaskKind, String> {
    let mut kind = None;
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| format!("header field `{field}` is not key=value"))?;
        match k {
            "kind" => {
                kind = Some(if v == "regression" {
                    TaskKind::Regression
                } else if let Some(n) = v.strip_prefix("classification:") {
                    let n: usize = n.parse().map_err(|_| format!("bad class count `{n}` in kind"))?;
                    if n == 0 {
                        return Err("class count must be >= 1".into());
                    }
                    TaskKind::Classification { n_classes: n }
                } else {
                    return Err(format!("unknown task kind `{v}`"));
                })
            }
            "shots" => {
                v.parse::<usize>().map_err(|_| format!("bad shots value `{v}`"))?;
            }
            _ => return Err(format!("unknown header field `{k}`")),
        }
    }
    kind.ok_or_else(|| "header lacks kind=".into())
}

fn parse_row(line: &str, kind: TaskKind) -> std::result::Result<(char, Vec<f64>, f64), String> {
    let role = match line.chars().next() {
        Some(c @ ('s' | 'q')) => c,
        _ => return Err("row must start with role `s` or `q`".into()),
    };
    let rest = line[1..].trim_start();
    let rest = rest.strip_prefix('(').ok_or("expected `(` after the role")?;
    let (inputs, tail) = rest.split_once(')').ok_or("missing `)`")?;
    let target = tail.trim().strip_prefix('=').ok_or("missing `=target`")?.trim();
    let x = inputs
        .split(',')
        .enumerate()
        .map(|(k, s)| s.trim().parse::<f64>().map_err(|_| format!("input {} `{}` is not a number", k + 1, s.trim())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err("inputs must be finite".into());
    }
    let y = match kind {
        TaskKind::Regression => target.parse::<f64>().ok().filter(|v| v.is_finite()),
        TaskKind::Classification { n_classes } => target.parse::<usize>().ok().filter(|&l| l < n_classes).map(|l| l as f64),
    };
    let y = y.ok_or_else(|| format!("bad target `{target}` in the label column"))?;
    Ok((role, x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_fixed_amp_and_phase() {
        let spec = TaskGenSpec::Sinusoid { amp_range: (2.0, 2.0), phase_range: (0.0, 0.0), x_range: (0.0, 0.0), shots: 1, shots_max: None, query: 1 };
        let (t, truth) = sample_sinusoid(&spec, 3).unwrap();
        assert_eq!(t.y_support, vec![0.0]);
        assert_eq!(truth.eval(0.0), 0.0);
    }

    #[test]
    fn same_seed_same_task() {
        for spec in [TaskGenSpec::sinusoid(5), TaskGenSpec::synthetic_classes(5, 2)] {
            assert_eq!(sample_task(&spec, 11).unwrap(), sample_task(&spec, 11).unwrap());
            assert_ne!(sample_task(&spec, 11).unwrap(), sample_task(&spec, 12).unwrap());
        }
    }

    #[test]
    fn class_tasks_are_balanced_and_disjoint() {
        let (t, centers) = sample_classes(&TaskGenSpec::synthetic_classes(5, 3), 4).unwrap();
        assert_eq!(centers.shape(), (5, 16));
        assert_eq!(t.n_support(), 15);
        assert_eq!(t.n_query(), 75);
        for n in 0..5 {
            assert_eq!(t.support_labels().unwrap().iter().filter(|&&l| l == n).count(), 3);
        }
        for i in 0..t.n_support() {
            for j in 0..t.n_query() {
                assert_ne!(t.x_support.row_slice(i), t.x_query.row_slice(j));
            }
        }
    }

    #[test]
    fn round_trip_and_empty() {
        let tasks = vec![
            sample_task(&TaskGenSpec::sinusoid(4), 1).unwrap(),
            sample_task(&TaskGenSpec::synthetic_classes(3, 2), 2).unwrap(),
        ];
        let text = format_tasks(&tasks);
        assert_eq!(parse_tasks(&text).unwrap(), tasks);
        assert_eq!(parse_tasks("").unwrap(), vec![]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        save_tasks(&tasks, &path).unwrap();
        assert_eq!(load_tasks(&path).unwrap(), tasks);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let text = "#task kind=classification:2 shots=1\ns(0.5)=0\ns(1.5)=x\n";
        assert!(matches!(parse_tasks(text), Err(Error::Parse { line: 3, .. })));
        let text = "#task kind=classification:2 shots=1\ns(0.5)=0\nq(1.5)=2\n";
        assert!(matches!(parse_tasks(text), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_tasks("s(1)=2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_tasks("#task kind=regression\ns(1,2)=1\ns(1)=2\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_tasks("#task kind=nope\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, 0, 0);
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_ne!(a, derive_seed(2, 0, 0));
    }
}
