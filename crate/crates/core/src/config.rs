//! Experiment configuration: `[section]` headers, `key = value` lines and
//! `#` comments.
//!
//! ```text
//! [complex]
//! base = circle        # circle | torus | file
//! p = 3
//! [group]
//! kind = lattice       # lattice | cyclic
//! rank = 1
//! [morse]
//! pattern = zigzag     # zigzag | perfect | quasiperiodic | file
//! critical = 1
//! [run]
//! s = 1.0
//! t_list = 0.5, 1, 2
//! ```
//!
//! Lists are comma separated and may be wrapped in brackets. Strings may be
//! quoted. Relative paths resolve against the config file's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::complex::BaseSpec;
use crate::error::{Error, Result};
use crate::group::GroupModel;
use crate::morse::{MorseOptions, MorsePattern, DEFAULT_DELTA};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexConfig {
    pub base: BaseSpec,
    /// Per-degree cell weights; `None` keeps the unit weights.
    pub weights: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorseConfig {
    pub pattern: MorsePattern,
    pub options: MorseOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Heat time of the ledger's trace analog and of `heat-trace`.
    pub s: f64,
    /// Witten deformation parameters.
    pub t_list: Vec<f64>,
    pub window_radius: u64,
    pub cheb_eps: f64,
    pub folner_kmin: u64,
    pub folner_kmax: u64,
    pub ker_tol: f64,
    pub rank_tol: f64,
    pub seed: u64,
    pub output: PathBuf,
    pub tol: f64,
    pub samples: usize,
    /// Random operator pairs for `trace-props`.
    pub pairs: usize,
    pub op_radius: u64,
    pub max_cells: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub complex: ComplexConfig,
    pub group: GroupModel,
    pub morse: MorseConfig,
    pub run: RunConfig,
}

const KEYS: &[(&str, &[&str])] = &[
    ("complex", &["base", "p", "q", "path", "weights0", "weights1", "weights2"]),
    ("group", &["kind", "rank", "order"]),
    ("morse", &["pattern", "critical", "alpha", "amplitude", "scale", "delta", "path"]),
    (
        "run",
        &[
            "s", "t_list", "window_radius", "cheb_eps", "folner_kmin", "folner_kmax", "ker_tol", "rank_tol", "seed",
            "output", "tol", "samples", "pairs", "op_radius", "max_cells",
        ],
    ),
];

struct Entry {
    line: usize,
    value: String,
}

struct Table {
    entries: HashMap<(String, String), Entry>,
    base_dir: PathBuf,
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Config { line, message: message.into() }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl Table {
    fn raw(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.get(&(section.to_string(), key.to_string()))
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str, what: &str) -> Result<Option<(T, usize)>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(e) => unquote(&e.value)
                .parse()
                .map(|v| Some((v, e.line)))
                .map_err(|_| err(e.line, format!("{section}.{key}: expected {what}, got `{}`", e.value))),
        }
    }

    fn real(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        let v = self.parsed::<f64>(section, key, "a real number")?;
        if let Some((x, line)) = v {
            if !x.is_finite() {
                return Err(err(line, format!("{section}.{key}: must be finite")));
            }
        }
        Ok(v.map(|(x, _)| x).unwrap_or(default))
    }

    fn positive(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        let x = self.real(section, key, default)?;
        if x <= 0.0 {
            let line = self.raw(section, key).map(|e| e.line).unwrap_or(0);
            return Err(err(line, format!("{section}.{key}: must be positive, got {x}")));
        }
        Ok(x)
    }

    fn uint(&self, section: &str, key: &str) -> Result<Option<u64>> {
        Ok(self.parsed::<u64>(section, key, "a nonnegative integer")?.map(|(x, _)| x))
    }

    fn required_uint(&self, section: &str, key: &str, context: &str) -> Result<u64> {
        self.uint(section, key)?
            .ok_or_else(|| err(self.line_of(section, context), format!("{section}.{key} is required for {context}")))
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.raw(section, key).map(|e| e.line).unwrap_or(0)
    }

    fn string(&self, section: &str, key: &str) -> Option<(String, usize)> {
        self.raw(section, key).map(|e| (unquote(&e.value).to_string(), e.line))
    }

    fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.string(section, key).map(|(s, _)| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        })
    }

    fn reals(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(e) = self.raw(section, key) else { return Ok(None) };
        let body = e.value.trim();
        let body = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')).unwrap_or(body);
        body.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(e.line, format!("{section}.{key}: `{}` is not a real number", s.trim())))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Rejects keys of the section that the chosen variant does not read.
    fn forbid(&self, section: &str, keys: &[&str], context: &str) -> Result<()> {
        for k in keys {
            if let Some(e) = self.raw(section, k) {
                return Err(err(e.line, format!("{section}.{k} does not apply to {context}")));
            }
        }
        Ok(())
    }
}

fn tokenize(text: &str, base_dir: PathBuf) -> Result<Table> {
    let mut entries = HashMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(line, format!("expected `key = value`, got `{content}`")));
        };
        let key = key.trim();
        let Some(sec) = &section else {
            return Err(err(line, format!("key `{key}` outside of any section")));
        };
        let allowed = KEYS.iter().find(|(s, _)| s == sec).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key) {
            return Err(err(line, format!("unknown key {sec}.{key}")));
        }
        let value = value.trim();
        if value.is_empty() {
            return Err(err(line, format!("{sec}.{key}: empty value")));
        }
        let slot = (sec.clone(), key.to_string());
        if let Some(prev) = entries.get(&slot) {
            let prev: &Entry = prev;
            return Err(err(line, format!("duplicate key {sec}.{key} (first set on line {})", prev.line)));
        }
        entries.insert(slot, Entry { line, value: value.to_string() });
    }
    Ok(Table { entries, base_dir })
}

fn complex_section(t: &Table) -> Result<ComplexConfig> {
    let (base, line) = t.string("complex", "base").ok_or_else(|| err(0, "complex.base is required"))?;
    let spec = match base.as_str() {
        "circle" => {
            t.forbid("complex", &["q", "path"], "a circle base")?;
            BaseSpec::Circle { p: t.required_uint("complex", "p", "base")? as usize }
        }
        "torus" => {
            t.forbid("complex", &["path"], "a torus base")?;
            BaseSpec::Torus {
                p: t.required_uint("complex", "p", "base")? as usize,
                q: t.required_uint("complex", "q", "base")? as usize,
            }
        }
        "file" => {
            t.forbid("complex", &["p", "q"], "a file base")?;
            BaseSpec::File(t.path("complex", "path").ok_or_else(|| err(line, "complex.path is required for base = file"))?)
        }
        other => return Err(err(line, format!("complex.base: expected circle, torus or file, got `{other}`"))),
    };
    let weights = (0..3)
        .map(|k| t.reals("complex", &format!("weights{k}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComplexConfig { base: spec, weights })
}

fn group_section(t: &Table) -> Result<GroupModel> {
    let (kind, line) = t.string("group", "kind").ok_or_else(|| err(0, "group.kind is required"))?;
    match kind.as_str() {
        "lattice" => {
            if let Some(e) = t.raw("group", "order") {
                return Err(err(e.line, "group.order applies only to group.kind = cyclic"));
            }
            let rank = t.required_uint("group", "rank", "kind")?;
            GroupModel::lattice(rank as usize).map_err(|e| err(t.line_of("group", "rank"), e.to_string()))
        }
        "cyclic" => {
            if let Some(e) = t.raw("group", "rank") {
                return Err(err(e.line, "group.rank applies only to group.kind = lattice"));
            }
            let order = t.required_uint("group", "order", "kind")?;
            GroupModel::cyclic(order).map_err(|e| err(t.line_of("group", "order"), e.to_string()))
        }
        other => Err(err(line, format!("group.kind: expected lattice or cyclic, got `{other}`"))),
    }
}

fn morse_section(t: &Table) -> Result<MorseConfig> {
    let options = MorseOptions {
        delta: t.positive("morse", "delta", DEFAULT_DELTA)?,
        scale: t.positive("morse", "scale", 1.0)?,
    };
    let (name, line) = t.string("morse", "pattern").unwrap_or(("zigzag".into(), 0));
    let pattern = match name.as_str() {
        "zigzag" | "invariant_zigzag" => {
            t.forbid("morse", &["alpha", "amplitude", "path"], "the zigzag pattern")?;
            MorsePattern::InvariantZigzag { critical: t.uint("morse", "critical")?.unwrap_or(1) as usize }
        }
        "perfect" => {
            t.forbid("morse", &["critical", "alpha", "amplitude", "path"], "the perfect pattern")?;
            MorsePattern::Perfect
        }
        "quasiperiodic" => {
            t.forbid("morse", &["critical", "path"], "the quasiperiodic pattern")?;
            let golden = (5f64.sqrt() - 1.0) / 2.0;
            let alpha = t.real("morse", "alpha", golden)?;
            let amplitude = t.real("morse", "amplitude", 0.3)?;
            if !(0.0..0.5).contains(&amplitude) {
                return Err(err(t.line_of("morse", "amplitude"), "morse.amplitude must lie in [0, 0.5)"));
            }
            MorsePattern::Quasiperiodic { alpha, amplitude }
        }
        "file" => {
            t.forbid("morse", &["critical", "alpha", "amplitude"], "a file pattern")?;
            MorsePattern::FromFile(t.path("morse", "path").ok_or_else(|| err(line, "morse.path is required for pattern = file"))?)
        }
        other => {
            return Err(err(line, format!("morse.pattern: expected zigzag, perfect, quasiperiodic or file, got `{other}`")))
        }
    };
    Ok(MorseConfig { pattern, options })
}

fn run_section(t: &Table) -> Result<RunConfig> {
    let folner_kmax = t.uint("run", "folner_kmax")?.unwrap_or(10);
    let folner_kmin = t.uint("run", "folner_kmin")?.unwrap_or((folner_kmax / 4).max(1));
    if folner_kmin == 0 || folner_kmin > folner_kmax {
        return Err(err(
            t.line_of("run", "folner_kmin").max(t.line_of("run", "folner_kmax")),
            format!("run.folner_kmin = {folner_kmin} must lie in 1..=run.folner_kmax = {folner_kmax}"),
        ));
    }
    let t_list = t.reals("run", "t_list")?.unwrap_or_else(|| vec![0.5, 1.0, 2.0]);
    if let Some(x) = t_list.iter().find(|x| **x < 0.0) {
        return Err(err(t.line_of("run", "t_list"), format!("run.t_list: negative value {x}")));
    }
    let tol = t.real("run", "tol", 1e-6)?;
    if tol < 0.0 {
        return Err(err(t.line_of("run", "tol"), "run.tol must be nonnegative"));
    }
    let samples = t.uint("run", "samples")?.unwrap_or(64) as usize;
    if samples < 16 {
        return Err(err(t.line_of("run", "samples"), format!("run.samples must be at least 16, got {samples}")));
    }
    Ok(RunConfig {
        s: t.positive("run", "s", 1.0)?,
        t_list,
        window_radius: t.uint("run", "window_radius")?.unwrap_or(40),
        cheb_eps: t.positive("run", "cheb_eps", 1e-8)?,
        folner_kmin,
        folner_kmax,
        ker_tol: t.positive("run", "ker_tol", 1e-8)?,
        rank_tol: t.positive("run", "rank_tol", 1e-10)?,
        seed: t.uint("run", "seed")?.unwrap_or(0),
        output: t.path("run", "output").unwrap_or_else(|| t.base_dir.join("out")),
        tol,
        samples,
        pairs: t.uint("run", "pairs")?.unwrap_or(100) as usize,
        op_radius: t.uint("run", "op_radius")?.unwrap_or(1),
        max_cells: t.uint("run", "max_cells")?.unwrap_or(2_000_000) as usize,
    })
}

/// Parses a configuration; relative paths resolve against `base_dir`.
pub fn parse_config_in(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let table = tokenize(text, base_dir.to_path_buf())?;
    let complex = complex_section(&table)?;
    let group = group_section(&table)?;
    let morse = morse_section(&table)?;
    let run = run_section(&table)?;
    let needed = match complex.base {
        BaseSpec::Circle { .. } => Some(1),
        BaseSpec::Torus { .. } => Some(2),
        BaseSpec::File(_) => None,
    };
    if let (Some(r), false) = (needed, group.is_finite()) {
        if group.coord_len() != r {
            return Err(err(table.line_of("group", "rank"), format!("this base needs group.rank = {r}")));
        }
    }
    Ok(ExperimentConfig { complex, group, morse, run })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_in(text, Path::new("."))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_config_in(&text, dir).map_err(|e| match e {
        Error::Config { line, message } => Error::Parse { path: path.display().to_string(), line, message },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[complex]\nbase = circle\np = 3\n[group]\nkind = lattice\nrank = 1\n";

    fn line_of(e: Error) -> usize {
        match e {
            Error::Config { line, .. } => line,
            other => panic!("not a config error: {other:?}"),
        }
    }

    #[test]
    fn minimal_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.run.cheb_eps, 1e-8);
        assert_eq!(c.run.ker_tol, 1e-8);
        assert_eq!(c.run.rank_tol, 1e-10);
        assert_eq!(c.run.folner_kmin, 2);
        assert_eq!(c.morse.pattern, MorsePattern::InvariantZigzag { critical: 1 });
        assert_eq!(c.complex.base, BaseSpec::Circle { p: 3 });
    }

    #[test]
    fn duplicate_reports_second_line() {
        let text = format!("{MINIMAL}[run]\ns = 1\n# note\ns = 2\n");
        assert_eq!(line_of(parse_config(&text).unwrap_err()), 10);
    }

    #[test]
    fn cross_field_rank_on_cyclic() {
        let text = "[complex]\nbase = circle\np = 3\n[group]\nkind = cyclic\norder = 4\nrank = 2\n";
        let e = parse_config(text).unwrap_err();
        assert_eq!(line_of(e), 7);
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        assert_eq!(line_of(parse_config(&format!("{MINIMAL}[run]\nwindow = 3\n")).unwrap_err()), 8);
        assert_eq!(line_of(parse_config(&format!("{MINIMAL}[run]\ns = fast\n")).unwrap_err()), 8);
        assert_eq!(line_of(parse_config(&format!("{MINIMAL}[runs]\n")).unwrap_err()), 7);
        assert_eq!(line_of(parse_config("p = 3\n").unwrap_err()), 1);
    }

    #[test]
    fn lists_and_quotes() {
        let text = format!("{MINIMAL}[run]\nt_list = [0.5, 1, 2]  # sweep\noutput = \"res\"\n[morse]\npattern = quasiperiodic\namplitude = 0.3\n");
        let c = parse_config_in(&text, Path::new("/tmp/x")).unwrap();
        assert_eq!(c.run.t_list, vec![0.5, 1.0, 2.0]);
        assert_eq!(c.run.output, PathBuf::from("/tmp/x/res"));
        assert!(matches!(c.morse.pattern, MorsePattern::Quasiperiodic { amplitude, .. } if amplitude == 0.3));
    }

    #[test]
    fn torus_requires_rank_two() {
        let text = "[complex]\nbase = torus\np = 3\nq = 3\n[group]\nkind = lattice\nrank = 1\n";
        assert_eq!(line_of(parse_config(text).unwrap_err()), 7);
    }
}
