//! Experiment configuration files.
//!
//! The format is a flat sectioned key-value text:
//!
//! ```text
//! # comment
//! [objective]
//! kind = "quadratic-isotropic"
//! dim = 10
//!
//! [schedule]
//! kind = "dynamic"
//! alpha = "closed-form"
//! ```
//!
//! Values are integers, floats (`inf` allowed), quoted strings, `true` /
//! `false`, or single-line arrays of those. Every key has an entry in
//! [`DEFAULTS`]; keys left out take the default listed there. Parsing does
//! not stop at the first problem: all errors come back together, each with
//! its line and column.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::objective::NoiseModel;
use crate::quant::{NormOrder, NormPrecision};
use crate::schedule::{AlphaSource, DynamicParams, ScheduleKind};
use crate::sim::{ObjectiveSpec, RunConfig};

/// `(section, key, default, description)`. An empty default marks a key
/// that is optional or required depending on other settings.
pub const DEFAULTS: &[(&str, &str, &str, &str)] = &[
    ("experiment", "mode", "\"run\"", "run | compare | sweep | verify"),
    ("experiment", "seeds", "\"0..1\"", "master seeds N..M (N inclusive, M exclusive)"),
    ("objective", "kind", "\"quadratic-isotropic\"", "quadratic-isotropic | quadratic-diagonal | quadratic-dense | logistic"),
    ("objective", "dim", "10", "dimension (isotropic, dense, logistic)"),
    ("objective", "lambda", "1.0", "isotropic curvature"),
    ("objective", "diagonal", "", "Hessian diagonal (quadratic-diagonal)"),
    ("objective", "hessian", "", "row-major Hessian (quadratic-dense)"),
    ("objective", "linear", "", "linear term A (zeros when absent)"),
    ("objective", "constant", "0.0", "constant term B"),
    ("objective", "samples", "2000", "logistic sample count"),
    ("objective", "ridge", "0.01", "logistic ridge weight"),
    ("objective", "label_noise", "0.5", "logistic label noise scale"),
    ("objective", "data_seed", "0", "logistic data seed"),
    ("oracle", "noise", "\"none\"", "none | gaussian | minibatch"),
    ("oracle", "sigma", "0.0", "gaussian noise: E||eps||^2 = sigma^2"),
    ("oracle", "batch", "16", "minibatch size per worker"),
    ("oracle", "calibration_draws", "1000", "draws per worker when measuring sigma"),
    ("run", "workers", "8", "W"),
    ("run", "iterations", "1000", "T"),
    ("run", "learning_rate", "0.1", "eta"),
    ("run", "x0", "", "starting point (all ones when absent)"),
    ("run", "record_iterates", "false", "keep every x_t in the trace"),
    ("quantizer", "p", "2", "norm order, a positive number or \"inf\""),
    ("quantizer", "b_pre", "32", "bits of the transmitted norm, 32 or 64"),
    ("schedule", "kind", "\"dynamic\"", "fixed | ternary | sign | dynamic"),
    ("schedule", "bits", "8", "width of the fixed schedule"),
    ("schedule", "initial_bits", "8", "b_0 of the dynamic schedule"),
    ("schedule", "epsilon", "0.01", "target optimality gap"),
    ("schedule", "gamma", "0.5", "share of epsilon left to sampling noise, in [0, 1)"),
    ("schedule", "tau", "100", "refresh period of the dynamic width"),
    ("schedule", "b_min", "2", "lower clamp"),
    ("schedule", "b_max", "32", "upper clamp"),
    ("schedule", "alpha", "\"estimated\"", "estimated | closed-form | a number in (0, 1)"),
    ("compare", "baseline_bits", "6", "fixed width compared against the dynamic schedule"),
    ("sweep", "bits", "[2, 3, 4, 5, 6, 7, 8]", "fixed widths to sweep"),
    ("sweep", "kinds", "[]", "extra schedules: ternary, sign, dynamic, fixed-N"),
    ("verify", "target", "\"lemma1\"", "lemma1 | theorem1 | theorem3 | theorem2 | schedule"),
    ("verify", "draws", "100000", "quantization draws per Monte Carlo cell"),
    ("verify", "replicates", "10000", "seeds for the perturbed-dynamics Monte Carlo check"),
    ("verify", "run_seeds", "200", "simulated runs per schedule for the theorem1 and theorem2 checks"),
    ("output", "formats", "[\"csv\", \"json\"]", "any of csv, json"),
];

/// Renders [`DEFAULTS`] as an aligned text table.
pub fn defaults_table() -> String {
    let mut out = String::new();
    let mut section = "";
    for (s, k, d, doc) in DEFAULTS {
        if *s != section {
            out.push_str(&format!("[{s}]\n"));
            section = s;
        }
        let d = if d.is_empty() { "-" } else { d };
        out.push_str(&format!("  {k:<18} {d:<24} {doc}\n"));
    }
    out
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyTarget {
    Lemma1,
    Theorem1,
    Theorem3,
    Theorem2,
    Schedule,
}

impl VerifyTarget {
    pub const ALL: [VerifyTarget; 5] =
        [VerifyTarget::Lemma1, VerifyTarget::Theorem1, VerifyTarget::Theorem3, VerifyTarget::Theorem2, VerifyTarget::Schedule];

    pub fn name(self) -> &'static str {
        match self {
            VerifyTarget::Lemma1 => "lemma1",
            VerifyTarget::Theorem1 => "theorem1",
            VerifyTarget::Theorem3 => "theorem3",
            VerifyTarget::Theorem2 => "theorem2",
            VerifyTarget::Schedule => "schedule",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Run,
    Compare,
    Sweep,
    Verify,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::Compare => "compare",
            Mode::Sweep => "sweep",
            Mode::Verify => "verify",
        }
    }
}

/// Half-open range of master seeds.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn single(seed: u64) -> Self {
        Self { start: seed, end: seed + 1 }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once("..")?;
        let start: u64 = a.trim().parse().ok()?;
        let end: u64 = b.trim().parse().ok()?;
        (end > start).then_some(Self { start, end })
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn iter(&self) -> std::ops::Range<u64> {
        self.start..self.end
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySpec {
    pub target: VerifyTarget,
    pub draws: usize,
    pub replicates: usize,
    pub run_seeds: usize,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub seeds: SeedRange,
    /// Base run; `seed` is overwritten per entry of `seeds`.
    pub run: RunConfig,
    pub baseline_bits: u8,
    pub sweep_bits: Vec<u8>,
    pub sweep_kinds: Vec<ScheduleKind>,
    pub verify: VerifySpec,
    pub formats: Vec<Format>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}:{}: {}", self.line, self.column, self.message)
        }
    }
}

/// Joins errors one per line.
pub fn render_errors(errors: &[ConfigError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

#[derive(Clone, Debug, PartialEq)]
enum Value {
    Int(i128),
    Float(f64),
    Str(String),
    Bool(bool),
    Array(Vec<Value>),
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::Bool(_) => "boolean",
            Value::Array(_) => "array",
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    value: Value,
    line: usize,
    column: usize,
}

struct Lexer<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    _src: &'a str,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line: usize) -> Self {
        Self { chars: src.chars().collect(), pos: 0, line, _src: src }
    }

    fn column(&self) -> usize {
        self.pos + 1
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError { line: self.line, column: self.column(), message: message.into() }
    }

    fn value(&mut self) -> Result<Value, ConfigError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.err("expected a value")),
            Some('"') => self.string().map(Value::Str),
            Some('[') => self.array(),
            Some(_) => self.scalar(),
        }
    }

    fn string(&mut self) -> Result<String, ConfigError> {
        let start = self.column();
        self.pos += 1;
        let mut out = String::new();
        loop {
            match self.peek() {
                None => {
                    return Err(ConfigError { line: self.line, column: start, message: "unterminated string".into() })
                }
                Some('"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some('\\') => {
                    self.pos += 1;
                    let c = match self.peek() {
                        Some('"') => '"',
                        Some('\\') => '\\',
                        Some('n') => '\n',
                        Some('t') => '\t',
                        _ => return Err(self.err("unknown escape sequence")),
                    };
                    out.push(c);
                    self.pos += 1;
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }

    fn array(&mut self) -> Result<Value, ConfigError> {
        self.pos += 1;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(']') => {
                    self.pos += 1;
                    return Ok(Value::Array(items));
                }
                None => return Err(self.err("unterminated array")),
                _ => {}
            }
            if self.peek() == Some('[') {
                return Err(self.err("nested arrays are not supported"));
            }
            items.push(self.value()?);
            self.skip_ws();
            match self.peek() {
                Some(',') => self.pos += 1,
                Some(']') => {}
                None => return Err(self.err("unterminated array")),
                Some(c) => return Err(self.err(format!("expected `,` or `]`, found `{c}`"))),
            }
        }
    }

    fn scalar(&mut self) -> Result<Value, ConfigError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == ',' || c == ']' || c.is_whitespace() {
                break;
            }
            self.pos += 1;
        }
        let token: String = self.chars[start..self.pos].iter().collect();
        let err = |m: String| ConfigError { line: self.line, column: start + 1, message: m };
        match token.as_str() {
            "true" => return Ok(Value::Bool(true)),
            "false" => return Ok(Value::Bool(false)),
            _ => {}
        }
        if let Ok(i) = token.parse::<i128>() {
            return Ok(Value::Int(i));
        }
        let lower = token.to_ascii_lowercase();
        let numeric = token.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '+' || c == '.')
            || matches!(lower.as_str(), "inf" | "+inf" | "-inf" | "infinity" | "nan");
        if numeric {
            if let Ok(f) = token.parse::<f64>() {
                if f.is_nan() {
                    return Err(err("NaN is not a valid value".into()));
                }
                return Ok(Value::Float(f));
            }
        }
        Err(err(format!("invalid value `{token}` (strings must be quoted)")))
    }

    fn expect_end(&mut self) -> Result<(), ConfigError> {
        self.skip_ws();
        match self.peek() {
            None => Ok(()),
            Some(c) => Err(self.err(format!("unexpected `{c}` after value"))),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            '\\' if in_string && !escaped => {
                escaped = true;
                continue;
            }
            '"' if !escaped => in_string = !in_string,
            '#' if !in_string => return &line[..i],
            _ => {}
        }
        escaped = false;
    }
    line
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn known(section: &str, key: &str) -> Option<&'static str> {
    DEFAULTS.iter().find(|(s, k, _, _)| *s == section && *k == key).map(|(_, _, d, _)| *d)
}

type Document = BTreeMap<(String, String), Entry>;

fn lex_document(text: &str, errors: &mut Vec<ConfigError>) -> Document {
    let mut doc = Document::new();
    let mut section: Option<String> = None;
    let mut sections_seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = line.len() - line.trim_start().len();
        let col = line[..indent].chars().count() + 1;
        if let Some(rest) = trimmed.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                errors.push(ConfigError { line: line_no, column: col, message: "unterminated section header".into() });
                section = None;
                continue;
            };
            let name = name.trim();
            if !DEFAULTS.iter().any(|(s, ..)| *s == name) {
                errors.push(ConfigError { line: line_no, column: col, message: format!("unknown section `[{name}]`") });
                section = None;
                continue;
            }
            if let Some(first) = sections_seen.insert(name.to_string(), line_no) {
                errors.push(ConfigError {
                    line: line_no,
                    column: col,
                    message: format!("duplicate section `[{name}]` (first at line {first})"),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key_part, value_part)) = line.split_once('=') else {
            errors.push(ConfigError { line: line_no, column: col, message: "expected `key = value`".into() });
            continue;
        };
        let key = key_part.trim();
        if !is_ident(key) {
            errors.push(ConfigError { line: line_no, column: col, message: format!("invalid key `{key}`") });
            continue;
        }
        let Some(sec) = section.clone() else {
            errors.push(ConfigError { line: line_no, column: col, message: format!("key `{key}` outside any known section") });
            continue;
        };
        let value_offset = key_part.chars().count() + 1;
        let mut lexer = Lexer::new(value_part, line_no);
        let parsed = lexer.value().and_then(|v| lexer.expect_end().map(|_| v));
        let value = match parsed {
            Ok(v) => v,
            Err(mut e) => {
                e.column += value_offset;
                errors.push(e);
                continue;
            }
        };
        let leading = value_part.len() - value_part.trim_start().len();
        let column = value_offset + value_part[..leading].chars().count() + 1;
        if known(&sec, key).is_none() {
            errors.push(ConfigError { line: line_no, column: col, message: format!("unknown key `{sec}.{key}`") });
            continue;
        }
        match doc.get(&(sec.clone(), key.to_string())) {
            Some(first) => errors.push(ConfigError {
                line: line_no,
                column: col,
                message: format!("duplicate key `{sec}.{key}` at line {line_no} (first defined at line {})", first.line),
            }),
            None => {
                doc.insert((sec, key.to_string()), Entry { value, line: line_no, column });
            }
        }
    }
    doc
}

struct Reader {
    doc: Document,
    errors: Vec<ConfigError>,
}

impl Reader {
    fn entry(&self, section: &str, key: &str) -> Option<Entry> {
        if let Some(e) = self.doc.get(&(section.to_string(), key.to_string())) {
            return Some(e.clone());
        }
        let default = known(section, key).expect("key listed in DEFAULTS");
        if default.is_empty() {
            return None;
        }
        let mut lexer = Lexer::new(default, 0);
        let value = lexer.value().expect("defaults parse");
        Some(Entry { value, line: 0, column: 0 })
    }

    fn present(&self, section: &str, key: &str) -> bool {
        self.doc.contains_key(&(section.to_string(), key.to_string()))
    }

    fn pos(&self, section: &str, key: &str) -> (usize, usize) {
        self.doc.get(&(section.to_string(), key.to_string())).map_or((0, 0), |e| (e.line, e.column))
    }

    fn error(&mut self, section: &str, key: &str, message: String) {
        let (line, column) = self.pos(section, key);
        let message = if line == 0 { format!("`{section}.{key}`: {message}") } else { message };
        self.errors.push(ConfigError { line, column, message });
    }

    fn mismatch(&mut self, section: &str, key: &str, expected: &str, found: &Value) {
        self.error(section, key, format!("type mismatch for `{section}.{key}`: expected {expected}, found {}", found.type_name()));
    }

    fn float(&mut self, section: &str, key: &str) -> Option<f64> {
        let e = self.entry(section, key)?;
        match e.value {
            Value::Float(f) => Some(f),
            Value::Int(i) => Some(i as f64),
            ref v => {
                self.mismatch(section, key, "number", v);
                None
            }
        }
    }

    fn int(&mut self, section: &str, key: &str, min: i128, max: i128) -> Option<i128> {
        let e = self.entry(section, key)?;
        match e.value {
            Value::Int(i) if (min..=max).contains(&i) => Some(i),
            Value::Int(i) => {
                self.error(section, key, format!("`{section}.{key}` = {i} is out of range [{min}, {max}]"));
                None
            }
            ref v => {
                self.mismatch(section, key, "integer", v);
                None
            }
        }
    }

    fn usize(&mut self, section: &str, key: &str, min: usize) -> Option<usize> {
        self.int(section, key, min as i128, u32::MAX as i128 * 16).map(|v| v as usize)
    }

    fn u64(&mut self, section: &str, key: &str) -> Option<u64> {
        self.int(section, key, 0, u64::MAX as i128).map(|v| v as u64)
    }

    fn string(&mut self, section: &str, key: &str) -> Option<String> {
        let e = self.entry(section, key)?;
        match e.value {
            Value::Str(s) => Some(s),
            ref v => {
                self.mismatch(section, key, "string", v);
                None
            }
        }
    }

    fn boolean(&mut self, section: &str, key: &str) -> Option<bool> {
        let e = self.entry(section, key)?;
        match e.value {
            Value::Bool(b) => Some(b),
            ref v => {
                self.mismatch(section, key, "boolean", v);
                None
            }
        }
    }

    fn array(&mut self, section: &str, key: &str) -> Option<Vec<Value>> {
        let e = self.entry(section, key)?;
        match e.value {
            Value::Array(items) => Some(items),
            ref v => {
                self.mismatch(section, key, "array", v);
                None
            }
        }
    }

    fn floats(&mut self, section: &str, key: &str) -> Option<Vec<f64>> {
        let items = self.array(section, key)?;
        let mut out = Vec::with_capacity(items.len());
        for v in &items {
            match v {
                Value::Float(f) => out.push(*f),
                Value::Int(i) => out.push(*i as f64),
                other => {
                    self.mismatch(section, key, "array of numbers", other);
                    return None;
                }
            }
        }
        Some(out)
    }

    fn strings(&mut self, section: &str, key: &str) -> Option<Vec<String>> {
        let items = self.array(section, key)?;
        let mut out = Vec::with_capacity(items.len());
        for v in &items {
            match v {
                Value::Str(s) => out.push(s.clone()),
                other => {
                    self.mismatch(section, key, "array of strings", other);
                    return None;
                }
            }
        }
        Some(out)
    }

    fn check(&mut self, ok: bool, section: &str, key: &str, message: impl FnOnce() -> String) {
        if !ok {
            let m = message();
            self.error(section, key, m);
        }
    }
}

fn parse_kind(s: &str, fixed_bits: u8) -> Option<ScheduleKind> {
    match s {
        "fixed" => Some(ScheduleKind::Fixed { bits: fixed_bits }),
        "ternary" => Some(ScheduleKind::Ternary),
        "sign" => Some(ScheduleKind::Sign),
        "dynamic" => Some(ScheduleKind::Dynamic),
        other => {
            let bits: u8 = other.strip_prefix("fixed-")?.parse().ok()?;
            (2..=32).contains(&bits).then_some(ScheduleKind::Fixed { bits })
        }
    }
}

/// Parses and validates a configuration, reporting every problem found.
pub fn parse_config(text: &str) -> Result<ExperimentSpec, Vec<ConfigError>> {
    let mut errors = Vec::new();
    let doc = lex_document(text, &mut errors);
    let mut r = Reader { doc, errors };

    let mode = r.string("experiment", "mode").and_then(|m| {
        let mode = match m.as_str() {
            "run" => Some(Mode::Run),
            "compare" => Some(Mode::Compare),
            "sweep" => Some(Mode::Sweep),
            "verify" => Some(Mode::Verify),
            _ => None,
        };
        if mode.is_none() {
            r.error("experiment", "mode", format!("unknown mode `{m}`; expected run, compare, sweep or verify"));
        }
        mode
    });
    let seeds = r.string("experiment", "seeds").and_then(|s| {
        let range = SeedRange::parse(&s);
        if range.is_none() {
            r.error("experiment", "seeds", format!("invalid seed range `{s}`; expected N..M with M > N"));
        }
        range
    });

    let objective = read_objective(&mut r);
    let dim = objective.as_ref().map(ObjectiveSpec::dim);

    let noise = match r.string("oracle", "noise").as_deref() {
        Some("none") => Some(NoiseModel::Exact),
        Some("gaussian") => r.float("oracle", "sigma").and_then(|sigma| {
            r.check(sigma >= 0.0 && sigma.is_finite(), "oracle", "sigma", || format!("sigma must be finite and >= 0, got {sigma}"));
            (sigma >= 0.0 && sigma.is_finite()).then_some(NoiseModel::Gaussian { sigma })
        }),
        Some("minibatch") => {
            let batch = r.usize("oracle", "batch", 1);
            if !matches!(objective, Some(ObjectiveSpec::Logistic { .. }) | None) {
                r.error("oracle", "noise", "minibatch noise needs the logistic objective".into());
            }
            batch.map(|batch| NoiseModel::Minibatch { batch })
        }
        Some(other) => {
            r.error("oracle", "noise", format!("unknown noise model `{other}`; expected none, gaussian or minibatch"));
            None
        }
        None => None,
    };
    // Always read so a type error is reported even when unused.
    if !matches!(noise, Some(NoiseModel::Gaussian { .. })) {
        let _ = r.float("oracle", "sigma");
    }
    if !matches!(noise, Some(NoiseModel::Minibatch { .. })) {
        let _ = r.usize("oracle", "batch", 1);
    }
    let calibration_draws = r.usize("oracle", "calibration_draws", 2);

    let workers = r.usize("run", "workers", 1);
    let iterations = r.usize("run", "iterations", 1);
    let learning_rate = r.float("run", "learning_rate");
    if let Some(eta) = learning_rate {
        r.check(eta > 0.0 && eta.is_finite(), "run", "learning_rate", || format!("learning rate must be positive, got {eta}"));
    }
    let x0 = if r.present("run", "x0") {
        r.floats("run", "x0").and_then(|x| match dim {
            Some(d) if x.len() != d => {
                r.error("run", "x0", format!("x0 has {} coordinates but the objective has dimension {d}", x.len()));
                None
            }
            _ => Some(x),
        })
    } else {
        dim.map(|d| vec![1.0; d])
    };
    let record_iterates = r.boolean("run", "record_iterates");

    let p = if let Some(Value::Str(s)) = r.entry("quantizer", "p").map(|e| e.value) {
        if s == "inf" {
            Some(NormOrder::INF)
        } else {
            r.error("quantizer", "p", format!("invalid norm order `{s}`; expected a positive number or \"inf\""));
            None
        }
    } else {
        r.float("quantizer", "p").and_then(|v| {
            let p = NormOrder::new(v).ok();
            if p.is_none() {
                r.error("quantizer", "p", format!("norm order must be positive, got {v}"));
            }
            p
        })
    };
    let precision = r.int("quantizer", "b_pre", 0, u32::MAX as i128).and_then(|b| {
        let p = NormPrecision::from_bits(b as u32).ok();
        if p.is_none() {
            r.error("quantizer", "b_pre", format!("b_pre must be 32 or 64, got {b}"));
        }
        p
    });

    let fixed_bits = r.int("schedule", "bits", 2, 32).map(|b| b as u8);
    let schedule = r.string("schedule", "kind").and_then(|k| {
        let kind = match k.as_str() {
            "fixed" | "ternary" | "sign" | "dynamic" => parse_kind(&k, fixed_bits.unwrap_or(8)),
            _ => None,
        };
        if kind.is_none() {
            r.error("schedule", "kind", format!("unknown schedule `{k}`; expected fixed, ternary, sign or dynamic"));
        }
        kind
    });
    let initial_bits = r.int("schedule", "initial_bits", 2, 32).map(|b| b as u8);
    let epsilon = r.float("schedule", "epsilon");
    if let Some(e) = epsilon {
        r.check(e > 0.0 && e.is_finite(), "schedule", "epsilon", || format!("epsilon must be positive, got {e}"));
    }
    let gamma = r.float("schedule", "gamma");
    if let Some(g) = gamma {
        r.check((0.0..1.0).contains(&g), "schedule", "gamma", || format!("gamma must lie in [0, 1), got {g}"));
    }
    let tau = r.usize("schedule", "tau", 1);
    let b_min = r.int("schedule", "b_min", 2, 32).map(|b| b as u8);
    let b_max = r.int("schedule", "b_max", 2, 32).map(|b| b as u8);
    if let (Some(lo), Some(hi)) = (b_min, b_max) {
        r.check(lo <= hi, "schedule", "b_max", || format!("b_max ({hi}) must be >= b_min ({lo})"));
    }
    let alpha = match r.entry("schedule", "alpha").map(|e| e.value) {
        Some(Value::Str(s)) if s == "estimated" => Some(AlphaSource::Estimated),
        Some(Value::Str(s)) if s == "closed-form" => Some(AlphaSource::ClosedForm),
        Some(Value::Str(s)) => {
            r.error("schedule", "alpha", format!("unknown alpha source `{s}`; expected estimated, closed-form or a number"));
            None
        }
        Some(_) => r.float("schedule", "alpha").and_then(|a| {
            r.check(a > 0.0 && a < 1.0, "schedule", "alpha", || format!("alpha must lie in (0, 1), got {a}"));
            (a > 0.0 && a < 1.0).then_some(AlphaSource::Given(a))
        }),
        None => None,
    };

    let baseline_bits = r.int("compare", "baseline_bits", 2, 32).map(|b| b as u8);
    let sweep_bits = r.array("sweep", "bits").and_then(|items| {
        let mut out = Vec::new();
        for v in items {
            match v {
                Value::Int(b) if (2..=32).contains(&b) => out.push(b as u8),
                Value::Int(b) => {
                    r.error("sweep", "bits", format!("sweep width {b} is outside 2..=32"));
                    return None;
                }
                other => {
                    r.mismatch("sweep", "bits", "array of integers", &other);
                    return None;
                }
            }
        }
        Some(out)
    });
    let sweep_kinds = r.strings("sweep", "kinds").and_then(|names| {
        let mut out = Vec::new();
        for n in names {
            match parse_kind(&n, fixed_bits.unwrap_or(8)) {
                Some(k) if n != "fixed" => out.push(k),
                _ => {
                    r.error("sweep", "kinds", format!("unknown schedule `{n}` in sweep kinds"));
                    return None;
                }
            }
        }
        Some(out)
    });
    let target = r.string("verify", "target").and_then(|t| {
        let v = VerifyTarget::parse(&t);
        if v.is_none() {
            r.error("verify", "target", format!("unknown verify target `{t}`"));
        }
        v
    });
    let draws = r.usize("verify", "draws", 2);
    let replicates = r.usize("verify", "replicates", 2);
    let run_seeds = r.usize("verify", "run_seeds", 2);
    let formats = r.strings("output", "formats").and_then(|fs| {
        let mut out = Vec::new();
        for f in fs {
            let fmt = match f.as_str() {
                "csv" => Format::Csv,
                "json" => Format::Json,
                _ => {
                    r.error("output", "formats", format!("unknown output format `{f}`; expected csv or json"));
                    return None;
                }
            };
            if !out.contains(&fmt) {
                out.push(fmt);
            }
        }
        Some(out)
    });

    if !r.errors.is_empty() {
        let mut errors = r.errors;
        errors.sort_by_key(|e| (e.line, e.column));
        return Err(errors);
    }
    let (Some(mode), Some(seeds), Some(objective), Some(noise), Some(calibration_draws)) =
        (mode, seeds, objective, noise, calibration_draws)
    else {
        unreachable!("missing values always record an error")
    };
    let run = RunConfig {
        objective,
        noise,
        workers: workers.unwrap(),
        iterations: iterations.unwrap(),
        learning_rate: learning_rate.unwrap(),
        x0: x0.unwrap(),
        schedule: schedule.unwrap(),
        dynamic: DynamicParams {
            epsilon: epsilon.unwrap(),
            gamma: gamma.unwrap(),
            tau: tau.unwrap(),
            b_min: b_min.unwrap(),
            b_max: b_max.unwrap(),
            initial_bits: initial_bits.unwrap(),
            alpha: alpha.unwrap(),
        },
        p: p.unwrap(),
        precision: precision.unwrap(),
        seed: seeds.start,
        calibration_draws,
        record_iterates: record_iterates.unwrap(),
    };
    Ok(ExperimentSpec {
        mode,
        seeds,
        run,
        baseline_bits: baseline_bits.unwrap(),
        sweep_bits: sweep_bits.unwrap(),
        sweep_kinds: sweep_kinds.unwrap(),
        verify: VerifySpec { target: target.unwrap(), draws: draws.unwrap(), replicates: replicates.unwrap(), run_seeds: run_seeds.unwrap() },
        formats: formats.unwrap(),
    })
}

fn read_objective(r: &mut Reader) -> Option<ObjectiveSpec> {
    let kind = r.string("objective", "kind")?;
    let constant = r.float("objective", "constant");
    let linear = if r.present("objective", "linear") { r.floats("objective", "linear").map(Some) } else { Some(None) };
    let check_linear = |r: &mut Reader, linear: &Option<Vec<f64>>, d: usize| {
        if let Some(a) = linear {
            if a.len() != d {
                r.error("objective", "linear", format!("linear term has {} entries but the dimension is {d}", a.len()));
                return false;
            }
        }
        true
    };
    match kind.as_str() {
        "quadratic-isotropic" => {
            let dim = r.usize("objective", "dim", 1);
            let lambda = r.float("objective", "lambda");
            if let Some(l) = lambda {
                r.check(l > 0.0 && l.is_finite(), "objective", "lambda", || format!("lambda must be positive, got {l}"));
            }
            let (dim, lambda, linear, constant) = (dim?, lambda?, linear?, constant?);
            check_linear(r, &linear, dim).then_some(ObjectiveSpec::QuadraticIsotropic { dim, lambda, linear, constant })
        }
        "quadratic-diagonal" => {
            if !r.present("objective", "diagonal") {
                r.error("objective", "kind", "quadratic-diagonal needs `objective.diagonal`".into());
                return None;
            }
            let diagonal = r.floats("objective", "diagonal")?;
            if diagonal.is_empty() || diagonal.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                r.error("objective", "diagonal", "diagonal entries must be positive and finite".into());
                return None;
            }
            let (linear, constant) = (linear?, constant?);
            check_linear(r, &linear, diagonal.len())
                .then_some(ObjectiveSpec::QuadraticDiagonal { diagonal, linear, constant })
        }
        "quadratic-dense" => {
            let dim = r.usize("objective", "dim", 1)?;
            if !r.present("objective", "hessian") {
                r.error("objective", "kind", "quadratic-dense needs `objective.hessian`".into());
                return None;
            }
            let hessian = r.floats("objective", "hessian")?;
            if hessian.len() != dim * dim {
                r.error("objective", "hessian", format!("hessian has {} entries, expected {}", hessian.len(), dim * dim));
                return None;
            }
            let (linear, constant) = (linear?, constant?);
            check_linear(r, &linear, dim).then_some(ObjectiveSpec::QuadraticDense { dim, hessian, linear, constant })
        }
        "logistic" => {
            let samples = r.usize("objective", "samples", 1);
            let dim = r.usize("objective", "dim", 1);
            let ridge = r.float("objective", "ridge");
            if let Some(l) = ridge {
                r.check(l > 0.0 && l.is_finite(), "objective", "ridge", || format!("ridge must be positive, got {l}"));
            }
            let label_noise = r.float("objective", "label_noise");
            if let Some(n) = label_noise {
                r.check(n >= 0.0 && n.is_finite(), "objective", "label_noise", || format!("label noise must be >= 0, got {n}"));
            }
            let data_seed = r.u64("objective", "data_seed");
            if r.present("objective", "linear") {
                r.error("objective", "linear", "the logistic objective has no linear term".into());
            }
            Some(ObjectiveSpec::Logistic { samples: samples?, dim: dim?, ridge: ridge?, label_noise: label_noise?, data_seed: data_seed? })
        }
        other => {
            r.error("objective", "kind", format!("unknown objective `{other}`"));
            None
        }
    }
}

fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

fn fmt_floats(xs: &[f64]) -> String {
    format!("[{}]", xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", "))
}

fn kind_name(kind: ScheduleKind) -> String {
    match kind {
        ScheduleKind::Fixed { bits } => format!("fixed-{bits}"),
        k => k.label(),
    }
}

/// Writes `spec` back out with every key explicit.
pub fn to_config_string(spec: &ExperimentSpec) -> String {
    let run = &spec.run;
    let mut s = String::new();
    s.push_str(&format!("[experiment]\nmode = \"{}\"\nseeds = \"{}\"\n", spec.mode.name(), spec.seeds));

    s.push_str("\n[objective]\n");
    let linear = |s: &mut String, a: &Option<Vec<f64>>| {
        if let Some(a) = a {
            s.push_str(&format!("linear = {}\n", fmt_floats(a)));
        }
    };
    match &run.objective {
        ObjectiveSpec::QuadraticIsotropic { dim, lambda, linear: a, constant } => {
            s.push_str(&format!("kind = \"quadratic-isotropic\"\ndim = {dim}\nlambda = {}\n", fmt_f64(*lambda)));
            linear(&mut s, a);
            s.push_str(&format!("constant = {}\n", fmt_f64(*constant)));
        }
        ObjectiveSpec::QuadraticDiagonal { diagonal, linear: a, constant } => {
            s.push_str(&format!("kind = \"quadratic-diagonal\"\ndiagonal = {}\n", fmt_floats(diagonal)));
            linear(&mut s, a);
            s.push_str(&format!("constant = {}\n", fmt_f64(*constant)));
        }
        ObjectiveSpec::QuadraticDense { dim, hessian, linear: a, constant } => {
            s.push_str(&format!("kind = \"quadratic-dense\"\ndim = {dim}\nhessian = {}\n", fmt_floats(hessian)));
            linear(&mut s, a);
            s.push_str(&format!("constant = {}\n", fmt_f64(*constant)));
        }
        ObjectiveSpec::Logistic { samples, dim, ridge, label_noise, data_seed } => {
            s.push_str(&format!(
                "kind = \"logistic\"\nsamples = {samples}\ndim = {dim}\nridge = {}\nlabel_noise = {}\ndata_seed = {data_seed}\n",
                fmt_f64(*ridge),
                fmt_f64(*label_noise)
            ));
        }
    }

    s.push_str("\n[oracle]\n");
    match run.noise {
        NoiseModel::Exact => s.push_str("noise = \"none\"\n"),
        NoiseModel::Gaussian { sigma } => s.push_str(&format!("noise = \"gaussian\"\nsigma = {}\n", fmt_f64(sigma))),
        NoiseModel::Minibatch { batch } => s.push_str(&format!("noise = \"minibatch\"\nbatch = {batch}\n")),
    }
    s.push_str(&format!("calibration_draws = {}\n", run.calibration_draws));

    s.push_str(&format!(
        "\n[run]\nworkers = {}\niterations = {}\nlearning_rate = {}\nx0 = {}\nrecord_iterates = {}\n",
        run.workers,
        run.iterations,
        fmt_f64(run.learning_rate),
        fmt_floats(&run.x0),
        run.record_iterates
    ));

    let p = if run.p.is_infinite() { "\"inf\"".to_string() } else { fmt_f64(run.p.value()) };
    s.push_str(&format!("\n[quantizer]\np = {p}\nb_pre = {}\n", run.precision.bits()));

    let d = &run.dynamic;
    s.push_str("\n[schedule]\n");
    match run.schedule {
        ScheduleKind::Fixed { bits } => s.push_str(&format!("kind = \"fixed\"\nbits = {bits}\n")),
        k => s.push_str(&format!("kind = \"{}\"\n", k.label())),
    }
    let alpha = match d.alpha {
        AlphaSource::Estimated => "\"estimated\"".to_string(),
        AlphaSource::ClosedForm => "\"closed-form\"".to_string(),
        AlphaSource::Given(a) => fmt_f64(a),
    };
    s.push_str(&format!(
        "initial_bits = {}\nepsilon = {}\ngamma = {}\ntau = {}\nb_min = {}\nb_max = {}\nalpha = {alpha}\n",
        d.initial_bits,
        fmt_f64(d.epsilon),
        fmt_f64(d.gamma),
        d.tau,
        d.b_min,
        d.b_max
    ));

    s.push_str(&format!("\n[compare]\nbaseline_bits = {}\n", spec.baseline_bits));
    let bits: Vec<String> = spec.sweep_bits.iter().map(|b| b.to_string()).collect();
    let kinds: Vec<String> = spec.sweep_kinds.iter().map(|k| format!("\"{}\"", kind_name(*k))).collect();
    s.push_str(&format!("\n[sweep]\nbits = [{}]\nkinds = [{}]\n", bits.join(", "), kinds.join(", ")));
    s.push_str(&format!(
        "\n[verify]\ntarget = \"{}\"\ndraws = {}\nreplicates = {}\nrun_seeds = {}\n",
        spec.verify.target.name(),
        spec.verify.draws,
        spec.verify.replicates,
        spec.verify.run_seeds
    ));
    let formats: Vec<&str> = spec.formats.iter().map(|f| if *f == Format::Csv { "\"csv\"" } else { "\"json\"" }).collect();
    s.push_str(&format!("\n[output]\nformats = [{}]\n", formats.join(", ")));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = "[objective]\nkind = \"quadratic-isotropic\"\n\n[schedule]\nkind = \"dynamic\"\n";

    #[test]
    fn minimal_config_takes_documented_defaults() {
        let spec = parse_config(MINIMAL).unwrap();
        assert_eq!(spec.run.dynamic.tau, 100);
        assert_eq!(spec.run.precision.bits(), 32);
        assert_eq!(spec.run.dynamic.initial_bits, 8);
        assert_eq!(spec.run.p, NormOrder::L2);
        assert_eq!(spec.run.schedule, ScheduleKind::Dynamic);
        assert_eq!(spec.run.dynamic.alpha, AlphaSource::Estimated);
        assert_eq!(spec.mode, Mode::Run);
        assert_eq!(spec.seeds, SeedRange { start: 0, end: 1 });
        assert_eq!(spec.run.x0, vec![1.0; 10]);
        assert_eq!(spec.baseline_bits, 6);
        assert_eq!(spec.sweep_bits, vec![2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(spec.formats, vec![Format::Csv, Format::Json]);
    }

    #[test]
    fn every_default_parses() {
        for (s, k, d, _) in DEFAULTS {
            if d.is_empty() {
                continue;
            }
            let mut lexer = Lexer::new(d, 0);
            assert!(lexer.value().is_ok() && lexer.expect_end().is_ok(), "{s}.{k} = {d}");
        }
        assert!(parse_config("").is_ok());
        assert!(defaults_table().contains("tau"));
    }

    #[test]
    fn gamma_out_of_range_is_reported_with_position() {
        let errs = parse_config("[schedule]\ngamma = 1.5\n").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!((errs[0].line, errs[0].column), (2, 9));
        assert!(errs[0].message.contains("gamma"));
    }

    #[test]
    fn duplicate_keys_name_both_lines() {
        let errs = parse_config("[run]\nworkers = 4\niterations = 9\nworkers = 5\n").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].line, 4);
        assert!(errs[0].message.contains("line 4") && errs[0].message.contains("line 2"), "{}", errs[0].message);
    }

    #[test]
    fn all_errors_are_collected() {
        let text = "[run]\nworkers = \"four\"\nbogus = 1\n[schedule]\ngamma = -0.1\ntau = 0\n[nowhere]\nx = 1\n";
        let errs = parse_config(text).unwrap_err();
        let lines: Vec<usize> = errs.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![2, 3, 5, 6, 7, 8], "{}", render_errors(&errs));
        assert!(errs[0].message.contains("type mismatch"));
        assert!(errs[1].message.contains("unknown key"));
    }

    #[test]
    fn syntax_errors() {
        for (text, line) in [
            ("[run\n", 1),
            ("[run]\nworkers\n", 2),
            ("[run]\nx0 = [1, 2\n", 2),
            ("[experiment]\nmode = \"run\n", 2),
            ("[experiment]\nmode = run\n", 2),
            ("[run]\nworkers = 4 5\n", 2),
            ("workers = 4\n", 1),
            ("[run]\nx0 = [[1]]\n", 2),
        ] {
            let errs = parse_config(text).unwrap_err();
            assert_eq!(errs[0].line, line, "{text:?}: {}", render_errors(&errs));
        }
    }

    #[test]
    fn comments_and_strings() {
        let text = "# header\n[experiment] # trailing\nmode = \"verify\" # note\n[verify]\ntarget = \"theorem3\"\n";
        let spec = parse_config(text).unwrap();
        assert_eq!(spec.mode, Mode::Verify);
        assert_eq!(spec.verify.target, VerifyTarget::Theorem3);
    }

    #[test]
    fn cross_field_constraints() {
        let errs = parse_config("[objective]\ndim = 3\n[run]\nx0 = [1, 2]\n").unwrap_err();
        assert_eq!(errs[0].line, 4);
        let errs = parse_config("[objective]\nkind = \"quadratic-diagonal\"\n").unwrap_err();
        assert!(errs[0].message.contains("diagonal"));
        let errs = parse_config("[oracle]\nnoise = \"minibatch\"\n").unwrap_err();
        assert!(errs[0].message.contains("logistic"));
        let errs = parse_config("[schedule]\nb_min = 9\nb_max = 4\n").unwrap_err();
        assert_eq!(errs[0].line, 3);
        let errs = parse_config("[quantizer]\nb_pre = 16\n").unwrap_err();
        assert!(errs[0].message.contains("32 or 64"));
    }

    #[test]
    fn typed_values() {
        let text = "[quantizer]\np = \"inf\"\nb_pre = 64\n[schedule]\nkind = \"fixed\"\nbits = 3\nalpha = 0.9\n[sweep]\nkinds = [\"ternary\", \"fixed-5\", \"dynamic\"]\n[experiment]\nseeds = \"5..55\"\n";
        let spec = parse_config(text).unwrap();
        assert_eq!(spec.run.p, NormOrder::INF);
        assert_eq!(spec.run.precision, NormPrecision::F64);
        assert_eq!(spec.run.schedule, ScheduleKind::Fixed { bits: 3 });
        assert_eq!(spec.run.dynamic.alpha, AlphaSource::Given(0.9));
        assert_eq!(spec.sweep_kinds, vec![ScheduleKind::Ternary, ScheduleKind::Fixed { bits: 5 }, ScheduleKind::Dynamic]);
        assert_eq!(spec.seeds.len(), 50);
        assert_eq!(spec.run.seed, 5);
    }

    #[test]
    fn minimal_round_trips() {
        let spec = parse_config(MINIMAL).unwrap();
        assert_eq!(parse_config(&to_config_string(&spec)).unwrap(), spec);
    }

    fn objective_strategy() -> impl Strategy<Value = ObjectiveSpec> {
        let linear = |d: usize| prop::option::of(prop::collection::vec(-10.0f64..10.0, d));
        prop_oneof![
            (1usize..6).prop_flat_map(move |d| (Just(d), 0.01f64..10.0, linear(d), -5.0f64..5.0)).prop_map(
                |(dim, lambda, linear, constant)| ObjectiveSpec::QuadraticIsotropic { dim, lambda, linear, constant }
            ),
            (1usize..6)
                .prop_flat_map(move |d| (prop::collection::vec(0.01f64..10.0, d), linear(d), -5.0f64..5.0))
                .prop_map(|(diagonal, linear, constant)| ObjectiveSpec::QuadraticDiagonal { diagonal, linear, constant }),
            (1usize..4)
                .prop_flat_map(move |d| (Just(d), prop::collection::vec(-3.0f64..3.0, d * d), linear(d), -5.0f64..5.0))
                .prop_map(|(dim, hessian, linear, constant)| ObjectiveSpec::QuadraticDense { dim, hessian, linear, constant }),
            (1usize..5000, 1usize..6, 1e-4f64..1.0, 0.0f64..2.0, any::<u64>()).prop_map(
                |(samples, dim, ridge, label_noise, data_seed)| ObjectiveSpec::Logistic { samples, dim, ridge, label_noise, data_seed }
            ),
        ]
    }

    fn kind_strategy() -> impl Strategy<Value = ScheduleKind> {
        prop_oneof![
            (2u8..=32).prop_map(|bits| ScheduleKind::Fixed { bits }),
            Just(ScheduleKind::Ternary),
            Just(ScheduleKind::Sign),
            Just(ScheduleKind::Dynamic),
        ]
    }

    fn spec_strategy() -> impl Strategy<Value = ExperimentSpec> {
        let modes = prop_oneof![Just(Mode::Run), Just(Mode::Compare), Just(Mode::Sweep), Just(Mode::Verify)];
        let alpha = prop_oneof![
            Just(AlphaSource::Estimated),
            Just(AlphaSource::ClosedForm),
            (1e-6f64..0.999999).prop_map(AlphaSource::Given)
        ];
        let p = prop_oneof![Just(NormOrder::INF), (0.5f64..8.0).prop_map(|v| NormOrder::new(v).unwrap())];
        let precision = prop_oneof![Just(NormPrecision::F32), Just(NormPrecision::F64)];
        let formats = prop_oneof![Just(vec![Format::Csv]), Just(vec![Format::Json]), Just(vec![Format::Json, Format::Csv]), Just(vec![])];
        let target = prop::sample::select(VerifyTarget::ALL.to_vec());
        (
            (modes, 0u64..1000, 1u64..100, objective_strategy()),
            (1usize..64, 1usize..100_000, 1e-4f64..2.0, kind_strategy(), any::<bool>(), 0.0f64..3.0, 1usize..9),
            (1e-6f64..10.0, 0.0f64..0.999, 1usize..1000, 2u8..=16, 0u8..=16, 2u8..=32, alpha),
            (p, precision, 2u8..=32, prop::collection::vec(2u8..=32, 0..8), prop::collection::vec(kind_strategy(), 0..4)),
            (target, 2usize..1_000_000, 2usize..100_000, formats, 2usize..10_000, 2usize..5000),
        )
            .prop_flat_map(|(head, run, sched, quant, tail)| {
                let dim = head.3.dim();
                (Just((head, run, sched, quant, tail)), prop::collection::vec(-5.0f64..5.0, dim))
            })
            .prop_map(|(((mode, start, len, objective), run, sched, quant, tail), x0)| {
                let (workers, iterations, learning_rate, schedule, record_iterates, sigma, batch) = run;
                let (epsilon, gamma, tau, b_min, span, initial_bits, alpha) = sched;
                let (p, precision, baseline_bits, sweep_bits, sweep_kinds) = quant;
                let (target, draws, replicates, formats, calibration_draws, run_seeds) = tail;
                let noise = match (&objective, batch % 3) {
                    (ObjectiveSpec::Logistic { .. }, 0) => NoiseModel::Minibatch { batch },
                    (_, 1) => NoiseModel::Exact,
                    _ => NoiseModel::Gaussian { sigma },
                };
                ExperimentSpec {
                    mode,
                    seeds: SeedRange { start, end: start + len },
                    run: RunConfig {
                        objective,
                        noise,
                        workers,
                        iterations,
                        learning_rate,
                        x0,
                        schedule,
                        dynamic: DynamicParams {
                            epsilon,
                            gamma,
                            tau,
                            b_min,
                            b_max: (b_min + span).min(32),
                            initial_bits,
                            alpha,
                        },
                        p,
                        precision,
                        seed: start,
                        calibration_draws,
                        record_iterates,
                    },
                    baseline_bits,
                    sweep_bits,
                    sweep_kinds,
                    verify: VerifySpec { target, draws, replicates, run_seeds },
                    formats,
                }
            })
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(spec in spec_strategy()) {
            let text = to_config_string(&spec);
            let parsed = parse_config(&text).map_err(|e| TestCaseError::fail(render_errors(&e)))?;
            prop_assert_eq!(&parsed, &spec);
            prop_assert_eq!(to_config_string(&parsed), text);
        }

        #[test]
        fn parser_never_panics(text in "[\\[\\]a-z_=\" 0-9.,#\\n-]{0,200}") {
            let _ = parse_config(&text);
        }
    }
}
