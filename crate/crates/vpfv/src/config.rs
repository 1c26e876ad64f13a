//! Run configuration: a sectioned `key = value` text file.
//!
//! ```text
//! [problem]
//! tag = two-stream          # two-stream | dgh | lhdi | landau
//! vt2 = 0.1                 # problem parameters, defaults when absent
//! quadrature = 8            # Gauss points per dimension for initialization
//!
//! [domain]
//! d = 1
//! v = 1
//! n = 64                    # physical cells per dimension (comma list)
//! n_v = 64                  # velocity cells per dimension (comma list)
//! v_max = 8                 # symmetric velocity box; LHDI uses u ± α v_T
//!
//! [species.electron]        # optional per-species overrides
//! n_v = 128
//! v_lo = -10
//! v_hi = 10
//!
//! [time]
//! t_end = 20
//! dt = 0.01                 # or cfl_fraction = 0.9
//!
//! [partition]
//! counts = 1,1              # per dimension, all species
//! ranks = 1
//! species_per_rank = 1
//! deterministic = true
//!
//! [output]
//! directory = out
//! cadence = 10
//! snapshot = false
//! ```
//!
//! Arrays are comma lists. Floats are written in shortest round-trip form,
//! so parse → serialize → parse is exact.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::str::FromStr;

use ini::Ini;
use thiserror::Error;

use crate::fvm::SpeciesConfig;
use crate::grid::{DistField, GridError, PhaseSpaceGrid};
use crate::problems::{
    init_dgh, init_landau, init_lhdi, init_two_stream, DghParams, LandauParams, LhdiParams, ProblemError, ProblemSpec, QuadratureOrder, TwoStreamParams,
};
use crate::sim::TimestepControl;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("empty configuration")]
    Empty,
    #[error("syntax: {0}")]
    Syntax(String),
    #[error("line {line}: [{section}] {key}: {message}")]
    Field { line: usize, section: String, key: String, message: String },
    #[error("missing [{section}] {key}")]
    Missing { section: String, key: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSection {
    pub d: usize,
    pub v: usize,
    pub n: Vec<usize>,
    pub n_v: Vec<usize>,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeciesSection {
    pub name: String,
    pub charge: Option<f64>,
    pub mass: Option<f64>,
    pub n_v: Option<Vec<usize>>,
    pub v_lo: Option<Vec<f64>>,
    pub v_hi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSection {
    pub t_end: f64,
    pub control: TimestepControl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSection {
    pub counts: Vec<usize>,
    pub ranks: usize,
    pub species_per_rank: usize,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub directory: String,
    pub cadence: usize,
    pub snapshot: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub quadrature: QuadratureOrder,
    pub domain: DomainSection,
    pub species: Vec<SpeciesSection>,
    pub time: TimeSection,
    pub partition: PartitionSection,
    pub output: OutputSection,
}

/// Everything needed to start a run.
pub struct Setup {
    pub species: Vec<SpeciesConfig>,
    pub grids: Vec<PhaseSpaceGrid>,
    pub fields: Vec<DistField>,
}

/// Line (1-based) of `key` inside `[section]`, for error messages.
fn locate(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(s) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = s.trim().to_string();
        } else if current == section && t.split('=').next().map(str::trim) == Some(key) {
            return i + 1;
        }
    }
    0
}

struct Reader<'a> {
    text: &'a str,
    ini: &'a Ini,
}

impl Reader<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.section(Some(section)).and_then(|p| p.get(key)).map(|v| v.split('#').next().unwrap_or("").trim())
    }

    fn err(&self, section: &str, key: &str, message: String) -> ConfigError {
        ConfigError::Field { line: locate(self.text, section, key), section: section.into(), key: key.into(), message }
    }

    fn opt<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|e: T::Err| self.err(section, key, format!("`{s}`: {e}"))),
        }
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(section, key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(s) => s.split(',').map(|x| x.trim().parse().map_err(|e: T::Err| self.err(section, key, format!("`{x}`: {e}")))).collect::<Result<Vec<T>, _>>().map(Some),
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.lines().all(|l| l.trim().is_empty() || l.trim_start().starts_with('#') || l.trim_start().starts_with(';')) {
            return Err(ConfigError::Empty);
        }
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let r = Reader { text, ini: &ini };
        let tag: String = r.opt("problem", "tag")?.ok_or(ConfigError::Missing { section: "problem".into(), key: "tag".into() })?;
        let p = "problem";
        let problem = match tag.as_str() {
            "two-stream" => {
                let d = TwoStreamParams::default();
                ProblemSpec::TwoStream(TwoStreamParams { vt2: r.get(p, "vt2", d.vt2)?, u: r.get(p, "u", d.u)?, delta: r.get(p, "delta", d.delta)?, k: r.get(p, "k", d.k)? })
            }
            "dgh" => {
                let d = DghParams::default();
                let mut q = DghParams { ell: r.get(p, "ell", d.ell)?, alpha_perp: r.get(p, "alpha_perp", d.alpha_perp)?, delta: r.get(p, "delta", d.delta)?, k: d.k, cyclotron_ratio: r.get(p, "cyclotron_ratio", d.cyclotron_ratio)? };
                q.k = match (r.opt::<f64>(p, "k")?, r.opt::<f64>(p, "k_bar")?) {
                    (Some(k), _) => k,
                    (None, Some(kb)) => q.k_from_normalized(kb),
                    (None, None) => q.k_from_normalized(3.2),
                };
                ProblemSpec::Dgh(q)
            }
            "lhdi" => {
                let m_r: f64 = r.get(p, "mass_ratio", 25.0)?;
                let d = LhdiParams::for_mass_ratio(m_r);
                ProblemSpec::Lhdi(LhdiParams {
                    mass_ratio: m_r,
                    temp_ratio: r.get(p, "temp_ratio", d.temp_ratio)?,
                    beta: r.get(p, "beta", d.beta)?,
                    drift_ratio: r.get(p, "drift_ratio", d.drift_ratio)?,
                    cyclotron_ratio: r.get(p, "cyclotron_ratio", d.cyclotron_ratio)?,
                    delta_e: r.get(p, "delta_e", d.delta_e)?,
                    delta_i: r.get(p, "delta_i", d.delta_i)?,
                    k: r.opt(p, "k")?.ok_or(ConfigError::Missing { section: p.into(), key: "k".into() })?,
                })
            }
            "landau" => {
                let d = LandauParams::default();
                ProblemSpec::Landau(LandauParams { alpha: r.get(p, "alpha", d.alpha)?, kx: r.get(p, "kx", d.kx)?, ky: r.get(p, "ky", d.ky)? })
            }
            other => return Err(r.err(p, "tag", format!("unknown problem `{other}`"))),
        };
        let quadrature = match r.get(p, "quadrature", 8usize)? {
            4 => QuadratureOrder::Four,
            8 => QuadratureOrder::Eight,
            16 => QuadratureOrder::Sixteen,
            q => return Err(r.err(p, "quadrature", format!("{q} points not supported (4, 8, 16)"))),
        };
        let (d_default, v_default) = match problem {
            ProblemSpec::TwoStream(_) => (1, 1),
            ProblemSpec::Dgh(_) | ProblemSpec::Lhdi(_) => (1, 2),
            ProblemSpec::Landau(_) => (2, 2),
        };
        let dm = "domain";
        let d: usize = r.get(dm, "d", d_default)?;
        let v: usize = r.get(dm, "v", if d == 1 && matches!(problem, ProblemSpec::Landau(_)) { 1 } else { v_default })?;
        let n = r.list(dm, "n")?.ok_or(ConfigError::Missing { section: dm.into(), key: "n".into() })?;
        let n = broadcast(n, d).map_err(|m| r.err(dm, "n", m))?;
        let n_v = broadcast(r.list(dm, "n_v")?.unwrap_or_else(|| vec![n[0]]), v).map_err(|m| r.err(dm, "n_v", m))?;
        let domain = DomainSection { d, v, n, n_v, v_max: r.get(dm, "v_max", 8.0)? };

        let mut species = Vec::new();
        for (name, _) in ini.iter() {
            if let Some(sp) = name.and_then(|s| s.strip_prefix("species.")) {
                let sec = format!("species.{sp}");
                species.push(SpeciesSection {
                    name: sp.to_string(),
                    charge: r.opt(&sec, "charge")?,
                    mass: r.opt(&sec, "mass")?,
                    n_v: r.list(&sec, "n_v")?,
                    v_lo: r.list(&sec, "v_lo")?,
                    v_hi: r.list(&sec, "v_hi")?,
                });
            }
        }

        let t = "time";
        let t_end = r.opt(t, "t_end")?.ok_or(ConfigError::Missing { section: t.into(), key: "t_end".into() })?;
        let control = match (r.opt::<f64>(t, "dt")?, r.opt::<f64>(t, "cfl_fraction")?) {
            (Some(_), Some(_)) => return Err(r.err(t, "dt", "give either dt or cfl_fraction".into())),
            (Some(dt), None) => TimestepControl::Fixed(dt),
            (None, frac) => TimestepControl::Cfl(frac.unwrap_or(0.9)),
        };
        let pt = "partition";
        let counts = r.list(pt, "counts")?.unwrap_or_else(|| vec![1; d + v]);
        if counts.len() != d + v {
            return Err(r.err(pt, "counts", format!("expected {} entries", d + v)));
        }
        let partition = PartitionSection { counts, ranks: r.get(pt, "ranks", 0)?, species_per_rank: r.get(pt, "species_per_rank", 1)?, deterministic: r.get(pt, "deterministic", true)? };
        let o = "output";
        let output = OutputSection { directory: r.get(o, "directory", "out".to_string())?, cadence: r.get(o, "cadence", 10usize)?.max(1), snapshot: r.get(o, "snapshot", false)? };
        let mut cfg = Self { problem, quadrature, domain, species, time: TimeSection { t_end, control }, partition, output };
        if cfg.partition.ranks == 0 {
            cfg.partition.ranks = cfg.default_ranks();
        }
        Ok(cfg)
    }

    fn default_ranks(&self) -> usize {
        let per: usize = self.partition.counts.iter().product();
        self.species_count() * per / self.partition.species_per_rank.max(1)
    }

    pub fn species_count(&self) -> usize {
        match self.problem {
            ProblemSpec::Lhdi(_) => 2,
            _ => 1,
        }
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let f = |x: f64| format!("{x:?}");
        let _ = writeln!(s, "[problem]\ntag = {}", self.problem.tag());
        match self.problem {
            ProblemSpec::TwoStream(p) => {
                let _ = writeln!(s, "vt2 = {}\nu = {}\ndelta = {}\nk = {}", f(p.vt2), f(p.u), f(p.delta), f(p.k));
            }
            ProblemSpec::Dgh(p) => {
                let _ = writeln!(s, "ell = {}\nalpha_perp = {}\ndelta = {}\nk = {}\ncyclotron_ratio = {}", p.ell, f(p.alpha_perp), f(p.delta), f(p.k), f(p.cyclotron_ratio));
            }
            ProblemSpec::Lhdi(p) => {
                let _ = writeln!(
                    s,
                    "mass_ratio = {}\ntemp_ratio = {}\nbeta = {}\ndrift_ratio = {}\ncyclotron_ratio = {}\ndelta_e = {}\ndelta_i = {}\nk = {}",
                    f(p.mass_ratio),
                    f(p.temp_ratio),
                    f(p.beta),
                    f(p.drift_ratio),
                    f(p.cyclotron_ratio),
                    f(p.delta_e),
                    f(p.delta_i),
                    f(p.k)
                );
            }
            ProblemSpec::Landau(p) => {
                let _ = writeln!(s, "alpha = {}\nkx = {}\nky = {}", f(p.alpha), f(p.kx), f(p.ky));
            }
        }
        let _ = writeln!(s, "quadrature = {}\n", self.quadrature.points());
        let dm = &self.domain;
        let _ = writeln!(s, "[domain]\nd = {}\nv = {}\nn = {}\nn_v = {}\nv_max = {}\n", dm.d, dm.v, join(&dm.n), join(&dm.n_v), f(dm.v_max));
        for sp in &self.species {
            let _ = writeln!(s, "[species.{}]", sp.name);
            if let Some(q) = sp.charge {
                let _ = writeln!(s, "charge = {}", f(q));
            }
            if let Some(m) = sp.mass {
                let _ = writeln!(s, "mass = {}", f(m));
            }
            if let Some(n) = &sp.n_v {
                let _ = writeln!(s, "n_v = {}", join(n));
            }
            for (key, val) in [("v_lo", &sp.v_lo), ("v_hi", &sp.v_hi)] {
                if let Some(xs) = val {
                    let _ = writeln!(s, "{key} = {}", xs.iter().map(|&x| f(x)).collect::<Vec<_>>().join(","));
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "[time]\nt_end = {}", f(self.time.t_end));
        match self.time.control {
            TimestepControl::Fixed(dt) => {
                let _ = writeln!(s, "dt = {}\n", f(dt));
            }
            TimestepControl::Cfl(c) => {
                let _ = writeln!(s, "cfl_fraction = {}\n", f(c));
            }
        }
        let pt = &self.partition;
        let _ = writeln!(s, "[partition]\ncounts = {}\nranks = {}\nspecies_per_rank = {}\ndeterministic = {}\n", join(&pt.counts), pt.ranks, pt.species_per_rank, pt.deterministic);
        let o = &self.output;
        let _ = writeln!(s, "[output]\ndirectory = {}\ncadence = {}\nsnapshot = {}", o.directory, o.cadence, o.snapshot);
        s
    }

    /// Copy with every cell count multiplied by `factor` (for convergence studies).
    pub fn refined(&self, factor: usize) -> Self {
        let mut c = self.clone();
        c.domain.n.iter_mut().for_each(|n| *n *= factor);
        c.domain.n_v.iter_mut().for_each(|n| *n *= factor);
        for sp in &mut c.species {
            if let Some(n) = &mut sp.n_v {
                n.iter_mut().for_each(|n| *n *= factor);
            }
        }
        c
    }

    fn length(&self) -> Vec<f64> {
        match self.problem {
            ProblemSpec::TwoStream(p) => vec![p.length()],
            ProblemSpec::Dgh(p) => vec![p.length()],
            ProblemSpec::Lhdi(p) => vec![p.length()],
            ProblemSpec::Landau(p) => {
                if self.domain.d == 1 {
                    vec![TAU / p.kx]
                } else {
                    vec![TAU / p.kx, TAU / p.ky]
                }
            }
        }
    }

    /// Species, grids and initial fields.
    pub fn setup(&self) -> Result<Setup, ConfigError> {
        let dm = &self.domain;
        let lengths = self.length();
        let expected = match self.problem {
            ProblemSpec::TwoStream(_) => vec![(1, 1)],
            ProblemSpec::Dgh(_) | ProblemSpec::Lhdi(_) => vec![(1, 2)],
            ProblemSpec::Landau(_) => vec![(1, 1), (2, 2)],
        };
        if !expected.contains(&(dm.d, dm.v)) {
            return Err(ProblemError::Dimensionality { problem: self.problem.tag(), expected: "see problem", d: dm.d, v: dm.v }.into());
        }
        let closure = match self.problem {
            ProblemSpec::Lhdi(p) => Some(p.closure()?),
            _ => None,
        };
        let mut species: Vec<SpeciesConfig> = match (&self.problem, &closure) {
            (ProblemSpec::Lhdi(_), Some(c)) => c.species.to_vec(),
            (ProblemSpec::Dgh(p), _) => vec![p.species()],
            _ => vec![SpeciesConfig::electron("electron")],
        };
        let mut grids = Vec::new();
        for (s, sp) in species.iter_mut().enumerate() {
            let over = self.species.iter().find(|o| o.name == sp.name);
            if let Some(o) = over {
                sp.charge = o.charge.unwrap_or(sp.charge);
                sp.mass = o.mass.unwrap_or(sp.mass);
            }
            let n_v = over.and_then(|o| o.n_v.clone()).unwrap_or_else(|| dm.n_v.clone());
            let (mut v_lo, mut v_hi): (Vec<f64>, Vec<f64>) = match &closure {
                Some(c) => {
                    let w = c.alpha[s] * c.thermal_speed[s];
                    (vec![c.drift[s] - w, -w], vec![c.drift[s] + w, w])
                }
                None => (vec![-dm.v_max; dm.v], vec![dm.v_max; dm.v]),
            };
            if let Some(o) = over {
                v_lo = o.v_lo.clone().unwrap_or(v_lo);
                v_hi = o.v_hi.clone().unwrap_or(v_hi);
            }
            let mut n = dm.n.clone();
            n.extend(broadcast(n_v, dm.v).map_err(ConfigError::Syntax)?);
            let mut lo = vec![0.0; dm.d];
            lo.extend(v_lo);
            let mut hi = lengths.clone();
            hi.extend(v_hi);
            grids.push(PhaseSpaceGrid::new(dm.d, dm.v, &n, &lo, &hi)?);
        }
        let fields = grids
            .iter()
            .enumerate()
            .map(|(s, g)| {
                let mut f = match (&self.problem, &closure) {
                    (ProblemSpec::TwoStream(p), _) => init_two_stream(g, p, self.quadrature),
                    (ProblemSpec::Dgh(p), _) => init_dgh(g, p, self.quadrature),
                    (ProblemSpec::Lhdi(_), Some(c)) => init_lhdi(g, c, s, self.quadrature),
                    (ProblemSpec::Landau(p), _) => init_landau(g, p, self.quadrature),
                    _ => unreachable!("closure exists for LHDI"),
                }?;
                f.species = species[s].name.clone();
                Ok(f)
            })
            .collect::<Result<Vec<_>, ProblemError>>()?;
        Ok(Setup { species, grids, fields })
    }
}

fn broadcast(xs: Vec<usize>, len: usize) -> Result<Vec<usize>, String> {
    match xs.len() {
        1 => Ok(vec![xs[0]; len]),
        l if l == len => Ok(xs),
        l => Err(format!("expected 1 or {len} entries, got {l}")),
    }
}
