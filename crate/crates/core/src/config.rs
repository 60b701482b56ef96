//! INI-style run configuration. Unknown sections and keys are errors.
//!
//! ```text
//! # comment
//! [profile]             crossing syscall fs bio driver device sfunc_exec (ns)
//! [device]              parallelism max_iops queue_bound cores
//! [bench]               depth workers batch (comma lists), mode (names),
//!                       io (sync|uring), duration_ms seed hop_limit
//!                       invalidation_interval_ms (0 disables)
//! [file.NAME]           image = PATH, repeated extent = file_off,pba,len
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::blockdev::DeviceConfig;
use crate::iostack::{DispatchMode, LatencyProfile};
use crate::sfunc::ChainBudget;
use crate::xcache::Extent;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("{0}")]
    Conflict(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileSpec {
    pub name: String,
    pub image: Option<PathBuf>,
    pub extents: Vec<Extent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchSpec {
    pub depths: Vec<u32>,
    pub workers: Vec<usize>,
    /// Empty for synchronous reads.
    pub batches: Vec<usize>,
    pub modes: Vec<DispatchMode>,
    pub duration_ms: u64,
    pub seed: Option<u64>,
    pub hop_limit: u32,
    pub invalidation_interval_ms: Option<u64>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            depths: vec![3],
            workers: vec![1],
            batches: Vec::new(),
            modes: DispatchMode::ALL.to_vec(),
            duration_ms: 10,
            seed: None,
            hop_limit: ChainBudget::DEFAULT_HOP_LIMIT,
            invalidation_interval_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: LatencyProfile,
    pub device: DeviceConfig,
    pub cores: usize,
    pub bench: BenchSpec,
    /// Keys of `[bench]` that were set explicitly.
    pub bench_keys: HashSet<String>,
    pub files: Vec<FileSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: LatencyProfile::default(),
            device: DeviceConfig::default(),
            cores: crate::iostack::CpuModel::DEFAULT_CORES,
            bench: BenchSpec::default(),
            bench_keys: HashSet::new(),
            files: Vec::new(),
        }
    }
}

fn value_err(line: usize, key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        line,
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn int<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim()
        .parse()
        .map_err(|_| value_err(line, key, format!("`{v}` is not a non-negative integer")))
}

fn list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    let out: Vec<T> = v.split(',').map(|x| int(line, key, x)).collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(value_err(line, key, "empty list"));
    }
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        self.apply(&text, base)
    }

    /// Applies `text` on top of the current values. Relative image paths
    /// resolve against `base`.
    pub fn apply(&mut self, text: &str, base: &Path) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        let mut seen: HashSet<(String, String)> = HashSet::new();
        let mut io_mode: Option<(usize, String)> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.split('#').next().unwrap().trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax {
                        line,
                        msg: "unterminated section header".into(),
                    })?
                    .trim()
                    .to_string();
                match name.as_str() {
                    "profile" | "device" | "bench" => {}
                    n if n.strip_prefix("file.").is_some_and(|f| !f.is_empty()) => {
                        let fname = &n[5..];
                        if self.files.iter().any(|f| f.name == fname) {
                            return Err(ConfigError::Conflict(format!("file `{fname}` declared twice")));
                        }
                        self.files.push(FileSpec {
                            name: fname.to_string(),
                            image: None,
                            extents: Vec::new(),
                        });
                    }
                    _ => return Err(ConfigError::UnknownSection { line, name }),
                }
                section = Some(name);
                continue;
            }
            let (key, val) = s.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: "expected `key = value`".into(),
            })?;
            let (key, val) = (key.trim(), val.trim());
            let sec = section.clone().ok_or_else(|| ConfigError::Syntax {
                line,
                msg: "key outside of a section".into(),
            })?;
            let repeatable = sec.starts_with("file.") && key == "extent";
            if !repeatable && !seen.insert((sec.clone(), key.to_string())) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            let unknown = || ConfigError::UnknownKey {
                line,
                section: sec.clone(),
                key: key.to_string(),
            };
            match sec.as_str() {
                "profile" => {
                    let p = &mut self.profile;
                    let slot = match key {
                        "crossing" => &mut p.crossing_ns,
                        "syscall" => &mut p.syscall_ns,
                        "fs" => &mut p.fs_ns,
                        "bio" => &mut p.bio_ns,
                        "driver" => &mut p.driver_ns,
                        "device" => &mut p.device_ns,
                        "sfunc_exec" => &mut p.sfunc_exec_ns,
                        _ => return Err(unknown()),
                    };
                    *slot = int(line, key, val)?;
                }
                "device" => match key {
                    "parallelism" => self.device.parallelism = int(line, key, val)?,
                    "max_iops" => self.device.max_iops = int(line, key, val)?,
                    "queue_bound" => self.device.queue_bound = int(line, key, val)?,
                    "cores" => self.cores = int(line, key, val)?,
                    _ => return Err(unknown()),
                },
                "bench" => {
                    let b = &mut self.bench;
                    match key {
                        "depth" => b.depths = list(line, key, val)?,
                        "workers" => b.workers = list(line, key, val)?,
                        "batch" => b.batches = list(line, key, val)?,
                        "mode" => {
                            b.modes = val
                                .split(',')
                                .map(|m| {
                                    DispatchMode::from_name(m.trim()).ok_or_else(|| {
                                        value_err(line, key, format!("unknown mode `{}`", m.trim()))
                                    })
                                })
                                .collect::<Result<_, _>>()?
                        }
                        "io" => io_mode = Some((line, val.to_string())),
                        "duration_ms" => b.duration_ms = int(line, key, val)?,
                        "seed" => b.seed = Some(int(line, key, val)?),
                        "hop_limit" => b.hop_limit = int(line, key, val)?,
                        "invalidation_interval_ms" => {
                            let v: u64 = int(line, key, val)?;
                            b.invalidation_interval_ms = (v > 0).then_some(v);
                        }
                        _ => return Err(unknown()),
                    }
                    self.bench_keys.insert(key.to_string());
                }
                _ => {
                    let f = self.files.last_mut().expect("file section pushed");
                    match key {
                        "image" => f.image = Some(base.join(val)),
                        "extent" => {
                            let parts: Vec<u64> = list(line, key, val)?;
                            let [file_off, pba, len] = parts[..] else {
                                return Err(value_err(line, key, "expected file_off,pba,len"));
                            };
                            f.extents.push(Extent { file_off, pba, len });
                        }
                        _ => return Err(unknown()),
                    }
                }
            }
        }
        if let Some((line, io)) = io_mode {
            match io.as_str() {
                "sync" if !self.bench.batches.is_empty() => {
                    return Err(ConfigError::Conflict(
                        "`batch` is set but `io = sync`; batching needs `io = uring`".into(),
                    ))
                }
                "sync" => {}
                "uring" if self.bench.batches.is_empty() => self.bench.batches = vec![1],
                "uring" => {}
                other => return Err(value_err(line, "io", format!("`{other}` is not sync or uring"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig::default();
        c.apply(text, Path::new("/cfg"))?;
        Ok(c)
    }

    #[test]
    fn full_file() {
        let c = parse(
            "# sweep\n[profile]\ncrossing = 400\nsfunc_exec=50\n\n[device]\nmax_iops = 1000000\ncores = 4\n\
             [bench]\ndepth = 1, 3,6\nworkers = 1,12\nmode = baseline,driver\nduration_ms = 5\nseed = 9\n\
             [file.t]\nimage = t.btx\nextent = 0,8,1024\nextent = 1024,100,512\n",
        )
        .unwrap();
        assert_eq!(c.profile.crossing_ns, 400);
        assert_eq!(c.profile.sfunc_exec_ns, 50);
        assert_eq!(c.profile.fs_ns, 2006);
        assert_eq!((c.device.max_iops, c.cores), (1_000_000, 4));
        assert_eq!(c.bench.depths, vec![1, 3, 6]);
        assert_eq!(c.bench.modes, vec![DispatchMode::Baseline, DispatchMode::DriverHook]);
        assert_eq!(c.bench.seed, Some(9));
        assert_eq!(c.files[0].image, Some(PathBuf::from("/cfg/t.btx")));
        assert_eq!(c.files[0].extents.len(), 2);
    }

    #[test]
    fn unknown_key_names_it() {
        let e = parse("[bench]\ndepht = 3\n").unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                line: 2,
                section: "bench".into(),
                key: "depht".into()
            }
        );
        assert!(e.to_string().contains("depht"));
    }

    #[test]
    fn rejections() {
        assert!(matches!(parse("[nope]\n"), Err(ConfigError::UnknownSection { .. })));
        assert!(matches!(parse("x = 1\n"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(parse("[profile]\nfs = -3\n"), Err(ConfigError::Value { .. })));
        assert!(matches!(parse("[profile]\nfs = 1\nfs = 2\n"), Err(ConfigError::Duplicate { .. })));
        assert!(matches!(parse("[bench]\nmode = fast\n"), Err(ConfigError::Value { .. })));
        assert!(matches!(parse("[bench]\nio = sync\nbatch = 8\n"), Err(ConfigError::Conflict(_))));
        assert!(matches!(parse("[file.a]\nextent = 1,2\n"), Err(ConfigError::Value { .. })));
        assert!(matches!(parse("[file.a]\n[file.a]\n"), Err(ConfigError::Conflict(_))));
        assert!(matches!(parse("[profile\n"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn uring_defaults_to_batch_one() {
        let c = parse("[bench]\nio = uring\n").unwrap();
        assert_eq!(c.bench.batches, vec![1]);
        let c = parse("[bench]\nbatch = 1,8\n").unwrap();
        assert_eq!(c.bench.batches, vec![1, 8]);
    }

    #[test]
    fn zero_interval_disables_invalidation() {
        let c = parse("[bench]\ninvalidation_interval_ms = 0\n").unwrap();
        assert_eq!(c.bench.invalidation_interval_ms, None);
    }
}
