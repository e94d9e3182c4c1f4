//! Flat key-value experiment configuration.
//!
//! The format is line oriented: `key = value [value …]`, `#` starts a
//! comment, blank lines are ignored. Grid axes take space-separated lists;
//! the experiment runs every combination.
//!
//! ```text
//! # grid axes
//! t = 10 30
//! sigma_eta = 1 4
//! delta = 0.5 0.9
//! rho = 0.3 0.8
//! error_model = conditional-hetero
//!
//! # scalars
//! n = 200
//! replications = 2000
//! master_seed = 42
//!
//! estimators = fd-2 fod-2
//! scheme = recent-lags
//! out = results
//! ```

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::estimators::EstimatorSpec;
use crate::instruments::InstrumentScheme;
use crate::simulation::{DesignPoint, ErrorModel};

/// A parsed experiment grid.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub alpha: f64,
    pub t: Vec<usize>,
    pub delta: Vec<f64>,
    pub rho: Vec<f64>,
    pub sigma_eta: Vec<f64>,
    pub error_model: Vec<ErrorModel>,
    pub replications: usize,
    pub master_seed: u64,
    pub estimators: Vec<EstimatorSpec>,
    pub scheme: InstrumentScheme,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut seen: Vec<(String, usize, Vec<String>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            let values: Vec<String> = value.split_whitespace().map(str::to_string).collect();
            if values.is_empty() {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("key `{key}` has no value"),
                });
            }
            if seen.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
            seen.push((key, line_no, values));
        }

        let take = |key: &str| seen.iter().find(|(k, _, _)| k == key).cloned();
        let known = [
            "n",
            "alpha",
            "t",
            "delta",
            "rho",
            "sigma_eta",
            "error_model",
            "replications",
            "master_seed",
            "estimators",
            "scheme",
            "threads",
            "out",
        ];
        for (key, line, _) in &seen {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config {
                    line: *line,
                    message: format!("unknown key `{key}`"),
                });
            }
        }

        fn parse_one<T: std::str::FromStr>(
            key: &str,
            line: usize,
            value: &str,
        ) -> Result<T> {
            value.parse().map_err(|_| Error::Config {
                line,
                message: format!("key `{key}`: cannot parse `{value}`"),
            })
        }

        fn required(
            entry: Option<(String, usize, Vec<String>)>,
            key: &str,
        ) -> Result<(usize, Vec<String>)> {
            match entry {
                Some((_, line, values)) => Ok((line, values)),
                None => Err(Error::Config {
                    line: 0,
                    message: format!("missing required key `{key}`"),
                }),
            }
        }

        fn scalar(entry: Option<(String, usize, Vec<String>)>, key: &str) -> Result<(usize, String)> {
            let (line, values) = required(entry, key)?;
            if values.len() != 1 {
                return Err(Error::Config {
                    line,
                    message: format!("key `{key}` takes exactly one value"),
                });
            }
            Ok((line, values.into_iter().next().unwrap()))
        }

        fn list<T, F: Fn(usize, &str) -> Result<T>>(
            entry: Option<(String, usize, Vec<String>)>,
            key: &str,
            parse: F,
        ) -> Result<Vec<T>> {
            let (line, values) = required(entry, key)?;
            values.iter().map(|v| parse(line, v)).collect()
        }

        let t = list(take("t"), "t", |l, v| parse_one::<usize>("t", l, v))?;
        let delta = list(take("delta"), "delta", |l, v| parse_one::<f64>("delta", l, v))?;
        let rho = list(take("rho"), "rho", |l, v| parse_one::<f64>("rho", l, v))?;
        let sigma_eta = list(take("sigma_eta"), "sigma_eta", |l, v| {
            parse_one::<f64>("sigma_eta", l, v)
        })?;
        let error_model = list(take("error_model"), "error_model", |l, v| {
            ErrorModel::from_name(v).map_err(|e| Error::Config {
                line: l,
                message: e.to_string(),
            })
        })?;
        let estimators = list(take("estimators"), "estimators", |l, v| {
            EstimatorSpec::parse(v).map_err(|e| Error::Config {
                line: l,
                message: e.to_string(),
            })
        })?;

        let (line, v) = scalar(take("replications"), "replications")?;
        let replications = parse_one::<usize>("replications", line, &v)?;
        let (line, v) = scalar(take("master_seed"), "master_seed")?;
        let master_seed = parse_one::<u64>("master_seed", line, &v)?;
        let (line, v) = scalar(take("scheme"), "scheme")?;
        let scheme = InstrumentScheme::from_name(&v).map_err(|e| Error::Config {
            line,
            message: e.to_string(),
        })?;

        let n = match take("n") {
            Some(e) => {
                let (line, v) = scalar(Some(e), "n")?;
                parse_one::<usize>("n", line, &v)?
            }
            None => 200,
        };
        let alpha = match take("alpha") {
            Some(e) => {
                let (line, v) = scalar(Some(e), "alpha")?;
                parse_one::<f64>("alpha", line, &v)?
            }
            None => 0.5,
        };
        let threads = match take("threads") {
            Some(e) => {
                let (line, v) = scalar(Some(e), "threads")?;
                Some(parse_one::<usize>("threads", line, &v)?)
            }
            None => None,
        };
        let out_dir = match take("out") {
            Some(e) => PathBuf::from(scalar(Some(e), "out")?.1),
            None => PathBuf::from("."),
        };

        if replications == 0 {
            return Err(Error::Config {
                line: 0,
                message: "replications must be >= 1".into(),
            });
        }
        if estimators.is_empty() {
            return Err(Error::Config {
                line: 0,
                message: "at least one estimator is required".into(),
            });
        }

        Ok(ExperimentConfig {
            n,
            alpha,
            t,
            delta,
            rho,
            sigma_eta,
            error_model,
            replications,
            master_seed,
            estimators,
            scheme,
            threads,
            out_dir,
        })
    }

    /// Expands the grid into design cells, in a fixed deterministic order.
    pub fn designs(&self) -> Vec<DesignPoint> {
        let mut out = Vec::new();
        for &error_model in &self.error_model {
            for &t in &self.t {
                for &sigma_eta in &self.sigma_eta {
                    for &delta in &self.delta {
                        for &rho in &self.rho {
                            out.push(DesignPoint {
                                n: self.n,
                                t,
                                delta,
                                alpha: self.alpha,
                                rho,
                                sigma_eta,
                                error_model,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}
