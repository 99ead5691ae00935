//! JSON specs for filtrations and martingales.
//!
//! ```json
//! {"kind": "biased", "theta": "1/3"}
//! {"kind": "explicit", "levels": [[["1/2", "1/2"]]], "extend": "repeat"}
//! {"kind": "explicit", "levels": [{"level": 2, "values": ["1", "0", "0", "-1"]}], "tag": "ui"}
//! ```

use std::path::Path;
use std::rc::Rc;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::filtration::{Extend, Filtration, Generator, DEFAULT_BRANCHING_BOUND};
use crate::martingale::{ClassTag, LevelFunction, Martingale};
use crate::rational::{self, Rational};

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FiltrationSpec {
    Dyadic {
        #[serde(default)]
        branching_bound: Option<usize>,
    },
    Biased {
        theta: String,
        #[serde(default)]
        branching_bound: Option<usize>,
    },
    Delayed {
        period: usize,
        #[serde(default)]
        branching_bound: Option<usize>,
    },
    Explicit {
        levels: Vec<Vec<Vec<String>>>,
        #[serde(default)]
        extend: ExtendSpec,
        #[serde(default)]
        branching_bound: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtendSpec {
    #[default]
    Repeat,
    Error,
}

fn parse_all(values: &[String]) -> Result<Vec<Rational>> {
    values.iter().map(|v| rational::parse(v)).collect()
}

impl FiltrationSpec {
    pub fn build(&self) -> Result<Rc<Filtration>> {
        let (generator, bound) = match self {
            FiltrationSpec::Dyadic { branching_bound } => (Generator::Dyadic, *branching_bound),
            FiltrationSpec::Biased { theta, branching_bound } => {
                (Generator::Biased { theta: rational::parse(theta)? }, *branching_bound)
            }
            FiltrationSpec::Delayed { period, branching_bound } => {
                (Generator::Delayed { period: *period }, *branching_bound)
            }
            FiltrationSpec::Explicit { levels, extend, branching_bound } => {
                let levels = levels
                    .iter()
                    .map(|cells| cells.iter().map(|c| parse_all(c)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                let extend = match extend {
                    ExtendSpec::Repeat => Extend::RepeatPattern,
                    ExtendSpec::Error => Extend::Error,
                };
                (Generator::Explicit { levels, extend }, *branching_bound)
            }
        };
        Filtration::new(generator, bound.unwrap_or(DEFAULT_BRANCHING_BOUND))
    }

    /// Built-in names: `dyadic`, `biased:<theta>`, `delayed:<period>`.
    pub fn named(name: &str) -> Result<Self> {
        let (kind, arg) = name.split_once(':').unwrap_or((name, ""));
        match (kind, arg) {
            ("dyadic", "") => Ok(FiltrationSpec::Dyadic { branching_bound: None }),
            ("biased", theta) if !theta.is_empty() => {
                Ok(FiltrationSpec::Biased { theta: theta.into(), branching_bound: None })
            }
            ("delayed", period) => Ok(FiltrationSpec::Delayed {
                period: period.parse().map_err(|_| Error::Parse(format!("bad period in {name:?}")))?,
                branching_bound: None,
            }),
            _ => Err(Error::Parse(format!(
                "unknown filtration {name:?}: expected dyadic, biased:<theta> or delayed:<period>"
            ))),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MartingaleSpec {
    Zero,
    Rademacher {
        #[serde(default)]
        scale: Option<String>,
    },
    Explicit {
        levels: Vec<LevelSpec>,
        #[serde(default)]
        tag: TagSpec,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub level: usize,
    pub values: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagSpec {
    Ui,
    Singular,
    #[default]
    Untagged,
}

impl MartingaleSpec {
    pub fn build(&self, filt: Rc<Filtration>) -> Result<Martingale> {
        match self {
            MartingaleSpec::Zero => Ok(Martingale::zero(filt)),
            MartingaleSpec::Rademacher { scale } => {
                let r = Martingale::rademacher(filt);
                match scale {
                    None => Ok(r),
                    Some(s) => {
                        let s = rational::parse(s)?;
                        Martingale::combine(&r, &r, s, Rational::default())
                    }
                }
            }
            MartingaleSpec::Explicit { levels, tag } => {
                let levels = levels
                    .iter()
                    .map(|l| Ok(LevelFunction { level: l.level, values: parse_all(&l.values)? }))
                    .collect::<Result<Vec<_>>>()?;
                let tag = match tag {
                    TagSpec::Ui => ClassTag::UniformlyIntegrable,
                    TagSpec::Singular => ClassTag::Singular,
                    TagSpec::Untagged => ClassTag::Untagged,
                };
                Martingale::explicit(filt, levels, tag)
            }
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
