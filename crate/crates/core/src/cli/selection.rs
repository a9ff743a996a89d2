//! Case selection for `export`: either a list of case ids (`3,17,42`) or a
//! conjunction of filters (`layer=overmold,die>=1.5,split=test`).

use std::cmp::Ordering;

use crate::dataset::Dataset;
use crate::doe::{Layer, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ge,
    Le,
    Gt,
    Lt,
}

impl Op {
    fn holds(self, ord: Ordering) -> bool {
        match self {
            Op::Eq => ord == Ordering::Equal,
            Op::Ge => ord != Ordering::Less,
            Op::Le => ord != Ordering::Greater,
            Op::Gt => ord == Ordering::Greater,
            Op::Lt => ord == Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Field {
    Modulus,
    Cte,
    Die,
    Gap,
}

impl Field {
    fn get(self, p: &ParamVector) -> f64 {
        match self {
            Field::Modulus => p.emc_modulus,
            Field::Cte => p.emc_cte,
            Field::Die => p.die_size,
            Field::Gap => p.gap_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Filter {
    Layer(Layer),
    Split(bool),
    Value(Field, Op, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CaseSelection {
    Ids(Vec<usize>),
    Filters(Vec<Filter>),
}

/// Relative tolerance for `=` on physical values, so `die=1.2` matches the
/// grid level without exact float spelling.
const EQ_TOL: f64 = 1e-9;

fn parse_filter(term: &str) -> Result<Filter> {
    let bad = || {
        Error::Config(format!(
            "bad case filter `{term}`; expected KEY OP VALUE with KEY in layer, split, e, cte, die, gap"
        ))
    };
    let (pos, op, width) = ["<=", ">=", "=", "<", ">"]
        .iter()
        .filter_map(|s| term.find(s).map(|p| (p, *s, s.len())))
        .min_by_key(|(p, s, _)| (*p, std::cmp::Reverse(s.len())))
        .ok_or_else(bad)?;
    let key = term[..pos].trim().to_ascii_lowercase();
    let value = term[pos + width..].trim();
    let op = match op {
        "=" => Op::Eq,
        ">=" => Op::Ge,
        "<=" => Op::Le,
        ">" => Op::Gt,
        _ => Op::Lt,
    };
    match key.as_str() {
        "layer" if op == Op::Eq => Ok(Filter::Layer(value.parse()?)),
        "split" if op == Op::Eq => match value {
            "train" => Ok(Filter::Split(true)),
            "test" => Ok(Filter::Split(false)),
            _ => Err(bad()),
        },
        "e" | "emc" | "modulus" | "emc_modulus" => Ok(Filter::Value(Field::Modulus, op, num(value, term)?)),
        "cte" | "emc_cte" => Ok(Filter::Value(Field::Cte, op, num(value, term)?)),
        "die" | "die_size" => Ok(Filter::Value(Field::Die, op, num(value, term)?)),
        "gap" | "gap_size" => Ok(Filter::Value(Field::Gap, op, num(value, term)?)),
        _ => Err(bad()),
    }
}

fn num(value: &str, term: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("bad number in case filter `{term}`")))
}

impl CaseSelection {
    pub fn parse(text: &str) -> Result<Self> {
        let terms: Vec<&str> = text.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
        if terms.is_empty() {
            return Err(Error::Config("empty case selection".into()));
        }
        if terms.iter().all(|t| t.chars().all(|c| c.is_ascii_digit())) {
            let ids = terms.iter().map(|t| t.parse().expect("digits")).collect();
            return Ok(CaseSelection::Ids(ids));
        }
        terms.iter().map(|t| parse_filter(t)).collect::<Result<_>>().map(CaseSelection::Filters)
    }

    /// Matching case indices in ascending order; errors on unknown ids or an
    /// empty result.
    pub fn resolve(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let selected: Vec<usize> = match self {
            CaseSelection::Ids(ids) => {
                if let Some(&bad) = ids.iter().find(|&&i| i >= ds.len()) {
                    return Err(Error::Config(format!(
                        "unknown case id {bad}; dataset has ids 0..{}",
                        ds.len()
                    )));
                }
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids.dedup();
                ids
            }
            CaseSelection::Filters(filters) => {
                let train = ds.train_indices();
                (0..ds.len())
                    .filter(|&i| {
                        let p = &ds.cases[i].params;
                        filters.iter().all(|f| match *f {
                            Filter::Layer(l) => p.layer == l,
                            Filter::Split(is_train) => train.binary_search(&i).is_ok() == is_train,
                            Filter::Value(field, op, v) => {
                                let x = field.get(p);
                                let ord = if (x - v).abs() <= EQ_TOL * v.abs().max(1.0) {
                                    Ordering::Equal
                                } else {
                                    x.total_cmp(&v)
                                };
                                op.holds(ord)
                            }
                        })
                    })
                    .collect()
            }
        };
        if selected.is_empty() {
            return Err(Error::Config("case selection matched no cases".into()));
        }
        Ok(selected)
    }
}
