//! Line-oriented feeder files.
//!
//! ```text
//! # comment
//! buses=2 v0=1
//! edge 0 1 r=0.1 x=0.2
//! edge 1 2 r=0.05 x=0.1
//! bus 1 p=-0.1 qu=0 qmin=-0.5 qmax=0.5 vmin=0.9025 vmax=1.1025
//! bus 2 p=-0.1 qu=0 qmin=-0.5 qmax=0.5 vmin=0.9025 vmax=1.1025
//! ```
//!
//! The header comes first. Every branch bus needs exactly one `edge` record
//! naming it as the child and exactly one `bus` record. Text after `#` is
//! ignored.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use nalgebra::DVector;

use crate::grid::{GridError, Line, RadialNetwork};
use crate::plant::{OperatingCondition, PlantError};

#[derive(Debug, Clone, PartialEq)]
pub struct FeederError {
    pub line: Option<usize>,
    pub message: String,
}

impl FeederError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for FeederError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for FeederError {}

const BUS_KEYS: [&str; 6] = ["p", "qu", "qmin", "qmax", "vmin", "vmax"];

fn key_values<'a>(
    tokens: &[&'a str],
    allowed: &[&str],
    line: usize,
) -> Result<HashMap<&'a str, f64>, FeederError> {
    let mut out = HashMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| FeederError::at(line, format!("expected key=value, found '{tok}'")))?;
        if !allowed.contains(&k) {
            return Err(FeederError::at(line, format!("unknown key '{k}'")));
        }
        let x: f64 = v
            .parse()
            .map_err(|_| FeederError::at(line, format!("invalid number '{v}' for '{k}'")))?;
        if out.insert(k, x).is_some() {
            return Err(FeederError::at(line, format!("duplicate key '{k}'")));
        }
    }
    for k in allowed {
        if !out.contains_key(k) {
            return Err(FeederError::at(line, format!("missing key '{k}'")));
        }
    }
    Ok(out)
}

fn index(tok: &str, what: &str, line: usize) -> Result<usize, FeederError> {
    tok.parse()
        .map_err(|_| FeederError::at(line, format!("invalid {what} '{tok}'")))
}

pub fn parse_feeder_str(text: &str) -> Result<(RadialNetwork, OperatingCondition), FeederError> {
    let mut header: Option<(usize, f64)> = None;
    let mut edges: Vec<(usize, Line)> = Vec::new();
    let mut buses: HashMap<usize, (usize, HashMap<&str, f64>)> = HashMap::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let Some(&first) = tokens.first() else {
            continue;
        };
        match first {
            "edge" => {
                let n = header
                    .ok_or_else(|| FeederError::at(lineno, "edge record before header"))?
                    .0;
                if tokens.len() != 5 {
                    return Err(FeederError::at(lineno, "expected 'edge P C r=R x=R'"));
                }
                let p = index(tokens[1], "parent bus", lineno)?;
                let c = index(tokens[2], "child bus", lineno)?;
                if p > n || c == 0 || c > n {
                    return Err(FeederError::at(
                        lineno,
                        format!("edge {p}->{c} references a bus outside 0..={n}"),
                    ));
                }
                let kv = key_values(&tokens[3..], &["r", "x"], lineno)?;
                edges.push((lineno, Line::new(p, c, kv["r"], kv["x"])));
            }
            "bus" => {
                let n = header
                    .ok_or_else(|| FeederError::at(lineno, "bus record before header"))?
                    .0;
                if tokens.len() != 2 + BUS_KEYS.len() {
                    return Err(FeederError::at(
                        lineno,
                        "expected 'bus I p=R qu=R qmin=R qmax=R vmin=R vmax=R'",
                    ));
                }
                let b = index(tokens[1], "bus", lineno)?;
                if b == 0 || b > n {
                    return Err(FeederError::at(lineno, format!("bus {b} outside 1..={n}")));
                }
                let kv = key_values(&tokens[2..], &BUS_KEYS, lineno)?;
                if buses.insert(b, (lineno, kv)).is_some() {
                    return Err(FeederError::at(lineno, format!("duplicate record for bus {b}")));
                }
            }
            _ if first.starts_with("buses=") => {
                if header.is_some() {
                    return Err(FeederError::at(lineno, "duplicate header"));
                }
                let kv = key_values(&tokens, &["buses", "v0"], lineno)?;
                let n = kv["buses"];
                if !(n >= 1.0 && n.fract() == 0.0 && n <= 1e7) {
                    return Err(FeederError::at(lineno, format!("invalid bus count '{n}'")));
                }
                header = Some((n as usize, kv["v0"]));
            }
            other => {
                return Err(FeederError::at(lineno, format!("unknown record '{other}'")));
            }
        }
    }

    let (n, v0) = header.ok_or_else(|| FeederError::global("missing header 'buses=N v0=R'"))?;
    let edge_line = |child: usize| edges.iter().find(|(_, l)| l.child == child).map(|(ln, _)| *ln);
    let lines: Vec<Line> = edges.iter().map(|(_, l)| *l).collect();
    let net = RadialNetwork::new(n, v0, lines).map_err(|e| match &e {
        GridError::MultipleParents { child } => {
            let ln = edges.iter().filter(|(_, l)| l.child == *child).nth(1).map(|(ln, _)| *ln);
            FeederError {
                line: ln,
                message: e.to_string(),
            }
        }
        GridError::NotATree { bus } => FeederError {
            line: edge_line(*bus),
            message: e.to_string(),
        },
        GridError::NonPositiveReactance { child, .. } | GridError::NegativeResistance { child, .. } => {
            FeederError {
                line: edge_line(*child),
                message: e.to_string(),
            }
        }
        _ => FeederError::global(e.to_string()),
    })?;

    let mut cols: HashMap<&str, Vec<f64>> = BUS_KEYS.iter().map(|k| (*k, vec![0.0; n])).collect();
    for b in 1..=n {
        let (_, kv) = buses
            .get(&b)
            .ok_or_else(|| FeederError::global(format!("missing bus record for bus {b}")))?;
        for k in BUS_KEYS {
            cols.get_mut(k).expect("known key")[b - 1] = kv[k];
        }
    }
    let col = |k: &str| DVector::from_vec(cols[k].clone());
    let cond = OperatingCondition::new(
        col("p"),
        col("qu"),
        col("vmin"),
        col("vmax"),
        col("qmin"),
        col("qmax"),
    )
    .map_err(|e| match &e {
        PlantError::InvertedBounds { bus, .. } => FeederError {
            line: buses.get(bus).map(|(ln, _)| *ln),
            message: e.to_string(),
        },
        _ => FeederError::global(e.to_string()),
    })?;
    Ok((net, cond))
}

pub fn parse_feeder(path: &Path) -> Result<(RadialNetwork, OperatingCondition), FeederError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| FeederError::global(format!("{}: {e}", path.display())))?;
    parse_feeder_str(&text).map_err(|e| FeederError {
        message: format!("{}: {}", path.display(), e.message),
        ..e
    })
}

/// Renders an instance so that [`parse_feeder_str`] reproduces it exactly.
pub fn emit_feeder(net: &RadialNetwork, cond: &OperatingCondition) -> String {
    let mut s = String::new();
    writeln!(s, "buses={} v0={}", net.bus_count(), net.v0()).unwrap();
    for l in net.lines() {
        writeln!(s, "edge {} {} r={} x={}", l.parent, l.child, l.r, l.x).unwrap();
    }
    for k in 0..cond.dim() {
        writeln!(
            s,
            "bus {} p={} qu={} qmin={} qmax={} vmin={} vmax={}",
            k + 1,
            cond.p[k],
            cond.q_u[k],
            cond.q_min[k],
            cond.q_max[k],
            cond.v_min[k],
            cond.v_max[k]
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "buses=1 v0=1\nedge 0 1 r=0.1 x=0.2\nbus 1 p=-0.1 qu=0 qmin=-0.5 qmax=0.5 vmin=0.9025 vmax=1.1025\n";

    #[test]
    fn minimal_file_round_trips() {
        let (net, cond) = parse_feeder_str(TWO_BUS).unwrap();
        assert_eq!(net.bus_count(), 1);
        assert_eq!(cond.p[0], -0.1);
        let text = emit_feeder(&net, &cond);
        assert_eq!(text, TWO_BUS);
        assert_eq!(parse_feeder_str(&text).unwrap(), (net, cond));
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = format!("# feeder\n\n{}  # trailing\n", TWO_BUS.replace('\n', " # c\n"));
        assert!(parse_feeder_str(&text).is_ok());
    }

    #[test]
    fn cycle_rejected() {
        let text = "buses=2 v0=1\nedge 0 1 r=0.1 x=0.2\nedge 2 1 r=0.1 x=0.2\n";
        let err = parse_feeder_str(text).unwrap_err();
        assert!(err.message.contains("not a tree"), "{err}");
        assert_eq!(err.line, Some(3));
        let text = "buses=2 v0=1\nedge 1 2 r=0.1 x=0.2\nedge 2 1 r=0.1 x=0.2\n";
        let err = parse_feeder_str(text).unwrap_err();
        assert!(err.message.contains("not a tree"), "{err}");
    }

    #[test]
    fn inverted_capacity_names_bus() {
        let text = TWO_BUS.replace("qmin=-0.5 qmax=0.5", "qmin=0.5 qmax=-0.5");
        let err = parse_feeder_str(&text).unwrap_err();
        assert!(err.message.contains("bus 1"), "{err}");
        assert_eq!(err.line, Some(3));
    }

    #[test]
    fn syntax_errors_cite_lines() {
        let cases = [
            ("edge 0 1 r=0.1 x=0.2\n", 1, "before header"),
            ("buses=1 v0=1\nedge 0 1 r=0.1 y=0.2\n", 2, "unknown key"),
            ("buses=1 v0=1\nedge 0 1 r=0.1 x=abc\n", 2, "invalid number"),
            ("buses=1 v0=1\nedge 0 1 r=0.1 r=0.2\n", 2, "duplicate key"),
            ("buses=1 v0=1\nnode 1\n", 2, "unknown record"),
            ("buses=1 v0=1\nedge 0 1 r=0.1 x=-0.2\n", 2, "reactance"),
        ];
        for (text, line, needle) in cases {
            let err = parse_feeder_str(text).unwrap_err();
            assert_eq!(err.line, Some(line), "{text}: {err}");
            assert!(err.message.contains(needle), "{text}: {err}");
        }
    }

    #[test]
    fn missing_records() {
        let err = parse_feeder_str("buses=1 v0=1\nedge 0 1 r=0.1 x=0.2\n").unwrap_err();
        assert!(err.message.contains("missing bus record for bus 1"));
        assert!(parse_feeder_str("").unwrap_err().message.contains("missing header"));
    }
}
