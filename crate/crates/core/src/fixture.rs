//! Line-oriented text format for [`Scenario`] and [`ChannelSet`].
//!
//! Each line is a key followed by whitespace-separated fields. Reals are
//! printed in shortest round-trip form, complex values as `re,im`. Blank
//! lines and lines starting with `#` are ignored.
//!
//! ```text
//! rnm-scenario 1
//! area_width 10.0
//! bs_position 0.0 0.0
//! fixed_ris_position none
//! ...
//! ris_position 3.2 7.9
//! mu 1.5 2.5            # one line per user
//! qos 1250000.0         # one line per user
//! noise_power 5.0e-15
//!
//! rnm-channels 1
//! h_bru 0.1,-0.2 ...    # one line per RIS element, M entries
//! h_direct ...          # one line per user, M entries
//! h_ris ...             # one line per user, N entries
//! path_loss 0.001       # one line per user
//! ```

use std::fmt::Write as _;

use num_complex::Complex64;

use crate::channel::{ChannelSet, Point, Scenario, TopologyConfig};
use crate::error::{Error, Result};

const SCENARIO_HEADER: &str = "rnm-scenario 1";
const CHANNELS_HEADER: &str = "rnm-channels 1";

fn real(x: f64) -> String {
    format!("{x:?}")
}

fn complex(z: Complex64) -> String {
    format!("{:?},{:?}", z.re, z.im)
}

pub fn scenario_to_string(s: &Scenario) -> String {
    let c = &s.config;
    let mut out = String::new();
    let mut line = |key: &str, fields: &[String]| {
        out.push_str(key);
        for f in fields {
            out.push(' ');
            out.push_str(f);
        }
        out.push('\n');
    };
    line(SCENARIO_HEADER, &[]);
    line("area_width", &[real(c.area_width)]);
    line("bs_position", &[real(c.bs_position[0]), real(c.bs_position[1])]);
    match c.ris_position {
        Some(p) => line("fixed_ris_position", &[real(p[0]), real(p[1])]),
        None => line("fixed_ris_position", &["none".into()]),
    }
    line("num_antennas", &[c.num_antennas.to_string()]);
    line("num_elements", &[c.num_elements.to_string()]);
    line("num_users", &[c.num_users.to_string()]);
    line("path_loss_exponent", &[real(c.path_loss_exponent)]);
    line("ris_link_exponent", &[real(c.ris_link_exponent)]);
    line("rician_factor", &[real(c.rician_factor)]);
    line("bandwidth", &[real(c.bandwidth)]);
    line("noise_psd", &[real(c.noise_psd)]);
    line("p_max", &[real(c.p_max)]);
    line("qos_range", &[real(c.qos_range.0), real(c.qos_range.1)]);
    line("min_distance", &[real(c.min_distance)]);
    line("ris_position", &[real(s.ris_position[0]), real(s.ris_position[1])]);
    for p in &s.mu_positions {
        line("mu", &[real(p[0]), real(p[1])]);
    }
    for &q in &s.qos {
        line("qos", &[real(q)]);
    }
    line("noise_power", &[real(s.noise_power)]);
    out
}

pub fn channels_to_string(ch: &ChannelSet) -> String {
    let mut out = String::from(CHANNELS_HEADER);
    out.push('\n');
    let rows = [("h_bru", &ch.h_bru), ("h_direct", &ch.h_direct), ("h_ris", &ch.h_ris)];
    for (key, matrix) in rows {
        for row in matrix.iter() {
            out.push_str(key);
            for &z in row {
                let _ = write!(out, " {}", complex(z));
            }
            out.push('\n');
        }
    }
    for &pl in &ch.path_loss {
        let _ = writeln!(out, "path_loss {}", real(pl));
    }
    out
}

struct Record<'a> {
    line: usize,
    key: &'a str,
    fields: Vec<&'a str>,
}

impl Record<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn count(&self, n: usize) -> Result<()> {
        if self.fields.len() != n {
            return Err(self.err(format!("`{}` expects {n} fields, got {}", self.key, self.fields.len())));
        }
        Ok(())
    }

    fn real_at(&self, i: usize) -> Result<f64> {
        self.fields[i]
            .parse()
            .map_err(|_| self.err(format!("`{}` is not a number", self.fields[i])))
    }

    fn real(&self) -> Result<f64> {
        self.count(1)?;
        self.real_at(0)
    }

    fn point(&self) -> Result<Point> {
        self.count(2)?;
        Ok([self.real_at(0)?, self.real_at(1)?])
    }

    fn count_value(&self) -> Result<usize> {
        self.count(1)?;
        self.fields[0]
            .parse()
            .map_err(|_| self.err(format!("`{}` is not a count", self.fields[0])))
    }

    fn complex_row(&self) -> Result<Vec<Complex64>> {
        self.fields
            .iter()
            .map(|f| {
                let (re, im) = f
                    .split_once(',')
                    .ok_or_else(|| self.err(format!("`{f}` is not a re,im pair")))?;
                let parse = |s: &str| s.parse::<f64>().map_err(|_| self.err(format!("`{f}` is not a re,im pair")));
                Ok(Complex64::new(parse(re)?, parse(im)?))
            })
            .collect()
    }
}

fn records<'a>(text: &'a str, header: &str) -> Result<Vec<Record<'a>>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == header => {}
        Some((line, _)) => {
            return Err(Error::FormatVersionMismatch(format!("line {line}: expected `{header}`")));
        }
        None => return Err(Error::FormatVersionMismatch(format!("missing `{header}`"))),
    }
    Ok(lines
        .map(|(line, l)| {
            let mut parts = l.split_whitespace();
            let key = parts.next().unwrap_or_default();
            Record {
                line,
                key,
                fields: parts.collect(),
            }
        })
        .collect())
}

pub fn scenario_from_str(text: &str) -> Result<Scenario> {
    let mut config = TopologyConfig::default();
    let mut ris_position = None;
    let mut mu_positions = Vec::new();
    let mut qos = Vec::new();
    let mut noise_power = None;
    for r in records(text, SCENARIO_HEADER)? {
        match r.key {
            "area_width" => config.area_width = r.real()?,
            "bs_position" => config.bs_position = r.point()?,
            "fixed_ris_position" => {
                config.ris_position = if r.fields == ["none"] { None } else { Some(r.point()?) }
            }
            "num_antennas" => config.num_antennas = r.count_value()?,
            "num_elements" => config.num_elements = r.count_value()?,
            "num_users" => config.num_users = r.count_value()?,
            "path_loss_exponent" => config.path_loss_exponent = r.real()?,
            "ris_link_exponent" => config.ris_link_exponent = r.real()?,
            "rician_factor" => config.rician_factor = r.real()?,
            "bandwidth" => config.bandwidth = r.real()?,
            "noise_psd" => config.noise_psd = r.real()?,
            "p_max" => config.p_max = r.real()?,
            "qos_range" => {
                let p = r.point()?;
                config.qos_range = (p[0], p[1]);
            }
            "min_distance" => config.min_distance = r.real()?,
            "ris_position" => ris_position = Some(r.point()?),
            "mu" => mu_positions.push(r.point()?),
            "qos" => qos.push(r.real()?),
            "noise_power" => noise_power = Some(r.real()?),
            other => {
                return Err(Error::UnknownKey {
                    line: r.line,
                    key: other.to_string(),
                })
            }
        }
    }
    let missing = |what: &str| Error::Parse {
        line: 0,
        message: format!("missing `{what}`"),
    };
    let scenario = Scenario {
        ris_position: ris_position.ok_or_else(|| missing("ris_position"))?,
        noise_power: noise_power.ok_or_else(|| missing("noise_power"))?,
        config,
        mu_positions,
        qos,
    };
    let k = scenario.config.num_users;
    if scenario.mu_positions.len() != k || scenario.qos.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} positions and {} QoS values for {k} users",
            scenario.mu_positions.len(),
            scenario.qos.len()
        )));
    }
    Ok(scenario)
}

pub fn channels_from_str(text: &str) -> Result<ChannelSet> {
    let mut ch = ChannelSet {
        h_bru: Vec::new(),
        h_direct: Vec::new(),
        h_ris: Vec::new(),
        path_loss: Vec::new(),
    };
    for r in records(text, CHANNELS_HEADER)? {
        match r.key {
            "h_bru" => ch.h_bru.push(r.complex_row()?),
            "h_direct" => ch.h_direct.push(r.complex_row()?),
            "h_ris" => ch.h_ris.push(r.complex_row()?),
            "path_loss" => ch.path_loss.push(r.real()?),
            other => {
                return Err(Error::UnknownKey {
                    line: r.line,
                    key: other.to_string(),
                })
            }
        }
    }
    let (n, m, k) = (ch.num_elements(), ch.num_antennas(), ch.num_users());
    let consistent = ch.h_bru.iter().all(|r| r.len() == m)
        && ch.h_direct.iter().all(|r| r.len() == m)
        && ch.h_ris.len() == k
        && ch.h_ris.iter().all(|r| r.len() == n)
        && ch.path_loss.len() == k;
    if !consistent {
        return Err(Error::DimensionMismatch(format!(
            "inconsistent channel matrices for N={n} M={m} K={k}"
        )));
    }
    Ok(ch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_topology, sample_channels};

    #[test]
    fn round_trip_is_exact() {
        let config = TopologyConfig {
            num_antennas: 4,
            num_elements: 3,
            ris_position: Some([5.0, 5.0]),
            ..Default::default()
        };
        let s = generate_topology(&config, 11).unwrap();
        let ch = sample_channels(&s, 12).unwrap();
        assert_eq!(scenario_from_str(&scenario_to_string(&s)).unwrap(), s);
        assert_eq!(channels_from_str(&channels_to_string(&ch)).unwrap(), ch);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "rnm-channels 1\nh_direct 1.0,2.0\npath_loss x\n";
        match channels_from_str(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            channels_from_str("rnm-channels 1\nfoo 1\n"),
            Err(Error::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(channels_from_str("rnm-channels 2\n"), Err(Error::FormatVersionMismatch(_))));
    }
}
