//! Ablation switches and the twelve-row matrix of switch combinations.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SsftError};

/// Component switches. `shl` (shared learning) must stay on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    #[serde(rename = "ShL")]
    pub shl: bool,
    #[serde(rename = "SpL")]
    pub spl: bool,
    #[serde(rename = "SaS")]
    pub sas: bool,
    #[serde(rename = "MoA")]
    pub moa: bool,
    #[serde(rename = "PA")]
    pub pa: bool,
    #[serde(rename = "RE")]
    pub re: bool,
    #[serde(rename = "ShT")]
    pub sht: bool,
    #[serde(rename = "SpT")]
    pub spt: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

pub const SWITCH_NAMES: [&str; 8] = ["ShL", "SpL", "SaS", "MoA", "PA", "RE", "ShT", "SpT"];

impl Ablation {
    pub const FULL: Ablation = Ablation {
        shl: true,
        spl: true,
        sas: true,
        moa: true,
        pa: true,
        re: true,
        sht: true,
        spt: true,
    };

    pub fn switches(&self) -> [bool; 8] {
        [
            self.shl, self.spl, self.sas, self.moa, self.pa, self.re, self.sht, self.spt,
        ]
    }

    pub fn from_switches(s: [bool; 8]) -> Self {
        Ablation {
            shl: s[0],
            spl: s[1],
            sas: s[2],
            moa: s[3],
            pa: s[4],
            re: s[5],
            sht: s[6],
            spt: s[7],
        }
    }

    /// Whether the transfer network is built at all.
    pub fn transfers(&self) -> bool {
        self.sht || self.spt
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.shl {
            v.push(
                "ablation: ShL cannot be disabled, the shared stream is the backbone".to_string(),
            );
        }
        for (on, name) in [(self.pa, "PA"), (self.re, "RE"), (self.spt, "SpT")] {
            if on && !self.spl {
                v.push(format!(
                    "ablation: {name} requires SpL (it needs the specific stream)"
                ));
            }
        }
        if self.sht && !self.shl {
            v.push("ablation: ShT requires ShL".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SsftError::Config(v))
        }
    }

    /// Compact label such as `ShL+SpL+SaS`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = SWITCH_NAMES
            .iter()
            .zip(self.switches())
            .filter_map(|(n, s)| s.then_some(*n))
            .collect();
        on.join("+")
    }
}

/// Rows 1 to 12 of the ablation matrix, in switch order ShL SpL SaS MoA PA RE ShT SpT.
pub const ROWS: [[bool; 8]; 12] = [
    [true, false, false, false, false, false, false, false],
    [true, true, false, false, false, false, false, false],
    [true, true, true, false, false, false, false, false],
    [true, true, true, true, false, false, false, false],
    [true, true, true, true, true, false, false, false],
    [true, true, true, true, true, true, false, false],
    [true, true, true, false, false, false, true, true],
    [true, true, true, true, false, false, true, true],
    [true, true, true, true, true, false, true, true],
    [true, true, true, true, true, true, true, false],
    [true, true, true, true, true, true, false, true],
    [true, true, true, true, true, true, true, true],
];

/// Switches of a 1-based row number.
pub fn row(n: usize) -> Result<Ablation> {
    if !(1..=ROWS.len()).contains(&n) {
        return Err(SsftError::config(format!(
            "ablation row {n} does not exist (rows are 1..=12)"
        )));
    }
    Ok(Ablation::from_switches(ROWS[n - 1]))
}

/// Parses `1,10-12` style row lists; the result is sorted and deduplicated.
pub fn parse_rows(list: &str) -> Result<Vec<usize>> {
    let mut rows = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| SsftError::config(format!("bad ablation row '{s}'")))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(SsftError::config(format!(
                        "bad ablation row range '{part}'"
                    )));
                }
                rows.extend(a..=b);
            }
            None => rows.push(parse(part)?),
        }
    }
    if rows.is_empty() {
        return Err(SsftError::config("no ablation rows selected"));
    }
    for &r in &rows {
        row(r)?;
    }
    rows.sort_unstable();
    rows.dedup();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_row_is_valid() {
        for n in 1..=12 {
            row(n).unwrap().validate().unwrap();
        }
        assert_eq!(row(12).unwrap(), Ablation::FULL);
        assert_eq!(row(1).unwrap().label(), "ShL");
        assert!(!row(6).unwrap().transfers());
        assert!(row(11).unwrap().transfers());
    }

    #[test]
    fn specific_transfer_needs_specific_stream() {
        let a = Ablation {
            spl: false,
            pa: false,
            re: false,
            ..Ablation::FULL
        };
        let err = a.validate().unwrap_err();
        assert!(err.to_string().contains("SpT requires SpL"), "{err}");
        let no_shl = Ablation {
            shl: false,
            ..Ablation::FULL
        };
        assert!(matches!(no_shl.validate(), Err(SsftError::Config(v)) if v.len() == 2));
    }

    #[test]
    fn row_lists() {
        assert_eq!(parse_rows("12, 1,10-11,1").unwrap(), vec![1, 10, 11, 12]);
        assert!(parse_rows("0").is_err());
        assert!(parse_rows("3-2").is_err());
        assert!(parse_rows("x").is_err());
    }

    #[test]
    fn json_uses_table_names() {
        let json = serde_json::to_string(&row(2).unwrap()).unwrap();
        assert!(
            json.starts_with(r#"{"ShL":true,"SpL":true,"SaS":false"#),
            "{json}"
        );
    }
}
