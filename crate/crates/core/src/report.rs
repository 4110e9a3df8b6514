//! Report rows and their CSV/JSON serialization.
//!
//! Floats are rounded to 9 significant digits when a row is built, so the
//! CSV text, the JSON text and a JSON round trip all carry the same values.
//! Non-finite values are written as `inf`, `-inf` and `nan` (JSON strings);
//! missing values as an empty CSV cell or `null`.

use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::montecarlo::{Estimate, SweepRow};
use crate::theory::Extended;

pub const CSV_HEADER: &str =
    "m,theta,regime,phi1_closed,mean_flux,se,parked_prob,se,flux_per_n,se,overflow_frac,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Rounds to 9 significant digits.
pub fn round9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// 9 significant digits in scientific notation; `0`, `inf`, `-inf`, `nan`
/// for the special values.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if x == 0.0 {
        "0".into()
    } else {
        format!("{x:.8e}")
    }
}

mod float_field {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_some(x),
            Some(x) => s.serialize_some(&format_float(*x)),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                "nan" => Ok(Some(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }
}

/// One report line. The three standard errors get distinct JSON names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    #[serde(with = "float_field")]
    pub m: Option<f64>,
    #[serde(with = "float_field")]
    pub theta: Option<f64>,
    pub regime: Option<String>,
    #[serde(with = "float_field")]
    pub phi1_closed: Option<f64>,
    #[serde(with = "float_field")]
    pub mean_flux: Option<f64>,
    #[serde(with = "float_field")]
    pub se_mean_flux: Option<f64>,
    #[serde(with = "float_field")]
    pub parked_prob: Option<f64>,
    #[serde(with = "float_field")]
    pub se_parked_prob: Option<f64>,
    #[serde(with = "float_field")]
    pub flux_per_n: Option<f64>,
    #[serde(with = "float_field")]
    pub se_flux_per_n: Option<f64>,
    #[serde(with = "float_field")]
    pub overflow_frac: Option<f64>,
    pub seed: u64,
}

impl ReportRow {
    pub fn empty(seed: u64) -> Self {
        ReportRow {
            m: None,
            theta: None,
            regime: None,
            phi1_closed: None,
            mean_flux: None,
            se_mean_flux: None,
            parked_prob: None,
            se_parked_prob: None,
            flux_per_n: None,
            se_flux_per_n: None,
            overflow_frac: None,
            seed,
        }
    }

    /// Applies [`round9`] to every float.
    pub fn rounded(mut self) -> Self {
        for f in [
            &mut self.m,
            &mut self.theta,
            &mut self.phi1_closed,
            &mut self.mean_flux,
            &mut self.se_mean_flux,
            &mut self.parked_prob,
            &mut self.se_parked_prob,
            &mut self.flux_per_n,
            &mut self.se_flux_per_n,
            &mut self.overflow_frac,
        ] {
            *f = f.map(round9);
        }
        self
    }

    pub fn set_mean_flux(&mut self, e: &Estimate) {
        self.mean_flux = Some(e.point);
        self.se_mean_flux = Some(e.std_error);
    }

    pub fn set_parked_prob(&mut self, e: &Estimate) {
        self.parked_prob = Some(e.point);
        self.se_parked_prob = Some(e.std_error);
    }

    pub fn set_flux_per_n(&mut self, e: &Estimate) {
        self.flux_per_n = Some(e.point);
        self.se_flux_per_n = Some(e.std_error);
    }

    fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        [
            f(self.m),
            f(self.theta),
            self.regime.clone().unwrap_or_default(),
            f(self.phi1_closed),
            f(self.mean_flux),
            f(self.se_mean_flux),
            f(self.parked_prob),
            f(self.se_parked_prob),
            f(self.flux_per_n),
            f(self.se_flux_per_n),
            f(self.overflow_frac),
            self.seed.to_string(),
        ]
        .join(",")
    }
}

impl From<&SweepRow> for ReportRow {
    fn from(r: &SweepRow) -> Self {
        let mut row = ReportRow::empty(r.seed);
        row.m = Some(r.m);
        row.theta = r.theta;
        row.regime = r.regime.map(|k| k.name().to_string());
        row.phi1_closed = r.phi1_closed.map(Extended::to_f64);
        if let Some(e) = &r.mean_flux {
            row.set_mean_flux(e);
        }
        if let Some(e) = &r.parked_prob {
            row.set_parked_prob(e);
        }
        if let Some(e) = &r.flux_per_n {
            row.set_flux_per_n(e);
        }
        row.overflow_frac = r.overflow_frac;
        row.rounded()
    }
}

pub fn render(rows: &[ReportRow], format: Format) -> String {
    match format {
        Format::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for r in rows {
                s.push_str(&r.csv_line());
                s.push('\n');
            }
            s
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
            s.push('\n');
            s
        }
    }
}

pub fn write_report(
    rows: &[ReportRow],
    format: Format,
    out: &mut dyn Write,
) -> std::io::Result<()> {
    out.write_all(render(rows, format).as_bytes())
}

pub fn parse_json(text: &str) -> serde_json::Result<Vec<ReportRow>> {
    serde_json::from_str(text)
}
