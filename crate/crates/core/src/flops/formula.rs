use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Dominant-term complexity expressions, evaluated without constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComplexityFormula {
    /// `H²W²C + HWC²`
    EncoderSa,
    /// `NHWC + NC²`
    DecoderCa,
    /// `(hw + 4hw + … + 4^(S−1)hw)·S·P²·C`
    DenseFusion,
    /// `S·hw·P²·C`
    Ceca,
}

impl ComplexityFormula {
    pub fn symbols(&self) -> &'static [&'static str] {
        match self {
            ComplexityFormula::EncoderSa => &["H", "W", "C"],
            ComplexityFormula::DecoderCa => &["N", "H", "W", "C"],
            ComplexityFormula::DenseFusion | ComplexityFormula::Ceca => &["h", "w", "P", "C", "S"],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ComplexityFormula::EncoderSa => "encoder_sa",
            ComplexityFormula::DecoderCa => "decoder_ca",
            ComplexityFormula::DenseFusion => "dense_fusion",
            ComplexityFormula::Ceca => "ceca",
        }
    }
}

/// Symbol values for [`eval_formula`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bindings(BTreeMap<String, f64>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, symbol: &str, value: f64) -> Self {
        self.0.insert(symbol.to_string(), value);
        self
    }

    fn get(&self, formula: ComplexityFormula, symbol: &str) -> Result<f64> {
        match self.0.get(symbol) {
            Some(&v) if v > 0.0 && v.is_finite() => Ok(v),
            Some(&v) => Err(Error::Invalid(format!("{}: {symbol} = {v} must be positive", formula.name()))),
            None => Err(Error::Invalid(format!("{}: missing binding for {symbol}", formula.name()))),
        }
    }
}

/// `Σ_{k=0}^{S−1} 4^k`, the dense-to-CECA cost ratio.
pub fn geometric_factor(s: u32) -> f64 {
    (0..s).map(|k| 4f64.powi(k as i32)).sum()
}

pub fn eval_formula(f: ComplexityFormula, b: &Bindings) -> Result<f64> {
    let v = |s: &str| b.get(f, s);
    Ok(match f {
        ComplexityFormula::EncoderSa => {
            let hw = v("H")? * v("W")?;
            let c = v("C")?;
            hw * hw * c + hw * c * c
        }
        ComplexityFormula::DecoderCa => {
            let (n, c) = (v("N")?, v("C")?);
            n * v("H")? * v("W")? * c + n * c * c
        }
        ComplexityFormula::DenseFusion | ComplexityFormula::Ceca => {
            let s = v("S")?;
            if s.fract() != 0.0 {
                return Err(Error::Invalid(format!("{}: S = {s} must be an integer", f.name())));
            }
            let base = v("h")? * v("w")? * v("P")?.powi(2) * v("C")? * s;
            if f == ComplexityFormula::Ceca {
                base
            } else {
                base * geometric_factor(s as u32)
            }
        }
    })
}
