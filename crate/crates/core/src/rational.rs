//! Exact rational arithmetic for cycle counts and model coefficients.

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

pub type Rational = Ratio<i128>;

pub fn int(v: i128) -> Rational {
    Rational::from_integer(v)
}

/// Parses a decimal literal (`"0.8"`, `"-1.25e-3"`, `"3"`) or a fraction (`"4/5"`) exactly.
pub fn parse(text: &str) -> Option<Rational> {
    let text = text.trim();
    if let Some((n, d)) = text.split_once('/') {
        let n: i128 = n.trim().parse().ok()?;
        let d: i128 = d.trim().parse().ok()?;
        if d == 0 {
            return None;
        }
        return Some(Rational::new(n, d));
    }
    let (mantissa, exponent) = match text.find(['e', 'E']) {
        Some(pos) => (&text[..pos], text[pos + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (whole, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if whole.is_empty() && frac.is_empty() {
        return None;
    }
    if !whole.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let joined = format!("{whole}{frac}");
    let mut value = Rational::from_integer(joined.parse::<i128>().ok()?);
    let scale = exponent - frac.len() as i32;
    if scale.unsigned_abs() > 30 {
        return None;
    }
    let ten = Rational::from_integer(10);
    if scale >= 0 {
        for _ in 0..scale {
            value *= ten;
        }
    } else {
        for _ in 0..(-scale) {
            value /= ten;
        }
    }
    Some(if negative { -value } else { value })
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Smallest integer `>= r`, clamped at zero.
pub fn ceil_u64(r: &Rational) -> u64 {
    if *r <= Rational::zero() {
        return 0;
    }
    let (q, rem) = r.numer().div_rem(r.denom());
    (if rem == 0 { q } else { q + 1 }) as u64
}

/// Exact textual form: `"7"` or `"15/2"`.
pub fn exact_string(r: &Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Serde adapter: rationals travel as JSON numbers (or `"a/b"` strings on input).
pub mod serde_num {
    use super::{parse, to_f64, Rational};
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Rational, s: S) -> Result<S::Ok, S::Error> {
        if value.is_integer() {
            if let Ok(v) = i64::try_from(*value.numer()) {
                return s.serialize_i64(v);
            }
        }
        s.serialize_f64(to_f64(value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let raw = serde_json::Value::deserialize(d)?;
        let text = match &raw {
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::String(s) => s.clone(),
            other => return Err(D::Error::custom(format!("expected a number, got {other}"))),
        };
        parse(&text).ok_or_else(|| D::Error::custom(format!("not a rational number: {text}")))
    }
}

/// Like [`serde_num`] for optional fields.
pub mod serde_opt {
    use super::Rational;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => super::serde_num::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::serde_num")] Rational);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}
