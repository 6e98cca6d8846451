use serde::{Deserialize, Serialize};

/// One named numeric check: `value` compared against `bound`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value <= bound`.
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound,
            pass: value <= bound,
        }
    }

    /// Passes when `value >= bound`.
    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound,
            pass: value >= bound,
        }
    }

    /// Passes when `value > bound`.
    pub fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound,
            pass: value > bound,
        }
    }

    /// Records `|value − target|` against `tol`.
    pub fn near(name: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        Check::at_most(name, (value - target).abs(), tol)
    }

    /// A pass/fail fact with no natural magnitude.
    pub fn flag(name: impl Into<String>, pass: bool) -> Self {
        Check {
            name: name.into(),
            value: if pass { 1.0 } else { 0.0 },
            bound: 1.0,
            pass,
        }
    }
}

/// Machine-readable outcome of one verification suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub proposition: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<serde_json::Value>,
}

impl PropositionReport {
    pub fn new(proposition: impl Into<String>, checks: Vec<Check>, data: Option<serde_json::Value>) -> Self {
        let pass = !checks.is_empty() && checks.iter().all(|c| c.pass);
        PropositionReport {
            proposition: proposition.into(),
            pass,
            checks,
            data,
        }
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_never_passes() {
        assert!(!Check::at_most("x", f64::NAN, 1.0).pass);
        assert!(!Check::at_least("x", f64::NAN, 1.0).pass);
    }

    #[test]
    fn report_json_shape() {
        let r = PropositionReport::new("demo", vec![Check::near("e", 4.0, 4.0, 1e-9)], None);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["proposition"], "demo");
        assert_eq!(v["pass"], true);
        assert_eq!(v["checks"][0]["name"], "e");
        assert!(v.get("data").is_none());
        let empty = PropositionReport::new("none", vec![], None);
        assert!(!empty.pass);
    }
}
