use serde::Serialize;

/// A failed run. Configuration problems exit with 2, numerical ones with 3.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Config { key: Option<String>, message: String },
    Numeric(String),
}

#[derive(Serialize)]
struct ErrorDocument<'a> {
    status: &'static str,
    kind: &'static str,
    exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    key: Option<&'a str>,
    message: &'a str,
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config { .. } => 2,
            Failure::Numeric(_) => 3,
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json(&self) -> String {
        let doc = match self {
            Failure::Config { key, message } => ErrorDocument {
                status: "error",
                kind: "config",
                exit_code: self.exit_code(),
                key: key.as_deref(),
                message,
            },
            Failure::Numeric(message) => ErrorDocument {
                status: "error",
                kind: "numeric",
                exit_code: self.exit_code(),
                key: None,
                message,
            },
        };
        serde_json::to_string(&doc).expect("error document serializes")
    }
}

impl From<vjf_core::Error> for Failure {
    fn from(e: vjf_core::Error) -> Self {
        use vjf_core::Error as E;
        match e {
            E::Numeric(_) | E::NonFinite { .. } | E::Domain(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Config {
                key: None,
                message: e.to_string(),
            },
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config {
            key: None,
            message: format!("i/o error: {e}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_and_document() {
        let c = Failure::Config {
            key: Some("observation.n".into()),
            message: "bad".into(),
        };
        assert_eq!(c.exit_code(), 2);
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(v["key"], "observation.n");
        assert_eq!(v["kind"], "config");
        let n: Failure = vjf_core::Error::Numeric("singular".into()).into();
        assert_eq!(n.exit_code(), 3);
        assert!(!n.to_json().contains("\"key\""));
    }
}
