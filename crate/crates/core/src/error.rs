//! Crate-wide error type.

use thiserror::Error;

/// All failures surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}{}", fmt_ctx(.context))]
    Dim {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
        context: String,
    },

    /// A caller violated an operation's contract (empty input, bad id, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (non-divisible dims, bad hyperparameters, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite value detected while the numeric guard is enabled.
    #[error("non-finite value in {site}: {detail}")]
    NonFinite { site: String, detail: String },

    /// Malformed on-disk data.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn fmt_ctx(ctx: &str) -> String {
    if ctx.is_empty() {
        String::new()
    } else {
        format!(" ({ctx})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dim {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
            context: String::new(),
        }
    }

    pub fn dim_ctx(op: &'static str, left: &[usize], right: &[usize], context: String) -> Self {
        Error::Dim {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
            context,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dim_error_names_both_shapes() {
        let e = Error::dim("matmul", &[2, 3], &[4, 3]);
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"));
        assert!(msg.contains("[4, 3]"));
        assert!(msg.contains("matmul"));
    }

    #[test]
    fn dim_error_with_context_mentions_it() {
        let e = Error::dim_ctx("view_branch", &[4, 8], &[4, 9], "view=coronal".into());
        assert!(e.to_string().contains("view=coronal"));
    }
}
