//! Orchestration for the `evidistill` binary: configuration, run directories
//! with manifests, and one function per pipeline command.

// Negated comparisons are how NaN is rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod io;
pub mod manifest;
pub mod pipeline;

pub use config::{EvalConfig, PipelineConfig};
pub use manifest::{RunManifest, Stage};
pub use pipeline::Pipeline;

/// Process exit status for an error: 2 for divergence or non-finite numerics,
/// 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<evidistill::Error>(),
            Some(evidistill::Error::Divergence { .. } | evidistill::Error::NonFinite(_))
        )
    });
    if numeric {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let div = anyhow::Error::new(evidistill::Error::Divergence { step: 3, loss: 10.0, limit: 5.0 }).context("distill");
        assert_eq!(exit_code(&div), 2);
        assert_eq!(exit_code(&anyhow::Error::new(evidistill::Error::NonFinite("x".into()))), 2);
        assert_eq!(exit_code(&anyhow::Error::new(evidistill::Error::input("bad"))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("missing file")), 1);
    }
}
