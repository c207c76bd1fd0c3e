//! Acceptance suite for the estimators, variances and simulation harness.
//! Everything lives in `tests/acceptance.rs`; run it with
//! `cargo test -p covadj-validation --test acceptance -- --nocapture` or as part of the workspace.
