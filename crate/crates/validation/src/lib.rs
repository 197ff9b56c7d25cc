//! Holds the `acceptance` test target, which runs after the other crates'
//! tests so that its verdict lines close the workspace run.
