//! Placeholder.
#[derive(Debug)]
pub struct SolveResult;
