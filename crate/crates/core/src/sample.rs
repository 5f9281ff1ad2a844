use alloc::vec::Vec;

/// One labeled example of a task: a flattened input patch and its target.
///
/// Both vectors have length `side * side` for the world that produced them,
/// inputs lie in [0, 1], and every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}
