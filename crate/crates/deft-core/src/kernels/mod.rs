//! Dense numeric kernels shared by the graph ops. Everything here is plain
//! slices and explicit loop order so results are bitwise reproducible.

pub mod conv;
pub mod interp;
pub mod matmul;
pub mod pool;
