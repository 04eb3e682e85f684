pub mod devices;
pub mod estimation;
pub mod grid;
pub mod io;
pub mod kron;
pub mod linalg;
pub mod network;
pub mod powerflow;
pub mod vsa;
