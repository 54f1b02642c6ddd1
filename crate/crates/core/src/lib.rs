pub mod bench;
pub mod grad;
pub mod io;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod parambudget;
pub mod params;
pub mod rng;
pub mod train;
pub mod verify;
