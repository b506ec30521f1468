pub mod numerics;
pub mod scene;
pub mod querygen;
pub mod celldb;
pub mod encoders;
pub mod coarse;
pub mod fine;
pub mod eval;
