pub mod benchgen;
pub mod cli;
pub mod concolic;
pub mod coordinator;
pub mod dom;
pub mod fuzz;
pub mod icfg;
pub mod interp;
pub mod ir;
pub mod labels;
pub mod stats;
pub mod trim;
