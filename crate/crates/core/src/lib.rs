pub mod attention;
pub mod balance;
pub mod error;
pub mod harness;
pub mod imbalance;
pub mod losses;
pub mod model;
