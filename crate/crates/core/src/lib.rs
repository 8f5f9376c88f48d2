pub mod command;
pub mod crypto;
pub mod experiments;
pub mod identity;
pub mod schedule;
pub mod timelock;
pub mod token;
pub mod netsim;
pub mod observer;
