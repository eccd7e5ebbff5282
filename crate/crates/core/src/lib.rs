pub mod env;
pub mod eval;
pub mod meta;
pub mod nn;
pub mod ppo;
pub mod rewards;
pub mod sim;
pub mod sti;
pub mod teleop;
pub mod trace;
pub mod train;
