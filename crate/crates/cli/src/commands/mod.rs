pub mod eval;
pub mod flops;
pub mod gen;
pub mod order_variance;
pub mod params;
pub mod pretrain;
pub mod sweep;
pub mod train;
