pub mod oracles;
pub mod props;
