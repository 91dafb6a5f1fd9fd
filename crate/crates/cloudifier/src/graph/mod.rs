//! Network building blocks and the two named variants.

mod blocks;
mod config;
mod network;

pub use blocks::{
    build_ds_res_block, build_inc_res_block, build_readout, build_upsample_branch,
    inc_res_column_maps, upsample_kernel_size, ConvBnRelu, DsResBlock, IncResBlock, InitRng,
    Readout, UpsampleBranch,
};
pub use config::{BlockKind, BlockSpec, NetworkConfig};
pub use network::{build_network, round_up, Network};

#[cfg(test)]
pub(crate) use blocks::StateMut;
