pub mod numerics;
pub mod geometry;
pub mod scheduler;
pub mod htft;
pub mod denoiser;
pub mod synthdata;
pub mod pipeline;
pub mod metrics;
