//! File formats: Middlebury `.flo` flow fields, binary PPM images, named
//! tensor checkpoints, and the on-disk dataset layout.

pub mod checkpoint;
pub mod dataset;
pub mod flo;
pub mod ppm;
