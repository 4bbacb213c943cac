pub mod assistant;
pub mod cbir;
pub mod error;
pub mod ingest;
pub mod lru;
pub mod pyramid;
pub mod raster;
pub mod store;
pub mod synth;
pub mod trace;

pub use error::{Error, ErrorCode, Result};
pub use pyramid::{LevelSpec, Region, SlideMetadata, TileAddress, TileCodec, Viewport};
