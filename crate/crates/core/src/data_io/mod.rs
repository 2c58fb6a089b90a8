//! Image files, labeled folders, checkpoints and curve CSVs.

mod checkpoint;
mod curve_csv;
mod dataset;
mod image;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use curve_csv::{curve_from_csv, curve_to_csv, read_curve_csv, write_curve_csv, CURVE_HEADER};
pub use dataset::{load_image_folder, CropMode, ImageStore, LabeledDataset, Split};
pub use image::{decode_image, to_u8, write_png, write_pnm, ImageBatch, MIN_SIDE};
