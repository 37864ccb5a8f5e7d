pub mod archive;
pub mod augment;
pub mod image;
pub mod manifest;
pub mod synthetic;
