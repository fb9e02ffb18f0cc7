//! Synthetic driving scenes and partially labeled datasets.

pub mod dataset;
pub mod scene;

pub use dataset::{load_dataset, save_dataset, split_setting, DatasetSetting, PartialDataset, SettingKind};
pub use scene::{
    class_vocabulary, generate_scene, generate_scenes, rasterize_masks, scene_layout, Annotated, BoxAnn, ImageSample,
    Mask, Provenance, SceneLayout, SceneSpec, IGNORE_INDEX,
};
