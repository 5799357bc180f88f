//! Procedural paired portrait synthesis.

mod dataset;
mod face;
mod glasses;
mod raster;
mod render;
mod scene;
mod stylize;

pub use dataset::{
    assign_splits, config_hash, generate_real, generate_sample, list_real_images, read_sample, sample_seed, synth_dataset, write_sample,
    Manifest, ManifestEntry, Split, SynthConfig, MANIFEST_FILE,
};
pub use face::{make_face_proxy, make_face_proxy_with, FaceFeatures, FaceProxy, DEFAULT_CANDIDATE_PAIRS};
pub use glasses::{make_glasses, make_glasses_with, FrameShape, GlassesConfig, GlassesModel, Stroke};
pub use raster::{
    compute_shadow_map, compute_shadow_map_on, rasterize_frame, rasterize_frame_on, shadow_mask, shadow_occupancy, SHADOW_MASK_THRESHOLD,
};
pub use render::{
    check_sample_invariants, glasses_to_world, render_layers, render_sample, shade_face, RenderLayers, RenderSample, SampleMeta,
};
pub use scene::{default_blur_sigma, sample_scene, Camera, HeadGeometry, SceneConfig, SceneRanges, SurfaceMap};
pub use stylize::{stylize_real_domain, StylizeConfig};
