//! Deterministic synthetic image-text data: symbolic scenes, a palette-exact
//! rasterizer, a caption grammar, and manifest tooling.

mod caption;
mod manifest;
mod render;
mod scene;

pub use caption::{caption_constraints, caption_scene, parse_caption, scene_constraints, VOCABULARY};
pub use manifest::{
    check_record, edit_chain_stats, filter_manifest, parse_manifest, parse_record, read_manifest,
    EditChainHistogram, FilterOutcome, FilterThresholds, ManifestRecord, RejectReason,
};
pub use render::{cell_margin, cell_rect, covers, render_scene, Image};
pub use scene::{
    gen_scene, Cell, Color, Object, ObjectSpec, Relation, SceneConstraints, SceneDescription,
    Shape, COLORS, SHAPES, WHITE,
};
