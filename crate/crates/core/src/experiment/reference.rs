//! Published parameter counts for full-size configurations, used to flag
//! comparable rows in count reports.

use crate::backbone::ModelConfig;
use crate::petl::{PetlSpec, Sites};

/// True when `cfg` has the full-size architecture, whatever its head width
/// and frame count.
pub fn is_swin_b(cfg: &ModelConfig) -> bool {
    let b = ModelConfig::swin_b(cfg.num_classes);
    cfg.dims == b.dims
        && cfg.blocks == b.blocks
        && cfg.heads == b.heads
        && cfg.patch == b.patch
        && cfg.window == b.window
        && cfg.ffn_ratio == b.ffn_ratio
        && cfg.input[1..] == b.input[1..]
}

/// Published trainable count (in the `0.00M` style) for the configuration,
/// if one exists.
pub fn published_count(cfg: &ModelConfig, spec: &PetlSpec) -> Option<&'static str> {
    if !is_swin_b(cfg) || !spec.attach.iter().all(|&a| a) {
        return None;
    }
    let classes = cfg.num_classes;
    let head = spec.tune_head;
    match (spec.label().as_str(), classes) {
        ("full", 174) => Some("87.82M"),
        ("full", 51) => Some("87.69M"),
        ("head_only", 174) => Some("0.18M"),
        ("head_only", 51) => Some("0.05M"),
        ("adapter_parallel+patt", _) => bapat(spec.d_bottle, spec.patt_sites, classes, head),
        ("prefix", 174) if spec.d_bottle == 128 && head => Some("6.57M"),
        ("prefix", 51) if spec.d_bottle == 128 && !head => Some("6.40M"),
        _ => None,
    }
}

fn bapat(d: usize, sites: Sites, classes: usize, head: bool) -> Option<&'static str> {
    if sites == Sites::QKV {
        return match (d, classes, head) {
            (128, 174, true) => Some("7.93M"),
            (128, 51, false) => Some("7.63M"),
            _ => None,
        };
    }
    match (d, classes, head) {
        (32, 174, true) => Some("2.91M"),
        (64, 174, true) => Some("4.07M"),
        (128, 174, true) => Some("6.38M"),
        (256, 174, true) => Some("11.00M"),
        (32, 51, false) => Some("2.74M"),
        (64, 51, false) => Some("3.89M"),
        (128, 51, false) => Some("6.20M"),
        (256, 51, false) => Some("10.83M"),
        (128, 51, true) => Some("6.25M"),
        _ => None,
    }
}
