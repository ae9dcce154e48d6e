//! Closed-form parameter counts for every preset.

use avssl::config::{ModelConfig, PRESET_NAMES};
use avssl::nets::{backbone_params, count_params, reference_count, Component};

fn main() -> avssl::Result<()> {
    println!(
        "{:<10} {:>14} {:>14} {:>12} {:>10}",
        "preset", "audio route", "video route", "predictors", "reference"
    );
    for name in PRESET_NAMES {
        let cfg = ModelConfig::preset(name)?;
        let preds = count_params(
            &cfg,
            &[Component::VideoPredictor, Component::AudioPredictors],
        );
        let reference =
            reference_count(name).map_or("-".to_string(), |r| format!("{}M", r / 1_000_000));
        println!(
            "{name:<10} {:>14} {:>14} {preds:>12} {reference:>10}",
            backbone_params(&cfg, false),
            backbone_params(&cfg, true)
        );
    }
    Ok(())
}
