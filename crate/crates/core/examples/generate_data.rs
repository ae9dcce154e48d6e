//! Generates a few synthetic clips, writes them to disk and reads them back.

use avssl::config::DataConfig;
use avssl::data::{generate_dataset, read_dataset, write_dataset, SyntheticSpec, FRAME_RATE};

fn main() -> avssl::Result<()> {
    let spec = SyntheticSpec::from(&DataConfig::default());
    let samples = generate_dataset(&spec, 0, 4);
    for s in &samples {
        println!(
            "{}  {:.2}s  {} frames  \"{}\"",
            s.sample_id,
            s.frames() as f64 / FRAME_RATE as f64,
            s.frames(),
            s.transcript.as_deref().unwrap_or("")
        );
    }
    let dir = std::env::temp_dir().join("avssl-example-data");
    write_dataset(&dir, &samples)?;
    let back = read_dataset(&dir)?;
    println!(
        "round trip through {}: {} samples",
        dir.display(),
        back.len()
    );
    Ok(())
}
