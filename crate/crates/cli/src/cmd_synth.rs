//! Dataset synthesis subcommand.

use crate::config::RunConfig;
use crate::lock::DirLock;
use anyhow::Result;
use drivegaze_core::synth::{generate, SynthConfig};

pub fn run(config: &RunConfig) -> Result<()> {
    let seed = config.seed()?;
    let root = config.dataset_root()?.clone();
    let _lock = DirLock::acquire(&root)?;
    let synth = SynthConfig {
        sequences: config.sequences,
        frames_per_sequence: config.frames_per_sequence,
        width: config.width,
        height: config.height,
    };
    let truths = generate(&synth, seed, &root)?;
    println!(
        "wrote {} sequences x {} frames ({}x{}) under {}",
        truths.len(),
        synth.frames_per_sequence,
        synth.width,
        synth.height,
        root.display()
    );
    for t in &truths {
        println!(
            "  {} landscape={} vanishing_point=({:.1},{:.1}) events={}",
            t.id,
            t.landscape.as_str(),
            t.vanishing_point.0,
            t.vanishing_point.1,
            t.event_ranges.len()
        );
    }
    Ok(())
}
