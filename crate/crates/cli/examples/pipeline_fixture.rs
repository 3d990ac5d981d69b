//! Regenerates the frozen preprocessing fixture used by the acceptance
//! suite. Only rerun this when the preprocessing chain changes on purpose.
//!
//! cargo run -p biaxial-cli --example pipeline_fixture -- crates/cli/tests/fixtures

use std::path::PathBuf;

use biaxial::dataset::{read_recording, write_recording};
use biaxial::signal::{preprocess, Outcome, PipelineConfig, RawRecording, STANDARD_ELECTRODES};
use biaxial::Rng;

const FS_IN: u32 = 200;
const SECONDS: usize = 10;

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/cli/tests/fixtures".into()));
    std::fs::create_dir_all(&dir).expect("fixture dir");
    let mut rng = Rng::new(2024);
    let n = FS_IN as usize * SECONDS;
    let channels = (0..STANDARD_ELECTRODES.len())
        .map(|c| {
            let f = 1.5 + 1.7 * c as f64;
            (0..n)
                .map(|i| {
                    let t = i as f64 / f64::from(FS_IN);
                    40.0 * (2.0 * std::f64::consts::PI * f * t).sin()
                        + 15.0 * (2.0 * std::f64::consts::PI * 0.2 * t).cos()
                        + 5.0 * rng.normal()
                        + c as f64
                })
                .collect()
        })
        .collect();
    let input = RawRecording {
        channels,
        fs: FS_IN,
        electrode_names: STANDARD_ELECTRODES.iter().map(|s| s.to_string()).collect(),
        label: Outcome::Good,
        group_id: "fixture".into(),
        patient_id: "fixture".into(),
        hour_index: 0,
    };
    let input_path = dir.join("pipeline_input.biax");
    write_recording(&input, &input_path).expect("write input");

    // Process what was stored, so the fixture is self-consistent at f32.
    let mut stored = read_recording(&input_path).expect("read input");
    stored.electrode_names = input.electrode_names.clone();
    let cfg = PipelineConfig {
        fs_out: 100,
        ..PipelineConfig::default()
    };
    let out = preprocess(&stored, &cfg).expect("preprocess");
    write_recording(&out, &dir.join("pipeline_output.biax")).expect("write output");
    println!("{} channels x {} samples at {} Hz", out.n_channels(), out.len(), out.fs);
}
