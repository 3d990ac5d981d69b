use biaxial::signal::{
    bipolar_convert, minmax_channel, minmax_rescale, preprocess, segment, Outcome, PipelineConfig,
    RawRecording, DOUBLE_BANANA, STANDARD_ELECTRODES,
};
use proptest::prelude::*;

fn recording(channels: Vec<Vec<f64>>, names: Vec<String>, fs: u32) -> RawRecording {
    RawRecording {
        channels,
        fs,
        electrode_names: names,
        label: Outcome::Poor,
        group_id: "g".into(),
        patient_id: "p".into(),
        hour_index: 3,
    }
}

proptest! {
    #[test]
    fn minmax_lands_in_unit_interval(ch in prop::collection::vec(-1e3f64..1e3, 2..200)) {
        let out = minmax_channel(&ch);
        prop_assert_eq!(out.len(), ch.len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            prop_assert!(out.iter().any(|&v| v == 0.0));
            prop_assert!(out.iter().any(|&v| v == 1.0));
        } else {
            prop_assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn segments_partition_the_prefix(len in 0usize..2000, channels in 1usize..4, minutes in 1usize..3) {
        let fs = 5;
        let chans: Vec<Vec<f64>> = (0..channels)
            .map(|c| (0..len).map(|i| (c * 10_000 + i) as f64).collect())
            .collect();
        let names = (0..channels).map(|i| format!("e{i}")).collect();
        let rec = recording(chans.clone(), names, fs);
        let segs = segment(&rec, minutes);
        let seg_len = minutes * fs as usize * 60;
        prop_assert_eq!(segs.len(), len / seg_len);
        for (k, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.segment_index, k);
            prop_assert_eq!(s.hour_index, 3);
            prop_assert_eq!(s.label, Outcome::Poor);
            for c in 0..channels {
                prop_assert_eq!(s.channel(c), &chans[c][k * seg_len..(k + 1) * seg_len]);
            }
        }
    }
}

#[test]
fn rescale_before_bipolar_is_not_bipolar_before_rescale() {
    // a spans [0, 10], b spans [0, 2]: rescaling first equalizes them.
    let names = vec!["a".to_string(), "b".to_string()];
    let rec = recording(
        vec![vec![0.0, 5.0, 10.0], vec![0.0, 2.0, 1.0]],
        names,
        1,
    );
    let montage = vec![("a".to_string(), "b".to_string())];
    let first = bipolar_convert(&minmax_rescale(&rec), &montage).unwrap();
    let second = minmax_rescale(&bipolar_convert(&rec, &montage).unwrap());
    assert_eq!(first.channels[0], vec![0.0, -0.5, 0.5]);
    assert_eq!(second.channels[0], vec![0.0, 3.0 / 9.0, 1.0]);
}

#[test]
fn full_chain_maps_nineteen_electrodes_to_eighteen_channels() {
    let fs = 200;
    let n = fs as usize * 20;
    let chans: Vec<Vec<f64>> = (0..19)
        .map(|c| {
            (0..n)
                .map(|i| {
                    let t = i as f64 / f64::from(fs);
                    (2.0 * std::f64::consts::PI * (2.0 + c as f64) * t).sin() * (1.0 + c as f64)
                })
                .collect()
        })
        .collect();
    let names = STANDARD_ELECTRODES.iter().map(|s| s.to_string()).collect();
    let rec = recording(chans, names, fs);
    let cfg = PipelineConfig {
        fs_out: 100,
        ..PipelineConfig::default()
    };
    let out = preprocess(&rec, &cfg).unwrap();
    assert_eq!(out.n_channels(), 18);
    assert_eq!(out.len(), n / 2);
    assert_eq!(out.fs, 100);
    for (name, (a, b)) in out.electrode_names.iter().zip(DOUBLE_BANANA) {
        assert_eq!(name, &format!("{a}-{b}"));
    }
    // Bipolar differences of [0, 1]-rescaled channels lie in [-1, 1].
    assert!(out.channels.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn missing_electrode_is_named() {
    let rec = recording(vec![vec![0.0; 4]], vec!["Fp1".into()], 1);
    let err = bipolar_convert(&rec, &[("Fp1".into(), "Cz".into())]).unwrap_err();
    assert!(err.to_string().contains("Cz"), "{err}");
}
