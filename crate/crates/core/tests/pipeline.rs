//! End-to-end runs through generation, editing, persistence and metrics.

use anchorprop::metrics::{tem_con, ToyEmbedder};
use anchorprop::network::NetworkConfig;
use anchorprop::synth::{MotionKind, SyntheticClip};
use anchorprop::{edit_video, generate_clip, run_parallel, ClipSpec, EditedVideo, Mode, ToyEditNetwork};

fn small_net() -> ToyEditNetwork {
    ToyEditNetwork::new(NetworkConfig {
        grid_h: 8,
        grid_w: 8,
        dim: 16,
        num_heads: 2,
        levels: 1,
        steps: 2,
        ..NetworkConfig::default()
    })
    .unwrap()
}

fn small_clip(n_frames: usize) -> SyntheticClip {
    generate_clip(&ClipSpec {
        seed: 4,
        n_frames,
        grid_h: 8,
        grid_w: 8,
        dim: 16,
        image_size: 64,
        motion: MotionKind::SubTokenShift { dx: 0.5, dy: -0.25 },
        render_images: Some(16),
        ..ClipSpec::default()
    })
    .unwrap()
}

#[test]
fn clip_and_edit_survive_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = small_clip(5);
    clip.save(dir.path().join("clip")).unwrap();
    let loaded = SyntheticClip::load(dir.path().join("clip")).unwrap();
    assert_eq!(loaded, clip);

    let video = edit_video(&loaded.frames, &small_net(), Mode::Anchored, 3).unwrap();
    video.save(dir.path().join("edit")).unwrap();
    assert_eq!(EditedVideo::load(dir.path().join("edit")).unwrap(), video);
}

#[test]
fn anchored_edit_matches_across_entry_points() {
    let clip = small_clip(7);
    let net = small_net();
    let serial = edit_video(&clip.frames, &net, Mode::Anchored, 2).unwrap();
    let parallel = run_parallel(&clip.frames, &net, 2, 3).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.provenance.anchor_indices.len(), 2);
}

#[test]
fn edits_stay_finite_and_measurable() {
    let clip = small_clip(6);
    let net = small_net();
    for mode in [Mode::Independent, Mode::Anchored] {
        let video = edit_video(&clip.frames, &net, mode, 3).unwrap();
        assert_eq!(video.frames.len(), 6);
        assert!(video
            .frames
            .iter()
            .all(|f| f.tokens().as_slice().iter().all(|x| x.is_finite())));
        let tc = tem_con(&video.frames, &ToyEmbedder::default()).unwrap();
        assert!((-1.0..=1.0).contains(&tc));
    }
}
