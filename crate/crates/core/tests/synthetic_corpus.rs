use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ice_localizer::corpus::{frame_file_name, generate_synthetic, parse_manifest, SynthConfig};
use ice_localizer::{DatasetManifest, PacingClass, ViewLabel};

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Centroid of the bright blob (pixels above 150, ignoring the overlay
/// strip at the top of the frame).
fn blob_centroid(path: &Path) -> (f64, f64) {
    let img = image::open(path).unwrap().into_luma8();
    let (w, h) = img.dimensions();
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for r in (h / 10)..h {
        for c in 0..w {
            if img.get_pixel(c, r)[0] > 150 {
                sr += r as f64;
                sc += c as f64;
                n += 1.0;
            }
        }
    }
    assert!(n > 0.0, "no blob in {}", path.display());
    (sr / n, sc / n)
}

fn circ_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Hand-written baseline: the direction of the blob's displacement between
/// the beat's first frame and its PR frame, classified by the nearest
/// per-(view, class) prototype direction learned on the first half of the
/// patients.
fn centroid_phase_oracle(m: &DatasetManifest) -> f64 {
    let mut samples = Vec::new();
    for (pi, p) in m.patients.iter().enumerate() {
        for c in &p.clips {
            let dir = m.frame_dir(c);
            for b in &c.beats {
                let s = blob_centroid(&dir.join(frame_file_name(b.start_frame)));
                let e = blob_centroid(&dir.join(frame_file_name(b.pr_frame)));
                let angle = (e.0 - s.0).atan2(e.1 - s.1).to_degrees();
                samples.push((pi, c.view, c.pacing, angle));
            }
        }
    }
    let half = m.patients.len() / 2;
    let mut protos: BTreeMap<(ViewLabel, PacingClass), (f64, f64)> = BTreeMap::new();
    for (pi, v, k, a) in &samples {
        if *pi < half {
            let e = protos.entry((*v, *k)).or_default();
            e.0 += a.to_radians().sin();
            e.1 += a.to_radians().cos();
        }
    }
    let (mut right, mut total) = (0, 0);
    for (pi, v, k, a) in &samples {
        if *pi >= half {
            let pred = PacingClass::ALL
                .into_iter()
                .min_by(|x, y| {
                    let px = protos[&(*v, *x)];
                    let py = protos[&(*v, *y)];
                    circ_dist(*a, px.0.atan2(px.1).to_degrees())
                        .total_cmp(&circ_dist(*a, py.0.atan2(py.1).to_degrees()))
                })
                .unwrap();
            right += (pred == *k) as usize;
            total += 1;
        }
    }
    right as f64 / total as f64
}

#[test]
fn generation_is_deterministic_and_follows_contract() {
    let cfg = SynthConfig::small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_synthetic(12, 7, &cfg, a.path()).unwrap();
    let mb = generate_synthetic(12, 7, &cfg, b.path()).unwrap();
    assert_eq!(ma.patients, mb.patients);
    assert!(read_tree(a.path()) == read_tree(b.path()), "equal seeds must give byte-identical corpora");

    for p in &ma.patients {
        assert_eq!(p.clips.len(), 12);
        for c in &p.clips {
            assert!((8..=14).contains(&c.beats.len()), "{} has {} beats", c.clip_id, c.beats.len());
            for beat in &c.beats {
                assert!((20..=45).contains(&beat.len()));
            }
        }
    }
    let back = parse_manifest(&a.path().join("manifest.json")).unwrap();
    assert_eq!(back.patients, ma.patients);
    assert!(ice_localizer::corpus::validate_manifest(&back).is_empty());

    let accuracy = centroid_phase_oracle(&ma);
    println!("centroid-phase baseline accuracy: {accuracy:.4}");
    assert!(accuracy >= 0.90, "synthetic corpus is not separable: {accuracy}");
}

#[test]
fn different_seeds_differ() {
    let cfg = SynthConfig::small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(1, 7, &cfg, a.path()).unwrap();
    generate_synthetic(1, 8, &cfg, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let frames_differ = ta.iter().any(|(k, v)| k.ends_with(".png") && tb.get(k).is_some_and(|w| w != v));
    assert!(frames_differ);
}

#[test]
fn default_size_frames() {
    let cfg = SynthConfig { beats_per_clip: (8, 8), frames_per_beat: (20, 20), ..SynthConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(1, 1, &cfg, dir.path()).unwrap();
    let clip = &m.patients[0].clips[0];
    let raw = ice_localizer::corpus::load_raw_clip(&m, clip).unwrap();
    assert_eq!((raw.height, raw.width), (708, 1016));
    assert_eq!(raw.frames, clip.frame_count);
}
