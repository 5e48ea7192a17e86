use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use freqmix::data::{
    chain_parents, decode_binary, derive_modalities, encode_binary, load_any, load_binary, load_jsonl, normalize,
    parse_jsonl, record_offsets, synth_frequency, synth_generate, to_jsonl, write_binary, write_jsonl, DatasetManifest,
    SkeletonSequence, SplitKey, SKL_HEADER_BYTES,
};
use freqmix::frequency::dct_slice;
use freqmix::rng::Rng;
use freqmix::Error;

fn random_seq(rng: &mut Rng, f32_exact: bool) -> SkeletonSequence {
    let (j, c, f) = (1 + rng.below(6), 1 + rng.below(3), 1 + rng.below(9));
    let coords = (0..j * c * f)
        .map(|_| {
            let v = rng.normal() * 10f64.powi(rng.below(7) as i32 - 3);
            if f32_exact {
                f64::from(v as f32)
            } else {
                v
            }
        })
        .collect();
    let mut s = SkeletonSequence::new(j, c, f, coords, rng.below(60)).unwrap();
    s.subject = (rng.uniform() < 0.8).then(|| rng.below(40) as u32);
    s.view = (rng.uniform() < 0.8).then(|| rng.below(3) as u32);
    s
}

fn bits(seqs: &[SkeletonSequence]) -> Vec<u64> {
    seqs.iter().flat_map(|s| s.coords.iter().map(|v| v.to_bits())).collect()
}

#[test]
fn jsonl_round_trip_is_bitwise() {
    let mut rng = Rng::new(1);
    let seqs: Vec<_> = (0..100).map(|_| random_seq(&mut rng, false)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    write_jsonl(&path, &seqs).unwrap();
    let back = load_jsonl(&path).unwrap();
    assert_eq!(back, seqs);
    assert_eq!(bits(&back), bits(&seqs));
    assert_eq!(load_any(&path).unwrap(), seqs);
}

#[test]
fn jsonl_small_cases() {
    let p = Path::new("x.jsonl");
    assert!(parse_jsonl("", p).unwrap().is_empty());
    let one = parse_jsonl(r#"{"label": 0, "frames": [[[1.5, -2.0, 0.25]]]}"#, p).unwrap();
    assert_eq!((one[0].joints, one[0].channels, one[0].frames), (1, 3, 1));
    assert_eq!(one[0].coords, vec![1.5, -2.0, 0.25]);
    assert_eq!((one[0].subject, one[0].view), (None, None));
}

#[test]
fn jsonl_errors_carry_line_numbers() {
    let p = Path::new("bad.jsonl");
    let good = r#"{"label": 1, "subject": 2, "view": 0, "frames": [[[0, 0]], [[1, 1]]]}"#;
    match parse_jsonl(&format!("{good}\n{{\"label\": 1, \"frames\": [[[0, 0]]\n"), p) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let ragged = r#"{"label": 0, "frames": [[[0, 0], [1, 1]], [[0, 0]]]}"#;
    match parse_jsonl(&format!("{good}\n\n{ragged}"), p) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("joints"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn binary_round_trip_is_bitwise() {
    let mut rng = Rng::new(2);
    let seqs: Vec<_> = (0..100).map(|_| random_seq(&mut rng, true)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.skl");
    write_binary(&path, &seqs).unwrap();
    let back = load_binary(&path).unwrap();
    assert_eq!(back, seqs);
    assert_eq!(bits(&back), bits(&seqs));
    assert_eq!(load_any(&path).unwrap(), seqs);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(encode_binary(&back).unwrap(), bytes);
    assert_eq!(*record_offsets(&seqs).last().unwrap(), bytes.len());
}

#[test]
fn binary_layout_of_one_record() {
    let mut s = SkeletonSequence::new(1, 2, 1, vec![1.0, -0.5], 3).unwrap();
    s.subject = Some(7);
    let bytes = encode_binary(&[s]).unwrap();
    let mut want = b"SKL1".to_vec();
    want.extend(1u32.to_le_bytes());
    for v in [3u16, 7, u16::MAX, 1, 2] {
        want.extend(v.to_le_bytes());
    }
    want.extend(1u32.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-0.5f32).to_le_bytes());
    assert_eq!(bytes, want);
}

#[test]
fn empty_binary_file_is_a_bare_header() {
    let bytes = encode_binary(&[]).unwrap();
    assert_eq!(bytes.len(), SKL_HEADER_BYTES);
    assert_eq!(bytes.len(), 8);
    assert!(decode_binary(&bytes, Path::new("e.skl")).unwrap().is_empty());
}

#[test]
fn truncation_and_bad_magic_are_reported() {
    let mut rng = Rng::new(3);
    let seqs: Vec<_> = (0..3).map(|_| random_seq(&mut rng, true)).collect();
    let bytes = encode_binary(&seqs).unwrap();
    let cut = bytes.len() - 5;
    match decode_binary(&bytes[..cut], Path::new("t.skl")) {
        Err(Error::Truncated { expected, actual, .. }) => {
            assert_eq!(actual, cut as u64);
            assert_eq!(expected, bytes.len() as u64);
        }
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_binary(&bad, Path::new("m.skl")), Err(Error::BadMagic { .. })));
}

#[test]
fn constant_centered_sequence_normalizes_to_zeros() {
    let s = SkeletonSequence::new(3, 2, 5, vec![0.7; 30], 0).unwrap();
    let n = normalize(&s, 8).unwrap();
    assert!(n.degenerate);
    assert!(n.tensor.data().iter().all(|&v| v == 0.0));
}

#[test]
fn equal_frame_counts_do_not_resample() {
    let mut rng = Rng::new(4);
    let s = SkeletonSequence::new(3, 2, 5, (0..30).map(|_| rng.normal()).collect(), 0).unwrap();
    let n = normalize(&s, 5).unwrap();
    let centered: Vec<f64> = (0..3)
        .flat_map(|j| (0..2).flat_map(move |c| (0..5).map(move |f| (j, c, f))))
        .map(|(j, c, f)| s.at(j, c, f) - s.at(0, c, f))
        .collect();
    let rms: f64 =
        (0..5).map(|f| ((0..6).map(|r| centered[r * 5 + f].powi(2)).sum::<f64>() / 6.0).sqrt()).sum::<f64>() / 5.0;
    for (a, b) in n.tensor.data().iter().zip(&centered) {
        assert!((a - b / rms).abs() < 1e-12);
    }
}

#[test]
fn resampled_line_stays_on_the_line() {
    // Joint 1 moves along x(t) = 2 + 3t relative to a fixed root.
    let (f_raw, f_target) = (7, 19);
    let mut coords = vec![0.0; 2 * f_raw];
    for t in 0..f_raw {
        coords[f_raw + t] = 2.0 + 3.0 * t as f64;
    }
    let n = normalize(&SkeletonSequence::new(2, 1, f_raw, coords, 0).unwrap(), f_target).unwrap();
    let line: Vec<f64> = (0..f_target).map(|i| 2.0 + 3.0 * (i * (f_raw - 1)) as f64 / (f_target - 1) as f64).collect();
    // Per-frame RMS over the two rows (root row is zero).
    let rms = line.iter().map(|v| (v * v / 2.0).sqrt()).sum::<f64>() / f_target as f64;
    for (i, want) in line.iter().enumerate() {
        assert!((n.tensor.data()[f_target + i] - want / rms).abs() < 1e-12);
        assert_eq!(n.tensor.data()[i], 0.0);
    }
}

#[test]
fn normalized_root_sits_at_origin() {
    let seqs = synth_generate(4, 3, 25, 40, 5, 0.05).unwrap();
    for s in &seqs {
        let t = normalize(s, 64).unwrap().tensor;
        assert!(t.data()[..3 * 64].iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn constant_sequence_has_zero_motion() {
    let mut rng = Rng::new(6);
    let pose: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
    let f = 5;
    let coords = pose.iter().flat_map(|&v| std::iter::repeat_n(v, f)).collect();
    let m = derive_modalities(&SkeletonSequence::new(4, 3, f, coords, 0).unwrap(), &chain_parents(4)).unwrap();
    assert!(m.joint_motion.coords.iter().all(|&v| v == 0.0));
    assert!(m.bone_motion.coords.iter().all(|&v| v == 0.0));
}

#[test]
fn unit_spaced_chain_has_unit_bones() {
    let (j, f) = (6, 3);
    let mut coords = vec![0.0; j * 3 * f];
    for a in 0..j {
        for t in 0..f {
            coords[(a * 3 + 1) * f + t] = a as f64;
            coords[a * 3 * f + t] = 0.4 * t as f64;
        }
    }
    let m = derive_modalities(&SkeletonSequence::new(j, 3, f, coords, 0).unwrap(), &chain_parents(j)).unwrap();
    for a in 0..j {
        for t in 0..f {
            let b: Vec<f64> = (0..3).map(|c| m.bone.at(a, c, t)).collect();
            let want = if a == 0 { [0.0; 3] } else { [0.0, 1.0, 0.0] };
            assert_eq!(b, want);
        }
    }
    assert!(derive_modalities(&m.joint, &chain_parents(j - 1)).is_err());
}

#[test]
fn motion_matches_the_spectral_derivative() {
    // x(t) = Σ_k s_k φ_k(t), with φ_k the continuous cosine basis behind the
    // transform, sampled at integers. Motion x[t+1] − x[t] must equal the
    // basis differences weighted by the coefficients.
    let f = 24;
    let mut rng = Rng::new(7);
    let s: Vec<f64> = (0..f).map(|k| if k < 6 { rng.normal() } else { 0.0 }).collect();
    let phi = |k: usize, t: f64| {
        let c = if k == 0 { (1.0 / f as f64).sqrt() } else { (2.0 / f as f64).sqrt() };
        c * (PI * k as f64 * (t + 0.5) / f as f64).cos()
    };
    let dphi = |k: usize, t: f64| {
        let c = if k == 0 { 0.0 } else { (2.0 / f as f64).sqrt() };
        -c * PI * k as f64 / f as f64 * (PI * k as f64 * (t + 0.5) / f as f64).sin()
    };
    let x: Vec<f64> = (0..f).map(|t| (0..f).map(|k| s[k] * phi(k, t as f64)).sum()).collect();
    assert!(dct_slice(&x).unwrap().iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-12));
    let m = derive_modalities(&SkeletonSequence::new(1, 1, f, x, 0).unwrap(), &[None]).unwrap().joint_motion.coords;
    for t in 0..f - 1 {
        let exact: f64 = (0..f).map(|k| s[k] * (phi(k, t as f64 + 1.0) - phi(k, t as f64))).sum();
        assert!((m[t] - exact).abs() < 1e-12);
        // Midpoint derivative of a band-limited signal, second-order accurate.
        let mid: f64 = (0..f).map(|k| s[k] * dphi(k, t as f64 + 0.5)).sum();
        assert!((m[t] - mid).abs() < 0.02 * (1.0 + mid.abs()), "t = {t}: {} vs {mid}", m[t]);
    }
    assert_eq!(m[f - 1], 0.0);
}

#[test]
fn synthetic_classes_peak_at_their_frequency() {
    let (k, per, j, f) = (4, 20, 25, 64);
    let seqs = synth_generate(k, per, j, f, 7, 0.05).unwrap();
    for class in 0..k {
        let mut power = vec![0.0; f];
        for s in seqs.iter().filter(|s| s.label == class) {
            let x = normalize(s, f).unwrap().tensor;
            for row in x.data().chunks(f) {
                for (i, v) in dct_slice(row).unwrap().iter().enumerate() {
                    power[i] += v * v;
                }
            }
        }
        let peak = (1..f).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
        assert_eq!(peak, synth_frequency(class, k, f), "class {class}");
    }
    let ks: Vec<usize> = (0..k).map(|c| synth_frequency(c, k, f)).collect();
    assert!(ks[0] < ks[1] && ks[1] < f / 2 && ks[2] > f / 2 && ks[2] < ks[3]);
}

#[test]
fn synthetic_data_is_reproducible_and_balanced() {
    let a = synth_generate(5, 7, 6, 16, 42, 0.1).unwrap();
    let b = synth_generate(5, 7, 6, 16, 42, 0.1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synth_generate(5, 7, 6, 16, 43, 0.1).unwrap());
    for class in 0..5 {
        assert_eq!(a.iter().filter(|s| s.label == class).count(), 7);
    }
    // Without noise, a class at one phase is fully determined by its seed stream.
    let c = synth_generate(2, 3, 6, 16, 9, 0.0).unwrap();
    assert_eq!(c, synth_generate(2, 3, 6, 16, 9, 0.0).unwrap());
    assert!(synth_generate(1, 3, 6, 16, 9, 0.0).is_err());
}

#[test]
fn split_is_disjoint_by_key() {
    let seqs = synth_generate(4, 50, 5, 8, 7, 0.0).unwrap();
    let m = DatasetManifest::synth_default(&seqs, 4).unwrap();
    assert_eq!((m.train.len(), m.test.len()), (160, 40));
    let train: BTreeSet<usize> = m.train.iter().copied().collect();
    assert!(m.test.iter().all(|i| !train.contains(i)));
    let subj = |idx: &[usize]| idx.iter().map(|&i| seqs[i].subject.unwrap()).collect::<BTreeSet<_>>();
    assert!(subj(&m.train).is_disjoint(&subj(&m.test)));
    assert_eq!(subj(&m.test), BTreeSet::from([8, 9]));

    let v = DatasetManifest::build(&seqs, vec!["a".into(); 4], SplitKey::View, &[0]).unwrap();
    let views = |idx: &[usize]| idx.iter().map(|&i| seqs[i].view.unwrap()).collect::<BTreeSet<_>>();
    assert!(views(&v.train).is_disjoint(&views(&v.test)));
    assert!(DatasetManifest::build(&seqs, vec!["a".into(); 3], SplitKey::View, &[0]).is_err());
    assert_eq!(m.samples[1].offset, record_offsets(&seqs)[1]);
    assert_eq!(to_jsonl(&[]).unwrap(), "");
}
