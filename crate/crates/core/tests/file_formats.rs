use std::io::BufReader;

use walkpose_core::geometry::{CalibrationError, CameraRig};
use walkpose_core::skeleton::{
    read_sequence_2d, read_sequence_3d, write_sequence_2d, write_sequence_3d, SequenceError, SequenceHeader,
    SequenceSpace,
};
use walkpose_core::synthgait::default_rig;
use walkpose_core::{Skeleton2D, Skeleton3D, Vec2, Vec3};

fn field_of(err: CalibrationError) -> String {
    match err {
        CalibrationError::Field { field, .. } => field,
        other => panic!("expected a field error, got {other}"),
    }
}

fn edited(f: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut doc: serde_json::Value = serde_json::from_str(&default_rig().to_json()).unwrap();
    f(&mut doc);
    doc.to_string()
}

#[test]
fn calibration_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rig.json");
    let rig = default_rig();
    rig.save(&path).unwrap();
    let back = CameraRig::load(&path).unwrap();
    assert_eq!(back, rig);
}

#[test]
fn calibration_errors_name_the_field() {
    let bad_fx = edited(|d| d["posture"]["fx"] = (-1.0).into());
    assert_eq!(field_of(CameraRig::from_json(&bad_fx).unwrap_err()), "posture.fx");

    let missing = edited(|d| {
        d.as_object_mut().unwrap().remove("gait");
    });
    assert_eq!(field_of(CameraRig::from_json(&missing).unwrap_err()), "gait");

    let skewed = edited(|d| d["gait_to_posture"]["rotation"][0] = 2.0.into());
    assert!(field_of(CameraRig::from_json(&skewed).unwrap_err()).starts_with("gait_to_posture"));
}

#[test]
fn calibration_rejects_quaternions_and_distortion() {
    let quat = edited(|d| d["gait_to_posture"]["rotation"] = serde_json::json!([1.0, 0.0, 0.0, 0.0]));
    let err = CameraRig::from_json(&quat).unwrap_err();
    assert!(err.to_string().contains("quaternion"), "{err}");

    let quat_key = edited(|d| d["gait_to_posture"]["quaternion"] = serde_json::json!([1.0, 0.0, 0.0, 0.0]));
    assert_eq!(
        field_of(CameraRig::from_json(&quat_key).unwrap_err()),
        "gait_to_posture.quaternion"
    );

    let dist = edited(|d| d["gait"]["k1"] = 0.01.into());
    assert_eq!(field_of(CameraRig::from_json(&dist).unwrap_err()), "gait.k1");
}

#[test]
fn calibration_rejects_unreadable_input() {
    assert!(matches!(
        CameraRig::load("/nonexistent/rig.json"),
        Err(CalibrationError::Io(_))
    ));
    assert!(matches!(
        CameraRig::from_json("{ not json"),
        Err(CalibrationError::Json(_))
    ));
}

fn skeleton_3d(t: f64) -> Skeleton3D {
    let mut coords = [Vec3::zeros(); 17];
    for (k, c) in coords.iter_mut().enumerate() {
        *c = Vec3::new(0.1 * k as f64 + t, (k as f64 * 0.7).sin() / 3.0, 1.2 + 1e-7 * k as f64);
    }
    Skeleton3D::new(coords, t)
}

#[test]
fn sequence_3d_is_stable_after_one_write() {
    let frames: Vec<Skeleton3D> = (0..25).map(|i| skeleton_3d(i as f64 / 30.0)).collect();
    let header = SequenceHeader::new(SequenceSpace::ThreeD).with_meta("subject", 4);
    let mut buf = Vec::new();
    write_sequence_3d(&mut buf, &header, &frames).unwrap();
    let (h, back) = read_sequence_3d(BufReader::new(&buf[..])).unwrap();
    assert_eq!(h, header);
    for (a, b) in back.iter().zip(&frames) {
        for k in 0..17 {
            assert!((a.coords[k] - b.coords[k]).norm() <= 1e-8 * b.coords[k].norm());
        }
    }

    let mut again = Vec::new();
    write_sequence_3d(&mut again, &h, &back).unwrap();
    assert_eq!(again, buf);
    let (_, twice) = read_sequence_3d(BufReader::new(&again[..])).unwrap();
    assert_eq!(twice, back);
}

#[test]
fn sequence_2d_is_stable_after_one_write() {
    let mut s = Skeleton2D::zeros();
    for k in 0..17 {
        s.coords[k] = Vec2::new(3.25 * k as f64, 100.0 + k as f64 / 7.0);
        s.confidence[k] = 0.5 + k as f64 / 40.0;
        s.depth_at_kp[k] = 1.0 + k as f64 * 0.01;
    }
    s.timestamp = 0.1;
    let header = SequenceHeader::new(SequenceSpace::TwoD {
        width: 128,
        height: 224,
    });
    let mut buf = Vec::new();
    write_sequence_2d(&mut buf, &header, &[s, s]).unwrap();
    let (h, back) = read_sequence_2d(BufReader::new(&buf[..])).unwrap();
    assert_eq!(h, header);
    assert_eq!(back.len(), 2);
    assert!((back[0].coords[16] - s.coords[16]).norm() < 1e-6);

    let mut again = Vec::new();
    write_sequence_2d(&mut again, &h, &back).unwrap();
    assert_eq!(again, buf);
    let (_, twice) = read_sequence_2d(BufReader::new(&again[..])).unwrap();
    assert_eq!(twice, back);
}

#[test]
fn sequence_reader_reports_line_and_space() {
    let header = SequenceHeader::new(SequenceSpace::ThreeD);
    let mut buf = Vec::new();
    write_sequence_3d(&mut buf, &header, &[skeleton_3d(0.0)]).unwrap();
    let mut text = String::from_utf8(buf.clone()).unwrap();
    text.push_str("0.5,1,2\n");
    match read_sequence_3d(BufReader::new(text.as_bytes())) {
        Err(SequenceError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(
        read_sequence_2d(BufReader::new(&buf[..])),
        Err(SequenceError::WrongSpace { .. })
    ));
}
