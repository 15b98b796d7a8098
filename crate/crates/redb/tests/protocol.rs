use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use proptest::prelude::*;

use redb::io::{write_labels, write_manifest, write_points, FrameManifest, ManifestEntry};
use redb::proto::{decode_result, encode_result, parse_reply, serve, Ack, DetectorHandle, Handshake};
use redb::sim::{generate_frame, MockDetector, MockDetectorSpec, SimSpec};
use redb::Error;
use redb_core::{Box3D, InferenceResult, LabelSet};

fn arb_box(scored: bool) -> impl Strategy<Value = Box3D> {
    (
        prop::array::uniform3(-1e4..1e4f64),
        prop::array::uniform3(1e-3..1e2f64),
        -10.0..10.0f64,
        1u32..10,
        0.0..=1.0f64,
    )
        .prop_map(move |(c, d, yaw, class, s)| {
            let b = Box3D::new(c, d, yaw, class).unwrap();
            if scored {
                b.with_score(s).unwrap()
            } else {
                b
            }
        })
}

fn arb_result() -> impl Strategy<Value = InferenceResult> {
    (
        "[a-z0-9_]{1,12}",
        prop::collection::vec(arb_box(true), 0..8),
        prop::collection::vec(prop_oneof![arb_box(true), arb_box(false)], 0..16),
    )
        .prop_map(|(frame_id, postnms, prenms)| InferenceResult {
            frame_id,
            postnms,
            prenms,
        })
}

proptest! {
    #[test]
    fn infer_responses_round_trip_exactly(r in arb_result()) {
        let line = encode_result(&r);
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(decode_result(&line).unwrap(), r);
    }
}

#[test]
fn unknown_fields_are_ignored() {
    let line = r#"{"frame_id":"a","extra":[1,2],"postnms":[{"cx":1,"cy":2,"cz":0.5,"w":1.8,"l":4,"h":1.5,"yaw":0.1,"class":1,"score":0.9,"velocity":3}]}"#;
    let r = decode_result(line).unwrap();
    assert_eq!(r.postnms.len(), 1);
    assert_eq!(r.postnms[0].score, Some(0.9));
    let hs: Handshake = parse_reply(r#"{"proto":"redb/1","prenms":false,"train":true,"name":"x"}"#).unwrap();
    assert!(!hs.prenms && hs.train);
}

fn sim_frame(dir: &Path) -> (String, redb_core::PointCloud, PathBuf) {
    let spec = SimSpec::with_seed(2);
    let mut target = spec.target.clone();
    target.frames = 1;
    let f = generate_frame(&target, 0);
    let path = dir.join("frame.bin");
    write_points(&f.cloud, &path).unwrap();
    (f.frame_id, f.cloud, path)
}

fn served(spec: MockDetectorSpec, input: &str) -> Vec<String> {
    let mut det = MockDetector::new(spec).unwrap();
    let mut out = Vec::new();
    serve(&mut det, Cursor::new(input.as_bytes()), &mut out).unwrap();
    String::from_utf8(out).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn serve_answers_each_request_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (id, cloud, path) = sim_frame(dir.path());
    let spec = SimSpec::with_seed(2).mock;
    let req = serde_json::json!({"cmd": "infer", "frame_id": id, "points": path}).to_string();
    let input = format!("{req}\nnot json\n{{\"cmd\":\"fly\"}}\n\n{req}\n{{\"cmd\":\"shutdown\"}}\n{req}\n");
    let lines = served(spec.clone(), &input);
    assert_eq!(lines.len(), 6, "{lines:?}");
    assert_eq!(lines[0], r#"{"proto":"redb/1","prenms":true,"train":true}"#);
    let want = MockDetector::new(spec).unwrap().detect(&id, &cloud);
    assert_eq!(decode_result(&lines[1]).unwrap(), want);
    assert!(matches!(parse_reply::<Ack>(&lines[2]), Err(Error::Detector(m)) if m.starts_with("malformed request")));
    assert!(matches!(parse_reply::<Ack>(&lines[3]), Err(Error::Detector(_))));
    assert_eq!(lines[4], lines[1]);
    assert_eq!(lines[5], r#"{"ok":true}"#);
}

#[test]
fn serve_reports_missing_points_and_unsupported_train() {
    let spec = MockDetectorSpec {
        trainable: false,
        report_prenms: false,
        ..MockDetectorSpec::default()
    };
    let input = "{\"cmd\":\"infer\",\"frame_id\":\"a\",\"points\":\"/nonexistent/a.bin\"}\n{\"cmd\":\"train\",\"manifest\":\"/x.tsv\"}\n";
    let lines = served(spec, input);
    assert_eq!(lines[0], r#"{"proto":"redb/1","prenms":false,"train":false}"#);
    assert!(matches!(decode_result(&lines[1]), Err(Error::Detector(_))));
    assert!(matches!(parse_reply::<Ack>(&lines[2]), Err(Error::Unsupported(_))));
    assert_eq!(lines.len(), 3);
}

fn mock_endpoint(dir: &Path) -> DetectorHandle {
    let spec = dir.join("sim.spec");
    std::fs::write(&spec, "seed = 2\n").unwrap();
    let argv = vec![
        env!("CARGO_BIN_EXE_redb").to_string(),
        "mock-detector".to_string(),
        "--spec".to_string(),
        spec.display().to_string(),
    ];
    DetectorHandle::spawn(&argv, Duration::from_secs(30)).unwrap()
}

#[test]
fn subprocess_endpoint_matches_in_process_mock() {
    let dir = tempfile::tempdir().unwrap();
    let (id, cloud, path) = sim_frame(dir.path());
    let mut h = mock_endpoint(dir.path());
    assert!(h.capabilities().prenms && h.capabilities().train);

    let mut local = MockDetector::new(SimSpec::with_seed(2).mock).unwrap();
    let first = h.infer(&id, &cloud, Some(&path)).unwrap();
    assert_eq!(first, local.detect(&id, &cloud));
    // without a path the cloud goes through a scratch file
    assert_eq!(h.infer(&id, &cloud, None).unwrap(), first);
    // CDE scene ids are treated as source frames
    let scene = "cde-0-tgt_0000";
    assert_eq!(h.infer(scene, &cloud, None).unwrap(), local.detect(scene, &cloud));

    let labels = dir.path().join("labels.txt");
    write_labels(&LabelSet::new(id.clone(), first.postnms.clone()), &labels).unwrap();
    let manifest = FrameManifest {
        entries: vec![ManifestEntry {
            frame_id: id.clone(),
            points: path.clone(),
            labels: Some(labels),
        }],
    };
    let mpath = dir.path().join("manifest.tsv");
    write_manifest(&manifest, &mpath).unwrap();
    h.train(&mpath, &manifest).unwrap();
    local.set_trained_rounds(1);
    let after = h.infer(&id, &cloud, Some(&path)).unwrap();
    assert_eq!(after, local.detect(&id, &cloud));
    assert_ne!(after, first);

    assert!(matches!(h.train(&mpath, &FrameManifest::default()), Err(Error::Validation(_))));
    h.close().unwrap();
    assert!(!h.is_live());
    assert!(matches!(h.infer(&id, &cloud, None), Err(Error::HandleClosed)));
}

fn scripted(script: &str, timeout: Duration) -> redb::Result<DetectorHandle> {
    let argv = vec!["sh".to_string(), "-c".to_string(), script.to_string()];
    DetectorHandle::spawn(&argv, timeout)
}

const HELLO: &str = r#"echo '{"proto":"redb/1","prenms":true,"train":false}'"#;

#[test]
fn silent_endpoint_times_out_and_closes() {
    let mut h = scripted(&format!("{HELLO}; sleep 30"), Duration::from_millis(300)).unwrap();
    let cloud = redb_core::PointCloud::default();
    assert!(matches!(h.infer("a", &cloud, None), Err(Error::Timeout(_))));
    assert!(!h.is_live());
    assert!(matches!(h.infer("a", &cloud, None), Err(Error::HandleClosed)));
}

#[test]
fn exited_endpoint_is_detected() {
    let mut h = scripted(HELLO, Duration::from_secs(10)).unwrap();
    let r = h.infer("a", &redb_core::PointCloud::default(), None);
    assert!(matches!(r, Err(Error::EndpointExited)), "{r:?}");
    assert!(!h.is_live());
}

#[test]
fn handshake_is_checked() {
    let r = scripted(r#"echo '{"proto":"redb/9","prenms":true,"train":true}'"#, Duration::from_secs(10));
    assert!(matches!(r, Err(Error::Protocol(_))), "{r:?}");
    let r = scripted("echo hello", Duration::from_secs(10));
    assert!(matches!(r, Err(Error::Protocol(_))), "{r:?}");
}

#[test]
fn endpoint_errors_and_mismatched_replies() {
    let script = format!(
        r#"{HELLO}; read a; echo '{{"error":"model not loaded"}}'; read b; echo '{{"frame_id":"other","postnms":[]}}'; read c; echo '{{"frame_id":"a","postnms":[],"prenms":[{{"cx":0,"cy":0,"cz":0,"w":1,"l":1,"h":1,"yaw":0,"class":1}}]}}'; read d"#
    );
    let mut h = scripted(&script, Duration::from_secs(10)).unwrap();
    let cloud = redb_core::PointCloud::default();
    assert!(matches!(h.infer("a", &cloud, None), Err(Error::Detector(m)) if m == "model not loaded"));
    assert!(h.is_live());
    assert!(matches!(h.infer("a", &cloud, None), Err(Error::Protocol(_))));
    // pre-NMS boxes need no score
    let r = h.infer("a", &cloud, None).unwrap();
    assert_eq!(r.prenms.len(), 1);
    // the endpoint does not train
    let manifest = FrameManifest {
        entries: vec![ManifestEntry {
            frame_id: "a".into(),
            points: "a.bin".into(),
            labels: Some("a.txt".into()),
        }],
    };
    assert!(matches!(h.train(Path::new("m.tsv"), &manifest), Err(Error::Unsupported(_))));
}
