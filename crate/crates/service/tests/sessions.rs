use std::sync::Arc;

use congan::data::Dataset;
use congan::discriminator::DiscConfig;
use congan::eval::EchoPositive;
use congan::generator::GenConfig;
use congan::training::{TrainConfig, TrainedModel};
use congan::SemanticSpace;
use congan_service::wire::{CreateSessionRequest, ImageRef, WireImage};
use congan_service::{ModelEntry, Service, ServiceError, Session, SessionLog};

fn dataset() -> Dataset {
    Dataset::generate(40, 8, 3).unwrap()
}

fn tiny_model(id: &str, seed: u64) -> ModelEntry {
    let cfg = TrainConfig {
        generator: GenConfig::tiny(),
        discriminator: DiscConfig::tiny(),
        seed,
        ..TrainConfig::default()
    };
    ModelEntry::from_trained(id, TrainedModel::untrained(cfg, SemanticSpace::channel_mean()).unwrap())
}

fn echo_model() -> ModelEntry {
    ModelEntry {
        id: "echo".into(),
        kind: "stub".into(),
        iteration: 0,
        image_size: 8,
        space: SemanticSpace::channel_mean(),
        generator: Arc::new(EchoPositive),
    }
}

fn service(log_dir: Option<std::path::PathBuf>) -> Service {
    Service::new(vec![tiny_model("tiny", 1), tiny_model("other", 2), echo_model()], Some(dataset()), log_dir).unwrap()
}

fn create(s: &Service, ckpt: &str, seed: u64) -> String {
    s.create_session(CreateSessionRequest {
        checkpoint_id: ckpt.into(),
        n_seeds: 3,
        rng_seed: Some(seed),
    })
    .unwrap()
    .id
}

#[test]
fn fresh_session_has_no_outputs_and_seeded_noise() {
    let s = service(None);
    let a = s.get_state(&create(&s, "tiny", 9)).unwrap();
    let b = s.get_state(&create(&s, "tiny", 9)).unwrap();
    assert!(a.history.is_empty() && a.outputs.is_empty());
    assert_eq!(a.n_seeds, 3);
    assert_eq!(a.z, b.z);
    assert_ne!(a.id, b.id);
    let c = s.get_state(&create(&s, "tiny", 10)).unwrap();
    assert_ne!(a.z, c.z);
}

#[test]
fn create_rejects_bad_requests() {
    let s = service(None);
    let unknown = s.create_session(CreateSessionRequest {
        checkpoint_id: "nope".into(),
        n_seeds: 3,
        rng_seed: None,
    });
    assert!(matches!(unknown, Err(ServiceError::NotFound(_))));
    let zero = s.create_session(CreateSessionRequest {
        checkpoint_id: "tiny".into(),
        n_seeds: 0,
        rng_seed: None,
    });
    assert!(matches!(zero, Err(ServiceError::Unprocessable(_))));
}

#[test]
fn echo_stub_satisfies_single_constraint() {
    let s = service(None);
    let id = create(&s, "echo", 0);
    let st = s.add_constraint(&id, ImageRef::Dataset(1), ImageRef::Dataset(2)).unwrap();
    assert_eq!(st.outputs.len(), 3);
    assert!(st.outputs.iter().all(|o| o.satisfied == vec![true]));
}

#[test]
fn satisfaction_matches_offline_predicate() {
    let s = service(None);
    let ds = dataset();
    let space = SemanticSpace::channel_mean();
    let id = create(&s, "tiny", 4);
    let pairs = [(0, 5), (7, 3), (11, 12), (20, 2)];
    let mut st = None;
    for &(p, n) in &pairs {
        st = Some(s.add_constraint(&id, ImageRef::Dataset(p), ImageRef::Dataset(n)).unwrap());
    }
    let st = st.unwrap();
    assert_eq!(st.history.len(), pairs.len());
    for o in &st.outputs {
        let x = o.image.to_tensor().unwrap();
        assert_eq!(space.embed_value(&x).unwrap(), o.phi);
        let offline: Vec<bool> = pairs
            .iter()
            .map(|&(p, n)| {
                space
                    .satisfies_image(&x, &congan::Constraint::new(&ds.images[p], &ds.images[n]))
                    .unwrap()
            })
            .collect();
        assert_eq!(offline, o.satisfied);
    }
}

#[test]
fn undo_restores_earlier_states() {
    let s = service(None);
    let id = create(&s, "tiny", 5);
    let fresh = s.get_state(&id).unwrap();
    let after_a = s.add_constraint(&id, ImageRef::Dataset(1), ImageRef::Dataset(2)).unwrap();
    s.add_constraint(&id, ImageRef::Dataset(3), ImageRef::Dataset(4)).unwrap();
    assert_eq!(s.undo(&id).unwrap(), after_a);
    assert_eq!(s.undo(&id).unwrap(), fresh);
    assert!(matches!(s.undo(&id), Err(ServiceError::Conflict(_))));
    assert_eq!(s.get_state(&id).unwrap(), fresh);
    assert_eq!(s.add_constraint(&id, ImageRef::Dataset(1), ImageRef::Dataset(2)).unwrap(), after_a);
}

#[test]
fn previous_output_is_snapshotted() {
    let s = service(None);
    let id = create(&s, "tiny", 6);
    let early = s.add_constraint(&id, ImageRef::PreviousOutput(0), ImageRef::Dataset(2));
    assert!(matches!(early, Err(ServiceError::Conflict(_))));
    let first = s.add_constraint(&id, ImageRef::Dataset(8), ImageRef::Dataset(9)).unwrap();
    let out_of_range = s.add_constraint(&id, ImageRef::Dataset(8), ImageRef::PreviousOutput(3));
    assert!(matches!(out_of_range, Err(ServiceError::Unprocessable(_))));
    let st = s.add_constraint(&id, ImageRef::Dataset(10), ImageRef::PreviousOutput(1)).unwrap();
    match &st.history[1].negative {
        congan_service::wire::StoredRef::PreviousOutput { seed, image } => {
            assert_eq!(*seed, 1);
            assert_eq!(image, &first.outputs[1].image);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn refs_are_validated_without_side_effects() {
    let s = service(None);
    let id = create(&s, "tiny", 7);
    let before = s.get_state(&id).unwrap();
    let missing = s.add_constraint(&id, ImageRef::Dataset(4000), ImageRef::Dataset(1));
    assert!(matches!(missing, Err(ServiceError::Unprocessable(_))));
    let big = congan::Tensor::full(&[3, 16, 16], 0.0);
    let wrong = s.add_constraint(&id, ImageRef::Upload(WireImage::from_tensor(&big).unwrap()), ImageRef::Dataset(1));
    assert!(matches!(wrong, Err(ServiceError::Unprocessable(_))));
    let garbled = WireImage {
        width: 8,
        height: 8,
        rgb8: "***".into(),
    };
    assert!(matches!(
        s.add_constraint(&id, ImageRef::Upload(garbled), ImageRef::Dataset(1)),
        Err(ServiceError::Unprocessable(_))
    ));
    assert_eq!(s.get_state(&id).unwrap(), before);
    assert_eq!(s.session_log(&id).unwrap().events.len(), 0);
    let ok = congan::Tensor::full(&[3, 8, 8], 0.2);
    let st = s
        .add_constraint(&id, ImageRef::Upload(WireImage::from_tensor(&ok).unwrap()), ImageRef::Dataset(1))
        .unwrap();
    assert_eq!(st.history.len(), 1);
}

#[test]
fn replay_reproduces_outputs_and_log_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let s = service(Some(dir.path().to_path_buf()));
    let id = create(&s, "tiny", 11);
    s.add_constraint(&id, ImageRef::Dataset(1), ImageRef::Dataset(2)).unwrap();
    s.add_constraint(&id, ImageRef::Dataset(3), ImageRef::PreviousOutput(2)).unwrap();
    s.undo(&id).unwrap();
    s.add_constraint(&id, ImageRef::Dataset(5), ImageRef::PreviousOutput(0)).unwrap();
    let live = s.get_state(&id).unwrap();
    let path = s.log_path(&id).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let log = SessionLog::from_jsonl(&text).unwrap();
    assert_eq!(log.to_jsonl(), text);
    assert_eq!(log.events.len(), 4);

    let restored = service(Some(dir.path().to_path_buf()));
    assert_eq!(restored.restore_sessions().unwrap(), 1);
    assert_eq!(restored.get_state(&id).unwrap(), live);
    assert_eq!(restored.session_log(&id).unwrap().to_jsonl(), text);
    let next = create(&restored, "tiny", 0);
    assert_ne!(next, id);

    let other = Arc::new(tiny_model("other", 2));
    assert!(matches!(Session::replay(&log, other, Some(Arc::new(dataset()))), Err(ServiceError::Conflict(_))));
    assert!(SessionLog::from_jsonl("{\"format\":\"x\"}").is_err());
    assert!(SessionLog::from_jsonl(&text.replace("add_constraint", "add_thing")).is_err());
}

#[test]
fn sessions_are_isolated_under_concurrency() {
    let s = Arc::new(service(None));
    let ids: Vec<String> = (0..4).map(|i| create(&s, "tiny", 100 + i)).collect();
    let script = |k: usize| -> Vec<(usize, usize, bool)> {
        (0..6).map(|i| ((k * 7 + i * 3) % 40, (k * 11 + i * 5 + 1) % 40, i % 3 == 2)).collect()
    };
    std::thread::scope(|scope| {
        for (k, id) in ids.iter().enumerate() {
            let s = Arc::clone(&s);
            scope.spawn(move || {
                for (p, n, undo) in script(k) {
                    if undo {
                        s.undo(id).unwrap();
                    } else if p != n {
                        s.add_constraint(id, ImageRef::Dataset(p), ImageRef::Dataset(n)).unwrap();
                    }
                }
            });
        }
    });
    let solo = service(None);
    for (k, id) in ids.iter().enumerate() {
        let sid = create(&solo, "tiny", 100 + k as u64);
        for (p, n, undo) in script(k) {
            if undo {
                solo.undo(&sid).unwrap();
            } else if p != n {
                solo.add_constraint(&sid, ImageRef::Dataset(p), ImageRef::Dataset(n)).unwrap();
            }
        }
        let (a, b) = (s.get_state(id).unwrap(), solo.get_state(&sid).unwrap());
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(a.history, b.history);
    }
}

#[test]
fn image_pages_cover_dataset_once() {
    let s = service(None);
    let mut seen = Vec::new();
    let mut offset = 0;
    loop {
        let page = s.list_images(offset, 7).unwrap();
        assert_eq!(page.total, 40);
        if page.items.is_empty() {
            break;
        }
        seen.extend(page.items.iter().map(|i| i.id));
        offset += page.items.len();
    }
    assert_eq!(seen, (0..40).collect::<Vec<_>>());
    assert!(s.list_images(0, 0).is_err());
    assert!(matches!(s.get_image(40), Err(ServiceError::NotFound(_))));
    let ds = dataset();
    let entry = s.get_image(13).unwrap();
    assert_eq!(entry.image.to_tensor().unwrap(), congan::data::quantize(&ds.images[13]).unwrap());
    assert_eq!(entry.meta, ds.meta[13]);
}
