use awb_core::network::{ema_update, Backbone, Checkpoint, DualNetworks, ModelConfig, NetRole, CHECKPOINT_MAGIC};
use awb_core::params::ParamRole;
use awb_core::registry::Registries;
use awb_core::{AwbError, CheckpointError};
use awb_tensor::{RngStream, Tensor};

fn small(attention: &str) -> ModelConfig {
    let mut cfg = ModelConfig { channels: vec![4, 8, 8, 16], input_height: 32, input_width: 16, embed_dim: 8, num_classes: 5, ..Default::default() };
    cfg.awb.attention = attention.into();
    cfg.awb.attention_options.reduction = 4;
    cfg
}

fn backbone(seed: u64) -> Backbone<f64> {
    Backbone::new(&small("icbam"), &Registries::default(), &mut RngStream::new(seed, 0), &RngStream::new(seed, 1)).unwrap()
}

#[test]
fn ema_follows_the_affine_recursion() {
    let student = backbone(1);
    let start = backbone(2);
    for m in [0.0, 0.5, 0.9, 0.999] {
        let mut teacher = start.clone();
        for step in 1..=50 {
            ema_update(&mut teacher, &student, m).unwrap();
            let decay = f64::powi(m, step);
            for ((t, s), t0) in teacher.store.entries().iter().zip(student.store.entries()).zip(start.store.entries()) {
                match t.role {
                    ParamRole::Buffer => assert_eq!(t.value, s.value),
                    ParamRole::Weight => {
                        for ((&a, &b), &c) in t.value.data().iter().zip(s.value.data()).zip(t0.value.data()) {
                            let closed = b + decay * (c - b);
                            assert!((a - closed).abs() < 1e-12, "m {m}, step {step}: {a} vs {closed}");
                        }
                    }
                }
            }
        }
    }
    // The gap to the student shrinks by exactly the momentum per step.
    let mut t = start.clone();
    let gap = |t: &Backbone<f64>| t.store.entries()[0].value.max_abs_diff(&student.store.entries()[0].value).unwrap();
    let g0 = gap(&t);
    ema_update(&mut t, &student, 0.9).unwrap();
    assert!((gap(&t) - 0.9 * g0).abs() < 1e-12);
}

#[test]
fn ema_scalar_examples() {
    let mut teacher = backbone(3);
    let mut student = teacher.clone();
    let id = teacher.store.find("embed.weight").unwrap();
    let shape = teacher.store.get(id).shape().to_vec();
    teacher.store.set(id, Tensor::ones(&shape));
    student.store.set(id, Tensor::zeros(&shape));
    ema_update(&mut teacher, &student, 0.9).unwrap();
    assert!(teacher.store.get(id).data().iter().all(|&v| (v - 0.9).abs() < 1e-15));

    let fresh = backbone(4);
    ema_update(&mut teacher, &fresh, 0.0).unwrap();
    for (a, b) in teacher.store.entries().iter().zip(fresh.store.entries()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert!(ema_update(&mut teacher, &fresh, 1.0).is_err());
    let other = Backbone::new(&small("nonlocal"), &Registries::default(), &mut RngStream::new(0, 0), &RngStream::new(0, 1)).unwrap();
    assert!(ema_update(&mut teacher, &other, 0.5).is_err());
}

fn dual(seed: u64) -> DualNetworks<f32> {
    DualNetworks::new(&small("nonlocal"), &Registries::default(), seed).unwrap()
}

fn checkpoint_of(nets: &DualNetworks<f32>) -> Checkpoint {
    nets.to_checkpoint(vec![("seed".into(), "3".into())], vec![("epoch".into(), "7".into())])
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut nets = dual(3);
    // Advance the wave streams so their positions are non-trivial.
    for r in NetRole::ALL {
        for s in nets.get_mut(r).arch.slots.iter_mut() {
            s.rng.next_u64();
        }
    }
    let first = dir.path().join("a.ckpt");
    checkpoint_of(&nets).save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    let second = dir.path().join("b.ckpt");
    loaded.save(&second).unwrap();
    let bytes = std::fs::read(&first).unwrap();
    assert_eq!(bytes, std::fs::read(&second).unwrap());
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert_eq!(loaded.meta("epoch"), Some("7"));

    let mut restored = dual(99);
    restored.restore(&loaded).unwrap();
    for r in NetRole::ALL {
        let (a, b) = (nets.get(r), restored.get(r));
        for (x, y) in a.store.entries().iter().zip(b.store.entries()) {
            assert_eq!(x.value, y.value, "{}", x.name);
        }
        for (x, y) in a.arch.slots.iter().zip(&b.arch.slots) {
            assert_eq!(x.rng.state(), y.rng.state());
        }
    }
    assert_eq!(checkpoint_of(&restored).to_bytes().unwrap(), bytes);
}

#[test]
fn corruption_is_detected() {
    let bytes = checkpoint_of(&dual(5)).to_bytes().unwrap();
    let mut rng = RngStream::new(0, 0);
    for _ in 0..50 {
        let mut bad = bytes.clone();
        // Any byte of the payload, which ends right before the checksum.
        let payload_len = bad.len() - 8;
        let at = payload_len - 1 - rng.uniform_int(0, payload_len / 2);
        bad[at] ^= 1 << rng.uniform_int(0, 7);
        match Checkpoint::from_bytes(&bad) {
            Err(AwbError::Checkpoint(CheckpointError::DigestMismatch { .. })) => {}
            other => panic!("byte {at}: expected a digest failure, got {other:?}"),
        }
    }
}

#[test]
fn manifest_corruption_is_detected() {
    let bytes = checkpoint_of(&dual(5)).to_bytes().unwrap();
    let manifest_end = 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    for at in 8..manifest_end {
        let mut bad = bytes.clone();
        bad[at] ^= 0x04;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(AwbError::Checkpoint(_))), "byte {at}");
    }
}

#[test]
fn distinct_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.ckpt");
    std::fs::write(&empty, b"").unwrap();
    assert!(matches!(Checkpoint::load(&empty), Err(AwbError::Checkpoint(CheckpointError::Truncated(_)))));

    let bytes = checkpoint_of(&dual(6)).to_bytes().unwrap();
    let mut wrong = bytes.clone();
    wrong[7] = b'9';
    assert!(matches!(Checkpoint::from_bytes(&wrong), Err(AwbError::Checkpoint(CheckpointError::VersionMismatch(_)))));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(AwbError::Checkpoint(CheckpointError::Truncated(_)))
    ));
    assert!(matches!(Checkpoint::load(&dir.path().join("missing.ckpt")), Err(AwbError::Io { .. })));
}

#[test]
fn restore_rejects_a_different_architecture() {
    let ck = checkpoint_of(&dual(7));
    let mut other = DualNetworks::<f32>::new(&small("icbam"), &Registries::default(), 7).unwrap();
    assert!(other.restore(&ck).is_err());
}

#[test]
fn matching_restore_keeps_new_attention() {
    let plain = DualNetworks::<f32>::new(&small("none"), &Registries::default(), 8).unwrap();
    let ck = checkpoint_of(&plain);
    let mut awb = DualNetworks::<f32>::new(&small("icbam"), &Registries::default(), 9).unwrap();
    let attention_before: Vec<_> = awb.net_a.store.entries().iter().filter(|e| e.name.starts_with("awb")).cloned().collect();
    let kept = awb.restore_matching(&ck).unwrap();
    assert_eq!(kept, 4 * attention_before.len());
    for e in awb.net_a.store.entries() {
        if let Some(p) = plain.net_a.store.find(&e.name) {
            assert_eq!(e.value, *plain.net_a.store.get(p), "{}", e.name);
        }
    }
    for b in &attention_before {
        let id = awb.net_a.store.find(&b.name).unwrap();
        assert_eq!(*awb.net_a.store.get(id), b.value);
    }
}
