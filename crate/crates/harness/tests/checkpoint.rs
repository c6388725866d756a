use autograd::{StreamKey, Tensor};
use enresnet::{ArchSpec, EnResNetModel, Mode, NoiseMode, NoiseSpec};
use harness::checkpoint::*;
use harness::HarnessError;

fn model(blocks: usize, members: usize) -> EnResNetModel {
    let arch = ArchSpec {
        input: [3, 4, 4],
        channels: 4,
        blocks,
        classes: 3,
    };
    let noise = NoiseSpec {
        a: 0.1,
        mode: NoiseMode::Scaled,
        active_in_eval: true,
    };
    EnResNetModel::init(members, arch, noise, StreamKey(5)).unwrap()
}

fn ckpt(blocks: usize, members: usize) -> Checkpoint {
    Checkpoint {
        model: model(blocks, members),
        best_val_acc: 0.8125,
        epoch: 7,
    }
}

fn field_of(err: HarnessError) -> &'static str {
    match err {
        HarnessError::Checkpoint { field, .. } => field,
        other => panic!("expected a checkpoint error, got {other}"),
    }
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.enrn");
    let mut original = ckpt(2, 2);
    original.model.set_weights(vec![0.3, 0.7]).unwrap();
    save_checkpoint(&original, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, original);
    let x = Tensor::from_fn(&[5, 3, 4, 4], |i| ((i * 37) % 11) as f64 / 11.0);
    for mode in [Mode::Eval, Mode::Train] {
        let a = original.model.logits(&x, mode, StreamKey(3)).unwrap();
        let b = loaded.model.logits(&x, mode, StreamKey(3)).unwrap();
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(u, v)| u.to_bits() == v.to_bits());
        assert!(same, "{mode:?} logits differ after reload");
    }
}

#[test]
fn file_size_follows_the_layout() {
    for (blocks, members) in [(0, 1), (1, 2)] {
        let c = ckpt(blocks, members);
        let bytes = encode_checkpoint(&c).unwrap();
        let record_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let tensors = c.model.named_tensors().unwrap();
        let header = 4 + 4 + 4 + record_len + 4;
        let body: usize = tensors
            .iter()
            .map(|(name, t)| 2 + name.len() + 1 + 1 + 8 * t.shape().len() + 8 * t.numel())
            .sum();
        assert_eq!(
            bytes.len(),
            header + body,
            "blocks {blocks}, members {members}"
        );
    }
    // stem kernel, head weight and head bias
    assert_eq!(model(0, 1).named_tensors().unwrap().len(), 3);
}

#[test]
fn corrupted_headers_name_the_field() {
    let good = encode_checkpoint(&ckpt(1, 1)).unwrap();

    let mut b = good.clone();
    b[0] ^= 0xff;
    let err = decode_checkpoint(&b).unwrap_err();
    assert!(err.to_string().contains("bad magic"), "{err}");
    assert_eq!(field_of(err), "magic");

    let mut b = good.clone();
    b[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert_eq!(field_of(decode_checkpoint(&b).unwrap_err()), "version");

    let mut b = good.clone();
    b[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    assert_eq!(field_of(decode_checkpoint(&b).unwrap_err()), "record");

    assert_eq!(
        field_of(decode_checkpoint(&good[..2]).unwrap_err()),
        "magic"
    );
    assert_eq!(
        field_of(decode_checkpoint(&good[..6]).unwrap_err()),
        "version"
    );
    assert_eq!(
        field_of(decode_checkpoint(&good[..10]).unwrap_err()),
        "record length"
    );
    assert_eq!(
        field_of(decode_checkpoint(&good[..good.len() - 3]).unwrap_err()),
        "values"
    );

    let mut b = good.clone();
    b.push(0);
    assert_eq!(
        field_of(decode_checkpoint(&b).unwrap_err()),
        "trailing bytes"
    );
}

#[test]
fn bad_dtype_is_rejected() {
    let good = encode_checkpoint(&ckpt(0, 1)).unwrap();
    let record_len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
    let first = 12 + record_len + 4;
    let name_len = u16::from_le_bytes(good[first..first + 2].try_into().unwrap()) as usize;
    let mut b = good.clone();
    b[first + 2 + name_len] = 7;
    assert_eq!(field_of(decode_checkpoint(&b).unwrap_err()), "dtype");
}

#[test]
fn f32_payloads_load() {
    let c = ckpt(0, 1);
    let good = encode_checkpoint(&c).unwrap();
    let record_len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
    let mut out = good[..12 + record_len + 4].to_vec();
    for (name, t) in c.model.named_tensors().unwrap() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let loaded = decode_checkpoint(&out).unwrap();
    for ((_, a), (_, b)) in loaded
        .model
        .named_tensors()
        .unwrap()
        .iter()
        .zip(c.model.named_tensors().unwrap())
    {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| *x == *y as f32 as f64));
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/model.enrn")).unwrap_err();
    assert!(matches!(err, HarnessError::Io { .. }), "{err}");
}
