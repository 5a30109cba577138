use transip::checkpoint::*;
use transip::model::{ModelConfig, TransIp};
use transip::train::{OptimizerState, TrainConfig};
use transip::Error;

fn sample() -> Checkpoint {
    let model = TransIp::new(ModelConfig::tiny(), 4).unwrap();
    let mut state = OptimizerState::new(model.params());
    state.step = 7;
    state.m[0].data_mut()[0] = 0.25;
    state.v[1].data_mut()[0] = -0.0;
    Checkpoint::from_model(&model, Some(&TrainConfig::default()), LoopState { step: 7, epoch: 2 }, Some(&state))
}

fn message(r: Result<Checkpoint, Error>) -> String {
    match r {
        Err(e @ Error::Checkpoint { .. }) => e.to_string(),
        other => panic!("expected a checkpoint error, got {:?}", other.map(|c| c.state)),
    }
}

#[test]
fn write_then_read_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tipc");
    let ckpt = sample();
    ckpt.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back.model, ckpt.model);
    assert_eq!(back.train, ckpt.train);
    assert_eq!(back.state, ckpt.state);
    assert_eq!(back.optimizer, ckpt.optimizer);
    for ((n1, a), (n2, b)) in ckpt.params.iter().zip(&back.params) {
        assert_eq!(n1, n2);
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()));
    }
    assert_eq!(back.to_model().unwrap(), ckpt.to_model().unwrap());
    assert_eq!(&std::fs::read(&path).unwrap()[..4], MAGIC);
}

#[test]
fn truncation_names_the_offset() {
    let bytes = sample().encode();
    for cut in [2, 10, 100, bytes.len() / 2, bytes.len() - 1] {
        let msg = message(Checkpoint::decode(&bytes[..cut], "t.tipc".as_ref()));
        assert!(msg.contains("truncated at offset"), "{msg}");
    }
}

#[test]
fn version_bump_is_rejected() {
    let mut bytes = sample().encode();
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let msg = message(Checkpoint::decode(&bytes, "v.tipc".as_ref()));
    assert!(msg.contains("unsupported format version 2"), "{msg}");
}

#[test]
fn corruption_and_bad_magic_are_detected() {
    let mut bytes = sample().encode();
    let last_value = bytes.len() - 40;
    bytes[last_value] ^= 1;
    assert!(message(Checkpoint::decode(&bytes, "d.tipc".as_ref())).contains("digest mismatch"));

    let mut bytes = sample().encode();
    bytes[0] = b'X';
    assert!(message(Checkpoint::decode(&bytes, "m.tipc".as_ref())).contains("magic"));

    let mut bytes = sample().encode();
    bytes.push(0);
    assert!(message(Checkpoint::decode(&bytes, "x.tipc".as_ref())).contains("trailing"));
}

#[test]
fn dimension_mismatch_names_both_shapes() {
    let ckpt = sample();
    let wider = ModelConfig { hidden_dim: 64, ..ModelConfig::tiny() };
    let err = ckpt.to_model_with(&wider).unwrap_err().to_string();
    assert!(err.contains("[119, 32]") && err.contains("[119, 16]"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(Checkpoint::read("/nonexistent/x.tipc"), Err(Error::Io { .. })));
}
