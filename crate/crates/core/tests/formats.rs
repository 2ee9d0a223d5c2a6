mod common;

use owl_core::{Checkpoint, OwlError, TokenCorpus};

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().unwrap())
}

#[test]
fn checkpoint_layout_decodes_by_hand() {
    let ckpt = common::random_model(common::tiny_config(), 71);
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[0..4], b"OWLC");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let header_len = le_u64(&bytes[8..16]) as usize;
    let payload_start = 16 + header_len;
    assert_eq!(payload_start % 64, 0);

    let header: serde_json::Value = serde_json::from_slice(&bytes[16..payload_start]).unwrap();
    assert_eq!(header["config"]["d_model"], 16);
    let tensors = header["tensors"].as_object().unwrap();
    assert_eq!(tensors.len(), ckpt.tensors().len());
    for (name, entry) in tensors {
        let offset = entry["offset"].as_u64().unwrap() as usize;
        let nbytes = entry["nbytes"].as_u64().unwrap() as usize;
        assert_eq!(offset % 64, 0, "{name}");
        let want = ckpt.tensor(name).unwrap();
        assert_eq!(nbytes, want.len() * 4);
        let at = payload_start + offset;
        let first = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        assert_eq!(first, want.data()[0], "{name}");
    }
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn checkpoint_rejects_damage() {
    let bytes = common::random_model(common::tiny_config(), 72).to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(OwlError::Truncated(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(OwlError::Truncated(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(OwlError::Format(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(OwlError::Format(_))));
    let mut header = bytes.clone();
    header[16] = b'!';
    assert!(matches!(Checkpoint::from_bytes(&header), Err(OwlError::Format(_))));
}

#[test]
fn checkpoint_rejects_non_finite_weights() {
    let ckpt = common::random_model(common::tiny_config(), 73);
    let mut bytes = ckpt.to_bytes().unwrap();
    let payload_start = 16 + le_u64(&bytes[8..16]) as usize;
    bytes[payload_start..payload_start + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(OwlError::NonFinite(_))));
}

#[test]
fn token_file_layout() {
    let corpus = TokenCorpus::new(300, vec![1, 299, 0]).unwrap();
    let bytes = corpus.to_bytes();
    assert_eq!(&bytes[0..4], b"OWLT");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 300);
    assert_eq!(le_u64(&bytes[12..20]), 3);
    assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 299);
    assert_eq!(bytes.len(), 32);

    assert!(matches!(TokenCorpus::from_bytes(&bytes[..30]), Err(OwlError::Truncated(_))));
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0, 0, 0, 0]);
    assert!(TokenCorpus::from_bytes(&extra).is_err());
    assert!(TokenCorpus::new(300, vec![300]).is_err());
}
