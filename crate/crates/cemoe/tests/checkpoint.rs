use cemoe::checkpoint::{load, read_checkpoint, save, write_checkpoint, MAGIC};
use cemoe::CliError;
use cemoe_core::model::{Mixing, ModelConfig, ModelParams};
use cemoe_core::moe_layer::ExpertMode;
use cemoe_core::router::MoeConfig;

fn cfg(mixing: Mixing) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        hidden_dim: 6,
        n_layers: 2,
        seq_len: 5,
        moe: MoeConfig::new(4, 3, 1, 6, 7).unwrap(),
        mixing,
    }
}

#[test]
fn roundtrip_preserves_every_value_and_the_logits() {
    for mixing in [Mixing::Attention, Mixing::MeanPool] {
        let p = ModelParams::<f64>::init(cfg(mixing), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&p, &path).unwrap();
        let q = load(&path).unwrap();
        assert_eq!(p, q);
        let tokens = [1, 4, 9, 0, 12];
        assert_eq!(
            p.logits(&tokens, 1, ExpertMode::Compressed).unwrap(),
            q.logits(&tokens, 1, ExpertMode::Compressed).unwrap()
        );
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let p = ModelParams::<f64>::init(cfg(Mixing::Attention), 1).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&p, &mut bytes).unwrap();
    assert_eq!(&bytes[..8], MAGIC);

    let is_validation = |b: &[u8]| matches!(read_checkpoint(&mut &b[..]), Err(CliError::Validation(_)));
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    assert!(is_validation(&bad_magic));

    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(is_validation(&bad_version));

    assert!(is_validation(&bytes[..bytes.len() - 8]));
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(is_validation(&long));

    // Header describing a different layout than the stored config builds.
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
    let swapped = header.replace("\"head\"", "\"haed\"");
    assert_eq!(swapped.len(), header.len());
    let mut renamed = bytes.clone();
    renamed[16..16 + len].copy_from_slice(swapped.as_bytes());
    assert!(is_validation(&renamed));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load(&dir.path().join("absent.bin")), Err(CliError::Io { .. })));
}
