use cocon::block;
use cocon::checkpoint::{self, CheckpointMeta};
use cocon::lm::{self, LMConfig, LM_GROUP};
use cocon::tokenizer::{bpe_train, Vocab};
use cocon::trainer::{init_discriminator, TrainerConfig};
use cocon::Error;
use proptest::prelude::*;

fn config() -> LMConfig {
    LMConfig {
        n_layers: 2,
        n_alpha: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 270,
        max_seq_len: 32,
    }
}

fn full_store() -> cocon::tensor::ParameterStore {
    let cfg = config();
    let mut s = lm::init_params(&cfg, 1).unwrap();
    s.merge(block::init_params(&cfg, 2).unwrap()).unwrap();
    s.merge(init_discriminator(cfg.d_model, 4, 3, 3).unwrap()).unwrap();
    s.freeze_group(LM_GROUP);
    s
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut meta = CheckpointMeta::new(config());
    meta.trainer = Some(TrainerConfig::default());
    let store = full_store();
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    checkpoint::save(&first, &meta, &store).unwrap();
    let (meta2, store2) = checkpoint::load(&first).unwrap();
    checkpoint::save(&second, &meta2, &store2).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(meta2.lm, meta.lm);
    assert!(store2.is_frozen(LM_GROUP));
    for (path, p) in store.iter() {
        assert_eq!(p.value, store2.get(path).unwrap().value, "{path}");
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = checkpoint::to_bytes(&CheckpointMeta::new(config()), &full_store()).unwrap();
    assert!(checkpoint::from_bytes(&bytes).is_ok());
    for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());
    let mut wrong_magic = bytes;
    wrong_magic[0] ^= 0xff;
    assert!(checkpoint::from_bytes(&wrong_magic).is_err());
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(checkpoint::load(&dir.path().join("none")), Err(Error::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn byte_level_encoding_round_trips(text in "\\PC{0,40}") {
        let v = Vocab::bytes_only();
        prop_assert_eq!(v.decode(&v.encode(&text)), text);
    }

    #[test]
    fn learned_merges_round_trip(text in "[a-e ]{0,60}") {
        let corpus = ["abc abd abe", "cab cab dab", "a b c d e ee"];
        let v = bpe_train(corpus, 275).unwrap();
        prop_assert_eq!(v.decode(&v.encode(&text)), text.clone());
        prop_assert!(v.encode(&text).len() <= text.len());
        let reloaded = Vocab::from_text(&v.to_text()).unwrap();
        prop_assert_eq!(reloaded.encode(&text), v.encode(&text));
    }
}
