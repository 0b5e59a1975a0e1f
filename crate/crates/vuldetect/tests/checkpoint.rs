use vuldetect::checkpoint::{Checkpoint, MAGIC};
use vuldetect::Error;
use vuldetect_core::codeprep::{build_vocab, PrepOptions, RawSample};
use vuldetect_core::data::encode_samples;
use vuldetect_core::models::{LstmConfig, Model, ModelConfig, TransformerConfig};
use vuldetect_core::synth;

fn fixture_checkpoint(config: ModelConfig) -> (Checkpoint, Vec<RawSample>) {
    let samples = synth::generate(12, 3);
    let prep = PrepOptions::default();
    let corpus: Vec<Vec<String>> = samples.iter().map(|s| prep.token_texts(&s.code).unwrap()).collect();
    let vocab = build_vocab(corpus, 100, 1).unwrap();
    let mut config = config;
    config.set_vocab_size(vocab.len());
    let model = Model::new(config).unwrap();
    (Checkpoint::new(model, prep, vocab).unwrap(), samples)
}

fn configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig::Transformer(TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            seed: 5,
            ..TransformerConfig::teacher(0, 24)
        }),
        ModelConfig::Lstm(LstmConfig {
            d_embed: 6,
            d_hidden: 5,
            seed: 9,
            ..LstmConfig::baseline(0, 24)
        }),
    ]
}

#[test]
fn save_load_is_byte_identical_and_predicts_the_same() {
    let dir = tempfile::tempdir().unwrap();
    for (i, config) in configs().into_iter().enumerate() {
        let (ck, samples) = fixture_checkpoint(config);
        let path = dir.path().join(format!("m{i}.ckpt"));
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());

        let examples = encode_samples(&samples, &ck.prep, &ck.vocab, ck.model.max_len()).unwrap();
        let seqs: Vec<_> = examples.iter().map(|e| &e.seq).collect();
        let a = ck.model.logits(&seqs).unwrap();
        let b = loaded.model.logits(&seqs).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

fn field(err: Error) -> String {
    match err {
        Error::Checkpoint { field, .. } => field,
        other => panic!("expected a checkpoint error, got {other}"),
    }
}

#[test]
fn corruption_names_the_field() {
    let (ck, _) = fixture_checkpoint(configs().remove(0));
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(field(Checkpoint::from_bytes(&bad).unwrap_err()), "magic");

    let mut bad = bytes.clone();
    bad[4] = 99;
    assert_eq!(field(Checkpoint::from_bytes(&bad).unwrap_err()), "version");

    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut bad = bytes.clone();
    bad[16] = b'[';
    assert_eq!(field(Checkpoint::from_bytes(&bad).unwrap_err()), "config");

    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert_eq!(&field(err), ck.model.names().last().unwrap());

    let err = Checkpoint::from_bytes(&bytes[..16 + meta_len]).unwrap_err();
    assert_eq!(field(err), "parameters");

    assert_eq!(
        field(Checkpoint::from_bytes(&bytes[..10]).unwrap_err()),
        "config length"
    );
}

#[test]
fn every_truncation_is_rejected() {
    let (ck, _) = fixture_checkpoint(configs().remove(1));
    let bytes = ck.to_bytes().unwrap();
    for cut in (0..bytes.len()).step_by(7) {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint { .. })),
            "cut at {cut}"
        );
    }
}

#[test]
fn vocabulary_must_fit_the_model() {
    let (ck, _) = fixture_checkpoint(configs().remove(0));
    let small = vuldetect_core::codeprep::Vocabulary::from_tokens(
        vuldetect_core::codeprep::RESERVED_TOKENS
            .iter()
            .map(|t| t.to_string())
            .collect(),
    )
    .unwrap();
    assert!(matches!(
        Checkpoint::new(ck.model.clone(), ck.prep.clone(), small),
        Err(Error::Checkpoint { field, .. }) if field == "vocab"
    ));
}
