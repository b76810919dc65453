use std::path::Path;

use lowres_tts::acoustic::AMConfig;
use lowres_tts::features::AudioConfig;
use lowres_tts::frontend::{build_vocab, TagMode, Vocabulary};
use lowres_tts::toycorpus::{gen_toycorpus, ToyCorpusSpec};
use lowres_tts::transfer::{
    finetune, load_checkpoint, save_checkpoint, train_average, Conditioning, FinetuneOptions, ModelKind, Stage,
    TrainPlan, TrainSetup,
};
use lowres_tts::vocoder::VocoderConfig;

fn corpora(root: &Path) -> Vocabulary {
    let a = gen_toycorpus(
        &ToyCorpusSpec {
            n_utts: 4,
            seed: 3,
            id_prefix: "a".into(),
            ..Default::default()
        },
        &root.join("a"),
    )
    .unwrap();
    let b = gen_toycorpus(
        &ToyCorpusSpec {
            n_utts: 3,
            seed: 4,
            shdia_fraction: 1.0,
            id_prefix: "b".into(),
            ..Default::default()
        },
        &root.join("b"),
    )
    .unwrap();
    build_vocab(&[a, b].concat(), TagMode::Tagged).unwrap()
}

fn plan(root: &Path, names: &[&str]) -> TrainPlan {
    TrainPlan {
        stage: Stage::Average,
        corpora: names.iter().map(|n| root.join(n).join("manifest.jsonl")).collect(),
        steps: 3,
        learning_rate: Some(1e-3),
        seed: 11,
        init_from: None,
        batch_size: 2,
        languages: None,
    }
}

fn acoustic_setup(vocab: &Vocabulary) -> TrainSetup {
    TrainSetup::Acoustic {
        config: AMConfig::tiny(0, 80),
        vocab: vocab.clone(),
        tag_mode: TagMode::Tagged,
        audio: AudioConfig::default(),
    }
}

fn vocoder_setup() -> TrainSetup {
    TrainSetup::Vocoder {
        config: VocoderConfig {
            conditioning_channels: 80,
            ..VocoderConfig::tiny()
        },
        conditioning: Conditioning::GroundTruth,
        audio: AudioConfig::default(),
        window: 400,
    }
}

#[test]
fn average_training_ignores_corpus_order() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = corpora(dir.path());
    for setup in [acoustic_setup(&vocab), vocoder_setup()] {
        let ab = train_average(&plan(dir.path(), &["a", "b"]), &setup).unwrap();
        let ba = train_average(&plan(dir.path(), &["b", "a"]), &setup).unwrap();
        assert_eq!(ab.checkpoint.params, ba.checkpoint.params);
        assert_eq!(ab.losses, ba.losses);
    }
}

#[test]
fn zero_learning_rate_finetune_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = corpora(dir.path());
    for (kind, setup) in [
        (ModelKind::Acoustic, acoustic_setup(&vocab)),
        (ModelKind::Vocoder, vocoder_setup()),
    ] {
        let avg = train_average(&plan(dir.path(), &["a"]), &setup).unwrap();
        let ck = dir.path().join("avg.ckpt");
        save_checkpoint(&avg.checkpoint, &ck).unwrap();
        let ft = TrainPlan {
            stage: Stage::Finetune,
            learning_rate: Some(0.0),
            init_from: Some(ck.clone()),
            ..plan(dir.path(), &["b"])
        };
        let opts = FinetuneOptions {
            window: 400,
            ..Default::default()
        };
        let out = finetune(&ft, kind, &opts).unwrap();
        assert_eq!(out.losses.len(), 3);
        assert_eq!(out.checkpoint.params, load_checkpoint(&ck).unwrap().params);
    }
}
