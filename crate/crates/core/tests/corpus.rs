use std::collections::BTreeSet;

use ctxsteer::corpus::{
    load_images, load_samples, save_images, synth_corpus, synth_images, CorpusError, PrefixComponent, PrefixSpec,
    SampleCounts, SampleSet, Setup,
};
use ctxsteer::metrics::ObjectAnnotation;
use ctxsteer::model::{ModelConfig, Transformer};
use ctxsteer::tokenizer::ToyTokenizer;

fn small() -> SampleCounts {
    SampleCounts { cf: 14, a: 9, b: 9 }
}

#[test]
fn synthesis_is_seeded() {
    let a = synth_corpus(11, small()).unwrap();
    assert_eq!(a, synth_corpus(11, small()).unwrap());
    assert_ne!(a.content_hash(), synth_corpus(12, small()).unwrap().content_hash());
    assert_eq!((a.counterfactual.len(), a.sym_a.len(), a.sym_b.len()), (14, 9, 9));
    assert!(a.counterfactual.iter().all(|s| s.setup == Setup::Counterfactual));
    assert!(a.concepts().len() >= 5);

    let defaults = synth_corpus(3, SampleCounts::default()).unwrap();
    assert_eq!(defaults.len(), 161);
}

#[test]
fn ids_and_mirrors() {
    let set = synth_corpus(2, small()).unwrap();
    let ids: BTreeSet<&str> = set.iter().map(|s| s.sample_id.as_str()).collect();
    assert_eq!(ids.len(), set.len());
    assert!(set.counterfactual.iter().all(|s| s.sample_id.starts_with("cf-")));
    for (a, b) in set.sym_a.iter().zip(&set.sym_b) {
        assert!(a.sample_id.starts_with("sa-") && b.sample_id.starts_with("sb-"));
        assert_eq!(
            (a.y_plus.as_str(), a.y_minus.as_str()),
            (b.y_minus.as_str(), b.y_plus.as_str())
        );
        assert_eq!(a.concept, b.concept);
    }
}

#[test]
fn file_round_trip() {
    let tok = ToyTokenizer::standard();
    let set = synth_corpus(4, small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    set.save(&path).unwrap();
    let back = load_samples(&path, &tok).unwrap();
    assert_eq!(back, set);
    assert_eq!(back.content_hash(), set.content_hash());

    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.insert(2, "{not json");
    assert!(matches!(
        SampleSet::parse(&lines.join("\n"), &tok),
        Err(CorpusError::ParseError { .. })
    ));
    let header_swapped = text.replacen("ctxsteer-corpus", "something-else", 1);
    assert!(matches!(
        SampleSet::parse(&header_swapped, &tok),
        Err(CorpusError::FormatMismatch { .. })
    ));
}

#[test]
fn validation_rejects_broken_sets() {
    let tok = ToyTokenizer::standard();
    let good = synth_corpus(5, small()).unwrap();

    let mut dup = good.clone();
    dup.counterfactual[1].sample_id = dup.counterfactual[0].sample_id.clone();
    assert!(matches!(dup.validate(&tok), Err(CorpusError::DuplicateId(_))));

    let mut unmatched = good.clone();
    unmatched.sym_b.pop();
    assert!(matches!(unmatched.validate(&tok), Err(CorpusError::MirrorViolation(_))));

    let mut swapped = good.clone();
    let b = &mut swapped.sym_b[0];
    std::mem::swap(&mut b.y_plus, &mut b.y_minus);
    assert!(matches!(swapped.validate(&tok), Err(CorpusError::MirrorViolation(_))));

    let mut same = good.clone();
    same.counterfactual[0].y_minus = same.counterfactual[0].y_plus.clone();
    assert!(matches!(same.validate(&tok), Err(CorpusError::InvalidSample { .. })));

    let mut unknown = good.clone();
    unknown.counterfactual[0].y_plus = "zyzzyva".into();
    assert!(matches!(
        unknown.validate(&tok),
        Err(CorpusError::UntokenizableAnswer(_))
    ));

    assert!(matches!(
        synth_corpus(1, SampleCounts { cf: 3, a: 4, b: 5 }),
        Err(CorpusError::MirrorCountMismatch { a: 4, b: 5 })
    ));
    assert!(matches!(
        synth_corpus(1, SampleCounts { cf: 0, a: 4, b: 4 }),
        Err(CorpusError::CountsTooSmall)
    ));
}

#[test]
fn prefixes_materialize_deterministically() {
    let tok = ToyTokenizer::standard();
    let model = Transformer::<f32>::new(ModelConfig::default()).unwrap();
    let set = synth_corpus(6, small()).unwrap();
    for s in set.iter().take(5) {
        let a = s.prefix.materialize(&model, &tok).unwrap();
        let b = s.prefix.materialize(&model, &tok).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows(), s.prefix.rows());
    }
    let bad = PrefixSpec::Generator {
        objects: vec![PrefixComponent {
            object: "zyzzyva".into(),
            k: 1,
        }],
        noise_scale: 0.0,
        seed: 0,
    };
    assert!(matches!(
        bad.materialize(&model, &tok),
        Err(CorpusError::UnknownObject(_))
    ));
    let narrow = PrefixSpec::Inline(vec![vec![0.0; 3]]);
    assert!(matches!(narrow.materialize(&model, &tok), Err(CorpusError::Model(_))));
}

#[test]
fn images_round_trip_and_annotate() {
    let images = synth_images(8, "eval", 20);
    assert_eq!(images, synth_images(8, "eval", 20));
    assert!(images.iter().all(|im| (1..=3).contains(&im.objects.len())));
    assert_eq!(images[3].image_id, "eval-0003");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("images.jsonl");
    save_images(&images, &path).unwrap();
    assert_eq!(load_images(&path).unwrap(), images);

    let ann = ObjectAnnotation::from_images(&images).unwrap();
    for im in &images {
        let gt = ann.ground_truth(&im.image_id).unwrap();
        assert_eq!(gt.len(), im.objects.len());
        assert!(im.objects.iter().all(|o| ann.canonical(o) == Some(o.as_str())));
    }
}
