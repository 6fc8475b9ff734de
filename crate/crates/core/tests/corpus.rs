use carpe_core::corpus::*;
use carpe_core::CarpeError;
use proptest::prelude::*;

fn corpus() -> Corpus {
    Corpus::new().unwrap()
}

fn obj(shape: Shape, color: Color, row: usize, col: usize) -> SceneObject {
    SceneObject {
        shape,
        color,
        row,
        col,
        size: Size::Large,
    }
}

fn bits(t: &carpe_numerics::Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn template_draws_are_uniform() {
    let c = corpus();
    let mut rng = derive_rng(11, 0);
    let mut counts = [0usize; 20];
    let mut closed = 0;
    for _ in 0..20_000 {
        let (idx, mode) = c.sample_template(&mut rng);
        counts[idx] += 1;
        closed += usize::from(mode == TemplateMode::Closed);
    }
    for (i, n) in counts.iter().enumerate() {
        let f = *n as f64 / 20_000.0;
        assert!((0.04..=0.06).contains(&f), "template {i} frequency {f}");
    }
    let share = closed as f64 / 20_000.0;
    assert!((share - 0.5).abs() < 0.02, "closed share {share}");
}

#[test]
fn closed_prompts_list_every_label_once() {
    let c = corpus();
    let mut rng = derive_rng(2, 0);
    for idx in OPEN_TEMPLATES..OPEN_TEMPLATES + CLOSED_TEMPLATES {
        let p = c.classification_prompt(idx, &mut rng);
        for l in Label::all() {
            assert_eq!(p.matches(&l.text()).count(), 1, "{l:?} in {p:?}");
        }
    }
}

#[test]
fn open_prompts_carry_no_label_list() {
    let c = corpus();
    let mut rng = derive_rng(2, 0);
    for idx in 0..OPEN_TEMPLATES {
        let p = c.classification_prompt(idx, &mut rng);
        assert!(!p.contains(','), "{p:?}");
        for l in Label::all() {
            assert!(!p.contains(&l.text()), "{p:?}");
        }
    }
}

/// Painted pixels of a lone object, translated so the bounding box starts at the origin.
fn footprint(shape: Shape, size: Size, seed: u64) -> std::collections::BTreeSet<(usize, usize)> {
    let spec = SceneSpec {
        objects: vec![SceneObject { size, ..obj(shape, Color::Red, 1, 1) }],
        background: 0.0,
    };
    let img = render(&spec, seed).unwrap();
    let px: Vec<(usize, usize)> = (0..IMAGE_SIZE * IMAGE_SIZE)
        .filter(|&i| img.data()[i] > 0.0)
        .map(|i| (i / IMAGE_SIZE, i % IMAGE_SIZE))
        .collect();
    let (y0, x0) = (px.iter().map(|p| p.0).min().unwrap(), px.iter().map(|p| p.1).min().unwrap());
    px.into_iter().map(|(y, x)| (y - y0, x - x0)).collect()
}

#[test]
fn distinct_shapes_never_render_alike() {
    let mut seen = Vec::new();
    for shape in Shape::ALL {
        for size in [Size::Small, Size::Large] {
            for seed in 0..12 {
                seen.push((shape, size, footprint(shape, size, seed)));
            }
        }
    }
    for (i, a) in seen.iter().enumerate() {
        for b in &seen[i + 1..] {
            if a.0 != b.0 {
                let diff = a.2.symmetric_difference(&b.2).count();
                assert!(diff >= 8, "{:?}/{:?} vs {:?}/{:?} differ in {diff} pixels", a.0, a.1, b.0, b.1);
            }
        }
    }
}

#[test]
fn counting_two_circles() {
    let c = corpus();
    let spec = SceneSpec {
        objects: vec![
            obj(Shape::Circle, Color::Red, 0, 0),
            obj(Shape::Circle, Color::Blue, 2, 3),
        ],
        background: 0.4,
    };
    assert_eq!(answer_for(&c.bank, &spec, Question::Count(Shape::Circle)), "2");
    assert_eq!(answer_for(&c.bank, &spec, Question::Count(Shape::Cross)), "0");
}

#[test]
fn left_of_by_column() {
    let c = corpus();
    let circle = obj(Shape::Circle, Color::Green, 1, 0);
    let square = obj(Shape::Square, Color::Red, 2, 3);
    let spec = SceneSpec {
        objects: vec![circle, square],
        background: 0.4,
    };
    let q = Question::LeftOf(circle.label(), square.label());
    assert_eq!(answer_for(&c.bank, &spec, q), "yes");
    let q = Question::LeftOf(square.label(), circle.label());
    assert_eq!(answer_for(&c.bank, &spec, q), "no");
}

/// Answers re-derived from the scene by an independent reading of the question.
fn oracle(spec: &SceneSpec, q: Question) -> String {
    match q {
        Question::Count(shape) => {
            let mut n = 0;
            for o in &spec.objects {
                if o.shape == shape {
                    n += 1;
                }
            }
            n.to_string()
        }
        Question::LeftOf(a, b) => {
            let mut ca = None;
            let mut cb = None;
            for o in &spec.objects {
                if o.color == a.color && o.shape == a.shape {
                    ca = Some(o.col);
                }
                if o.color == b.color && o.shape == b.shape {
                    cb = Some(o.col);
                }
            }
            if ca.unwrap() < cb.unwrap() { "yes".into() } else { "no".into() }
        }
        Question::ColorOf(shape) => {
            let hits: Vec<_> = spec.objects.iter().filter(|o| o.shape == shape).collect();
            assert_eq!(hits.len(), 1, "color query must name a unique shape");
            hits[0].color.name().into()
        }
        Question::Classify(l) => format!("{} {}", l.color.name(), l.shape.name()),
        Question::Caption(l) => format!("this is a {} {}", l.color.name(), l.shape.name()),
    }
}

#[test]
fn reasoning_answers_match_oracle() {
    let c = corpus();
    let mut rng = derive_rng(5, 5);
    let mut kinds = [0usize; 3];
    for i in 0..1000 {
        let s = c.gen_reasoning_sample(&mut rng, i, Split::EvalReasoning).unwrap();
        assert_eq!(s.task_kind, TaskKind::Reasoning);
        assert!((1..=MAX_OBJECTS).contains(&s.spec.objects.len()));
        s.spec.validate().unwrap();
        assert_eq!(c.vocab.detokenize(&s.answer), oracle(&s.spec, s.question));
        kinds[match s.question {
            Question::Count(_) => 0,
            Question::LeftOf(..) => 1,
            _ => 2,
        }] += 1;
    }
    assert!(kinds.iter().all(|&k| k > 200), "{kinds:?}");
}

#[test]
fn every_split_answer_is_recomputable() {
    let c = corpus();
    for split in [Split::Train, Split::EvalId, Split::EvalOod, Split::EvalReasoning, Split::Caption] {
        for s in c.samples(split, 3, 300, Mixture::default()).unwrap() {
            assert!(!s.answer.is_empty());
            assert_eq!(c.vocab.detokenize(&s.answer), oracle(&s.spec, s.question), "{split:?}");
            if let Question::Classify(l) = s.question {
                assert_eq!(s.spec.objects.len(), 1);
                assert_eq!(s.spec.objects[0].label(), l);
            }
        }
    }
}

#[test]
fn ood_labels_only_in_ood_split() {
    let c = corpus();
    for split in [Split::Train, Split::EvalId, Split::EvalReasoning, Split::Caption, Split::VisionPretrain] {
        for s in c.samples(split, 9, 2000, Mixture::new(1, 1).unwrap()).unwrap() {
            assert!(s.spec.objects.iter().all(|o| !o.label().is_ood()), "{split:?} sample {}", s.id);
        }
    }
    for s in c.samples(Split::EvalOod, 9, 200, Mixture::default()).unwrap() {
        assert!(s.spec.objects.iter().all(|o| o.label().is_ood()));
    }
    for i in 0..300 {
        let t = c.text_qa_sample(9, i).unwrap();
        // Closed-world label lists name every class; the described scene never does.
        let text = c.vocab.detokenize(&t.prompt);
        let scene = text.split('.').next().unwrap();
        assert!(scene.starts_with("Scene:"));
        let answer = c.vocab.detokenize(&t.answer);
        for l in OOD_LABELS {
            assert!(!scene.contains(&l.text()) && !answer.contains(&l.text()), "{text:?}");
        }
    }
}

#[test]
fn mixture_one_to_seven() {
    let m = Mixture::default();
    let n = (0..8000).filter(|&i| m.kind_at(0, i) == TaskKind::Classification).count();
    assert!((960..=1040).contains(&n), "{n}");
    let n = (0..10_000).filter(|&i| m.kind_at(4, i) == TaskKind::Classification).count();
    assert!((n as f64 / 10_000.0 - 0.125).abs() <= 0.005);
}

#[test]
fn mixture_one_to_zero_is_classification_only() {
    let m = Mixture::new(1, 0).unwrap();
    assert!((0..500).all(|i| m.kind_at(1, i) == TaskKind::Classification));
    let c = corpus();
    for s in c.samples(Split::Train, 1, 50, m).unwrap() {
        assert_eq!(s.task_kind, TaskKind::Classification);
    }
}

#[test]
fn mixture_one_to_one() {
    let m = Mixture::new(1, 1).unwrap();
    let n = (0..10_000).filter(|&i| m.kind_at(8, i) == TaskKind::Classification).count();
    assert!((4900..=5100).contains(&n), "{n}");
}

#[test]
fn mixture_rejects_non_positive_total() {
    assert!(matches!(Mixture::new(0, 0), Err(CarpeError::Config(_))));
    assert!(matches!(Mixture::new(-1, 7), Err(CarpeError::Config(_))));
    assert!(matches!(Mixture::new(1, -2), Err(CarpeError::Config(_))));
}

#[test]
fn tokenize_round_trip() {
    let c = corpus();
    let ids = c.vocab.tokenize("red square").unwrap();
    assert_eq!(ids, vec![c.vocab.id("red").unwrap(), c.vocab.id("square").unwrap()]);
    assert_eq!(c.vocab.detokenize(&ids), "red square");
    assert!(c.vocab.tokenize("").unwrap().is_empty());
    assert_eq!(c.vocab.detokenize(&[]), "");
    assert!(matches!(c.vocab.tokenize("red banana"), Err(CarpeError::Tokenize(w)) if w == "banana"));
}

#[test]
fn whole_template_bank_round_trips() {
    let c = corpus();
    let mut rng = derive_rng(0, 1);
    let mut texts = Vec::new();
    for i in 0..c.bank.classification_count() {
        texts.push(c.classification_prompt(i, &mut rng));
    }
    for l in Label::all() {
        texts.push(c.bank.caption_answer.replace("{label}", &l.text()));
        texts.push(l.text());
    }
    for s in Shape::ALL {
        texts.push(c.bank.count.replace("{shapes}", s.plural()));
        texts.push(c.bank.color.replace("{shape}", s.name()));
    }
    texts.push(c.bank.caption_prompt.clone());
    for s in c.samples(Split::Train, 0, 400, Mixture::new(1, 1).unwrap()).unwrap() {
        texts.push(s.prompt_text.clone());
        texts.push(c.vocab.detokenize(&c.text_variant(&s).unwrap().prompt));
    }
    for t in &texts {
        let ids = c.vocab.tokenize(t).unwrap();
        assert_eq!(&c.vocab.detokenize(&ids), t);
    }
}

#[test]
fn vocab_is_a_bijection_with_disjoint_specials() {
    let c = corpus();
    assert!(c.vocab.len() <= 256);
    for id in 0..c.vocab.len() {
        let w = c.vocab.word(id).unwrap();
        assert_eq!(c.vocab.id(w), Some(id));
    }
    for special in [PAD, BOS, EOS, IMG, CTX] {
        assert!(Vocab::is_special(special));
    }
    let words = c.vocab.tokenize("Describe the image.").unwrap();
    assert!(words.iter().all(|&w| !Vocab::is_special(w)));
}

#[test]
fn generation_is_reproducible() {
    let c = corpus();
    let a = c.samples(Split::Train, 42, 64, Mixture::default()).unwrap();
    let b = c.samples(Split::Train, 42, 64, Mixture::default()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.prompt, y.prompt);
        assert_eq!(x.answer, y.answer);
        assert_eq!(x.spec, y.spec);
        assert_eq!(bits(&x.image), bits(&y.image));
    }
    let other = c.samples(Split::Train, 43, 64, Mixture::default()).unwrap();
    assert!(a.iter().zip(&other).any(|(x, y)| x.spec != y.spec));
}

#[test]
fn split_streams_are_independent() {
    let c = corpus();
    let id = c.sample(Split::EvalId, 0, 0, Mixture::default()).unwrap();
    let cap = c.sample(Split::Caption, 0, 0, Mixture::default()).unwrap();
    assert_ne!(bits(&id.image), bits(&cap.image));
}

#[test]
fn images_are_in_unit_range() {
    let c = corpus();
    for s in c.samples(Split::Train, 0, 100, Mixture::default()).unwrap() {
        assert_eq!(s.image.shape(), &[3, IMAGE_SIZE, IMAGE_SIZE]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn manifest_records_bank_hash() {
    let c = corpus();
    let m = CorpusManifest::new(&c, 3, Mixture::default(), &[(Split::Train, 10)]);
    assert_eq!(m.template_bank_sha256, TemplateBank::source_hash());
    assert_eq!(m.template_bank_sha256.len(), 64);
    assert_eq!(m.mixture, (1, 7));
    assert_eq!(m.splits["train"], 10);
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<CorpusManifest>(&json).unwrap(), m);
}

#[test]
fn template_bank_validation() {
    assert!(TemplateBank::parse("classification_open = []").is_err());
    let src = include_str!("../data/templates.toml").replace("Pick one label for this image: {labels}.", "Pick one label.");
    assert!(TemplateBank::parse(&src).is_err());
}

fn arb_spec() -> impl Strategy<Value = SceneSpec> {
    let object = (0usize..4, 0usize..5, any::<bool>());
    (proptest::collection::vec(object, 0..=3), proptest::sample::subsequence((0..16).collect::<Vec<usize>>(), 3), 0.0f64..=1.0)
        .prop_map(|(objs, cells, background)| SceneSpec {
            objects: objs
                .into_iter()
                .zip(cells)
                .map(|((s, c, large), cell)| SceneObject {
                    shape: Shape::ALL[s],
                    color: Color::ALL[c],
                    row: cell / GRID,
                    col: cell % GRID,
                    size: if large { Size::Large } else { Size::Small },
                })
                .collect(),
            background,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn render_is_deterministic_and_cell_local(spec in arb_spec(), seed in any::<u64>()) {
        let a = render(&spec, seed).unwrap();
        prop_assert_eq!(bits(&a), bits(&render(&spec, seed).unwrap()));
        let n = IMAGE_SIZE * IMAGE_SIZE;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let px = [a.data()[y * IMAGE_SIZE + x], a.data()[n + y * IMAGE_SIZE + x], a.data()[2 * n + y * IMAGE_SIZE + x]];
                if px != [spec.background; 3] {
                    let owner = spec.objects.iter().find(|o| o.row == y / CELL && o.col == x / CELL);
                    prop_assert!(owner.is_some_and(|o| o.color.rgb() == px));
                }
            }
        }
    }

    #[test]
    fn mixture_blocks_are_exact(c in 0i64..6, r in 0i64..6, seed in any::<u64>(), block in 0u64..1000) {
        prop_assume!(c + r > 0);
        let m = Mixture::new(c, r).unwrap();
        let total = (c + r) as u64;
        let n = (block * total..(block + 1) * total).filter(|&i| m.kind_at(seed, i) == TaskKind::Classification).count();
        prop_assert_eq!(n as i64, c);
    }

    #[test]
    fn samples_are_pure_functions_of_seed_and_index(seed in any::<u64>(), index in 0u64..100_000) {
        let c = corpus();
        let a = c.sample(Split::Train, seed, index, Mixture::default()).unwrap();
        let b = c.sample(Split::Train, seed, index, Mixture::default()).unwrap();
        prop_assert_eq!(a.prompt, b.prompt);
        prop_assert_eq!(bits(&a.image), bits(&b.image));
        prop_assert_eq!(c.vocab.detokenize(&a.answer), oracle(&a.spec, a.question));
    }
}
