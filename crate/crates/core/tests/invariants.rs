use proptest::prelude::*;

use blm::{
    canvas_from_partial, parse_template, trajectory_from_order, Action, Blm, Canvas, CanvasItem, Mode,
    ModelConfig, Order, Split, Variant, Vocabulary,
};

fn word_vocab() -> Vocabulary {
    Vocabulary::from_words(Mode::Word, 6, 1, ["a", "b", "c", "d"])
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Plain), Just(Variant::LengthAware)]
}

/// A sentence over `a..d` and a permutation of its positions.
fn sentence_and_order() -> impl Strategy<Value = (Vec<&'static str>, Vec<usize>)> {
    (1usize..=6).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

fn unplaced_runs(placed: &[bool]) -> usize {
    (0..placed.len())
        .filter(|&i| !placed[i] && (i == 0 || placed[i - 1]))
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn trajectory_replays_and_matches_partial_canvases(
        (words, order) in sentence_and_order(),
        variant in variant(),
    ) {
        let vocab = word_vocab();
        let x = vocab.tokenize(&words.join(" "));
        let n = x.len();
        let steps = trajectory_from_order(&x, &Order::new(order.clone()).unwrap(), variant).unwrap();
        prop_assert_eq!(steps.len(), n);

        let mut placed = vec![false; n];
        let mut canvas = Canvas::initial_for(variant, n);
        for (t, step) in steps.iter().enumerate() {
            prop_assert_eq!(&step.canvas, &canvas);
            prop_assert!(canvas.is_normalized());
            prop_assert_eq!(canvas.blank_count(), unplaced_runs(&placed));
            prop_assert_eq!(canvas.word_count(), t);
            if variant == Variant::LengthAware {
                let hidden: usize = canvas.blank_lengths().iter().map(|l| l.unwrap()).sum();
                prop_assert_eq!(hidden, n - t);
            }

            let inst = canvas_from_partial(&x, &order[..t], variant).unwrap();
            prop_assert_eq!(&inst.canvas, &canvas);
            prop_assert_eq!(inst.targets.len(), n - t);
            let target = inst.targets.iter().find(|g| g.position == order[t]).unwrap();
            prop_assert_eq!(&target.action, &step.action);

            canvas = canvas.apply(&step.action).unwrap();
            placed[order[t]] = true;
        }
        prop_assert_eq!(canvas.tokens().unwrap(), x);
    }

    #[test]
    fn word_templates_round_trip(items in prop::collection::vec(prop::option::of(0usize..4), 0..10)) {
        let vocab = word_vocab();
        let surfaces = ["a", "b", "c", "d"];
        let canvas = Canvas::from_items(
            items
                .iter()
                .map(|i| match i {
                    Some(w) => CanvasItem::Word(vocab.token(surfaces[*w])),
                    None => CanvasItem::Blank(None),
                })
                .collect(),
        )
        .normalized();
        let text = canvas.render(Mode::Word);
        prop_assert_eq!(parse_template(&text, &vocab, true).unwrap(), canvas);
    }

    #[test]
    fn char_templates_round_trip(items in prop::collection::vec(prop_oneof![
        (0usize..3).prop_map(Ok),
        (1usize..5).prop_map(Err),
    ], 0..10)) {
        let vocab = Vocabulary::from_words(Mode::Char, 24, 1, ["x", "y", "z"]);
        let surfaces = ["x", "y", "z"];
        // Adjacent annotated blanks render as one run of `?`.
        let mut merged: Vec<CanvasItem> = Vec::new();
        for i in &items {
            match (i, merged.last_mut()) {
                (Err(t), Some(CanvasItem::Blank(Some(prev)))) => *prev += t,
                (Err(t), _) => merged.push(CanvasItem::Blank(Some(*t))),
                (Ok(w), _) => merged.push(CanvasItem::Word(vocab.token(surfaces[*w]))),
            }
        }
        let canvas = Canvas::from_items(merged);
        let text = canvas.render(Mode::Char);
        let parsed = parse_template(&text, &vocab, false).unwrap();
        prop_assert_eq!(parsed.render(Mode::Char), text);
        prop_assert_eq!(parsed, canvas);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn next_action_distribution_sums_to_one(
        layout in prop::collection::vec(prop::option::of(0usize..4), 1..6),
        lengths in prop::collection::vec(1usize..=6, 6),
        variant in variant(),
        seed in 0u64..1000,
    ) {
        let vocab = word_vocab();
        let config = ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 16,
            head_hidden: 8,
            dropout: 0.0,
            tie_output: false,
            variant,
            init_seed: seed,
        };
        let model = Blm::<f64>::new(config, vocab.clone()).unwrap();
        let surfaces = ["a", "b", "c", "d"];
        let mut items: Vec<CanvasItem> = layout
            .iter()
            .enumerate()
            .map(|(i, w)| match w {
                Some(w) => CanvasItem::Word(vocab.token(surfaces[*w])),
                None => CanvasItem::Blank(match variant {
                    Variant::Plain => None,
                    Variant::LengthAware => Some(lengths[i]),
                }),
            })
            .collect();
        items.push(CanvasItem::Blank(match variant {
            Variant::Plain => None,
            Variant::LengthAware => Some(lengths[5]),
        }));
        let canvas = Canvas::from_items(items).normalized();

        let mut total = 0.0;
        for (b, len) in canvas.blank_lengths().into_iter().enumerate() {
            let splits: Vec<Split> = match len {
                None => (0..4).map(Split::from_flag_class).collect(),
                Some(t) => (0..t).map(Split::LeftLen).collect(),
            };
            for id in (0..vocab.len() as u32).filter(|&id| vocab.is_emittable(id)) {
                for &split in &splits {
                    let action = Action { blank: b, word: vocab.token_for_id(id), split };
                    total += model.action_log_prob(&canvas, &action).unwrap().exp();
                }
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-9, "total probability {}", total);
    }
}
