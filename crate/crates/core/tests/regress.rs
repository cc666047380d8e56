use dlgf_core::compile::{compile, Augmentation, CompiledFlow, TrainingDialog, WalkLimits};
use dlgf_core::flow::{parse_flow, DialogFlow};
use dlgf_core::hcn::{train, Hyperparams};
use dlgf_core::regress::*;
use dlgf_core::{samples, Policy};

const PASSWORD: &str = r#"{
  "schema_version": 1,
  "name": "password",
  "start": "ask_kind",
  "entities": [
    { "name": "kind", "kind": "enum", "values": [
      { "value": "work", "synonyms": ["office"] },
      { "value": "home", "synonyms": ["personal"] } ] }
  ],
  "nodes": [
    { "id": "ask_kind", "kind": "question", "text": "Is this a work or a home account?", "entity": "kind" },
    { "id": "work", "kind": "message", "text": "Ask your administrator to reset it." },
    { "id": "home", "kind": "message", "text": "Use the reset link on the sign-in page." },
    { "id": "end", "kind": "end" }
  ],
  "edges": [
    { "from": "ask_kind", "to": "work", "condition": { "kind": "option", "entity": "kind", "value": "work" } },
    { "from": "ask_kind", "to": "home", "condition": { "kind": "option", "entity": "kind", "value": "home" } },
    { "from": "work", "to": "end", "condition": { "kind": "always" } },
    { "from": "home", "to": "end", "condition": { "kind": "always" } }
  ]
}"#;

fn hyper() -> Hyperparams {
    Hyperparams { embedding_dim: 8, hidden_size: 16, seed: 7, ..Hyperparams::default() }
}

fn bootstrap(flow: &DialogFlow) -> (CompiledFlow, Policy) {
    let c = compile(flow, WalkLimits::default(), Augmentation::default()).unwrap();
    let (model, metrics) = train::<f64>(&c.dialogs, &c.catalog, &flow.entities, &hyper()).unwrap();
    assert_eq!(metrics.accuracy, 1.0);
    (c, model)
}

fn expected_replay(d: &TrainingDialog) -> Vec<Vec<ReplayAction>> {
    d.turns
        .iter()
        .map(|t| {
            t.system.iter().map(|a| ReplayAction { template_id: a.template_id, text: a.filled_text.clone() }).collect()
        })
        .collect()
}

fn turns(layout: &[&[(usize, &str)]]) -> Replay {
    Replay {
        transcript_id: "t".into(),
        turns: layout
            .iter()
            .map(|acts| ReplayTurn {
                user: None,
                actions: acts
                    .iter()
                    .map(|(id, text)| ReplayAction { template_id: *id, text: text.to_string() })
                    .collect(),
                error: None,
            })
            .collect(),
    }
}

#[test]
fn compiled_dialogs_replay_identically_on_their_bootstrap_model() {
    let flow = samples::fonts_mini();
    let (c, model) = bootstrap(&flow);
    for d in &c.dialogs {
        let r = replay(&Transcript::from_dialog(d), &model);
        let got: Vec<Vec<ReplayAction>> = r.turns.iter().map(|t| t.actions.clone()).collect();
        assert_eq!(got, expected_replay(d), "{}", d.id);
        assert!(r.turns.iter().all(|t| t.error.is_none()));
    }
}

#[test]
fn the_rule_based_flow_replays_its_own_dialogs() {
    let flow = samples::fonts_mini();
    let c = compile(&flow, WalkLimits::default(), Augmentation::default()).unwrap();
    let dm = FlowDm::with_catalog(flow, &c.catalog).unwrap();
    for d in &c.dialogs {
        let r = replay(&Transcript::from_dialog(d), &dm);
        let got: Vec<Vec<ReplayAction>> = r.turns.iter().map(|t| t.actions.clone()).collect();
        assert_eq!(got, expected_replay(d), "{}", d.id);
    }
}

#[test]
fn a_model_of_another_topic_diverges() {
    let fonts = samples::fonts_mini();
    let (c, fonts_model) = bootstrap(&fonts);
    let (_, other) = bootstrap(&parse_flow(PASSWORD.as_bytes()).unwrap());
    let transcripts: Vec<Transcript> = c.dialogs.iter().map(Transcript::from_dialog).collect();
    let pairs = compare(&transcripts, &fonts_model, &other).unwrap();
    assert_eq!(pairs.len(), c.dialogs.len());
    for p in &pairs {
        assert_eq!(p.divergence, Some(0));
        assert!(!p.auto_same);
        // every user turn is still fed, failing or not
        assert_eq!(p.right.turns.len(), p.left.turns.len());
        for t in &p.right.turns {
            assert!(!t.actions.is_empty());
            if t.error.is_some() {
                assert_eq!(t.actions[0].template_id, SENTINEL);
            }
        }
    }
}

#[test]
fn failing_turns_are_recorded_and_replay_goes_on() {
    struct Flaky;
    impl DialogManager for Flaky {
        type State = usize;
        fn start(&self) -> Result<(Vec<ReplayAction>, usize), DmFailure> {
            Ok((vec![ReplayAction { template_id: 0, text: "hi".into() }], 0))
        }
        fn respond(&self, state: &usize, utterance: &str) -> Result<(Vec<ReplayAction>, usize), DmFailure> {
            if utterance == "boom" {
                return Err(DmFailure("every action is masked out".into()));
            }
            Ok((vec![ReplayAction { template_id: 1, text: format!("{}:{utterance}", state + 1) }], state + 1))
        }
    }
    let t =
        Transcript { id: "x".into(), user_turns: vec!["a".into(), "boom".into(), "b".into()], system_turns: vec![] };
    let r = replay(&t, &Flaky);
    assert_eq!(r.turns.len(), 4);
    assert_eq!(r.turns[2].actions[0].template_id, SENTINEL);
    assert!(r.turns[2].actions[0].text.starts_with("<failed:"));
    assert_eq!(r.turns[2].error.as_deref(), Some("every action is masked out"));
    // state from before the failure carries on
    assert_eq!(r.turns[3].actions[0].text, "2:b");
}

#[test]
fn empty_utterances_are_processed() {
    let flow = samples::fonts_mini();
    let (_, model) = bootstrap(&flow);
    let t = Transcript { id: "e".into(), user_turns: vec!["".into(), "app".into()], system_turns: vec![] };
    let r = replay(&t, &model);
    assert_eq!(r.turns.len(), 3);
    assert_eq!(r.turns[1].user.as_deref(), Some(""));
    assert!(!r.turns[1].actions.is_empty());
}

#[test]
fn replay_is_deterministic() {
    let flow = samples::fonts_mini();
    let (c, model) = bootstrap(&flow);
    let t = Transcript::from_dialog(&c.dialogs[0]);
    assert_eq!(replay(&t, &model), replay(&t, &model));
}

#[test]
fn identical_replays_are_auto_same() {
    let a = turns(&[&[(0, "hi")], &[(1, "x"), (2, "y")]]);
    let p = diff(&a, &a).unwrap();
    assert_eq!(p.divergence, None);
    assert!(p.auto_same);
    let (l, r) = p.view();
    assert_eq!((l.len(), r.len()), (2, 2));
}

#[test]
fn a_difference_in_the_opening_diverges_at_zero() {
    let p = diff(&turns(&[&[(0, "hi")], &[(1, "x")]]), &turns(&[&[(3, "yo")], &[(1, "x")]])).unwrap();
    assert_eq!(p.divergence, Some(0));
    assert!(!p.auto_same);
}

#[test]
fn same_template_with_different_text_still_diverges() {
    let l = turns(&[&[(0, "hi")], &[(4, "Resetting the password for alice")]]);
    let r = turns(&[&[(0, "hi")], &[(4, "Resetting the password for bob")]]);
    assert_eq!(diff(&l, &r).unwrap().divergence, Some(1));
}

#[test]
fn view_keeps_three_turns_after_the_divergence() {
    let mut layout: Vec<&[(usize, &str)]> = vec![&[(0, "a")]; 8];
    let l = turns(&layout);
    layout[2] = &[(1, "b")];
    let r = turns(&layout);
    let p = diff(&l, &r).unwrap();
    assert_eq!(p.divergence, Some(2));
    let (lv, rv) = p.view();
    assert_eq!((lv.len(), rv.len()), (6, 6));
}

#[test]
fn mismatched_replays_are_rejected() {
    let a = turns(&[&[(0, "hi")]]);
    let mut b = a.clone();
    b.transcript_id = "other".into();
    assert!(matches!(diff(&a, &b), Err(RegressError::TranscriptMismatch(_))));
    let longer = turns(&[&[(0, "hi")], &[(1, "x")]]);
    assert!(matches!(diff(&a, &longer), Err(RegressError::TranscriptMismatch(_))));
}

#[test]
fn transcripts_parse_from_json_lines() {
    let text = "{\"id\":\"a\",\"user_turns\":[\"app\",\"yes\"]}\n\n{\"id\":\"b\",\"user_turns\":[\"screen\"],\"system_turns\":[[\"q\"],[\"m\"]]}\n";
    let ts = parse_transcripts(text).unwrap();
    assert_eq!(ts.len(), 2);
    assert_eq!(ts[1].system_turns.len(), 2);

    assert!(matches!(parse_transcripts("{\"id\":\"a\",\"user_turns\":[]}"), Err(RegressError::EmptyTranscript(_))));
    let uneven = "{\"id\":\"a\",\"user_turns\":[\"x\"],\"system_turns\":[[\"q\"]]}";
    assert!(matches!(parse_transcripts(uneven), Err(RegressError::TranscriptMismatch(_))));
    assert!(matches!(parse_transcripts("{}\n"), Err(RegressError::Parse { line: 1, .. })));
}

fn ratings(same: usize, left: usize, right: usize) -> Vec<Rating> {
    let verdicts = std::iter::repeat_n(Verdict::Same, same)
        .chain(std::iter::repeat_n(Verdict::LeftBetter, left))
        .chain(std::iter::repeat_n(Verdict::RightBetter, right));
    verdicts.enumerate().map(|(pair_id, verdict)| Rating { pair_id, verdict }).collect()
}

#[test]
fn report_reproduces_the_first_human_evaluation() {
    // candidate on the right: right better counts as better
    let r = aggregate_ratings(&ratings(2749, 115, 136), Side::Right).unwrap();
    assert_eq!(r.total, 3000);
    assert_eq!(r.same_pct, Some(91.63));
    assert_eq!(r.better_pct(), Some(4.53));
    assert_eq!(r.worse_pct(), Some(3.83));
    assert_eq!(r.overall_variation, Some(0.70));
}

#[test]
fn report_on_the_second_evaluation_computes_its_own_rounding() {
    let r = aggregate_ratings(&ratings(2562, 24, 414), Side::Right).unwrap();
    assert_eq!(r.same_pct, Some(85.4));
    assert_eq!(r.better_pct(), Some(13.8));
    // 24 / 3000 is 0.80%; the published table prints 0.81%
    assert_eq!(r.worse_pct(), Some(0.8));
    assert_eq!(r.overall_variation, Some(13.0));
}

#[test]
fn candidate_side_flips_better_and_worse() {
    let right = aggregate_ratings(&ratings(5, 1, 4), Side::Right).unwrap();
    let left = aggregate_ratings(&ratings(5, 1, 4), Side::Left).unwrap();
    assert_eq!(right.better_pct(), left.worse_pct());
    assert_eq!(right.overall_variation, left.overall_variation.map(|v| -v));
}

#[test]
fn zero_ratings_render_dashes() {
    let r = aggregate_ratings(&[], Side::Right).unwrap();
    assert_eq!(r.total, 0);
    assert_eq!(r.same_pct, None);
    assert_eq!(r.overall_variation, None);
    assert!(r.render().contains('—'));
}

#[test]
fn duplicate_ratings_are_refused() {
    let mut rs = ratings(1, 1, 0);
    rs.push(Rating { pair_id: 0, verdict: Verdict::LeftBetter });
    assert!(matches!(aggregate_ratings(&rs, Side::Right), Err(RegressError::DuplicateRating(0))));
}

fn run_of(n: usize, seed: u64) -> RegressionRun {
    let same = turns(&[&[(0, "a")]]);
    let other = turns(&[&[(1, "b")]]);
    let pairs =
        (0..n).map(|i| if i % 3 == 0 { diff(&same, &same).unwrap() } else { diff(&same, &other).unwrap() }).collect();
    RegressionRun::new(1, 1, 2, seed, pairs)
}

#[test]
fn auto_same_pairs_never_reach_the_queue_but_count_as_same() {
    let run = run_of(9, 3);
    let queue = run.queue(&[]);
    assert_eq!(queue.len(), 6);
    assert_eq!(run.human_pairs(), 6);
    assert!(queue.iter().all(|p| p.pair_id % 3 != 0));
    assert!(matches!(
        run.unblind(&[], &[Rating { pair_id: 0, verdict: Verdict::Same }]),
        Err(RegressError::DuplicateRating(0))
    ));
    let report = run.report(&[]).unwrap();
    assert_eq!(report.counts.same, 3);
    assert_eq!(report.total, 3);
}

#[test]
fn blind_verdicts_are_mapped_back_to_real_sides() {
    let run = run_of(30, 11);
    let queue = run.queue(&[]);
    assert!(run.pairs.iter().any(|p| p.flipped) && run.pairs.iter().any(|p| !p.flipped));
    // the rater always prefers what is shown on the left
    let shown: Vec<Rating> =
        queue.iter().map(|p| Rating { pair_id: p.pair_id, verdict: Verdict::LeftBetter }).collect();
    let stored = run.unblind(&[], &shown).unwrap();
    for (r, p) in stored.iter().zip(&queue) {
        let real = &run.pairs[p.pair_id];
        let shown_left_is_real_left = p.left == real.pair.view().0;
        assert_eq!(shown_left_is_real_left, !real.flipped);
        let expected = if real.flipped { Verdict::RightBetter } else { Verdict::LeftBetter };
        assert_eq!(r.verdict, expected);
    }
    assert!(run.queue(&stored).is_empty());
    assert!(matches!(run.unblind(&stored, &shown[..1]), Err(RegressError::DuplicateRating(_))));
    assert!(matches!(
        run.unblind(&[], &[Rating { pair_id: 99, verdict: Verdict::Same }]),
        Err(RegressError::UnknownPair(99))
    ));
    assert_eq!(run.report(&stored).unwrap().total, 30);
}
