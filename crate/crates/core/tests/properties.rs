mod common;

use std::path::Path;

use proptest::prelude::*;

use common::gen;
use pal_core::cues::{
    parse_with, render_cues, strip_cues_for_tts, CueEvent, CueMarkup, CueStreamParser,
};
use pal_core::feedback::grounding::normalize;
use pal_core::feedback::{
    ground_quotes, parse_feedback_response, render_feedback_items, NurseLexicon,
};
use pal_core::persona::{
    parse_persona, render_patient_system_prompt, serialize_persona, validate_persona, Severity,
};
use pal_core::session::Turn;
use pal_core::store::{sort_chronologically, FileStore, SessionStore};

fn markup_chars(m: CueMarkup) -> (char, char) {
    match m {
        CueMarkup::Asterisk => ('*', '*'),
        CueMarkup::Bracket => ('[', ']'),
    }
}

fn markup() -> impl Strategy<Value = CueMarkup> {
    prop_oneof![Just(CueMarkup::Asterisk), Just(CueMarkup::Bracket)]
}

/// Split `s` at the given fractional cut points, on char boundaries.
fn chunk(s: &str, cuts: &[f64]) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    let mut points: Vec<usize> = cuts
        .iter()
        .map(|c| (c * chars.len() as f64) as usize)
        .collect();
    points.push(0);
    points.push(chars.len());
    points.sort_unstable();
    points.dedup();
    points
        .windows(2)
        .map(|w| chars[w[0]..w[1]].iter().collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn cue_parser_agrees_with_regex_oracle(raw in gen::cue_text(), m in markup()) {
        let (open, close) = markup_chars(m);
        let parsed = parse_with(&raw, m);
        let (text, cues) = common::cue_oracle(&raw, open, close);
        prop_assert_eq!(&parsed.text, &text);
        let got: Vec<(usize, String)> = parsed.cues.iter().map(|c| (c.position, c.action.clone())).collect();
        prop_assert_eq!(got, cues);
    }

    #[test]
    fn cue_offsets_are_ordered_and_in_range(raw in gen::cue_text()) {
        let parsed = parse_with(&raw, CueMarkup::Asterisk);
        let len = parsed.text.chars().count();
        for pair in parsed.cues.windows(2) {
            prop_assert!(pair[0].position <= pair[1].position);
        }
        for cue in &parsed.cues {
            prop_assert!(cue.position <= len);
            prop_assert!(!cue.action.trim().is_empty());
            prop_assert!(!cue.action.contains('*') && !cue.action.contains('\n'));
        }
        prop_assert_eq!(strip_cues_for_tts(&raw), parsed.text);
    }

    #[test]
    fn render_then_parse_is_identity((text, cues) in gen::well_formed_cues(), m in markup()) {
        let rendered = render_cues(&text, &cues, m);
        let parsed = parse_with(&rendered, m);
        prop_assert_eq!(parsed.text, text);
        prop_assert_eq!(parsed.cues, cues);
    }

    #[test]
    fn streamed_chunks_match_whole_parse(
        raw in gen::cue_text(),
        cuts in prop::collection::vec(0.0f64..1.0, 0..8),
        m in markup(),
    ) {
        let mut parser = CueStreamParser::new(m);
        let mut events = Vec::new();
        for piece in chunk(&raw, &cuts) {
            events.extend(parser.push(&piece));
        }
        let (rest, whole) = parser.finish();
        events.extend(rest);
        let text: String = events.iter().filter_map(|e| match e {
            CueEvent::Text(t) => Some(t.as_str()),
            CueEvent::Cue(_) => None,
        }).collect();
        let actions: Vec<&str> = events.iter().filter_map(|e| match e {
            CueEvent::Cue(c) => Some(c.as_str()),
            CueEvent::Text(_) => None,
        }).collect();
        let reference = parse_with(&raw, m);
        prop_assert_eq!(&whole, &reference);
        prop_assert_eq!(text, reference.text.clone());
        let expected: Vec<&str> = reference.cues.iter().map(|c| c.action.as_str()).collect();
        prop_assert_eq!(actions, expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn persona_toml_round_trips(p in gen::valid_persona()) {
        let report = validate_persona(&p);
        prop_assert!(report.is_valid(), "{:?}", report.issues);
        let text = serialize_persona(&p);
        let back = parse_persona(&text, Path::new("generated.persona.toml")).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn validation_is_total_and_consistent(p in gen::any_persona()) {
        let report = validate_persona(&p);
        let has_error = report.issues.iter().any(|i| i.severity == Severity::Error);
        prop_assert_eq!(report.is_valid(), !has_error);
        prop_assert_eq!(&report.persona_id, &p.id);
    }

    #[test]
    fn prompt_grows_with_section_text(
        p in gen::valid_persona(),
        extra in "[a-z ]{1,40}",
        section in 0usize..6,
    ) {
        let before = render_patient_system_prompt(&p, p.initial_stage).unwrap();
        prop_assert_eq!(&before, &render_patient_system_prompt(&p, p.initial_stage).unwrap());
        let mut q = p.clone();
        match section {
            0 => q.case.purpose.push_str(&extra),
            1 => q.case.disposition.push_str(&extra),
            2 => q.case.past_medical_history.push_str(&extra),
            3 => q.case.social_history.push_str(&extra),
            4 => q.case.setting.push_str(&extra),
            _ => q.stages[q.initial_stage].description.push_str(&extra),
        }
        let after = render_patient_system_prompt(&q, q.initial_stage).unwrap();
        prop_assert!(after.len() >= before.len() + extra.len());
    }

    #[test]
    fn feedback_render_parse_round_trips(items in gen::feedback_items()) {
        let text = render_feedback_items(&items);
        let parsed = parse_feedback_response(&text).unwrap();
        prop_assert!(parsed.issues.is_empty());
        prop_assert_eq!(parsed.items, items);
    }

    #[test]
    fn nurse_tag_ignores_keyword_order(
        suggestion in "[a-z ]{0,30}",
        keywords in prop::collection::vec(("[a-z]{2,6}", gen::nurse_category()), 1..10),
        seed in any::<u64>(),
    ) {
        let mut a = NurseLexicon { naming: vec![], understanding: vec![], respecting: vec![], supporting: vec![], exploring: vec![] };
        for (k, c) in &keywords {
            list_mut(&mut a, *c).push(k.clone());
        }
        let mut b = a.clone();
        for c in pal_core::feedback::NurseCategory::ALL {
            let list = list_mut(&mut b, c);
            if !list.is_empty() {
                let n = list.len();
                list.rotate_left((seed as usize) % n);
                if seed & 1 == 1 { list.reverse(); }
            }
        }
        prop_assert_eq!(a.tag(&suggestion), b.tag(&suggestion));
        prop_assert_eq!(a.tag(&suggestion), a.tag(&suggestion));
    }

    #[test]
    fn grounded_verdicts_have_real_witnesses(
        lines in prop::collection::vec(gen::prose(), 1..5),
        picks in prop::collection::vec((0usize..5, 0.0f64..1.0, 0.0f64..1.0, any::<bool>()), 1..6),
        upper in any::<bool>(),
    ) {
        let now = chrono::Utc::now();
        let turns: Vec<Turn> = lines.iter().enumerate().flat_map(|(i, l)| {
            [Turn::clinician(2 * i, l.clone(), now), Turn::patient(2 * i + 1, "*nods* Okay.", now, now)]
        }).collect();
        let items: Vec<_> = picks.iter().enumerate().map(|(i, (line, a, b, fake))| {
            let src: Vec<char> = lines[line % lines.len()].chars().collect();
            let (mut s, mut e) = (((a * src.len() as f64) as usize), ((b * src.len() as f64) as usize));
            if s > e { std::mem::swap(&mut s, &mut e); }
            let mut quote: String = if *fake { "zz unspoken words".into() } else { src[s..e].iter().collect() };
            if upper { quote = quote.to_uppercase(); }
            pal_core::feedback::FeedbackItem {
                ordinal: i + 1,
                scenario: "s".into(),
                current_approach: format!("\"{quote}\""),
                improvement_suggestion: "x".into(),
                nurse_category: None,
                grounded: pal_core::feedback::Grounding::Unchecked,
            }
        }).collect();
        let report = ground_quotes(&items, &turns);
        prop_assert_eq!(report.verdicts.len(), items.len());
        for v in &report.verdicts {
            if v.grounded {
                let index = v.turn_index.expect("grounded verdict names a turn");
                let turn = turns.iter().find(|t| t.index == index).unwrap();
                prop_assert_eq!(turn.role, pal_core::session::Speaker::Clinician);
                let (start, end) = v.span.expect("grounded verdict has a span");
                let witness: String = normalize(&turn.text).chars().skip(start).take(end - start).collect();
                prop_assert_eq!(&witness, &v.normalized_quote);
                prop_assert!(!witness.is_empty());
            } else {
                for t in turns.iter().filter(|t| t.role == pal_core::session::Speaker::Clinician) {
                    prop_assert!(v.normalized_quote.is_empty() || !normalize(&t.text).contains(&v.normalized_quote));
                }
            }
        }
    }
}

fn list_mut(l: &mut NurseLexicon, c: pal_core::feedback::NurseCategory) -> &mut Vec<String> {
    use pal_core::feedback::NurseCategory::*;
    match c {
        Naming => &mut l.naming,
        Understanding => &mut l.understanding,
        Respecting => &mut l.respecting,
        Supporting => &mut l.supporting,
        Exploring => &mut l.exploring,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn file_store_round_trips_sessions(sessions in prop::collection::vec(gen::session(), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let owner = store.create_user().unwrap().id;
        let sessions: Vec<_> = sessions.into_iter().map(|mut s| { s.user_id = owner.clone(); s }).collect();
        for s in &sessions {
            store.save_session(s).unwrap();
        }
        // Later saves of a duplicated id win.
        let mut latest = std::collections::HashMap::new();
        for s in &sessions {
            latest.insert(s.id.clone(), s.clone());
        }
        for s in latest.values() {
            prop_assert_eq!(&store.load_session(&s.id).unwrap(), s);
        }
    }

    #[test]
    fn listing_is_newest_first_after_interleaved_saves(
        sessions in prop::collection::vec(gen::session(), 0..12),
        owners in prop::collection::vec(0usize..2, 12),
        resaves in prop::collection::vec(0usize..12, 0..6),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let users: Vec<String> = (0..2).map(|_| store.create_user().unwrap().id).collect();
        let mut by_id = std::collections::BTreeMap::new();
        for (i, mut s) in sessions.into_iter().enumerate() {
            s.id = format!("s{i}");
            s.user_id = users[owners[i]].clone();
            store.save_session(&s).unwrap();
            by_id.insert(s.id.clone(), s);
        }
        for r in resaves {
            if let Some(s) = by_id.values_mut().nth(r) {
                s.stage_index = (s.stage_index + 1) % 3;
                store.save_session(s).unwrap();
            }
        }
        for user in &users {
            let listed = store.list_sessions(user).unwrap();
            let mut expected: Vec<_> = by_id.values().filter(|s| &s.user_id == user).cloned().collect();
            sort_chronologically(&mut expected);
            prop_assert_eq!(&listed, &expected);
            for pair in listed.windows(2) {
                prop_assert!(pair[0].created_at > pair[1].created_at
                    || (pair[0].created_at == pair[1].created_at && pair[0].id < pair[1].id));
            }
        }
    }

    #[test]
    fn turn_alternation_survives_failures(ops in prop::collection::vec(common::op_strategy(), 1..16)) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let result = rt.block_on(common::check_alternation(&ops));
        prop_assert!(result.is_ok(), "{}", result.unwrap_err());
    }
}
