use std::sync::Arc;

use proptest::prelude::*;

use hybrid_router::config::AppConfig;
use hybrid_router::feedback::{IntentDraft, Polarity, UnhandledEntry};
use hybrid_router::intent_store::IntentDefinition;
use hybrid_router::jsonl;
use hybrid_router::service::{
    ActivateRequest, ChatRequest, ChatResponse, FeedbackRequest, RouterService, DRAFTS_FILE, INTENTS_FILE, UNHANDLED_FILE,
};

const QUERIES: [&str; 8] = [
    "how do i create an api key",
    "what happens if i lose it after i create the key",
    "how do i enable advanced analytics for my workspace",
    "can you explain what metrics are available",
    "what is the gpu quota for new tenancies",
    "how do i reset my password",
    "how long until the verification email arrives",
    "tell me about bucket naming and storage tiers",
];

fn svc() -> RouterService {
    RouterService::from_config(AppConfig::default()).unwrap()
}

fn ask(s: &RouterService, session: &str, text: &str) -> ChatResponse {
    s.handle_chat(&ChatRequest {
        session_id: session.into(),
        text: text.into(),
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn interleaved_sessions_match_their_solo_replays(
        a in prop::collection::vec(0..QUERIES.len(), 1..6),
        b in prop::collection::vec(0..QUERIES.len(), 1..6),
        order in prop::collection::vec(any::<bool>(), 12),
    ) {
        let solo = |script: &[usize]| {
            let s = svc();
            let replies: Vec<_> = script.iter().map(|&i| ask(&s, "solo", QUERIES[i])).collect();
            (replies, s.session_aggregate("solo"))
        };
        let (solo_a, agg_a) = solo(&a);
        let (solo_b, agg_b) = solo(&b);

        let s = svc();
        let (mut ia, mut ib) = (0, 0);
        let (mut got_a, mut got_b) = (Vec::new(), Vec::new());
        let mut pick = order.iter().cycle();
        while ia < a.len() || ib < b.len() {
            let take_a = ib == b.len() || (ia < a.len() && *pick.next().unwrap());
            if take_a {
                got_a.push(ask(&s, "alice", QUERIES[a[ia]]));
                ia += 1;
            } else {
                got_b.push(ask(&s, "bob", QUERIES[b[ib]]));
                ib += 1;
            }
        }
        prop_assert_eq!(s.session_aggregate("alice"), agg_a);
        prop_assert_eq!(s.session_aggregate("bob"), agg_b);
        for (got, want) in got_a.iter().zip(&solo_a).chain(got_b.iter().zip(&solo_b)) {
            prop_assert_eq!(&got.text, &want.text);
            prop_assert_eq!(got.band, want.band);
            prop_assert_eq!(&got.intent_id, &want.intent_id);
            prop_assert_eq!(got.turn_index, want.turn_index);
        }
    }
}

#[test]
fn concurrent_sessions_keep_their_own_turn_order() {
    let s = Arc::new(svc());
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let s = Arc::clone(&s);
            std::thread::spawn(move || {
                let id = format!("worker-{t}");
                (0..20u64)
                    .map(|i| ask(&s, &id, QUERIES[(t + i as usize) % QUERIES.len()]).turn_index)
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), (0..20).collect::<Vec<_>>());
    }
    assert_eq!(s.active_sessions(), 8);
}

#[test]
fn intents_thresholds_and_drafts_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AppConfig {
        data_dir: Some(dir.path().to_path_buf()),
        feedback: hybrid_router::feedback::FeedbackConfig {
            window_size: 10,
            ..Default::default()
        },
        ..AppConfig::default()
    };
    let s = RouterService::from_config(cfg.clone()).unwrap();
    assert!(dir.path().join(INTENTS_FILE).exists());
    s.upsert_intent(IntentDefinition {
        intent_id: "plan_upgrade".into(),
        display_name: "Upgrade plan".into(),
        exemplar_texts: vec!["how do i upgrade my plan".into()],
        canned_response: "Open Billing, then choose Change plan.".into(),
    })
    .unwrap();
    for i in 0..10 {
        let session = format!("neg-{i}");
        let r = ask(&s, &session, "how do i upgrade my plan");
        assert_eq!(r.intent_id.as_deref(), Some("plan_upgrade"));
        if i < 9 {
            s.handle_feedback(&FeedbackRequest {
                session_id: session,
                turn_index: 0,
                polarity: Polarity::Negative,
            })
            .unwrap();
        }
    }
    let tau = s.store().snapshot().get("plan_upgrade").unwrap().tau_faq;
    assert!((tau - 0.895).abs() < 1e-12, "{tau}");
    for (i, q) in [
        "how do i replicate storage across regions",
        "how can i replicate storage across regions",
        "how should i replicate storage across regions",
        "how would i replicate storage across regions",
        "can i replicate storage across regions",
    ]
    .iter()
    .enumerate()
    {
        ask(&s, &format!("ood-{i}"), q);
    }
    let draft_id = s.list_drafts()[0].draft.draft_id.clone();
    drop(s);

    let unhandled: Vec<UnhandledEntry> = jsonl::read_file(&dir.path().join(UNHANDLED_FILE)).unwrap();
    assert_eq!(unhandled.len(), 5);
    let drafts: Vec<IntentDraft> = jsonl::read_file(&dir.path().join(DRAFTS_FILE)).unwrap();
    assert_eq!(drafts.len(), 1);

    let s = RouterService::from_config(cfg.clone()).unwrap();
    let rec = s.store().snapshot().get("plan_upgrade").cloned().unwrap();
    assert_eq!(rec.tau_faq, tau);
    assert_eq!(s.list_drafts().len(), 1);
    // Sessions do not survive.
    assert_eq!(s.active_sessions(), 0);
    s.activate_draft(
        &draft_id,
        &ActivateRequest {
            canned_response: "Turn on cross region replication.".into(),
            intent_id: None,
            display_name: Some("Storage replication".into()),
        },
    )
    .unwrap();
    drop(s);

    let s = RouterService::from_config(cfg).unwrap();
    let snap = s.store().snapshot();
    let activated = snap.iter().find(|r| r.display_name == "Storage replication").unwrap();
    assert_eq!(activated.exemplar_texts.len(), 5);
    assert_eq!(s.list_drafts()[0].draft.status, hybrid_router::feedback::DraftStatus::Activated);
    // New drafts after restart do not reuse the old id.
    for (i, q) in ["gpu quota raise", "raise gpu quota", "gpu quota raise please", "please raise gpu quota", "gpu quota raise now"]
        .iter()
        .enumerate()
    {
        ask(&s, &format!("gpu-{i}"), q);
    }
    let ids: Vec<_> = s.list_drafts().into_iter().map(|d| d.draft.draft_id).collect();
    assert_eq!(ids.len(), 2, "{ids:?}");
    assert_ne!(ids[0], ids[1]);
}
