//! Unhandled queries cluster into a draft intent; once a reviewer activates
//! it, the same questions stop falling out of domain.

use hybrid_router::config::AppConfig;
use hybrid_router::service::{ActivateRequest, ChatRequest, RouterService};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let svc = RouterService::from_config(AppConfig::default())?;
    let queries = [
        "how do i replicate storage across regions",
        "how can i replicate storage across regions",
        "how should i replicate storage across regions",
        "how would i replicate storage across regions",
        "can i replicate storage across regions",
    ];
    let chat = |session: String, text: &str| svc.handle_chat(&ChatRequest { session_id: session, text: text.into() });
    for (i, q) in queries.iter().enumerate() {
        let r = chat(format!("before-{i}"), q)?;
        println!("{:<45} {:?} c={:.3}", q, r.band, r.confidence);
    }

    let drafts = svc.list_drafts();
    for d in &drafts {
        println!("draft {} ({} members, flagged {})", d.draft.draft_id, d.cluster_size.unwrap_or(0), d.flagged);
    }
    let draft = drafts.first().ok_or("no draft proposed")?;
    let view = svc.activate_draft(
        &draft.draft.draft_id,
        &ActivateRequest {
            canned_response: "Enable cross region replication on the source bucket and pick a target region.".into(),
            intent_id: Some("storage_replication".into()),
            display_name: Some("Replicate storage".into()),
        },
    )?;
    println!("activated {} with tau_faq {}", view.intent_id, view.tau_faq);

    for (i, q) in queries.iter().enumerate() {
        let r = chat(format!("after-{i}"), q)?;
        println!("{:<45} {:?} c={:.3} -> {:?}", q, r.band, r.confidence, r.intent_id);
    }
    Ok(())
}
