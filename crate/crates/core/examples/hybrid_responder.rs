//! One query per band through the hybrid responder, with the text it
//! produces and the documents it cites.

use hybrid_router::context_manager::SessionContext;
use hybrid_router::harness::EvalEnv;
use hybrid_router::responder::RoutingMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = EvalEnv::demo()?;
    let responder = env.responder(RoutingMode::Hybrid, false);
    for q in [
        "how do i download my invoice",
        "how do i download my invoice and invoice currency and tax details",
        "what is the gpu quota for new tenancies",
    ] {
        let mut session = SessionContext::new("demo");
        let r = responder.respond(q, &mut session, env.store.as_ref(), &env.index)?.response;
        println!("> {q}");
        println!("  {:?} via {:?}, c={:.3}, sources {:?}", r.band, r.kind, r.confidence, r.sources);
        for line in r.text.lines() {
            println!("  | {line}");
        }
        println!();
    }
    Ok(())
}
