//! A follow-up that only makes sense with history: in a session it stays on
//! the antecedent's intent, on its own it falls out of domain.

use hybrid_router::context_manager::SessionContext;
use hybrid_router::harness::EvalEnv;
use hybrid_router::responder::RoutingMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = EvalEnv::demo()?;
    let responder = env.responder(RoutingMode::Hybrid, false);
    let turns = [
        "how do i create an api key",
        "what happens if i lose it after i create the key",
    ];

    let mut session = SessionContext::new("with-history");
    for q in turns {
        let out = responder.respond(q, &mut session, env.store.as_ref(), &env.index)?;
        let r = out.response;
        println!("[{}] {q}\n    {:?} {:?} c={:.3} intent={:?}", r.turn_index, r.band, r.kind, r.confidence, r.intent_id);
    }

    let mut fresh = SessionContext::new("alone");
    let r = responder.respond(turns[1], &mut fresh, env.store.as_ref(), &env.index)?.response;
    println!("fresh session: {:?} c={:.3}", r.band, r.confidence);
    Ok(())
}
