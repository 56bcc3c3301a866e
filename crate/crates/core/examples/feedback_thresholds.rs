//! Threshold adaptation: a window of 100 interactions with 30 thumbs-down
//! and 10 thumbs-up raises tau_faq from 0.85 to 0.86.

use hybrid_router::classifier::Band;
use hybrid_router::demo;
use hybrid_router::feedback::{FeedbackConfig, FeedbackTracker, Polarity};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let store = demo::demo_store()?;
    let tracker = FeedbackTracker::new(FeedbackConfig::default());
    let id = "invoice_download";
    for turn in 0..100u64 {
        if let Some(u) = tracker.register_interaction("demo", turn, Some(id), Band::Faq, &store) {
            println!(
                "window {} closed: NFR {:.2}, PFR {:.2}, tau {:.4} -> {:.4}",
                u.epoch, u.nfr, u.pfr, u.old_tau, u.new_tau
            );
        }
        let polarity = match turn {
            0..=29 => Polarity::Negative,
            30..=39 => Polarity::Positive,
            _ => continue,
        };
        tracker.record_feedback("demo", turn, polarity)?;
    }
    println!("stored tau_faq for {id}: {}", store.snapshot().get(id).unwrap().tau_faq);
    Ok(())
}
