//! Brute-force recount of the per-second vote.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfp_core::detector::{LabelEvent, SecondRecord};
use rfp_core::Label;

/// Independent recount: per-second, per-200 ms motion tallies over the
/// seconds spanned by the events.
pub fn brute_force(events: &[LabelEvent]) -> Vec<(u64, [usize; 5], bool)> {
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for second in first.timestamp_us / 1_000_000..=last.timestamp_us / 1_000_000 {
        let mut counts = [0usize; 5];
        for (i, c) in counts.iter_mut().enumerate() {
            let lo = second * 1_000_000 + i as u64 * 200_000;
            *c = events
                .iter()
                .filter(|e| e.label == Label::Motion && e.timestamp_us >= lo && e.timestamp_us < lo + 200_000)
                .count();
        }
        let busy = counts.iter().filter(|&&c| c >= 10).count();
        out.push((second, counts, busy >= 3));
    }
    out
}

pub fn as_tuples(records: &[SecondRecord]) -> Vec<(u64, [usize; 5], bool)> {
    records
        .iter()
        .map(|r| (r.second, r.counts.clone().try_into().unwrap(), r.decision))
        .collect()
}

/// 10 ms label stream with motion probability varying in bursts, so that
/// both decisions occur.
pub fn label_stream(seed: u64, len: usize, start_us: u64) -> Vec<LabelEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = 0.5;
    (0..len)
        .map(|i| {
            if i % 50 == 0 {
                p = rng.random_range(0.0..1.0);
            }
            LabelEvent {
                timestamp_us: start_us + i as u64 * 10_000 + rng.random_range(0..3),
                label: if rng.random_bool(p) { Label::Motion } else { Label::Empty },
            }
        })
        .collect()
}


/// Runs the library timeline against the recount on `streams` random
/// streams; returns the number of mismatching streams and of boundary
/// seconds (exactly three subintervals at exactly the threshold) seen.
pub fn recount_mismatches(seed: u64, streams: usize) -> (usize, usize) {
    let cfg = rfp_core::detector::DetectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bad, mut boundary) = (0, 0);
    for _ in 0..streams {
        let events = label_stream(rng.random(), rng.random_range(1..400), rng.random_range(0..5_000_000));
        let expected = brute_force(&events);
        if as_tuples(&rfp_core::detector::timeline_from_labels(&events, &cfg)) != expected {
            bad += 1;
        }
        boundary += expected
            .iter()
            .filter(|(_, c, _)| c.iter().filter(|&&n| n == 10).count() == 3 && c.iter().filter(|&&n| n > 10).count() == 0)
            .count();
    }
    (bad, boundary)
}
