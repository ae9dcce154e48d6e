//! Empirical masked fraction of span masking against the closed form.

use avssl::masking::{expected_coverage, sample_mask};
use avssl::rng::substream;

fn main() {
    let frames = 100_000;
    let span = 3;
    for p in [0.2, 0.4, 0.6] {
        let mask = sample_mask(frames, p, span, &mut substream(7, 0, 0));
        let got = mask.masked_count() as f64 / frames as f64;
        println!(
            "p={p:.1} span={span}: empirical {got:.4}  exact {:.4}  asymptotic {:.4}",
            expected_coverage(frames, p, span),
            1.0 - (1.0 - p).powi(span as i32)
        );
    }
}
