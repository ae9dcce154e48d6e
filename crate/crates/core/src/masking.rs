//! Span masks over video frames and their application to raw inputs.
//!
//! A mask is drawn per frame index: each index starts a span with
//! probability `start_prob`, and a span covers `span` frames (clipped at the
//! end). Audio inherits the mask frame by frame, 640 samples per frame.

use rand::Rng;

use crate::data::{AVSample, SAMPLES_PER_FRAME};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub frame_mask: Vec<bool>,
    pub start_prob: f64,
    pub span: usize,
}

impl MaskSpec {
    pub fn none(frames: usize) -> Self {
        Self {
            frame_mask: vec![false; frames],
            start_prob: 0.0,
            span: 1,
        }
    }

    pub fn all(frames: usize) -> Self {
        Self {
            frame_mask: vec![true; frames],
            start_prob: 1.0,
            span: 1,
        }
    }

    /// Builds a mask from explicit start indices (`start_prob` is left at 0).
    pub fn from_starts(frames: usize, starts: &[usize], span: usize) -> Self {
        let mut frame_mask = vec![false; frames];
        for &j in starts {
            for m in &mut frame_mask[j..(j + span).min(frames)] {
                *m = true;
            }
        }
        Self {
            frame_mask,
            start_prob: 0.0,
            span,
        }
    }

    pub fn len(&self) -> usize {
        self.frame_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.frame_mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.frame_mask[i]).collect()
    }

    /// Per-sample audio mask: sample `s` is masked iff frame `s / 640` is.
    pub fn audio_mask(&self) -> Vec<bool> {
        self.frame_mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, SAMPLES_PER_FRAME))
            .collect()
    }
}

pub fn sample_mask<R: Rng + ?Sized>(
    frames: usize,
    start_prob: f64,
    span: usize,
    rng: &mut R,
) -> MaskSpec {
    assert!(frames >= 1 && span >= 1);
    let starts: Vec<usize> = (0..frames)
        .filter(|_| rng.random_bool(start_prob))
        .collect();
    MaskSpec {
        start_prob,
        ..MaskSpec::from_starts(frames, &starts, span)
    }
}

/// Zeroes masked video frames and the matching 640-sample audio chunks.
pub fn apply_mask(
    sample: &AVSample,
    video_mask: &MaskSpec,
    audio_mask: &MaskSpec,
) -> Result<AVSample> {
    let frames = sample.frames();
    for (what, m) in [("video", video_mask), ("audio", audio_mask)] {
        if m.len() != frames {
            return Err(Error::LengthMismatch(format!(
                "{what} mask has {} frames, sample has {frames}",
                m.len()
            )));
        }
    }
    sample.check_alignment()?;
    let mut out = sample.clone();
    for t in 0..frames {
        if video_mask.frame_mask[t] {
            out.video.frame_mut(t).fill(0.0);
        }
        if audio_mask.frame_mask[t] {
            out.audio[t * SAMPLES_PER_FRAME..(t + 1) * SAMPLES_PER_FRAME].fill(0.0);
        }
    }
    Ok(out)
}

/// Exact expected masked fraction of a [`sample_mask`] draw.
pub fn expected_coverage(frames: usize, start_prob: f64, span: usize) -> f64 {
    assert!(frames >= 1);
    let q = 1.0 - start_prob;
    (0..frames)
        .map(|i| 1.0 - q.powi((i + 1).min(span) as i32))
        .sum::<f64>()
        / frames as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VideoClip;
    use crate::rng::{streams, substream};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(frames: usize) -> AVSample {
        AVSample {
            sample_id: "x".into(),
            video: VideoClip::new(
                frames,
                4,
                4,
                (0..frames * 16)
                    .map(|i| 0.1 + (i % 7) as f32 / 10.0)
                    .collect(),
            ),
            audio: (0..frames * SAMPLES_PER_FRAME)
                .map(|i| ((i % 13) as f32 - 6.0) / 10.0 + 0.01)
                .collect(),
            transcript: None,
            provenance: None,
        }
    }

    #[test]
    fn degenerate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(50, 0.0, 3, &mut rng)
            .frame_mask
            .iter()
            .all(|m| !m));
        assert!(sample_mask(50, 1.0, 3, &mut rng)
            .frame_mask
            .iter()
            .all(|&m| m));
    }

    #[test]
    fn single_start_zeroes_1920_samples() {
        let x = sample(25);
        let m = MaskSpec::from_starts(25, &[0], 3);
        let out = apply_mask(&x, &MaskSpec::none(25), &m).unwrap();
        assert!(out.audio[..1920].iter().all(|&a| a == 0.0));
        assert_eq!(out.audio[1920], x.audio[1920]);
        assert_eq!(out.audio[1920..], x.audio[1920..]);
        assert_eq!(out.video, x.video);
    }

    #[test]
    fn identity_and_total_masking() {
        let x = sample(6);
        assert_eq!(
            apply_mask(&x, &MaskSpec::none(6), &MaskSpec::none(6)).unwrap(),
            x
        );
        let z = apply_mask(&x, &MaskSpec::all(6), &MaskSpec::all(6)).unwrap();
        assert!(z.video.data.iter().all(|&v| v == 0.0));
        assert!(z.audio.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn length_mismatch() {
        let x = sample(5);
        assert!(matches!(
            apply_mask(&x, &MaskSpec::none(4), &MaskSpec::none(5)),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn coverage_oracle_values() {
        assert_eq!(expected_coverage(100, 0.0, 3), 0.0);
        assert!((expected_coverage(1, 0.5, 3) - 0.5).abs() < 1e-15);
        assert!((expected_coverage(1_000_000, 0.4, 3) - 0.784).abs() < 1e-5);
        assert!((expected_coverage(1_000_000, 0.2, 3) - 0.488).abs() < 1e-5);
    }

    #[test]
    fn empirical_coverage_over_grid() {
        // 10^4 trials per setting, each over a short sequence so the
        // start-of-sequence clipping is exercised too.
        for &(p, span) in &[(0.2, 3), (0.4, 3), (0.6, 3), (0.2, 1), (0.4, 5)] {
            let t = 20;
            let trials = 10_000;
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let fracs: Vec<f64> = (0..trials)
                .map(|_| sample_mask(t, p, span, &mut rng).masked_count() as f64 / t as f64)
                .collect();
            let mean = fracs.iter().sum::<f64>() / trials as f64;
            let var = fracs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            let se = (var / trials as f64).sqrt();
            let expect = expected_coverage(t, p, span);
            assert!(
                (mean - expect).abs() < 3.0 * se,
                "p={p} span={span}: {mean} vs {expect}"
            );
        }
    }

    #[test]
    fn modality_streams_are_independent() {
        // The video draw depends only on its own substream.
        let v1 = sample_mask(200, 0.2, 3, &mut substream(5, streams::VIDEO_MASK, 0));
        let mut audio = substream(5, streams::AUDIO_MASK, 0);
        let _ = sample_mask(200, 0.4, 3, &mut audio);
        let v2 = sample_mask(200, 0.2, 3, &mut substream(5, streams::VIDEO_MASK, 0));
        assert_eq!(v1, v2);
        let a = sample_mask(200, 0.2, 3, &mut substream(5, streams::AUDIO_MASK, 0));
        assert_ne!(v1.frame_mask, a.frame_mask);
    }

    proptest! {
        #[test]
        fn mask_is_union_of_start_windows(t in 1usize..60, span in 1usize..6, p in 0.0f64..1.0, seed in any::<u64>()) {
            // Reconstruct starts by replaying the same Bernoulli draws.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_mask(t, p, span, &mut rng);
            let mut replay = ChaCha8Rng::seed_from_u64(seed);
            let starts: Vec<bool> = (0..t).map(|_| replay.random_bool(p)).collect();
            for i in 0..t {
                let lo = (i + 1).saturating_sub(span);
                prop_assert_eq!(m.frame_mask[i], (lo..=i).any(|j| starts[j]));
            }
            let am = m.audio_mask();
            prop_assert_eq!(am.len(), t * SAMPLES_PER_FRAME);
            for (s, &b) in am.iter().enumerate() {
                prop_assert_eq!(b, m.frame_mask[s / SAMPLES_PER_FRAME]);
            }
        }

        #[test]
        fn unmasked_content_is_untouched(t in 1usize..12, seed in any::<u64>()) {
            let x = sample(t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vm = sample_mask(t, 0.3, 3, &mut rng);
            let am = sample_mask(t, 0.3, 3, &mut rng);
            let y = apply_mask(&x, &vm, &am).unwrap();
            for f in 0..t {
                if vm.frame_mask[f] {
                    prop_assert!(y.video.frame(f).iter().all(|&v| v == 0.0));
                } else {
                    prop_assert_eq!(y.video.frame(f), x.video.frame(f));
                }
                let r = f * SAMPLES_PER_FRAME..(f + 1) * SAMPLES_PER_FRAME;
                if am.frame_mask[f] {
                    prop_assert!(y.audio[r].iter().all(|&a| a == 0.0));
                } else {
                    prop_assert_eq!(&y.audio[r.clone()], &x.audio[r]);
                }
            }
        }
    }
}
