//! Paired audio-visual samples: synthetic generation, long-utterance
//! splitting, video augmentation, frame-budget batching and the on-disk
//! dataset container.
//!
//! Video runs at 25 frames/s and audio at 16 kHz, so every frame owns
//! exactly [`SAMPLES_PER_FRAME`] audio samples.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::rng::{streams, substream};

pub const SAMPLES_PER_FRAME: usize = 640;
pub const FRAME_RATE: usize = 25;
pub const SAMPLE_RATE: usize = 16_000;
pub const FRAME_SIZE: usize = 96;
pub const CROP_SIZE: usize = 88;
pub const MAX_SPLIT_SECONDS: f64 = 24.0;
/// Synthetic words are single lowercase letters.
pub const MAX_VOCAB: usize = 26;

/// Grayscale clip stored frame-major: `data[(t * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), frames * height * width);
        Self {
            frames,
            height,
            width,
            data,
        }
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn frames_range(&self, start: usize, end: usize) -> VideoClip {
        let n = self.height * self.width;
        VideoClip::new(
            end - start,
            self.height,
            self.width,
            self.data[start * n..end * n].to_vec(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AVSample {
    pub sample_id: String,
    pub video: VideoClip,
    pub audio: Vec<f32>,
    pub transcript: Option<String>,
    /// Which model produced the transcript, for pseudo-labelled data.
    pub provenance: Option<String>,
}

impl AVSample {
    pub fn frames(&self) -> usize {
        self.video.frames
    }

    pub fn check_alignment(&self) -> Result<()> {
        if self.audio.len() != SAMPLES_PER_FRAME * self.video.frames {
            return Err(Error::LengthMismatch(format!(
                "sample `{}`: {} audio samples for {} frames",
                self.sample_id,
                self.audio.len(),
                self.video.frames
            )));
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub tokens_per_second: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub video_noise_std: f64,
    pub audio_noise_std: f64,
    pub seed: u64,
}

impl From<&DataConfig> for SyntheticSpec {
    fn from(d: &DataConfig) -> Self {
        Self {
            vocab_size: d.vocab_size,
            tokens_per_second: d.tokens_per_second,
            min_seconds: d.min_seconds,
            max_seconds: d.max_seconds,
            video_noise_std: d.video_noise_std,
            audio_noise_std: d.audio_noise_std,
            seed: d.seed,
        }
    }
}

/// The written form of token `k`.
pub fn token_word(k: usize) -> String {
    assert!(k < MAX_VOCAB);
    char::from(b'a' + k as u8).to_string()
}

pub fn word_token(word: &str) -> Option<usize> {
    let mut chars = word.chars();
    let c = chars.next()?;
    if chars.next().is_some() || !c.is_ascii_lowercase() {
        return None;
    }
    Some((c as u8 - b'a') as usize)
}

/// Frame boundaries of `n` evenly sized token segments over `frames`.
pub fn segment_bounds(frames: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| i * frames / n).collect()
}

/// The noise-free 96x96 image rendered for `token`.
pub fn token_template(spec: &SyntheticSpec, token: usize) -> Vec<f32> {
    let mut rng = substream(spec.seed, streams::TEMPLATE, token as u64);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..6.0),
                rng.random_range(1.0..6.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.08..0.2),
            )
        })
        .collect();
    let brightness = rng.random_range(0.3..0.7);
    // A dark "mouth" ellipse whose opening depends on the token.
    let frac = (token as f64 + 0.5) / spec.vocab_size as f64;
    let (ax, ay) = (18.0 + 14.0 * frac, 4.0 + 18.0 * (1.0 - frac));
    let c = (FRAME_SIZE as f64 - 1.0) / 2.0;
    let mut img = Vec::with_capacity(FRAME_SIZE * FRAME_SIZE);
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let (u, v) = (x as f64 / FRAME_SIZE as f64, y as f64 / FRAME_SIZE as f64);
            let mut p = brightness;
            for &(fx, fy, phase, amp) in &gratings {
                p += amp * (2.0 * PI * (fx * u + fy * v) + phase).sin();
            }
            let (dx, dy) = ((x as f64 - c) / ax, (y as f64 - c - 10.0) / ay);
            if dx * dx + dy * dy <= 1.0 {
                p *= 0.3;
            }
            img.push(p.clamp(0.0, 1.0) as f32);
        }
    }
    img
}

/// Frequencies (Hz), amplitudes and phases of the tone mixture for `token`.
/// Frequencies are whole multiples of the frame rate, so every 640-sample
/// frame of a token holds the same waveform.
fn audio_partials(spec: &SyntheticSpec, token: usize) -> Vec<(f64, f64, f64)> {
    let mut rng = substream(spec.seed, streams::TEMPLATE, (1 << 32) | token as u64);
    let snap = |f: f64| (f / FRAME_RATE as f64).round() * FRAME_RATE as f64;
    let base =
        150.0 + 2500.0 * (token as f64 + rng.random_range(0.0..0.5)) / spec.vocab_size as f64;
    let mut partials = vec![(snap(base), 0.35, rng.random_range(0.0..2.0 * PI))];
    for _ in 0..2 {
        partials.push((
            snap(rng.random_range(200.0..4000.0)),
            rng.random_range(0.1..0.2),
            rng.random_range(0.0..2.0 * PI),
        ));
    }
    partials
}

/// Deterministic function of `(spec.seed, index)`.
pub fn generate_sample(spec: &SyntheticSpec, index: u64) -> AVSample {
    let mut rng = substream(spec.seed, streams::SAMPLE, index);
    let seconds = if spec.max_seconds > spec.min_seconds {
        rng.random_range(spec.min_seconds..=spec.max_seconds)
    } else {
        spec.min_seconds
    };
    let frames = ((seconds * FRAME_RATE as f64).round() as usize).max(1);
    let n_tokens = ((frames as f64 / FRAME_RATE as f64 * spec.tokens_per_second).round() as usize)
        .clamp(1, frames);
    let mut tokens = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let tok = if i == 0 || spec.vocab_size < 2 {
            rng.random_range(0..spec.vocab_size)
        } else {
            // never repeat the previous token
            let prev = tokens[i - 1];
            let t = rng.random_range(0..spec.vocab_size - 1);
            if t >= prev {
                t + 1
            } else {
                t
            }
        };
        tokens.push(tok);
    }
    let bounds = segment_bounds(frames, n_tokens);
    let frame_px = FRAME_SIZE * FRAME_SIZE;
    let mut video = vec![0f32; frames * frame_px];
    let mut audio = vec![0f32; frames * SAMPLES_PER_FRAME];
    let video_noise =
        (spec.video_noise_std > 0.0).then(|| Normal::new(0.0, spec.video_noise_std).unwrap());
    let audio_noise =
        (spec.audio_noise_std > 0.0).then(|| Normal::new(0.0, spec.audio_noise_std).unwrap());
    for (i, &tok) in tokens.iter().enumerate() {
        let template = token_template(spec, tok);
        for t in bounds[i]..bounds[i + 1] {
            let dst = &mut video[t * frame_px..(t + 1) * frame_px];
            dst.copy_from_slice(&template);
            if let Some(n) = &video_noise {
                for v in dst.iter_mut() {
                    *v = (*v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
        let partials = audio_partials(spec, tok);
        for s in bounds[i] * SAMPLES_PER_FRAME..bounds[i + 1] * SAMPLES_PER_FRAME {
            let time = s as f64 / SAMPLE_RATE as f64;
            let mut a: f64 = partials
                .iter()
                .map(|&(f, amp, ph)| amp * (2.0 * PI * f * time + ph).sin())
                .sum();
            if let Some(n) = &audio_noise {
                a += n.sample(&mut rng);
            }
            audio[s] = a.clamp(-1.0, 1.0) as f32;
        }
    }
    let transcript = tokens
        .iter()
        .map(|&t| token_word(t))
        .collect::<Vec<_>>()
        .join(" ");
    AVSample {
        sample_id: format!("syn-{}-{index:06}", spec.seed),
        video: VideoClip::new(frames, FRAME_SIZE, FRAME_SIZE, video),
        audio,
        transcript: Some(transcript),
        provenance: None,
    }
}

pub fn generate_dataset(spec: &SyntheticSpec, start: u64, count: usize) -> Vec<AVSample> {
    (start..start + count as u64)
        .map(|i| generate_sample(spec, i))
        .collect()
}

/// Cuts a sample into consecutive pieces of at most `max_seconds`, at exact
/// frame boundaries. Transcript words are assigned to the piece containing
/// the midpoint of their (evenly spaced) segment.
pub fn split_long(sample: &AVSample, max_seconds: f64) -> Vec<AVSample> {
    let max_frames = ((max_seconds * FRAME_RATE as f64).round() as usize).max(1);
    let frames = sample.frames();
    if frames <= max_frames {
        return vec![sample.clone()];
    }
    let words: Vec<&str> = sample
        .transcript
        .as_deref()
        .map(|t| t.split_whitespace().collect())
        .unwrap_or_default();
    let bounds = segment_bounds(frames, words.len().max(1));
    let mut out = Vec::new();
    let mut start = 0;
    let mut part = 0;
    while start < frames {
        let end = (start + max_frames).min(frames);
        let transcript = sample.transcript.as_ref().map(|_| {
            words
                .iter()
                .enumerate()
                .filter(|(i, _)| {
                    let mid2 = bounds[*i] + bounds[*i + 1];
                    mid2 >= 2 * start && mid2 < 2 * end
                })
                .map(|(_, w)| *w)
                .collect::<Vec<_>>()
                .join(" ")
        });
        out.push(AVSample {
            sample_id: format!("{}.part{part}", sample.sample_id),
            video: sample.video.frames_range(start, end),
            audio: sample.audio[start * SAMPLES_PER_FRAME..end * SAMPLES_PER_FRAME].to_vec(),
            transcript,
            provenance: sample.provenance.clone(),
        });
        start = end;
        part += 1;
    }
    out
}

/// Crops an 88x88 window at `(top, left)` from every 96x96 frame and, if
/// `flip`, mirrors it horizontally. The same window and flip apply to every
/// frame.
pub fn augment_video_with(
    clip: &VideoClip,
    flip: bool,
    top: usize,
    left: usize,
) -> Result<VideoClip> {
    if clip.height != FRAME_SIZE || clip.width != FRAME_SIZE {
        return Err(Error::WrongInputSize {
            expected: format!("{FRAME_SIZE}x{FRAME_SIZE}"),
            got: format!("{}x{}", clip.height, clip.width),
        });
    }
    let max_off = FRAME_SIZE - CROP_SIZE;
    assert!(
        top <= max_off && left <= max_off,
        "crop offset out of range"
    );
    let mut data = Vec::with_capacity(clip.frames * CROP_SIZE * CROP_SIZE);
    for t in 0..clip.frames {
        let frame = clip.frame(t);
        for y in 0..CROP_SIZE {
            let row =
                &frame[(top + y) * FRAME_SIZE + left..(top + y) * FRAME_SIZE + left + CROP_SIZE];
            if flip {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
    }
    Ok(VideoClip::new(clip.frames, CROP_SIZE, CROP_SIZE, data))
}

/// Training-time augmentation: horizontal flip with probability 0.5 and a
/// uniformly placed 88x88 crop.
pub fn augment_video<R: Rng>(clip: &VideoClip, rng: &mut R) -> Result<VideoClip> {
    let flip = rng.random_bool(0.5);
    let max_off = FRAME_SIZE - CROP_SIZE;
    let top = rng.random_range(0..=max_off);
    let left = rng.random_range(0..=max_off);
    augment_video_with(clip, flip, top, left)
}

/// Evaluation-time view: the central 88x88 window.
pub fn center_crop(clip: &VideoClip) -> Result<VideoClip> {
    let off = (FRAME_SIZE - CROP_SIZE) / 2;
    augment_video_with(clip, false, off, off)
}

/// Samples padded to a common length. Padded frames are flagged in
/// `padding` and carry zeros.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sample_ids: Vec<String>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    pub height: usize,
    pub width: usize,
    /// `[batch, max_len, height, width]`
    pub video: Vec<f32>,
    /// `[batch, max_len * 640]`
    pub audio: Vec<f32>,
    /// `[batch, max_len]`, true at padded positions.
    pub padding: Vec<bool>,
    pub transcripts: Vec<Option<String>>,
    pub total_frames: usize,
}

impl Batch {
    pub fn from_samples(samples: &[&AVSample]) -> Self {
        assert!(!samples.is_empty());
        let (height, width) = (samples[0].video.height, samples[0].video.width);
        let max_len = samples.iter().map(|s| s.frames()).max().unwrap();
        let px = height * width;
        let mut video = vec![0f32; samples.len() * max_len * px];
        let mut audio = vec![0f32; samples.len() * max_len * SAMPLES_PER_FRAME];
        let mut padding = vec![true; samples.len() * max_len];
        for (b, s) in samples.iter().enumerate() {
            assert_eq!((s.video.height, s.video.width), (height, width));
            let t = s.frames();
            video[b * max_len * px..(b * max_len + t) * px].copy_from_slice(&s.video.data);
            let a0 = b * max_len * SAMPLES_PER_FRAME;
            audio[a0..a0 + s.audio.len()].copy_from_slice(&s.audio);
            padding[b * max_len..b * max_len + t].fill(false);
        }
        Self {
            sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            lengths: samples.iter().map(|s| s.frames()).collect(),
            max_len,
            height,
            width,
            video,
            audio,
            padding,
            transcripts: samples.iter().map(|s| s.transcript.clone()).collect(),
            total_frames: samples.iter().map(|s| s.frames()).sum(),
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The unpadded `i`-th sample.
    pub fn sample(&self, i: usize) -> AVSample {
        let t = self.lengths[i];
        let px = self.height * self.width;
        let v0 = i * self.max_len * px;
        let a0 = i * self.max_len * SAMPLES_PER_FRAME;
        AVSample {
            sample_id: self.sample_ids[i].clone(),
            video: VideoClip::new(
                t,
                self.height,
                self.width,
                self.video[v0..v0 + t * px].to_vec(),
            ),
            audio: self.audio[a0..a0 + t * SAMPLES_PER_FRAME].to_vec(),
            transcript: self.transcripts[i].clone(),
            provenance: None,
        }
    }
}

/// Greedy in-order packing under a per-batch frame budget.
pub fn make_batches(samples: &[AVSample], max_frames: usize) -> Result<Vec<Batch>> {
    Ok(pack_indices(samples, max_frames)?
        .into_iter()
        .map(|idx| Batch::from_samples(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect())
}

/// Index groups produced by the same greedy packing as [`make_batches`].
pub fn pack_indices(samples: &[AVSample], max_frames: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for (i, s) in samples.iter().enumerate() {
        let t = s.frames();
        if t > max_frames {
            return Err(Error::SampleExceedsBudget {
                id: s.sample_id.clone(),
                frames: t,
                budget: max_frames,
            });
        }
        if used + t > max_frames && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += t;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    Ok(groups)
}

// ---------------------------------------------------------------------------
// Container format
//
// <dir>/manifest.jsonl    one JSON object per sample:
//                         {"sample_id", "frames", "transcript", "file", "provenance"}
// <dir>/records/NNNNNN.avr
//   bytes 0..4   magic "AVR1"
//   bytes 4..8   u32 LE header length N
//   next N       UTF-8 JSON header: sample_id, frames, height, width,
//                audio_samples, transcript, provenance
//   then         frames*height*width u8 pixels (value = round(v * 255))
//   then         audio_samples i16 LE PCM (value = round(a * 32767))
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"AVR1";
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub frames: usize,
    pub transcript: Option<String>,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    sample_id: String,
    frames: usize,
    height: usize,
    width: usize,
    audio_samples: usize,
    transcript: Option<String>,
    #[serde(default)]
    provenance: Option<String>,
}

pub fn quantize_pixel(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize_audio(a: f32) -> i16 {
    (a.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn encode_record(sample: &AVSample) -> Vec<u8> {
    let header = RecordHeader {
        sample_id: sample.sample_id.clone(),
        frames: sample.video.frames,
        height: sample.video.height,
        width: sample.video.width,
        audio_samples: sample.audio.len(),
        transcript: sample.transcript.clone(),
        provenance: sample.provenance.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out =
        Vec::with_capacity(8 + header.len() + sample.video.data.len() + 2 * sample.audio.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend(sample.video.data.iter().map(|&v| quantize_pixel(v)));
    for &a in &sample.audio {
        out.extend_from_slice(&quantize_audio(a).to_le_bytes());
    }
    out
}

pub fn decode_record(bytes: &[u8], path: &Path) -> Result<AVSample> {
    let bad = |reason: &str| Error::MalformedContainer {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing record magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let h: RecordHeader =
        serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    if h.audio_samples != h.frames * SAMPLES_PER_FRAME {
        return Err(bad("audio length does not match frame count"));
    }
    let n_px = h.frames * h.height * h.width;
    let expected = 8 + hlen + n_px + 2 * h.audio_samples;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let px = &bytes[8 + hlen..8 + hlen + n_px];
    let video = px.iter().map(|&q| q as f32 / 255.0).collect();
    let audio = bytes[8 + hlen + n_px..]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32767.0)
        .collect();
    Ok(AVSample {
        sample_id: h.sample_id,
        video: VideoClip::new(h.frames, h.height, h.width, video),
        audio,
        transcript: h.transcript,
        provenance: h.provenance,
    })
}

pub fn write_dataset(dir: &Path, samples: &[AVSample]) -> Result<()> {
    let records = dir.join("records");
    fs::create_dir_all(&records).map_err(|e| Error::io(&records, e))?;
    let mut manifest = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        s.check_alignment()?;
        let file = format!("records/{i:06}.avr");
        let path = dir.join(&file);
        fs::write(&path, encode_record(s)).map_err(|e| Error::io(&path, e))?;
        let entry = ManifestEntry {
            sample_id: s.sample_id.clone(),
            frames: s.frames(),
            transcript: s.transcript.clone(),
            file,
            provenance: s.provenance.clone(),
        };
        manifest.extend(serde_json::to_vec(&entry).expect("manifest entry serializes"));
        manifest.push(b'\n');
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::MalformedContainer {
                path: path.clone(),
                reason: format!("line {}: {e}", n + 1),
            })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<AVSample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|entry| {
            let path: PathBuf = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let sample = decode_record(&bytes, &path)?;
            if sample.sample_id != entry.sample_id
                || sample.frames() != entry.frames
                || sample.transcript != entry.transcript
            {
                return Err(Error::MalformedContainer {
                    path,
                    reason: "record disagrees with manifest".into(),
                });
            }
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn spec() -> SyntheticSpec {
        SyntheticSpec::from(&DataConfig {
            min_seconds: 1.0,
            max_seconds: 1.0,
            ..DataConfig::default()
        })
    }

    fn clip_with_pattern(frames: usize) -> VideoClip {
        let data = (0..frames * FRAME_SIZE * FRAME_SIZE)
            .map(|i| (i % 251) as f32 / 251.0)
            .collect();
        VideoClip::new(frames, FRAME_SIZE, FRAME_SIZE, data)
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec();
        assert_eq!(generate_sample(&s, 3), generate_sample(&s, 3));
        assert_ne!(generate_sample(&s, 3), generate_sample(&s, 4));
    }

    #[test]
    fn one_second_geometry() {
        let x = generate_sample(&spec(), 0);
        assert_eq!(x.frames(), 25);
        assert_eq!(x.audio.len(), 16_000);
        assert_eq!((x.video.height, x.video.width), (96, 96));
        x.check_alignment().unwrap();
        assert!(x.video.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(x.audio.iter().all(|a| (-1.0..=1.0).contains(a)));
    }

    #[test]
    fn noise_free_segments_are_constant() {
        let s = SyntheticSpec {
            vocab_size: 2,
            video_noise_std: 0.0,
            audio_noise_std: 0.0,
            ..spec()
        };
        for idx in 0..4 {
            let x = generate_sample(&s, idx);
            let words = x.transcript.as_ref().unwrap().split_whitespace().count();
            let bounds = segment_bounds(x.frames(), words);
            for w in bounds.windows(2) {
                for t in w[0] + 1..w[1] {
                    assert_eq!(x.video.frame(t), x.video.frame(w[0]));
                }
            }
        }
    }

    #[test]
    fn consecutive_tokens_differ() {
        let s = spec();
        for idx in 0..20 {
            let t = generate_sample(&s, idx).transcript.unwrap();
            let w: Vec<_> = t.split_whitespace().collect();
            assert!(w.windows(2).all(|p| p[0] != p[1]));
        }
    }

    #[test]
    fn nearest_template_classifier_is_perfect_without_noise() {
        let s = SyntheticSpec {
            vocab_size: 12,
            video_noise_std: 0.0,
            audio_noise_std: 0.0,
            ..spec()
        };
        let templates: Vec<Vec<f32>> = (0..s.vocab_size).map(|k| token_template(&s, k)).collect();
        for idx in 0..10 {
            let x = generate_sample(&s, idx);
            let words: Vec<usize> = x
                .transcript
                .as_ref()
                .unwrap()
                .split_whitespace()
                .map(|w| word_token(w).unwrap())
                .collect();
            let bounds = segment_bounds(x.frames(), words.len());
            for (i, &tok) in words.iter().enumerate() {
                let frame = x.video.frame(bounds[i]);
                let best = (0..s.vocab_size)
                    .min_by(|&a, &b| {
                        let da: f32 = templates[a]
                            .iter()
                            .zip(frame)
                            .map(|(p, q)| (p - q).powi(2))
                            .sum();
                        let db: f32 = templates[b]
                            .iter()
                            .zip(frame)
                            .map(|(p, q)| (p - q).powi(2))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(best, tok);
            }
        }
    }

    fn long_sample(frames: usize) -> AVSample {
        let s = SyntheticSpec {
            min_seconds: frames as f64 / 25.0,
            max_seconds: frames as f64 / 25.0,
            ..spec()
        };
        generate_sample(&s, 1)
    }

    #[test]
    fn split_thirty_seconds() {
        let x = long_sample(750);
        let parts = split_long(&x, MAX_SPLIT_SECONDS);
        assert_eq!(
            parts.iter().map(|p| p.frames()).collect::<Vec<_>>(),
            vec![600, 150]
        );
        let video: Vec<f32> = parts.iter().flat_map(|p| p.video.data.clone()).collect();
        let audio: Vec<f32> = parts.iter().flat_map(|p| p.audio.clone()).collect();
        assert_eq!(video, x.video.data);
        assert_eq!(audio, x.audio);
        let words: Vec<String> = parts
            .iter()
            .map(|p| p.transcript.clone().unwrap())
            .collect();
        assert_eq!(words.join(" "), x.transcript.unwrap());
        for p in &parts {
            p.check_alignment().unwrap();
        }
    }

    #[test]
    fn split_boundary_and_short() {
        let x = long_sample(600);
        assert_eq!(split_long(&x, 24.0), vec![x.clone()]);
        let y = generate_sample(&spec(), 0);
        assert_eq!(split_long(&y, 24.0), vec![y.clone()]);
    }

    #[test]
    fn forced_crop_is_top_left() {
        let clip = clip_with_pattern(2);
        let out = augment_video_with(&clip, false, 0, 0).unwrap();
        assert_eq!((out.height, out.width), (88, 88));
        for t in 0..2 {
            for y in 0..88 {
                for x in 0..88 {
                    assert_eq!(out.frame(t)[y * 88 + x], clip.frame(t)[y * 96 + x]);
                }
            }
        }
    }

    #[test]
    fn flip_reflects_columns() {
        let clip = clip_with_pattern(3);
        let plain = augment_video_with(&clip, false, 5, 2).unwrap();
        let flipped = augment_video_with(&clip, true, 5, 2).unwrap();
        for t in 0..3 {
            for y in 0..88 {
                for j in 0..88 {
                    assert_eq!(
                        flipped.frame(t)[y * 88 + j],
                        plain.frame(t)[y * 88 + 87 - j]
                    );
                }
            }
        }
    }

    #[test]
    fn augmentation_rejects_wrong_size() {
        let clip = VideoClip::new(1, 88, 88, vec![0.0; 88 * 88]);
        assert!(matches!(
            center_crop(&clip),
            Err(Error::WrongInputSize { .. })
        ));
    }

    #[test]
    fn random_augmentation_is_joint_across_frames() {
        // identical frames must stay identical after augmentation
        let one = clip_with_pattern(1);
        let clip = VideoClip::new(4, 96, 96, one.data.repeat(4));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = augment_video(&clip, &mut rng).unwrap();
            for t in 1..4 {
                assert_eq!(out.frame(t), out.frame(0));
            }
        }
    }

    #[test]
    fn flip_frequency_matches_binomial() {
        // Asymmetric single-frame pattern: the flip decision is recoverable
        // from whether the brightest column lands left or right.
        let mut data = vec![0f32; 96 * 96];
        for y in 0..96 {
            for x in 0..96 {
                data[y * 96 + x] = x as f32 / 96.0;
            }
        }
        let clip = VideoClip::new(1, 96, 96, data);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let flips = (0..n)
            .filter(|_| {
                let out = augment_video(&clip, &mut rng).unwrap();
                out.frame(0)[0] > out.frame(0)[87]
            })
            .count();
        let freq = flips as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "flip frequency {freq}");
    }

    fn sized(frames: &[usize]) -> Vec<AVSample> {
        frames
            .iter()
            .enumerate()
            .map(|(i, &t)| AVSample {
                sample_id: format!("s{i}"),
                video: VideoClip::new(t, 2, 2, vec![0.5; t * 4]),
                audio: vec![0.0; t * SAMPLES_PER_FRAME],
                transcript: None,
                provenance: None,
            })
            .collect()
    }

    #[test]
    fn greedy_packing() {
        let s = sized(&[100, 100, 100]);
        assert_eq!(pack_indices(&s, 250).unwrap(), vec![vec![0, 1], vec![2]]);
        let b = make_batches(&s, 250).unwrap();
        assert_eq!(b[0].total_frames, 200);
        assert_eq!(b[1].sample_ids, vec!["s2"]);
    }

    #[test]
    fn packing_boundaries() {
        let s = sized(&[2400]);
        assert_eq!(pack_indices(&s, 2400).unwrap(), vec![vec![0]]);
        let s = sized(&[2401]);
        assert!(matches!(
            make_batches(&s, 2400),
            Err(Error::SampleExceedsBudget { .. })
        ));
    }

    #[test]
    fn batch_padding_and_unpadding() {
        let s = sized(&[3, 5]);
        let b = Batch::from_samples(&[&s[0], &s[1]]);
        assert_eq!(b.max_len, 5);
        assert_eq!(
            b.padding,
            vec![false, false, false, true, true, false, false, false, false, false]
        );
        assert_eq!(b.sample(0).video, s[0].video);
        assert_eq!(b.sample(1).audio, s[1].audio);
    }

    #[test]
    fn record_rejects_truncation() {
        let x = generate_sample(&spec(), 0);
        let bytes = encode_record(&x);
        let p = Path::new("x.avr");
        assert!(decode_record(&bytes, p).is_ok());
        assert!(matches!(
            decode_record(&bytes[..bytes.len() - 1], p),
            Err(Error::MalformedContainer { .. })
        ));
        assert!(matches!(
            decode_record(&bytes[..6], p),
            Err(Error::MalformedContainer { .. })
        ));
    }
}
