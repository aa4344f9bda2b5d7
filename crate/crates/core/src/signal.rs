//! Time-frequency front end: STFT analysis and synthesis with a square-root
//! Hann window at 75% overlap, synthetic mixtures, dominant-speaker targets,
//! mask application and 16-bit PCM WAV I/O.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objective::TargetMatrix;
use crate::simplex::TargetMode;

/// Bins quieter than this (dB below the loudest mixture bin) count as silent.
pub const DEFAULT_SILENCE_DB: f64 = -40.0;

/// Offset inside the log of the network features.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            win_len: 256,
            hop: 64,
            sample_rate: 8000,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || !self.win_len.is_multiple_of(2) || self.win_len != 4 * self.hop {
            return Err(Error::invalid(format!(
                "STFT needs an even window of exactly four hops, got win_len={} hop={}",
                self.win_len, self.hop
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }

    /// One-sided bin count `win_len/2 + 1`.
    pub fn n_freqs(&self) -> usize {
        self.win_len / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win_len {
            0
        } else {
            1 + (n_samples - self.win_len) / self.hop
        }
    }

    /// Length of the signal synthesized from `n_frames` frames.
    pub fn synthesis_len(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            0
        } else {
            (n_frames - 1) * self.hop + self.win_len
        }
    }

    /// Square root of the periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_len as f64;
        (0..self.win_len)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt())
            .collect()
    }

    /// Overlap-added squared window for `n_frames` frames.
    pub fn overlap_envelope(&self, n_frames: usize) -> Vec<f64> {
        let w = self.window();
        let mut env = vec![0.0; self.synthesis_len(n_frames)];
        for t in 0..n_frames {
            for (e, wi) in env[t * self.hop..].iter_mut().zip(&w) {
                *e += wi * wi;
            }
        }
        env
    }

    /// Peak-to-peak ripple of the overlap envelope away from the edges.
    /// Zero (up to rounding) when the window/hop pair satisfies COLA.
    pub fn cola_ripple(&self) -> f64 {
        let frames = 2 * (self.win_len / self.hop) + 1;
        let env = self.overlap_envelope(frames);
        let interior = &env[self.win_len..env.len() - self.win_len];
        let (lo, hi) = interior
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        hi - lo
    }
}

/// Maximum allowed COLA ripple before synthesis refuses to run.
pub const COLA_TOLERANCE: f64 = 1e-10;

/// Complex one-sided spectrogram, `frames x bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::shape("Spectrogram", frames * bins, data.len()));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    pub fn magnitudes(&self) -> Matrix {
        let mags = self.data.iter().map(|c| c.norm()).collect();
        Matrix::from_vec(self.frames, self.bins, mags).expect("shape is consistent")
    }
}

pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if x.len() < cfg.win_len {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than the {}-sample window",
            x.len(),
            cfg.win_len
        )));
    }
    let window = cfg.window();
    let frames = cfg.n_frames(x.len());
    let bins = cfg.n_freqs();
    let fft = FftPlanner::new().plan_fft_forward(cfg.win_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.win_len];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let seg = &x[t * cfg.hop..t * cfg.hop + cfg.win_len];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Spectrogram::from_vec(frames, bins, data)
}

/// Weighted overlap-add synthesis. Output has `(T-1)·hop + win_len` samples;
/// edge samples covered by a partial envelope are rescaled by that envelope.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if spec.bins() != cfg.n_freqs() {
        return Err(Error::shape("istft", format!("{} bins", cfg.n_freqs()), spec.bins()));
    }
    let ripple = cfg.cola_ripple();
    if ripple > COLA_TOLERANCE {
        return Err(Error::Degenerate(format!("window violates COLA (ripple {ripple:e})")));
    }
    let n = cfg.win_len;
    let window = cfg.window();
    let envelope = cfg.overlap_envelope(spec.frames());
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut out = vec![0.0; cfg.synthesis_len(spec.frames())];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for t in 0..spec.frames() {
        let row = &spec.data[t * spec.bins..(t + 1) * spec.bins];
        buf[0] = Complex64::new(row[0].re, 0.0);
        buf[half] = Complex64::new(row[half].re, 0.0);
        for k in 1..half {
            buf[k] = row[k];
            buf[n - k] = row[k].conj();
        }
        ifft.process(&mut buf);
        for ((o, b), &w) in out[t * cfg.hop..].iter_mut().zip(&buf).zip(&window) {
            *o += b.re / n as f64 * w;
        }
    }
    for (o, &e) in out.iter_mut().zip(&envelope) {
        *o = if e > 1e-10 { *o / e } else { 0.0 };
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    /// Tones confined to disjoint frequency bands, one band per speaker.
    DisjointTones,
    /// One random linear chirp per speaker.
    Chirps,
    /// Band-limited noise in partially overlapping bands.
    OverlappedTones,
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::DisjointTones => "disjoint_tones",
            SceneKind::Chirps => "chirps",
            SceneKind::OverlappedTones => "overlapped_tones",
        })
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint_tones" => Ok(SceneKind::DisjointTones),
            "chirps" => Ok(SceneKind::Chirps),
            "overlapped_tones" => Ok(SceneKind::OverlappedTones),
            other => Err(Error::invalid(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub kind: SceneKind,
    pub n_speakers: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Leading stretch zeroed in every source.
    pub leading_silence_s: f64,
    pub silence_db: f64,
}

impl SceneParams {
    pub fn new(kind: SceneKind, n_speakers: usize, duration_s: f64, seed: u64) -> Self {
        Self {
            kind,
            n_speakers,
            duration_s,
            seed,
            leading_silence_s: 0.0,
            silence_db: DEFAULT_SILENCE_DB,
        }
    }
}

/// A mixture, its references and everything derived from their spectrograms.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureScene {
    pub mixture: Vec<f64>,
    pub sources: Vec<Vec<f64>>,
    pub mix_spec: Spectrogram,
    /// Per-source magnitudes, each `T x F`.
    pub src_mags: Vec<Matrix>,
    /// Dominant source per bin, flattened `t·F + f`.
    pub indicator: Vec<usize>,
    pub silence_mask: Vec<bool>,
}

impl MixtureScene {
    /// Builds a scene whose mixture is the sample-wise sum of `sources`.
    pub fn from_sources(sources: Vec<Vec<f64>>, cfg: &StftConfig, silence_db: f64) -> Result<Self> {
        let len = sources.first().map_or(0, Vec::len);
        if sources.is_empty() || sources.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("sources must be non-empty and of equal length"));
        }
        let mut mixture = vec![0.0; len];
        for s in &sources {
            for (m, &x) in mixture.iter_mut().zip(s) {
                *m += x;
            }
        }
        let mix_spec = stft(&mixture, cfg)?;
        let src_mags = sources
            .iter()
            .map(|s| stft(s, cfg).map(|spec| spec.magnitudes()))
            .collect::<Result<Vec<_>>>()?;

        let bins = mix_spec.frames() * mix_spec.bins();
        let indicator = (0..bins)
            .map(|i| {
                let mut best = 0;
                for n in 1..src_mags.len() {
                    if src_mags[n].as_slice()[i] > src_mags[best].as_slice()[i] {
                        best = n;
                    }
                }
                best
            })
            .collect();

        let mix_mag = mix_spec.magnitudes();
        let peak = mix_mag.as_slice().iter().copied().fold(0.0, f64::max);
        let threshold = peak * 10f64.powf(silence_db / 20.0);
        let silence_mask = mix_mag.as_slice().iter().map(|&m| m < threshold).collect();

        Ok(Self {
            mixture,
            sources,
            mix_spec,
            src_mags,
            indicator,
            silence_mask,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.sources.len()
    }

    pub fn n_frames(&self) -> usize {
        self.mix_spec.frames()
    }

    pub fn n_freqs(&self) -> usize {
        self.mix_spec.bins()
    }

    pub fn mix_mag(&self) -> Matrix {
        self.mix_spec.magnitudes()
    }

    /// Bins that survive the silence threshold, or all bins.
    pub fn kept_bins(&self, drop_silence: bool) -> Vec<usize> {
        (0..self.indicator.len())
            .filter(|&i| !(drop_silence && self.silence_mask[i]))
            .collect()
    }

    /// Binary masks selecting each source's dominant bins.
    pub fn ideal_binary_masks(&self) -> Vec<Matrix> {
        let (t, f) = (self.n_frames(), self.n_freqs());
        (0..self.n_speakers())
            .map(|n| {
                let data = self.indicator.iter().map(|&l| if l == n { 1.0 } else { 0.0 }).collect();
                Matrix::from_vec(t, f, data).expect("shape is consistent")
            })
            .collect()
    }
}

pub fn synth_scene(params: &SceneParams, cfg: &StftConfig) -> Result<MixtureScene> {
    cfg.validate()?;
    if !(2..=3).contains(&params.n_speakers) {
        return Err(Error::invalid(format!(
            "synthetic scenes support 2 or 3 speakers, got {}",
            params.n_speakers
        )));
    }
    if params.duration_s.is_nan() || params.duration_s < 0.5 {
        return Err(Error::invalid(format!(
            "scene duration must be at least 0.5 s, got {}",
            params.duration_s
        )));
    }
    let fs = f64::from(cfg.sample_rate);
    let len = (params.duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut sources = match params.kind {
        SceneKind::DisjointTones => disjoint_tones(&mut rng, params.n_speakers, len, cfg),
        SceneKind::Chirps => chirps(&mut rng, params.n_speakers, len, fs),
        SceneKind::OverlappedTones => overlapped_noise(&mut rng, params.n_speakers, len, cfg),
    };

    for s in &mut sources {
        let rms = (s.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
        let gain_db: f64 = rng.random_range(-2.5..=2.5);
        let g = 10f64.powf(gain_db / 20.0) / rms.max(1e-12);
        s.iter_mut().for_each(|x| *x *= g);
    }
    let silent = ((params.leading_silence_s * fs).round() as usize).min(len);
    for s in &mut sources {
        s[..silent].iter_mut().for_each(|x| *x = 0.0);
    }
    // Headroom for 16-bit export.
    let peak = (0..len)
        .map(|i| sources.iter().map(|s| s[i]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    if peak > 0.0 {
        let g = 0.5 / peak;
        sources.iter_mut().flatten().for_each(|x| *x *= g);
    }
    MixtureScene::from_sources(sources, cfg, params.silence_db)
}

fn disjoint_tones(rng: &mut ChaCha8Rng, n: usize, len: usize, cfg: &StftConfig) -> Vec<Vec<f64>> {
    const GUARD_BINS: f64 = 5.0;
    const TONES: usize = 3;
    let bin_hz = f64::from(cfg.sample_rate) / cfg.win_len as f64;
    let lo = 4.0;
    let hi = (cfg.n_freqs() - 5) as f64;
    let width = (hi - lo) / n as f64;
    // Jitter the inner band edges, then hand bands to speakers in random order.
    let mut edges: Vec<f64> = (0..=n).map(|i| lo + width * i as f64).collect();
    for e in edges.iter_mut().take(n).skip(1) {
        *e += rng.random_range(-0.2..0.2) * width;
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    (0..n)
        .map(|speaker| {
            let band = order[speaker];
            let (a, b) = (edges[band] + GUARD_BINS, edges[band + 1] - GUARD_BINS);
            let tones: Vec<(f64, f64, f64)> = (0..TONES)
                .map(|_| {
                    let f = rng.random_range(a..b) * bin_hz;
                    let amp = rng.random_range(0.5..1.0);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    (f, amp, phase)
                })
                .collect();
            let fs = f64::from(cfg.sample_rate);
            (0..len)
                .map(|i| {
                    let t = i as f64 / fs;
                    tones.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
                })
                .collect()
        })
        .collect()
}

fn chirps(rng: &mut ChaCha8Rng, n: usize, len: usize, fs: f64) -> Vec<Vec<f64>> {
    let duration = len as f64 / fs;
    (0..n)
        .map(|_| {
            let f0 = rng.random_range(150.0..0.45 * fs);
            let f1 = rng.random_range(150.0..0.45 * fs);
            let phase = rng.random_range(0.0..2.0 * PI);
            (0..len)
                .map(|i| {
                    let t = i as f64 / fs;
                    (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * duration)) + phase).sin()
                })
                .collect()
        })
        .collect()
}

fn overlapped_noise(rng: &mut ChaCha8Rng, n: usize, len: usize, cfg: &StftConfig) -> Vec<Vec<f64>> {
    // Bands of 1.6/(n+0.6) of the usable range, so neighbours share 0.6 of a step.
    let fs = f64::from(cfg.sample_rate);
    let (lo, hi) = (100.0, 0.45 * fs);
    let step = (hi - lo) / (n as f64 + 0.6);
    let fft = FftPlanner::new().plan_fft_forward(len);
    let ifft = FftPlanner::new().plan_fft_inverse(len);
    (0..n)
        .map(|k| {
            let jitter = rng.random_range(-0.1..0.1) * step;
            let a = (lo + k as f64 * step + jitter).max(lo);
            let b = (a + 1.6 * step).min(hi);
            let mut buf: Vec<Complex64> = (0..len)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), 0.0))
                .collect();
            fft.process(&mut buf);
            for (i, c) in buf.iter_mut().enumerate() {
                let bin = i.min(len - i) as f64 * fs / len as f64;
                if bin < a || bin > b {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
            ifft.process(&mut buf);
            buf.iter().map(|c| c.re / len as f64).collect()
        })
        .collect()
}

/// Target rows for every kept bin and the kept-bin positions in `t·F + f` order.
pub fn indicator_and_targets(
    scene: &MixtureScene,
    mode: TargetMode,
    drop_silence: bool,
) -> Result<(TargetMatrix, Vec<usize>)> {
    let kept = scene.kept_bins(drop_silence);
    let labels: Vec<usize> = kept.iter().map(|&i| scene.indicator[i]).collect();
    let targets = TargetMatrix::from_labels(&labels, scene.n_speakers(), mode)?;
    Ok((targets, kept))
}

/// `mask_n ⊙ X` for every mask, reusing the mixture phase.
pub fn apply_masks(mix_spec: &Spectrogram, masks: &[Matrix]) -> Result<Vec<Spectrogram>> {
    masks
        .iter()
        .map(|m| {
            if m.shape() != (mix_spec.frames(), mix_spec.bins()) {
                return Err(Error::shape(
                    "apply_masks",
                    format!("{}x{}", mix_spec.frames(), mix_spec.bins()),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
            let data = mix_spec
                .as_slice()
                .iter()
                .zip(m.as_slice())
                .map(|(c, &g)| c * g)
                .collect();
            Spectrogram::from_vec(mix_spec.frames(), mix_spec.bins(), data)
        })
        .collect()
}

/// Log-magnitude features normalized to zero mean and unit variance over the
/// utterance, with `context` neighbouring frames stacked per row
/// (edge frames are repeated). Result is `T x (context·F)`.
pub fn log_magnitude_features(spec: &Spectrogram, context: usize) -> Result<Matrix> {
    if context.is_multiple_of(2) {
        return Err(Error::invalid(format!("context must be odd, got {context}")));
    }
    let (t, f) = (spec.frames(), spec.bins());
    let logs: Vec<f64> = spec.as_slice().iter().map(|c| (c.norm() + LOG_FLOOR).ln()).collect();
    let count = logs.len().max(1) as f64;
    let mean = logs.iter().sum::<f64>() / count;
    let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
    let std = var.sqrt().max(1e-8);
    let normed: Vec<f64> = logs.iter().map(|x| (x - mean) / std).collect();

    let half = (context / 2) as isize;
    let mut out = Matrix::zeros(t, context * f);
    for frame in 0..t {
        let row = out.row_mut(frame);
        for (c, offset) in (-half..=half).enumerate() {
            let src = (frame as isize + offset).clamp(0, t as isize - 1) as usize;
            row[c * f..(c + 1) * f].copy_from_slice(&normed[src * f..(src + 1) * f]);
        }
    }
    Ok(out)
}

const PCM_SCALE: f64 = 32768.0;

/// Quantizes to 16-bit PCM the way [`wav_write`] does.
pub fn quantize_pcm16(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

pub fn wav_write(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        writer.write_sample(quantize_pcm16(s)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Reads a mono 16-bit PCM WAV file as samples in `[-1, 1)` plus its sample rate.
pub fn wav_read(path: &Path) -> Result<(Vec<f64>, u32)> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected mono 16-bit PCM, found {} channel(s) at {} bits",
                spec.channels, spec.bits_per_sample
            ),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok((samples, spec.sample_rate))
}

/// Identity of a scene written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub kind: SceneKind,
    pub seed: u64,
    pub sample_rate: u32,
    pub n_speakers: usize,
}

impl SceneMeta {
    pub fn to_text(&self) -> String {
        format!(
            "kind={}\nseed={}\nsample_rate={}\nn_speakers={}\n",
            self.kind, self.seed, self.sample_rate, self.n_speakers
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut kind = None;
        let mut seed = None;
        let mut sample_rate = None;
        let mut n_speakers = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let v = v.trim();
            let num_err = |_| bad(format!("bad value for {k}: {v:?}"));
            match k.trim() {
                "kind" => kind = Some(v.parse::<SceneKind>().map_err(|e| bad(e.to_string()))?),
                "seed" => seed = Some(v.parse().map_err(num_err)?),
                "sample_rate" => sample_rate = Some(v.parse().map_err(num_err)?),
                "n_speakers" => n_speakers = Some(v.parse().map_err(num_err)?),
                _ => {}
            }
        }
        Ok(Self {
            kind: kind.ok_or_else(|| bad("missing kind".into()))?,
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            sample_rate: sample_rate.ok_or_else(|| bad("missing sample_rate".into()))?,
            n_speakers: n_speakers.ok_or_else(|| bad("missing n_speakers".into()))?,
        })
    }
}

/// Writes `mixture.wav`, `src<n>.wav` and `meta.txt` into `dir`.
pub fn write_scene_dir(dir: &Path, scene: &MixtureScene, meta: &SceneMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    wav_write(&dir.join("mixture.wav"), &scene.mixture, meta.sample_rate)?;
    for (n, s) in scene.sources.iter().enumerate() {
        wav_write(&dir.join(format!("src{n}.wav")), s, meta.sample_rate)?;
    }
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, meta.to_text()).map_err(|e| Error::io(meta_path, e))
}

/// Loads a scene directory. The mixture is rebuilt as the sum of the
/// quantized sources so it stays consistent with the references.
pub fn read_scene_dir(dir: &Path, cfg: &StftConfig, silence_db: f64) -> Result<(MixtureScene, SceneMeta)> {
    let meta_path = dir.join("meta.txt");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = SceneMeta::parse(&text, &meta_path)?;
    if meta.sample_rate != cfg.sample_rate {
        return Err(Error::Format {
            path: meta_path,
            message: format!(
                "scene sample rate {} does not match configured {}",
                meta.sample_rate, cfg.sample_rate
            ),
        });
    }
    let sources = (0..meta.n_speakers)
        .map(|n| wav_read(&dir.join(format!("src{n}.wav"))).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok((MixtureScene::from_sources(sources, cfg, silence_db)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> StftConfig {
        StftConfig::default()
    }

    #[test]
    fn window_is_cola_at_75_percent() {
        assert!(cfg().cola_ripple() < 1e-10);
        let env = cfg().overlap_envelope(20);
        assert!((env[600] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let half = StftConfig { hop: 128, ..cfg() };
        assert!(half.validate().is_err());
        assert!(stft(&[0.0; 100], &cfg()).is_err());
    }

    #[test]
    fn zeros_in_zeros_out() {
        let z = stft(&vec![0.0; 2000], &cfg()).unwrap();
        assert!(z.as_slice().iter().all(|c| c.norm() == 0.0));
        let back = istft(&Spectrogram::zeros(10, 129), &cfg()).unwrap();
        assert_eq!(back.len(), 9 * 64 + 256);
        assert!(back.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bin_centred_sine_stays_in_its_bin() {
        let c = cfg();
        let k = 20;
        let f = k as f64 * f64::from(c.sample_rate) / c.win_len as f64;
        let x: Vec<f64> = (0..4000)
            .map(|i| (2.0 * PI * f * i as f64 / f64::from(c.sample_rate)).sin())
            .collect();
        let spec = stft(&x, &c).unwrap();
        // the sine window spreads a bin-centred tone over its two neighbours
        for t in 0..spec.frames() {
            let total: f64 = (0..spec.bins()).map(|b| spec.get(t, b).norm_sqr()).sum();
            let near: f64 = (k - 1..=k + 1).map(|b| spec.get(t, b).norm_sqr()).sum();
            assert!(near / total > 0.99, "frame {t}: {}", near / total);
        }
    }

    #[test]
    fn rejects_mismatched_spectrogram() {
        assert!(istft(&Spectrogram::zeros(4, 100), &cfg()).is_err());
        assert!(apply_masks(&Spectrogram::zeros(4, 129), &[Matrix::zeros(4, 128)]).is_err());
    }

    #[test]
    fn scene_determinism_and_sum() {
        let c = cfg();
        let p = SceneParams::new(SceneKind::DisjointTones, 2, 0.5, 11);
        let a = synth_scene(&p, &c).unwrap();
        let b = synth_scene(&p, &c).unwrap();
        assert_eq!(a, b);
        let other = synth_scene(&SceneParams { seed: 12, ..p.clone() }, &c).unwrap();
        assert_ne!(a.mixture, other.mixture);
        for i in 0..a.mixture.len() {
            assert_eq!(a.mixture[i], a.sources[0][i] + a.sources[1][i]);
        }
    }

    #[test]
    fn scene_rejects_unsupported() {
        let c = cfg();
        assert!(synth_scene(&SceneParams::new(SceneKind::Chirps, 4, 1.0, 0), &c).is_err());
        assert!(synth_scene(&SceneParams::new(SceneKind::Chirps, 2, 0.2, 0), &c).is_err());
        assert!("tones".parse::<SceneKind>().is_err());
    }

    #[test]
    fn every_kind_generates() {
        for kind in [SceneKind::DisjointTones, SceneKind::Chirps, SceneKind::OverlappedTones] {
            for n in [2, 3] {
                let s = synth_scene(&SceneParams::new(kind, n, 0.5, 3), &cfg()).unwrap();
                assert_eq!(s.n_speakers(), n);
                assert!(s.mixture.iter().all(|x| x.abs() <= 0.5 + 1e-12));
                assert!(s.indicator.iter().all(|&l| l < n));
            }
        }
    }

    #[test]
    fn targets_follow_indicator() {
        let s = synth_scene(&SceneParams::new(SceneKind::Chirps, 2, 0.5, 4), &cfg()).unwrap();
        let (y, kept) = indicator_and_targets(&s, TargetMode::OneHot, false).unwrap();
        assert_eq!(kept.len(), s.indicator.len());
        for (r, &i) in kept.iter().enumerate() {
            let row = y.matrix().row(r);
            assert_eq!(row[s.indicator[i]], 1.0);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        let (y, _) = indicator_and_targets(&s, TargetMode::Simplex, false).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for row in y.matrix().iter_rows() {
            assert!((row[0].abs() - h).abs() < 1e-7 && (row[0] + row[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn leading_silence_is_dropped() {
        let mut p = SceneParams::new(SceneKind::DisjointTones, 2, 2.0, 5);
        p.leading_silence_s = 1.0;
        let s = synth_scene(&p, &cfg()).unwrap();
        let (y, kept) = indicator_and_targets(&s, TargetMode::OneHot, true).unwrap();
        assert!(kept.len() < s.indicator.len());
        assert_eq!(y.rows(), kept.len());
        // the first frame lies wholly inside the silent stretch
        assert!((0..s.n_freqs()).all(|f| s.silence_mask[f]));
    }

    #[test]
    fn indicator_is_permutation_equivariant() {
        let s = synth_scene(&SceneParams::new(SceneKind::OverlappedTones, 3, 0.5, 8), &cfg()).unwrap();
        let perm = [2, 0, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| s.sources[p].clone()).collect();
        let t = MixtureScene::from_sources(permuted, &cfg(), DEFAULT_SILENCE_DB).unwrap();
        for (a, b) in s.indicator.iter().zip(&t.indicator) {
            assert_eq!(perm[*b], *a);
        }
    }

    #[test]
    fn masks_apply_linearly() {
        let s = synth_scene(&SceneParams::new(SceneKind::Chirps, 2, 0.5, 6), &cfg()).unwrap();
        let (t, f) = (s.n_frames(), s.n_freqs());
        let ones = Matrix::from_vec(t, f, vec![1.0; t * f]).unwrap();
        let out = apply_masks(&s.mix_spec, &[ones, Matrix::zeros(t, f)]).unwrap();
        assert_eq!(out[0], s.mix_spec);
        assert!(out[1].as_slice().iter().all(|c| c.norm() == 0.0));

        let ibm = s.ideal_binary_masks();
        let parts = apply_masks(&s.mix_spec, &ibm).unwrap();
        for i in 0..t * f {
            assert_eq!(parts[0].as_slice()[i] + parts[1].as_slice()[i], s.mix_spec.as_slice()[i]);
        }
    }

    #[test]
    fn features_are_standardized() {
        let s = synth_scene(&SceneParams::new(SceneKind::Chirps, 2, 0.5, 6), &cfg()).unwrap();
        let feats = log_magnitude_features(&s.mix_spec, 3).unwrap();
        assert_eq!(feats.shape(), (s.n_frames(), 3 * s.n_freqs()));
        let f = s.n_freqs();
        let centre: Vec<f64> = feats.iter_rows().flat_map(|r| r[f..2 * f].to_vec()).collect();
        let mean = centre.iter().sum::<f64>() / centre.len() as f64;
        let var = centre.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / centre.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        assert!(log_magnitude_features(&s.mix_spec, 4).is_err());
    }

    #[test]
    fn wav_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.01).sin() * 0.9).collect();
        wav_write(&path, &x, 8000).unwrap();
        let (y, sr) = wav_read(&path).unwrap();
        assert_eq!(sr, 8000);
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(f64::from(quantize_pcm16(*a)) / 32768.0, *b);
        }
        let again = dir.path().join("y.wav");
        wav_write(&again, &y, 8000).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

        let junk = dir.path().join("junk.wav");
        fs::write(&junk, b"RIFF0000WAVEnope").unwrap();
        assert!(matches!(wav_read(&junk), Err(Error::Wav { .. })));

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(wav_read(&stereo), Err(Error::Format { .. })));
    }

    #[test]
    fn scene_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        let s = synth_scene(&SceneParams::new(SceneKind::DisjointTones, 3, 0.5, 2), &c).unwrap();
        let meta = SceneMeta { kind: SceneKind::DisjointTones, seed: 2, sample_rate: 8000, n_speakers: 3 };
        write_scene_dir(dir.path(), &s, &meta).unwrap();
        let (back, m) = read_scene_dir(dir.path(), &c, DEFAULT_SILENCE_DB).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.n_speakers(), 3);
        assert!(back.sources[1].iter().zip(&s.sources[1]).all(|(a, b)| (a - b).abs() <= 0.5 / 32768.0));
        let wrong = StftConfig { sample_rate: 16000, ..c };
        assert!(read_scene_dir(dir.path(), &wrong, DEFAULT_SILENCE_DB).is_err());
    }
}
