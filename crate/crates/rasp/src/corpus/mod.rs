//! Synthetic speaker corpus: template-based speaker models, utterance
//! rendering, SIR-controlled mixing, and batch sampling.
//!
//! Each speaker is a fixed log-power template plus a few modulation bases;
//! an utterance is the template with sinusoidally modulated bases and white
//! noise on top, so per-speaker statistics are stationary and the time
//! average converges to the template. Mixtures are formed in the log-power
//! feature domain: powers add bin-wise after scaling the interfering stream
//! to the requested signal-to-interference ratio. The real-audio path (see
//! [`frontend`]) produces the same `F x T` log-power frame matrices from
//! 16 kHz PCM.
//!
//! Everything is reproducible from `(config, seed)`; parallel workers can
//! generate batches keyed by disjoint seeds.

mod features;
pub mod frontend;

pub use features::{
    read_frame_matrix, read_meta, write_corpus, write_frame_matrix, CorpusMeta, FRAME_MAGIC,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A frame matrix is an `F x T` (or `D x T`) rank-2 [`Tensor`].
pub type FrameMatrix = Tensor;

/// Generation parameters for the synthetic speaker population.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenParams {
    /// Mean of the isotropic template prior, per dimension.
    pub prior_mean: f64,
    /// Standard deviation of the template prior.
    pub prior_std: f64,
    /// Rejection floor on pairwise Euclidean template distance.
    pub min_template_dist: f64,
    /// Number of modulation bases per speaker.
    pub modulation_rank: usize,
    /// Peak amplitude of the sinusoidal modulation coefficients.
    pub modulation_amp: f64,
    /// Standard deviation of per-bin white noise.
    pub noise_std: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            prior_mean: 0.0,
            prior_std: 1.0,
            min_template_dist: 4.0,
            modulation_rank: 3,
            modulation_amp: 0.6,
            noise_std: 0.3,
        }
    }
}

/// One synthetic speaker identity.
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    /// Label in `[0, S)`.
    pub id: usize,
    /// F-dimensional log-power base vector.
    pub template: Vec<f64>,
    /// Unit-norm variation bases, `modulation_rank` of them.
    pub modulation: Vec<Vec<f64>>,
    /// Seed stream for this speaker's utterances.
    pub seed: u64,
}

/// What went into a [`Sample`]: which speakers, at what SIR, for how long.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub speaker_ids: Vec<usize>,
    /// `None` for single-speaker samples (the `+inf` dB convention).
    pub sir_db: Option<f64>,
    pub duration_frames: usize,
}

/// One training/evaluation sample: features plus its ordered speaker set.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: FrameMatrix,
    pub speakers: Vec<usize>,
    pub spec: MixtureSpec,
}

/// Batch composition for [`sample_batch`].
#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub singles: usize,
    pub mixtures: usize,
    pub frames: usize,
    pub sir_range: (f64, f64),
}

/// Draw `s` speaker models with `f`-dimensional templates, deterministically
/// from `seed`. Pairwise template distances are kept above the configured
/// floor by rejection sampling.
pub fn generate_speaker_set(
    s: usize,
    f: usize,
    seed_value: u64,
    params: &GenParams,
) -> Result<Vec<SpeakerModel>> {
    if s < 2 {
        return Err(Error::InvalidArgument(format!(
            "speaker count must be >= 2, got {s}"
        )));
    }
    if f < 4 {
        return Err(Error::InvalidArgument(format!(
            "feature dim must be >= 4, got {f}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed::derive(seed_value, "speaker-set", 0));
    let prior = Normal::new(params.prior_mean, params.prior_std)
        .map_err(|e| Error::InvalidArgument(format!("template prior: {e}")))?;
    let unit = Normal::new(0.0, 1.0).expect("valid");

    let mut speakers: Vec<SpeakerModel> = Vec::with_capacity(s);
    let mut attempts = 0usize;
    while speakers.len() < s {
        attempts += 1;
        if attempts > 10_000 * s {
            return Err(Error::InvalidArgument(format!(
                "could not place {s} templates at min distance {}",
                params.min_template_dist
            )));
        }
        let template: Vec<f64> = (0..f).map(|_| prior.sample(&mut rng)).collect();
        let ok = speakers.iter().all(|other| {
            let d2: f64 = template
                .iter()
                .zip(&other.template)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() >= params.min_template_dist
        });
        if !ok {
            continue;
        }
        let id = speakers.len();
        let modulation = (0..params.modulation_rank)
            .map(|_| {
                let mut v: Vec<f64> = (0..f).map(|_| unit.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                for x in &mut v {
                    *x /= norm;
                }
                v
            })
            .collect();
        speakers.push(SpeakerModel {
            id,
            template,
            modulation,
            seed: seed::derive(seed_value, "speaker", id as u64),
        });
    }
    Ok(speakers)
}

/// Render an `F x T` utterance for one speaker: template plus sinusoidal
/// modulation plus white noise, all drawn from `seed_value`.
pub fn render_utterance(
    speaker: &SpeakerModel,
    t: usize,
    seed_value: u64,
    params: &GenParams,
) -> Result<FrameMatrix> {
    if t == 0 {
        return Err(Error::InvalidArgument("frame count must be >= 1".into()));
    }
    let f = speaker.template.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed::derive(seed_value, "utt-render", 0));
    // per-utterance modulation trajectory: amplitude, frequency, phase
    let traj: Vec<(f64, f64, f64)> = speaker
        .modulation
        .iter()
        .map(|_| {
            (
                params.modulation_amp * rng.random_range(0.5..1.5),
                rng.random_range(0.05..0.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, params.noise_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;

    let mut data = vec![0.0; f * t];
    for tau in 0..t {
        let coeffs: Vec<f64> = traj
            .iter()
            .map(|&(a, w, p)| a * (w * tau as f64 + p).sin())
            .collect();
        for (dim, row) in speaker.template.iter().enumerate() {
            let mut v = *row;
            for (c, basis) in coeffs.iter().zip(&speaker.modulation) {
                v += c * basis[dim];
            }
            if params.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            data[dim * t + tau] = v;
        }
    }
    Tensor::new(vec![f, t], data)
}

/// Mix two log-power frame matrices at the requested SIR.
///
/// Powers add bin-wise: `out = ln(exp(f1) + g * exp(f2))`, with the gain `g`
/// chosen so the frame-averaged power ratio of stream 1 to the scaled
/// stream 2 equals `sir_db`. `sir_db = +inf` is the single-speaker
/// convention and returns `f1` unchanged.
pub fn mix(f1: &FrameMatrix, f2: &FrameMatrix, sir_db: f64) -> Result<FrameMatrix> {
    if f1.shape() != f2.shape() {
        return Err(Error::ShapeMismatch {
            op: "mix",
            lhs: f1.shape().to_vec(),
            rhs: f2.shape().to_vec(),
        });
    }
    if sir_db.is_infinite() && sir_db > 0.0 {
        return Ok(f1.clone());
    }
    let p1 = mean_power(f1);
    let p2 = mean_power(f2);
    let g = p1 / (p2 * 10f64.powf(sir_db / 10.0));
    let data: Vec<f64> = f1
        .data()
        .iter()
        .zip(f2.data())
        .map(|(&a, &b)| (a.exp() + g * b.exp()).ln())
        .collect();
    Tensor::new(f1.shape().to_vec(), data)
}

fn mean_power(m: &FrameMatrix) -> f64 {
    m.data().iter().map(|&v| v.exp()).sum::<f64>() / m.numel() as f64
}

/// Sample a batch of singles and two-speaker mixtures, deterministically
/// from `seed_value`. Mixture speaker pairs are distinct; SIR is uniform in
/// the configured range.
pub fn sample_batch(
    cfg: &BatchConfig,
    speakers: &[SpeakerModel],
    params: &GenParams,
    seed_value: u64,
) -> Result<Vec<Sample>> {
    if speakers.is_empty() {
        return Err(Error::InvalidArgument("empty speaker set".into()));
    }
    if cfg.mixtures > 0 && speakers.len() < 2 {
        return Err(Error::InvalidArgument(
            "mixtures requested but fewer than 2 speakers available".into(),
        ));
    }
    if cfg.sir_range.0 > cfg.sir_range.1 {
        return Err(Error::InvalidArgument(format!(
            "invalid SIR range [{}, {}]",
            cfg.sir_range.0, cfg.sir_range.1
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed::derive(seed_value, "batch", 0));
    let mut out = Vec::with_capacity(cfg.singles + cfg.mixtures);
    for i in 0..cfg.singles {
        let spk = &speakers[rng.random_range(0..speakers.len())];
        let utt_seed = seed::derive(seed_value, "batch-single", i as u64);
        let features = render_utterance(spk, cfg.frames, utt_seed, params)?;
        out.push(Sample {
            features,
            speakers: vec![spk.id],
            spec: MixtureSpec {
                speaker_ids: vec![spk.id],
                sir_db: None,
                duration_frames: cfg.frames,
            },
        });
    }
    for i in 0..cfg.mixtures {
        let a = rng.random_range(0..speakers.len());
        let mut b = rng.random_range(0..speakers.len());
        while b == a {
            b = rng.random_range(0..speakers.len());
        }
        let sir = if cfg.sir_range.0 == cfg.sir_range.1 {
            cfg.sir_range.0
        } else {
            rng.random_range(cfg.sir_range.0..cfg.sir_range.1)
        };
        let s1 = seed::derive(seed_value, "batch-mix-a", i as u64);
        let s2 = seed::derive(seed_value, "batch-mix-b", i as u64);
        let f1 = render_utterance(&speakers[a], cfg.frames, s1, params)?;
        let f2 = render_utterance(&speakers[b], cfg.frames, s2, params)?;
        let features = mix(&f1, &f2, sir)?;
        out.push(Sample {
            features,
            speakers: vec![speakers[a].id, speakers[b].id],
            spec: MixtureSpec {
                speaker_ids: vec![speakers[a].id, speakers[b].id],
                sir_db: Some(sir),
                duration_frames: cfg.frames,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> GenParams {
        GenParams {
            modulation_amp: 0.0,
            noise_std: 0.0,
            ..GenParams::default()
        }
    }

    #[test]
    fn speaker_set_is_deterministic() {
        let a = generate_speaker_set(2, 8, 0, &GenParams::default()).unwrap();
        let b = generate_speaker_set(2, 8, 0, &GenParams::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.template, y.template);
            assert_eq!(x.modulation, y.modulation);
            assert_eq!(x.seed, y.seed);
        }
    }

    #[test]
    fn speaker_set_rejects_bad_params() {
        assert!(generate_speaker_set(1, 8, 0, &GenParams::default()).is_err());
        assert!(generate_speaker_set(4, 3, 0, &GenParams::default()).is_err());
    }

    #[test]
    fn templates_are_distinct_and_separated() {
        let speakers = generate_speaker_set(40, 40, 7, &GenParams::default()).unwrap();
        assert_eq!(speakers.len(), 40);
        for i in 0..speakers.len() {
            for j in (i + 1)..speakers.len() {
                let d2: f64 = speakers[i]
                    .template
                    .iter()
                    .zip(&speakers[j].template)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2.sqrt() > 0.0);
                assert!(d2.sqrt() >= GenParams::default().min_template_dist);
            }
        }
    }

    #[test]
    fn template_mean_matches_prior_over_seeds() {
        // Monte-Carlo over seeds: mean of all template coordinates should be
        // within 3 sigma / sqrt(n) of the prior mean.
        let params = GenParams {
            prior_mean: -1.0,
            min_template_dist: 0.5,
            ..GenParams::default()
        };
        let mut sum = 0.0;
        let mut n = 0usize;
        for seed_value in 0..20 {
            for spk in generate_speaker_set(10, 40, seed_value, &params).unwrap() {
                sum += spk.template.iter().sum::<f64>();
                n += spk.template.len();
            }
        }
        let mean = sum / n as f64;
        let bound = 3.0 * params.prior_std / (n as f64).sqrt();
        // rejection sampling biases pairs apart slightly; allow 2x slack
        assert!(
            (mean - params.prior_mean).abs() < 2.0 * bound.max(0.01),
            "mean {mean} vs prior {}",
            params.prior_mean
        );
    }

    #[test]
    fn zero_modulation_and_noise_renders_constant_columns() {
        let speakers = generate_speaker_set(2, 8, 3, &quiet()).unwrap();
        let m = render_utterance(&speakers[0], 5, 11, &quiet()).unwrap();
        for dim in 0..8 {
            for tau in 0..5 {
                assert_eq!(m.at(dim, tau), speakers[0].template[dim]);
            }
        }
    }

    #[test]
    fn render_is_bit_identical_for_fixed_seed() {
        let speakers = generate_speaker_set(2, 8, 3, &GenParams::default()).unwrap();
        let a = render_utterance(&speakers[0], 50, 99, &GenParams::default()).unwrap();
        let b = render_utterance(&speakers[0], 50, 99, &GenParams::default()).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn render_time_average_approaches_template() {
        let params = GenParams::default();
        let speakers = generate_speaker_set(2, 8, 5, &params).unwrap();
        let t = 10_000;
        let m = render_utterance(&speakers[0], t, 1, &params).unwrap();
        for dim in 0..8 {
            let avg: f64 = (0..t).map(|tau| m.at(dim, tau)).sum::<f64>() / t as f64;
            // sinusoid truncation O(amp/(w T)) plus noise O(std/sqrt(T))
            assert!(
                (avg - speakers[0].template[dim]).abs() < 0.05,
                "dim {dim}: avg {avg} vs template {}",
                speakers[0].template[dim]
            );
        }
    }

    #[test]
    fn rendered_features_are_finite() {
        let params = GenParams::default();
        let speakers = generate_speaker_set(3, 16, 21, &params).unwrap();
        for spk in &speakers {
            assert!(render_utterance(spk, 200, 4, &params).unwrap().all_finite());
        }
    }

    #[test]
    fn mix_infinite_sir_returns_first_stream() {
        let a = Tensor::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.4]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let out = mix(&a, &b, f64::INFINITY).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn mix_equal_streams_at_zero_db_adds_ln2() {
        let a = Tensor::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.4]]).unwrap();
        let out = mix(&a, &a, 0.0).unwrap();
        for (o, x) in out.data().iter().zip(a.data()) {
            assert!((o - (x + std::f64::consts::LN_2)).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_gain_hits_requested_ratio() {
        let params = GenParams::default();
        let speakers = generate_speaker_set(2, 12, 9, &params).unwrap();
        let f1 = render_utterance(&speakers[0], 40, 1, &params).unwrap();
        let f2 = render_utterance(&speakers[1], 40, 2, &params).unwrap();
        let out = mix(&f1, &f2, -5.0).unwrap();
        // recompute the applied gain from the output: per-bin
        // exp(out) - exp(f1) = g * exp(f2)
        let num: f64 = out
            .data()
            .iter()
            .zip(f1.data())
            .map(|(&o, &a)| o.exp() - a.exp())
            .sum();
        let den: f64 = f2.data().iter().map(|&b| b.exp()).sum();
        let g = num / den;
        let p1: f64 = f1.data().iter().map(|&v| v.exp()).sum::<f64>() / f1.numel() as f64;
        let p2: f64 = f2.data().iter().map(|&v| v.exp()).sum::<f64>() / f2.numel() as f64;
        let measured_db = 10.0 * (p1 / (g * p2)).log10();
        assert!((measured_db - (-5.0)).abs() < 1e-9, "{measured_db}");
    }

    #[test]
    fn mix_rejects_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 2]);
        assert!(mix(&a, &b, 0.0).is_err());
    }

    #[test]
    fn mix_is_symmetric_up_to_a_global_gain() {
        let params = GenParams::default();
        let speakers = generate_speaker_set(2, 10, 13, &params).unwrap();
        let f1 = render_utterance(&speakers[0], 30, 5, &params).unwrap();
        let f2 = render_utterance(&speakers[1], 30, 6, &params).unwrap();
        let ab = mix(&f1, &f2, 3.0).unwrap();
        let ba = mix(&f2, &f1, -3.0).unwrap();
        // the two orders differ by a constant log gain across all bins
        let delta0 = ba.data()[0] - ab.data()[0];
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert!(((y - x) - delta0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_counts_and_mixture_invariants() {
        let params = GenParams::default();
        let speakers = generate_speaker_set(5, 8, 1, &params).unwrap();
        let cfg = BatchConfig {
            singles: 4,
            mixtures: 2,
            frames: 10,
            sir_range: (-5.0, 5.0),
        };
        let batch = sample_batch(&cfg, &speakers, &params, 3).unwrap();
        assert_eq!(batch.len(), 6);
        let two: Vec<_> = batch.iter().filter(|s| s.speakers.len() == 2).collect();
        assert_eq!(two.len(), 2);
        for s in &two {
            assert_ne!(s.speakers[0], s.speakers[1]);
            let sir = s.spec.sir_db.unwrap();
            assert!((-5.0..=5.0).contains(&sir));
        }
    }

    #[test]
    fn batch_is_deterministic() {
        let params = GenParams::default();
        let speakers = generate_speaker_set(5, 8, 1, &params).unwrap();
        let cfg = BatchConfig {
            singles: 2,
            mixtures: 2,
            frames: 10,
            sir_range: (-5.0, 5.0),
        };
        let a = sample_batch(&cfg, &speakers, &params, 3).unwrap();
        let b = sample_batch(&cfg, &speakers, &params, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.speakers, y.speakers);
            assert_eq!(x.features.data(), y.features.data());
        }
    }

    #[test]
    fn batch_requires_two_speakers_for_mixtures() {
        let params = GenParams {
            min_template_dist: 0.1,
            ..GenParams::default()
        };
        let speakers = generate_speaker_set(2, 8, 1, &params).unwrap();
        let cfg = BatchConfig {
            singles: 0,
            mixtures: 1,
            frames: 5,
            sir_range: (0.0, 0.0),
        };
        assert!(sample_batch(&cfg, &speakers[..1], &params, 0).is_err());
        assert!(sample_batch(&cfg, &speakers, &params, 0).is_ok());
    }

    #[test]
    fn paper_scale_batch_composition_is_honored() {
        // batch composition of 256 singles + 128 two-speaker mixtures
        let params = GenParams::default();
        let speakers = generate_speaker_set(8, 8, 2, &params).unwrap();
        let cfg = BatchConfig {
            singles: 256,
            mixtures: 128,
            frames: 4,
            sir_range: (-5.0, 5.0),
        };
        let batch = sample_batch(&cfg, &speakers, &params, 5).unwrap();
        assert_eq!(batch.len(), 384);
        assert_eq!(batch.iter().filter(|s| s.speakers.len() == 1).count(), 256);
        assert_eq!(batch.iter().filter(|s| s.speakers.len() == 2).count(), 128);
    }

    #[test]
    fn sir_draws_are_uniform_over_the_range() {
        // chi-squared uniformity over 1e5 draws into 10 bins on [-5, 5]
        let params = GenParams {
            modulation_rank: 0,
            modulation_amp: 0.0,
            noise_std: 0.0,
            ..GenParams::default()
        };
        let speakers = generate_speaker_set(4, 4, 1, &params).unwrap();
        let cfg = BatchConfig {
            singles: 0,
            mixtures: 100,
            frames: 1,
            sir_range: (-5.0, 5.0),
        };
        let mut counts = [0usize; 10];
        for rep in 0..1000 {
            for s in sample_batch(&cfg, &speakers, &params, rep).unwrap() {
                let sir = s.spec.sir_db.unwrap();
                let bin = (((sir + 5.0) / 1.0) as usize).min(9);
                counts[bin] += 1;
            }
        }
        let n = 100_000.0;
        let expect = n / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        // 9 dof, 99.9% quantile ~ 27.88
        assert!(chi2 < 27.88, "chi2 = {chi2}, counts = {counts:?}");
    }
}
