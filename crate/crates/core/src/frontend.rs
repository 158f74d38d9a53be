//! Data ingestion: JSONL manifests, log-Mel features, 8 kHz band-zeroing,
//! length filtering and length-product batching.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_MEL_BANKS: usize = 80;
pub const MAX_FRAMES: usize = 3000; // 30 s at a 10 ms hop
pub const ENERGY_FLOOR: f64 = 1e-10;

const FEATURE_MAGIC: &[u8; 4] = b"TTFB";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleRateTag {
    #[serde(rename = "8k")]
    R8k,
    #[serde(rename = "16k")]
    R16k,
}

impl SampleRateTag {
    pub fn hz(self) -> u32 {
        match self {
            SampleRateTag::R8k => 8000,
            SampleRateTag::R16k => 16000,
        }
    }
}

/// One line of a JSONL manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    /// Token ids; present iff the utterance is labeled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Vec<u32>>,
    pub sample_rate_tag: SampleRateTag,
    pub num_frames: usize,
}

impl ManifestEntry {
    pub fn is_labeled(&self) -> bool {
        self.transcript.is_some()
    }
}

/// Feature matrix plus optional transcript; the unit of all data flow.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    /// `[T x 80]` log-Mel energies, one row per 10 ms.
    pub features: Array2<f64>,
    pub transcript: Option<Vec<u32>>,
    pub sample_rate_tag: SampleRateTag,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }

    /// T x (U + 1), the lattice size this utterance contributes to a batch.
    pub fn length_product(&self) -> usize {
        let u = self.transcript.as_ref().map_or(0, Vec::len);
        self.num_frames() * (u + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchOrigin {
    Labeled,
    Unlabeled,
}

/// Padded utterances grouped under a length-product cap.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Array3<f64>,
    pub lengths: Vec<usize>,
    pub ids: Vec<String>,
    pub transcripts: Option<Vec<Vec<u32>>>,
    pub origin: BatchOrigin,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance], origin: BatchOrigin) -> Result<Self> {
        assert!(!utts.is_empty());
        if origin == BatchOrigin::Labeled && utts.iter().any(|u| u.transcript.is_none()) {
            return Err(Error::BadInput(
                "labeled batch contains an utterance without transcript".into(),
            ));
        }
        let t_max = utts.iter().map(|u| u.num_frames()).max().unwrap();
        let mut features = Array3::zeros((utts.len(), t_max, NUM_MEL_BANKS));
        for (i, u) in utts.iter().enumerate() {
            features
                .slice_mut(ndarray::s![i, ..u.num_frames(), ..])
                .assign(&u.features);
        }
        let transcripts = if origin == BatchOrigin::Labeled {
            Some(utts.iter().map(|u| u.transcript.clone().unwrap()).collect())
        } else {
            None
        };
        Ok(Batch {
            features,
            lengths: utts.iter().map(|u| u.num_frames()).collect(),
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            transcripts,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Unpadded feature view of utterance `i`.
    pub fn utterance_features(&self, i: usize) -> Array2<f64> {
        self.features
            .slice(ndarray::s![i, ..self.lengths[i], ..])
            .to_owned()
    }
}

pub fn load_manifest(path: &Path, vocab_size: usize) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        validate_entry(&entry, vocab_size).map_err(|msg| Error::Manifest { line: i + 1, msg })?;
        entries.push(entry);
    }
    Ok(entries)
}

fn validate_entry(entry: &ManifestEntry, vocab_size: usize) -> std::result::Result<(), String> {
    if entry.num_frames == 0 {
        return Err("num_frames must be > 0".into());
    }
    match (&entry.feature_path, &entry.audio_path) {
        (Some(_), Some(_)) => return Err("both feature_path and audio_path present".into()),
        (None, None) => return Err("one of feature_path/audio_path required".into()),
        _ => {}
    }
    if let Some(tr) = &entry.transcript {
        if let Some(&bad) = tr.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(format!("token id {bad} outside vocabulary of size {vocab_size}"));
        }
    }
    Ok(())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::BadInput(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Write a `[T x 80]` feature matrix: 16-byte header (magic, version, T, dim)
/// then little-endian f32 data.
pub fn write_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(1)?;
    w.write_u32::<LittleEndian>(features.nrows() as u32)?;
    w.write_u32::<LittleEndian>(features.ncols() as u32)?;
    for v in features.iter() {
        w.write_f32::<LittleEndian>(*v as f32)?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::BadInput(format!("{}: not a feature file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != 1 {
        return Err(Error::BadInput(format!("unsupported feature file version {version}")));
    }
    let t = r.read_u32::<LittleEndian>()? as usize;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(t * dim);
    for _ in 0..t * dim {
        data.push(r.read_f32::<LittleEndian>()? as f64);
    }
    Array2::from_shape_vec((t, dim), data).map_err(|e| Error::BadInput(e.to_string()))
}

/// Write raw audio as little-endian f32 samples (the `audio_path` format).
pub fn write_audio(path: &Path, samples: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        w.write_f32::<LittleEndian>(*s as f32)?;
    }
    Ok(())
}

pub fn read_audio(path: &Path) -> Result<Vec<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        match r.read_f32::<LittleEndian>() {
            Ok(v) => out.push(v as f64),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Materialize an utterance: read features or compute them from audio, then
/// apply the 8 kHz band-zeroing for 8 kHz-tagged entries.
pub fn load_utterance(entry: &ManifestEntry, base_dir: &Path) -> Result<Utterance> {
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    let mut features = if let Some(fp) = &entry.feature_path {
        read_features(&resolve(fp))?
    } else {
        let audio = read_audio(&resolve(entry.audio_path.as_ref().unwrap()))?;
        log_mel(&audio, entry.sample_rate_tag.hz())?
    };
    if entry.sample_rate_tag == SampleRateTag::R8k {
        features = upconvert_8k(&features)?;
    }
    Ok(Utterance {
        id: entry.id.clone(),
        features,
        transcript: entry.transcript.clone(),
        sample_rate_tag: entry.sample_rate_tag,
    })
}

pub fn mel_from_hz(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Triangular mel filterbank over a fixed 0..8 kHz mel layout. The layout is
/// the same for both sample rates, so 8 kHz input simply leaves the top
/// banks at the energy floor.
fn mel_filterbank(sample_rate: u32, n_fft: usize) -> Vec<Vec<(usize, f64)>> {
    let mel_max = mel_from_hz(8000.0);
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let edges: Vec<f64> = (0..NUM_MEL_BANKS + 2)
        .map(|i| i as f64 * mel_max / (NUM_MEL_BANKS + 1) as f64)
        .collect();
    let mut banks = Vec::with_capacity(NUM_MEL_BANKS);
    for b in 0..NUM_MEL_BANKS {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        let mut weights = Vec::new();
        for bin in 0..n_bins {
            let m = mel_from_hz(bin as f64 * bin_hz);
            if m > lo && m < hi {
                let w = if m <= mid {
                    (m - lo) / (mid - lo)
                } else {
                    (hi - m) / (hi - mid)
                };
                if w > 0.0 {
                    weights.push((bin, w));
                }
            }
        }
        banks.push(weights);
    }
    banks
}

/// Index of the first mel bank whose lower edge lies at or above mel(4 kHz);
/// banks from here up carry no energy for 8 kHz-sampled audio.
pub fn band_cutoff_index() -> usize {
    let mel_max = mel_from_hz(8000.0);
    let target = mel_from_hz(4000.0);
    for b in 0..NUM_MEL_BANKS {
        let lower = b as f64 * mel_max / (NUM_MEL_BANKS + 1) as f64;
        if lower >= target {
            return b;
        }
    }
    NUM_MEL_BANKS
}

/// 80-bank log-Mel features with a 25 ms Hann window and 10 ms hop.
/// FFT size is 512 at 16 kHz and 256 at 8 kHz.
pub fn log_mel(waveform: &[f64], sample_rate: u32) -> Result<Array2<f64>> {
    if sample_rate != 8000 && sample_rate != 16000 {
        return Err(Error::BadInput(format!("unsupported sample rate {sample_rate}")));
    }
    let win = (sample_rate as usize) * 25 / 1000;
    let hop = (sample_rate as usize) * 10 / 1000;
    let n_fft = if sample_rate == 16000 { 512 } else { 256 };
    if waveform.len() < win {
        return Err(Error::BadInput(format!(
            "waveform of {} samples shorter than one {win}-sample window",
            waveform.len()
        )));
    }
    let num_frames = (waveform.len() - win) / hop + 1;
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let banks = mel_filterbank(sample_rate, n_fft);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);

    let mut out = Array2::zeros((num_frames, NUM_MEL_BANKS));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for frame in 0..num_frames {
        for c in buf.iter_mut() {
            *c = Complex::new(0.0, 0.0);
        }
        let start = frame * hop;
        for i in 0..win {
            buf[i] = Complex::new(waveform[start + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for (b, weights) in banks.iter().enumerate() {
            let mut energy = 0.0;
            for &(bin, w) in weights {
                energy += w * buf[bin].norm_sqr();
            }
            out[[frame, b]] = energy.max(ENERGY_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Convert 8 kHz-derived features to the 16 kHz layout by forcing every bank
/// at or above the 4 kHz cutoff to the zero-energy filler, `ln(ENERGY_FLOOR)`.
pub fn upconvert_8k(features: &Array2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != NUM_MEL_BANKS {
        return Err(Error::BadInput(format!(
            "expected {NUM_MEL_BANKS} banks, got {}",
            features.ncols()
        )));
    }
    let cutoff = band_cutoff_index();
    let filler = ENERGY_FLOOR.ln();
    let mut out = features.clone();
    out.slice_mut(ndarray::s![.., cutoff..]).fill(filler);
    Ok(out)
}

/// Drop utterances longer than 30 s (`T > 3000`).
pub fn filter_long(utts: Vec<Utterance>) -> Vec<Utterance> {
    utts.into_iter().filter(|u| u.num_frames() <= MAX_FRAMES).collect()
}

/// Group utterances into batches whose summed T x (U+1) stays under `cap`:
/// sort by T descending, greedy first-fit, shuffle batch order by seed.
pub fn make_batches(
    utts: &[Utterance],
    cap: usize,
    origin: BatchOrigin,
    seed: u64,
) -> Result<Vec<Batch>> {
    if utts.is_empty() {
        return Ok(Vec::new());
    }
    for u in utts {
        if u.length_product() > cap {
            return Err(Error::BadInput(format!(
                "utterance {} has length product {} exceeding cap {cap}",
                u.id,
                u.length_product()
            )));
        }
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(utts[i].num_frames()));
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in order {
        let p = utts[i].length_product();
        match bins.iter_mut().find(|(used, _)| used + p <= cap) {
            Some((used, members)) => {
                *used += p;
                members.push(i);
            }
            None => bins.push((p, vec![i])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bins.shuffle(&mut rng);
    bins.into_iter()
        .map(|(_, members)| {
            let refs: Vec<&Utterance> = members.iter().map(|&i| &utts[i]).collect();
            Batch::from_utterances(&refs, origin)
        })
        .collect()
}
