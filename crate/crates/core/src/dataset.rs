//! Turns frame-indexed RGB+X tracking videos into multi-image grounding samples.
//!
//! Keyframes are picked with a seeded gap in `[interval_min, interval_max]`
//! (or a fixed short interval for short videos). Every run of four keyframes
//! becomes one sample: the first keyframe's RGB/X pair is the template, the
//! other three give six interleaved search images. A trailing run of three
//! keyframes yields a four-image sample.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{BboxFormat, GtSlot, Modality};
use crate::sample::{ImageRef, MigSample, SampleError, Split, MANIFEST_SCHEMA};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("video {video_id}: {rgb} rgb frames, {x} x frames, {gt} annotations")]
    StreamLength {
        video_id: String,
        rgb: usize,
        x: usize,
        gt: usize,
    },
    #[error("video {video_id}: x modality must be thermal, depth or event, got {modality}")]
    NotXModality { video_id: String, modality: Modality },
    #[error("video {0} has no split; assign one (see assign_splits)")]
    MissingSplit(String),
    #[error("video {0} appears more than once")]
    DuplicateVideo(String),
    #[error("invalid build configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {source}")]
    InvalidSample {
        path: PathBuf,
        line: usize,
        source: SampleError,
    },
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Normalized per-video annotation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoIndex {
    pub video_id: String,
    /// Source subset name, e.g. `lasher`.
    pub subset: String,
    #[serde(default)]
    pub split: Option<Split>,
    pub x_modality: Modality,
    #[serde(default)]
    pub bbox_format: BboxFormat,
    /// RGB frame paths, frame `i` at index `i`.
    pub rgb: Vec<String>,
    /// X frame paths, aligned with `rgb`.
    pub x: Vec<String>,
    /// Per-frame ground truth.
    pub gt: Vec<GtSlot>,
}

impl VideoIndex {
    pub fn total_frames(&self) -> usize {
        self.rgb.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.rgb.len() != self.x.len() || self.rgb.len() != self.gt.len() {
            return Err(DatasetError::StreamLength {
                video_id: self.video_id.clone(),
                rgb: self.rgb.len(),
                x: self.x.len(),
                gt: self.gt.len(),
            });
        }
        if !self.x_modality.is_x() {
            return Err(DatasetError::NotXModality {
                video_id: self.video_id.clone(),
                modality: self.x_modality,
            });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let v: VideoIndex = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })?;
        v.validate()?;
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub interval_min: usize,
    pub interval_max: usize,
    /// Videos shorter than this use `short_interval`.
    pub short_video_threshold: usize,
    pub short_interval: usize,
    pub max_groups_per_video: usize,
    pub keyframes_per_group: usize,
    /// Index of the first keyframe.
    pub start_offset: usize,
    pub query: String,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            interval_min: 24,
            interval_max: 29,
            short_video_threshold: 80,
            short_interval: 13,
            max_groups_per_video: 8,
            keyframes_per_group: 4,
            start_offset: 0,
            query: "Locate the target marked by the green box in the template images \
                    within each of the search images."
                .into(),
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.interval_min == 0 || self.short_interval == 0 || self.max_groups_per_video == 0 {
            return Err(DatasetError::Config("intervals and group limits must be positive".into()));
        }
        if self.interval_min > self.interval_max {
            return Err(DatasetError::Config(format!(
                "interval_min {} exceeds interval_max {}",
                self.interval_min, self.interval_max
            )));
        }
        if self.keyframes_per_group != 4 {
            return Err(DatasetError::Config(
                "keyframes_per_group must be 4 (one template + three search keyframes)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeyframePlan {
    pub groups: Vec<Vec<usize>>,
    /// Set when the video yields nothing.
    pub skip_reason: Option<String>,
}

/// Stable per-video seed so videos can be built independently.
pub fn video_seed(seed: u64, video_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(video_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sample_keyframes(video: &VideoIndex, cfg: &BuildConfig, seed: u64) -> KeyframePlan {
    let total = video.total_frames();
    let short = total < cfg.short_video_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = |rng: &mut ChaCha8Rng| {
        if short {
            cfg.short_interval
        } else {
            rng.gen_range(cfg.interval_min..=cfg.interval_max)
        }
    };

    let mut groups = Vec::new();
    let mut start = cfg.start_offset;
    while start < total && groups.len() < cfg.max_groups_per_video {
        let mut group = vec![start];
        let mut last = start;
        for _ in 1..cfg.keyframes_per_group {
            let next = last + gap(&mut rng);
            if next >= total {
                break;
            }
            group.push(next);
            last = next;
        }
        if group.len() < cfg.keyframes_per_group - 1 {
            break;
        }
        let full = group.len() == cfg.keyframes_per_group;
        groups.push(group);
        if !full {
            break;
        }
        start = last + gap(&mut rng);
    }

    let skip_reason = groups.is_empty().then(|| {
        format!(
            "video {} has {total} frames, too few for {} keyframes at interval {}",
            video.video_id,
            cfg.keyframes_per_group - 1,
            if short { cfg.short_interval } else { cfg.interval_min }
        )
    });
    if let Some(reason) = &skip_reason {
        log::info!("skipping: {reason}");
    }
    KeyframePlan {
        groups,
        skip_reason,
    }
}

pub fn build_sample(
    group: &[usize],
    video: &VideoIndex,
    cfg: &BuildConfig,
    group_index: usize,
) -> Result<MigSample, String> {
    let sample_id = format!("{}-{group_index:02}", video.video_id);
    if !(3..=4).contains(&group.len()) {
        return Err(format!("{sample_id}: group of {} keyframes", group.len()));
    }
    let split = video
        .split
        .ok_or_else(|| format!("{sample_id}: video has no split"))?;
    let t = group[0];
    let template_box = *video.gt[t]
        .as_box()
        .ok_or_else(|| format!("{sample_id}: template keyframe {t} has no box"))?;

    let img = |frame: usize, modality: Modality| ImageRef {
        path: if modality == Modality::Rgb {
            video.rgb[frame].clone()
        } else {
            video.x[frame].clone()
        },
        modality,
        frame_index: frame as u32,
    };
    let mut search = Vec::with_capacity(2 * (group.len() - 1));
    let mut ground_truth = Vec::with_capacity(search.capacity());
    for &f in &group[1..] {
        search.push(img(f, Modality::Rgb));
        search.push(img(f, video.x_modality));
        ground_truth.push(video.gt[f]);
        ground_truth.push(video.gt[f]);
    }

    let sample = MigSample {
        schema: MANIFEST_SCHEMA.to_string(),
        sample_id,
        subset: video.subset.clone(),
        split,
        bbox_format: BboxFormat::Xyxy,
        query: cfg.query.clone(),
        template_rgb: img(t, Modality::Rgb),
        template_x: img(t, video.x_modality),
        template_box,
        search,
        ground_truth,
        modality_known: true,
    };
    sample.validate().map_err(|e| e.to_string())?;
    Ok(sample)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOutput {
    pub samples: Vec<MigSample>,
    pub skipped: Vec<String>,
}

pub fn build_video(video: &VideoIndex, cfg: &BuildConfig, seed: u64) -> BuildOutput {
    let plan = sample_keyframes(video, cfg, video_seed(seed, &video.video_id));
    let mut out = BuildOutput::default();
    out.skipped.extend(plan.skip_reason);
    for (k, group) in plan.groups.iter().enumerate() {
        match build_sample(group, video, cfg, k) {
            Ok(s) => out.samples.push(s),
            Err(reason) => {
                log::info!("skipping sample: {reason}");
                out.skipped.push(reason);
            }
        }
    }
    out
}

/// Builds every video in order. Every video must carry a split and a unique id.
pub fn build_dataset(
    videos: &[VideoIndex],
    cfg: &BuildConfig,
    seed: u64,
) -> Result<BuildOutput, DatasetError> {
    build_dataset_jobs(videos, cfg, seed, 1)
}

/// [`build_dataset`] with up to `jobs` videos built concurrently. Output order
/// and content do not depend on `jobs`.
pub fn build_dataset_jobs(
    videos: &[VideoIndex],
    cfg: &BuildConfig,
    seed: u64,
    jobs: usize,
) -> Result<BuildOutput, DatasetError> {
    cfg.validate()?;
    let mut seen = BTreeSet::new();
    for v in videos {
        v.validate()?;
        if v.split.is_none() {
            return Err(DatasetError::MissingSplit(v.video_id.clone()));
        }
        if !seen.insert(v.video_id.as_str()) {
            return Err(DatasetError::DuplicateVideo(v.video_id.clone()));
        }
    }
    let jobs = jobs.clamp(1, videos.len().max(1));
    let chunk = videos.len().div_ceil(jobs).max(1);
    let parts: Vec<Vec<BuildOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = videos
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|v| build_video(v, cfg, seed)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("build worker panicked")).collect()
    });
    let mut out = BuildOutput::default();
    for b in parts.into_iter().flatten() {
        out.samples.extend(b.samples);
        out.skipped.extend(b.skipped);
    }
    Ok(out)
}

/// Deterministic video-level split for sources without an official one.
pub fn assign_splits(video_ids: &[String], seed: u64, train_fraction: f64) -> BTreeMap<String, Split> {
    let mut ids: Vec<&String> = video_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (ids.len() as f64 * train_fraction).round() as usize;
    ids.into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if i < n_train { Split::Train } else { Split::Test }))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub schema: String,
    pub samples: usize,
    pub images: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub per_subset: BTreeMap<String, BTreeMap<Split, usize>>,
    pub per_modality: BTreeMap<Modality, usize>,
    /// Keyed by number of search images.
    pub per_search_count: BTreeMap<usize, usize>,
}

impl ManifestStats {
    pub fn from_samples(samples: &[MigSample]) -> Self {
        let mut s = ManifestStats {
            schema: MANIFEST_SCHEMA.into(),
            ..Default::default()
        };
        for m in samples {
            s.samples += 1;
            s.images += 2 + m.n();
            *s.per_split.entry(m.split).or_default() += 1;
            *s.per_subset
                .entry(m.subset.clone())
                .or_default()
                .entry(m.split)
                .or_default() += 1;
            *s.per_modality.entry(m.x_modality()).or_default() += 1;
            *s.per_search_count.entry(m.n()).or_default() += 1;
        }
        s
    }

    /// Share of samples with two templates and six search images.
    pub fn full_fraction(&self) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        *self.per_search_count.get(&6).unwrap_or(&0) as f64 / self.samples as f64
    }
}

pub fn stats_path(manifest: &Path) -> PathBuf {
    let mut p = manifest.as_os_str().to_owned();
    p.push(".stats.json");
    PathBuf::from(p)
}

/// Writes one sample per line plus a `<path>.stats.json` summary.
pub fn emit_manifest(samples: &[MigSample], path: &Path) -> Result<ManifestStats, DatasetError> {
    for s in samples {
        s.validate()?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;

    let stats = ManifestStats::from_samples(samples);
    let sp = stats_path(path);
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    std::fs::write(&sp, text + "\n").map_err(io_err(&sp))?;
    Ok(stats)
}

pub fn load_manifest(path: &Path) -> Result<Vec<MigSample>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MigSample = serde_json::from_str(&line).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        s.validate().map_err(|source| DatasetError::InvalidSample {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(s);
    }
    Ok(out)
}
