"""
Data models and data management for anticipation datasets
Action segments, vocabularies, clip sampling, batching, the feature-file
format and the on-disk dataset layout
"""

import asyncio
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import IGNORE_LABEL, DataConfig
from errors import AVTError, FormatError, ValidationError, VocabularyError
from objectives import LabelTrack
from tensor_core.checkpoint import PREFIX_SIZE, decode_container, encode_container
from utils import atomic_write_bytes, atomic_write_text, sha256_bytes, sha256_file

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"AVTF"
SPLITS = ("train", "val")

_VERB_NAMES = ["take", "wash", "dry", "put", "open", "close", "cut", "pour", "stir", "peel"]
_NOUN_NAMES = ["cup", "plate", "knife", "pan", "board", "lid", "bowl", "spoon", "tap", "towel"]


@dataclass
class ActionSegment:
    """One labeled action: frame times start <= t < end"""
    video_id: str
    start: int
    end: int
    action_id: int

    def __post_init__(self):
        """Validate segment bounds"""
        if not self.video_id.strip():
            raise ValueError("Segment video id cannot be empty")
        if self.end <= self.start:
            raise ValueError(f"Segment end ({self.end}) must be after its start ({self.start})")
        if self.action_id < 0:
            raise ValueError(f"Segment action id must be non-negative, got {self.action_id}")

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass
class VideoTimeline:
    """
    Per-timestep frames or feature vectors of one video

    Row i holds the frame at time i + 1; times run 1..length.
    """
    video_id: str
    frames: np.ndarray

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def frame_shape(self) -> Tuple[int, ...]:
        return tuple(self.frames.shape[1:])

    def at(self, times: np.ndarray) -> np.ndarray:
        """Frames at the given times; times before 1 repeat the earliest frame"""
        index = np.clip(np.asarray(times) - 1, 0, self.length - 1)
        return self.frames[index]


@dataclass
class AnticipationSample:
    """Observed clip (T frames or T feature vectors) plus its label track"""
    sample_id: str
    inputs: np.ndarray
    track: LabelTrack
    times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    num_padded: int = 0

    def __post_init__(self):
        if self.inputs.shape[0] != self.track.num_frames:
            raise ValueError(
                f"Sample {self.sample_id} has {self.inputs.shape[0]} frames but {self.track.num_frames} labels"
            )

    @property
    def num_frames(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def next_action(self) -> int:
        return self.track.next_action


@dataclass
class VocabularyEntry:
    action_id: int
    verb_id: int
    noun_id: int
    name: str


class ActionVocabulary:
    """Bijection between action ids and (verb id, noun id) pairs"""

    def __init__(self, entries: Sequence[VocabularyEntry]):
        entries = sorted(entries, key=lambda e: e.action_id)
        ids = [e.action_id for e in entries]
        if ids != list(range(len(entries))):
            raise VocabularyError("action ids must be exactly 0..K-1")
        pairs = [(e.verb_id, e.noun_id) for e in entries]
        if len(set(pairs)) != len(pairs):
            raise VocabularyError("two actions share the same (verb, noun) pair")
        self.entries: List[VocabularyEntry] = list(entries)

    @classmethod
    def factored(cls, num_actions: int, num_verbs: int) -> "ActionVocabulary":
        """Action a is verb a // num_nouns with noun a % num_nouns"""
        if num_verbs < 1 or num_actions % num_verbs:
            raise ValidationError(
                f"schema.num_actions ({num_actions}) must be a multiple of schema.num_verbs ({num_verbs})"
            )
        num_nouns = num_actions // num_verbs
        entries = []
        for action in range(num_actions):
            verb, noun = divmod(action, num_nouns)
            verb_name = _VERB_NAMES[verb] if verb < len(_VERB_NAMES) else f"verb{verb}"
            noun_name = _NOUN_NAMES[noun] if noun < len(_NOUN_NAMES) else f"noun{noun}"
            entries.append(VocabularyEntry(action, verb, noun, f"{verb_name}-{noun_name}"))
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_actions(self) -> int:
        return len(self.entries)

    @property
    def num_verbs(self) -> int:
        return max(e.verb_id for e in self.entries) + 1

    @property
    def num_nouns(self) -> int:
        return max(e.noun_id for e in self.entries) + 1

    def verb_of(self, action_id: int) -> int:
        return self._entry(action_id).verb_id

    def noun_of(self, action_id: int) -> int:
        return self._entry(action_id).noun_id

    def name_of(self, action_id: int) -> str:
        return self._entry(action_id).name

    def _entry(self, action_id: int) -> VocabularyEntry:
        if not 0 <= action_id < len(self.entries):
            raise VocabularyError(f"action {action_id} has no vocabulary entry")
        return self.entries[action_id]

    def marginal_matrix(self, level: str) -> np.ndarray:
        """
        (K, V) or (K, N) 0/1 matrix mapping actions to verbs or nouns

        Args:
            level: "verb" or "noun"
        """
        if level == "verb":
            size, key = self.num_verbs, (lambda e: e.verb_id)
        elif level == "noun":
            size, key = self.num_nouns, (lambda e: e.noun_id)
        else:
            raise ValidationError(f"unknown marginalization level {level!r}")
        matrix = np.zeros((len(self.entries), size), dtype=np.float64)
        for entry in self.entries:
            matrix[entry.action_id, key(entry)] = 1.0
        return matrix

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["action_id", "verb_id", "noun_id", "name"])
        for e in self.entries:
            writer.writerow([e.action_id, e.verb_id, e.noun_id, e.name])
        return buffer.getvalue()

    @classmethod
    def from_csv_text(cls, text: str) -> "ActionVocabulary":
        reader = csv.DictReader(io.StringIO(text))
        entries = []
        try:
            for row in reader:
                entries.append(VocabularyEntry(
                    int(row["action_id"]), int(row["verb_id"]), int(row["noun_id"]), row["name"]
                ))
        except (KeyError, TypeError, ValueError) as e:
            raise VocabularyError(f"malformed vocabulary table: {e}") from e
        return cls(entries)

    @property
    def hash(self) -> str:
        """Digest of the canonical vocab.csv text"""
        return sha256_bytes(self.to_csv_text().encode("utf-8"))


# ----------------------------------------------------------------------
# Clip sampling
# ----------------------------------------------------------------------

class SampleSkipped(AVTError):
    """A segment cannot yield a clip; `reason` says why"""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass
class SkipRecord:
    sample_id: str
    reason: str


def frame_labels(segments: Sequence[ActionSegment], length: int) -> np.ndarray:
    """Action at every time 0..length (index = time); IGNORE_LABEL outside segments"""
    labels = np.full(length + 1, IGNORE_LABEL, dtype=np.int64)
    for segment in segments:
        labels[max(segment.start, 1):min(segment.end, length + 1)] = segment.action_id
    labels[0] = IGNORE_LABEL
    return labels


def clip_times(start: int, tau_o: int, tau_a: int, stride: int = 0) -> np.ndarray:
    """Observed frame times tau_s - tau_a - tau_o + k * stride, k = 1..tau_o / stride"""
    stride = stride or tau_a
    if tau_o <= 0 or tau_a <= 0:
        raise ValidationError("tau_o and tau_a must be positive")
    if tau_o % stride:
        raise ValidationError(f"tau_o ({tau_o}) must be a multiple of the stride ({stride})")
    count = tau_o // stride
    return start - tau_a - tau_o + stride * np.arange(1, count + 1, dtype=np.int64)


def sample_clip(segment: ActionSegment, timeline: VideoTimeline, segments: Sequence[ActionSegment],
                tau_o: int, tau_a: int, stride: int = 0, sample_id: Optional[str] = None,
                labels: Optional[np.ndarray] = None) -> AnticipationSample:
    """
    Build the observed clip that anticipates one segment

    Args:
        segment: Segment to anticipate (its start is tau_s)
        timeline: The segment's video
        segments: All labeled segments of that video
        tau_o: Observation length
        tau_a: Anticipation gap
        stride: Frame stride, 0 meaning tau_a
        sample_id: Identifier; defaults to video id and start time
        labels: Precomputed frame_labels for the video

    Returns:
        AnticipationSample; frames before time 1 repeat the earliest frame
        and are labeled IGNORE_LABEL

    Raises:
        SampleSkipped: tau_a >= tau_s, so no frame precedes the gap
    """
    sample_id = sample_id or f"{segment.video_id}@{segment.start}"
    if tau_a >= segment.start:
        raise SampleSkipped(f"anticipation gap {tau_a} leaves no observable frame before t={segment.start}")
    times = clip_times(segment.start, tau_o, tau_a, stride)
    if labels is None:
        labels = frame_labels(segments, timeline.length)
    observed = np.where(times >= 1, labels[np.clip(times, 0, timeline.length)], IGNORE_LABEL)
    track = LabelTrack(np.append(observed, segment.action_id))
    return AnticipationSample(
        sample_id=sample_id,
        inputs=timeline.at(times),
        track=track,
        times=times,
        num_padded=int(np.sum(times < 1)),
    )


@dataclass
class ActionDataset:
    """Timelines, segments and vocabulary of one dataset, plus its manifest"""
    videos: List[VideoTimeline]
    segments: Dict[str, List[ActionSegment]]
    vocab: ActionVocabulary
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def frame_shape(self) -> Tuple[int, ...]:
        return self.videos[0].frame_shape if self.videos else ()

    @property
    def num_segments(self) -> int:
        return sum(len(s) for s in self.segments.values())

    def split_videos(self, split: Optional[str]) -> List[VideoTimeline]:
        """Videos of a split in dataset order; None selects every video"""
        if split is None:
            return list(self.videos)
        splits = self.manifest.get("splits", {})
        if split not in splits:
            raise ValidationError(f"dataset has no split {split!r}; available: {', '.join(sorted(splits))}")
        wanted = set(splits[split])
        return [v for v in self.videos if v.video_id in wanted]


def build_samples(dataset: ActionDataset, split: Optional[str],
                  data_config: DataConfig) -> Tuple[List[AnticipationSample], List[SkipRecord]]:
    """
    Sample one clip per segment in (video index, segment index) order

    Returns:
        (samples, skipped) where skipped records each segment's reason
    """
    samples: List[AnticipationSample] = []
    skipped: List[SkipRecord] = []
    for video in dataset.split_videos(split):
        segments = dataset.segments.get(video.video_id, [])
        labels = frame_labels(segments, video.length)
        for index, segment in enumerate(segments):
            sample_id = f"{video.video_id}-s{index:03d}"
            try:
                samples.append(sample_clip(
                    segment, video, segments, data_config.tau_o, data_config.tau_a,
                    data_config.effective_stride, sample_id=sample_id, labels=labels,
                ))
            except SampleSkipped as e:
                skipped.append(SkipRecord(sample_id, e.reason))

    padded = sum(1 for s in samples if s.num_padded)
    if skipped:
        logger.warning(f"Skipped {len(skipped)} segment(s) in split {split}: {skipped[0].reason} ...")
    if padded:
        logger.warning(f"{padded} sample(s) in split {split} left-padded for missing history")
    logger.info(f"Built {len(samples)} samples for split {split} (T={data_config.num_frames})")
    return samples, skipped


@dataclass
class Batch:
    sample_ids: List[str]
    inputs: np.ndarray   # (B, T, ...)
    labels: np.ndarray   # (B, T+1)

    def __len__(self) -> int:
        return len(self.sample_ids)


def iterate_batches(samples: Sequence[AnticipationSample], batch_size: int,
                    rng: Optional[np.random.Generator] = None, shuffle: bool = True) -> Iterator[Batch]:
    """
    Yield batches in a seed-determined order; the last batch may be smaller

    Args:
        samples: Samples with a common T and frame shape
        batch_size: Maximum batch size
        rng: Shuffling generator (required when shuffle is True)
        shuffle: Permute sample order
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be at least 1")
    order = np.arange(len(samples))
    if shuffle:
        if rng is None:
            raise ValidationError("shuffling requires a random generator")
        order = rng.permutation(len(samples))
    for begin in range(0, len(order), batch_size):
        chosen = [samples[i] for i in order[begin:begin + batch_size]]
        yield Batch(
            sample_ids=[s.sample_id for s in chosen],
            inputs=np.stack([s.inputs for s in chosen]),
            labels=np.stack([s.track.labels for s in chosen]),
        )


# ----------------------------------------------------------------------
# Feature files
# ----------------------------------------------------------------------

@dataclass
class FeatureHeader:
    n_samples: int
    num_frames: int
    dim: int
    dtype: str
    vocab_hash: str
    sample_ids: List[str]


def write_features(path: Union[str, Path], samples: Sequence[AnticipationSample], vocab_hash: str) -> Path:
    """
    Atomically write (T, dim) feature samples and their labels

    Raises:
        ValidationError: No samples, or samples of unequal shape
    """
    if not samples:
        raise ValidationError("cannot write an empty feature file")
    shapes = {s.inputs.shape for s in samples}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValidationError(f"feature samples must share one (T, dim) shape, got {sorted(shapes)}")
    features = np.stack([s.inputs for s in samples])
    labels = np.stack([s.track.labels for s in samples]).astype(np.int64)
    header = {
        "kind": "samples",
        "n_samples": len(samples),
        "num_frames": int(features.shape[1]),
        "dim": int(features.shape[2]),
        "dtype": features.dtype.str,
        "vocab_hash": vocab_hash,
        "sample_ids": [s.sample_id for s in samples],
    }
    path = Path(path)
    atomic_write_bytes(path, encode_container(FEATURE_MAGIC, header, {"features": features, "labels": labels}))
    logger.info(f"Wrote {len(samples)} feature samples to {path}")
    return path


def read_features(path: Union[str, Path]) -> Tuple[List[AnticipationSample], FeatureHeader]:
    """
    Read a file written by write_features

    Raises:
        FormatError: Corrupt or truncated file, or header inconsistent with the payload
    """
    header, arrays = decode_container(Path(path).read_bytes(), FEATURE_MAGIC)
    if header.get("kind") != "samples":
        raise FormatError(f"{path} is not a sample feature file", offset=PREFIX_SIZE)
    try:
        meta = FeatureHeader(
            n_samples=int(header["n_samples"]),
            num_frames=int(header["num_frames"]),
            dim=int(header["dim"]),
            dtype=str(header["dtype"]),
            vocab_hash=str(header["vocab_hash"]),
            sample_ids=list(header["sample_ids"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"feature header field missing or invalid: {e}", offset=PREFIX_SIZE) from e

    features, labels = arrays.get("features"), arrays.get("labels")
    expected = (meta.n_samples, meta.num_frames, meta.dim)
    if features is None or labels is None:
        raise FormatError("feature file lacks its features or labels array", offset=PREFIX_SIZE)
    if features.shape != expected or labels.shape != (meta.n_samples, meta.num_frames + 1) \
            or len(meta.sample_ids) != meta.n_samples:
        raise FormatError(
            f"header declares {expected} but payload holds {features.shape} features, "
            f"{labels.shape} labels and {len(meta.sample_ids)} ids",
            offset=PREFIX_SIZE,
        )
    samples = [
        AnticipationSample(sample_id=sid, inputs=features[i], track=LabelTrack(labels[i]))
        for i, sid in enumerate(meta.sample_ids)
    ]
    return samples, meta


def encode_timeline(video: VideoTimeline) -> bytes:
    header = {"kind": "timeline", "video_id": video.video_id, "length": video.length,
              "frame_shape": list(video.frame_shape)}
    return encode_container(FEATURE_MAGIC, header, {"frames": video.frames})


def decode_timeline(blob: bytes, source: str = "<timeline>") -> VideoTimeline:
    header, arrays = decode_container(blob, FEATURE_MAGIC)
    if header.get("kind") != "timeline" or "frames" not in arrays:
        raise FormatError(f"{source} is not a video timeline file", offset=PREFIX_SIZE)
    frames = arrays["frames"]
    if frames.shape[0] != header.get("length"):
        raise FormatError(f"{source}: header length {header.get('length')} but {frames.shape[0]} frames",
                          offset=PREFIX_SIZE)
    return VideoTimeline(video_id=str(header["video_id"]), frames=frames)


# ----------------------------------------------------------------------
# Dataset directory
# ----------------------------------------------------------------------

def segments_to_csv(dataset: ActionDataset) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["video_id", "start", "end", "action_id"])
    for video in dataset.videos:
        for s in dataset.segments.get(video.video_id, []):
            writer.writerow([s.video_id, s.start, s.end, s.action_id])
    return buffer.getvalue()


def segments_from_csv(text: str) -> Dict[str, List[ActionSegment]]:
    segments: Dict[str, List[ActionSegment]] = {}
    reader = csv.DictReader(io.StringIO(text))
    for line, row in enumerate(reader, start=2):
        try:
            segment = ActionSegment(row["video_id"], int(row["start"]), int(row["end"]), int(row["action_id"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"segments.csv line {line}: {e}") from e
        segments.setdefault(segment.video_id, []).append(segment)
    return segments


class DatasetManager:
    """
    Reads and writes the dataset directory

    Layout: videos/<video_id>.feat (one timeline per video), segments.csv,
    vocab.csv and manifest.json. Video files are read and written
    concurrently; every file is replaced atomically.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @property
    def video_dir(self) -> Path:
        return self.root / "videos"

    def video_path(self, video_id: str) -> Path:
        return self.video_dir / f"{video_id}.feat"

    async def save(self, dataset: ActionDataset) -> None:
        """Write every dataset file"""
        self.video_dir.mkdir(parents=True, exist_ok=True)

        def write_video(video: VideoTimeline) -> None:
            atomic_write_bytes(self.video_path(video.video_id), encode_timeline(video))

        await asyncio.gather(*(asyncio.to_thread(write_video, v) for v in dataset.videos))

        manifest = dict(dataset.manifest)
        manifest["vocab_hash"] = dataset.vocab.hash
        manifest["videos"] = [v.video_id for v in dataset.videos]
        manifest["frame_shape"] = list(dataset.frame_shape)
        await asyncio.to_thread(atomic_write_text, self.root / "segments.csv", segments_to_csv(dataset))
        await asyncio.to_thread(atomic_write_text, self.root / "vocab.csv", dataset.vocab.to_csv_text())
        await asyncio.to_thread(
            atomic_write_text, self.root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
        dataset.manifest = manifest
        logger.info(f"Dataset saved to {self.root}: {len(dataset.videos)} videos, {dataset.num_segments} segments")

    async def load(self) -> ActionDataset:
        """
        Read the dataset directory

        Raises:
            ValidationError: Missing files
            FormatError: Corrupt video file
            VocabularyError: vocab.csv does not match the manifest hash
        """
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise ValidationError(f"no dataset at {self.root} (manifest.json missing)")
        try:
            manifest = json.loads(await asyncio.to_thread(manifest_path.read_text, encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON in {manifest_path}: {e}") from e

        vocab = ActionVocabulary.from_csv_text(
            await asyncio.to_thread((self.root / "vocab.csv").read_text, encoding="utf-8")
        )
        if manifest.get("vocab_hash") and manifest["vocab_hash"] != vocab.hash:
            raise VocabularyError(f"vocab.csv in {self.root} does not match the manifest's vocabulary hash")
        segments = segments_from_csv(
            await asyncio.to_thread((self.root / "segments.csv").read_text, encoding="utf-8")
        )

        async def read_video(video_id: str) -> VideoTimeline:
            path = self.video_path(video_id)
            if not path.exists():
                raise ValidationError(f"missing video file {path}")
            blob = await asyncio.to_thread(path.read_bytes)
            return decode_timeline(blob, source=str(path))

        videos = list(await asyncio.gather(*(read_video(vid) for vid in manifest.get("videos", []))))
        for video in videos:
            bad = [s for s in segments.get(video.video_id, []) if s.action_id >= len(vocab)]
            if bad:
                raise VocabularyError(f"video {video.video_id} uses action {bad[0].action_id} outside the vocabulary")

        dataset = ActionDataset(videos=videos, segments=segments, vocab=vocab, manifest=manifest)
        logger.info(f"Loaded dataset {self.root}: {len(videos)} videos, {dataset.num_segments} segments")
        return dataset

    def checksum(self) -> str:
        """Digest over every dataset file's name and contents"""
        files = sorted(p for p in self.root.rglob("*") if p.is_file() and p.name != "config.txt")
        lines = [f"{p.relative_to(self.root).as_posix()} {sha256_file(p)}" for p in files]
        return sha256_bytes("\n".join(lines).encode("utf-8"))


def load_dataset(root: Union[str, Path]) -> ActionDataset:
    return asyncio.run(DatasetManager(root).load())


def save_dataset(root: Union[str, Path], dataset: ActionDataset) -> None:
    asyncio.run(DatasetManager(root).save(dataset))
