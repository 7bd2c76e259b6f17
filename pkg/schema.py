"""
Synthetic action-schema datasets
Order-m Markov chains over actions with geometric durations, rendered as
noisy class-conditioned feature vectors or tiny frames, plus the analytic
Bayes rates used as accuracy bounds
"""

import itertools
import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import RenderMode, SchemaConfig
from data import ActionDataset, ActionSegment, ActionVocabulary, VideoTimeline
from errors import ValidationError

logger = logging.getLogger(__name__)

PATTERN_GRID = 4
PATTERN_CELLS = 4
STATIONARY_ITERATIONS = 512


@dataclass
class SchemaSpec:
    """Chain, duration and emission parameters of a synthetic dataset"""
    num_actions: int = 8
    num_verbs: int = 4
    order: int = 2
    feature_dim: int = 16
    sigma: float = 0.3
    duration_p: float = 0.5
    min_duration: int = 1
    max_duration: int = 4
    concentration: float = 0.3
    deterministic: bool = False
    gap_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        """Validate the schema parameters"""
        if self.num_actions < 2:
            raise ValidationError("schema.num_actions must be at least 2")
        if self.num_verbs < 1 or self.num_actions % self.num_verbs:
            raise ValidationError("schema.num_actions must be a multiple of schema.num_verbs")
        if self.order < 1:
            raise ValidationError("schema.order must be at least 1")
        if self.feature_dim < 1:
            raise ValidationError("schema.feature_dim must be positive")
        if self.sigma < 0:
            raise ValidationError("schema.sigma must be non-negative")
        if not 0 < self.duration_p <= 1:
            raise ValidationError("schema.duration_p must lie in (0, 1]")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValidationError("schema durations need 1 <= min_duration <= max_duration")
        if self.concentration <= 0:
            raise ValidationError("schema.concentration must be positive")
        if not 0 <= self.gap_prob < 1:
            raise ValidationError("schema.gap_prob must lie in [0, 1)")

    @classmethod
    def from_config(cls, config: SchemaConfig, seed: int) -> "SchemaSpec":
        values = {f.name: getattr(config, f.name) for f in fields(cls) if f.name != "seed"}
        return cls(seed=seed, **values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SchemaSpec":
        """
        Raises:
            ValidationError: A field is missing (the message names it) or unknown
        """
        names = [f.name for f in fields(cls)]
        for name in names:
            if name not in data:
                raise ValidationError(f"schema spec is missing field: {name}")
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ValidationError(f"unknown schema spec field: {unknown[0]}")
        return cls(**{name: data[name] for name in names})


def _streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for the transition table, emissions and chains"""
    table_seq, emission_seq, chain_seq = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(table_seq), np.random.default_rng(emission_seq),
            np.random.default_rng(chain_seq))


def transition_table(spec: SchemaSpec) -> np.ndarray:
    """
    Next-action distribution for every context of `order` previous actions

    Returns:
        Array of shape (K,) * order + (K,); entry [a_1, .., a_m, b] is
        P(next = b | previous actions a_1..a_m, oldest first). The most
        recent action never repeats; deterministic specs use one-hot rows.
    """
    rng, _, _ = _streams(spec.seed)
    k = spec.num_actions
    table = np.zeros((k,) * spec.order + (k,), dtype=np.float64)
    for context in itertools.product(range(k), repeat=spec.order):
        allowed = [b for b in range(k) if b != context[-1]]
        weights = rng.dirichlet(np.full(len(allowed), spec.concentration))
        row = np.zeros(k, dtype=np.float64)
        if spec.deterministic:
            row[allowed[int(np.argmax(weights))]] = 1.0
        else:
            row[allowed] = weights
            row /= row.sum()
        table[context] = row
    return table


def _initial_context(k: int, order: int, rng: np.random.Generator) -> List[int]:
    chain = [int(rng.integers(k))]
    while len(chain) < order:
        step = int(rng.integers(k - 1))
        chain.append(step + (step >= chain[-1]))
    return chain


def iter_action_chain(table: np.ndarray, rng: np.random.Generator) -> Iterator[int]:
    """Endless action chain, starting from a uniform valid context"""
    order = table.ndim - 1
    k = table.shape[-1]
    context = _initial_context(k, order, rng)
    yield from context
    while True:
        action = int(rng.choice(k, p=table[tuple(context)]))
        context = context[1:] + [action]
        yield action


def sample_action_chain(table: np.ndarray, length: int, rng: np.random.Generator) -> List[int]:
    """Draw `length` actions from the chain"""
    return list(itertools.islice(iter_action_chain(table, rng), length))


def _duration(spec: SchemaSpec, rng: np.random.Generator) -> int:
    return int(np.clip(rng.geometric(spec.duration_p), spec.min_duration, spec.max_duration))


def _video_segments(video_id: str, spec: SchemaSpec, table: np.ndarray, video_len: int,
                    rng: np.random.Generator) -> List[ActionSegment]:
    actions = iter_action_chain(table, rng)
    segments: List[ActionSegment] = []
    t = 1
    while t <= video_len:
        if segments and spec.gap_prob and rng.random() < spec.gap_prob:
            t += _duration(spec, rng)
            if t > video_len:
                break
        action = next(actions)
        duration = _duration(spec, rng)
        segments.append(ActionSegment(video_id, t, min(t + duration, video_len + 1), action))
        t += duration
    return segments


def _frame_patterns(spec: SchemaSpec, frame_shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """One block pattern per action, (K, H, W, C) in [0, 1]"""
    height, width, channels = frame_shape
    if height % PATTERN_GRID or width % PATTERN_GRID:
        raise ValidationError(f"frame size must be divisible by {PATTERN_GRID} to render action patterns")
    block = np.ones((height // PATTERN_GRID, width // PATTERN_GRID))
    patterns = []
    for _ in range(spec.num_actions):
        grid = np.zeros(PATTERN_GRID * PATTERN_GRID)
        grid[rng.choice(grid.size, PATTERN_CELLS, replace=False)] = 1.0
        image = np.kron(grid.reshape(PATTERN_GRID, PATTERN_GRID), block)
        patterns.append(np.repeat(image[:, :, None], channels, axis=2))
    return np.stack(patterns)


def _render(segments: Sequence[ActionSegment], video_len: int, means: np.ndarray, background: np.ndarray,
            sigma: float, rng: np.random.Generator, clip_unit: bool) -> np.ndarray:
    actions = np.full(video_len, -1, dtype=np.int64)
    for s in segments:
        actions[s.start - 1:s.end - 1] = s.action_id
    clean = np.where((actions >= 0).reshape((-1,) + (1,) * background.ndim),
                     means[np.maximum(actions, 0)], background)
    frames = clean + sigma * rng.standard_normal(clean.shape)
    if clip_unit:
        frames = np.clip(frames, 0.0, 1.0)
    return frames.astype(np.float32)


def generate_schema_dataset(spec: SchemaSpec, n_videos: int, video_len: int,
                            render: RenderMode = RenderMode.FEATURES,
                            frame_shape: Optional[Sequence[int]] = None,
                            val_fraction: float = 0.2) -> ActionDataset:
    """
    Sample videos from the schema and render every timestep

    Args:
        spec: Schema parameters and seed
        n_videos: Number of videos
        video_len: Timesteps per video
        render: Feature vectors or (H, W, C) frames
        frame_shape: Frame shape for frame rendering
        val_fraction: Share of videos (taken from the end) in the val split

    Returns:
        ActionDataset; identical for identical arguments
    """
    if n_videos < 1 or video_len < 1:
        raise ValidationError("n_videos and video_len must be positive")
    if not 0 <= val_fraction < 1:
        raise ValidationError("val_fraction must lie in [0, 1)")
    render = RenderMode(render)
    table = transition_table(spec)
    _, emission_rng, chain_rng = _streams(spec.seed)

    if render is RenderMode.FRAMES:
        if frame_shape is None:
            raise ValidationError("frame rendering needs a frame shape")
        means = _frame_patterns(spec, frame_shape, emission_rng)
        background = np.zeros(tuple(frame_shape))
    else:
        means = emission_rng.standard_normal((spec.num_actions, spec.feature_dim))
        background = np.zeros(spec.feature_dim)

    videos: List[VideoTimeline] = []
    segments: Dict[str, List[ActionSegment]] = {}
    for index in range(n_videos):
        video_id = f"v{index:04d}"
        video_segments = _video_segments(video_id, spec, table, video_len, chain_rng)
        frames = _render(video_segments, video_len, means, background, spec.sigma, chain_rng,
                         clip_unit=render is RenderMode.FRAMES)
        videos.append(VideoTimeline(video_id, frames))
        segments[video_id] = video_segments

    n_val = int(round(n_videos * val_fraction))
    ids = [v.video_id for v in videos]
    manifest = {
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "render": render.value,
        "n_videos": n_videos,
        "video_len": video_len,
        "splits": {"train": ids[:n_videos - n_val], "val": ids[n_videos - n_val:]},
    }
    vocab = ActionVocabulary.factored(spec.num_actions, spec.num_verbs)
    dataset = ActionDataset(videos=videos, segments=segments, vocab=vocab, manifest=manifest)
    logger.info(
        f"Generated {n_videos} videos ({render.value}), {dataset.num_segments} segments, "
        f"K={spec.num_actions}, order {spec.order}"
    )
    return dataset


def stationary_context_distribution(table: np.ndarray) -> np.ndarray:
    """
    Long-run distribution over contexts of the order-m chain

    Averages the state distribution over STATIONARY_ITERATIONS steps from
    the generator's uniform valid start, which also converges for periodic
    (deterministic) chains.

    Returns:
        Array of shape (K,) * order summing to 1
    """
    order = table.ndim - 1
    k = table.shape[-1]
    states = list(itertools.product(range(k), repeat=order))
    position = {state: i for i, state in enumerate(states)}
    moves = np.zeros((len(states), len(states)))
    for state in states:
        for b in range(k):
            p = table[state][b]
            if p:
                moves[position[state], position[state[1:] + (b,)]] += p

    dist = np.array([float(all(s[i] != s[i + 1] for i in range(order - 1))) for s in states])
    dist /= dist.sum()
    average = np.zeros_like(dist)
    for _ in range(STATIONARY_ITERATIONS):
        average += dist
        dist = dist @ moves
    return (average / STATIONARY_ITERATIONS).reshape((k,) * order)


def bayes_rate(spec: SchemaSpec, order: int, table: Optional[np.ndarray] = None) -> float:
    """
    Best achievable next-action accuracy for a predictor that sees the
    last `order` actions, under the chain's long-run distribution

    order=1 gives the memoryless bound; order >= spec.order the full rate.
    """
    if order < 0:
        raise ValidationError("order must be non-negative")
    table = transition_table(spec) if table is None else table
    m = table.ndim - 1
    k = table.shape[-1]
    joint = stationary_context_distribution(table)[..., None] * table   # (K,)*m + (K,)
    seen = min(order, m)
    grouped = joint.reshape(k ** (m - seen), k ** seen, k).sum(axis=0)
    return float(grouped.max(axis=-1).sum())


def empirical_transitions(chains: Sequence[Sequence[int]], order: int, num_actions: int) -> np.ndarray:
    """
    Count context -> next transitions

    Returns:
        Integer array of shape (K,) * order + (K,)
    """
    counts = np.zeros((num_actions,) * order + (num_actions,), dtype=np.int64)
    for chain in chains:
        for i in range(order, len(chain)):
            counts[tuple(chain[i - order:i + 1])] += 1
    return counts


def dataset_chains(dataset: ActionDataset) -> List[List[int]]:
    """Action chain of every video in dataset order"""
    return [[s.action_id for s in dataset.segments.get(v.video_id, [])] for v in dataset.videos]
