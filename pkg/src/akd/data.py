"""Synthetic multi-invocation DDSD data, frame splicing, batching and file IO.

Utterances are built from a small inventory of "phones", each a fixed mean
vector in feature space.  Filler speech is a random phone string; keyword
invocations (HAG, AG) embed a fixed phone sequence at a random position in
device-directed examples, and confusable partial keywords in some of the
negatives.  Follow-up (FCO) examples carry no keyword: device-directed ones
differ only by a global offset added to every frame.

Frame values follow ``phone_mean + speaker_offset + label_shift + noise``
where noise is a first-order autoregressive process.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from akd.errors import ConfigError, ContractError, ParseError

FORMAT_HEADER = "akd-dataset"
FORMAT_VERSION = "v1"


class InvocationType(enum.IntEnum):
    HAG = 0
    AG = 1
    FCO = 2


INVOCATIONS = tuple(InvocationType)


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, D) float32
    invocation: InvocationType
    label: int
    id: str

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"{self.id}: frames must be a non-empty (T, D) matrix")
        if not np.isfinite(self.frames).all():
            raise ContractError(f"{self.id}: non-finite frame values")
        if self.label not in (0, 1):
            raise ContractError(f"{self.id}: label must be 0 or 1")
        self.invocation = InvocationType(self.invocation)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.id == other.id
            and self.invocation == other.invocation
            and self.label == other.label
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


@dataclass
class InvocationParams:
    """Difficulty knobs for one invocation type.

    ``keyword`` is the phone sequence of the wake phrase (empty for FCO);
    ``distractors`` are confusable phone sequences planted in negatives with
    probability ``distractor_rate``; ``label_shift`` is the global offset, along
    the config's shift direction, carried by every frame of a device-directed
    example.
    """

    keyword: tuple[int, ...] = ()
    distractors: tuple[tuple[int, ...], ...] = ()
    distractor_rate: float = 0.5
    label_shift: float = 0.0


def _default_invocations() -> dict[str, InvocationParams]:
    return {
        "HAG": InvocationParams(keyword=(1, 2, 3, 4, 5), distractors=((1, 2), (3, 4, 5), (1, 2, 4, 5)),
                                distractor_rate=0.6),
        "AG": InvocationParams(keyword=(3, 4, 5), distractors=((3, 4), (4, 5), (3, 5, 4)),
                               distractor_rate=0.6),
        "FCO": InvocationParams(label_shift=1.0),
    }


@dataclass
class GeneratorConfig:
    dim: int = 16
    num_phones: int = 10
    phone_scale: float = 1.0
    phone_duration: tuple[int, int] = (2, 4)
    length_range: tuple[int, int] = (20, 60)
    noise_scale: float = 0.8
    noise_corr: float = 0.5
    speaker_scale: float = 0.3
    positive_rate: float = 0.5
    invocation_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    invocations: dict[str, InvocationParams] = field(default_factory=_default_invocations)
    inventory_seed: int = 1234
    seed: int = 0

    def __post_init__(self) -> None:
        self.phone_duration = tuple(self.phone_duration)
        self.length_range = tuple(self.length_range)
        self.invocation_mix = tuple(self.invocation_mix)
        self.invocations = {
            k: v if isinstance(v, InvocationParams) else InvocationParams(
                keyword=tuple(v.get("keyword", ())),
                distractors=tuple(tuple(d) for d in v.get("distractors", ())),
                distractor_rate=float(v.get("distractor_rate", 0.5)),
                label_shift=float(v.get("label_shift", 0.0)),
            )
            for k, v in self.invocations.items()
        }
        self.validate()

    def validate(self) -> None:
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"length_range must satisfy 1 <= lo <= hi, got {self.length_range}")
        dlo, dhi = self.phone_duration
        if not 1 <= dlo <= dhi:
            raise ConfigError(f"phone_duration must satisfy 1 <= lo <= hi, got {self.phone_duration}")
        if self.noise_scale < 0 or self.phone_scale <= 0 or self.speaker_scale < 0:
            raise ConfigError("scales must be non-negative (phone_scale positive)")
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ConfigError("positive_rate must lie in [0, 1]")
        if set(self.invocations) != {i.name for i in InvocationType}:
            raise ConfigError("invocations must define exactly HAG, AG and FCO")
        if self.dim < 1 or self.num_phones < 2:
            raise ConfigError("dim must be >= 1 and num_phones >= 2")
        for name, p in self.invocations.items():
            for seq in (p.keyword, *p.distractors):
                if any(not 0 <= ph < self.num_phones for ph in seq):
                    raise ConfigError(f"{name}: phone index out of range")
        mix = np.asarray(self.invocation_mix, dtype=float)
        if mix.shape != (3,) or (mix < 0).any() or mix.sum() <= 0:
            raise ConfigError("invocation_mix must be three non-negative weights")

    def inventory(self) -> tuple[np.ndarray, np.ndarray]:
        """Phone mean vectors (P, D) and the unit label-shift direction (D,)."""
        rng = np.random.default_rng(self.inventory_seed)
        means = rng.standard_normal((self.num_phones, self.dim)) * self.phone_scale
        direction = rng.standard_normal(self.dim)
        direction /= np.linalg.norm(direction)
        return means, direction

    def keyword_free_mean(self, invocation: InvocationType | str, label: int) -> np.ndarray:
        """Expected frame value for an invocation type without keywords."""
        params = self.invocations[InvocationType[str(getattr(invocation, "name", invocation))].name]
        if params.keyword or (params.distractors and params.distractor_rate > 0):
            raise ConfigError("closed-form mean only exists for keyword-free invocations")
        means, direction = self.inventory()
        return means.mean(axis=0) + label * params.label_shift * direction


class _Sampler:
    def __init__(self, config: GeneratorConfig, rng: np.random.Generator):
        self.cfg = config
        self.rng = rng
        self.means, self.direction = config.inventory()

    def _phone_run(self, phones: Sequence[int]) -> np.ndarray:
        lo, hi = self.cfg.phone_duration
        durs = self.rng.integers(lo, hi + 1, size=len(phones))
        return np.repeat(np.asarray(phones, dtype=np.int64), durs)

    def utterance(self, inv: InvocationType, label: int) -> tuple[np.ndarray, np.ndarray]:
        cfg, rng = self.cfg, self.rng
        params = cfg.invocations[inv.name]
        t = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
        # filler: random phones until the utterance is long enough
        tags = np.empty(0, dtype=np.int64)
        while tags.size < t:
            tags = np.concatenate([tags, self._phone_run(rng.integers(0, cfg.num_phones, size=8))])
        tags = tags[:t]

        planted: Sequence[int] = ()
        if label == 1 and params.keyword:
            planted = params.keyword
        elif label == 0 and params.distractors and rng.random() < params.distractor_rate:
            planted = params.distractors[int(rng.integers(len(params.distractors)))]
        if planted:
            seg = self._phone_run(planted)
            if seg.size > tags.size:
                tags = np.concatenate([tags, self._phone_run(rng.integers(0, cfg.num_phones, size=seg.size))])
                tags = tags[: seg.size]
            start = int(rng.integers(0, tags.size - seg.size + 1))
            tags[start : start + seg.size] = seg

        n = tags.size
        eps = rng.standard_normal((n, cfg.dim))
        noise = np.empty_like(eps)
        rho = cfg.noise_corr
        noise[0] = eps[0]
        scale = np.sqrt(1.0 - rho * rho)
        for i in range(1, n):
            noise[i] = rho * noise[i - 1] + scale * eps[i]
        speaker = rng.standard_normal(cfg.dim) * cfg.speaker_scale
        frames = self.means[tags] + speaker + cfg.noise_scale * noise
        if label == 1 and params.label_shift:
            frames = frames + params.label_shift * self.direction
        return frames.astype(np.float32), tags


def _draw_labels_and_types(config: GeneratorConfig, rng: np.random.Generator, n: int):
    mix = np.asarray(config.invocation_mix, dtype=float)
    invs = rng.choice(3, size=n, p=mix / mix.sum())
    labels = (rng.random(n) < config.positive_rate).astype(int)
    return invs, labels


def generate(config: GeneratorConfig, n: int, prefix: str | None = None) -> list[FeatureSequence]:
    """Draw ``n`` labelled utterances; fully determined by ``config.seed``."""
    if n < 1:
        raise ContractError("n must be >= 1")
    return [seq for seq, _ in _generate_tagged(config, n, prefix)]


def generate_aux(config: GeneratorConfig, n: int, prefix: str | None = None) -> list[tuple[FeatureSequence, np.ndarray]]:
    """Like :func:`generate` but also returns per-frame phone tags."""
    if n < 1:
        raise ContractError("n must be >= 1")
    return _generate_tagged(config, n, prefix)


def _generate_tagged(config, n, prefix):
    rng = np.random.default_rng(config.seed)
    sampler = _Sampler(config, rng)
    invs, labels = _draw_labels_and_types(config, rng, n)
    prefix = prefix if prefix is not None else f"s{config.seed}"
    out = []
    for i in range(n):
        inv = InvocationType(int(invs[i]))
        frames, tags = sampler.utterance(inv, int(labels[i]))
        out.append((FeatureSequence(frames, inv, int(labels[i]), f"{prefix}-{i:06d}"), tags))
    return out


# -- splicing and batching ---------------------------------------------------


def splice(frames, context: int = 3) -> np.ndarray:
    """Stack each frame with ``context`` neighbours on both sides.

    Accepts a FeatureSequence or a (T, D) array and returns (T, D * (2c+1)).
    Boundary frames are replicated.
    """
    if isinstance(frames, FeatureSequence):
        frames = frames.frames
    if context < 0:
        raise ContractError("context must be >= 0")
    x = np.asarray(frames)
    if context == 0:
        return x.copy()
    t = x.shape[0]
    xp = np.pad(x, ((context, context), (0, 0)), mode="edge")
    return np.concatenate([xp[j : j + t] for j in range(2 * context + 1)], axis=1)


@dataclass
class Batch:
    frames: np.ndarray  # (B, T_max, D') zero-padded
    mask: np.ndarray  # (B, T_max) bool, true on real frames
    labels: np.ndarray  # (B,) int
    invocations: np.ndarray  # (B,) int codes of InvocationType
    ids: list[str]

    @property
    def size(self) -> int:
        return self.frames.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def subset(self, rows) -> "Batch":
        """Rows ``rows`` of this batch, trimmed to their own longest length."""
        rows = np.asarray(rows, dtype=np.intp)
        t = int(self.mask[rows].sum(axis=1).max())
        return Batch(self.frames[rows, :t], self.mask[rows, :t], self.labels[rows],
                     self.invocations[rows], [self.ids[i] for i in rows])


def collate(seqs: Sequence[FeatureSequence], context: int = 3, spliced: dict | None = None) -> Batch:
    """Splice, zero-pad to the longest sequence and build the frame mask."""
    if not seqs:
        raise ContractError("cannot collate an empty batch")
    mats = [spliced[s.id] if spliced is not None and s.id in spliced else splice(s, context) for s in seqs]
    t_max = max(m.shape[0] for m in mats)
    d = mats[0].shape[1]
    frames = np.zeros((len(seqs), t_max, d), dtype=np.float32)
    mask = np.zeros((len(seqs), t_max), dtype=bool)
    for b, m in enumerate(mats):
        frames[b, : m.shape[0]] = m
        mask[b, : m.shape[0]] = True
    labels = np.array([s.label for s in seqs], dtype=np.int64)
    invs = np.array([int(s.invocation) for s in seqs], dtype=np.int64)
    return Batch(frames, mask, labels, invs, [s.id for s in seqs])


def make_batches(dataset: Sequence[FeatureSequence], batch_size: int, seed: int, epoch: int = 0,
                 context: int = 3, shuffle: bool = True, spliced: dict | None = None,
                 bucket: int = 0) -> list[Batch]:
    """Shuffle (deterministically per seed and epoch) and cut into padded batches.

    With ``bucket > 0`` the shuffled order is cut into pools of
    ``bucket * batch_size`` examples, each pool is sorted by length before
    batching and the resulting batches are shuffled again.  This keeps the
    batches random but cuts padding.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ContractError("cannot batch an empty dataset")
    order = np.arange(len(dataset))
    rng = np.random.default_rng([seed, epoch])
    if shuffle:
        order = rng.permutation(len(dataset))
    chunks = []
    if bucket > 0:
        pool = bucket * batch_size
        for p in range(0, len(order), pool):
            idx = sorted(order[p : p + pool], key=lambda i: (dataset[i].num_frames, i))
            chunks += [idx[s : s + batch_size] for s in range(0, len(idx), batch_size)]
        if shuffle:
            chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    else:
        chunks = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
    return [collate([dataset[i] for i in c], context, spliced) for c in chunks]


def split_by_id(dataset: Iterable[FeatureSequence], val_fraction: float = 0.1):
    """Deterministic train/validation split on a hash of each example id."""
    train, val = [], []
    cut = int(val_fraction * 2**64)
    for seq in dataset:
        h = int.from_bytes(hashlib.sha256(seq.id.encode()).digest()[:8], "big")
        (val if h < cut else train).append(seq)
    return train, val


# -- file IO -----------------------------------------------------------------


def _fmt(values: np.ndarray) -> str:
    return " ".join(str(v) for v in values.astype(np.float32).ravel())


def save_dataset(path, dataset: Sequence[FeatureSequence]) -> None:
    dims = {s.frames.shape[1] for s in dataset}
    if len(dims) > 1:
        raise ContractError(f"mixed feature dimensions in dataset: {sorted(dims)}")
    d = dims.pop() if dims else 0
    lines = [f"{FORMAT_HEADER} {FORMAT_VERSION} D={d}"]
    for s in dataset:
        t, dd = s.frames.shape
        lines.append("\t".join([s.id, s.invocation.name, str(s.label), str(t), str(dd), _fmt(s.frames)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> list[FeatureSequence]:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return []
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    head = lines[0].split(" ")
    if len(head) != 3 or head[0] != FORMAT_HEADER or not head[2].startswith("D="):
        raise ParseError(f"line 1: bad header {lines[0]!r}")
    if head[1] != FORMAT_VERSION:
        raise ParseError(f"line 1: version mismatch, file has {head[1]}, expected {FORMAT_VERSION}")
    try:
        dim = int(head[2][2:])
    except ValueError:
        raise ParseError(f"line 1: bad dimension field {head[2]!r}") from None
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 6:
            raise ParseError(f"line {lineno}: expected 6 tab-separated fields, got {len(fields)}")
        sid, inv, label, t, d, vals = fields
        try:
            inv_t = InvocationType[inv]
            label_i, t_i, d_i = int(label), int(t), int(d)
            arr = np.array(vals.split(" "), dtype=np.float32) if vals else np.empty(0, dtype=np.float32)
        except (KeyError, ValueError) as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if d_i != dim:
            raise ParseError(f"line {lineno}: D={d_i} does not match header D={dim}")
        if arr.size != t_i * d_i:
            raise ParseError(f"line {lineno}: expected {t_i * d_i} values, got {arr.size}")
        try:
            out.append(FeatureSequence(arr.reshape(t_i, d_i), inv_t, label_i, sid))
        except ContractError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    return out
