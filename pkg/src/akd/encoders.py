"""Transformer and parallel-branch conformer acoustic encoders.

Both encoders keep the frame rate of their input (no subsampling) so teacher
and student embeddings can be compared frame by frame.  Parameters live in a
flat ``dict`` keyed by dot-separated paths such as ``layers.0.attn.wq``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from akd import functional as F
from akd.data import Batch, FeatureSequence, collate
from akd.errors import ConfigError, ContractError, DimensionError
from akd.optim import Adam
from akd.tensor import Tensor, backward, concat, log, clamp_min, mul, permute, reshape, scale, sum, take

Params = dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "conformer"
    layers: int = 2
    hidden: int = 32
    heads: int = 4
    ff_hidden: int = 128
    conv_kernel: int = 7
    input_dim: int = 112
    max_len: int = 512

    def __post_init__(self) -> None:
        if self.kind not in ("transformer", "conformer"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if min(self.layers, self.hidden, self.heads, self.ff_hidden, self.input_dim, self.max_len) < 1:
            raise ConfigError("encoder sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, EncoderConfig] = {
    "paper-transformer": EncoderConfig("transformer", 8, 256, 4, 1024, 31, 280, max_len=300),
    "paper-conformer": EncoderConfig("conformer", 8, 168, 4, 672, 31, 280),
    "paper-teacher": EncoderConfig("conformer", 12, 512, 8, 2048, 15, 280),
    "desk-student": EncoderConfig("transformer", 2, 32, 4, 128, 7, 112, max_len=128),
    "desk-student-conformer": EncoderConfig("conformer", 2, 32, 4, 128, 7, 112),
    "desk-teacher": EncoderConfig("conformer", 3, 48, 4, 192, 7, 112),
}


def preset(name: str) -> EncoderConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- initialisation -------------------------------------------------------------


def _uniform(rng, fan_in, shape, name):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _zeros(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(shape, name):
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def init_linear(params: Params, rng, name: str, n_in: int, n_out: int) -> None:
    params[f"{name}.w"] = _uniform(rng, n_in, (n_in, n_out), f"{name}.w")
    params[f"{name}.b"] = _zeros((n_out,), f"{name}.b")


def _init_norm(params, name, h):
    params[f"{name}.g"] = _ones((h,), f"{name}.g")
    params[f"{name}.b"] = _zeros((h,), f"{name}.b")


def _init_attention(params, rng, name, h):
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear(params, rng, f"{name}.{proj}", h, h)


def _init_ff(params, rng, name, h, ff):
    init_linear(params, rng, f"{name}.fc1", h, ff)
    init_linear(params, rng, f"{name}.fc2", ff, h)


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> Params:
    """Fan-in-scaled uniform projections, zero biases, unit norm gains."""
    h = config.hidden
    p: Params = {}
    init_linear(p, rng, "input", config.input_dim, h)
    if config.kind == "transformer":
        p["pos"] = Tensor(rng.normal(0.0, 0.02, size=(config.max_len, h)), requires_grad=True, name="pos")
    for i in range(config.layers):
        pre = f"layers.{i}"
        if config.kind == "transformer":
            _init_norm(p, f"{pre}.ln_attn", h)
            _init_attention(p, rng, f"{pre}.attn", h)
            _init_norm(p, f"{pre}.ln_ff", h)
            _init_ff(p, rng, f"{pre}.ff", h, config.ff_hidden)
        else:
            _init_norm(p, f"{pre}.ln_ff1", h)
            _init_ff(p, rng, f"{pre}.ff1", h, config.ff_hidden)
            _init_norm(p, f"{pre}.ln_mix", h)
            _init_attention(p, rng, f"{pre}.attn", h)
            init_linear(p, rng, f"{pre}.conv.pw1", h, 2 * h)
            p[f"{pre}.conv.dw.w"] = _uniform(rng, config.conv_kernel, (config.conv_kernel, h), f"{pre}.conv.dw.w")
            p[f"{pre}.conv.dw.b"] = _zeros((h,), f"{pre}.conv.dw.b")
            init_linear(p, rng, f"{pre}.conv.pw2", h, h)
            init_linear(p, rng, f"{pre}.bottleneck", 2 * h, h)
            _init_norm(p, f"{pre}.ln_ff2", h)
            _init_ff(p, rng, f"{pre}.ff2", h, config.ff_hidden)
            _init_norm(p, f"{pre}.ln_out", h)
    if config.kind == "transformer":
        _init_norm(p, "ln_final", h)
    return p


# -- building blocks ------------------------------------------------------------


def _lin(x, p, name):
    return F.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _norm(x, p, name):
    return F.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def self_attention(x: Tensor, p: Params, name: str, mask: np.ndarray, heads: int,
                   return_weights: bool = False):
    """Multi-head scaled dot-product self-attention; masked keys get zero weight."""
    b, t, h = x.shape
    d = h // heads

    def split(z):
        return permute(reshape(z, (b, t, heads, d)), (0, 2, 1, 3))

    q = split(_lin(x, p, f"{name}.wq"))
    k = split(_lin(x, p, f"{name}.wk"))
    v = split(_lin(x, p, f"{name}.wv"))
    scores = scale(q @ k.T, 1.0 / np.sqrt(d))
    weights = F.masked_softmax(scores, mask[:, None, None, :])
    ctx = reshape(permute(weights @ v, (0, 2, 1, 3)), (b, t, h))
    out = _lin(ctx, p, f"{name}.wo")
    return (out, weights) if return_weights else out


def _ff(x, p, name, act):
    return _lin(act(_lin(x, p, f"{name}.fc1")), p, f"{name}.fc2")


def conv_module(x: Tensor, p: Params, name: str, mask: np.ndarray) -> Tensor:
    """pointwise -> GLU -> (mask) -> depthwise -> swish -> pointwise."""
    y = F.glu(_lin(x, p, f"{name}.pw1"))
    y = mul(y, mask[:, :, None].astype(y.dtype))
    y = F.depthwise_conv1d(y, p[f"{name}.dw.w"], p[f"{name}.dw.b"])
    y = F.swish(y)
    return _lin(y, p, f"{name}.pw2")


def transformer_block(x: Tensor, p: Params, i: int, mask: np.ndarray, heads: int) -> Tensor:
    pre = f"layers.{i}"
    x = x + self_attention(_norm(x, p, f"{pre}.ln_attn"), p, f"{pre}.attn", mask, heads)
    return x + _ff(_norm(x, p, f"{pre}.ln_ff"), p, f"{pre}.ff", F.relu)


def conformer_block(x: Tensor, p: Params, i: int, mask: np.ndarray, heads: int) -> Tensor:
    pre = f"layers.{i}"
    x = x + scale(_ff(_norm(x, p, f"{pre}.ln_ff1"), p, f"{pre}.ff1", F.swish), 0.5)
    y = _norm(x, p, f"{pre}.ln_mix")
    sa = self_attention(y, p, f"{pre}.attn", mask, heads)
    conv = conv_module(y, p, f"{pre}.conv", mask)
    x = x + _lin(concat([sa, conv], axis=-1), p, f"{pre}.bottleneck")
    x = x + scale(_ff(_norm(x, p, f"{pre}.ln_ff2"), p, f"{pre}.ff2", F.swish), 0.5)
    return _norm(x, p, f"{pre}.ln_out")


# -- encoder ----------------------------------------------------------------------


class Encoder:
    """An acoustic encoder: config plus a named parameter set."""

    def __init__(self, config: EncoderConfig, params: Params | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_encoder(config, np.random.default_rng(seed))

    @property
    def frozen(self) -> bool:
        return all(t.frozen for t in self.params.values())

    def freeze(self) -> "Encoder":
        for t in self.params.values():
            t.freeze()
        return self

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.params.values()]))

    def fingerprint(self) -> str:
        return params_hash(self.params)

    def __call__(self, x, mask) -> Tensor:
        return self.encode(x, mask)

    def encode(self, x, mask) -> Tensor:
        """Map (B, T, input_dim) frames to (B, T, hidden) embeddings.

        Padded positions come out as zeros and never affect real frames.
        """
        cfg = self.config
        if isinstance(x, Batch):
            x, mask = x.frames, x.mask
        if not isinstance(x, Tensor):
            x = Tensor._wrap(np.asarray(x, dtype=self.params["input.w"].dtype))
        mask = np.asarray(mask, dtype=bool)
        if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
            raise DimensionError(f"encoder expects (B, T, {cfg.input_dim}) input, got {x.shape}")
        if mask.shape != x.shape[:2]:
            raise ContractError(f"mask shape {mask.shape} does not match frames {x.shape[:2]}")
        p = self.params
        h = _lin(x, p, "input")
        if cfg.kind == "transformer":
            t = x.shape[1]
            if t > cfg.max_len:
                raise ContractError(f"sequence length {t} exceeds positional table size {cfg.max_len}")
            h = h + take(p["pos"], np.arange(t), axis=0)
            for i in range(cfg.layers):
                h = transformer_block(h, p, i, mask, cfg.heads)
            h = _norm(h, p, "ln_final")
        else:
            for i in range(cfg.layers):
                h = conformer_block(h, p, i, mask, cfg.heads)
        return mul(h, mask[:, :, None].astype(h.dtype))


def params_hash(params: Params) -> str:
    """SHA-256 over names, shapes and raw bytes of every parameter."""
    m = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        m.update(name.encode())
        m.update(str(arr.shape).encode())
        m.update(str(arr.dtype).encode())
        m.update(arr.tobytes())
    return m.hexdigest()


# -- teacher pretraining surrogate -----------------------------------------------


def context_tags(tags: np.ndarray, num_tags: int) -> np.ndarray:
    """(T, 3) targets per frame: previous, current and next phone segment.

    Segments are runs of equal tags.  ``num_tags`` marks "no neighbour" at
    the utterance edges.
    """
    tags = np.asarray(tags, dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, tags[1:] != tags[:-1]])
    seg = np.cumsum(np.r_[True, tags[1:] != tags[:-1]]) - 1
    labels = np.r_[num_tags, tags[starts], num_tags]
    return np.stack([labels[seg], labels[seg + 1], labels[seg + 2]], axis=1)


def _frame_ce(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over unmasked frames; logits (B, T, S, C), targets (B, T, S)."""
    probs = F.softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = sum(mul(probs, onehot), axis=-1)
    nll = -log(clamp_min(picked, 1e-12))
    w = np.broadcast_to(mask[:, :, None], targets.shape).astype(logits.dtype)
    return sum(mul(nll, w / max(int(w.sum()), 1)))


def pretrain_teacher_encoder(config: EncoderConfig, aux_data: Sequence[tuple[FeatureSequence, np.ndarray]],
                             steps: int, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                             num_tags: int | None = None, context: int = 3, recon_weight: float = 1.0,
                             phone_means: np.ndarray | None = None, log=None) -> Encoder:
    """Pretrain an encoder on generic frame-level targets, then freeze it.

    ``aux_data`` pairs each utterance with its (T,) integer phone tags.  Each
    frame is trained to predict the previous, current and next phone segment
    (so the representation carries local order) and to reconstruct its own
    unspliced feature vector (so utterance-level offsets survive).  With
    ``phone_means`` (one row per tag) it also reconstructs the frame minus its
    phone mean, which exposes the non-phonetic part of the signal.  The
    auxiliary heads are discarded afterwards.  ``steps=0`` returns a frozen
    randomly initialised encoder.
    """
    enc = Encoder(config, seed=seed)
    if steps > 0:
        if not aux_data:
            raise ContractError("teacher pretraining needs auxiliary data")
        n_tags = num_tags or int(max(t.max() for _, t in aux_data)) + 1
        dim = aux_data[0][0].frames.shape[1]
        rng = np.random.default_rng([seed, 1])
        head: Params = {}
        init_linear(head, rng, "tag_head", config.hidden, 3 * (n_tags + 1))
        means = None if phone_means is None else np.asarray(phone_means, dtype=np.float32)
        init_linear(head, rng, "recon_head", config.hidden, dim if means is None else 2 * dim)
        params = {**enc.params, **{f"aux.{k}": v for k, v in head.items()}}
        opt = Adam(params, lr=lr)
        tags_by_id = {s.id: context_tags(t, n_tags) for s, t in aux_data}
        seqs = [s for s, _ in aux_data]
        step = 0
        epoch = 0
        while step < steps:
            order = np.random.default_rng([seed, 2, epoch]).permutation(len(seqs))
            for start in range(0, len(seqs), batch_size):
                if step >= steps:
                    break
                chunk = [seqs[i] for i in order[start : start + batch_size]]
                batch = collate(chunk, context)
                b, t = batch.mask.shape
                targets = np.zeros((b, t, 3), dtype=np.int64)
                raw = np.zeros((b, t, dim if means is None else 2 * dim), dtype=np.float32)
                for j, s in enumerate(chunk):
                    targets[j, : s.num_frames] = tags_by_id[s.id]
                    raw[j, : s.num_frames, :dim] = s.frames
                    if means is not None:
                        raw[j, : s.num_frames, dim:] = s.frames - means[tags_by_id[s.id][:, 1]]
                opt.zero_grad()
                emb = enc.encode(batch.frames, batch.mask)
                logits = reshape(_lin(emb, head, "tag_head"), (b, t, 3, n_tags + 1))
                loss = _frame_ce(logits, targets, batch.mask)
                if recon_weight > 0:
                    err = _lin(emb, head, "recon_head") - Tensor._wrap(raw)
                    loss = loss + scale(F.mean_square(err, batch.mask[:, :, None]), recon_weight)
                backward(loss)
                opt.step()
                step += 1
                if log is not None:
                    log(step, loss.item())
            epoch += 1
    return enc.freeze()
