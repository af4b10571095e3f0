"""Encoder + adapters (+ alignment) bundles for teacher and student."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from akd.data import Batch, FeatureSequence, collate
from akd.distill import AlignProjection
from akd.encoders import Encoder, EncoderConfig, Params, params_hash
from akd.heads import HeadOutput, init_adapters, route
from akd.tensor import Tensor, no_grad


@dataclass
class ModelBundle:
    encoder: Encoder
    adapters: Params
    align: AlignProjection | None = None

    def params(self) -> Params:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"adapters.{k}": v for k, v in self.adapters.items()})
        if self.align is not None:
            out.update({f"align.{k}": v for k, v in self.align.params.items()})
        return out

    def trainable(self) -> Params:
        return {k: v for k, v in self.params().items() if not v.frozen}

    def adapter_params(self) -> Params:
        return {f"adapters.{k}": v for k, v in self.adapters.items()}

    @property
    def hidden(self) -> int:
        return self.encoder.config.hidden

    def fingerprint(self) -> str:
        return params_hash(self.params())

    def freeze(self) -> "ModelBundle":
        for t in self.params().values():
            t.freeze()
        return self

    def heads(self, e: Tensor, batch: Batch) -> HeadOutput:
        return route(e, batch.mask, batch.invocations, self.adapters)

    def forward(self, batch: Batch) -> tuple[Tensor, HeadOutput]:
        e = self.encoder.encode(batch.frames, batch.mask)
        return e, self.heads(e, batch)


def build_student(config: EncoderConfig, seed: int, adapter_depth: int = 1,
                  teacher_hidden: int | None = None) -> ModelBundle:
    """Fresh student; encoder, adapters and alignment draw from separate streams."""
    enc = Encoder(config, seed=seed)
    adapters = init_adapters(config.hidden, np.random.default_rng([seed, 1]), adapter_depth)
    align = None
    if teacher_hidden is not None:
        align = AlignProjection(config.hidden, teacher_hidden, np.random.default_rng([seed, 2]))
    return ModelBundle(enc, adapters, align)


def build_teacher(encoder: Encoder, seed: int, adapter_depth: int = 1) -> ModelBundle:
    """Frozen encoder with freshly initialised, trainable adapters."""
    if not encoder.frozen:
        encoder.freeze()
    adapters = init_adapters(encoder.config.hidden, np.random.default_rng([seed, 3]), adapter_depth)
    return ModelBundle(encoder, adapters)


def embed_dataset(encoder: Encoder, dataset: list[FeatureSequence], context: int = 3,
                  chunk: int = 64) -> dict[str, np.ndarray]:
    """Per-example (T, hidden) embeddings, computed without recording gradients.

    Examples are processed in chunks of similar length to limit padding.
    """
    order = sorted(range(len(dataset)), key=lambda i: (dataset[i].num_frames, dataset[i].id))
    out: dict[str, np.ndarray] = {}
    with no_grad():
        for s in range(0, len(order), chunk):
            seqs = [dataset[i] for i in order[s : s + chunk]]
            batch = collate(seqs, context)
            e = encoder.encode(batch.frames, batch.mask).data
            for b, seq in enumerate(seqs):
                out[seq.id] = e[b, : seq.num_frames].copy()
    return out


def score_dataset(bundle: ModelBundle, dataset: list[FeatureSequence], context: int = 3,
                  batch_size: int = 64, cache: dict[str, np.ndarray] | None = None):
    """Detection scores p[1] with labels and invocation codes, in dataset order."""
    scores = np.empty(len(dataset))
    with no_grad():
        for s in range(0, len(dataset), batch_size):
            seqs = dataset[s : s + batch_size]
            batch = collate(seqs, context)
            if cache is not None:
                e = Tensor._wrap(pad_embeddings(cache, batch, bundle.encoder.params["input.w"].dtype))
            else:
                e = bundle.encoder.encode(batch.frames, batch.mask)
            scores[s : s + len(seqs)] = bundle.heads(e, batch).scores
    labels = np.array([q.label for q in dataset])
    invs = np.array([int(q.invocation) for q in dataset])
    return scores, labels, invs


def pad_embeddings(cache: dict[str, np.ndarray], batch: Batch, dtype) -> np.ndarray:
    first = cache[batch.ids[0]]
    out = np.zeros(batch.mask.shape + (first.shape[1],), dtype=dtype)
    for b, sid in enumerate(batch.ids):
        e = cache[sid]
        out[b, : e.shape[0]] = e
    return out
