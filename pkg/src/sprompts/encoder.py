"""Small ViT image tower and class-name text tower, pretrained here then frozen.

Image sequences are laid out as ``[image tokens, prompt, cls]``; the feature is
the final-layer representation at the cls slot. Text sequences are
``[context prompt, class embedding]`` and the text feature is read at the
class-embedding slot, then projected into the image feature space so the two
towers can be compared by cosine.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

log = logging.getLogger(__name__)


class EncoderError(ValueError):
    pass


class PretrainGateError(RuntimeError):
    def __init__(self, accuracy: float, threshold: float):
        self.accuracy = accuracy
        self.threshold = threshold
        super().__init__(
            f"pretraining stopped at held-out accuracy {accuracy:.4f} < gate {threshold:.2f}"
        )


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    text_embed_dim: int = 48
    text_layers: int = 2
    text_heads: int = 4
    vocab: tuple[str, ...] = ("hbar", "vbar", "disk", "triangle")

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise EncoderError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise EncoderError("embed_dim must be divisible by num_heads")
        if self.text_layers and self.text_embed_dim % self.text_heads:
            raise EncoderError("text_embed_dim must be divisible by text_heads")
        if not self.vocab:
            raise EncoderError("vocab must name at least one class")
        object.__setattr__(self, "vocab", tuple(self.vocab))

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_classes(self) -> int:
        return len(self.vocab)

    @property
    def feature_dim(self) -> int:
        return self.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d


def _block_names(prefix: str, n_layers: int) -> list[str]:
    parts = ["ln1.g", "ln1.b", "q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b",
             "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"]
    return [f"{prefix}{i}.{p}" for i in range(n_layers) for p in parts]


def init_weights(config: EncoderConfig, seed: int) -> "OrderedDict[str, np.ndarray]":
    rng = np.random.default_rng(seed)
    w: OrderedDict[str, np.ndarray] = OrderedDict()

    def normal(shape, std=0.02):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    def block(prefix, i, d, ratio):
        hidden = d * ratio
        p = f"{prefix}{i}."
        w[p + "ln1.g"] = np.ones(d, np.float32)
        w[p + "ln1.b"] = np.zeros(d, np.float32)
        for name in ("q", "k", "v", "o"):
            w[p + name + ".w"] = normal((d, d), 1 / math.sqrt(d))
            w[p + name + ".b"] = np.zeros(d, np.float32)
        w[p + "ln2.g"] = np.ones(d, np.float32)
        w[p + "ln2.b"] = np.zeros(d, np.float32)
        w[p + "fc1.w"] = normal((d, hidden), 1 / math.sqrt(d))
        w[p + "fc1.b"] = np.zeros(hidden, np.float32)
        w[p + "fc2.w"] = normal((hidden, d), 1 / math.sqrt(hidden))
        w[p + "fc2.b"] = np.zeros(d, np.float32)

    d = config.embed_dim
    patch_in = config.patch_size**2 * config.channels
    w["patch.w"] = normal((patch_in, d), 1 / math.sqrt(patch_in))
    w["patch.b"] = np.zeros(d, np.float32)
    w["pos"] = normal((config.n_patches, d))
    w["cls"] = normal((d,))
    for i in range(config.num_layers):
        block("img", i, d, config.mlp_ratio)
    w["img_ln.g"] = np.ones(d, np.float32)
    w["img_ln.b"] = np.zeros(d, np.float32)

    dl = config.text_embed_dim
    w["class_emb"] = normal((config.num_classes, dl), 1.0)
    for i in range(config.text_layers):
        block("txt", i, dl, config.mlp_ratio)
    w["txt_proj"] = normal((dl, d), 1 / math.sqrt(dl))
    return w


class FrozenBackbone:
    """Image + text encoders. Weights are tensors; ``freeze`` makes them constant."""

    def __init__(self, config: EncoderConfig, weights: "OrderedDict[str, np.ndarray]",
                 frozen: bool = False):
        self.config = config
        self.weights: OrderedDict[str, Tensor] = OrderedDict(
            (k, Tensor(np.asarray(v, dtype=np.float32), requires_grad=not frozen, name=k))
            for k, v in weights.items()
        )
        self.frozen = frozen
        self.pretrain_accuracy: float | None = None

    @classmethod
    def initialise(cls, config: EncoderConfig, seed: int = 0) -> "FrozenBackbone":
        return cls(config, init_weights(config, seed))

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def parameters(self) -> list[Tensor]:
        return list(self.weights.values())

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.weights.values()))

    def freeze(self) -> "FrozenBackbone":
        for t in self.weights.values():
            t.requires_grad = False
            t.grad = None
            t.data.setflags(write=False)
        self.frozen = True
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.weights.items():
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.weights.items())

    # convenience wrappers -------------------------------------------------

    def image_features(self, images: np.ndarray, prompt: Tensor | None = None) -> Tensor:
        return encode_image(self, patch_embed(self, images), prompt)

    def text_features(self, context: Tensor | None, classes: Sequence[int] | None = None) -> Tensor:
        if classes is None:
            classes = range(self.config.num_classes)
        return encode_text(self, context, classes)


# ------------------------------------------------------------------ forward


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return gc.add(gc.matmul(x, w), b)


def _attention(x: Tensor, bb: FrozenBackbone, p: str, heads: int) -> Tensor:
    B, N, D = x.shape
    dh = D // heads

    def split(t):
        return gc.swapaxes(gc.reshape(t, (B, N, heads, dh)), 1, 2)

    q = split(_linear(x, bb[p + "q.w"], bb[p + "q.b"]))
    k = split(_linear(x, bb[p + "k.w"], bb[p + "k.b"]))
    v = split(_linear(x, bb[p + "v.w"], bb[p + "v.b"]))
    scores = gc.scale(gc.matmul(q, gc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    ctx = gc.matmul(gc.softmax(scores), v)
    ctx = gc.reshape(gc.swapaxes(ctx, 1, 2), (B, N, D))
    return _linear(ctx, bb[p + "o.w"], bb[p + "o.b"])


def _block(x: Tensor, bb: FrozenBackbone, p: str, heads: int) -> Tensor:
    h = gc.layer_norm(x, bb[p + "ln1.g"], bb[p + "ln1.b"])
    x = gc.add(x, _attention(h, bb, p, heads))
    h = gc.layer_norm(x, bb[p + "ln2.g"], bb[p + "ln2.b"])
    h = _linear(gc.gelu(_linear(h, bb[p + "fc1.w"], bb[p + "fc1.b"])), bb[p + "fc2.w"], bb[p + "fc2.b"])
    return gc.add(x, h)


def patchify(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    images = np.asarray(images)
    expected = (config.image_size, config.image_size, config.channels)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != expected:
        raise EncoderError(f"patch_embed: expected images of shape (B, {expected}), got {images.shape}")
    B = images.shape[0]
    g, p, c = config.image_size // config.patch_size, config.patch_size, config.channels
    x = images.reshape(B, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, p * p * c)


def patch_embed(bb: FrozenBackbone, images: np.ndarray) -> Tensor:
    """(B, H, W, C) images -> (B, n_patches, D) tokens with positions added."""
    patches = gc.Tensor(patchify(images, bb.config).astype(bb["patch.w"].data.dtype, copy=False))
    tokens = _linear(patches, bb["patch.w"], bb["patch.b"])
    return gc.add(tokens, bb["pos"])


def encode_image(bb: FrozenBackbone, x_img: Tensor, prompt: Tensor | None = None) -> Tensor:
    """Run ``[x_img, prompt, cls]`` through the image tower; return (B, D) cls features.

    A missing or zero-length prompt gives the prompt-free sequence ``[x_img, cls]``.
    Prompt tokens carry no positional embedding.
    """
    cfg = bb.config
    B, _, D = x_img.shape
    parts = [x_img]
    if prompt is not None:
        if prompt.ndim != 2 or prompt.shape[1] != D:
            raise EncoderError(f"image prompt must be (L, {D}), got {prompt.shape}")
        if prompt.shape[0] > 0:
            parts.append(gc.broadcast_to(gc.reshape(prompt, (1,) + prompt.shape), (B,) + prompt.shape))
    parts.append(gc.broadcast_to(gc.reshape(bb["cls"], (1, 1, D)), (B, 1, D)))
    x = gc.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    for i in range(cfg.num_layers):
        x = _block(x, bb, f"img{i}.", cfg.num_heads)
    x = gc.layer_norm(x, bb["img_ln.g"], bb["img_ln.b"])
    return gc.select(x, 1, -1)


def image_sequence_length(config: EncoderConfig, prompt_len: int) -> int:
    return config.n_patches + prompt_len + 1


def encode_text(bb: FrozenBackbone, context: Tensor | None, classes: Sequence[int]) -> Tensor:
    """Class features g(t_j) for ``t_j = [context, c_j]``; returns (len(classes), D)."""
    cfg = bb.config
    classes = list(classes)
    for j in classes:
        if not 0 <= j < cfg.num_classes:
            raise EncoderError(f"unknown class index {j}")
    C, Dl = len(classes), cfg.text_embed_dim
    c = gc.reshape(gc.take_rows(bb["class_emb"], classes), (C, 1, Dl))
    if context is not None and context.shape[0] > 0:
        if context.ndim != 2 or context.shape[1] != Dl:
            raise EncoderError(f"language prompt must be (L, {Dl}), got {context.shape}")
        ctx = gc.broadcast_to(gc.reshape(context, (1,) + context.shape), (C,) + context.shape)
        x = gc.concat([ctx, c], axis=1)
    else:
        x = c
    for i in range(cfg.text_layers):
        x = _block(x, bb, f"txt{i}.", cfg.text_heads)
    return gc.matmul(gc.select(x, 1, -1), bb["txt_proj"])


def text_sequence_length(context_len: int) -> int:
    return context_len + 1


# --------------------------------------------------------------- pretraining


@dataclass(frozen=True)
class PretrainBudget:
    epochs: int = 4
    batch_size: int = 128
    lr: float = 0.005
    momentum: float = 0.9
    logit_scale: float = 10.0
    context_len: int = 16
    context_std: float = 0.02
    threshold: float = 0.90
    holdout_fraction: float = 0.1
    seed: int = 0


@dataclass
class PretrainResult:
    backbone: FrozenBackbone
    heldout_accuracy: float
    history: list[float] = field(default_factory=list)


def _clip_logits(bb: FrozenBackbone, images: np.ndarray, context: Tensor | None, scale: float) -> Tensor:
    f = bb.image_features(images)
    g = bb.text_features(context)
    return gc.scale(gc.cosine_matrix(f, g), scale)


def heldout_accuracy(bb: FrozenBackbone, images: np.ndarray, labels: np.ndarray,
                     context: Tensor | None, batch: int = 256) -> float:
    correct = 0
    with gc.no_grad():
        g = bb.text_features(context)
        for i in range(0, len(images), batch):
            f = bb.image_features(images[i:i + batch])
            pred = gc.cosine_matrix(f, g).data.argmax(axis=1)
            correct += int((pred == labels[i:i + batch]).sum())
    return correct / max(len(images), 1)


def pretrain_backbone(corpus, config: EncoderConfig, budget: PretrainBudget) -> FrozenBackbone:
    """Train both towers with a contrastive image/class-name objective, then freeze.

    The text tower sees a fresh random context of prompt-init scale every step so
    that later prompt tuning starts from a familiar input distribution.
    Raises :class:`PretrainGateError` if the held-out split stays under the gate.
    """
    images, labels = np.asarray(corpus.images), np.asarray(corpus.labels)
    if images.shape[0] == 0:
        raise EncoderError("empty pretraining corpus")
    rng = np.random.default_rng(budget.seed)
    order = rng.permutation(len(images))
    n_hold = max(1, int(round(len(images) * budget.holdout_fraction)))
    hold, train = order[:n_hold], order[n_hold:]
    bb = FrozenBackbone.initialise(config, seed=budget.seed)
    eval_ctx = gc.tensor(
        np.random.default_rng(budget.seed + 1).standard_normal((budget.context_len, config.text_embed_dim))
        * budget.context_std
    )

    steps_per_epoch = math.ceil(len(train) / budget.batch_size)
    total = budget.epochs * steps_per_epoch
    history: list[float] = []
    if total > 0:
        opt = gc.SGD(bb.parameters(), lr=budget.lr, momentum=budget.momentum)
        schedule = gc.LrSchedule(budget.lr, total)
        step = 0
        for epoch in range(budget.epochs):
            perm = train[rng.permutation(len(train))]
            for i in range(0, len(perm), budget.batch_size):
                idx = perm[i:i + budget.batch_size]
                ctx = gc.tensor(
                    rng.standard_normal((budget.context_len, config.text_embed_dim)) * budget.context_std
                )
                opt.zero_grad()
                loss = gc.cross_entropy(_clip_logits(bb, images[idx], ctx, budget.logit_scale), labels[idx])
                if not np.isfinite(loss.data):
                    raise RuntimeError(f"non-finite pretraining loss at step {step}")
                gc.backward(loss)
                opt.step(gc.cosine_anneal_lr(step, schedule))
                step += 1
            acc = heldout_accuracy(bb, images[hold], labels[hold], eval_ctx)
            history.append(acc)
            log.info("pretrain epoch %d: held-out accuracy %.4f", epoch + 1, acc)

    acc = heldout_accuracy(bb, images[hold], labels[hold], eval_ctx)
    if acc < budget.threshold:
        raise PretrainGateError(acc, budget.threshold)
    bb.freeze()
    bb.pretrain_accuracy = acc
    return bb
