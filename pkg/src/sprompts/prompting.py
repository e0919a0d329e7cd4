"""Independent per-domain prompting: pools, session training, inference modes.

Each session trains only its own image prompt (plus its FC head for the
image-only variant, or its language prompt for the language-image variant)
against a frozen backbone, then summarises the domain's prompt-free features
with K-Means. At test time the router picks a domain and that domain's
parameters classify the input.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .domains import LabeledDataset, augment
from .encoder import FrozenBackbone, encode_image, encode_text, patch_embed
from .router import CentroidStore, identify_domains, kmeans_fit

log = logging.getLogger(__name__)

S_IPROMPTS = "s-iprompts"
S_LIPROMPTS = "s-liprompts"
VARIANTS = (S_IPROMPTS, S_LIPROMPTS)

ABLATIONS = (
    "none",
    "shared_prompts_dependent",
    "frozen_language_prompts",
    "zero_shot_first_domain",
    "shared_classifier",
    "frozen_classifier",
)
_VARIANT_ONLY = {
    "frozen_language_prompts": S_LIPROMPTS,
    "shared_classifier": S_IPROMPTS,
    "frozen_classifier": S_IPROMPTS,
}

MODES = ("dil", "til", "random", "vote", "zero_shot")


class PromptError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MethodConfig:
    variant: str = S_LIPROMPTS
    image_prompt_len: int = 10
    language_prompt_len: int = 16
    kmeans_k: int = 5
    knn_k: int = 1
    tau: float = 1.0
    ablation: str = "none"
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 30
    prompt_init_std: float = 0.02
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PromptError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.ablation not in ABLATIONS:
            raise PromptError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        need = _VARIANT_ONLY.get(self.ablation)
        if need and need != self.variant:
            raise PromptError(f"ablation {self.ablation!r} applies to {need} only")
        if min(self.image_prompt_len, self.language_prompt_len, self.kmeans_k, self.knn_k,
               self.batch_size) < 1 or self.epochs < 0:
            raise PromptError("lengths, K, knn_k and batch size must be positive")
        if self.tau <= 0:
            raise PromptError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ heads


def fc_logits(features: gc.Tensor, weight: gc.Tensor, bias: gc.Tensor) -> gc.Tensor:
    if features.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise gc.ShapeError("fc_logits", features.shape, weight.shape, bias.shape)
    return gc.add(gc.matmul(features, gc.swapaxes(weight, 0, 1)), bias)


def fc_probabilities(features, weight, bias) -> np.ndarray:
    """softmax(W f + b) per row, evaluated in float64 and rounded once to float32.

    The wide accumulator keeps the output shift-invariant in ``b`` to ~1e-12
    even when logits are large; float32 logits drift by ~1e-6 there.
    """
    f = gc.Tensor(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    with gc.no_grad(), gc.precision(np.float64):
        p = gc.softmax(fc_logits(f, gc.Tensor(np.asarray(weight, np.float64)),
                                 gc.Tensor(np.asarray(bias, np.float64)))).data
    return p.astype(np.float32)


def clip_logits(features: gc.Tensor, class_features: gc.Tensor, tau: float = 1.0) -> gc.Tensor:
    """tau * cos(f, g_j) for every (row, class) pair."""
    if tau <= 0:
        raise PromptError("tau must be positive")
    return gc.scale(gc.cosine_matrix(features, class_features), tau)


def clip_probabilities(features, class_features, tau: float = 1.0) -> np.ndarray:
    """softmax(tau * cos) per row, evaluated in float64 and rounded once to float32.

    Rescaling ``f`` or any ``g_j`` by a positive factor moves the cosines by
    ~1e-16, far below the final float32 rounding, so the output does not move.
    """
    f = gc.Tensor(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    g = gc.Tensor(np.asarray(class_features, dtype=np.float64))
    with gc.no_grad(), gc.precision(np.float64):
        p = gc.softmax(clip_logits(f, g, tau)).data
    return p.astype(np.float32)


# ------------------------------------------------------------------ pools


def array_hash(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f4").tobytes()).hexdigest()


@dataclass
class SessionParams:
    image_prompt: gc.Tensor
    language_prompt: gc.Tensor | None = None
    weight: gc.Tensor | None = None
    bias: gc.Tensor | None = None
    train: bool = True

    def trainables(self) -> list[gc.Tensor]:
        if not self.train:
            return []
        ts = [self.image_prompt, self.language_prompt, self.weight, self.bias]
        return [t for t in ts if t is not None and t.requires_grad]


@dataclass
class SessionResult:
    session: int
    steps: int
    losses: list[float]
    train_accuracy: float | None
    trained: bool


@dataclass
class PromptPools:
    image: list[np.ndarray] = field(default_factory=list)
    language: list[np.ndarray] = field(default_factory=list)
    classifier: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def copy(self) -> "PromptPools":
        return PromptPools(
            [p.copy() for p in self.image],
            [p.copy() for p in self.language],
            [(w.copy(), b.copy()) for w, b in self.classifier],
        )

    def hashes(self) -> dict[str, list[str]]:
        return {
            "image": [array_hash(p) for p in self.image],
            "language": [array_hash(p) for p in self.language],
            "classifier": [array_hash(np.concatenate([w.ravel(), b])) for w, b in self.classifier],
        }


def _entry(pool: list, s: int):
    """Pool entry serving domain ``s``; shorter pools (shared/frozen modes) fall back to the last entry."""
    if not pool:
        return None
    return pool[min(s, len(pool)) - 1]


class SPrompts:
    """Trained state for one DIL stream: pools, centroid store, frozen backbone."""

    def __init__(self, backbone: FrozenBackbone, config: MethodConfig):
        if not backbone.frozen:
            raise PromptError("backbone must be frozen before prompt learning")
        self.backbone = backbone
        self.config = config
        self.pools = PromptPools()
        self.store = CentroidStore(backbone.config.feature_dim)
        self.sessions = 0

    @property
    def num_classes(self) -> int:
        return self.backbone.config.num_classes

    def snapshot(self) -> "SPrompts":
        snap = SPrompts(self.backbone, self.config)
        snap.pools = self.pools.copy()
        snap.store = self.store.copy()
        snap.sessions = self.sessions
        return snap

    # ------------------------------------------------------------ training

    def init_session_prompts(self, s: int) -> SessionParams:
        cfg, bbc = self.config, self.backbone.config
        if s != self.sessions + 1:
            raise PromptError(f"session {s} requested after {self.sessions} completed sessions")
        rng = np.random.default_rng([cfg.seed, s, 17])

        def fresh(shape, name):
            return gc.parameter(rng.standard_normal(shape) * cfg.prompt_init_std, name=name)

        def reuse(arr, name, trainable):
            return gc.Tensor(arr.copy(), requires_grad=trainable, name=name)

        ab = cfg.ablation
        first = s == 1
        if ab == "zero_shot_first_domain" and not first:
            return SessionParams(gc.Tensor(self.pools.image[0]), train=False)

        if ab == "shared_prompts_dependent" and not first:
            img = reuse(self.pools.image[0], "image_prompt", True)
        else:
            img = fresh((cfg.image_prompt_len, bbc.embed_dim), f"image_prompt_{s}")
        params = SessionParams(img)

        if cfg.variant == S_LIPROMPTS:
            if not first and ab in ("shared_prompts_dependent", "frozen_language_prompts"):
                params.language_prompt = reuse(self.pools.language[0], "language_prompt",
                                               ab == "shared_prompts_dependent")
            else:
                params.language_prompt = fresh((cfg.language_prompt_len, bbc.text_embed_dim),
                                               f"language_prompt_{s}")
        else:
            if not first and ab in ("shared_prompts_dependent", "shared_classifier", "frozen_classifier"):
                w, b = self.pools.classifier[0]
                trainable = ab != "frozen_classifier"
                params.weight = reuse(w, "fc_weight", trainable)
                params.bias = reuse(b, "fc_bias", trainable)
            else:
                params.weight = fresh((self.num_classes, bbc.embed_dim), f"fc_weight_{s}")
                params.bias = gc.parameter(np.zeros(self.num_classes), name=f"fc_bias_{s}")
        return params

    def _logits(self, images: np.ndarray, params: SessionParams) -> gc.Tensor:
        bb = self.backbone
        f = encode_image(bb, patch_embed(bb, images), params.image_prompt)
        if self.config.variant == S_LIPROMPTS:
            g = encode_text(bb, params.language_prompt, range(self.num_classes))
            return clip_logits(f, g, self.config.tau)
        return fc_logits(f, params.weight, params.bias)

    def _commit(self, s: int, params: SessionParams) -> None:
        ab = self.config.ablation
        first = s == 1

        def put(pool, value, shared):
            if first or not shared:
                pool.append(value)
            else:
                pool[0] = value

        if ab == "zero_shot_first_domain" and not first:
            return
        put(self.pools.image, params.image_prompt.data.copy(), ab == "shared_prompts_dependent")
        if params.language_prompt is not None:
            shared = ab in ("shared_prompts_dependent", "frozen_language_prompts")
            put(self.pools.language, params.language_prompt.data.copy(), shared)
        if params.weight is not None:
            shared = ab in ("shared_prompts_dependent", "shared_classifier", "frozen_classifier")
            put(self.pools.classifier, (params.weight.data.copy(), params.bias.data.copy()), shared)

    def prompt_free_features(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        out = []
        with gc.no_grad():
            for i in range(0, len(images), chunk):
                out.append(self.backbone.image_features(images[i:i + chunk]).data)
        if not out:
            return np.zeros((0, self.backbone.config.feature_dim), np.float32)
        return np.concatenate(out)

    def train_session(self, data: LabeledDataset, s: int | None = None) -> SessionResult:
        """Train the session-``s`` parameters on ``data`` then add its K centroids."""
        cfg = self.config
        s = self.sessions + 1 if s is None else s
        if len(data) == 0:
            raise TrainingError(f"session {s}: empty training set")
        if data.labels.min() < 0 or data.labels.max() >= self.num_classes:
            raise TrainingError(f"session {s}: labels outside [0, {self.num_classes})")
        params = self.init_session_prompts(s)
        trainables = params.trainables()
        losses: list[float] = []
        n = len(data)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        total = cfg.epochs * steps_per_epoch if trainables else 0
        rng = np.random.default_rng([cfg.seed, s, 29])
        if total:
            opt = gc.SGD(trainables, lr=cfg.lr, momentum=cfg.momentum)
            schedule = gc.LrSchedule(cfg.lr, total)
            step = 0
            for _ in range(cfg.epochs):
                perm = rng.permutation(n)
                for i in range(0, n, cfg.batch_size):
                    idx = perm[i:i + cfg.batch_size]
                    x = data.images[idx]
                    if cfg.augment:
                        x = augment(x, rng)
                    opt.zero_grad()
                    loss = gc.cross_entropy(self._logits(x, params), data.labels[idx])
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingError(f"session {s}: non-finite loss at step {step}")
                    gc.backward(loss)
                    opt.step(gc.cosine_anneal_lr(step, schedule))
                    losses.append(value)
                    step += 1
        self._commit(s, params)

        feats = self.prompt_free_features(data.images)
        km = kmeans_fit(feats, cfg.kmeans_k, seed=cfg.seed + s)
        self.store.add_domain(s, km.centers)
        self.sessions = s

        acc = None
        if params.train:
            probs = self.domain_probabilities(data.images, s)
            acc = float((probs.argmax(axis=1) == data.labels).mean())
        log.info("session %d: %d steps, train accuracy %s", s, total, acc)
        return SessionResult(s, total, losses, acc, bool(total))

    # ----------------------------------------------------------- inference

    def domain_parameters(self, s: int) -> SessionParams:
        if not 1 <= s <= self.sessions:
            raise PromptError(f"unknown domain {s}; {self.sessions} learned")
        p = SessionParams(gc.Tensor(_entry(self.pools.image, s)), train=False)
        lang = _entry(self.pools.language, s)
        if lang is not None:
            p.language_prompt = gc.Tensor(lang)
        clf = _entry(self.pools.classifier, s)
        if clf is not None:
            p.weight, p.bias = gc.Tensor(clf[0]), gc.Tensor(clf[1])
        return p

    def domain_probabilities(self, images: np.ndarray, s: int, chunk: int = 256) -> np.ndarray:
        """Class probabilities for every image under domain ``s``'s parameters.

        Always evaluated over fixed chunks of the full array so that every mode
        that ends up using domain ``s`` sees bitwise-identical numbers.
        """
        params = self.domain_parameters(s)
        out = []
        with gc.no_grad():
            for i in range(0, len(images), chunk):
                out.append(gc.softmax(self._logits(images[i:i + chunk], params)).data)
        return np.concatenate(out)

    def route(self, images: np.ndarray, knn_k: int | None = None) -> np.ndarray:
        feats = self.prompt_free_features(images)
        return identify_domains(feats, self.store, knn_k or self.config.knn_k)

    def predict(self, images: np.ndarray, mode: str = "dil", domain: int | None = None,
                seed: int = 0, cache: "EvalCache | None" = None) -> "Prediction":
        if self.sessions == 0:
            raise PromptError("no completed session to predict with")
        cache = cache or EvalCache(self, images)
        n = len(images)
        if mode == "dil":
            sel = cache.routes()
        elif mode == "til":
            if domain is None or not 1 <= domain <= self.sessions:
                raise PromptError(f"TIL needs a learned domain index, got {domain}")
            sel = np.full(n, domain, np.int64)
        elif mode == "random":
            rng = np.random.default_rng(seed)
            sel = rng.integers(1, self.sessions + 1, size=n)
        elif mode == "zero_shot":
            sel = np.ones(n, np.int64)
        elif mode == "vote":
            stack = np.stack([cache.probs(s) for s in range(1, self.sessions + 1)])
            classes, sel = vote(stack)
            probs = stack[sel - 1, np.arange(n)]
            return Prediction(probs, sel, classes)
        else:
            raise PromptError(f"unknown mode {mode!r}; expected one of {MODES}")
        probs = np.empty((n, self.num_classes), np.float32)
        for s in np.unique(sel):
            rows = sel == s
            probs[rows] = cache.probs(int(s))[rows]
        return Prediction(probs, sel, probs.argmax(axis=1))


@dataclass
class Prediction:
    probs: np.ndarray
    domains: np.ndarray
    classes: np.ndarray


class EvalCache:
    """Per-(model snapshot, image array) memo of routes and per-domain probabilities."""

    def __init__(self, model: SPrompts, images: np.ndarray, knn_k: int | None = None):
        self.model = model
        self.images = images
        self.knn_k = knn_k
        self._probs: dict[int, np.ndarray] = {}
        self._routes: np.ndarray | None = None

    def probs(self, s: int) -> np.ndarray:
        if s not in self._probs:
            self._probs[s] = self.model.domain_probabilities(self.images, s)
        return self._probs[s]

    def routes(self) -> np.ndarray:
        if self._routes is None:
            self._routes = self.model.route(self.images, self.knn_k)
        return self._routes


def vote(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote over per-domain predictions.

    ``stack`` is (S, N, C). Returns the winning class and the 1-based domain
    whose probabilities are reported. Class ties go to the class whose voters
    have the highest mean probability for it, then to the class backed by the
    lowest domain index.
    """
    S, N, C = stack.shape
    preds = stack.argmax(axis=2)
    classes = np.empty(N, np.int64)
    domains = np.empty(N, np.int64)
    for i in range(N):
        votes = np.bincount(preds[:, i], minlength=C)
        tied = np.flatnonzero(votes == votes.max())
        best = None
        for c in tied:
            voters = np.flatnonzero(preds[:, i] == c)
            key = (-float(stack[voters, i, c].mean()), int(voters.min()))
            if best is None or key < best[0]:
                best = (key, int(c), voters)
        _, c, voters = best
        chosen = voters[np.argmax(stack[voters, i, c])]  # first max = lowest index
        classes[i], domains[i] = c, chosen + 1
    return classes, domains


def parameter_growth(config: MethodConfig, num_classes: int, embed_dim: int, text_dim: int,
                     feature_dim: int, session: int) -> dict[str, int]:
    """Floats a session adds on disk under ``config`` (prompts, head, centroids)."""
    first = session == 1
    ab = config.ablation
    grow = {"image_prompt": 0, "language_prompt": 0, "classifier": 0,
            "centroids": config.kmeans_k * feature_dim}
    if first or ab not in ("shared_prompts_dependent", "zero_shot_first_domain"):
        grow["image_prompt"] = config.image_prompt_len * embed_dim
    if config.variant == S_LIPROMPTS:
        if first or ab == "none":
            grow["language_prompt"] = config.language_prompt_len * text_dim
    else:
        if first or ab == "none":
            grow["classifier"] = num_classes * (embed_dim + 1)
    grow["total"] = sum(grow.values())
    return grow
