"""DIL protocol runner and the metrics built on the accuracy matrix.

``A[l][t]`` is the accuracy on domain ``t``'s test set after training session
``l`` (both 1-based, defined for ``t <= l``). Every reported number derives
from these matrices, the router, or the per-session snapshots.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .domains import LabeledDataset, Stream
from .encoder import FrozenBackbone
from .prompting import MODES, EvalCache, MethodConfig, SPrompts, TrainingError, parameter_growth
from .router import CentroidStore, kmeans_fit

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


class AccuracyMatrix:
    """Lower-triangular S x S accuracies; cells with t > l are absent, not zero."""

    def __init__(self, size: int):
        self.size = size
        self._rows: list[list[float]] = [[] for _ in range(size)]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        m = cls(len(rows))
        for l, row in enumerate(rows, 1):
            if len(row) != l:
                raise MetricError(f"row {l} must have {l} entries, got {len(row)}")
            for t, v in enumerate(row, 1):
                m.set(l, t, v)
        return m

    def set(self, l: int, t: int, value: float) -> None:
        if not 1 <= t <= l <= self.size:
            raise MetricError(f"cell ({l}, {t}) outside the lower triangle of size {self.size}")
        if not 0.0 <= value <= 1.0:
            raise MetricError(f"accuracy {value} outside [0, 1]")
        row = self._rows[l - 1]
        if len(row) != t - 1:
            raise MetricError(f"cells of row {l} must be filled in order")
        row.append(float(value))

    def get(self, l: int, t: int) -> float:
        return self._rows[l - 1][t - 1]

    def row(self, l: int) -> list[float]:
        return list(self._rows[l - 1])

    @property
    def complete(self) -> bool:
        return all(len(r) == i + 1 for i, r in enumerate(self._rows))

    @property
    def filled_rows(self) -> int:
        return sum(1 for i, r in enumerate(self._rows) if len(r) == i + 1)

    def defined_cells(self) -> int:
        return sum(len(r) for r in self._rows)

    def to_list(self) -> list[list[float]]:
        return [list(r) for r in self._rows]


def average_accuracy(A: AccuracyMatrix) -> tuple[float, list[float]]:
    """Final task-wise mean and the running mean after each session."""
    if not A.complete:
        raise MetricError("accuracy matrix is incomplete")
    S = A.size
    curve = [float(np.mean(A.row(l))) for l in range(1, S + 1)]
    return curve[-1], curve


def forgetting(A: AccuracyMatrix) -> tuple[float, bool]:
    """Mean over t < S of ``A[S][t] - max_{t <= l <= S} A[l][t]``.

    The history includes the final row, so each term is <= 0 and a domain
    whose accuracy never drops contributes exactly 0. Returns
    ``(value, defined)``; a single session gives ``(0.0, False)``.
    """
    if not A.complete:
        raise MetricError("accuracy matrix is incomplete")
    S = A.size
    if S < 2:
        return 0.0, False
    drops = [A.get(S, t) - max(A.get(l, t) for l in range(t, S + 1)) for t in range(1, S)]
    return float(sum(drops) / (S - 1)), True


def task_agnostic_accuracy(correct: Sequence[int], sizes: Sequence[int]) -> float:
    """Sample-weighted accuracy over the pooled test sets."""
    total = int(sum(sizes))
    if total == 0:
        raise MetricError("empty pooled test set")
    return float(sum(correct)) / total


def domain_id_accuracy(model: SPrompts, tests: Sequence[LabeledDataset],
                       knn_k: int | None = None) -> tuple[list[float], float]:
    """Fraction of each domain's test images routed to that domain."""
    per = []
    for t, ds in enumerate(tests, 1):
        routes = model.route(ds.images, knn_k)
        per.append(float((routes == t).mean()))
    return per, float(np.mean(per))


def refit_centroids(model: SPrompts, trains: Sequence[LabeledDataset], k: int) -> SPrompts:
    """Copy of ``model`` whose store is rebuilt with ``k`` centroids per domain.

    Prompt training never reads K, so this equals retraining with that K.
    """
    snap = model.snapshot()
    snap.config = replace(model.config, kmeans_k=k)
    store = CentroidStore(model.store.dim)
    for s in range(1, model.sessions + 1):
        feats = model.prompt_free_features(trains[s - 1].images)
        store.add_domain(s, kmeans_fit(feats, k, seed=model.config.seed + s).centers)
    snap.store = store
    return snap


def _mode_seed(seed: int, l: int, t: int) -> list[int]:
    return [seed, 101, l, t]


def evaluate_snapshot(model: SPrompts, tests: Sequence[LabeledDataset], modes: Sequence[str],
                      seed: int = 0, knn_k: int | None = None) -> dict:
    """Per-mode accuracies and TIL predictions of one snapshot on ``tests``."""
    l = model.sessions
    out = {m: [] for m in modes}
    preds = {}
    for t, ds in enumerate(tests, 1):
        cache = EvalCache(model, ds.images, knn_k)
        for m in modes:
            p = model.predict(ds.images, m, domain=t, seed=_mode_seed(seed, l, t), cache=cache)
            out[m].append(float((p.classes == ds.labels).mean()))
            if m == "til":
                preds[t] = p.probs
    return {"accuracy": out, "til_probs": preds}


@dataclass
class RunResult:
    report: dict
    matrices: dict[str, AccuracyMatrix]
    snapshots: list[SPrompts]
    til_probs: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    complete: bool = True

    @property
    def model(self) -> SPrompts:
        return self.snapshots[-1]


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def stream_digest(stream: Stream) -> str:
    h = hashlib.sha256()
    for ds in stream.train + stream.test + stream.ood:
        h.update(ds.digest().encode())
    return h.hexdigest()


def mode_summary(A: AccuracyMatrix, correct: list[int], sizes: list[int]) -> dict:
    aa, curve = average_accuracy(A)
    f, defined = forgetting(A)
    return {
        "accuracy_matrix": A.to_list(),
        "task_wise_aa": aa,
        "running_curve": curve,
        "running_curve_mean": float(np.mean(curve)),
        "forgetting": f,
        "forgetting_defined": defined,
        "task_agnostic_aa": task_agnostic_accuracy(correct, sizes),
    }


def session_record(res) -> dict:
    return {
        "session": res.session,
        "steps": res.steps,
        "first_loss": res.losses[0] if res.losses else None,
        "final_loss": res.losses[-1] if res.losses else None,
        "train_accuracy": res.train_accuracy,
    }


def run_dil(stream: Stream, config: MethodConfig, backbone: FrozenBackbone,
            modes: Sequence[str] = MODES, keep_snapshots: bool = True,
            resume: Sequence[SPrompts] | None = None, resume_records: Sequence[dict] | None = None,
            on_session=None,
            provenance: dict | None = None, ood: bool = True) -> RunResult:
    """Train sessions 1..S in order, filling row ``l`` of every mode's matrix after session ``l``.

    ``resume`` supplies already-trained snapshots for the first sessions; they
    are evaluated, not retrained, and ``resume_records`` carries their training
    logs so a resumed report matches an uninterrupted one. ``on_session(model,
    record)`` is called after each newly trained session (the CLI writes
    checkpoints there).
    """
    modes = list(dict.fromkeys(modes))
    for m in modes:
        if m not in MODES:
            raise MetricError(f"unknown mode {m!r}")
    S = stream.num_domains
    matrices = {m: AccuracyMatrix(S) for m in modes}
    snapshots: list[SPrompts] = []
    sessions: list[dict] = []
    til_probs: dict[tuple[int, int], np.ndarray] = {}
    complete, error = True, None

    model = SPrompts(backbone, config)
    resume = list(resume or [])
    fingerprint_before = backbone.fingerprint()

    for l in range(1, S + 1):
        if l <= len(resume):
            model = resume[l - 1].snapshot()
            if model.sessions != l:
                raise MetricError(f"resume snapshot {l} holds {model.sessions} sessions")
            records = list(resume_records or [])
            sessions.append(records[l - 1] if l <= len(records) else {"session": l})
        else:
            try:
                res = model.train_session(stream.train[l - 1], l)
            except TrainingError as exc:
                complete, error = False, str(exc)
                log.error("aborting run: %s", exc)
                break
            sessions.append(session_record(res))
            if on_session is not None:
                on_session(model, sessions[-1])
        snap = model.snapshot()
        if keep_snapshots or l == S:
            snapshots.append(snap)
        ev = evaluate_snapshot(snap, stream.test[:l], modes, seed=config.seed)
        for m in modes:
            for t, acc in enumerate(ev["accuracy"][m], 1):
                matrices[m].set(l, t, acc)
        for t, p in ev["til_probs"].items():
            til_probs[(l, t)] = p

    report: dict = {
        "complete": complete,
        "error": error,
        "variant": config.variant,
        "num_domains": S,
        "domains": list(stream.spec.domains),
        "classes": list(stream.spec.classes),
        "sessions": sessions,
        "modes": {},
    }
    prov = {
        "package_version": __version__,
        "method": config.to_dict(),
        "stream": stream.spec.to_dict(),
        "seeds": {"method": config.seed, "stream": stream.spec.seed},
        "backbone_fingerprint": fingerprint_before,
        "stream_digest": stream_digest(stream),
    }
    prov.update(provenance or {})
    prov["config_hash"] = _config_hash({k: prov[k] for k in ("method", "stream", "backbone_fingerprint")})
    report["provenance"] = prov
    if backbone.fingerprint() != fingerprint_before:
        raise MetricError("backbone weights changed during the run")

    if not complete:
        report["partial_matrices"] = {m: A.to_list() for m, A in matrices.items()}
        return RunResult(report, matrices, snapshots, til_probs, False)

    final = snapshots[-1]
    sizes = [len(ds) for ds in stream.test]
    for m in modes:
        correct = [int(round(a * n)) for a, n in zip(matrices[m].row(S), sizes)]
        report["modes"][m] = mode_summary(matrices[m], correct, sizes)
    per, avg = domain_id_accuracy(final, stream.test)
    report["domain_id"] = {"per_domain": per, "average": avg}
    if ood and keep_snapshots:
        report["ood"] = ood_eval(snapshots, stream.test, stream.ood)
    enc = backbone.config
    growth = [parameter_growth(config, enc.num_classes, enc.embed_dim, enc.text_embed_dim,
                               enc.feature_dim, s) for s in range(1, S + 1)]
    report["parameter_accounting"] = {
        "per_domain": growth,
        "backbone_parameters": backbone.num_parameters(),
        "relative_increase_per_domain": [g["total"] / backbone.num_parameters() for g in growth],
    }
    return RunResult(report, matrices, snapshots, til_probs, True)


def ood_eval(snapshots: Sequence[SPrompts], tests: Sequence[LabeledDataset],
             ood_sets: Sequence[LabeledDataset]) -> dict:
    """DIL accuracy of every session checkpoint on seen and OOD test sets.

    Row ``l`` has S + #OOD columns; seen domains after ``l`` are ``None``.
    """
    if not snapshots:
        raise MetricError("no checkpoints to evaluate")
    S = len(tests)
    for i, snap in enumerate(snapshots, 1):
        if snap.sessions != i:
            raise MetricError(f"missing checkpoint for session {i}")
    rows, routed = [], []
    for snap in snapshots:
        row, row_routes = [], []
        for t, ds in enumerate(list(tests) + list(ood_sets), 1):
            if t <= S and t > snap.sessions:
                row.append(None)
                continue
            p = snap.predict(ds.images, "dil", cache=EvalCache(snap, ds.images))
            row.append(float((p.classes == ds.labels).mean()))
            if t > S:
                row_routes.append(np.bincount(p.domains, minlength=snap.sessions + 1)[1:].tolist())
        rows.append(row)
        routed.append(row_routes)
    columns = [f"S{t}" for t in range(1, S + 1)] + [f"OOD{j}" for j in range(1, len(ood_sets) + 1)]
    return {
        "columns": columns,
        "column_domains": [ds.domain for ds in list(tests) + list(ood_sets)],
        "rows": rows,
        "ood_routing": routed,
    }


# ------------------------------------------------------------------ ablations


@dataclass(frozen=True)
class AblationPlan:
    kmeans_ks: tuple[int, ...] = (1, 3, 5, 7, 9)
    knn_ks: tuple[int, ...] = (1, 3, 5)
    image_prompt_lens: tuple[int, ...] = (5, 10, 20)
    language_prompt_lens: tuple[int, ...] = (8, 16, 32)
    ablations: tuple[str, ...] | None = None  # None: every ablation valid for the variant

    def __post_init__(self):
        for name in ("kmeans_ks", "knn_ks", "image_prompt_lens", "language_prompt_lens"):
            values = tuple(getattr(self, name))
            if not values:
                raise MetricError(f"sweep {name} is empty")
            object.__setattr__(self, name, values)


def _ablations_for(variant: str) -> tuple[str, ...]:
    if variant == "s-liprompts":
        return ("shared_prompts_dependent", "frozen_language_prompts", "zero_shot_first_domain")
    return ("shared_prompts_dependent", "shared_classifier", "frozen_classifier", "zero_shot_first_domain")


def _dil_matrix(snapshots: Sequence[SPrompts], tests, knn_k=None) -> AccuracyMatrix:
    A = AccuracyMatrix(len(snapshots))
    for l, snap in enumerate(snapshots, 1):
        ev = evaluate_snapshot(snap, tests[:l], ["dil"], knn_k=knn_k)
        for t, acc in enumerate(ev["accuracy"]["dil"], 1):
            A.set(l, t, acc)
    return A


def _cell(group: str, value, A: AccuracyMatrix | None, error: str | None = None) -> dict:
    if A is None:
        return {"group": group, "value": value, "aa": None, "forgetting": None,
                "status": "failed", "error": error}
    aa, _ = average_accuracy(A)
    f, _ = forgetting(A)
    return {"group": group, "value": value, "aa": aa, "forgetting": f, "status": "ok", "error": None}


def ablation_suite(stream: Stream, base: RunResult, config: MethodConfig, backbone: FrozenBackbone,
                   plan: AblationPlan = AblationPlan()) -> dict:
    """Selection modes, dependent/frozen variants and the K, knn_k, L_i, L_l sweeps.

    Failures are recorded per cell and the suite carries on.
    """
    if not base.complete:
        raise MetricError("ablations need a complete base run")
    rows: list[dict] = []
    tests = stream.test
    for m in ("dil", "random", "vote", "zero_shot"):
        if m in base.matrices:
            rows.append(_cell("selection", m, base.matrices[m]))
    names = plan.ablations if plan.ablations is not None else _ablations_for(config.variant)
    for ab in names:
        try:
            res = run_dil(stream, replace(config, ablation=ab), backbone, ["dil"], ood=False)
            rows.append(_cell("ablation", ab, res.matrices["dil"] if res.complete else None, res.report["error"]))
        except Exception as exc:  # a failing cell must not stop the suite
            log.exception("ablation %s failed", ab)
            rows.append(_cell("ablation", ab, None, str(exc)))
    for k in plan.kmeans_ks:
        try:
            snaps = [refit_centroids(s, stream.train, k) for s in base.snapshots]
            rows.append(_cell("kmeans_k", k, _dil_matrix(snaps, tests)))
        except Exception as exc:
            rows.append(_cell("kmeans_k", k, None, str(exc)))
    for k in plan.knn_ks:
        try:
            rows.append(_cell("knn_k", k, _dil_matrix(base.snapshots, tests, knn_k=k)))
        except Exception as exc:
            rows.append(_cell("knn_k", k, None, str(exc)))
    sweeps = [("image_prompt_len", plan.image_prompt_lens)]
    if config.variant == "s-liprompts":
        sweeps.append(("language_prompt_len", plan.language_prompt_lens))
    for attr, values in sweeps:
        for v in values:
            try:
                if getattr(config, attr) == v:
                    A = base.matrices.get("dil") or _dil_matrix(base.snapshots, tests)
                else:
                    res = run_dil(stream, replace(config, **{attr: v}), backbone, ["dil"], ood=False)
                    A = res.matrices["dil"] if res.complete else None
                rows.append(_cell(attr, v, A))
            except Exception as exc:
                rows.append(_cell(attr, v, None, str(exc)))
    return {
        "variant": config.variant,
        "plan": {k: list(v) if v is not None else None for k, v in plan.__dict__.items()},
        "rows": rows,
        "provenance": base.report["provenance"],
    }


# --------------------------------------------------------------- writing


def dump_json(obj, path) -> None:
    """Canonical JSON (sorted keys, fixed indent) so equal reports are equal bytes."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def report_tables(report: dict) -> dict[str, tuple[list[str], list[tuple]]]:
    """Flat tables of an EvalReport, keyed by file stem. Values are the report's own floats."""
    tables: dict[str, tuple[list[str], list[tuple]]] = {}
    modes = report.get("modes", {})
    tables["summary"] = (
        ["mode", "task_wise_aa", "task_agnostic_aa", "forgetting", "forgetting_defined", "running_curve_mean"],
        [(m, r["task_wise_aa"], r["task_agnostic_aa"], r["forgetting"], r["forgetting_defined"],
          r["running_curve_mean"]) for m, r in modes.items()],
    )
    tables["accuracy_matrix"] = (
        ["mode", "after_session", "test_domain", "accuracy"],
        [(m, l, t, v) for m, r in modes.items()
         for l, row in enumerate(r["accuracy_matrix"], 1) for t, v in enumerate(row, 1)],
    )
    tables["running_curve"] = (
        ["mode", "session", "running_aa"],
        [(m, l, v) for m, r in modes.items() for l, v in enumerate(r["running_curve"], 1)],
    )
    if "domain_id" in report:
        tables["domain_id"] = (
            ["domain", "name", "accuracy"],
            [(t, report["domains"][t - 1], v) for t, v in enumerate(report["domain_id"]["per_domain"], 1)],
        )
    if "ood" in report:
        ood = report["ood"]
        tables["ood"] = (
            ["checkpoint", "column", "domain", "accuracy"],
            [(l, c, d, v) for l, row in enumerate(ood["rows"], 1)
             for c, d, v in zip(ood["columns"], ood["column_domains"], row) if v is not None],
        )
    if "parameter_accounting" in report:
        keys = ["image_prompt", "language_prompt", "classifier", "centroids", "total"]
        tables["parameter_accounting"] = (
            ["session"] + keys,
            [(l, *(g[k] for k in keys)) for l, g in enumerate(report["parameter_accounting"]["per_domain"], 1)],
        )
    return tables


def ablation_tables(ablation: dict) -> dict[str, tuple[list[str], list[tuple]]]:
    header = ["group", "value", "aa", "forgetting", "status", "error"]
    rows = [tuple(r[k] for k in header) for r in ablation["rows"]]
    out = {"ablation": (header, rows)}
    for group in ("kmeans_k", "knn_k", "image_prompt_len", "language_prompt_len"):
        sub = [r for r in rows if r[0] == group]
        if sub:
            out[f"sweep_{group}"] = (header, sub)
    return out


def write_tables(tables: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for stem, (header, rows) in tables.items():
        p = out / f"{stem}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        paths.append(p)
    return paths
