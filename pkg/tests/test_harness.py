import csv
import json
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sprompts import harness as hs
from sprompts.domains import LabeledDataset, StreamSpec, generate_stream
from sprompts.prompting import MethodConfig, SPrompts, TrainingError
from sprompts.router import CentroidStore, identify_domains

FAST = MethodConfig(epochs=1, batch_size=16, augment=False, kmeans_k=2)


def test_matrix_cells_and_bounds():
    A = hs.AccuracyMatrix(3)
    for l in range(1, 4):
        for t in range(1, l + 1):
            A.set(l, t, 0.5)
    assert A.defined_cells() == 6 and A.complete
    with pytest.raises(hs.MetricError):
        hs.AccuracyMatrix(2).set(1, 2, 0.5)
    with pytest.raises(hs.MetricError):
        hs.AccuracyMatrix(2).set(1, 1, 1.5)


def test_average_accuracy_examples():
    aa, curve = hs.average_accuracy(hs.AccuracyMatrix.from_rows([[0.9], [0.85, 0.95]]))
    assert aa == pytest.approx(0.90) and curve == [0.9, pytest.approx(0.90)]
    assert hs.average_accuracy(hs.AccuracyMatrix.from_rows([[1.0], [1.0, 1.0]]))[0] == 1.0
    assert hs.average_accuracy(hs.AccuracyMatrix.from_rows([[0.7]]))[0] == 0.7
    with pytest.raises(hs.MetricError):
        hs.average_accuracy(hs.AccuracyMatrix(2))


def test_forgetting_examples():
    f, ok = hs.forgetting(hs.AccuracyMatrix.from_rows([[0.9], [0.85, 0.95]]))
    assert f == pytest.approx(-0.05) and ok
    f, _ = hs.forgetting(hs.AccuracyMatrix.from_rows([[0.5], [0.6, 0.7], [0.6, 0.8, 0.9]]))
    assert f == 0.0
    assert hs.forgetting(hs.AccuracyMatrix.from_rows([[0.3]])) == (0.0, False)


acc = st.floats(0, 1)


@given(st.integers(2, 6).flatmap(lambda S: st.tuples(*[st.lists(acc, min_size=l, max_size=l) for l in range(1, S + 1)])))
def test_forgetting_is_never_positive(rows):
    A = hs.AccuracyMatrix.from_rows(rows)
    S = A.size
    f, _ = hs.forgetting(A)
    assert f <= 0
    # no worse than the drop from the just-learned accuracy, averaged
    assert f <= sum(min(0.0, A.get(S, t) - A.get(t, t)) for t in range(1, S)) / (S - 1) + 1e-12


def test_task_agnostic_examples():
    assert hs.task_agnostic_accuracy([100, 150], [100, 300]) == 0.625
    assert hs.task_agnostic_accuracy([30], [40]) == 0.75
    with pytest.raises(hs.MetricError):
        hs.task_agnostic_accuracy([], [])


@given(st.integers(1, 50), st.lists(st.integers(0, 1000), min_size=1, max_size=6))
def test_task_agnostic_equals_mean_for_equal_sizes(n, raw):
    correct = [c % (n + 1) for c in raw]
    assert hs.task_agnostic_accuracy(correct, [n] * len(correct)) == pytest.approx(np.mean([c / n for c in correct]))


class _FeatureRouter:
    """Stand-in model that routes raw pixel means through a real centroid store."""

    def __init__(self, store):
        self.store = store

    def route(self, images, knn_k=None):
        return identify_domains(images.reshape(len(images), -1)[:, :2], self.store, knn_k or 1)


def test_domain_id_on_separated_clusters(rng):
    store = CentroidStore(2)
    tests = []
    for d, centre in enumerate([(0, 0), (5, 5), (-5, 5)], 1):
        store.add_domain(d, np.array([centre], float))
        pts = np.array(centre) + rng.normal(0, 0.3, (50, 2))
        tests.append(LabeledDataset(pts.reshape(50, 1, 1, 2), np.zeros(50), "test"))
    per, avg = hs.domain_id_accuracy(_FeatureRouter(store), tests)
    assert min(per) >= 0.99
    per, avg = hs.domain_id_accuracy(_FeatureRouter(store), tests[:1])
    assert per == [1.0]


@pytest.fixture(scope="module")
def tiny_run(tiny_backbone):
    stream = generate_stream(StreamSpec(domains=("identity", "rot90_hue", "noise"), train_per_class=4,
                                        test_per_class=3, ood=("invert", "checkerboard"), image_size=16))
    return stream, hs.run_dil(stream, FAST, tiny_backbone)


def test_run_fills_triangle(tiny_run):
    _, res = tiny_run
    assert res.complete
    for A in res.matrices.values():
        assert A.size == 3 and A.defined_cells() == 6


def test_til_rows_are_bitwise_stable(tiny_run):
    _, res = tiny_run
    til = res.matrices["til"]
    for t in range(1, 4):
        assert len({til.get(l, t) for l in range(t, 4)}) == 1
        for l in range(t, 4):
            assert res.til_probs[(l, t)].tobytes() == res.til_probs[(t, t)].tobytes()
    assert res.report["modes"]["til"]["forgetting"] == 0.0


def test_ood_table(tiny_run):
    stream, res = tiny_run
    ood = res.report["ood"]
    assert len(ood["rows"]) == 3 and all(len(r) == 3 + 2 for r in ood["rows"])
    assert ood["rows"][0][0] == res.matrices["dil"].get(1, 1)
    assert ood["rows"][2][:3] == res.matrices["dil"].row(3)
    assert ood["rows"][0][1] is None
    for row in ood["ood_routing"][-1]:
        assert len(row) == 3 and sum(row) == len(stream.ood[0])
    with pytest.raises(hs.MetricError):
        hs.ood_eval(res.snapshots[1:], stream.test, stream.ood)


def test_backbone_untouched(tiny_run, tiny_backbone):
    _, res = tiny_run
    assert res.report["provenance"]["backbone_fingerprint"] == tiny_backbone.fingerprint()


def test_failure_gives_incomplete_report(tiny_backbone, tiny_stream, monkeypatch):
    real = SPrompts.train_session

    def flaky(self, data, s=None):
        if self.sessions == 1:
            raise TrainingError("session 2: non-finite loss at step 0")
        return real(self, data, s)

    monkeypatch.setattr(SPrompts, "train_session", flaky)
    res = hs.run_dil(tiny_stream, FAST, tiny_backbone, ["dil"])
    assert not res.complete and res.report["complete"] is False
    assert "non-finite" in res.report["error"]
    assert res.report["partial_matrices"]["dil"] == [[res.matrices["dil"].get(1, 1)], [], [], []]


def test_resume_reproduces_report(tiny_run, tiny_backbone):
    stream, res = tiny_run
    records = res.report["sessions"][:2]
    again = hs.run_dil(stream, FAST, tiny_backbone, resume=res.snapshots[:2], resume_records=records)
    assert json.dumps(again.report, sort_keys=True) == json.dumps(res.report, sort_keys=True)


def test_refit_with_same_k_is_identity(tiny_run):
    stream, res = tiny_run
    snap = hs.refit_centroids(res.model, stream.train, FAST.kmeans_k)
    assert snap.store.matrix().tobytes() == res.model.store.matrix().tobytes()


def test_ablation_suite_rows(tiny_run, tiny_backbone):
    stream, res = tiny_run
    plan = hs.AblationPlan(image_prompt_lens=(10,), language_prompt_lens=(16,), knn_ks=(1, 99),
                           ablations=("shared_prompts_dependent",))
    out = hs.ablation_suite(stream, res, FAST, tiny_backbone, plan)
    groups = {}
    for r in out["rows"]:
        groups.setdefault(r["group"], []).append(r["value"])
    assert groups["kmeans_k"] == [1, 3, 5, 7, 9]
    assert {"random", "vote", "dil"} <= set(groups["selection"])
    assert groups["ablation"] == ["shared_prompts_dependent"]
    # knn_k above the store size fails for that cell only; the suite carries on
    failed = [(r["group"], r["value"]) for r in out["rows"] if r["status"] == "failed"]
    assert failed == [("knn_k", 99)]
    assert out["rows"][-1]["group"] == "language_prompt_len"


def test_empty_sweep_rejected():
    with pytest.raises(hs.MetricError):
        hs.AblationPlan(kmeans_ks=())


def test_tables_print_report_values(tiny_run, tmp_path):
    _, res = tiny_run
    hs.dump_json(res.report, tmp_path / "r.json")
    report = json.loads((tmp_path / "r.json").read_text())
    hs.write_tables(hs.report_tables(report), tmp_path)
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        assert row["task_wise_aa"] == repr(report["modes"][row["mode"]]["task_wise_aa"])
    with open(tmp_path / "accuracy_matrix.csv") as fh:
        for row in csv.DictReader(fh):
            m = report["modes"][row["mode"]]["accuracy_matrix"]
            assert row["accuracy"] == repr(m[int(row["after_session"]) - 1][int(row["test_domain"]) - 1])
