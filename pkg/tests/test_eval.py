import io

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from crozenas import space
from crozenas.evaluation import (BenchmarkError, BenchmarkTable, UndefinedCorrelation, accuracy,
                                 additive_quality, average_ranks, correlate, feature_distance_report,
                                 hrs, load_benchmark, parse_benchmark, spearman, synth_benchmark)
from crozenas.perturb import gaussian_perturb
from crozenas.tensor import Batch, init_params

from oracles import brute_average_ranks, brute_spearman

small_ints = st.lists(st.integers(-5, 5), min_size=2, max_size=30)


def test_spearman_examples():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [30, 20, 10]) == -1.0
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(0.9486832980505138, abs=1e-12)


def test_spearman_errors():
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1], [1])
    with pytest.raises(UndefinedCorrelation):
        spearman([1, 1, 1], [1, 2, 3])


@given(small_ints)
def test_average_ranks_match_brute_force(xs):
    np.testing.assert_allclose(average_ranks(xs), brute_average_ranks(xs), rtol=0, atol=0)


@given(st.data())
def test_spearman_matches_brute_force(data):
    xs = data.draw(small_ints)
    ys = data.draw(st.lists(st.integers(-5, 5), min_size=len(xs), max_size=len(xs)))
    assume(len(set(xs)) > 1 and len(set(ys)) > 1)
    assert spearman(xs, ys) == pytest.approx(brute_spearman(xs, ys), abs=1e-12)
    assert spearman(xs, ys) == spearman(ys, xs)


@given(st.lists(st.floats(0.01, 100), min_size=2, max_size=20, unique=True),
       st.lists(st.floats(0.01, 100), min_size=20, max_size=20))
def test_spearman_monotone_invariance(xs, ys):
    ys = ys[:len(xs)]
    assume(len(set(ys)) > 1)
    cubed = [x ** 3 for x in xs]
    assert spearman(cubed, ys) == pytest.approx(spearman(xs, ys), abs=1e-12)


@pytest.mark.parametrize("clean,robust,expected", [(94.45, 22.38, 36.19), (75.18, 10.84, 18.95)])
def test_hrs_reported_values(clean, robust, expected):
    assert hrs(clean, robust) == pytest.approx(expected, abs=0.01)


def test_hrs_fixed_points():
    assert hrs(50, 50) == 50
    assert hrs(0, 0) == 0
    with pytest.raises(ValueError):
        hrs(-1, 3)


@given(st.floats(0, 100), st.floats(0, 100))
def test_hrs_sandwich(c, r):
    h = hrs(c, r)
    assert min(c, r) - 1e-12 <= h <= (c + r) / 2 + 1e-12


def test_accuracy():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 1.0], [5.0, 0.0]])
    assert accuracy(logits, [0, 1, 0, 0]) == 1.0
    assert accuracy(logits, [1, 0, 1, 1]) == 0.0
    assert accuracy(logits, [0, 1, 1, 1]) == 0.5  # the tie in row 2 goes to class 0
    with pytest.raises(ValueError):
        accuracy(logits, [0, 1])


def test_feature_distances(mixed_plan, tiny_batch):
    params = init_params(mixed_plan, 0)
    rng = np.random.default_rng(1)
    noise = rng.normal(size=tiny_batch.images.shape)
    batches = {"identity": tiny_batch,
               "g1": tiny_batch.with_images(tiny_batch.images + 0.05 * noise),
               "g2": tiny_batch.with_images(tiny_batch.images + 0.10 * noise)}
    rep = feature_distance_report(mixed_plan, params, tiny_batch, batches)
    for layer, per in rep["layers"].items():
        assert per["identity"] == {"mean": 0.0, "std": 0.0}
        assert per["cross_std"] >= 0
        assert all(per[n]["mean"] >= 0 and per[n]["std"] >= 0 for n in rep["perturbations"])
    head = rep["layers"]["head"]
    assert head["g2"]["mean"] > head["g1"]["mean"]


def test_feature_distances_gaussian_sigma(mixed_plan, tiny_batch):
    params = init_params(mixed_plan, 0)
    sigma = 8 / 255
    batches = {"s": Batch(gaussian_perturb(tiny_batch, sigma, np.random.default_rng(3)), tiny_batch.labels),
               "2s": Batch(gaussian_perturb(tiny_batch, 2 * sigma, np.random.default_rng(3)), tiny_batch.labels)}
    rep = feature_distance_report(mixed_plan, params, tiny_batch, batches)
    assert rep["layers"]["stem"]["2s"]["mean"] > rep["layers"]["stem"]["s"]["mean"]


def test_feature_distances_shape_mismatch(mixed_plan, tiny_batch):
    bad = Batch(np.zeros((3, 3, 8, 8)), [0, 0, 0])
    with pytest.raises(ValueError):
        feature_distance_report(mixed_plan, init_params(mixed_plan, 0), tiny_batch, {"bad": bad})


# -- tables ------------------------------------------------------------------

CSV = """encoding,clean,pgd
a,90,10
b,80.5,20
c,70,30.25
"""


def test_parse_benchmark():
    t = parse_benchmark(io.StringIO(CSV))
    assert len(t) == 3 and t.metrics == ("clean", "pgd")
    assert t.get("c", "pgd") == 30.25 and t.get("z", "pgd") is None


def test_load_benchmark_file(tmp_path):
    p = tmp_path / "bench.csv"
    p.write_text(CSV)
    assert load_benchmark(p, schema=["pgd"]).metrics == ("pgd",)


@pytest.mark.parametrize("text,needle", [
    (CSV + "b,1,2\n", "line 5: duplicate encoding b"),
    ("encoding,clean\na,xx\n", "line 2: unparsable clean"),
    ("encoding,clean\na,101\n", "line 2"),
    ("encoding,clean\na\n", "line 2"),
    ("arch,clean\n", "line 1"),
    ("", "line 1"),
])
def test_parse_benchmark_errors(text, needle):
    with pytest.raises(BenchmarkError, match=needle):
        parse_benchmark(io.StringIO(text))


def test_missing_schema_metric():
    with pytest.raises(BenchmarkError, match="fgsm_eps8"):
        parse_benchmark(io.StringIO(CSV), schema=["clean", "fgsm_eps8"])


def test_table_csv_round_trip():
    t = parse_benchmark(io.StringIO(CSV))
    buf = io.StringIO()
    t.to_csv(buf)
    assert parse_benchmark(io.StringIO(buf.getvalue())) == t


def _encodings(n, seed=0):
    rng = np.random.default_rng(seed)
    return sorted({space.encode(space.sample_uniform(space.NB201, rng)) for _ in range(n)})


def test_zero_noise_synthetic_is_monotone():
    q = additive_quality(seed=4)
    encs = _encodings(200)
    table = synth_benchmark(encs, q, 0.0, np.random.default_rng(0))
    planted = [q(e) for e in encs]
    for m in table.metrics:
        assert spearman(planted, [table.rows[e][m] for e in encs]) == 1.0


def test_additive_quality_range():
    q = additive_quality(seed=1)
    vals = [q(e) for e in space.enumerate_space()[::97]]
    assert 0.0 <= min(vals) and max(vals) <= 1.0


def test_correlate_identity_and_isolation():
    encs = _encodings(30, 1)
    rng = np.random.default_rng(2)
    table = synth_benchmark(encs, additive_quality(seed=0), 3.0, rng, metrics=("clean", "pgd"))
    flat = BenchmarkTable(("clean", "flat"),
                          {e: {"clean": table.rows[e]["clean"], "flat": 50.0} for e in encs})
    scores = {e: table.rows[e]["clean"] for e in encs}
    rep = correlate(scores, flat)
    assert rep.rho["clean"] == 1.0
    assert rep.rho["flat"] is None and "flat" in rep.errors
    assert rep.average == 1.0
    assert "undef" in rep.to_text()


def test_correlate_matches_brute_force_and_subsets():
    encs = _encodings(60, 3)
    table = synth_benchmark(encs, additive_quality(seed=2), 8.0, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    scores = {e: float(rng.normal()) for e in encs[:45]}
    scores["not-in-table"] = 0.0
    rep = correlate(scores, table)
    assert rep.n == 45
    for m in table.metrics:
        ys = [table.rows[e][m] for e in encs[:45]]
        assert rep.rho[m] == pytest.approx(brute_spearman([scores[e] for e in encs[:45]], ys), abs=1e-12)
    assert rep.average == pytest.approx(np.mean(list(rep.rho.values())), abs=1e-15)
    sub = {e: scores[e] for e in encs[:20]}
    assert correlate(sub, table, ["pgd"]).rho["pgd"] == spearman(
        list(sub.values()), [table.rows[e]["pgd"] for e in sub])


def test_correlate_errors():
    table = parse_benchmark(io.StringIO(CSV))
    with pytest.raises(ValueError):
        correlate({"a": 1.0, "zz": 2.0}, table)
    with pytest.raises(BenchmarkError):
        correlate({"a": 1.0, "b": 2.0}, table, ["nope"])
