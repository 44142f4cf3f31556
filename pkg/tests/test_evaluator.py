import csv
import json
import math
import re
from fractions import Fraction

import numpy as np
import pytest

from protovit.data import AugmentConfig, Dataset, load_dataset, preprocess_batch
from protovit.evaluator import (
    NoEpisodesEvaluated,
    aggregate,
    evaluate,
    export_embeddings,
    make_report,
    summarize,
)
from protovit.sampler import EpisodeSpec
from protovit.vit import PRESETS, ViTModel

from conftest import NANO


def two_pass(acc):
    n = len(acc)
    mean = 0.0
    for a in acc:
        mean += a
    mean /= n
    ss = 0.0
    for a in acc:
        ss += (a - mean) ** 2
    std = math.sqrt(ss / (n - 1))
    return mean, std, 1.96 * std / math.sqrt(n)


def test_fixture_0_8_and_1_0():
    mean, std, ci = summarize([0.8, 1.0])
    # exact value: std = sqrt(0.02), so 1.96 * std / sqrt(2) = 1.96 * 0.1
    oracle = float(Fraction(196, 100) * Fraction(1, 10))
    assert mean == pytest.approx(0.9, abs=1e-12)
    assert std == pytest.approx(0.141421, abs=1e-6)
    assert abs(ci - oracle) <= 1e-5


def test_constant_accuracy_has_zero_ci():
    assert summarize([0.6] * 10)[2] == 0.0


def test_stats_match_two_pass_oracle(rng):
    for _ in range(100):
        acc = rng.uniform(0, 1, rng.integers(2, 200))
        for got, want in zip(summarize(acc), two_pass(acc)):
            assert abs(got - want) <= 1e-9


def test_empty_is_an_error():
    with pytest.raises(NoEpisodesEvaluated, match="no episodes evaluated"):
        summarize([])


def test_report_text_format():
    rep = make_report([0.8188] * 3)
    rep.ci95_halfwidth = 0.0178
    assert rep.text() == "Average Accuracy: 81.88%\n95% CI: ±1.78%"
    assert re.fullmatch(r"Average Accuracy: \d+\.\d\d%\n95% CI: ±\d+\.\d\d%", make_report([0.5, 0.7]).text())


def test_report_json_round_trip():
    rep = make_report([0.5, 1.0], attempted=3, config={"distance": "squared"})
    data = json.loads(rep.to_json())
    assert data["per_episode_acc"] == [0.5, 1.0]
    assert data["episodes_attempted"] == 3 and data["episodes_completed"] == 2
    assert data["config"]["distance"] == "squared"


def test_aggregate_reports_both_views():
    reps = [make_report([0.8, 1.0]), make_report([0.6, 0.6, 0.6])]
    agg = aggregate(reps)
    assert agg["mean_of_means"] == pytest.approx(0.75)
    assert agg["mean_of_ci95"] == pytest.approx(0.19601 / 2, abs=1e-5)
    assert agg["pooled_episodes"] == 5
    assert agg["pooled_mean"] == pytest.approx(0.72)


@pytest.fixture(scope="module")
def small_test_ds(small_root):
    return load_dataset(small_root, "test")


def test_evaluate_report_fields(small_test_ds):
    model = ViTModel(NANO, seed=0)
    rep = evaluate(model, small_test_ds, EpisodeSpec(5, 5, 15), episodes=6, seed=1)
    assert rep.episodes_attempted == rep.episodes_completed == 6
    assert len(rep.per_episode_acc) == 6
    assert all(0 <= a <= 1 for a in rep.per_episode_acc)
    assert rep.mean_acc == pytest.approx(np.mean(rep.per_episode_acc))
    assert rep.config["distance"] == "squared"


def test_evaluate_is_order_and_worker_independent(small_test_ds):
    model = ViTModel(NANO, seed=0)
    serial = evaluate(model, small_test_ds, EpisodeSpec(5, 2, 3), episodes=12, seed=5)
    threaded = evaluate(model, small_test_ds, EpisodeSpec(5, 2, 3), episodes=12, seed=5, workers=4)
    assert serial.per_episode_acc == threaded.per_episode_acc


def test_evaluate_skips_infeasible_episodes(small_test_ds):
    model = ViTModel(NANO, seed=0)
    with pytest.raises(NoEpisodesEvaluated):
        evaluate(model, small_test_ds, EpisodeSpec(5, 5, 20), episodes=3)
    with pytest.raises(NoEpisodesEvaluated):
        evaluate(model, small_test_ds, EpisodeSpec(6, 1, 1), episodes=3)


def test_untrained_model_is_near_chance():
    rng = np.random.default_rng(7)
    # labels carry no information about the pixels, so only chance is attainable
    images = rng.integers(0, 256, (100, 3, 8, 8), dtype=np.uint8)
    labels = [i % 5 for i in range(100)]
    model = ViTModel(NANO, seed=0)
    rep = evaluate(model, Dataset.from_arrays(images, labels), EpisodeSpec(5, 5, 15), episodes=200, seed=42)
    assert 0.12 <= rep.mean_acc <= 0.30


@pytest.fixture(scope="module")
def export_setup(tmp_path_factory):
    rng = np.random.default_rng(3)
    ds = Dataset.from_arrays(rng.integers(0, 256, (120, 3, 32, 32), dtype=np.uint8), [i % 4 for i in range(120)])
    model = ViTModel(PRESETS["micro"], seed=1)
    out = tmp_path_factory.mktemp("export")
    export_embeddings(model, ds, out / "a.csv")
    export_embeddings(model, ds, out / "b.csv", batch_size=50)
    return model, ds, out


def test_export_shape(export_setup):
    _, _, out = export_setup
    rows = list(csv.reader(open(out / "a.csv")))
    assert rows[0][:3] == ["sample_index", "label", "emb_0"]
    assert len(rows) == 121
    assert {len(r) for r in rows} == {66}


def test_export_is_byte_identical(export_setup):
    _, _, out = export_setup
    assert (out / "a.csv").read_bytes() == (out / "b.csv").read_bytes()


def test_export_matches_direct_forward(export_setup):
    model, ds, out = export_setup
    rows = list(csv.reader(open(out / "a.csv")))[1:]
    images = preprocess_batch(ds.images[7:8], AugmentConfig(target_size=32), dtype=model.dtype)
    direct = model.forward_features(images).data[0]
    assert int(rows[7][0]) == 7 and int(rows[7][1]) == ds.labels[7]
    assert np.array_equal(np.array([float(v) for v in rows[7][2:]], dtype=direct.dtype), direct)


def test_export_io_error_names_path(export_setup, tmp_path):
    model, ds, _ = export_setup
    target = tmp_path / "missing" / "x.csv"
    with pytest.raises(OSError, match="missing"):
        export_embeddings(model, Dataset(ds.images[:2], ds.labels[:2]), target)
