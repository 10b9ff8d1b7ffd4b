import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from torch import nn

from viciousbench.errors import ArgumentError
from viciousbench.nets import ClassifierSpec, build_classifier
from viciousbench.sentinel import (DetectionReport, DetectorConfig, cosine_rows,
                                   cosine_similarity_outputs, detect, estimate_output_entropy,
                                   finetune_copy, output_entropy, parameter_digest, plot_traces,
                                   verdict_for, vicious_likelihood)


class _Scaled(nn.Module):
    def __init__(self, inner, factor):
        super().__init__()
        self.inner, self.factor = inner, factor

    def forward(self, x):
        return self.factor * self.inner(x)


class _Constant(nn.Module):
    def __init__(self, n):
        super().__init__()
        self.n = n

    def forward(self, x):
        return torch.ones(len(x), self.n)


@pytest.fixture(scope="module")
def model(tiny_categorical):
    return build_classifier(ClassifierSpec("mlp", 1, 4, tiny_categorical.shape), 0)


def test_cosine_stubs(model, tiny_categorical):
    x = tiny_categorical.test.images
    assert cosine_similarity_outputs(model, model, x) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity_outputs(model, _Scaled(model, -1.0), x) == pytest.approx(-1.0, abs=1e-12)
    assert cosine_similarity_outputs(model, _Scaled(model, 2.0), x) == pytest.approx(1.0, abs=1e-12)


# subnormal entries can round to exactly zero when scaled, which changes the vector itself
@given(arrays(np.float64, (5, 3), elements=st.floats(-5, 5, allow_subnormal=False)),
       arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), st.floats(0.01, 100))
def test_cosine_scale_invariant_and_bounded(a, b, c):
    sims, _ = cosine_rows(a, b)
    assert np.all(np.abs(sims) <= 1.0)
    np.testing.assert_allclose(cosine_rows(c * a, b)[0], sims, atol=1e-9)


def test_zero_rows_score_zero():
    sims, zero = cosine_rows([[0.0, 0.0], [1.0, 0.0], [np.nan, 1.0]], [[1.0, 1.0], [2.0, 0.0], [1.0, 1.0]])
    np.testing.assert_array_equal(sims, [0.0, 1.0, 0.0])
    assert zero == 2


def test_zero_outputs_warn(tiny_categorical):
    with pytest.warns(UserWarning):
        c = cosine_similarity_outputs(_Scaled(_Constant(4), 0.0), _Constant(4), tiny_categorical.test.images)
    assert c == 0.0


def test_likelihood_examples():
    assert vicious_likelihood(1.0) == 0.0
    assert vicious_likelihood(-1.0) == 1.0
    assert vicious_likelihood(0.98) == pytest.approx(0.01, abs=1e-15)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_likelihood_monotone(a, b):
    if a <= b:
        assert vicious_likelihood(a) >= vicious_likelihood(b)


def test_verdict_flips_at_threshold():
    assert verdict_for(0.01) == "honest"
    assert verdict_for(np.nextafter(0.01, 1.0)) == "suspect"
    assert verdict_for(0.2, threshold=0.25) == "honest"


def test_zero_steps_is_a_no_op(model, tiny_categorical):
    d = tiny_categorical
    rep = detect(model, d.valid, d.test, d.label_space, DetectorConfig(steps=0))
    assert rep.cosine_trace == [pytest.approx(1.0, abs=1e-12)]
    assert rep.v == pytest.approx(0.0, abs=1e-12) and rep.verdict == "honest"
    F0 = finetune_copy(model, d.valid, d.label_space, steps=0)
    assert parameter_digest(F0) == parameter_digest(model)


def test_detection_leaves_model_untouched(model, tiny_categorical):
    d = tiny_categorical
    before = parameter_digest(model)
    rep = detect(model, d.valid, d.test, d.label_space, DetectorConfig(steps=5, learning_rate=0.5))
    assert parameter_digest(model) == before
    assert len(rep.cosine_trace) == 6
    assert rep.cosine_trace[0] == pytest.approx(1.0, abs=1e-12)
    assert rep.v == vicious_likelihood(rep.final_cosine)
    assert rep.verdict == verdict_for(rep.v)
    assert rep.finetune_config["steps"] == 5


def test_finetune_changes_the_copy(model, tiny_categorical):
    d = tiny_categorical
    seen = []
    F_plus = finetune_copy(model, d.train, d.label_space, steps=3, batch_size=16,
                           on_step=lambda s, m: seen.append(s))
    assert seen == [1, 2, 3]
    assert parameter_digest(F_plus) != parameter_digest(model)
    again = finetune_copy(model, d.train, d.label_space, steps=3, batch_size=16)
    assert parameter_digest(again) == parameter_digest(F_plus)


def test_empty_probe(model, tiny_categorical):
    d = tiny_categorical
    empty = d.valid.subset(np.arange(0))
    with pytest.raises(ArgumentError):
        finetune_copy(model, empty, d.label_space)
    with pytest.raises(ArgumentError):
        detect(model, empty, d.test, d.label_space)


def test_detector_config_validation():
    for bad in (dict(steps=-1), dict(probe_size=0), dict(learning_rate=0), dict(threshold=2),
                dict(optimizer="rmsprop"), dict(channel="argmax")):
        with pytest.raises(ArgumentError):
            DetectorConfig(**bad)


def test_report_validation_and_json(tmp_path):
    with pytest.raises(ArgumentError):
        DetectionReport([1.2], 0.0, "honest")
    with pytest.raises(ArgumentError):
        DetectionReport([], 0.0, "honest")
    rep = DetectionReport([1.0, 0.995, 0.97], vicious_likelihood(0.97), "suspect", {"threshold": 0.01})
    assert rep.first_crossing() == 2
    rep.save(tmp_path / "d.json")
    data = json.loads((tmp_path / "d.json").read_text())
    assert data["verdict"] == "suspect" and data["final_cosine"] == 0.97
    plot_traces({"a": rep}, tmp_path / "t.svg")
    assert (tmp_path / "t.svg").exists()


def test_entropy_examples(tiny_categorical):
    assert output_entropy(np.ones((100, 3))) == 0.0
    u = np.random.default_rng(0).uniform(0, 1, size=(200_000, 2))
    assert output_entropy(u, bins=16) == pytest.approx(8.0, abs=0.2)
    assert output_entropy(u[:, 0], bins=16) == pytest.approx(4.0, abs=0.1)
    assert estimate_output_entropy(_Constant(4), tiny_categorical.test) == 0.0
    with pytest.raises(ArgumentError):
        output_entropy(u, bins=1)
