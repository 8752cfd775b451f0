import json

import numpy as np
import pytest

from branchlil.model import (
    BranchingModel,
    ModelValidationError,
    binary_model,
    branching_moments,
    check_hypotheses,
    load_model,
    mean_generator,
    model_from_dict,
    yule_model,
)

YULE = {"d": 1, "Q": [[0.0]], "beta": [1.0], "offspring": [[[2, 1.0]]]}
TWO = {"d": 2, "Q": [[-1, 1], [1, -1]], "beta": [1, 1], "offspring": [[[2, 1.0]], [[2, 1.0]]]}


def test_valid_configs():
    m = model_from_dict(YULE)
    assert m.d == 1 and m.kmax == 2
    m2 = load_model(json.dumps(TWO))
    np.testing.assert_array_equal(m2.Q, [[-1, 1], [1, -1]])


def test_pmf_normalisation_error():
    bad = dict(YULE, offspring=[[[2, 0.9]]])
    with pytest.raises(ModelValidationError) as exc:
        model_from_dict(bad)
    assert any("sums to 0.9" in p for p in exc.value.problems)


def test_all_problems_reported():
    bad = {"d": 2, "Q": [[-1, 2], [-1, 1]], "beta": [-1, 1], "offspring": [[[2, 1.0]], [[1, 0.5]]]}
    with pytest.raises(ModelValidationError) as exc:
        model_from_dict(bad)
    text = " ".join(exc.value.problems)
    assert "negative off-diagonal" in text
    assert "non-conservative" in text
    assert "negative branching rate" in text
    assert "not 1" in text


@pytest.mark.parametrize(
    "doc, needle",
    [
        (dict(YULE, extra=1), "unknown keys"),
        ({"d": 1, "Q": [[0]]}, "missing keys"),
        (dict(YULE, d=0), "positive integer"),
        (dict(YULE, offspring=[[[65, 1.0]]]), "K_max"),
        (dict(YULE, offspring=[[["x", 1.0]]]), "invalid count"),
        (dict(YULE, Q=[[float("nan")]]), "non-finite"),
    ],
)
def test_rejections(doc, needle):
    with pytest.raises(ModelValidationError, match=needle):
        model_from_dict(doc)


def test_reducible_rejected():
    doc = {"d": 2, "Q": [[0, 0], [0, 0]], "beta": [1, 1], "offspring": [[[2, 1.0]], [[2, 1.0]]]}
    with pytest.raises(ModelValidationError, match="reducible"):
        model_from_dict(doc)


def test_arrays_are_read_only():
    m = yule_model()
    with pytest.raises(ValueError):
        m.Q[0, 0] = 1.0


def test_round_trip():
    m = model_from_dict(TWO)
    assert model_from_dict(m.to_dict()) == m


def test_branching_moments_yule():
    A = branching_moments(yule_model())
    assert (A.A1[0], A.A2[0], A.A3[0], A.A4[0]) == (1.0, 2.0, 0.0, 0.0)


def test_branching_moments_unit_offspring():
    m = BranchingModel(d=1, Q=np.zeros((1, 1)), beta=np.array([5.0]), offspring=np.array([[0.0, 1.0]]))
    A = branching_moments(m)
    assert A.A1[0] == 0 and A.A2[0] == 0 and A.A3[0] == 0 and A.A4[0] == 0
    assert A.deterministic


def test_branching_moments_binary():
    A = branching_moments(binary_model([[0.0]], 1.0, p0=0.25))
    assert A.A1[0] == pytest.approx(0.5) and A.A2[0] == pytest.approx(1.5)


def test_mean_generator_examples():
    np.testing.assert_array_equal(mean_generator(yule_model()), [[1.0]])
    np.testing.assert_array_equal(mean_generator(model_from_dict(TWO)), [[0, 1], [1, 0]])
    Q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    m = BranchingModel(d=2, Q=Q, beta=np.zeros(2), offspring=np.array([[0, 0, 1.0]] * 2))
    np.testing.assert_array_equal(mean_generator(m), Q)


def test_mean_generator_unit_offspring_scaling():
    Q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    for b in (1.0, 2.0):
        m = BranchingModel(d=2, Q=Q, beta=np.full(2, b), offspring=np.array([[0, 1.0]] * 2))
        np.testing.assert_array_equal(mean_generator(m), Q)


def test_check_hypotheses():
    h = check_hypotheses(yule_model())
    assert h["supercritical"] and h["lambda_1"] == pytest.approx(-1.0)
    dead = BranchingModel(d=1, Q=np.zeros((1, 1)), beta=np.array([1.0]), offspring=np.array([[1.0]]))
    h = check_hypotheses(dead)
    assert not h["supercritical"] and h["lambda_1"] == pytest.approx(1.0)
    assert any("supercritical" in w for w in h["warnings"])


def test_check_hypotheses_reducible_warning():
    # bypass construction-time validation to exercise the diagnostic path
    m = object.__new__(BranchingModel)
    for k, v in dict(d=2, Q=np.zeros((2, 2)), beta=np.ones(2), offspring=np.array([[0, 0, 1.0]] * 2),
                     declared_spectrum=None).items():
        object.__setattr__(m, k, v)
    h = check_hypotheses(m)
    assert not h["irreducible"] and any("reducible" in w for w in h["warnings"])


def test_permuted():
    m = model_from_dict({"d": 2, "Q": [[-1, 1], [3, -3]], "beta": [1, 2], "offspring": [[[2, 1.0]], [[0, 0.5], [3, 0.5]]]})
    p = m.permuted([1, 0])
    assert p.Q[0, 1] == 3 and p.beta[0] == 2 and p.offspring[1, 2] == 1.0
