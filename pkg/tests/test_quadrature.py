import numpy as np
import pytest

from feecflow.quadrature import (MAX_EXACTNESS, edge_rule, reference_triangle_monomial_integral,
                                 triangle_rule)


@pytest.mark.parametrize("deg", range(MAX_EXACTNESS + 1))
def test_triangle_rule_exactness(deg):
    rule = triangle_rule(deg)
    assert (rule.weights > 0).all()
    for a in range(deg + 1):
        for b in range(deg + 1 - a):
            val = (rule.weights * rule.points[:, 0] ** a * rule.points[:, 1] ** b).sum()
            assert abs(val - reference_triangle_monomial_integral(a, b)) < 1e-13


def test_triangle_rule_degree2_monomials():
    rule = triangle_rule(2)
    x, y, w = rule.points[:, 0], rule.points[:, 1], rule.weights
    assert abs((w * x**2).sum() - 1.0 / 12.0) < 1e-14
    assert abs((w * x * y).sum() - 1.0 / 24.0) < 1e-14
    assert abs((w * y**2).sum() - 1.0 / 12.0) < 1e-14


def test_weight_sums():
    assert abs(triangle_rule(5).weights.sum() - 0.5) < 1e-14
    assert abs(edge_rule(5).weights.sum() - 1.0) < 1e-14


def test_edge_rule_cubic():
    rule = edge_rule(3)
    assert abs((rule.weights * rule.points[:, 0] ** 3).sum() - 0.25) < 1e-14


@pytest.mark.parametrize("deg", range(MAX_EXACTNESS + 1))
def test_edge_rule_exactness(deg):
    rule = edge_rule(deg)
    for k in range(deg + 1):
        assert abs((rule.weights * rule.points[:, 0] ** k).sum() - 1.0 / (k + 1)) < 1e-14


def test_exactness_out_of_range():
    with pytest.raises(ValueError):
        triangle_rule(MAX_EXACTNESS + 1)
    with pytest.raises(ValueError):
        edge_rule(MAX_EXACTNESS + 1)
