import numpy as np
import pytest

from ald import autodiff as ad
from ald.encoder import AmortizedEncoder, check_capacity, rank_diagnostic


@pytest.fixture
def encoder():
    return AmortizedEncoder.mlp(4, 2, np.random.default_rng(0), d=16, hidden=(8,), phi_std=0.3)


def test_encode_is_phi_times_features(encoder):
    X = np.random.default_rng(1).standard_normal((5, 4))
    G = encoder.features(X).data
    np.testing.assert_allclose(encoder.encode(X).data, G @ encoder.phi.data.T, rtol=1e-14)
    assert encoder.encode(X).shape == (5, 2)


def test_zero_phi_gives_zero_latents(encoder):
    encoder.phi.data[...] = 0.0
    X = np.random.default_rng(2).standard_normal((3, 4))
    np.testing.assert_array_equal(encoder.encode(X).data, 0.0)


def test_duplicate_inputs_give_identical_rows(encoder):
    x = np.random.default_rng(3).standard_normal(4)
    Z = encoder.encode(np.stack([x, x, x])).data
    np.testing.assert_array_equal(Z[0], Z[1])
    assert rank_diagnostic(encoder.features(np.stack([x, x])).data).rank == 1


def test_phi_shape_validated():
    with pytest.raises(ad.DimensionError):
        AmortizedEncoder.one_hot(3, 2, phi=np.zeros((3, 2)))


def test_input_shape_validated(encoder):
    with pytest.raises(ad.DimensionError):
        encoder.features(np.zeros(4))


def test_one_hot_columns_are_latents():
    phi = np.arange(6.0).reshape(2, 3)
    enc = AmortizedEncoder.one_hot(3, 2, phi)
    np.testing.assert_array_equal(enc.encode(np.zeros((3, 5))).data, phi.T)
    with pytest.raises(ad.DimensionError):
        enc.features(np.zeros((4, 5)))


def test_rank_examples():
    rng = np.random.default_rng(4)
    low = rank_diagnostic(rng.standard_normal((3, 2)))
    assert low.rank <= 2 and not low.satisfied
    ident = rank_diagnostic(np.eye(3))
    assert ident.rank == 3 and ident.satisfied
    G = rng.standard_normal((3, 128))
    rep = rank_diagnostic(G)
    assert rep.satisfied
    np.testing.assert_allclose(rep.singular_values, np.linalg.svd(G, compute_uv=False))
    with pytest.raises(ValueError):
        rank_diagnostic(G, tol=0.0)


def test_capacity_warning():
    enc = AmortizedEncoder.mlp(2, 2, np.random.default_rng(0), d=2)
    with pytest.warns(UserWarning, match="smaller than the batch size"):
        check_capacity(enc, 3)


def test_feature_parameters_exclude_phi(encoder):
    assert all(p is not encoder.phi for p in encoder.feature_parameters())
    assert len(encoder.parameters()) == len(encoder.feature_parameters()) + 1
