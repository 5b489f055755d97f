from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mglmm.model import (
    Family,
    ModelError,
    ModelSpec,
    NaturalParams,
    Theta,
    Variant,
    build_spec,
    count_np,
    dataset_from_arrays,
    pack,
    unpack,
)

FOUR = ["age", "sex", "income", "bmi"]


def reference_spec(family, variant="full"):
    # three responses with four covariates each: sum of p_r = 15
    return build_spec(
        {"family": family, "responses": ["Nmsp", "Nmosp", "Nspfy"], "covariates": [FOUR] * 3, "variant": variant}
    )


def valid_pairs():
    for fam in Family:
        for var in Variant:
            if var is Variant.FIXED_DISPERSION and fam is Family.POISSON:
                continue
            yield fam, var


# -- build_spec ---------------------------------------------------------------


def test_build_spec_cmp_three_responses():
    spec = build_spec({"family": "CMP", "responses": ["Nmsp", "Nmosp", "Nspfy"], "variant": "Full"})
    assert spec.k == 3
    assert spec.family is Family.CMP
    assert spec.responses == ("Nmsp", "Nmosp", "Nspfy")


def test_build_spec_poisson_single_response_rho_zero_has_no_correlation_slots():
    spec = build_spec({"family": "poisson", "responses": ["y"], "variant": "RhoZero"})
    lay = spec.layout
    assert lay.rho_slice.stop - lay.rho_slice.start == 0
    assert count_np(spec) == 2


def test_build_spec_rejects_poisson_fixed_dispersion():
    with pytest.raises(ModelError):
        build_spec({"family": "poisson", "responses": ["y"], "variant": "FixedDispersion"})


@pytest.mark.parametrize(
    "config",
    [
        {"family": "gamma", "responses": ["y"]},
        {"family": "nb", "responses": ["y"], "variant": "banana"},
        {"family": "nb", "responses": []},
        {"responses": ["y"]},
        {"family": "nb", "responses": ["y", "y"]},
        {"family": "nb", "responses": ["y"], "covariates": {"z": ["x"]}},
    ],
)
def test_build_spec_errors(config):
    with pytest.raises(ModelError):
        build_spec(config)


def test_build_spec_keeps_written_order():
    spec = build_spec({"family": "nb", "responses": ["b", "a"], "covariates": {"a": ["z", "x"], "b": ["x"]}})
    assert spec.responses == ("b", "a")
    assert spec.covariates == (("x",), ("z", "x"))
    assert spec.layout.free_names[:5] == ("beta[b:(Intercept)]", "beta[b:x]", "beta[a:(Intercept)]", "beta[a:z]", "beta[a:x]")


# -- parameter counts -----------------------------------------------------------


@pytest.mark.parametrize(
    "family, variant, expected",
    [
        ("poisson", "full", 21),
        ("nb", "rho_zero", 21),
        ("nb", "common_variance", 22),
        ("cmp", "full", 24),
        ("poisson", "rho_zero", 18),
        ("nb", "full", 24),
        ("nb", "fixed_dispersion", 21),
        ("cmp", "fixed_variance", 21),
    ],
)
def test_count_np_reference_predictor(family, variant, expected):
    assert count_np(reference_spec(family, variant)) == expected


@pytest.mark.parametrize("family, variant", list(valid_pairs()))
def test_count_np_matches_packed_length(family, variant):
    spec = reference_spec(family, variant)
    nat = NaturalParams(
        beta=tuple(np.arange(5, dtype=float) / 10 for _ in range(3)),
        disp=np.array([2.0, 3.0, 4.0]) if family.has_dispersion else None,
        sd=np.array([0.5, 0.6, 0.7]),
        corr=np.eye(3),
    )
    theta = pack(nat, spec)
    assert theta.free.shape == (count_np(spec),)
    assert (~theta.frozen_mask).sum() + theta.frozen_mask.sum() == spec.layout.n_full


# -- pack / unpack ----------------------------------------------------------------


def test_pack_unit_sd_gives_zero_log_sd():
    spec = ModelSpec("poisson", ("y",), ((),))
    theta = pack(NaturalParams((np.array([0.0]),), None, np.array([1.0]), np.eye(1)), spec)
    assert theta.log_sd[0] == 0.0


def test_fixed_dispersion_freezes_log_disp_at_ln_one_point_five():
    full = reference_spec("cmp")
    fixed = reference_spec("cmp", "fixed_dispersion")
    assert fixed.dispersion_value == 1.5
    lay = fixed.layout
    assert np.all(lay.frozen_mask[lay.disp_slice])
    assert np.all(lay.fixed[lay.disp_slice] == math.log(1.5))
    assert count_np(full) - count_np(fixed) == 3
    theta = Theta.from_free(fixed, np.zeros(count_np(fixed)))
    assert np.all(unpack(theta).disp == pytest.approx(1.5, rel=1e-15))


def test_fixed_variance_freezes_log_sd_at_zero():
    spec = reference_spec("nb", "fixed_variance")
    theta = Theta.from_free(spec, np.ones(count_np(spec)))
    assert np.all(theta.log_sd == 0.0)


def test_common_variance_shares_one_log_sd():
    spec = reference_spec("nb", "common_variance")
    nat = NaturalParams(
        beta=tuple(np.zeros(5) for _ in range(3)), disp=np.ones(3), sd=np.array([0.5, 0.5, 0.5]), corr=np.eye(3)
    )
    theta = pack(nat, spec)
    assert "log_sd" in spec.layout.free_names
    assert np.all(theta.log_sd == math.log(0.5))


@pytest.mark.parametrize("bad", [{"disp": np.array([1.0, -1.0])}, {"sd": np.array([0.0, 1.0])}])
def test_pack_rejects_nonpositive(bad):
    spec = ModelSpec("nb2", ("a", "b"), ((), ()))
    fields = dict(beta=(np.zeros(1), np.zeros(1)), disp=np.ones(2), sd=np.ones(2), corr=np.eye(2))
    fields.update(bad)
    with pytest.raises(ModelError):
        pack(NaturalParams(**fields), spec)


pair_strategy = st.sampled_from(list(valid_pairs()))


@settings(max_examples=60, deadline=None)
@given(pair=pair_strategy, seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 5.0))
def test_free_vector_round_trip_is_exact(pair, seed, scale):
    spec = reference_spec(*pair)
    v = np.random.default_rng(seed).normal(scale=scale, size=count_np(spec))
    assert np.array_equal(Theta.from_free(spec, v).free, v)


@settings(max_examples=60, deadline=None)
@given(pair=pair_strategy, seed=st.integers(0, 2**32 - 1))
def test_pack_unpack_round_trip(pair, seed):
    spec = reference_spec(*pair)
    v = np.random.default_rng(seed).normal(scale=0.8, size=count_np(spec))
    theta = Theta.from_free(spec, v)
    again = pack(unpack(theta), spec)
    # log/exp and the correlation map each cost a few ulps
    np.testing.assert_allclose(again.free, v, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_unpack_pack_round_trip(seed):
    rng = np.random.default_rng(seed)
    spec = reference_spec("cmp")
    A = rng.normal(size=(3, 3))
    S = A @ A.T + 0.1 * np.eye(3)
    d = np.sqrt(np.diag(S))
    nat = NaturalParams(
        beta=tuple(rng.normal(size=5) for _ in range(3)),
        disp=rng.uniform(0.2, 20, 3),
        sd=rng.uniform(0.05, 3, 3),
        corr=S / np.outer(d, d),
    )
    back = unpack(pack(nat, spec))
    for b0, b1 in zip(nat.beta, back.beta):
        assert np.array_equal(b0, b1)
    np.testing.assert_allclose(back.disp, nat.disp, rtol=1e-14)
    np.testing.assert_allclose(back.sd, nat.sd, rtol=1e-14)
    np.testing.assert_allclose(back.corr, nat.corr, atol=1e-12)


# -- Dataset ------------------------------------------------------------------------


def _spec():
    return ModelSpec("poisson", ("a", "b"), (("x",), ("x", "z")))


def test_dataset_is_order_preserving():
    x = np.array([0.5, -1.0, 2.0, 0.1])
    z = np.array([1.0, 0.0, 1.0, 1.0])
    Y = np.array([[1, 2], [3, 4], [5, 6], [7, 9]])
    d = dataset_from_arrays(_spec(), Y, {"x": x, "z": z}, subject_id=np.array(["p", "q", "r", "s"]))
    for i in range(4):
        blk = d.subject(i)
        assert np.array_equal(blk.y, Y[i])
        assert np.array_equal(blk.x[0], [1.0, x[i]])
        assert np.array_equal(blk.x[1], [1.0, x[i], z[i]])
    sub = d.subset([2, 0, 1])
    assert np.array_equal(sub.Y, Y[[2, 0, 1]])
    assert list(sub.subject_id) == ["r", "p", "q"]


@pytest.mark.parametrize(
    "Y, cols",
    [
        (np.array([[1, 2], [3, -1], [1, 1]]), None),  # negative count
        (np.array([[1.5, 2], [3, 1], [1, 1]]), None),  # non-integer
        (np.array([[1, 2]]), None),  # one subject
        (np.array([[1, 2], [3, 1], [1, 1]]), {"x": np.array([1.0, 2.0, 3.0]), "z": np.array([2.0, 4.0, 6.0])}),
        (np.array([[1, 2], [3, 1], [1, 1]]), {"x": np.array([1.0, 2.0, 3.0])}),  # missing column
        (np.array([[1, 2], [3, 1], [1, 1]]), {"x": np.array([1.0, np.nan, 3.0]), "z": np.ones(3)}),
    ],
)
def test_dataset_validation(Y, cols):
    cols = cols if cols is not None else {"x": np.array([0.0, 1.0, 3.0])[: len(Y)], "z": np.array([1.0, 0.0, 0.0])[: len(Y)]}
    with pytest.raises(ModelError):
        dataset_from_arrays(_spec(), Y, cols)


def test_rank_deficient_design_is_rejected():
    spec = ModelSpec("poisson", ("a",), (("x", "w"),))
    x = np.array([0.0, 1.0, 2.0, 3.0])
    with pytest.raises(ModelError, match="rank"):
        dataset_from_arrays(spec, np.array([[1], [2], [3], [4]]), {"x": x, "w": 2 * x + 1})


def test_dataset_equals_is_bitwise():
    cols = {"x": np.array([0.1, 0.2, 0.3]), "z": np.array([1.0, 0.0, 1.0])}
    Y = np.array([[1, 2], [3, 1], [1, 1]])
    a = dataset_from_arrays(_spec(), Y, cols)
    b = dataset_from_arrays(_spec(), Y.copy(), {k: v.copy() for k, v in cols.items()})
    assert a.equals(b)
    c = dataset_from_arrays(_spec(), Y, {**cols, "x": np.nextafter(cols["x"], 1.0)})
    assert not a.equals(c)


def test_spec_replace_and_dict():
    spec = reference_spec("nb", "rho_zero")
    other = spec.replace(family=Family.CMP)
    assert other.family is Family.CMP and other.variant is Variant.RHO_ZERO
    assert spec.to_dict()["covariates"]["Nmsp"] == FOUR
