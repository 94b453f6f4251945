import warnings

import numpy as np
import pytest

from brite.disentangle import (DegenerateInputWarning, DisentangleOptions, DisentangleResult, PixelGridPrior,
                               disentangle, init_tag_params, options_from_dict, options_to_dict, reconstruct_t0)
from brite.fields import ScalarField2D
from brite.phantom import TagParams, gen_oval_anatomy, tag_pattern


def make_pair(tp, seed=0, n=64, phases=(1.3, 4.0)):
    an = gen_oval_anatomy(seed, n, n)
    p = TagParams(A=0.45, B=0.55, mu=1 / tp, phi_h=phases[0], phi_v=phases[1])
    gh = ScalarField2D(an.data * tag_pattern(p, "h", n, n).data, an.spacing_mm)
    gv = ScalarField2D(an.data * tag_pattern(p, "v", n, n).data, an.spacing_mm)
    return an, p, gh, gv


def test_init_params():
    p = init_tag_params(18)
    assert (p.A, p.B) == (0.45, 0.55)
    assert p.mu == pytest.approx(1 / 18)
    assert p.phi_h == pytest.approx(2 * np.pi)
    with pytest.raises(ValueError):
        init_tag_params(0)


def test_recovers_frequency_and_anatomy():
    an, p, gh, gv = make_pair(12, seed=1)
    res = disentangle(gh, gv, tag_period_hint_mm=12 * 1.03, opts=DisentangleOptions(iterations=400))
    assert abs(res.params.mu - p.mu) / p.mu < 0.01
    assert np.corrcoef(res.anatomy.data.ravel(), an.data.ravel())[0, 1] > 0.95
    rh, rv = reconstruct_t0(res)
    assert np.sqrt(np.mean((rh.data - gh.data) ** 2)) < 0.02
    assert res.final_loss == min(res.loss_history)
    assert 0 <= res.params.phi_h < 2 * np.pi


def test_best_iterate_is_returned():
    _, _, gh, gv = make_pair(18)
    res = disentangle(gh, gv, tag_period_hint_mm=18, opts=DisentangleOptions(iterations=50))
    assert res.final_loss == pytest.approx(min(res.loss_history))
    assert len(res.loss_history) == 51


def test_degenerate_input_warns():
    z = ScalarField2D(np.zeros((32, 32)))
    with pytest.warns(DegenerateInputWarning):
        res = disentangle(z, z, tag_period_hint_mm=12, opts=DisentangleOptions(iterations=5))
    assert res.degenerate


def test_input_validation():
    a = ScalarField2D(np.ones((32, 32)))
    with pytest.raises(ValueError):
        disentangle(a, ScalarField2D(np.ones((32, 33))), tag_period_hint_mm=12)
    with pytest.raises(ValueError):
        disentangle(a, a)
    with pytest.raises(ValueError):
        disentangle(a, a, prior=PixelGridPrior((16, 16)), tag_period_hint_mm=12)


def test_prior_decode_range_and_tv():
    prior = PixelGridPrior((8, 8))
    z = prior.init_latent(np.random.default_rng(0))
    assert np.all(z == 0)
    from brite import autodiff as ad
    dec = prior.decode(ad.Tensor(np.random.default_rng(1).normal(size=(8, 8)) * 10))
    assert dec.data.min() >= 0 and dec.data.max() <= 1
    flat = prior.regularization(None, ad.Tensor(np.full((8, 8), 0.3)))
    assert flat.item() == pytest.approx(1e-3 * 49 * 1e-3)
    assert PixelGridPrior((8, 8), tv_weight=0).regularization(None, dec) is None


def test_save_load_roundtrip(tmp_path):
    _, _, gh, gv = make_pair(9)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = disentangle(gh, gv, tag_period_hint_mm=9, opts=DisentangleOptions(iterations=10))
    res.save(tmp_path)
    back = DisentangleResult.load(tmp_path)
    assert back.params == res.params
    np.testing.assert_allclose(back.anatomy.data, res.anatomy.data, atol=1e-7)
    assert back.anatomy.spacing_mm == res.anatomy.spacing_mm


def test_options_dict_roundtrip():
    o = DisentangleOptions(iterations=7, phase_grid=(0.0, 1.0))
    assert options_from_dict(options_to_dict(o)) == o
