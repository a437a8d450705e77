"""Quantizer oracles: init values, closed-form updates, sign search, fits."""

import itertools

import numpy as np
import pytest

from maskquant.daq import (
    DaqConfig,
    binary_rc_init,
    classic_binarize,
    daq_fit,
    rsr_fit,
    update_alpha_c,
    update_alpha_r,
    update_signs,
)
from maskquant.stats import proxy_loss
from maskquant.rng import Rng


def _gauss(shape, seed, stream=0):
    return np.asarray(Rng(seed, stream).gaussian(shape))


# --- classic binarization ----------------------------------------------------


def test_classic_antisymmetric_row_is_exact():
    alpha, signs, mu = classic_binarize(np.array([[1.0, -1.0]]))
    assert mu[0] == 0.0
    assert alpha[0] == 1.0
    assert signs.tolist() == [[1, -1]]


def test_classic_constant_row_absorbed_by_mean():
    alpha, signs, mu = classic_binarize(np.array([[2.0, 2.0]]))
    assert mu[0] == 2.0
    assert alpha[0] == 0.0


def test_classic_uncentered_row_means():
    alpha, signs, mu = classic_binarize(np.array([[1.0, -2.0], [3.0, 4.0]]), row_center=False)
    assert mu is None
    assert np.allclose(alpha, [1.5, 3.5])
    assert signs.tolist() == [[1, -1], [1, 1]]


# --- initialization ----------------------------------------------------------


def test_rc_init_frozen_example():
    # hand evaluation: row means of |X| are (1.5, 3.5); column scales are the
    # row-normalized column means ((1/1.5 + 3/3.5)/2, (2/1.5 + 4/3.5)/2)
    fit = binary_rc_init(np.array([[1.0, -2.0], [3.0, 4.0]]))
    assert np.allclose(fit.alpha_r, [1.5, 3.5])
    assert np.allclose(fit.alpha_c, [0.761905, 1.238095], atol=1e-5)
    assert fit.signs.tolist() == [[1, -1], [1, 1]]


def test_rc_init_constant_matrix_exact():
    fit = binary_rc_init(np.full((3, 4), 2.5))
    assert np.allclose(fit.alpha_r, 2.5)
    assert np.allclose(fit.alpha_c, 1.0)
    assert np.allclose(fit.reconstruct(), 2.5)


def test_rc_init_sign_symmetry():
    x = _gauss((6, 7), seed=1)
    a, b = binary_rc_init(x), binary_rc_init(-x)
    assert np.array_equal(a.alpha_r, b.alpha_r)
    assert np.array_equal(a.alpha_c, b.alpha_c)
    assert np.array_equal(a.signs, -b.signs)


def test_rc_init_zero_row_guarded():
    x = np.array([[0.0, 0.0], [2.0, 4.0]])
    fit = binary_rc_init(x)
    assert fit.alpha_r[0] == 0.0
    # zero row contributes 0 to the column means, denominator stays n
    assert np.allclose(fit.alpha_c, [2.0 / 3.0 / 2.0, 4.0 / 3.0 / 2.0])


# --- closed-form scale updates -------------------------------------------------


def test_update_alpha_r_frozen_example():
    x = np.array([[1.0, -2.0], [3.0, 4.0]])
    signs = np.array([[1.0, -1.0], [1.0, 1.0]])
    alpha_c = np.array([0.761905, 1.238095])
    alpha_r = update_alpha_r(x, signs, alpha_c)
    assert np.allclose(alpha_r, [1.532133, 3.424867], atol=1e-4)


def _lstsq_row_oracle(x, signs, alpha_c, lam):
    # per-row weighted least squares without the epsilon stabilizer
    out = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        design = (lam[i] * alpha_c * signs[i])[:, None]
        target = lam[i] * x[i]
        out[i] = np.linalg.lstsq(design, target, rcond=None)[0][0]
    return out


def test_update_alpha_r_matches_lstsq_oracle():
    rng = Rng(2, 0)
    x = np.asarray(rng.gaussian((8, 12)))
    signs = np.where(np.asarray(rng.uniform((8, 12))) < 0.5, 1.0, -1.0)
    alpha_c = np.asarray(rng.uniform(12)) + 0.5
    lam = np.ones((8, 12))
    lam[np.asarray(rng.uniform((8, 12))) < 0.1] = 2.0
    ours = update_alpha_r(x, signs, alpha_c, lam)
    oracle = _lstsq_row_oracle(x, signs, alpha_c, lam)
    assert np.allclose(ours, oracle, rtol=1e-6)
    # column update by symmetry (transpose everything)
    ours_c = update_alpha_c(x, signs, np.asarray(rng.uniform(8)) + 0.5, lam)
    alpha_r = np.asarray(rng.uniform(8)) + 0.5
    oracle_c = _lstsq_row_oracle(x.T, signs.T, alpha_r, lam.T)
    assert np.allclose(update_alpha_c(x, signs, alpha_r, lam), oracle_c, rtol=1e-6)
    assert ours_c.shape == (12,)


def test_update_reduces_to_classic_scale_when_aligned():
    x = np.abs(_gauss((5, 40), seed=3)) + 0.1
    signs = np.ones((5, 40))
    alpha_r = update_alpha_r(x, signs, np.ones(40))
    assert np.allclose(alpha_r, np.abs(x).mean(axis=1), rtol=1e-6)


def test_update_weighting_pulls_toward_flagged_column():
    x = np.asarray(Rng(4, 0).gaussian((6, 10)))
    signs = np.where(x >= 0, 1.0, -1.0)
    alpha_c = np.ones(10)
    lam = np.ones((6, 10))
    lam[:, 3] = 4.0

    def objective(alpha_r, lam_):
        recon = np.outer(alpha_r, alpha_c) * signs
        return proxy_loss(x, recon, lam_)

    plain = update_alpha_r(x, signs, alpha_c)
    weighted = update_alpha_r(x, signs, alpha_c, lam)
    # each row's weighted objective is a 1-D quadratic; the update must beat
    # the unweighted solution and every nearby probe
    assert objective(weighted, lam) <= objective(plain, lam)
    for delta in (-1e-3, 1e-3):
        probe = weighted * (1 + delta)
        assert objective(probe, lam) >= objective(weighted, lam) * (1 - 1e-12)


# --- sign search ----------------------------------------------------------------


def test_update_signs_frozen_examples():
    # order 2: scales (0.5, 0.25), target 0.6 -> (+1, +1), residual -0.15
    signs = update_signs(np.array([[0.6]]), [(np.array([0.5]), np.array([1.0])), (np.array([0.25]), np.array([1.0]))])
    assert signs[0][0, 0] == 1.0 and signs[1][0, 0] == 1.0
    # order 3: scales (0.4, 0.2, 0.1), target 0.3 -> (+1, -1, +1) exactly
    signs = update_signs(
        np.array([[0.3]]),
        [(np.array([s]), np.array([1.0])) for s in (0.4, 0.2, 0.1)],
    )
    assert [s[0, 0] for s in signs] == [1.0, -1.0, 1.0]


def test_update_signs_order1_is_sign():
    x = _gauss((6, 6), seed=5)
    signs = update_signs(x, [(np.full(6, 0.7), np.full(6, 1.3))])
    assert np.array_equal(signs[0], np.where(x >= 0, 1.0, -1.0))


def test_update_signs_tiebreak_prefers_plus_ones():
    # zero scale for the second term: all four candidates tie pairwise;
    # the winner must carry the most +1 entries
    signs = update_signs(
        np.array([[0.5]]),
        [(np.array([0.5]), np.array([1.0])), (np.array([0.0]), np.array([1.0]))],
    )
    assert signs[0][0, 0] == 1.0 and signs[1][0, 0] == 1.0


def _bruteforce_signs(target, scale_pairs):
    order = len(scale_pairs)
    planes = [np.outer(ar, ac) for ar, ac in scale_pairs]
    out = [np.empty_like(target) for _ in range(order)]
    cands = list(itertools.product((1.0, -1.0), repeat=order))
    for i in range(target.shape[0]):
        for j in range(target.shape[1]):
            best = min(
                range(len(cands)),
                key=lambda c: (
                    abs(target[i, j] - sum(cands[c][k] * planes[k][i, j] for k in range(order))),
                    cands[c].count(-1.0),
                    c,
                ),
            )
            for k in range(order):
                out[k][i, j] = cands[best][k]
    return out


@pytest.mark.parametrize("order", [1, 2, 3])
def test_update_signs_matches_bruteforce(order):
    rng = Rng(6, order)
    target = np.asarray(rng.gaussian((10, 10)))
    pairs = [
        (np.asarray(rng.gaussian(10)) * 0.5 + 0.8, np.asarray(rng.gaussian(10)) * 0.3 + 1.0)
        for _ in range(order)
    ]
    ours = update_signs(target, pairs)
    oracle = _bruteforce_signs(target, pairs)
    for a, b in zip(ours, oracle):
        assert np.array_equal(a, b)


# --- alternating fits -------------------------------------------------------------


def test_rsr_constant_matrix_exact():
    x = np.full((4, 6), 3.0)
    fit = rsr_fit(x)
    assert proxy_loss(x, fit.reconstruct()) == pytest.approx(0.0, abs=1e-12)


def test_rsr_rank1_magnitude_exact():
    rng = Rng(7, 0)
    u = np.asarray(rng.uniform(64)) + 0.5
    v = np.asarray(rng.uniform(64)) + 0.5
    s = np.where(np.asarray(rng.uniform((64, 64))) < 0.5, 1.0, -1.0)
    x = np.outer(u, v) * s
    fit = rsr_fit(x)
    assert proxy_loss(x, fit.reconstruct()) < 1e-10


def test_rsr_beats_classic_on_gaussian():
    x = _gauss((64, 64), seed=8)
    fit = rsr_fit(x)
    alpha, signs, _ = classic_binarize(x, row_center=False)
    classic = proxy_loss(x, alpha[:, None] * signs)
    assert proxy_loss(x, fit.reconstruct()) <= classic


def test_daq_order1_equals_rsr():
    x = _gauss((24, 30), seed=9)
    lone = daq_fit(x, cfg=DaqConfig(order=1, row_center=False)).orders[0]
    alone = rsr_fit(x)
    assert np.array_equal(lone.alpha_r, alone.alpha_r)
    assert np.array_equal(lone.alpha_c, alone.alpha_c)
    assert np.array_equal(lone.signs, alone.signs)


def test_daq_exactly_representable_two_terms():
    rng = Rng(10, 0)
    a1 = np.asarray(rng.uniform(64)) + 2.0
    c1 = np.asarray(rng.uniform(64)) * 0.4 + 0.8
    a2 = np.asarray(rng.uniform(64)) * 0.2 + 0.3
    c2 = np.asarray(rng.uniform(64)) * 0.4 + 0.8
    b1 = np.where(np.asarray(rng.uniform((64, 64))) < 0.5, 1.0, -1.0)
    b2 = np.where(np.asarray(rng.uniform((64, 64))) < 0.5, 1.0, -1.0)
    w = np.outer(a1, c1) * b1 + np.outer(a2, c2) * b2
    fit = daq_fit(w, cfg=DaqConfig(order=2, sweeps=50, tol=0.0, row_center=False))
    assert proxy_loss(w, fit.reconstruct()) < 1e-9


def test_daq_order_dominance():
    w = _gauss((128, 128), seed=11)
    losses = [
        daq_fit(w, cfg=DaqConfig(order=k)).loss_history[-1] for k in (1, 2, 3)
    ]
    assert losses[0] >= losses[1] >= losses[2]


def test_daq_history_monotone_with_weights():
    rng = Rng(12, 0)
    w = np.asarray(rng.gaussian((48, 40)))
    lam = np.ones((48, 40))
    lam[np.asarray(rng.uniform((48, 40))) < 0.02] = 2.0
    group = daq_fit(w, lam, DaqConfig(order=2, sweeps=12))
    history = group.loss_history
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert group.loss_history[-1] == pytest.approx(
        proxy_loss(w - w.mean(axis=1)[:, None], group.reconstruct() - group.row_mean.astype(np.float64)[:, None], lam),
        rel=1e-5,  # float32 scale cast on the returned object
    )


def test_daq_row_center_stores_means():
    w = _gauss((16, 16), seed=13) + 5.0
    group = daq_fit(w, cfg=DaqConfig(order=1))
    assert group.row_mean is not None
    assert np.allclose(group.row_mean, w.mean(axis=1), atol=1e-6)
    off = daq_fit(w, cfg=DaqConfig(order=1, row_center=False))
    assert off.row_mean is None


def test_daq_scale_equivariance():
    w = _gauss((20, 24), seed=14)
    tiny = DaqConfig(order=2, epsilon=1e-30)  # epsilon below rounding: exact scaling
    base = daq_fit(w, cfg=tiny).reconstruct()
    doubled = daq_fit(2.0 * w, cfg=tiny).reconstruct()
    assert np.array_equal(doubled, 2.0 * base)
    default_cfg = DaqConfig(order=2)
    approx = daq_fit(2.0 * w, cfg=default_cfg).reconstruct()
    assert np.allclose(approx, 2.0 * daq_fit(w, cfg=default_cfg).reconstruct(), rtol=1e-6)


def test_daq_sign_symmetry():
    w = _gauss((20, 24), seed=15)
    cfg = DaqConfig(order=2, row_center=False)
    pos = daq_fit(w, cfg=cfg).reconstruct()
    neg = daq_fit(-w, cfg=cfg).reconstruct()
    assert np.array_equal(neg, -pos)


def test_daq_zero_sweeps_is_greedy_init():
    w = _gauss((16, 16), seed=16)
    group = daq_fit(w, cfg=DaqConfig(order=2, sweeps=0, row_center=False))
    assert len(group.loss_history) == 1


def test_weighted_fit_lowers_true_output_error_on_structured_inputs():
    # when a few input dimensions carry most of the activation energy, the
    # saliency-weighted fit must beat the unweighted one on the quadratic
    # output-error form built from those activations
    from maskquant.stats import (
        SecondMoment,
        build_importance_mask,
        damped_inverse_diag,
        importance_matrix,
        true_data_loss,
    )

    for trial in range(3):
        rng = Rng(42 + trial, 0)
        rows, cols = 48, 64
        col_std = np.ones(cols)
        col_std[:4] = 10.0
        acts = (np.asarray(rng.gaussian((cols, 2048))) * col_std[:, None]).astype(np.float32)
        w = np.asarray(rng.gaussian((rows, cols)), dtype=np.float32)
        sm = SecondMoment(cols)
        sm.accumulate(acts)
        z = importance_matrix(w, damped_inverse_diag(sm))
        mask = build_importance_mask(z, 2.0)
        assert mask.outlier_fraction > 0
        cfg = DaqConfig(order=2)
        plain = true_data_loss(w, daq_fit(w, None, cfg).reconstruct(), sm)
        weighted = true_data_loss(w, daq_fit(w, mask.weights(), cfg).reconstruct(), sm)
        assert weighted < plain


def test_daq_rejects_bad_inputs():
    with pytest.raises(ValueError):
        DaqConfig(order=4)
    with pytest.raises(ValueError):
        daq_fit(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        daq_fit(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        daq_fit(np.ones((2, 2)), lam=np.ones((3, 3)))
