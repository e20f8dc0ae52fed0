import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatar import autodiff as ad
from avatar.autodiff import SeededRng
from avatar.data import generate_sines
from avatar.nets import LstmPredictor
from avatar.evaluation import (
    EvalSettings,
    conditional_probabilities,
    joint_probabilities,
    pca_2d,
    predictive_fidelity,
    projection_rows,
    resemblance_score,
    run_full_evaluation,
    temporal_flatten,
    tsne_2d,
    _sq_distances,
)

QUICK = EvalSettings(iters=60, batch_size=32)


@pytest.fixture(scope="module")
def sines():
    return generate_sines(80, 8, 2, SeededRng(5))


# -- scores ---------------------------------------------------------------


def test_resemblance_in_range_and_deterministic(sines):
    other = generate_sines(80, 8, 2, SeededRng(6))
    a = resemblance_score(sines, other, SeededRng(1), QUICK)
    b = resemblance_score(sines, other, SeededRng(1), QUICK)
    assert a == b and 0.0 <= a <= 0.5


def test_resemblance_separable_data(sines):
    score, err = resemblance_score(
        sines, np.zeros_like(sines), SeededRng(2), EvalSettings(iters=300, batch_size=32), return_error=True
    )
    assert score >= 0.45 and score == abs(0.5 - err)


def test_resemblance_label_flip_symmetry(sines):
    # swapping roles flips labels; |0.5 - e| is unchanged when errors mirror
    zeros = np.zeros_like(sines)
    s1 = resemblance_score(sines, zeros, SeededRng(3), EvalSettings(iters=300, batch_size=32))
    s2 = resemblance_score(zeros, sines, SeededRng(3), EvalSettings(iters=300, batch_size=32))
    assert s1 >= 0.45 and s2 >= 0.45


def test_resemblance_rejects_imbalance_and_shapes(sines):
    with pytest.raises(ValueError, match="10:1"):
        resemblance_score(sines, sines[:7], SeededRng(0), QUICK)
    with pytest.raises(ValueError):
        resemblance_score(sines, sines[:, :5], SeededRng(0), QUICK)
    with pytest.raises(ValueError):
        resemblance_score(sines, sines[:0], SeededRng(0), QUICK)


def test_fidelity_nonnegative_and_deterministic(sines):
    a = predictive_fidelity(sines, sines, SeededRng(4), QUICK)
    assert a == predictive_fidelity(sines, sines, SeededRng(4), QUICK) and a >= 0


def test_constant_half_predictor_mae_on_uniform():
    # zero-weight predictor outputs sigmoid(0) = 0.5 everywhere; E|U - 0.5| = 0.25
    real = SeededRng(5).uniform(size=(400, 6, 3))
    model = LstmPredictor(3, 3, SeededRng(0))
    for p in model.parameters():
        p.data[...] = 0.0
    with ad.no_grad():
        pred = model(real[:, :-1]).data
    assert np.all(pred == 0.5)
    assert abs(np.mean(np.abs(pred - real[:, 1:])) - 0.25) < 0.01


def test_fidelity_needs_two_steps():
    x = np.zeros((5, 1, 2))
    with pytest.raises(ValueError):
        predictive_fidelity(x, x, SeededRng(0), QUICK)


# -- temporal flatten and PCA --------------------------------------------


def test_temporal_flatten_examples():
    x = SeededRng(0).normal((4, 5, 1))
    np.testing.assert_array_equal(temporal_flatten(x), x[:, :, 0])
    np.testing.assert_array_equal(temporal_flatten(np.full((2, 3, 4), 7.0)), np.full((2, 3), 7.0))
    r = SeededRng(1).normal((3, 4, 5))
    loop = [[sum(r[n, t, f] for f in range(5)) / 5 for t in range(4)] for n in range(3)]
    np.testing.assert_allclose(temporal_flatten(r), loop, atol=1e-15)


def test_pca_axis_aligned_is_centered_input():
    rng = SeededRng(2)
    X = np.column_stack([rng.normal(50) * 5, rng.normal(50)])
    X -= X.mean(axis=0)
    X[:, 1] -= X[:, 1] @ X[:, 0] / (X[:, 0] @ X[:, 0]) * X[:, 0]  # decorrelate
    X += [3.0, -2.0]
    Y = pca_2d(X)
    Xc = X - X.mean(axis=0)
    for k in range(2):
        assert np.allclose(Y[:, k], Xc[:, k], atol=1e-9) or np.allclose(Y[:, k], -Xc[:, k], atol=1e-9)


def test_pca_rank_two_reconstruction():
    rng = SeededRng(3)
    X = rng.normal((40, 2)) @ rng.normal((2, 7)) + rng.normal(7)
    Y, comps = pca_2d(X, return_components=True)
    np.testing.assert_allclose(Y @ comps.T + X.mean(axis=0), X, atol=1e-9)


def test_pca_dominates_random_directions():
    rng = SeededRng(4)
    X = rng.normal((200, 6)) * np.array([5, 3, 2, 1, 0.5, 0.2]) @ np.linalg.qr(rng.normal((6, 6)))[0]
    Y, comps = pca_2d(X, return_components=True)
    v1, v2 = Y[:, 0].var(), Y[:, 1].var()
    assert v1 >= v2
    Xc = X - X.mean(axis=0)
    for _ in range(1000):
        d = rng.normal(6)
        d /= np.linalg.norm(d)
        assert (Xc @ d).var() <= v1 + 1e-12
        # restricted to the orthogonal complement of PC1, PC2 dominates
        d -= (d @ comps[:, 0]) * comps[:, 0]
        d /= np.linalg.norm(d)
        assert (Xc @ d).var() <= v2 + 1e-12


def test_pca_sign_convention_and_errors():
    X = SeededRng(5).normal((30, 4))
    _, comps = pca_2d(X, return_components=True)
    for k in range(2):
        assert comps[np.argmax(np.abs(comps[:, k])), k] > 0
    with pytest.raises(ValueError):
        pca_2d(X[:2])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(-100, 100))
def test_pca_translation_invariant_rotation_equivariant(seed, shift):
    rng = SeededRng(seed)
    X = rng.normal((25, 3)) * np.array([4.0, 2.0, 0.5])
    Y = pca_2d(X)
    np.testing.assert_allclose(pca_2d(X + shift), Y, atol=1e-8)
    R = np.linalg.qr(rng.normal((3, 3)))[0]
    Yr = pca_2d(X @ R)
    # equal up to the per-axis sign fixed by the loading convention
    for k in range(2):
        assert np.allclose(Yr[:, k], Y[:, k], atol=1e-8) or np.allclose(Yr[:, k], -Y[:, k], atol=1e-8)


# -- t-SNE ----------------------------------------------------------------


def test_simplex_gives_uniform_conditionals():
    M = 8
    D = _sq_distances(np.eye(M))
    P, _ = conditional_probabilities(D, 5.0)
    off = ~np.eye(M, dtype=bool)
    np.testing.assert_allclose(P[off], 1.0 / (M - 1), atol=1e-12)


def test_bisection_hits_perplexity():
    X = SeededRng(6).normal((60, 5))
    for perp in (5.0, 12.0, 30.0):
        P, H = conditional_probabilities(_sq_distances(X), perp)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(np.diag(P) == 0)
        # perplexity of each row computed directly from its probabilities
        for row in P:
            p = row[row > 0]
            assert abs(math.exp(-np.sum(p * np.log(p))) - perp) < 1e-5


def test_joint_probabilities_sum_to_one():
    P = joint_probabilities(SeededRng(7).normal((30, 4)), 8.0)
    assert abs(P.sum() - 1) < 1e-9
    np.testing.assert_array_equal(P, P.T)


def test_tsne_rejects_bad_perplexity():
    with pytest.raises(ValueError):
        tsne_2d(np.zeros((10, 2)), perplexity=10)
    with pytest.raises(ValueError):
        tsne_2d(np.zeros((10, 2)), perplexity=2)


def test_tsne_kl_trace_non_increasing():
    X = SeededRng(8).normal((60, 6))
    _, trace = tsne_2d(X, perplexity=10, iters=1000, return_trace=True)
    assert np.all(trace >= 0)
    post = trace[100:]
    assert np.mean(np.diff(post) <= 1e-12) >= 0.95


def test_tsne_separates_blobs():
    rng = SeededRng(9)
    a = rng.normal((40, 5))
    b = rng.normal((40, 5)) + 100.0 / math.sqrt(5)  # centers 100 sigma apart
    Y = tsne_2d(np.vstack([a, b]), perplexity=10, iters=500)
    labels = np.r_[np.zeros(40), np.ones(40)]
    # separable along the direction joining the blob centroids
    d = Y[40:].mean(axis=0) - Y[:40].mean(axis=0)
    proj = Y @ d
    assert proj[labels == 0].max() < proj[labels == 1].min()


def test_tsne_deterministic():
    X = SeededRng(10).normal((30, 3))
    np.testing.assert_array_equal(tsne_2d(X, 5, 50), tsne_2d(X, 5, 50))


# -- full protocol --------------------------------------------------------


def test_full_evaluation_single_repeat_has_zero_std(sines):
    rep = run_full_evaluation(sines, sines[::-1], repeats=1, settings=QUICK, projections=False)
    assert rep.resemblance_std == 0.0 and rep.fidelity_std == 0.0


def test_full_evaluation_moments_match_loop(sines, tmp_path):
    other = generate_sines(80, 8, 2, SeededRng(11))
    rep = run_full_evaluation(sines, other, repeats=3, seed=4, settings=QUICK, tsne_iters=30)
    runs = [resemblance_score(sines, other, SeededRng(4 + r), QUICK) for r in range(3)]
    assert rep.resemblance_runs == runs
    m = sum(runs) / 3
    assert rep.resemblance_mean == pytest.approx(m, abs=1e-15)
    assert rep.resemblance_std == pytest.approx(math.sqrt(sum((r - m) ** 2 for r in runs) / 3), abs=1e-15)
    f = rep.fidelity_runs
    mf = sum(f) / 3
    assert rep.fidelity_std == pytest.approx(math.sqrt(sum((v - mf) ** 2 for v in f) / 3), abs=1e-15)
    assert len(rep.projections) == 2 * (80 + 80)

    rep.write_scores(tmp_path / "scores.csv")
    rep.write_projections(tmp_path / "proj.csv")
    rows = list(csv.reader(open(tmp_path / "scores.csv")))
    assert rows[0] == ["metric", "mean", "std", "repeats"] and rows[1][0] == "resemblance"
    rows = list(csv.reader(open(tmp_path / "proj.csv")))
    assert rows[0] == ["method", "x", "y", "origin"] and len(rows) == 321


def test_projection_rows_capped():
    real = generate_sines(1100, 4, 1, SeededRng(0))
    rows = projection_rows(real, real[:50], methods=("pca",))
    assert len(rows) == 1050
    rows = projection_rows(real, real, methods=("pca",))
    assert len(rows) == 2000
    with pytest.raises(ValueError):
        projection_rows(real[:10], real[:10], methods=("umap",))
