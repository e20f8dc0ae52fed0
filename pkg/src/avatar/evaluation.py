"""Post-hoc evaluation: resemblance score, predictive fidelity, PCA and t-SNE.

All models here are trained with the package's own autodiff engine and
Adam, so every score is a deterministic function of its inputs and seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, SeededRng, Tensor
from .losses import PROB_EPS
from .nets import LstmClassifier, LstmPredictor


@dataclass
class EvalSettings:
    iters: int = 1500
    batch_size: int = 128
    learning_rate: float = 1e-3
    train_frac: float = 0.8
    classifier_hidden: int | None = None  # default 2 * F
    predictor_hidden: int | None = None  # default F


def _check_pair(real, synth):
    real, synth = np.asarray(real, dtype=float), np.asarray(synth, dtype=float)
    if real.ndim != 3 or synth.ndim != 3:
        raise ValueError("real and synthetic data must be N x T x F arrays")
    if len(real) == 0 or len(synth) == 0:
        raise ValueError("real and synthetic data must be non-empty")
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(f"shape mismatch: real {real.shape[1:]} vs synthetic {synth.shape[1:]}")
    return real, synth


def _split_idx(n, frac, rng):
    perm = rng.permutation(n)
    k = min(max(int(round(n * frac)), 1), n - 1) if n > 1 else n
    return perm[:k], perm[k:]


def resemblance_score(real, synth, rng, settings: EvalSettings | None = None, return_error=False):
    """``|0.5 - test error|`` of an LSTM trained to tell real (1) from synthetic (0)."""
    s = settings or EvalSettings()
    real, synth = _check_pair(real, synth)
    big, small = max(len(real), len(synth)), min(len(real), len(synth))
    if big > 10 * small:
        raise ValueError(f"class imbalance {big}:{small} exceeds 10:1")
    if small < 2:
        raise ValueError("each class needs at least two sequences")

    r_tr, r_te = _split_idx(len(real), s.train_frac, rng)
    s_tr, s_te = _split_idx(len(synth), s.train_frac, rng)
    x_tr = np.concatenate([real[r_tr], synth[s_tr]])
    y_tr = np.concatenate([np.ones(len(r_tr)), np.zeros(len(s_tr))])
    x_te = np.concatenate([real[r_te], synth[s_te]])
    y_te = np.concatenate([np.ones(len(r_te)), np.zeros(len(s_te))])

    F = real.shape[2]
    clf = LstmClassifier(F, s.classifier_hidden or 2 * F, rng)
    opt = Adam(clf.parameters(), lr=s.learning_rate)
    bs = min(s.batch_size, len(x_tr))
    for _ in range(s.iters):
        idx = rng.integers(0, len(x_tr), size=bs)
        p = ad.clip(clf(x_tr[idx]), PROB_EPS, 1.0 - PROB_EPS)
        y = y_tr[idx]
        loss = -ad.mean(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()

    with ad.no_grad():
        p_te = clf(x_te).data
    error = float(np.mean((p_te > 0.5) != (y_te > 0.5)))
    score = abs(0.5 - error)
    return (score, error) if return_error else score


def predictive_fidelity(real, synth, rng, settings: EvalSettings | None = None):
    """Train-on-synthetic, test-on-real next-step MAE."""
    s = settings or EvalSettings()
    real, synth = _check_pair(real, synth)
    if real.shape[1] < 2:
        raise ValueError("predictive fidelity needs T >= 2")
    F = real.shape[2]
    model = LstmPredictor(F, s.predictor_hidden or F, rng)
    opt = Adam(model.parameters(), lr=s.learning_rate)
    bs = min(s.batch_size, len(synth))
    for _ in range(s.iters):
        batch = synth[rng.integers(0, len(synth), size=bs)]
        pred = model(batch[:, :-1])
        loss = ad.mean(ad.absolute(pred - batch[:, 1:]))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    with ad.no_grad():
        pred = model(real[:, :-1]).data
    return float(np.mean(np.abs(pred - real[:, 1:])))


def trtr_fidelity(real, rng, settings: EvalSettings | None = None):
    """Train-on-real, test-on-real baseline for :func:`predictive_fidelity`."""
    return predictive_fidelity(real, real, rng, settings)


# ---------------------------------------------------------------------------
# projections


def temporal_flatten(batch):
    """Average over features: N x T x F -> N x T."""
    batch = np.asarray(batch, dtype=float)
    return batch.mean(axis=2)


def pca_2d(points, return_components=False):
    """Project onto the top two principal axes of the column covariance.

    Each axis is sign-fixed so its largest-magnitude loading is positive.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("pca_2d needs an M x T matrix with M >= 3")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order]
    if comps.shape[1] < 2:
        comps = np.hstack([comps, np.zeros((X.shape[1], 2 - comps.shape[1]))])
    for k in range(comps.shape[1]):
        j = np.argmax(np.abs(comps[:, k]))
        if comps[j, k] < 0:
            comps[:, k] = -comps[:, k]
    Y = Xc @ comps
    return (Y, comps) if return_components else Y


def _sq_distances(X):
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def conditional_probabilities(D, perplexity, tol=1e-10, max_iter=200):
    """Row-wise Gaussian kernels whose entropy matches ``log(perplexity)``.

    Returns ``(P, entropies)`` where row ``i`` of ``P`` is ``p(j | i)``
    (zero diagonal, rows summing to one) and ``entropies`` are in nats.
    """
    M = D.shape[0]
    target = np.log(perplexity)
    P = np.zeros((M, M))
    H_out = np.zeros(M)
    for i in range(M):
        d = np.delete(D[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-beta * d)
            sw = w.sum()
            p = w / sw
            H = np.log(sw) + beta * np.sum(d * p)
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        P[i, np.arange(M) != i] = p
        H_out[i] = H
    return P, H_out


def joint_probabilities(points, perplexity):
    D = _sq_distances(np.asarray(points, dtype=float))
    P, _ = conditional_probabilities(D, perplexity)
    P = (P + P.T) / (2.0 * P.shape[0])
    return np.maximum(P, 1e-12)


def tsne_2d(points, perplexity=30.0, iters=1000, rng=None, learning_rate=None, return_trace=False):
    """Exact t-SNE to two dimensions.

    PCA initialization scaled to standard deviation 1e-4, early exaggeration
    of 4 for the first 100 iterations, momentum 0.5 then 0.8 from iteration
    250, and per-coordinate adaptive gains.  The default learning rate is
    ``max(M / (4 * exaggeration), 50)``, which keeps small inputs from
    oscillating once the layout has settled.
    """
    X = np.asarray(points, dtype=float)
    M = X.shape[0]
    if not 3 <= perplexity < M:
        raise ValueError(f"perplexity must satisfy 3 <= perplexity < M={M}, got {perplexity}")
    P = joint_probabilities(X, perplexity)
    if learning_rate is None:
        learning_rate = max(M / 16.0, 50.0)

    Y = pca_2d(X)
    sd = Y[:, 0].std()
    if sd > 0:
        Y = Y / sd * 1e-4
    else:
        rng = rng or SeededRng(0)
        Y = rng.normal((M, 2)) * 1e-4
    Y = Y - Y.mean(axis=0)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace = []

    for it in range(iters):
        exaggeration = 4.0 if it < 100 else 1.0
        momentum = 0.5 if it < 250 else 0.8
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        PQ = (exaggeration * P - Q) * num
        grad = 4.0 * (np.sum(PQ, axis=1)[:, None] * Y - PQ @ Y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if return_trace:
            trace.append(float(np.sum(P * np.log(P / Q))))
    return (Y, np.array(trace)) if return_trace else Y


# ---------------------------------------------------------------------------
# full protocol


@dataclass
class EvalReport:
    resemblance_mean: float
    resemblance_std: float
    fidelity_mean: float
    fidelity_std: float
    repeats: int
    resemblance_runs: list = field(default_factory=list)
    fidelity_runs: list = field(default_factory=list)
    projections: list = field(default_factory=list)  # (method, x, y, origin)

    def write_scores(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "std", "repeats"])
            w.writerow(["resemblance", repr(self.resemblance_mean), repr(self.resemblance_std), self.repeats])
            w.writerow(["fidelity", repr(self.fidelity_mean), repr(self.fidelity_std), self.repeats])

    def write_projections(self, path):
        write_projections(self.projections, path)


def write_projections(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "x", "y", "origin"])
        for method, x, y, origin in rows:
            w.writerow([method, repr(float(x)), repr(float(y)), origin])


def projection_rows(real, synth, seed=0, max_per_side=1000, perplexity=30.0, tsne_iters=1000,
                    methods=("pca", "tsne")):
    real, synth = _check_pair(real, synth)
    rng = SeededRng(seed)
    if len(real) > max_per_side:
        real = real[np.sort(rng.permutation(len(real))[:max_per_side])]
    if len(synth) > max_per_side:
        synth = synth[np.sort(rng.permutation(len(synth))[:max_per_side])]
    pts = np.concatenate([temporal_flatten(real), temporal_flatten(synth)])
    origin = ["real"] * len(real) + ["synthetic"] * len(synth)
    rows = []
    for method in methods:
        if method == "pca":
            Y = pca_2d(pts)
        elif method == "tsne":
            perp = min(perplexity, max(3.0, (len(pts) - 1) / 3.0))
            Y = tsne_2d(pts, perplexity=perp, iters=tsne_iters, rng=rng)
        else:
            raise ValueError(f"unknown projection method {method!r}")
        rows += [(method, y[0], y[1], o) for y, o in zip(Y, origin)]
    return rows


def run_full_evaluation(real, synth, repeats=10, seed=0, settings: EvalSettings | None = None,
                        projections=True, perplexity=30.0, tsne_iters=1000):
    """Repeat both scores with seeds ``seed + r`` and report mean and population std."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    real, synth = _check_pair(real, synth)
    res, fid = [], []
    for r in range(repeats):
        res.append(resemblance_score(real, synth, SeededRng(seed + r), settings))
        fid.append(predictive_fidelity(real, synth, SeededRng(seed + r), settings))
    rows = projection_rows(real, synth, seed, perplexity=perplexity, tsne_iters=tsne_iters) if projections else []
    return EvalReport(
        resemblance_mean=float(np.mean(res)),
        resemblance_std=float(np.std(res)),
        fidelity_mean=float(np.mean(fid)),
        fidelity_std=float(np.std(fid)),
        repeats=repeats,
        resemblance_runs=res,
        fidelity_runs=fid,
        projections=rows,
    )
