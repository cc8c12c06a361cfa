"""Penultimate embeddings, PCA by deflation, exact t-SNE and a cluster-ordering score."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import Network
from .psychometrics import spearman
from .stimgen import Dataset
from .tensornet import ShapeMismatch

log = logging.getLogger(__name__)


class DegenerateInput(ValueError):
    pass


@dataclass
class EmbeddingSet:
    matrix: np.ndarray
    numerosities: np.ndarray
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.numerosities = np.asarray(self.numerosities, dtype=int)
        if self.matrix.ndim != 2 or len(self.matrix) != len(self.numerosities):
            raise ShapeMismatch(f"embedding matrix {self.matrix.shape} for {len(self.numerosities)} labels")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding matrix has non-finite entries")

    def __len__(self) -> int:
        return len(self.matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def extract_embeddings(network: Network, dataset: Dataset, batch_size: int = 256,
                       source: dict | None = None) -> EmbeddingSet:
    """Penultimate activations for every image in ``dataset``."""
    _, emb = network.embed(dataset.images, batch_size)
    if emb.shape != (len(dataset), network.config.embedding_dim):
        raise ShapeMismatch(f"embedding {emb.shape}, expected ({len(dataset)}, {network.config.embedding_dim})")
    return EmbeddingSet(emb, dataset.numerosities, dict(source or {}))


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAResult:
    scores: np.ndarray
    components: np.ndarray  # [k, dim], unit rows
    eigenvalues: np.ndarray
    explained: np.ndarray  # fraction of total variance per component
    mean: np.ndarray
    rank_deficient: bool = False


def _top_eigenpair(C: np.ndarray, basis: np.ndarray, rng: np.random.Generator,
                   power_iters: int, tol: float) -> tuple[float, np.ndarray]:
    """Leading eigenpair of C restricted to the complement of ``basis`` rows.

    Power iteration gets close; Rayleigh-quotient iteration polishes. The
    polished pair is kept only if it did not slide to a smaller eigenvalue.
    """
    dim = C.shape[0]

    def project(x):
        if len(basis):
            x = x - basis.T @ (basis @ x)
        return x

    x = project(rng.standard_normal(dim))
    x /= np.linalg.norm(x)
    scale = max(np.abs(np.diag(C)).max(), 1e-300)
    lam = float(x @ C @ x)
    for _ in range(power_iters):
        y = project(C @ x)
        ny = np.linalg.norm(y)
        if ny <= 1e-300:
            return 0.0, x
        x = y / ny
        lam_new = float(x @ C @ x)
        if np.linalg.norm(project(C @ x) - lam_new * x) < 1e-6 * scale:
            lam = lam_new
            break
        lam = lam_new
    eye = np.eye(dim)
    z = x.copy()
    mu = lam
    for _ in range(30):
        r = project(C @ z) - mu * z
        if np.linalg.norm(r) < tol * scale:
            break
        try:
            w = np.linalg.solve(C - mu * eye, z)
        except np.linalg.LinAlgError:
            break
        w = project(w)
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0:
            break
        z = w / nw
        mu = float(z @ C @ z)
    if mu >= lam - 1e-9 * scale:
        return mu, z
    return lam, x


def pca_project(X, k: int, seed: int = 0, power_iters: int = 2000, tol: float = 1e-14,
                rank_tol: float = 1e-12) -> PCAResult:
    """Top-k principal components by iterated deflation.

    Each component is found on the covariance projected away from the
    components already extracted. Components whose variance falls below
    ``rank_tol`` times the total are dropped and ``rank_deficient`` is set.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ShapeMismatch(f"PCA needs a 2D matrix, got {X.shape}")
    n, dim = X.shape
    if not 1 <= k <= dim or n <= k:
        raise ValueError(f"need N > k >= 1 and k <= dim; got N={n}, dim={dim}, k={k}")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (n - 1)
    C = 0.5 * (C + C.T)
    total = float(np.trace(C))
    rng = np.random.default_rng(seed)
    comps: list[np.ndarray] = []
    vals: list[float] = []
    deficient = False
    for _ in range(k):
        basis = np.array(comps).reshape(len(comps), dim)
        lam, v = _top_eigenpair(C, basis, rng, power_iters, tol)
        if total <= 0 or lam <= rank_tol * total:
            deficient = True
            break
        # fixed sign: largest-magnitude loading positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        vals.append(lam)
    components = np.array(comps).reshape(len(comps), dim)
    eig = np.array(vals)
    scores = Xc @ components.T
    scores -= scores.mean(axis=0)
    explained = eig / total if total > 0 else np.zeros(0)
    return PCAResult(scores, components, eig, explained, mean, deficient)


# ---------------------------------------------------------------------------
# t-SNE


@dataclass
class Projection2D:
    coords: np.ndarray
    method: str
    params: dict
    objective: float
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 2 or not np.isfinite(self.coords).all():
            raise ValueError("projection must be finite with 2 columns")


def _squared_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def conditional_affinities(D: np.ndarray, perplexity: float, tol: float = 1e-5,
                           max_iter: int = 200) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity).

    Bisection on the precision beta, all rows at once.
    """
    n = len(D)
    target = np.log(perplexity)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    beta = np.ones(n)
    off = ~np.eye(n, dtype=bool)
    # distances shifted by each row's nearest neighbour for numerical range
    Dn = np.where(off, D, np.inf)
    Dn = Dn - Dn.min(axis=1, keepdims=True)
    P = np.zeros_like(D)
    for _ in range(max_iter):
        P = np.exp(-Dn * beta[:, None])
        sums = P.sum(axis=1)
        P /= sums[:, None]
        H = np.log(sums) + beta * (P * np.where(off, Dn, 0.0)).sum(axis=1)
        diff = H - target
        if np.abs(diff).max() < tol:
            break
        too_flat = diff > 0  # entropy too high: increase beta
        lo = np.where(too_flat, beta, lo)
        hi = np.where(too_flat, hi, beta)
        beta = np.where(np.isinf(hi), beta * 2.0, 0.5 * (lo + hi))
    return P


def joint_affinities(X: np.ndarray, perplexity: float) -> np.ndarray:
    n = len(X)
    P = conditional_affinities(_squared_distances(X), perplexity)
    P = (P + P.T) / (2.0 * n)
    return np.maximum(P, 1e-12)


def _kl_and_grad(P: np.ndarray, Y: np.ndarray, scale: float = 1.0) -> tuple[float, np.ndarray]:
    """KL(scale*P || Q) for Student-t Q, and its gradient in Y."""
    W = 1.0 / (1.0 + _squared_distances(Y))
    np.fill_diagonal(W, 0.0)
    Z = W.sum()
    Q = np.maximum(W / Z, 1e-300)
    PP = scale * P
    off = ~np.eye(len(P), dtype=bool)
    kl = float((PP[off] * np.log(PP[off] / Q[off])).sum())
    M = (PP - Q) * W
    grad = 4.0 * (M.sum(axis=1)[:, None] * Y - M @ Y)
    return kl, grad


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    return _kl_and_grad(P, Y)[0]


def tsne_project(X, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
                 exaggeration: float = 12.0, exaggeration_iters: int = 250,
                 learning_rate: float = 200.0, min_gain: float = 0.01) -> Projection2D:
    """Exact t-SNE with early exaggeration, momentum and adaptive gains.

    After the exaggeration phase every step is checked against the KL
    objective; a step that would raise it is retried as a plain gradient step
    with a halved rate, so the post-exaggeration objective never increases.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n < 2:
        raise DegenerateInput("t-SNE needs at least two points")
    if np.ptp(X, axis=0).max() == 0:
        raise DegenerateInput("all points are identical")
    if perplexity >= n:
        raise ValueError(f"perplexity {perplexity} must be below N={n}")
    if n < 3 * perplexity:
        log.warning("t-SNE with N=%d below the recommended 3*perplexity=%g", n, 3 * perplexity)
    P = joint_affinities(X, perplexity)
    rng = np.random.default_rng(seed)
    Y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace = np.empty(iterations)
    kl, grad = _kl_and_grad(P, Y, exaggeration if exaggeration_iters > 0 else 1.0)
    for it in range(iterations):
        early = it < exaggeration_iters
        if it == exaggeration_iters:
            kl, grad = _kl_and_grad(P, Y)
            update[:] = 0.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        scale = exaggeration if early else 1.0
        gains = np.where(np.sign(grad) != np.sign(update), gains + 0.2, gains * 0.8)
        np.maximum(gains, min_gain, out=gains)
        proposal = momentum * update - learning_rate * gains * grad
        Y_new = Y + proposal
        Y_new -= Y_new.mean(axis=0)
        kl_new, grad_new = _kl_and_grad(P, Y_new, scale)
        if not early:
            step = learning_rate
            while kl_new > kl and step > 1e-12:
                step *= 0.5
                proposal = -step * grad
                Y_new = Y + proposal
                Y_new -= Y_new.mean(axis=0)
                kl_new, grad_new = _kl_and_grad(P, Y_new)
            if kl_new > kl:
                proposal = np.zeros_like(Y)
                Y_new, kl_new, grad_new = Y, kl, grad
            if step != learning_rate:
                gains[:] = 1.0
        Y, kl, grad, update = Y_new, kl_new, grad_new, proposal
        trace[it] = kl
    Y = Y - Y.mean(axis=0)
    params = {"perplexity": perplexity, "iterations": iterations, "seed": seed,
              "exaggeration": exaggeration, "exaggeration_iters": exaggeration_iters,
              "learning_rate": learning_rate}
    return Projection2D(Y, "PCA+tSNE", params, float(kl), trace)


def project_embeddings(embeddings: EmbeddingSet, method: str = "PCA+tSNE", pca_dims: int = 50,
                       perplexity: float = 30.0, iterations: int = 1000, seed: int = 0) -> Projection2D:
    """PCA to min(pca_dims, dim) then t-SNE, or PCA straight to 2D."""
    X = embeddings.matrix
    if method == "PCA":
        pca = pca_project(X, min(2, X.shape[1]), seed)
        coords = np.zeros((len(X), 2))
        coords[:, :pca.scores.shape[1]] = pca.scores
        return Projection2D(coords, "PCA", {"components": 2, "rank_deficient": pca.rank_deficient},
                            float(pca.explained.sum()))
    if method != "PCA+tSNE":
        raise ValueError(f"unknown projection method {method!r}")
    k = min(pca_dims, X.shape[1], len(X) - 1)
    pca = pca_project(X, k, seed)
    if pca.scores.shape[1] == 0:
        raise DegenerateInput("embeddings have no variance")
    proj = tsne_project(pca.scores, min(perplexity, (len(X) - 1) / 3), iterations, seed)
    proj.params.update(pca_dims=int(pca.scores.shape[1]), rank_deficient=pca.rank_deficient)
    return proj


# ---------------------------------------------------------------------------
# ordering


def silhouette_samples(points, labels) -> np.ndarray:
    """Per-point silhouette with Euclidean distance; singleton clusters score 0."""
    X = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    D = np.sqrt(_squared_distances(X))
    uniq = np.unique(labels)
    masks = [labels == u for u in uniq]
    sums = np.stack([D[:, m].sum(axis=1) for m in masks], axis=1)
    sizes = np.array([m.sum() for m in masks], dtype=float)
    own = np.searchsorted(uniq, labels)
    rows = np.arange(len(X))
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / sizes
    other[rows, own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own_size > 1, s, 0.0)


def centroid_order(points, labels) -> float:
    """Spearman rho between label and centroid position on the centroids' first principal axis."""
    X = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    cents = np.array([X[labels == u].mean(axis=0) for u in uniq])
    cc = cents - cents.mean(axis=0)
    if len(uniq) < 2 or not np.any(cc):
        return 0.0
    _, _, vt = np.linalg.svd(cc, full_matrices=False)
    axis = vt[0] if vt[0][np.argmax(np.abs(vt[0]))] > 0 else -vt[0]
    return spearman(uniq, cc @ axis)


def ordering_score(projection, labels) -> dict:
    """Silhouette by numerosity and the centroid-ordering correlation.

    The sign of rho depends on the arbitrary axis orientation, so callers
    compare ``abs_rho``.
    """
    coords = getattr(projection, "coords", projection)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("ordering needs at least two numerosities")
    sil = silhouette_samples(coords, labels)
    rho = centroid_order(coords, labels)
    return {"silhouette": float(sil.mean()),
            "silhouette_by_label": {int(u): float(sil[labels == u].mean()) for u in uniq},
            "rho": rho, "abs_rho": abs(rho)}


def ordering_null(projection, labels, shuffles: int = 1000, seed: int = 0,
                  quantile: float = 0.95) -> dict:
    """Permutation distribution of |rho| under shuffled labels, with its upper quantile."""
    coords = getattr(projection, "coords", projection)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    null = np.array([abs(centroid_order(coords, rng.permutation(labels))) for _ in range(shuffles)])
    return {"null": null, "line": float(np.quantile(null, quantile))}
