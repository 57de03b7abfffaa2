"""Frame-to-clip aggregation: average pooling and a trainable VLAD layer.

The VLAD layer soft-assigns each frame to learned cluster centers,
accumulates residuals (frame minus center), flattens, and applies a
fully-connected layer followed by batch normalization. There is no
intra- or final L2 normalization, so output magnitude tracks input
magnitude through the linear tail.

All aggregators sum frames in a content-canonical order (frames are
internally sorted by fixed random projections of their values), which
makes the float64 results bit-identical under any permutation of the
input frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng

_PROJ_CACHE = {}


def _order_projections(dim):
    """Three fixed random projections used to sort frames canonically."""
    if dim not in _PROJ_CACHE:
        _PROJ_CACHE[dim] = make_rng(0xC0FFEE + dim).normal(size=(3, dim))
    return _PROJ_CACHE[dim]


def canonical_frame_order(vectors, qualities=None):
    """Permutation sorting frames by content; shape (..., K) of indices."""
    r = _order_projections(vectors.shape[-1])
    p0 = (vectors * r[0]).sum(axis=-1)
    p1 = (vectors * r[1]).sum(axis=-1)
    p2 = (vectors * r[2]).sum(axis=-1)
    keys = (p2, p1, p0) if qualities is None else (qualities, p2, p1, p0)
    return np.lexsort(keys, axis=-1)


def average_pool(frames):
    """Arithmetic mean of the frame vectors. (k, d) -> (d,)."""
    vectors = frames.vectors if hasattr(frames, "vectors") else np.asarray(frames)
    vectors = vectors.astype(np.float64, copy=False)
    order = canonical_frame_order(vectors)
    return vectors[order].sum(axis=0) / vectors.shape[0]


def quality_weighted_pool(frames, qualities=None):
    """Mean of frame vectors weighted proportionally to quality scores.

    Falls back to the plain mean when every quality is zero.
    """
    if hasattr(frames, "vectors"):
        vectors, qualities = frames.vectors, frames.qualities
    else:
        vectors = np.asarray(frames)
    vectors = vectors.astype(np.float64, copy=False)
    qualities = np.asarray(qualities, dtype=np.float64)
    total = qualities.sum()
    if total <= 0.0:
        return average_pool(vectors)
    order = canonical_frame_order(vectors, qualities)
    v, q = vectors[order], qualities[order]
    return (v * q[:, None]).sum(axis=0) / total


@dataclass
class NetVladParams:
    """Trainable VLAD state: centers, assignment affine, FC tail, BN."""

    centers: np.ndarray    # (clusters, d_in)
    assign_w: np.ndarray   # (clusters, d_in)
    assign_b: np.ndarray   # (clusters,)
    proj_w: np.ndarray     # (d_out, clusters * d_in)
    proj_b: np.ndarray     # (d_out,)
    bn_gamma: np.ndarray   # (d_out,)
    bn_beta: np.ndarray    # (d_out,)
    bn_mean: np.ndarray = field(default=None)   # running mean
    bn_var: np.ndarray = field(default=None)    # running variance
    bn_batches: int = 0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        d_out = self.proj_w.shape[0]
        if self.bn_mean is None:
            self.bn_mean = np.zeros(d_out)
        if self.bn_var is None:
            self.bn_var = np.ones(d_out)

    @property
    def clusters(self):
        return self.centers.shape[0]

    @property
    def d_in(self):
        return self.centers.shape[1]

    @property
    def d_out(self):
        return self.proj_w.shape[0]

    PARAM_NAMES = ("centers", "assign_w", "assign_b", "proj_w", "proj_b",
                   "bn_gamma", "bn_beta")

    def trainable(self):
        """Ordered (name, array) pairs; running BN stats are buffers."""
        return [(n, getattr(self, n)) for n in self.PARAM_NAMES]


def init_netvlad(d_in, clusters, d_out, rng):
    """Fresh parameters; centers start on the unit sphere like the frames."""
    centers = rng.normal(size=(clusters, d_in))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    assign_w = rng.normal(size=(clusters, d_in))
    assign_b = np.zeros(clusters)
    fan = clusters * d_in
    proj_w = rng.normal(size=(d_out, fan)) * np.sqrt(2.0 / (fan + d_out))
    proj_b = np.zeros(d_out)
    return NetVladParams(centers=centers, assign_w=assign_w, assign_b=assign_b,
                         proj_w=proj_w, proj_b=proj_b,
                         bn_gamma=np.ones(d_out), bn_beta=np.zeros(d_out))


def netvlad_forward(frames, params, mode="train"):
    """VLAD core -> FC -> BN for a batch of clips.

    frames : (B, K, d_in) or (K, d_in) selected frame embeddings
    mode : "train" uses batch statistics and updates the running ones;
           "infer" uses running statistics and leaves state untouched.

    Returns (out, cache) with out of shape (B, d_out) (or (d_out,) when
    the input was unbatched); cache feeds netvlad_backward.
    """
    x = np.asarray(frames, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[2] != params.d_in:
        raise ValueError(f"frame dim {x.shape[2]} != params d_in {params.d_in}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "infer" and params.bn_batches == 0:
        raise RuntimeError("inference before any training batch: "
                           "running batch-norm statistics are uninitialized")

    order = canonical_frame_order(x)
    x = np.take_along_axis(x, order[..., None], axis=1)

    logits = np.einsum("btd,kd->btk", x, params.assign_w) + params.assign_b
    logits -= logits.max(axis=2, keepdims=True)
    e = np.exp(logits)
    a = e / e.sum(axis=2, keepdims=True)          # (B, K, clusters)

    sum_a = a.sum(axis=1)                          # (B, clusters)
    v = np.einsum("btk,btd->bkd", a, x) - sum_a[:, :, None] * params.centers
    v_flat = v.reshape(x.shape[0], -1)             # (B, clusters * d_in)

    h = v_flat @ params.proj_w.T + params.proj_b   # (B, d_out)

    if mode == "train":
        mean = h.mean(axis=0)
        var = h.var(axis=0)
        if params.bn_batches == 0:
            params.bn_mean = mean.copy()
            params.bn_var = var.copy()
        else:
            m = params.bn_momentum
            params.bn_mean = m * params.bn_mean + (1.0 - m) * mean
            params.bn_var = m * params.bn_var + (1.0 - m) * var
        params.bn_batches += 1
    else:
        mean, var = params.bn_mean, params.bn_var
    inv_std = 1.0 / np.sqrt(var + params.bn_eps)
    xhat = (h - mean) * inv_std
    out = params.bn_gamma * xhat + params.bn_beta

    cache = {"x": x, "order": order, "a": a, "sum_a": sum_a,
             "v_flat": v_flat, "xhat": xhat, "inv_std": inv_std,
             "mode": mode, "single": single}
    return (out[0] if single else out), cache


def netvlad_backward(params, cache, grad_out):
    """Gradients of a scalar loss w.r.t. parameters and input frames.

    grad_out : (B, d_out) upstream gradient matching the forward output.
    Returns (grads, dframes) where grads maps parameter names to arrays
    and dframes has the shape and frame order of the forward input.
    """
    dy = np.asarray(grad_out, dtype=np.float64)
    if cache["single"]:
        dy = dy[None]
    x, a, sum_a = cache["x"], cache["a"], cache["sum_a"]
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    b = dy.shape[0]

    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * params.bn_gamma
    if cache["mode"] == "train":
        # backprop through batch mean/variance
        dh = (inv_std / b) * (b * dxhat - dxhat.sum(axis=0)
                              - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dh = dxhat * inv_std

    dproj_w = dh.T @ cache["v_flat"]
    dproj_b = dh.sum(axis=0)
    dv = (dh @ params.proj_w).reshape(b, params.clusters, params.d_in)

    dcenters = -np.einsum("bk,bkd->kd", sum_a, dv)
    da = np.einsum("bkd,btd->btk", dv, x) \
        - np.einsum("bkd,kd->bk", dv, params.centers)[:, None, :]
    dx = np.einsum("btk,bkd->btd", a, dv)

    dlogit = a * (da - (a * da).sum(axis=2, keepdims=True))
    dassign_w = np.einsum("btk,btd->kd", dlogit, x)
    dassign_b = dlogit.sum(axis=(0, 1))
    dx += np.einsum("btk,kd->btd", dlogit, params.assign_w)

    # undo the canonical frame ordering
    inv = np.argsort(cache["order"], axis=-1)
    dx = np.take_along_axis(dx, inv[..., None], axis=1)

    grads = {"centers": dcenters, "assign_w": dassign_w, "assign_b": dassign_b,
             "proj_w": dproj_w, "proj_b": dproj_b,
             "bn_gamma": dgamma, "bn_beta": dbeta}
    return grads, (dx[0] if cache["single"] else dx)
