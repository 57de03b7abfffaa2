"""Multi-modal fusion model and its training loop.

The clip-level features of the four modalities are mapped into a shared
D-dimensional space and stacked into a feature map X with six slots
(three face aggregates, head, body, audio). Attention fusion projects X
to a low-dimensional F = W_f X, forms the Gram matrix Z = F^T F, column-
softmaxes it into an attention matrix Y, and adds the attended features
back: O = X + gamma * X Y. A feature that agrees with the other slots
is amplified; an inconsistent or missing one is smoothed over by the
rest, so zeroed slots still receive a usable mixture. O is flattened
column-major (slot-contiguous) and fed to a softmax classifier.

All gradients are derived by hand and verified against central finite
differences. Training is plain mini-batch SGD with momentum and a
cosine learning-rate decay; given equal seeds two runs produce
bit-identical parameters.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .aggregate import (NetVladParams, average_pool, init_netvlad,
                        netvlad_backward, netvlad_forward,
                        quality_weighted_pool)
from .data import DISTRACTOR, MODALITIES
from .frames import DEFAULT_TOP_K, select_top_k
from .numerics import derive_seed, make_rng

SLOTS = ("face_vlad", "face_avg", "face_qw", "head", "body", "audio")
SLOT_MODALITY = {"face_vlad": "face", "face_avg": "face", "face_qw": "face",
                 "head": "head", "body": "body", "audio": "audio"}
NUM_SLOTS = len(SLOTS)

CHECKPOINT_MAGIC = b"MMFUSE01"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture knobs; defaults follow the reference configuration."""

    feature_dim: int = 512      # D, shared mapped dimension
    attn_dim: int = 64          # projected dimension for the Gram attention
    gamma: float = 0.05         # attention strength
    use_mma: bool = True
    use_netvlad: bool = True
    modalities: tuple = ("face", "head", "body", "audio")
    frames_per_clip: int = DEFAULT_TOP_K
    netvlad_clusters: int = 8
    netvlad_dim: int = 512
    hidden_dim: int = 0         # 0 = single affine classifier
    select_seed: int = 0        # base seed for per-clip frame resampling

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities: {sorted(unknown)}")
        if not self.modalities:
            raise ValueError("at least one modality required")

    def to_dict(self):
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def active_slots(self):
        return np.array([SLOT_MODALITY[s] in self.modalities for s in SLOTS])


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    lr_schedule: str = "cosine"   # "cosine" | "constant"
    momentum: float = 0.9
    weight_decay: float = 0.0
    train_gamma: bool = False
    seed: int = 0

    def validate(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModalityFeatureMap:
    """D x 6 mapped feature map plus a per-slot presence mask."""

    x: np.ndarray     # (D, 6)
    mask: np.ndarray  # (6,) bool; absent slots are exactly zero columns


# --------------------------------------------------------------------------
# feature table: per-clip model inputs, precomputed once per dataset
# --------------------------------------------------------------------------

class FeatureTable:
    """Selected frames and pooled clip features for every clip."""

    def __init__(self, clip_ids, labels, face_frames, face_quals, pooled,
                 mask, dims):
        self.clip_ids = list(clip_ids)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.face_frames = face_frames          # (N, K, d_face)
        self.face_quals = face_quals            # (N, K)
        self.pooled = pooled                    # slot -> (N, d) for non-vlad slots
        self.mask = mask                        # (N, 6) float 0/1, data presence
        self.dims = dims                        # modality -> raw dim
        self.index = {cid: i for i, cid in enumerate(self.clip_ids)}

    def __len__(self):
        return len(self.clip_ids)

    def rows_for(self, clip_ids):
        try:
            return np.array([self.index[c] for c in clip_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"clip {exc.args[0]!r} not in feature table") from exc


def build_feature_table(clips, frames_per_clip=DEFAULT_TOP_K, select_seed=0):
    """Run frame selection and pooling once for every clip."""
    n, k = len(clips), frames_per_clip
    dims = {}
    for mod in MODALITIES:
        dims[mod] = next((c.track(mod).dim for c in clips
                          if c.track(mod) is not None), 1)

    face_frames = np.zeros((n, k, dims["face"]))
    face_quals = np.zeros((n, k))
    pooled = {"face_avg": np.zeros((n, dims["face"])),
              "face_qw": np.zeros((n, dims["face"])),
              "head": np.zeros((n, dims["head"])),
              "body": np.zeros((n, dims["body"])),
              "audio": np.zeros((n, dims["audio"]))}
    mask = np.zeros((n, NUM_SLOTS))
    labels = np.empty(n, dtype=np.int64)

    for i, clip in enumerate(clips):
        labels[i] = clip.identity
        face = clip.track("face")
        if face is not None and face.n_frames:
            rng = make_rng(derive_seed(select_seed, "select", clip.clip_id, "face"))
            sel = select_top_k(face.vectors, face.qualities, k, rng, "face")
            face_frames[i] = sel.vectors
            face_quals[i] = sel.qualities
            pooled["face_avg"][i] = average_pool(sel)
            pooled["face_qw"][i] = quality_weighted_pool(sel)
            mask[i, :3] = 1.0
        for slot, mod in (("head", "head"), ("body", "body")):
            tr = clip.track(mod)
            if tr is not None and tr.n_frames:
                rng = make_rng(derive_seed(select_seed, "select", clip.clip_id, mod))
                sel = select_top_k(tr.vectors, tr.qualities, k, rng, mod)
                pooled[slot][i] = average_pool(sel)
                mask[i, SLOTS.index(slot)] = 1.0
        audio = clip.track("audio")
        if audio is not None and audio.n_frames:
            # audio is one embedding per clip; no selection
            pooled["audio"][i] = average_pool(audio.vectors)
            mask[i, SLOTS.index("audio")] = 1.0

    return FeatureTable([c.clip_id for c in clips], labels, face_frames,
                        face_quals, pooled, mask, dims)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class FusionModel:
    """All trainable state: mappings, VLAD layer, attention, classifier."""

    def __init__(self, cfg, num_classes, raw_dims, params, vlad,
                 train_seed=0):
        self.cfg = cfg
        self.num_classes = num_classes
        self.raw_dims = dict(raw_dims)
        self.params = params          # name -> float64 array
        self.vlad = vlad              # NetVladParams or None
        self.train_seed = train_seed
        self.slot_active = cfg.active_slots()

    @property
    def uses_netvlad(self):
        return self.cfg.use_netvlad and "face" in self.cfg.modalities

    def slot_input_dim(self, slot):
        if slot == "face_vlad" and self.uses_netvlad:
            return self.cfg.netvlad_dim
        return self.raw_dims[SLOT_MODALITY[slot]]

    def parameters(self):
        """Stable ordered (name, array) pairs, VLAD included."""
        items = [("gamma", self.params["gamma"]), ("w_f", self.params["w_f"])]
        for slot in SLOTS:
            wname = f"map_{slot}_w"
            if wname in self.params:
                items.append((wname, self.params[wname]))
                items.append((f"map_{slot}_b", self.params[f"map_{slot}_b"]))
        if self.vlad is not None:
            items.extend((f"vlad_{n}", a) for n, a in self.vlad.trainable())
        if "hid_w" in self.params:
            items.append(("hid_w", self.params["hid_w"]))
            items.append(("hid_b", self.params["hid_b"]))
        items.append(("cls_w", self.params["cls_w"]))
        items.append(("cls_b", self.params["cls_b"]))
        return items

    def param_array(self, name):
        if name.startswith("vlad_"):
            return getattr(self.vlad, name[5:])
        return self.params[name]

    def pack(self, names=None):
        names = names or [n for n, _ in self.parameters()]
        return np.concatenate([np.atleast_1d(self.param_array(n)).ravel()
                               for n in names])

    def unpack(self, flat, names=None):
        names = names or [n for n, _ in self.parameters()]
        i = 0
        for n in names:
            a = self.param_array(n)
            size = a.size
            a[...] = np.asarray(flat[i:i + size]).reshape(a.shape)
            i += size
        if i != len(flat):
            raise ValueError("flat vector length mismatch")


def init_model(cfg, num_classes, raw_dims, seed=0):
    """Fresh model. Classifier starts at zero so the initial prediction is
    uniform and the initial cross-entropy is exactly log(C)."""
    rng = make_rng(derive_seed(seed, "init"))
    d = cfg.feature_dim
    # norm-preserving projection: Gram entries keep the scale of the
    # feature similarities instead of shrinking by attn_dim / feature_dim
    params = {"gamma": np.array(float(cfg.gamma)),
              "w_f": rng.normal(size=(cfg.attn_dim, d)) / math.sqrt(cfg.attn_dim)}

    vlad = None
    model = FusionModel(cfg, num_classes, raw_dims, params, None, seed)
    if model.uses_netvlad:
        vlad = init_netvlad(raw_dims["face"], cfg.netvlad_clusters,
                            cfg.netvlad_dim, rng)
        model.vlad = vlad

    for s, slot in enumerate(SLOTS):
        if not model.slot_active[s]:
            continue
        d_in = model.slot_input_dim(slot)
        params[f"map_{slot}_w"] = rng.normal(size=(d, d_in)) / math.sqrt(d_in)
        params[f"map_{slot}_b"] = np.zeros(d)

    cls_in = d * NUM_SLOTS
    if cfg.hidden_dim > 0:
        params["hid_w"] = rng.normal(size=(cfg.hidden_dim, cls_in)) \
            * math.sqrt(2.0 / cls_in)
        params["hid_b"] = np.zeros(cfg.hidden_dim)
        cls_in = cfg.hidden_dim
    params["cls_w"] = np.zeros((num_classes, cls_in))
    params["cls_b"] = np.zeros(num_classes)
    return model


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _row_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mma_attention(x, w_f):
    """Attention matrix Y: column softmax of the Gram matrix of W_f X."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    f = np.einsum("ed,bdm->bem", w_f, xb)
    if not np.all(np.isfinite(f)):
        raise ValueError("attention projection produced non-finite values")
    z = np.einsum("bem,ben->bmn", f, f)
    if not np.all(np.isfinite(z)):
        raise ValueError("gram matrix is non-finite")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return y[0] if single else y


def mma_fuse(x, w_f, gamma):
    """Fused map O = X + gamma * X Y (Y from mma_attention)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    y = mma_attention(xb, w_f)
    o = xb + float(gamma) * np.einsum("bdm,bmn->bdn", xb, y)
    if not np.all(np.isfinite(o)):
        raise ValueError("fused output is non-finite")
    return o[0] if single else o


def _mma_forward(xb, w_f, gamma):
    f = np.einsum("ed,bdm->bem", w_f, xb)
    z = np.einsum("bem,ben->bmn", f, f)
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    y = e / e.sum(axis=1, keepdims=True)
    xy = np.einsum("bdm,bmn->bdn", xb, y)
    o = xb + gamma * xy
    return o, {"f": f, "y": y, "xy": xy, "x": xb}


def _mma_backward(cache, w_f, gamma, d_o):
    f, y, xb = cache["f"], cache["y"], cache["x"]
    dgamma = float(np.sum(d_o * cache["xy"]))
    dy = gamma * np.einsum("bdm,bdn->bmn", xb, d_o)
    dz = y * (dy - (y * dy).sum(axis=1, keepdims=True))
    df = np.einsum("bem,bmn->ben", f, dz + dz.transpose(0, 2, 1))
    dx = d_o + gamma * np.einsum("bdn,bmn->bdm", d_o, y) \
        + np.einsum("ed,bem->bdm", w_f, df)
    dw_f = np.einsum("bem,bdm->ed", df, xb)
    return dx, dw_f, dgamma


def map_features(clip_feats, model):
    """Map per-slot clip features into the shared space.

    clip_feats : dict mapping slot names (see SLOTS) to vectors; missing
    or None entries become exactly-zero columns with a cleared mask bit.
    """
    d = model.cfg.feature_dim
    x = np.zeros((d, NUM_SLOTS))
    mask = np.zeros(NUM_SLOTS, dtype=bool)
    unknown = set(clip_feats) - set(SLOTS)
    if unknown:
        raise ValueError(f"unknown feature slots: {sorted(unknown)}")
    for s, slot in enumerate(SLOTS):
        feat = clip_feats.get(slot)
        if feat is None or not model.slot_active[s]:
            continue
        feat = np.asarray(feat, dtype=np.float64)
        expect = model.slot_input_dim(slot)
        if feat.shape != (expect,):
            raise ValueError(f"{slot}: feature dim {feat.shape} != ({expect},)")
        x[:, s] = model.params[f"map_{slot}_w"] @ feat \
            + model.params[f"map_{slot}_b"]
        mask[s] = True
    return ModalityFeatureMap(x=x, mask=mask)


def _slot_inputs(model, table, rows):
    """Per-slot raw inputs and the effective presence mask for `rows`."""
    inputs = {}
    if model.uses_netvlad:
        inputs["face_vlad"] = table.face_frames[rows]
    else:
        inputs["face_vlad"] = table.pooled["face_avg"][rows]
    for slot in SLOTS[1:]:
        inputs[slot] = table.pooled[slot][rows]
    mask = table.mask[rows] * model.slot_active[None, :].astype(float)
    return inputs, mask


def forward_batch(model, inputs, mask, mode="infer"):
    """Forward pass over a batch of slot inputs. Returns (probs, cache)."""
    b = mask.shape[0]
    d = model.cfg.feature_dim
    x = np.zeros((b, d, NUM_SLOTS))
    vlad_cache = None
    slot_in = {}
    for s, slot in enumerate(SLOTS):
        if not model.slot_active[s]:
            continue
        u = inputs[slot]
        if slot == "face_vlad" and model.uses_netvlad:
            u, vlad_cache = netvlad_forward(u, model.vlad, mode)
        slot_in[slot] = u
        w, bias = model.params[f"map_{slot}_w"], model.params[f"map_{slot}_b"]
        x[:, :, s] = (u @ w.T + bias) * mask[:, s, None]

    if model.cfg.use_mma:
        o, mma_cache = _mma_forward(x, model.params["w_f"],
                                    float(model.params["gamma"]))
    else:
        o, mma_cache = x, None

    v = o.transpose(0, 2, 1).reshape(b, NUM_SLOTS * d)   # slot-contiguous
    if "hid_w" in model.params:
        pre = v @ model.params["hid_w"].T + model.params["hid_b"]
        hid = np.maximum(pre, 0.0)
        logits = hid @ model.params["cls_w"].T + model.params["cls_b"]
    else:
        pre = hid = None
        logits = v @ model.params["cls_w"].T + model.params["cls_b"]
    probs = _row_softmax(logits)

    cache = {"x": x, "mask": mask, "slot_in": slot_in, "vlad": vlad_cache,
             "mma": mma_cache, "v": v, "pre": pre, "hid": hid,
             "probs": probs}
    return probs, cache


def backward_batch(model, cache, labels):
    """Mean cross-entropy gradients for every trainable parameter."""
    probs, v = cache["probs"], cache["v"]
    b = probs.shape[0]
    d = model.cfg.feature_dim

    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b

    grads = {}
    if "hid_w" in model.params:
        grads["cls_w"] = dlogits.T @ cache["hid"]
        grads["cls_b"] = dlogits.sum(axis=0)
        dhid = dlogits @ model.params["cls_w"]
        dpre = dhid * (cache["pre"] > 0)
        grads["hid_w"] = dpre.T @ v
        grads["hid_b"] = dpre.sum(axis=0)
        dv = dpre @ model.params["hid_w"]
    else:
        grads["cls_w"] = dlogits.T @ v
        grads["cls_b"] = dlogits.sum(axis=0)
        dv = dlogits @ model.params["cls_w"]

    d_o = dv.reshape(b, NUM_SLOTS, d).transpose(0, 2, 1)

    if model.cfg.use_mma:
        dx, dw_f, dgamma = _mma_backward(cache["mma"], model.params["w_f"],
                                         float(model.params["gamma"]), d_o)
        grads["w_f"] = dw_f
        grads["gamma"] = np.array(dgamma)
    else:
        dx = d_o
        grads["w_f"] = np.zeros_like(model.params["w_f"])
        grads["gamma"] = np.array(0.0)

    mask = cache["mask"]
    for s, slot in enumerate(SLOTS):
        if not model.slot_active[s]:
            continue
        dxs = dx[:, :, s] * mask[:, s, None]
        u = cache["slot_in"][slot]
        grads[f"map_{slot}_w"] = dxs.T @ u
        grads[f"map_{slot}_b"] = dxs.sum(axis=0)
        if slot == "face_vlad" and model.uses_netvlad:
            du = dxs @ model.params[f"map_{slot}_w"]
            vgrads, _ = netvlad_backward(model.vlad, cache["vlad"], du)
            for n, g in vgrads.items():
                grads[f"vlad_{n}"] = g
    return grads


def batch_loss(model, inputs, mask, labels, mode="train"):
    """(loss, accuracy, grads, cache) for one mini-batch."""
    probs, cache = forward_batch(model, inputs, mask, mode=mode)
    b = labels.shape[0]
    p_true = probs[np.arange(b), labels]
    loss = float(-np.log(np.maximum(p_true, 1e-300)).mean())
    acc = float((probs.argmax(axis=1) == labels).mean())
    grads = backward_batch(model, cache, labels)
    return loss, acc, grads, cache


def classify(fused, model):
    """Probability vector over identities for one fused feature map.

    Accepts a ModalityFeatureMap or a raw (D, 6) matrix; flattens it
    column-major (slot-contiguous) and applies the classifier head.
    """
    o = fused.x if isinstance(fused, ModalityFeatureMap) else np.asarray(fused)
    v = o.T.reshape(1, -1)
    if "hid_w" in model.params:
        h = np.maximum(v @ model.params["hid_w"].T + model.params["hid_b"], 0.0)
        logits = h @ model.params["cls_w"].T + model.params["cls_b"]
    else:
        logits = v @ model.params["cls_w"].T + model.params["cls_b"]
    return _row_softmax(logits)[0]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

_DECAYED = ("map_", "cls_w", "hid_w", "w_f", "vlad_proj_w", "vlad_assign_w")


def _decayed(name):
    if not name.endswith("_b"):
        return any(name.startswith(p) or name == p for p in _DECAYED)
    return False


def train(clips, split, model_cfg=None, train_cfg=None, table=None,
          log_fn=None):
    """Train a fusion model on the train split.

    Returns (model, history) where history is one dict per optimizer
    step (step, epoch, loss, accuracy, lr) plus a final summary entry.
    log_fn, when given, is called with each history dict as it is made.
    """
    model_cfg = model_cfg or ModelConfig()
    train_cfg = (train_cfg or TrainConfig()).validate()
    if table is None:
        table = build_feature_table(clips, model_cfg.frames_per_clip,
                                    model_cfg.select_seed)
    if not split.train:
        raise ValueError("train split is empty")
    rows = table.rows_for(split.train)
    labels = table.labels[rows]
    if np.any(labels == DISTRACTOR):
        raise ValueError("train split contains distractor clips")

    model = init_model(model_cfg, split.num_identities, table.dims,
                       seed=train_cfg.seed)
    velocity = {n: np.zeros_like(np.atleast_1d(a))
                for n, a in model.parameters()}

    n = rows.size
    bs = min(train_cfg.batch_size, n)
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = steps_per_epoch * train_cfg.epochs
    history = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = make_rng(derive_seed(train_cfg.seed, "order", epoch)).permutation(n)
        for start in range(0, n, bs):
            sel = rows[order[start:start + bs]]
            inputs, mask = _slot_inputs(model, table, sel)
            loss, acc, grads, _ = batch_loss(model, inputs, mask,
                                             table.labels[sel], mode="train")
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at step {step}")

            if train_cfg.lr_schedule == "cosine":
                lr = 0.5 * train_cfg.learning_rate \
                    * (1.0 + math.cos(math.pi * step / max(1, total_steps)))
            else:
                lr = train_cfg.learning_rate
            for name, p in model.parameters():
                if name == "gamma" and not train_cfg.train_gamma:
                    continue
                g = grads[name]
                if train_cfg.weight_decay > 0 and _decayed(name):
                    g = g + train_cfg.weight_decay * p
                vel = velocity[name]
                vel *= train_cfg.momentum
                vel -= lr * np.atleast_1d(g)
                p += vel.reshape(p.shape) if p.ndim else vel[0]

            entry = {"step": step, "epoch": epoch, "loss": loss,
                     "accuracy": acc, "lr": lr}
            history.append(entry)
            if log_fn:
                log_fn(entry)
            step += 1

    # final full-train metrics in infer mode
    f_loss, f_acc = _split_metrics(model, table, rows)
    final = {"step": step, "event": "final", "loss": f_loss, "accuracy": f_acc}
    history.append(final)
    if log_fn:
        log_fn(final)
    return model, history


def _split_metrics(model, table, rows, chunk=512):
    losses, hits, total = 0.0, 0, 0
    for start in range(0, rows.size, chunk):
        sel = rows[start:start + chunk]
        inputs, mask = _slot_inputs(model, table, sel)
        probs, _ = forward_batch(model, inputs, mask, mode="infer")
        y = table.labels[sel]
        p_true = np.maximum(probs[np.arange(sel.size), y], 1e-300)
        losses += float(-np.log(p_true).sum())
        hits += int((probs.argmax(axis=1) == y).sum())
        total += sel.size
    return losses / total, hits / total


def predict_proba(model, table, rows=None, chunk=512):
    """Identity probabilities for the given table rows (infer mode)."""
    if rows is None:
        rows = np.arange(len(table))
    out = np.empty((rows.size, model.num_classes))
    for start in range(0, rows.size, chunk):
        sel = rows[start:start + chunk]
        inputs, mask = _slot_inputs(model, table, sel)
        probs, _ = forward_batch(model, inputs, mask, mode="infer")
        out[start:start + sel.size] = probs
    return out


def ensemble_predict(models, table, rows=None, chunk=512):
    """Element-wise sum of the member probability vectors (no renorm).

    The summed scores rank clips exactly like the average would; they are
    intentionally not renormalized.
    """
    if not models:
        raise ValueError("no models to ensemble")
    classes = {m.num_classes for m in models}
    if len(classes) != 1:
        raise ValueError(f"ensemble members disagree on vocabulary: {sorted(classes)}")
    total = None
    for m in models:
        p = predict_proba(m, table, rows, chunk)
        total = p if total is None else total + p
    return total


def average_attention(model, table, rows=None, chunk=512):
    """Mean attention matrix Y over the given rows (diagnostic)."""
    if not model.cfg.use_mma:
        raise ValueError("model was built without the attention module")
    if rows is None:
        rows = np.arange(len(table))
    acc = np.zeros((NUM_SLOTS, NUM_SLOTS))
    for start in range(0, rows.size, chunk):
        sel = rows[start:start + chunk]
        inputs, mask = _slot_inputs(model, table, sel)
        _, cache = forward_batch(model, inputs, mask, mode="infer")
        acc += cache["mma"]["y"].sum(axis=0)
    return acc / rows.size


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_model(model, path):
    """Binary checkpoint (header + little-endian float64 parameters) plus
    a JSON sidecar `<path>.json` with shapes and configuration."""
    names = [n for n, _ in model.parameters()]
    buffers = []
    if model.vlad is not None:
        buffers = [("vlad_bn_mean", model.vlad.bn_mean),
                   ("vlad_bn_var", model.vlad.bn_var)]
    arrays = [(n, np.atleast_1d(model.param_array(n))) for n in names] + \
        [(n, b) for n, b in buffers]

    flat = np.concatenate([a.ravel() for _, a in arrays]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, 0))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())

    sidecar = {"format_version": CHECKPOINT_VERSION,
               "model_config": model.cfg.to_dict(),
               "num_classes": model.num_classes,
               "raw_dims": model.raw_dims,
               "train_seed": model.train_seed,
               "entries": [{"name": n, "shape": list(a.shape)}
                           for n, a in arrays],
               "bn_batches": model.vlad.bn_batches if model.vlad else 0}
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path):
    sidecar_path = path + ".json"
    if not os.path.exists(sidecar_path):
        raise ValueError(f"missing checkpoint sidecar {sidecar_path}")
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a fusion checkpoint")
        version, _ = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        flat = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)

    cfg = ModelConfig.from_dict(sidecar["model_config"])
    model = init_model(cfg, sidecar["num_classes"], sidecar["raw_dims"],
                       seed=sidecar.get("train_seed", 0))
    model.train_seed = sidecar.get("train_seed", 0)

    i = 0
    for entry in sidecar["entries"]:
        name, shape = entry["name"], tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = flat[i:i + size]
        if chunk.size != size:
            raise ValueError(f"{path}: truncated checkpoint at {name}")
        if name in ("vlad_bn_mean", "vlad_bn_var"):
            setattr(model.vlad, name[5:], chunk.reshape(shape).copy())
        else:
            a = model.param_array(name)
            if a.shape != shape and not (a.ndim == 0 and shape == (1,)):
                raise ValueError(f"{path}: shape mismatch for {name}")
            a[...] = chunk.reshape(a.shape)
        i += size
    if model.vlad is not None:
        model.vlad.bn_batches = int(sidecar.get("bn_batches", 0))
    return model
