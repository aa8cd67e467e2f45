"""Recommender scorers: inner-product decoding over fused embeddings.

Two encoders share one fusion recipe
    item:  concat(id_embed, phi(proj_v @ z_v), phi(proj_t @ z_t))
    user:  concat(id_embed, phi(proj_v @ mean_v), phi(proj_t @ mean_t))
where z_m is the item's modality feature and mean_m averages the features of
the user's training items. The concat model feeds raw features; the graph
model first smooths features over the user-item bipartite graph (one
symmetric-normalised round) and applies a trainable linear map per modality.
Perturbations are added to an item's raw feature, so under the graph model
they reach co-consumed items through the smoothing weights. User embeddings
are always built from clean features.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import DataError

CHECKPOINT_MAGIC = b"UATM"
CHECKPOINT_VERSION = 1
_KIND_CODES = {"concat": 1, "graph": 2}
_PHI_CODES = {"identity": 0, "tanh": 1}
_USER_CODES = {"shared": 0, "id_only": 1}

NEG_INF = -np.inf


@dataclass
class ModelParams:
    """All trainable parameters plus the architecture tags that shape them."""

    kind: str  # concat | graph
    phi: str  # identity | tanh
    user_content: str  # shared | id_only
    user_embeds: np.ndarray
    item_embeds: np.ndarray
    proj_v: np.ndarray
    proj_t: np.ndarray
    prop_v: np.ndarray | None = None
    prop_t: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise DataError(f"unknown model kind {self.kind!r}")
        if self.phi not in _PHI_CODES:
            raise DataError(f"unknown nonlinearity {self.phi!r}")
        if self.user_content not in _USER_CODES:
            raise DataError(f"unknown user content mode {self.user_content!r}")
        if (self.kind == "graph") != (self.prop_v is not None):
            raise DataError("propagation weights present iff kind == 'graph'")
        d_total = self.item_embeds.shape[1] + 2 * self.proj_v.shape[0]
        expect_user = d_total if self.user_content == "id_only" else self.item_embeds.shape[1]
        if self.user_embeds.shape[1] != expect_user:
            raise DataError("user embedding width inconsistent with fusion layout")
        for a in self.arrays().values():
            if not np.all(np.isfinite(a)):
                raise DataError("non-finite parameter value")

    @property
    def id_dim(self):
        return self.item_embeds.shape[1]

    @property
    def fuse_dim(self):
        return self.proj_v.shape[0]

    @property
    def embed_dim(self):
        return self.id_dim + 2 * self.fuse_dim

    def arrays(self):
        out = {"user_embeds": self.user_embeds, "item_embeds": self.item_embeds,
               "proj_v": self.proj_v, "proj_t": self.proj_t}
        if self.kind == "graph":
            out["prop_v"] = self.prop_v
            out["prop_t"] = self.prop_t
        return out

    def clone(self):
        return ModelParams(self.kind, self.phi, self.user_content,
                           self.user_embeds.copy(), self.item_embeds.copy(),
                           self.proj_v.copy(), self.proj_t.copy(),
                           None if self.prop_v is None else self.prop_v.copy(),
                           None if self.prop_t is None else self.prop_t.copy())

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.arrays()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays()[name]).tobytes())
        return h.hexdigest()


def init_params(num_users, num_items, dim_v, dim_t, *, kind="concat", phi="tanh",
                user_content="shared", id_dim=32, fuse_dim=16, seed=0):
    """Gaussian(0, 0.01) initialisation; graph propagation maps start near
    identity so the modality path is alive at step one."""
    rng = np.random.default_rng(seed)
    scale = 0.01
    d_total = id_dim + 2 * fuse_dim
    user_dim = d_total if user_content == "id_only" else id_dim
    prop_v = prop_t = None
    if kind == "graph":
        prop_v = np.eye(dim_v) + scale * rng.normal(size=(dim_v, dim_v))
        prop_t = np.eye(dim_t) + scale * rng.normal(size=(dim_t, dim_t))
    return ModelParams(
        kind, phi, user_content,
        user_embeds=scale * rng.normal(size=(num_users, user_dim)),
        item_embeds=scale * rng.normal(size=(num_items, id_dim)),
        proj_v=scale * rng.normal(size=(fuse_dim, dim_v)),
        proj_t=scale * rng.normal(size=(fuse_dim, dim_t)),
        prop_v=prop_v, prop_t=prop_t)


# ---------------------------------------------------------------------------
# dataset-side constants shared by every forward pass

class DatasetEncoding:
    """Feature constants derived from one (table, features) triple.

    For the graph model this holds the smoothed item features, the smoothing
    matrix column needed to propagate a perturbation, and per-item self
    coefficients; isolated items keep their raw feature (self coefficient 1).
    """

    def __init__(self, table, feats_v, feats_t, kind):
        if feats_v.num_items != table.num_items or feats_t.num_items != table.num_items:
            raise DataError("feature row count does not match the item catalog")
        self.table = table
        self.kind = kind
        self.raw_v = feats_v.values
        self.raw_t = feats_t.values
        if kind == "graph":
            smooth = _smoothing_matrix(table)
            isolated = table.item_counts() == 0
            self.eff_v = smooth @ self.raw_v
            self.eff_t = smooth @ self.raw_t
            self.eff_v[isolated] = self.raw_v[isolated]
            self.eff_t[isolated] = self.raw_t[isolated]
            self.self_coef = np.diag(smooth).copy()
            self.self_coef[isolated] = 1.0
            self._smooth = smooth
            self._isolated = isolated
        else:
            self.eff_v = self.raw_v
            self.eff_t = self.raw_t
            self.self_coef = np.ones(table.num_items)
            self._smooth = None
            self._isolated = None
        self.user_mean_v = _user_means(table, self.eff_v)
        self.user_mean_t = _user_means(table, self.eff_t)

    def delta_column(self, i):
        """Per-item weights of a unit perturbation on item i's raw feature."""
        col = np.zeros(self.table.num_items)
        if self._smooth is None:
            col[i] = 1.0
        elif self._isolated[i]:
            col[i] = 1.0
        else:
            col = self._smooth[:, i].copy()
            col[self._isolated] = 0.0
        return col


def _smoothing_matrix(table):
    U, I = table.num_users, table.num_items
    a_hat = np.zeros((U, I))
    deg_i = table.item_counts().astype(np.float64)
    for u in range(U):
        items = table.user_items[u]
        if items.size == 0:
            continue
        a_hat[u, items] = 1.0 / np.sqrt(items.size * deg_i[items])
    return a_hat.T @ a_hat


def _user_means(table, feats):
    out = np.zeros((table.num_users, feats.shape[1]))
    for u in range(table.num_users):
        items = table.user_items[u]
        if items.size:
            out[u] = feats[items].mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# traced forward (differentiable)

def _phi(params, x):
    return ad.tanh(x) if params.phi == "tanh" else x


@dataclass
class EncodedTriple:
    h_u: ad.Tensor
    h_plus: ad.Tensor
    h_minus: ad.Tensor


class Forward:
    """One forward context: parameter nodes plus dataset constants.

    With ``trainable=True`` the parameters become graph leaves and
    ``param_leaves()`` lists them for ``ad.grad``; otherwise they are
    constants and only perturbations are differentiable.
    """

    def __init__(self, params, enc, trainable=False):
        self.params = params
        self.enc = enc
        wrap = ad.leaf if trainable else ad.constant
        self.nodes = {name: wrap(arr) for name, arr in params.arrays().items()}

    def param_names(self):
        return sorted(self.nodes)

    def param_leaves(self):
        return [self.nodes[n] for n in self.param_names()]

    def _modal_transform(self, x, modality):
        """Apply (optional) propagation weights then the shared projection."""
        if x.ndim == 1:
            if self.params.kind == "graph":
                x = ad.matvec(self.nodes[f"prop_{modality}"], x)
            return ad.matvec(self.nodes[f"proj_{modality}"], x)
        if self.params.kind == "graph":
            x = ad.matmul(x, ad.transpose(self.nodes[f"prop_{modality}"]))
        return ad.matmul(x, ad.transpose(self.nodes[f"proj_{modality}"]))

    # vector path -----------------------------------------------------------

    def item_embedding(self, i, delta_v=None, delta_t=None):
        e = _row(self.nodes["item_embeds"], i)
        zv = ad.constant(self.enc.eff_v[i])
        zt = ad.constant(self.enc.eff_t[i])
        if delta_v is not None:
            zv = ad.add(zv, ad.mul(ad.constant(self.enc.self_coef[i]), _as_tensor(delta_v)))
        if delta_t is not None:
            zt = ad.add(zt, ad.mul(ad.constant(self.enc.self_coef[i]), _as_tensor(delta_t)))
        cv = _phi(self.params, self._modal_transform(zv, "v"))
        ct = _phi(self.params, self._modal_transform(zt, "t"))
        return ad.concat([e, cv, ct])

    def user_embedding(self, u):
        e = _row(self.nodes["user_embeds"], u)
        if self.params.user_content == "id_only":
            return e
        cv = _phi(self.params, self._modal_transform(ad.constant(self.enc.user_mean_v[u]), "v"))
        ct = _phi(self.params, self._modal_transform(ad.constant(self.enc.user_mean_t[u]), "t"))
        return ad.concat([e, cv, ct])

    # batched path ----------------------------------------------------------

    def item_embedding_batch(self, idx, delta_v=None, delta_t=None):
        idx = np.asarray(idx, dtype=np.int64)
        e = ad.take_rows(self.nodes["item_embeds"], idx)
        zv = ad.constant(self.enc.eff_v[idx])
        zt = ad.constant(self.enc.eff_t[idx])
        if delta_v is not None:
            zv = ad.add(zv, _scale_rows(delta_v, self.enc.self_coef[idx]))
        if delta_t is not None:
            zt = ad.add(zt, _scale_rows(delta_t, self.enc.self_coef[idx]))
        cv = _phi(self.params, self._modal_transform(zv, "v"))
        ct = _phi(self.params, self._modal_transform(zt, "t"))
        return ad.hstack([e, cv, ct])

    def user_embedding_batch(self, users):
        users = np.asarray(users, dtype=np.int64)
        e = ad.take_rows(self.nodes["user_embeds"], users)
        if self.params.user_content == "id_only":
            return e
        cv = _phi(self.params, self._modal_transform(ad.constant(self.enc.user_mean_v[users]), "v"))
        ct = _phi(self.params, self._modal_transform(ad.constant(self.enc.user_mean_t[users]), "t"))
        return ad.hstack([e, cv, ct])


def _row(mat_node, i):
    # sum_cols of a single gathered row is that row as a vector, with the
    # scatter-add adjoint landing on the right matrix row
    return ad.sum_cols(ad.take_rows(mat_node, [int(i)]))


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.constant(np.asarray(x, dtype=np.float64))


def _scale_rows(delta, coefs):
    """Multiply each row of a (B, d) tensor by the matching scalar."""
    delta = _as_tensor(delta)
    scale = np.repeat(np.asarray(coefs, dtype=np.float64)[:, None], delta.shape[1], axis=1)
    return ad.mul(delta, ad.constant(scale))


def encode(params, enc, u, i_pos, i_neg, perturb=None, forward=None):
    """Encode one (user, positive, negative) triple; differentiable in any
    perturbation tensors supplied as {item_id: (delta_v, delta_t)}."""
    fw = forward if forward is not None else Forward(params, enc)
    perturb = perturb or {}

    def deltas(i):
        if i in perturb:
            dv, dt = perturb[i]
            _check_delta(dv, enc.raw_v.shape[1], "v")
            _check_delta(dt, enc.raw_t.shape[1], "t")
            return dv, dt
        return None, None

    dvp, dtp = deltas(i_pos)
    dvn, dtn = deltas(i_neg)
    return EncodedTriple(
        h_u=fw.user_embedding(u),
        h_plus=fw.item_embedding(i_pos, dvp, dtp),
        h_minus=fw.item_embedding(i_neg, dvn, dtn))


def _check_delta(delta, dim, tag):
    if delta is None:
        return
    shape = delta.shape if isinstance(delta, ad.Tensor) else np.asarray(delta).shape
    if shape != (dim,):
        raise ad.ShapeError(f"delta_{tag} has shape {shape}, feature dim is {dim}")


def score(h_u, h_i):
    """Inner-product decoder."""
    if h_u.shape != h_i.shape:
        raise ad.ShapeError(f"score dims differ: {h_u.shape} vs {h_i.shape}")
    return ad.dot(h_u, h_i)


# ---------------------------------------------------------------------------
# fast numpy path (evaluation / ranking)

class Scorer:
    """Vectorised clean-embedding tables for ranking and metrics."""

    def __init__(self, params, enc):
        self.params = params
        self.enc = enc
        self.item_matrix = _numpy_items(params, enc)
        self.user_matrix = _numpy_users(params, enc)
        self._scores = None

    def scores(self):
        if self._scores is None:
            self._scores = self.user_matrix @ self.item_matrix.T
        return self._scores

    def perturbed_rows(self, i, delta_v, delta_t):
        """(row indices, replacement embedding rows) after perturbing item i."""
        col = self.enc.delta_column(i)
        affected = np.nonzero(col)[0]
        if affected.size == 0:
            return affected, np.zeros((0, self.item_matrix.shape[1]))
        zv = self.enc.eff_v[affected] + np.outer(col[affected], delta_v)
        zt = self.enc.eff_t[affected] + np.outer(col[affected], delta_t)
        rows = _fuse_items(self.params, self.params_arrays(), affected, zv, zt)
        return affected, rows

    def params_arrays(self):
        return self.params.arrays()


def _apply_phi(params, x):
    return np.tanh(x) if params.phi == "tanh" else x


def _modal_np(params, arrays, x, modality):
    if params.kind == "graph":
        x = x @ arrays[f"prop_{modality}"].T
    return x @ arrays[f"proj_{modality}"].T


def _fuse_items(params, arrays, idx, zv, zt):
    e = arrays["item_embeds"][idx]
    cv = _apply_phi(params, _modal_np(params, arrays, zv, "v"))
    ct = _apply_phi(params, _modal_np(params, arrays, zt, "t"))
    return np.concatenate([e, cv, ct], axis=1)


def _numpy_items(params, enc):
    idx = np.arange(enc.table.num_items)
    return _fuse_items(params, params.arrays(), idx, enc.eff_v, enc.eff_t)


def _numpy_users(params, enc):
    arrays = params.arrays()
    e = arrays["user_embeds"]
    if params.user_content == "id_only":
        return e.copy()
    cv = _apply_phi(params, _modal_np(params, arrays, enc.user_mean_v, "v"))
    ct = _apply_phi(params, _modal_np(params, arrays, enc.user_mean_t, "t"))
    return np.concatenate([e, cv, ct], axis=1)


def rank_all(params, enc, u, overrides=None, exclude_seen=True, scorer=None):
    """Score every item for one user; seen training items get -inf when
    exclude_seen is set. ``overrides`` maps item -> (delta_v, delta_t)."""
    sc = scorer if scorer is not None else Scorer(params, enc)
    item_matrix = sc.item_matrix
    if overrides:
        item_matrix = item_matrix.copy()
        for i, (dv, dt) in overrides.items():
            rows, repl = sc.perturbed_rows(i, np.asarray(dv, float), np.asarray(dt, float))
            item_matrix[rows] = repl
    out = item_matrix @ sc.user_matrix[u]
    if exclude_seen:
        out = out.copy()
        out[enc.table.user_items[u]] = NEG_INF
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<B", _KIND_CODES[params.kind]))
        meta = np.array([[_PHI_CODES[params.phi], _USER_CODES[params.user_content]]],
                        dtype=np.float64)
        blocks = {"meta": meta, **params.arrays()}
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype=np.float64)
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (kind_code,) = struct.unpack("<B", fh.read(1))
        blocks = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            (name_len,) = struct.unpack("<H", head)
            name = fh.read(name_len).decode()
            rows, cols = struct.unpack("<QQ", fh.read(16))
            payload = fh.read(rows * cols * 8)
            if len(payload) != rows * cols * 8:
                raise DataError(f"{path}: truncated block {name!r}")
            blocks[name] = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    kinds = {v: k for k, v in _KIND_CODES.items()}
    phis = {v: k for k, v in _PHI_CODES.items()}
    users = {v: k for k, v in _USER_CODES.items()}
    try:
        kind = kinds[kind_code]
        meta = blocks.pop("meta")
        return ModelParams(kind, phis[int(meta[0, 0])], users[int(meta[0, 1])],
                           blocks["user_embeds"], blocks["item_embeds"],
                           blocks["proj_v"], blocks["proj_t"],
                           blocks.get("prop_v"), blocks.get("prop_t"))
    except KeyError as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from exc
