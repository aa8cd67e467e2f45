"""Interaction tables, per-item modality feature matrices, synthetic data.

File formats:
  interactions  UTF-8 TSV, one ``user<TAB>item`` per line, '#' lines ignored
  features      binary little-endian: magic "MMFE", version u32=1,
                rows u64, cols u64, then rows*cols float64 row-major
  id sidecars   TSV ``raw_id<TAB>dense_id`` (written when ids are remapped)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FEATURE_MAGIC = b"MMFE"
FEATURE_VERSION = 1


class DataError(Exception):
    """Problem with input data files or dataset construction."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class DatasetStats:
    num_users: int
    num_items: int
    num_interactions: int
    sparsity_pct: float

    @staticmethod
    def compute(num_users, num_items, num_interactions):
        density = num_interactions / (num_users * num_items)
        return DatasetStats(num_users, num_items, num_interactions,
                            (1.0 - density) * 100.0)


class InteractionTable:
    """Sparse implicit-feedback matrix as per-user sorted item-id arrays.

    Immutable after construction; ``split_leave_one_out`` returns a new table
    with one held-out item per eligible user recorded in ``holdout`` (-1 for
    users without one).
    """

    def __init__(self, num_users, num_items, user_items, holdout=None):
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        items = []
        for u, arr in enumerate(user_items):
            a = np.asarray(arr, dtype=np.int64)
            a = np.unique(a)
            if a.size and (a[0] < 0 or a[-1] >= self.num_items):
                raise DataError(f"user {u} holds an item id outside [0, {self.num_items})")
            a.flags.writeable = False
            items.append(a)
        if len(items) != self.num_users:
            raise DataError("user list count does not match num_users")
        self.user_items = tuple(items)
        if holdout is None:
            holdout = np.full(self.num_users, -1, dtype=np.int64)
        self.holdout = np.asarray(holdout, dtype=np.int64)
        self.holdout.flags.writeable = False
        self._user_sets = None

    @property
    def num_interactions(self):
        return int(sum(a.size for a in self.user_items))

    def training_items(self, u):
        return self.user_items[u]

    def user_set(self, u):
        if self._user_sets is None:
            self._user_sets = [set(a.tolist()) for a in self.user_items]
        return self._user_sets[u]

    def has(self, u, i):
        return i in self.user_set(u)

    def item_counts(self):
        counts = np.zeros(self.num_items, dtype=np.int64)
        for a in self.user_items:
            np.add.at(counts, a, 1)
        return counts

    def stats(self):
        return DatasetStats.compute(self.num_users, self.num_items, self.num_interactions)

    def full_item_set(self, u):
        """Training items plus the holdout, i.e. the pre-split interactions."""
        s = set(self.user_items[u].tolist())
        if self.holdout[u] >= 0:
            s.add(int(self.holdout[u]))
        return s


@dataclass(frozen=True)
class FeatureMatrix:
    modality: str  # "v" or "t"
    values: np.ndarray  # items x dim, float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DataError("feature matrix must be 2-d")
        if not np.all(np.isfinite(v)):
            raise DataError("feature matrix contains non-finite values")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def num_items(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def row(self, i):
        return self.values[i]


# ---------------------------------------------------------------------------
# interaction TSV

def load_interactions(path):
    """Parse a user<TAB>item TSV into an InteractionTable.

    Duplicate pairs collapse to one interaction. Non-integer ids are densely
    remapped in first-appearance order and the mapping is persisted next to
    the input as ``<path>.users.idmap`` / ``<path>.items.idmap``.
    """
    pairs = []
    raw_users, raw_items = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            cols = stripped.split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise ParseError(path, line_no, f"expected 'user<TAB>item', got {stripped!r}")
            raw_users.append(cols[0])
            raw_items.append(cols[1])
    if not raw_users:
        raise EmptyDatasetError(f"{path}: no interactions")

    users, user_map = _densify(raw_users)
    items, item_map = _densify(raw_items)
    if user_map is not None:
        _write_idmap(str(path) + ".users.idmap", user_map)
    if item_map is not None:
        _write_idmap(str(path) + ".items.idmap", item_map)

    num_users = int(max(users)) + 1
    num_items = int(max(items)) + 1
    per_user = [[] for _ in range(num_users)]
    for u, i in zip(users, items):
        per_user[u].append(i)
    return InteractionTable(num_users, num_items, per_user)


def _densify(raw):
    """Return integer ids; remaps (with a mapping dict) unless all numeric."""
    try:
        ids = [int(r) for r in raw]
        if min(ids) < 0:
            raise ValueError
        return ids, None
    except ValueError:
        pass
    mapping = {}
    ids = []
    for r in raw:
        if r not in mapping:
            mapping[r] = len(mapping)
        ids.append(mapping[r])
    return ids, mapping


def _write_idmap(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        for raw, dense in mapping.items():
            fh.write(f"{raw}\t{dense}\n")


def save_interactions(table, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# user\titem\n")
        for u in range(table.num_users):
            for i in table.user_items[u]:
                fh.write(f"{u}\t{i}\n")


# ---------------------------------------------------------------------------
# feature files

def write_features(features, path):
    with open(path, "wb") as fh:
        rows, cols = features.values.shape
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FEATURE_VERSION))
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(features.values.astype("<f8").tobytes(order="C"))


def load_features(path, modality, expected_items=None):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FEATURE_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        payload = fh.read(rows * cols * 8)
        if len(payload) != rows * cols * 8:
            raise DataError(f"{path}: truncated payload")
        values = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
    if expected_items is not None and rows != expected_items:
        raise DataError(f"{path}: {rows} feature rows but dataset has {expected_items} items")
    return FeatureMatrix(modality, values.copy())


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SynthConfig:
    num_users: int = 2000
    num_items: int = 1000
    latent_dim: int = 8
    feat_dim_v: int = 16
    feat_dim_t: int = 16
    interactions_per_user: int = 20
    feature_noise: float = 0.1
    interaction_noise: float = 0.05
    mixing_overlap: float = 0.0  # 1.0 = both modalities view the same factors
    unpopular_count: int = 100
    n_unpop: int = 5

    def validate(self):
        if min(self.num_users, self.num_items, self.latent_dim,
               self.feat_dim_v, self.feat_dim_t, self.interactions_per_user) < 1:
            raise DataError("synthetic config requires positive counts")
        if not 0.0 <= self.mixing_overlap <= 1.0:
            raise DataError("mixing_overlap must lie in [0, 1]")
        if self.unpopular_count < 0 or self.n_unpop < 1:
            raise DataError("bad unpopular pool configuration")
        if self.unpopular_count >= self.num_items:
            raise DataError("unpopular pool larger than the catalog")
        open_items = self.num_items - self.unpopular_count
        if self.interactions_per_user > open_items:
            raise DataError("requested interactions exceed available items per user")
        if self.unpopular_count and self.n_unpop > self.num_users:
            raise DataError("n_unpop exceeds the number of users")


def synth_generate(config, seed):
    """Generate (InteractionTable, FeatureMatrix v, FeatureMatrix t).

    Items carry latent factors viewed through per-modality mixing; users
    weight the two modality factor spaces individually, so with low
    ``mixing_overlap`` distinct user groups dominate each modality.
    A reserved pool of items receives exactly ``n_unpop`` interactions each;
    remaining items are topped up past ``n_unpop`` so the pool is exactly the
    set of items at that count.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    U, I, k = config.num_users, config.num_items, config.latent_dim

    shared = rng.normal(size=(I, k))
    spec_v = rng.normal(size=(I, k))
    spec_t = rng.normal(size=(I, k))
    rho = config.mixing_overlap
    factors_v = np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * spec_v
    factors_t = np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * spec_t

    taste_v = np.abs(rng.normal(size=(U, k)))
    taste_t = np.abs(rng.normal(size=(U, k)))
    weight_v = rng.uniform(size=U)  # per-user modality preference
    affinity = (weight_v[:, None] * (taste_v @ factors_v.T)
                + (1.0 - weight_v[:, None]) * (taste_t @ factors_t.T))

    mix_shared = rng.normal(size=(config.feat_dim_v, k)) / np.sqrt(k)
    mix_v = rng.normal(size=(config.feat_dim_v, k)) / np.sqrt(k)
    mix_t = rng.normal(size=(config.feat_dim_t, k)) / np.sqrt(k)
    if config.feat_dim_v == config.feat_dim_t:
        # overlap couples the mixing maps too, so at 1.0 the modalities become
        # identical views (up to noise) and the gradient spaces collapse
        mix_v = np.sqrt(rho) * mix_shared + np.sqrt(1.0 - rho) * mix_v
        mix_t = np.sqrt(rho) * mix_shared + np.sqrt(1.0 - rho) * mix_t
    feats_v = factors_v @ mix_v.T + config.feature_noise * rng.normal(size=(I, config.feat_dim_v))
    feats_t = factors_t @ mix_t.T + config.feature_noise * rng.normal(size=(I, config.feat_dim_t))

    pool = np.sort(rng.choice(I, size=config.unpopular_count, replace=False)) \
        if config.unpopular_count else np.empty(0, dtype=np.int64)
    pool_set = set(pool.tolist())
    open_items = np.array([i for i in range(I) if i not in pool_set], dtype=np.int64)

    per_user = [set() for _ in range(U)]
    order = np.argsort(-affinity[:, open_items], axis=1, kind="stable")
    n_per = config.interactions_per_user
    for u in range(U):
        chosen = open_items[order[u, :n_per]].tolist()
        if config.interaction_noise > 0.0:
            flip = rng.uniform(size=n_per) < config.interaction_noise
            for j in np.nonzero(flip)[0]:
                repl = int(open_items[rng.integers(open_items.size)])
                chosen[j] = repl
        per_user[u].update(chosen)

    # pool items: exactly n_unpop interactions, drawn from the most receptive users
    for i in pool:
        cand = np.argsort(-affinity[:, i], kind="stable")[:max(config.n_unpop * 5, config.n_unpop)]
        picked = rng.choice(cand, size=config.n_unpop, replace=False)
        for u in picked:
            per_user[int(u)].add(int(i))

    # keep the pool the unique set of items at count n_unpop
    if config.unpopular_count:
        counts = np.zeros(I, dtype=np.int64)
        for u in range(U):
            for i in per_user[u]:
                counts[i] += 1
        rank_users = np.argsort(-affinity, axis=0, kind="stable")
        for i in open_items:
            c = counts[i]
            if 1 <= c <= config.n_unpop:
                for u in rank_users[:, i]:
                    if c > config.n_unpop:
                        break
                    u = int(u)
                    if i not in per_user[u]:
                        per_user[u].add(int(i))
                        c += 1
                counts[i] = c

    table = InteractionTable(U, I, [sorted(s) for s in per_user])
    return (table,
            FeatureMatrix("v", feats_v),
            FeatureMatrix("t", feats_t))


# ---------------------------------------------------------------------------
# splitting and sampling

def split_leave_one_out(table, seed):
    """Hold out one uniformly chosen item per user with >= 2 interactions."""
    rng = np.random.default_rng(seed)
    holdout = np.full(table.num_users, -1, dtype=np.int64)
    new_lists = []
    for u in range(table.num_users):
        items = table.user_items[u]
        if items.size >= 2:
            pick = int(items[rng.integers(items.size)])
            holdout[u] = pick
            new_lists.append(items[items != pick])
        else:
            new_lists.append(items)
    return InteractionTable(table.num_users, table.num_items, new_lists, holdout=holdout)


class TripleSampler:
    """Uniform BPR triple sampler over training interactions.

    Owns a private RNG; draws are deterministic for a given seed and call
    sequence. Negatives are uniform over the user's non-interacted items via
    rejection; a user interacting with every item is resampled away.
    """

    def __init__(self, table, seed):
        self.table = table
        self.rng = np.random.default_rng(seed)
        self.eligible = np.array(
            [u for u in range(table.num_users) if table.user_items[u].size > 0],
            dtype=np.int64)
        if self.eligible.size == 0:
            raise EmptyDatasetError("no user has training interactions")

    def sample(self, batch_size):
        if batch_size < 1:
            raise DataError("batch_size must be >= 1")
        t = self.table
        users = np.empty(batch_size, dtype=np.int64)
        pos = np.empty(batch_size, dtype=np.int64)
        negs = np.empty(batch_size, dtype=np.int64)
        for b in range(batch_size):
            while True:
                u = int(self.eligible[self.rng.integers(self.eligible.size)])
                items = t.user_items[u]
                if items.size < t.num_items:
                    break
            users[b] = u
            pos[b] = int(items[self.rng.integers(items.size)])
            uset = t.user_set(u)
            while True:
                j = int(self.rng.integers(t.num_items))
                if j not in uset:
                    negs[b] = j
                    break
        return users, pos, negs


def sample_triples(table, batch_size, seed):
    return TripleSampler(table, seed).sample(batch_size)
