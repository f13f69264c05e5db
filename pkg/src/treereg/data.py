"""Synthetic task generators, CSV ingestion, z-scoring and splitting."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")

# Signal HMM: 5 states emitting 7 binary features.
SIGNAL_EMISSION = np.array([
    [.5, .5, .5, .5, 0, 0, 0],
    [.5, .5, .5, .5, .5, 0, 0],
    [.5, .5, .5, 0, .5, 0, 0],
    [.5, .5, .5, 0, 0, .5, 0],
    [.5, .5, .5, 0, 0, 0, .5],
])
SIGNAL_TRANSITION = np.array([
    [.7, .3, 0, 0, 0],
    [.5, .25, .25, 0, 0],
    [0, .25, .5, .25, 0],
    [0, 0, .25, .25, .5],
    [0, 0, 0, .5, .5],
])
NOISE_EMISSION = np.array([
    [.5, .5, .5, 0, 0, 0, 0],
    [0, .5, .5, .5, 0, 0, 0],
    [0, 0, .5, .5, .5, 0, 0],
    [0, 0, 0, .5, .5, .5, 0],
    [0, 0, 0, 0, .5, .5, .5],
])
NOISE_TRANSITION = np.full((5, 5), 0.2)


@dataclass
class SequenceDataset:
    """Sequences of per-timestep features ``x`` (T, F) and labels ``y`` (T, L)."""

    xs: list[np.ndarray]
    ys: list[np.ndarray]
    split: np.ndarray = None
    feature_names: list[str] = None
    label_names: list[str] = None
    ids: list[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in self.xs]
        self.ys = [np.asarray(y, dtype=np.float64).reshape(len(y), -1) for y in self.ys]
        if len(self.xs) != len(self.ys):
            raise ValueError("xs and ys differ in length")
        if not self.xs:
            raise ValueError("dataset has no sequences")
        F, L = self.xs[0].shape[1], self.ys[0].shape[1]
        for x, y in zip(self.xs, self.ys):
            if x.shape[1] != F or y.shape[1] != L or x.shape[0] != y.shape[0] or x.shape[0] < 1:
                raise ValueError("sequences disagree in shape")
            if not np.all((y == 0) | (y == 1)):
                raise ValueError("labels must be 0 or 1")
        if self.split is None:
            self.split = np.array(["train"] * len(self.xs), dtype=object)
        self.split = np.asarray(self.split, dtype=object)
        if self.split.shape != (len(self.xs),) or not set(self.split) <= set(SPLITS):
            raise ValueError("split tags must be one of train/valid/test per sequence")
        if self.feature_names is None:
            self.feature_names = [f"f{i}" for i in range(F)]
        if self.label_names is None:
            self.label_names = [f"y{i}" for i in range(L)]
        if self.ids is None:
            self.ids = [str(i) for i in range(len(self.xs))]

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def n_features(self) -> int:
        return self.xs[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.ys[0].shape[1]

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag)

    def subset(self, tag: str) -> "SequenceDataset":
        idx = self.indices(tag)
        return self.select(idx)

    def select(self, idx) -> "SequenceDataset":
        return replace(self, xs=[self.xs[i] for i in idx], ys=[self.ys[i] for i in idx],
                       split=self.split[idx], ids=[self.ids[i] for i in idx], meta=dict(self.meta))

    def batch(self, idx=None):
        """Padded ``(X (B, T, F), Y (B, T, L), mask (B, T))``."""
        idx = range(len(self)) if idx is None else idx
        xs = [self.xs[i] for i in idx]
        ys = [self.ys[i] for i in idx]
        T = max(x.shape[0] for x in xs)
        B = len(xs)
        X = np.zeros((B, T, self.n_features))
        Y = np.zeros((B, T, self.n_outputs))
        M = np.zeros((B, T))
        for b, (x, y) in enumerate(zip(xs, ys)):
            X[b, : len(x)] = x
            Y[b, : len(y)] = y
            M[b, : len(x)] = 1.0
        return X, Y, M

    def timesteps(self, tag: str | None = None):
        """All timesteps stacked: ``(X (N, F), Y (N, L))``."""
        idx = range(len(self)) if tag is None else self.indices(tag)
        xs = [self.xs[i] for i in idx]
        ys = [self.ys[i] for i in idx]
        if not xs:
            return np.zeros((0, self.n_features)), np.zeros((0, self.n_outputs))
        return np.concatenate(xs), np.concatenate(ys)

    def num_timesteps(self, tag: str | None = None) -> int:
        idx = range(len(self)) if tag is None else self.indices(tag)
        return int(sum(self.xs[i].shape[0] for i in idx))


# -- 2D parabola -------------------------------------------------------------

def parabola_boundary(x1):
    return 5.0 * (np.asarray(x1) - 0.5) ** 2 + 0.4


def parabola_label(x1, x2):
    """Noiseless rule: positive strictly above the parabola."""
    return (np.asarray(x2) > parabola_boundary(x1)).astype(np.int8)


def in_flip_band(x1, x2):
    base = 5.0 * (np.asarray(x1) - 0.5) ** 2
    x2 = np.asarray(x2)
    return (x2 >= base + 0.2) & (x2 <= base + 0.6)


def gen_parabola(n: int = 500, flip_rate: float = 0.1, seed: int = 0, test_fraction: float = 0.3) -> SequenceDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError("flip_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, size=(n, 2))
    y = parabola_label(pts[:, 0], pts[:, 1])
    flip = in_flip_band(pts[:, 0], pts[:, 1]) & (rng.random(n) < flip_rate)
    y = np.where(flip, 1 - y, y)
    ds = SequenceDataset([p[None] for p in pts], [np.array([[v]]) for v in y],
                         feature_names=["x1", "x2"], label_names=["above"],
                         meta={"task": "parabola", "seed": seed, "flip_rate": flip_rate})
    return split(ds, (1.0 - test_fraction, 0.0, test_fraction), seed=seed)


# -- signal-and-noise HMM ------------------------------------------------------

def _sample_hmm(rng, T, trans, emit, init=None):
    K = trans.shape[0]
    init = np.full(K, 1.0 / K) if init is None else init
    z = np.empty(T, dtype=np.int64)
    z[0] = rng.choice(K, p=init)
    cum = np.cumsum(trans, axis=1)
    u = rng.random(T)
    for t in range(1, T):
        z[t] = min(int(np.searchsorted(cum[z[t - 1]], u[t], side="right")), K - 1)
    x = (rng.random((T, emit.shape[1])) < emit[z]).astype(np.float64)
    return z, x


def gen_signal_noise(n: int = 100, T: int = 50, seed: int = 0, fractions=(0.7, 0.1, 0.2),
                     return_states: bool = False):
    """Two independent 5-state HMMs emit features 0-6 (signal) and 7-13 (noise).

    ``y_t = 1`` iff the signal chain is in its first state and ``x_t[0] == 1``.
    """
    if n < 1 or T < 1:
        raise ValueError("n and T must be >= 1")
    rng = np.random.default_rng(seed)
    xs, ys, states = [], [], []
    for _ in range(n):
        zs, xsig = _sample_hmm(rng, T, SIGNAL_TRANSITION, SIGNAL_EMISSION)
        _, xnoise = _sample_hmm(rng, T, NOISE_TRANSITION, NOISE_EMISSION)
        x = np.concatenate([xsig, xnoise], axis=1)
        y = ((zs == 0) & (x[:, 0] == 1)).astype(np.float64)[:, None]
        xs.append(x)
        ys.append(y)
        states.append(zs)
    names = [f"s{i}" for i in range(7)] + [f"n{i}" for i in range(7)]
    ds = SequenceDataset(xs, ys, feature_names=names, label_names=["target"],
                         meta={"task": "signal-noise", "seed": seed})
    ds = split(ds, fractions, seed=seed)
    if return_states:
        return ds, states
    return ds


def sample_signal_states(T: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return _sample_hmm(rng, T, SIGNAL_TRANSITION, SIGNAL_EMISSION)[0]


# -- splitting and scaling -----------------------------------------------------

def split(dataset: SequenceDataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> SequenceDataset:
    """Seeded shuffle, then consecutive train/valid/test blocks by sequence."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = min(int(round(fractions[1] * n)), n - n_train)
    tags = np.empty(n, dtype=object)
    tags[perm[:n_train]] = "train"
    tags[perm[n_train:n_train + n_valid]] = "valid"
    tags[perm[n_train + n_valid:]] = "test"
    for name, frac in zip(SPLITS, fractions):
        if frac > 0 and not np.any(tags == name):
            warnings.warn(f"split {name!r} is empty despite fraction {frac}", stacklevel=2)
    return replace(dataset, split=tags, meta=dict(dataset.meta))


@dataclass
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray  # which features were scaled


def zscore(dataset: SequenceDataset, stats: ZScoreStats | None = None) -> tuple[SequenceDataset, ZScoreStats]:
    """Standardize features with statistics of the train split."""
    if stats is None:
        X, _ = dataset.timesteps("train")
        if X.shape[0] == 0:
            raise ValueError("train split is empty")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        scaled = std > 0
        if not scaled.all():
            names = [dataset.feature_names[i] for i in np.flatnonzero(~scaled)]
            warnings.warn(f"constant features left unscaled: {names}", stacklevel=2)
        stats = ZScoreStats(mean, std, scaled)
    mean = np.where(stats.scaled, stats.mean, 0.0)
    std = np.where(stats.scaled, stats.std, 1.0)
    xs = [(x - mean) / std for x in dataset.xs]
    return replace(dataset, xs=xs, ys=list(dataset.ys), meta=dict(dataset.meta)), stats


# -- CSV -----------------------------------------------------------------------

@dataclass
class CsvSchema:
    id_column: str = "seq_id"
    time_column: str | None = "t"
    feature_columns: list[str] | None = None
    label_columns: list[str] | None = None
    split_column: str | None = None


def export_csv(dataset: SequenceDataset, path, with_split: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["seq_id", "t"] + [f"x_{n}" for n in dataset.feature_names] + [f"y_{n}" for n in dataset.label_names]
    if with_split:
        header.append("split")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for sid, x, y, tag in zip(dataset.ids, dataset.xs, dataset.ys, dataset.split):
            for t in range(x.shape[0]):
                row = [sid, t] + [repr(float(v)) for v in x[t]] + [int(v) for v in y[t]]
                if with_split:
                    row.append(tag)
                w.writerow(row)
    return path


def ingest_csv(path, schema: CsvSchema | None = None) -> SequenceDataset:
    """Group rows by sequence id (rows must be sorted by id, then time)."""
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        fcols = schema.feature_columns or [h for h in header if h.startswith("x_")]
        lcols = schema.label_columns or [h for h in header if h.startswith("y_")]
        for c in [schema.id_column, *fcols, *lcols]:
            if c not in col:
                raise ValueError(f"{path}: missing column {c!r}")
        if not fcols or not lcols:
            raise ValueError(f"{path}: need at least one feature and one label column")
        split_col = schema.split_column or ("split" if "split" in col else None)

        ids, xs, ys, tags = [], [], [], []
        cur_id, cur_x, cur_y, cur_tag = None, [], [], None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            sid = row[col[schema.id_column]]
            try:
                xrow = [float(row[col[c]]) for c in fcols]
            except ValueError:
                bad = next(c for c in fcols if not _is_float(row[col[c]]))
                raise ValueError(f"{path}: row {lineno}, column {bad!r}: cannot parse {row[col[bad]]!r}") from None
            yrow = []
            for c in lcols:
                cell = row[col[c]].strip()
                if cell not in ("0", "1", "0.0", "1.0"):
                    raise ValueError(f"{path}: row {lineno}, column {c!r}: label {cell!r} is not 0/1")
                yrow.append(float(cell))
            if sid != cur_id:
                if cur_id is not None:
                    ids.append(cur_id); xs.append(cur_x); ys.append(cur_y); tags.append(cur_tag)
                    if sid in ids:
                        raise ValueError(f"{path}: row {lineno}: sequence {sid!r} is not contiguous")
                cur_id, cur_x, cur_y = sid, [], []
                cur_tag = row[col[split_col]] if split_col else "train"
            cur_x.append(xrow)
            cur_y.append(yrow)
        if cur_id is not None:
            ids.append(cur_id); xs.append(cur_x); ys.append(cur_y); tags.append(cur_tag)
    if not ids:
        raise ValueError(f"{path}: no data rows")
    strip = lambda names, pre: [n[len(pre):] if n.startswith(pre) else n for n in names]  # noqa: E731
    return SequenceDataset([np.array(x) for x in xs], [np.array(y) for y in ys], split=np.array(tags, dtype=object),
                           feature_names=strip(fcols, "x_"), label_names=strip(lcols, "y_"), ids=ids)


def _is_float(s) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
