"""Experiment configuration, the training loop and lambda sweeps."""

from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .data import SequenceDataset, gen_parabola, gen_signal_noise, ingest_csv, split, zscore
from .metrics import auc
from .models import Model, build_model, data_loss, save_checkpoint
from .optim import AdamState, adam_update
from .params import ParamVector
from .regularizers import RegularizerSpec, penalty
from .surrogate import (Surrogate, SurrogateConfig, SurrogateSample, collect_sample, fit_surrogate, perturb,
                        save_samples, window)
from .tree import DecisionTree, TreeConfig, fidelity, fit_proxy, omega

log = logging.getLogger(__name__)

# default grid of regularization strengths (21 values)
DEFAULT_LAMBDAS = (0.1, 0.5, 1, 5, 10, 25, 50, 75, 100, 250, 500, 750, 1000, 2500, 5000, 7500,
                   1e4, 2.5e4, 5e4, 7.5e4, 1e5)


class TrainingDiverged(FloatingPointError):
    pass


# -- configuration ----------------------------------------------------------

@dataclass
class DataSpec:
    task: str = "signal-noise"  # parabola | signal-noise | csv
    n: int | None = None
    T: int = 50
    seed: int = 0
    flip_rate: float = 0.1
    path: str | None = None
    fractions: tuple | None = None
    zscore: bool = False


@dataclass
class ModelSpec:
    kind: str = "gru"  # mlp | gru | hmm | gruhmm
    hidden: tuple = (100, 100, 10)
    state_dim: int = 20
    num_states: int = 5


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    epochs: int = 300
    batch_size: int = 10
    learning_rate: float = 1e-2
    seed: int = 0
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    warm_start_epochs: int = 10
    trace_omega: bool = True
    out_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["fractions"] = list(d["data"]["fractions"]) if d["data"]["fractions"] else None
        d["model"]["hidden"] = list(d["model"]["hidden"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        sub = {"data": DataSpec, "model": ModelSpec, "regularizer": RegularizerSpec,
               "surrogate": SurrogateConfig, "tree": TreeConfig}
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                bad = set(d[key]) - {f.name for f in fields(typ)}
                if bad:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
                d[key] = typ(**d[key])
        if "data" in d and d["data"].fractions is not None:
            d["data"].fractions = tuple(d["data"].fractions)
        if "model" in d:
            d["model"].hidden = tuple(d["model"].hidden)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def preset(task: str, **overrides) -> ExperimentConfig:
    """Settings used for the two synthetic tasks."""
    if task == "parabola":
        cfg = ExperimentConfig(
            data=DataSpec(task="parabola", n=500, zscore=True),
            model=ModelSpec(kind="mlp", hidden=(100, 100, 10)),
            epochs=250, batch_size=100, learning_rate=1e-3,
            surrogate=SurrogateConfig(epochs=500, retrain_every=100, window_E=100, J=50),
            tree=TreeConfig(min_leaf_samples=1, prune=False),
        )
    elif task == "signal-noise":
        cfg = ExperimentConfig(
            data=DataSpec(task="signal-noise", n=100, T=50),
            model=ModelSpec(kind="gru", state_dim=20),
            epochs=300, batch_size=10, learning_rate=1e-2,
            surrogate=SurrogateConfig(epochs=300, retrain_every=5, window_E=5, J=50, epsilon=10.0,
                                      warm_start=True, sample_every="batch"),
            tree=TreeConfig(min_leaf_samples=25, prune=True),
        )
    else:
        raise ValueError(f"no preset for task {task!r}")
    return replace(cfg, **overrides)


def load_dataset(spec: DataSpec) -> SequenceDataset:
    if spec.task == "parabola":
        ds = gen_parabola(spec.n or 500, spec.flip_rate, spec.seed)
        if spec.fractions:
            ds = split(ds, spec.fractions, spec.seed)
    elif spec.task == "signal-noise":
        ds = gen_signal_noise(spec.n or 100, spec.T, spec.seed, fractions=spec.fractions or (0.7, 0.1, 0.2))
    elif spec.task == "csv":
        if not spec.path:
            raise ValueError("csv task needs data.path")
        ds = ingest_csv(spec.path)
        if spec.fractions:
            ds = split(ds, spec.fractions, spec.seed)
    else:
        raise ValueError(f"unknown task {spec.task!r}")
    if spec.zscore:
        ds, _ = zscore(ds)
    return ds


def make_model(spec: ModelSpec, dataset: SequenceDataset) -> Model:
    F, L = dataset.n_features, dataset.n_outputs
    if spec.kind == "mlp":
        return build_model({"kind": "mlp", "layer_sizes": [F, *spec.hidden, L]})
    if spec.kind == "gru":
        return build_model({"kind": "gru", "input_dim": F, "state_dim": spec.state_dim, "output_dim": L})
    if spec.kind == "hmm":
        return build_model({"kind": "hmm", "input_dim": F, "num_states": spec.num_states, "output_dim": L})
    if spec.kind == "gruhmm":
        return build_model({"kind": "gruhmm", "input_dim": F, "num_states": spec.num_states,
                            "state_dim": spec.state_dim, "output_dim": L})
    raise ValueError(f"unknown model kind {spec.kind!r}")


def residual_init(model: Model, hmm_w: ParamVector, rng) -> ParamVector:
    """GRU-HMM weights that start out predicting exactly what the HMM does.

    HMM blocks are copied from ``hmm_w``; the GRU gets a fresh random init
    with its readout (``w``, ``c``) zeroed, so the residual is 0.
    """
    if getattr(model, "kind", None) != "gruhmm":
        raise ValueError("residual_init needs a gruhmm model")
    w = model.init(rng)
    vals = w.values.copy()
    for name in model.hmm.weight_blocks():
        if hmm_w[name].shape != w[name].shape:
            raise ValueError(f"block {name}: HMM has shape {hmm_w[name].shape}, model needs {w[name].shape}")
        vals[w.block(name).slice] = hmm_w[name].ravel()
    for name in ("w", "c"):
        vals[w.block(name).slice] = 0.0
    return w.with_values(vals)


# -- evaluation helpers ---------------------------------------------------------

def flat_predictions(model: Model, w: ParamVector, dataset: SequenceDataset, tag: str | None, tree_node=False):
    """Per-timestep probabilities ``(N, L)`` aligned with ``dataset.timesteps(tag)``."""
    idx = range(len(dataset)) if tag is None else dataset.indices(tag)
    X, _, M = dataset.batch(idx)
    z = model.tree_logits(w.as_dict(), X) if tree_node else model.logits(w.as_dict(), X)
    return expit(z)[M.astype(bool)]


def omega_closure(model: Model, dataset: SequenceDataset, tree_config: TreeConfig, tag: str = "train"):
    """``w -> Omega(w)`` over the timesteps of one split."""
    ref, _ = dataset.timesteps(tag)

    def omega_fn(w: ParamVector) -> float:
        probs = flat_predictions(model, w, dataset, tag, tree_node=True)
        return omega(w, lambda _w, _ref: probs, ref, tree_config)

    return omega_fn


def split_aucs(model: Model, w: ParamVector, dataset: SequenceDataset, tag: str = "test") -> list[float]:
    probs = flat_predictions(model, w, dataset, tag)
    _, Y = dataset.timesteps(tag)
    out = []
    for j in range(Y.shape[1]):
        try:
            out.append(auc(probs[:, j], Y[:, j]))
        except ValueError:
            out.append(float("nan"))
    return out


# -- training -----------------------------------------------------------------

@dataclass
class TraceRow:
    epoch: int
    loss: float
    omega_true: float
    omega_hat: float


@dataclass
class TrainResult:
    model: Model
    w: ParamVector
    w_init: ParamVector
    trace: list[TraceRow]
    dataset: SequenceDataset
    config: ExperimentConfig
    surrogate: Surrogate | None = None
    samples: list[SurrogateSample] = field(default_factory=list)
    wall_time: float = 0.0


def _objective(p, model, X, Y, M, scale, spec, lam, surrogate):
    loss = data_loss(model, p, X, Y, M, scale)
    if lam > 0 and spec.kind != "none":
        loss = loss + lam * penalty(spec, p.flat if isinstance(p, ad.BlockVars) else p["__flat__"], surrogate)
    return loss


def full_objective(model, w, dataset, spec, surrogate=None) -> float:
    X, Y, M = dataset.batch(dataset.indices("train"))
    p = w.as_dict()
    p["__flat__"] = w.values
    return float(_objective(p, model, X, Y, M, 1.0, spec, spec.lam, surrogate))


def _run_epochs(model, w, state, dataset, train_idx, epochs, batch_size, rng, spec, lam, surrogate_ref,
                on_epoch=None, first_epoch=0, on_step=None):
    """Minibatch Adam; ``surrogate_ref[0]`` may be swapped by ``on_epoch`` between epochs.

    ``on_step(e, w)`` runs after every step but the last of an epoch.
    """
    n = len(train_idx)
    n_steps = int(np.ceil(n / batch_size))
    for e in range(first_epoch, first_epoch + epochs):
        if on_epoch is not None:
            on_epoch("start", e, w)
        perm = rng.permutation(train_idx)
        for s in range(n_steps):
            idx = perm[s * batch_size:(s + 1) * batch_size]
            X, Y, M = dataset.batch(idx)
            # rescale so that every minibatch estimates the full-data sum
            scale = n / len(idx)
            try:
                _, g = ad.value_and_grad(_objective, w, model, X, Y, M, scale, spec, lam, surrogate_ref[0])
                w = w.with_values(adam_update(state, w.values, g))
            except (ad.NumericOverflowError, FloatingPointError, ValueError) as exc:
                raise TrainingDiverged(f"epoch {e}, step {s}: {exc}") from exc
            if on_step is not None and s < n_steps - 1:
                on_step(e, w)
        if on_epoch is not None:
            on_epoch("end", e, w)
    return w


def train_model(config: ExperimentConfig, dataset: SequenceDataset | None = None,
                init_w: ParamVector | None = None, progress: bool = False) -> TrainResult:
    """Minimize ``lam * Psi(W) + sum BCE`` by minibatch Adam.

    For the tree penalty the model first runs ``warm_start_epochs``
    unregularized epochs; their weights (and optional restarts) seed the
    surrogate.  From then on one sample is collected per epoch (or per
    minibatch, see ``SurrogateConfig.sample_every``) and the
    surrogate is refit every ``retrain_every`` epochs on the last
    ``window_E`` epochs of samples plus fresh augmentation.
    """
    t0 = time.perf_counter()
    dataset = dataset if dataset is not None else load_dataset(config.data)
    model = make_model(config.model, dataset)
    spec = config.regularizer
    train_idx = dataset.indices("train")
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    w = init_w.copy() if init_w is not None else model.init(np.random.default_rng(config.seed))
    if len(w) != model.num_params:
        raise ValueError(f"initial weights have {len(w)} values, model needs {model.num_params}")
    w_init = w.copy()
    rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])
    state = AdamState(len(w), learning_rate=config.learning_rate)
    tree_kind = spec.kind == "tree" and spec.lam > 0
    omega_fn = omega_closure(model, dataset, config.tree)
    sc = config.surrogate
    samples: list[SurrogateSample] = []
    surrogate_ref: list[Surrogate | None] = [None]
    trace: list[TraceRow] = []

    def step_hook(e, w_cur):
        samples.append(collect_sample(w_cur, omega_fn, e))

    step_hook = step_hook if tree_kind and sc.sample_every == "batch" else None

    if tree_kind:
        for r in range(sc.restarts):
            rw = model.init(np.random.default_rng([config.seed, 100 + r]))
            rstate = AdamState(len(rw), learning_rate=config.learning_rate)
            rw = _run_epochs(model, rw, rstate, dataset, train_idx, max(config.warm_start_epochs, 1),
                             config.batch_size, np.random.default_rng([config.seed, 200 + r]), spec, 0.0, [None])
            samples.append(collect_sample(rw, omega_fn, -config.warm_start_epochs))

        def warm_hook(stage, e, w_cur):
            if stage == "end":
                samples.append(collect_sample(w_cur, omega_fn, e))

        W0 = config.warm_start_epochs
        if W0 > 0:
            samples.append(collect_sample(w, omega_fn, -W0 - 1))
            w = _run_epochs(model, w, state, dataset, train_idx, W0, config.batch_size, rng, spec, 0.0,
                            [None], warm_hook, first_epoch=-W0, on_step=step_hook)

    def hook(stage, e, w_cur):
        if stage == "start":
            if tree_kind and e % sc.retrain_every == 0:
                win = window(samples, e, sc.window_E)
                n_aug = max(sc.augment_count, sc.J - len(win))
                for pw in perturb(w_cur, n_aug, aug_rng, sc.perturb_scale, sc.fresh_fraction):
                    samples.append(collect_sample(pw, omega_fn, e))
                win = window(samples, e, sc.window_E)
                surrogate_ref[0] = fit_surrogate(win, sc, np.random.default_rng([config.seed, 3, e]),
                                                 init=surrogate_ref[0] if sc.warm_start else None)
            return
        om = omega_fn(w_cur) if (config.trace_omega or tree_kind) else float("nan")
        om_hat = float(surrogate_ref[0](w_cur.values)) if surrogate_ref[0] is not None else float("nan")
        loss = full_objective(model, w_cur, dataset, spec, surrogate_ref[0])
        if not np.isfinite(loss):
            trace.append(TraceRow(e, loss, om, om_hat))
            _dump_trace(trace, config)
            raise TrainingDiverged(f"loss is {loss} at epoch {e}")
        trace.append(TraceRow(e, loss, om, om_hat))
        if tree_kind:
            samples.append(SurrogateSample(w_cur.values.copy(), om, e))
        if progress:
            log.info("epoch %d loss %.4f omega %.3f omega_hat %.3f", e, loss, om, om_hat)

    try:
        w = _run_epochs(model, w, state, dataset, train_idx, config.epochs, config.batch_size, rng, spec,
                        spec.lam if spec.kind != "none" else 0.0, surrogate_ref, hook, on_step=step_hook)
    except TrainingDiverged:
        _dump_trace(trace, config)
        raise
    return TrainResult(model, w, w_init, trace, dataset, config, surrogate_ref[0], samples,
                       time.perf_counter() - t0)


def _dump_trace(trace, config):
    if config.out_dir:
        write_trace(trace, Path(config.out_dir) / "trace_dump.csv")


# -- outputs ----------------------------------------------------------------------

def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv_text(header, rows) -> str:
    import io
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def write_trace(trace: list[TraceRow], path) -> Path:
    return atomic_write(path, _csv_text(["epoch", "loss", "omega_true", "omega_hat"],
                                        [[r.epoch, r.loss, r.omega_true, r.omega_hat] for r in trace]))


def save_run(result: TrainResult, out_dir) -> dict:
    """Checkpoint, trace, surrogate and metrics for one training run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    save_checkpoint(result.model, result.w, out / "model", seed=cfg.seed,
                    extra={"config": cfg.to_dict()})
    write_trace(result.trace, out / "trace.csv")
    if result.surrogate is not None:
        result.surrogate.save(out / "surrogate")
        save_samples(result.samples, out / "surrogate_samples.csv")
    metrics = evaluate_run(result)
    atomic_write(out / "metrics.json", json.dumps(metrics, indent=2))
    atomic_write(out / "resolved_config.json", json.dumps(cfg.to_dict(), indent=2))
    return metrics


def evaluate_run(result: TrainResult) -> dict:
    model, w, ds, cfg = result.model, result.w, result.dataset, result.config
    aucs = split_aucs(model, w, ds, "test" if ds.indices("test").size else "train")
    paths = per_output_path_lengths(model, w, ds, cfg.tree)
    return {"auc": aucs, "path_length": paths, "path_length_sum": float(sum(paths)),
            "num_params": model.num_params, "wall_time": result.wall_time}


def per_output_path_lengths(model, w, dataset, tree_config, tag="train") -> list[float]:
    ref, _ = dataset.timesteps(tag)
    probs = flat_predictions(model, w, dataset, tag, tree_node=True)
    return [omega(w, lambda _w, _r, j=j: probs[:, j], ref, tree_config) for j in range(probs.shape[1])]


# -- proxy extraction --------------------------------------------------------------

@dataclass
class ProxyResult:
    tree: DecisionTree
    fidelity: float
    files: dict


def extract_proxy(model: Model, w: ParamVector, dataset: SequenceDataset, tree_config: TreeConfig,
                  out_dir=None, output: int = 0) -> ProxyResult:
    """Tree mimicking the thresholded predictions of one output node.

    Trained on the train split, pruned on the valid split, scored on test.
    """
    Xtr, _ = dataset.timesteps("train")
    ptr = flat_predictions(model, w, dataset, "train", tree_node=True)[:, output]
    labels = (ptr >= 0.5).astype(np.uint8)
    Xva, _ = dataset.timesteps("valid")
    if tree_config.prune and Xva.shape[0] > 0:
        pva = flat_predictions(model, w, dataset, "valid", tree_node=True)[:, output]
        tree = fit_proxy(Xtr, labels, tree_config, Xva, (pva >= 0.5).astype(np.uint8))
    else:
        tree = fit_proxy(Xtr, labels, tree_config)
    tag = "test" if dataset.indices("test").size else "train"
    Xte, _ = dataset.timesteps(tag)
    pte = flat_predictions(model, w, dataset, tag, tree_node=True)[:, output]
    fid = fidelity(pte, tree.predict_proba(Xte))
    files = {}
    if out_dir is not None:
        out = Path(out_dir)
        files["dot"] = atomic_write(out / "tree.dot", tree.to_dot(dataset.feature_names))
        files["json"] = atomic_write(out / "tree.json", tree.to_json())
    return ProxyResult(tree, fid, files)


# -- sweeps ----------------------------------------------------------------------

SWEEP_COLUMNS = ["model", "state_dim", "num_states", "kind", "lam", "auc", "path_length", "path_length_sum",
                 "fidelity", "num_params", "wall_time", "status"]


@dataclass
class SweepRecord:
    model: str
    state_dim: int
    num_states: int
    kind: str
    lam: float
    auc: list[float]
    path_length: list[float]
    path_length_sum: float
    fidelity: float
    num_params: int
    wall_time: float
    status: str = "ok"

    def row(self) -> list:
        return [self.model, self.state_dim, self.num_states, self.kind, self.lam,
                ";".join(f"{a:.6f}" for a in self.auc), ";".join(f"{p:.6f}" for p in self.path_length),
                f"{self.path_length_sum:.6f}", f"{self.fidelity:.6f}", self.num_params,
                f"{self.wall_time:.3f}", self.status]


def run_sweep(config: ExperimentConfig, lambdas=DEFAULT_LAMBDAS, kinds=("l1", "l2", "tree"),
              out_dir=None, dataset: SequenceDataset | None = None, init_w: ParamVector | None = None,
              keep_results: bool = False):
    """One run per (kind, lambda), all from the same initial weights.

    Returns the records sorted by kind then lambda (and the run results when
    ``keep_results``).  A failing run is recorded with its error and the
    sweep carries on.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("lambda list is empty")
    dataset = dataset if dataset is not None else load_dataset(config.data)
    model = make_model(config.model, dataset)
    w0 = init_w if init_w is not None else model.init(np.random.default_rng(config.seed))
    records, results = [], {}
    for kind in kinds:
        for lam in lambdas:
            cfg = replace(config, regularizer=replace(config.regularizer, kind=kind, lam=float(lam)), out_dir=None)
            run_dir = Path(out_dir) / f"{kind}_{lam:g}" if out_dir else None
            if run_dir is not None:
                cfg = replace(cfg, out_dir=str(run_dir))
            try:
                res = train_model(cfg, dataset, w0)
                metrics = save_run(res, run_dir) if run_dir is not None else evaluate_run(res)
                proxy = extract_proxy(res.model, res.w, dataset, cfg.tree, run_dir)
                rec = SweepRecord(cfg.model.kind, cfg.model.state_dim, cfg.model.num_states, kind, float(lam),
                                  metrics["auc"], metrics["path_length"], metrics["path_length_sum"],
                                  proxy.fidelity, model.num_params, res.wall_time)
                if keep_results:
                    results[(kind, float(lam))] = res
            except Exception as exc:  # one bad run must not sink the sweep
                log.error("run %s lam=%g failed: %s", kind, lam, exc)
                rec = SweepRecord(cfg.model.kind, cfg.model.state_dim, cfg.model.num_states, kind, float(lam),
                                  [], [], float("nan"), float("nan"), model.num_params, 0.0,
                                  f"error: {type(exc).__name__}: {exc}")
            records.append(rec)
            log.info("%s lam=%g auc=%s path=%.3f", kind, lam, rec.auc, rec.path_length_sum)
    records.sort(key=lambda r: (r.kind, r.lam))
    if out_dir is not None:
        write_sweep(records, Path(out_dir) / "tradeoff.csv")
        atomic_write(Path(out_dir) / "resolved_config.json",
                     json.dumps(dict(config.to_dict(), lambdas=lambdas, kinds=list(kinds)), indent=2))
    return (records, results) if keep_results else records


def write_sweep(records: list[SweepRecord], path) -> Path:
    return atomic_write(path, _csv_text(SWEEP_COLUMNS, [r.row() for r in records]))


def read_sweep(path) -> list[SweepRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            nums = lambda s: [float(v) for v in s.split(";") if v]  # noqa: E731
            out.append(SweepRecord(row["model"], int(row["state_dim"]), int(row["num_states"]), row["kind"],
                                   float(row["lam"]), nums(row["auc"]), nums(row["path_length"]),
                                   float(row["path_length_sum"]), float(row["fidelity"]), int(row["num_params"]),
                                   float(row["wall_time"]), row["status"]))
    return out
