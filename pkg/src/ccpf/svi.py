"""
Stochastic variational training of the coupled model.

Each iteration samples one cell of the grid.  Missing cells update the
missingness factorization with a zero count; observed training cells also get
a local posterior over their count, which weights the data-model update
through the linkage statistics.  The dispersion ``kappa`` and the linkage
parameter ``c`` are MAP-estimated from averaged per-entry gradients.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TRAIN, VALIDATION, SparseDataset
from .datamodels import DataModel, DataModelKind, build_model, restore_model
from .edm import EdmFamily
from .errors import DataError, ParameterDomainError
from .evaluation import test_log_likelihood
from .likelihood import count_loglik, count_loglik_grads, make_record
from .linkage import IGNORABLE, Linkage, LinkKind, dphi_dc, phi
from .missingness import (
    HpfHyper,
    HpfState,
    LocalQn,
    UNIT_STATS,
    expected_rate,
    global_update,
    hyper_init,
    init_state,
    local_q_from_loglik,
    multinomial_weights,
)


@dataclass
class TrainerConfig:
    K: int = 160
    xi: float = 0.7
    t0: int = 10_000
    n_tr: int = 20
    kappa_prior: tuple[float, float] = (1.01, 1.0)
    c_prior: tuple[float, float] = (0.0, 0.1)
    grad_smooth_window: int = 1000
    max_epochs: float = 1.0
    max_iters: int | None = None
    eval_every: int = 100_000
    convergence_tolerance: float = 1e-4
    seed: int = 0
    map_step: float = 1e-2
    learn_kappa: bool = True
    learn_c: bool = True
    sampling: str = "uniform"
    dm_K: int | None = None

    def __post_init__(self):
        self.kappa_prior = tuple(float(v) for v in self.kappa_prior)
        self.c_prior = tuple(float(v) for v in self.c_prior)
        if not 0.5 < self.xi <= 1.0:
            raise ParameterDomainError(f"xi must lie in (0.5, 1], got {self.xi}")
        for name in ("K", "t0", "n_tr", "grad_smooth_window", "eval_every"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ParameterDomainError(f"{name} must be a positive integer, got {v}")
            setattr(self, name, int(v))
        if self.dm_K is not None and (int(self.dm_K) != self.dm_K or self.dm_K < 1):
            raise ParameterDomainError(f"dm_K must be a positive integer, got {self.dm_K}")
        if self.max_iters is not None and self.max_iters < 0:
            raise ParameterDomainError("max_iters must be non-negative")
        if self.max_epochs < 0 or self.map_step < 0 or self.convergence_tolerance < 0:
            raise ParameterDomainError("max_epochs, map_step and convergence_tolerance must be non-negative")
        if self.kappa_prior[0] <= 0 or self.kappa_prior[1] <= 0 or self.c_prior[1] <= 0:
            raise ParameterDomainError("prior shape, scale and standard deviation must be positive")
        if self.sampling not in ("uniform", "balanced"):
            raise ParameterDomainError(f"sampling must be 'uniform' or 'balanced', got {self.sampling!r}")

    def budget(self, n_cells: int) -> int:
        """Iteration budget: ``max_iters`` if set, else ``max_epochs`` passes over the grid."""
        if self.max_iters is not None:
            return int(self.max_iters)
        return int(round(self.max_epochs * n_cells))


@dataclass
class TrainReport:
    trace: list[tuple[int, float]] = field(default_factory=list)
    kappa: float = 1.0
    c: float = 0.0
    iterations: int = 0
    seconds: float = 0.0
    converged: bool = False


# ---------------------------------------------------------------------------
# cell sampling


class CellSampler:
    """Draws grid cells, skipping held-out cells.

    Uniform sampling hands the missingness model per-row scales equal to the
    number of eligible cells in the row (and likewise per column).  Balanced
    sampling draws a training cell with probability 1/2 and a missing cell
    otherwise, with inverse-probability scales per row and column.
    """

    def __init__(self, ds: SparseDataset, rng: np.random.Generator, mode: str = "uniform"):
        self.rng = rng
        self.mode = mode
        self.n_rows, self.n_cols = ds.n_rows, ds.n_cols
        self.n_cells = ds.n_rows * ds.n_cols
        rows, cols, y = ds.part(TRAIN)
        if rows.size == 0:
            raise DataError("empty training split")
        self.train_rows, self.train_cols, self.train_y = rows, cols, y
        flat = rows * self.n_cols + cols
        self.observed = dict(zip(flat.tolist(), range(rows.size)))
        held = ds.split != TRAIN
        self.heldout = set((ds.rows[held] * self.n_cols + ds.cols[held]).tolist())

        held_row = np.bincount(ds.rows[held], minlength=self.n_rows).astype(float)
        held_col = np.bincount(ds.cols[held], minlength=self.n_cols).astype(float)
        self.elig_row = self.n_cols - held_row
        self.elig_col = self.n_rows - held_col
        self.n_eligible = self.n_cells - len(self.heldout)
        self.n_train = rows.size
        self.n_missing = self.n_eligible - self.n_train

        if mode == "balanced":
            if self.n_missing == 0:
                raise DataError("balanced sampling needs at least one missing cell")
            obs_row = np.bincount(rows, minlength=self.n_rows).astype(float)
            obs_col = np.bincount(cols, minlength=self.n_cols).astype(float)
            self.obs_scale_row, self.miss_scale_row = _balanced_scales(obs_row, self.elig_row - obs_row, self.n_train, self.n_missing)
            self.obs_scale_col, self.miss_scale_col = _balanced_scales(obs_col, self.elig_col - obs_col, self.n_train, self.n_missing)

    @property
    def sparsity(self) -> float:
        return self.n_missing / self.n_eligible

    def _uniform_cell(self, avoid_observed: bool):
        while True:
            f = int(self.rng.integers(self.n_cells))
            if f in self.heldout or (avoid_observed and f in self.observed):
                continue
            return f

    def draw(self):
        """``(i, j, entry, row_scale, col_scale)``; ``entry`` is ``None`` for missing cells."""
        if self.mode == "uniform":
            f = self._uniform_cell(False)
            i, j = divmod(f, self.n_cols)
            return i, j, self.observed.get(f), self.elig_row[i], self.elig_col[j]
        if self.rng.random() < 0.5:
            e = int(self.rng.integers(self.n_train))
            i, j = int(self.train_rows[e]), int(self.train_cols[e])
            return i, j, e, self.obs_scale_row[i], self.obs_scale_col[j]
        f = self._uniform_cell(True)
        i, j = divmod(f, self.n_cols)
        return i, j, None, self.miss_scale_row[i], self.miss_scale_col[j]


def _balanced_scales(obs, miss, n_obs, n_miss):
    """Inverse-probability scales given that a draw landed in a particular row.

    ``p`` is the chance that such a draw is a training cell; an observed draw
    then stands for ``obs / p`` cells and a missing draw for ``miss / (1 - p)``.
    """
    p_obs = 0.5 * obs / n_obs
    p_miss = 0.5 * miss / n_miss
    total = p_obs + p_miss
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, p_obs / np.where(total > 0, total, 1.0), 0.0)
        obs_scale = np.where(p > 0, obs / np.where(p > 0, p, 1.0), 0.0)
        miss_scale = np.where(p < 1, miss / np.where(p < 1, 1.0 - p, 1.0), 0.0)
    return obs_scale, miss_scale


# ---------------------------------------------------------------------------
# MAP estimation of kappa and c


class GradientAccumulator:
    """Per-entry records, count posteriors and gradients collected between MAP steps."""

    def __init__(self, n_tr: int):
        self.n_tr = n_tr
        self.records: list[np.ndarray] = []
        self.probs: list[np.ndarray] = []
        self.grad_logk = 0.0
        self.grad_c = 0.0

    def __len__(self):
        return len(self.records)

    def add(self, rec, probs, g_logk, g_c):
        self.records.append(rec)
        self.probs.append(probs)
        self.grad_logk += g_logk
        self.grad_c += g_c

    def clear(self):
        self.records.clear()
        self.probs.clear()
        self.grad_logk = 0.0
        self.grad_c = 0.0

    def arrays(self):
        w = len(self.records)
        rec = np.stack(self.records) if w else np.zeros((0, 5))
        probs = np.stack(self.probs) if w else np.zeros((0, self.n_tr))
        return rec, probs

    def to_arrays(self) -> dict[str, np.ndarray]:
        rec, probs = self.arrays()
        return {"records": rec, "probs": probs, "grads": np.array([self.grad_logk, self.grad_c])}

    @classmethod
    def from_arrays(cls, n_tr, arrays) -> "GradientAccumulator":
        acc = cls(n_tr)
        acc.records = list(np.array(arrays["records"]))
        acc.probs = list(np.array(arrays["probs"]))
        acc.grad_logk, acc.grad_c = (float(v) for v in arrays["grads"])
        return acc


_LOG_KAPPA_MAX = 700.0


def kappa_prior_grad(kappa: float, shape: float, scale: float) -> float:
    """``d/dlog(kappa)`` of the inverse-gamma log-density ``-(shape+1) log kappa - scale/kappa``."""
    return -(shape + 1.0) + scale / kappa


def c_prior_grad(c: float, mean: float, std: float) -> float:
    return -(c - mean) / (std * std)


def _kappa_log_prior(kappa, shape, scale):
    return -(shape + 1.0) * math.log(kappa) - scale / kappa


def _c_log_prior(c, mean, std):
    return -0.5 * ((c - mean) / std) ** 2


def map_update_dispersion(current_kappa: float, batch: GradientAccumulator, config: TrainerConfig, n_train: int = 1, step: float | None = None) -> float:
    """One averaged-gradient ascent step on ``log kappa``.

    The data gradient is the mean over the accumulated entries; the prior
    gradient is divided by the number of training entries so both are on a
    per-entry scale.
    """
    if len(batch) == 0:
        raise ValueError("empty gradient accumulator")
    step = config.map_step if step is None else step
    g = batch.grad_logk / len(batch) + kappa_prior_grad(current_kappa, *config.kappa_prior) / n_train
    # stay inside the representable range so kappa remains finite and positive
    return math.exp(min(max(math.log(current_kappa) + step * g, -_LOG_KAPPA_MAX), _LOG_KAPPA_MAX))


def map_update_coupling(current_c: float, batch: GradientAccumulator, config: TrainerConfig, link: Linkage, n_train: int = 1, step: float | None = None, n_tr: int | None = None) -> float:
    """One averaged-gradient ascent step on ``c``, projected into the admissible interval."""
    if len(batch) == 0:
        raise ValueError("empty gradient accumulator")
    step = config.map_step if step is None else step
    g = batch.grad_c / len(batch) + c_prior_grad(current_c, *config.c_prior) / n_train
    lo, hi = coupling_interval(link, config.n_tr if n_tr is None else n_tr)
    return min(max(current_c + step * g, lo), hi)


def coupling_interval(link: Linkage, n_tr: int, margin: float = 1e-6) -> tuple[float, float]:
    """Admissible ``c``: the linkage bounds, tightened so ``phi(n) > 0`` on ``1..n_tr``."""
    lo, hi = link.c_interval(margin)
    if link.kind is LinkKind.EXPONENTIAL and n_tr > 1:
        lo = max(lo, -1.0 / (n_tr - 1) + margin)
    return lo, hi


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Holds both variational states, the sampler and the MAP accumulators.

    ``coupled=False`` trains the data model alone on the training entries,
    drawing the same cell sequence and skipping missing cells.
    """

    def __init__(
        self,
        dataset: SparseDataset,
        model_kind: DataModelKind | str,
        link: Linkage,
        config: TrainerConfig,
        family: EdmFamily | str = EdmFamily.GAUSSIAN,
        mean_link: Linkage = IGNORABLE,
        covariates: np.ndarray | None = None,
        axis: str = "rows",
        coupled: bool = True,
        _restore: dict | None = None,
    ):
        self.dataset = dataset
        self.kind = DataModelKind(model_kind)
        self.family = EdmFamily(family)
        self.config = config
        self.coupled = coupled
        self.axis = axis
        self.covariates = covariates
        if not coupled:
            link, mean_link = IGNORABLE, IGNORABLE
        self.link = link
        self.mean_link = mean_link

        seeds = np.random.SeedSequence(config.seed).spawn(4)
        hpf_rng, dm_rng, cell_rng, misc_rng = (np.random.Generator(np.random.PCG64(s)) for s in seeds)
        self.misc_rng = misc_rng
        self.sampler = CellSampler(dataset, cell_rng, config.sampling)
        self.val_set = dataset.part(VALIDATION)
        self.hyper = hyper_init(min(max(self.sampler.sparsity, 1e-12), 1 - 1e-12), config.K)

        if _restore is None:
            rows, cols, y = self.sampler.train_rows, self.sampler.train_cols, self.sampler.train_y
            self.hpf = init_state(self.hyper, dataset.n_rows, dataset.n_cols, hpf_rng, t0=config.t0) if coupled else None
            self.dm = build_model(
                self.kind, rows, cols, y, dataset.n_rows, dataset.n_cols, config.dm_K or config.K, dm_rng,
                t0=config.t0, family=self.family, covariates=covariates, axis=axis,
            )
            self.iteration = 0
            self.trace: list[tuple[int, float]] = []
            self.converged = False
            self.acc = GradientAccumulator(config.n_tr)
            self.kappa_step = config.map_step
            self.c_step = config.map_step
        else:
            self._load(_restore)

        self.learn_kappa = (
            config.learn_kappa and self.dm.kappa_free and self.family is not EdmFamily.BINOMIAL
        )
        self.learn_c = config.learn_c and coupled and not self.link.ignorable
        self._refresh_phi()
        self._counts = np.arange(1, config.n_tr + 1)
        self._point_mass = np.zeros(config.n_tr)
        self._point_mass[0] = 1.0
        self._zero_ll = np.zeros(config.n_tr)
        self._zero_w = np.zeros(config.K)
        self._missing_q = LocalQn.missing()

    def _refresh_phi(self):
        n = np.arange(1, self.config.n_tr + 1)
        self._phi1 = phi(self.mean_link, n)
        self._phi2 = phi(self.link, n)
        self._dphi2 = dphi_dc(self.link, n)
        self._ignorable = self.link.ignorable and self.mean_link.ignorable

    @property
    def kappa(self) -> float:
        return self.dm.kappa

    @property
    def c(self) -> float:
        return self.link.c

    # -- one iteration

    def step(self):
        i, j, e, row_scale, col_scale = self.sampler.draw()
        cfg = self.config
        if e is None:
            if self.coupled:
                global_update(self.hpf, self.hyper, i, j, self._missing_q, self._zero_w, cfg.xi, row_scale, col_scale)
            self.iteration += 1
            return

        y = float(self.sampler.train_y[e])
        dm = self.dm
        stats = dm.local_stats(i, j)
        rec = make_record(dm.channel, y, stats)
        if self.coupled:
            lam = expected_rate(self.hpf, i, j)
            if self._ignorable:
                ll = self._zero_ll
            else:
                ll = count_loglik(dm.channel, self.family, rec, self._phi1, self._phi2, dm.kappa, False)
            link_mean = self.mean_link if dm.channel == "gaussian" else self.link
            q = local_q_from_loglik(ll, lam, link_mean, self.link)
            weights = multinomial_weights(self.hpf, i, j)
            dm.svi_step(i, j, y, q.phi_stats, cfg.xi)
            global_update(self.hpf, self.hyper, i, j, q, weights, cfg.xi, row_scale, col_scale)
            probs = self._point_mass if self._ignorable else q.probs
        else:
            dm.svi_step(i, j, y, UNIT_STATS, cfg.xi)
            probs = self._point_mass

        if self.learn_kappa or self.learn_c:
            g_logk, g_c = count_loglik_grads(
                dm.channel, self.family, rec, self._phi1, self._phi2, self._dphi2, dm.kappa, dm.kappa_free
            )
            self.acc.add(rec, probs, float(probs @ g_logk), float(probs @ g_c))
            if len(self.acc) >= cfg.grad_smooth_window:
                self._map_step()
        self.iteration += 1

    # -- MAP

    def _window_objective(self, kappa, c):
        rec, probs = self.acc.arrays()
        if c is None:
            phi2 = self._phi2
        else:
            phi2 = phi(self.link.with_c(c), self._counts)
        ll = count_loglik(self.dm.channel, self.family, rec, self._phi1, phi2, kappa, self.dm.kappa_free)
        with np.errstate(invalid="ignore"):
            data = np.sum(np.where(probs > 0, probs * ll, 0.0)) / len(rec)
        n = self.sampler.n_train
        prior = 0.0
        if self.learn_kappa:
            prior += _kappa_log_prior(kappa, *self.config.kappa_prior)
        if self.learn_c:
            prior += _c_log_prior(self.link.c if c is None else c, *self.config.c_prior)
        return data + prior / n

    def _map_step(self):
        n = self.sampler.n_train
        if self.learn_kappa:
            old = self.dm.kappa
            base = self._window_objective(old, None)
            for _ in range(30):
                new = map_update_dispersion(old, self.acc, self.config, n, self.kappa_step)
                if self._window_objective(new, None) >= base:
                    self.dm.kappa = new
                    break
                self.kappa_step *= 0.5
        if self.learn_c:
            old = self.link.c
            base = self._window_objective(self.dm.kappa, old)
            for _ in range(30):
                new = map_update_coupling(old, self.acc, self.config, self.link, n, self.c_step)
                if self._window_objective(self.dm.kappa, new) >= base:
                    self.link = self.link.with_c(new)
                    self._refresh_phi()
                    break
                self.c_step *= 0.5
        self.acc.clear()

    # -- evaluation and loop

    def validation_ll(self) -> float:
        if len(self.val_set[0]) == 0:
            return float("nan")
        return test_log_likelihood(self.hpf, self.dm, self.link, None, self.config.n_tr, self.val_set, self.mean_link).per_entry

    def run(self, n_iters: int | None = None, progress=None) -> TrainReport:
        """Iterate until ``n_iters`` more steps, the budget, or convergence."""
        start = time.perf_counter()
        budget = self.config.budget(self.sampler.n_cells)
        stop = budget if n_iters is None else self.iteration + int(n_iters)
        every = self.config.eval_every
        while self.iteration < stop and not self.converged:
            self.step()
            if self.iteration % every == 0:
                val = self.validation_ll()
                self.trace.append((self.iteration, val))
                if progress is not None:
                    progress(self.iteration, val, self.kappa, self.c)
                tol = self.config.convergence_tolerance
                if tol > 0 and len(self.trace) >= 2:
                    prev, cur = self.trace[-2][1], self.trace[-1][1]
                    if np.isfinite(prev) and abs(cur - prev) <= tol * abs(prev):
                        self.converged = True
        return TrainReport(list(self.trace), self.kappa, self.c, self.iteration, time.perf_counter() - start, self.converged)

    # -- checkpoints

    def checkpoint(self) -> tuple[dict, dict]:
        meta = {
            "config": asdict(self.config),
            "model_kind": self.kind.value,
            "family": self.family.value,
            "link": {"kind": self.link.kind.value, "c": self.link.c},
            "mean_link": {"kind": self.mean_link.kind.value, "c": self.mean_link.c},
            "axis": self.axis,
            "coupled": self.coupled,
            "iteration": self.iteration,
            "trace": [[int(t), float(v)] for t, v in self.trace],
            "converged": self.converged,
            "kappa_step": self.kappa_step,
            "c_step": self.c_step,
            "cell_rng": self.sampler.rng.bit_generator.state,
            "misc_rng": self.misc_rng.bit_generator.state,
            "hyper": asdict(self.hyper),
            "data_model": self.dm.meta(),
            "shape": [self.dataset.n_rows, self.dataset.n_cols],
        }
        arrays = {f"dm/{k}": v for k, v in self.dm.arrays().items()}
        if self.hpf is not None:
            arrays.update({f"hpf/{k}": v for k, v in self.hpf.arrays().items()})
        arrays.update({f"map/{k}": v for k, v in self.acc.to_arrays().items()})
        return meta, arrays

    def _load(self, payload):
        meta, arrays = payload["meta"], payload["arrays"]
        dm_arrays = {k[3:]: v for k, v in arrays.items() if k.startswith("dm/")}
        self.dm = restore_model(meta["data_model"], dm_arrays)
        if self.coupled:
            self.hpf = HpfState(**{k[4:]: np.array(v) for k, v in arrays.items() if k.startswith("hpf/")})
        else:
            self.hpf = None
        self.hyper = HpfHyper(**meta["hyper"])
        self.iteration = int(meta["iteration"])
        self.trace = [(int(t), float(v)) for t, v in meta["trace"]]
        self.converged = bool(meta["converged"])
        self.kappa_step = float(meta["kappa_step"])
        self.c_step = float(meta["c_step"])
        self.sampler.rng.bit_generator.state = meta["cell_rng"]
        self.misc_rng.bit_generator.state = meta["misc_rng"]
        self.acc = GradientAccumulator.from_arrays(self.config.n_tr, {k[4:]: v for k, v in arrays.items() if k.startswith("map/")})

    @classmethod
    def from_checkpoint(cls, dataset: SparseDataset, meta: dict, arrays: dict, covariates=None) -> "Trainer":
        if list(meta["shape"]) != [dataset.n_rows, dataset.n_cols]:
            raise DataError(f"checkpoint is for a {meta['shape'][0]}x{meta['shape'][1]} grid, data is {dataset.n_rows}x{dataset.n_cols}")
        cfg = dict(meta["config"])
        config = TrainerConfig(**cfg)
        link = Linkage(meta["link"]["kind"], meta["link"]["c"])
        mean_link = Linkage(meta["mean_link"]["kind"], meta["mean_link"]["c"])
        return cls(
            dataset, meta["model_kind"], link, config, meta["family"], mean_link,
            covariates=covariates, axis=meta["axis"], coupled=meta["coupled"],
            _restore={"meta": meta, "arrays": arrays},
        )


def train(
    dataset: SparseDataset,
    model_kind: DataModelKind | str,
    link: Linkage,
    config: TrainerConfig,
    family: EdmFamily | str = EdmFamily.GAUSSIAN,
    mean_link: Linkage = IGNORABLE,
    covariates: np.ndarray | None = None,
    axis: str = "rows",
    progress=None,
) -> tuple[HpfState, DataModel, TrainReport]:
    trainer = Trainer(dataset, model_kind, link, config, family, mean_link, covariates, axis)
    report = trainer.run(progress=progress)
    return trainer.hpf, trainer.dm, report


def train_standalone(
    dataset: SparseDataset,
    model_kind: DataModelKind | str,
    config: TrainerConfig,
    family: EdmFamily | str = EdmFamily.GAUSSIAN,
    covariates: np.ndarray | None = None,
    axis: str = "rows",
) -> tuple[DataModel, TrainReport]:
    """Train the data model alone on the non-missing training entries."""
    trainer = Trainer(dataset, model_kind, IGNORABLE, config, family, IGNORABLE, covariates, axis, coupled=False)
    report = trainer.run()
    return trainer.dm, report

