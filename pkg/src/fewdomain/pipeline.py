"""Pre-training over a base-task pool, fine-tuning and OOD evaluation.

A *cell* is one (method, K, seed, data_fraction, source split) combination.
Everything random inside a cell is drawn from named child streams of the
cell seed, so different methods run with the same seed share their task
data, initialization, source split and fine-tuning batches.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fewdomain.episodic import EpisodicConfig, erm_step, make_episode, mldg_objective, sgd_update
from fewdomain.mats import MatsConfig, SimilarityRecord, sample_task, score_pool
from fewdomain.model import ParameterSet, init_params, predict
from fewdomain.taskbench import Domain, Task, TaskSpec, load_feature_file, make_task, sample_batch

log = logging.getLogger(__name__)

METHODS = ("erm", "mldg_uniform", "mats", "mats_gamma0")
NOVEL_HEAD = "__novel__"
HEADER = "method,K,seed,data_fraction,domain_id,accuracy"

# child-stream indices of the cell seed
_DATA, _INIT, _SPLIT, _FRACTION, _PRETRAIN, _PROBE, _FINETUNE = range(7)


class LeakageError(AssertionError):
    """A novel target domain became visible to training."""


@dataclass
class ExperimentConfig:
    base_task_specs: list = field(default_factory=list)
    novel_task_spec: object = None
    K: int = 2
    method: str = "mats"
    episodic: EpisodicConfig = field(default_factory=EpisodicConfig)
    mats: MatsConfig = field(default_factory=MatsConfig)
    pretrain_iters: int = 300
    finetune_iters: int = 200
    data_fraction: float = 1.0
    seed: int = 0
    output_path: str | None = None
    hidden_widths: list = field(default_factory=lambda: [64, 32])
    finetune_eta: float | None = None
    # "first": first K source domains; "random": one seeded K-subset per
    # seed; "all": every K-subset
    split: str = "random"
    # grid axes; None means the scalar field above
    methods: list | None = None
    ks: list | None = None
    seeds: list | None = None
    data_fractions: list | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for m in self.methods or [self.method]:
            if m not in METHODS:
                raise ValueError(f"method must be one of {METHODS}, got {m!r}")
        for k in self.ks or [self.K]:
            if int(k) < 1:
                raise ValueError(f"K must be >= 1, got {k}")
        for f in self.data_fractions or [self.data_fraction]:
            if not 0 < f <= 1:
                raise ValueError(f"data_fraction must be in (0, 1], got {f}")
        if self.pretrain_iters < 0 or self.finetune_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.split not in ("first", "random", "all"):
            raise ValueError(f"split must be first, random or all, got {self.split!r}")

    def grid(self):
        return itertools.product(
            self.methods or [self.method],
            [int(k) for k in (self.ks or [self.K])],
            [int(s) for s in (self.seeds or [self.seed])],
            [float(f) for f in (self.data_fractions or [self.data_fraction])],
        )


@dataclass
class MetricsRecord:
    method: str
    K: int
    seed: int
    data_fraction: float
    ood_accuracy: float
    per_domain_accuracy: dict[str, float]
    wall_iters: int = 0
    source_ids: tuple[str, ...] = ()

    def rows(self) -> list[str]:
        head = f"{self.method},{self.K},{self.seed},{self.data_fraction!r}"
        out = [f"{head},{d},{a!r}" for d, a in self.per_domain_accuracy.items()]
        out.append(f"{head},ALL,{self.ood_accuracy!r}")
        return out

    @property
    def key(self):
        return (self.method, self.K, self.seed, self.data_fraction, frozenset(self.per_domain_accuracy))


@dataclass
class PretrainResult:
    params: ParameterSet
    refreshes: list[list[SimilarityRecord]] = field(default_factory=list)
    sampled: list[int] = field(default_factory=list)


# task materialization ---------------------------------------------------------

def _as_task(spec, rng: np.random.Generator) -> Task:
    if isinstance(spec, Task):
        return spec
    if isinstance(spec, TaskSpec):
        return make_task(spec, rng)
    if isinstance(spec, dict) and "file" in spec:
        return load_feature_file(spec["file"], spec.get("task_id"))
    if isinstance(spec, dict):
        return make_task(TaskSpec.from_dict(spec), rng)
    raise TypeError(f"cannot build a task from {type(spec).__name__}")


def build_tasks(config: ExperimentConfig, seed: int) -> tuple[list[Task], Task]:
    """Materialize base tasks and the novel task for one seed."""
    rng = _stream(seed, _DATA)
    base = [_as_task(s, rng) for s in config.base_task_specs]
    if config.novel_task_spec is None:
        raise ValueError("novel_task_spec is required")
    novel = _as_task(config.novel_task_spec, rng)
    return base, novel


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), index]))


def source_splits(novel: Task, K: int, mode: str, rng: np.random.Generator) -> list[tuple[str, ...]]:
    ids = [d.domain_id for d in novel.src_domains]
    if K > len(ids):
        raise ValueError(f"K={K} exceeds the novel task's {len(ids)} source domains")
    if mode == "first":
        return [tuple(ids[:K])]
    if mode == "random":
        pick = sorted(rng.choice(len(ids), size=K, replace=False))
        return [tuple(ids[i] for i in pick)]
    return list(itertools.combinations(ids, K))


def restrict_fraction(domains: list[Domain], fraction: float, rng: np.random.Generator) -> list[Domain]:
    """Keep ``floor(fraction * N)`` samples per domain, without replacement."""
    if not 0 < fraction <= 1:
        raise ValueError(f"data_fraction must be in (0, 1], got {fraction}")
    out = []
    for d in domains:
        n = int(math.floor(fraction * len(d) + 1e-9))
        if n == 0:
            raise ValueError(f"data_fraction={fraction} leaves no samples in domain {d.domain_id!r}")
        if n == len(d):
            out.append(d)
        else:
            out.append(d.subset(np.sort(rng.choice(len(d), size=n, replace=False))))
    return out


def check_disjoint(visible: set, targets: set) -> None:
    overlap = visible & targets
    if overlap:
        raise LeakageError(f"target domains visible to training: {sorted(overlap)}")


# training phases --------------------------------------------------------------

def initial_params(config: ExperimentConfig, base: list[Task], novel: Task, seed: int) -> ParameterSet:
    heads = {t.task_id: t.class_count for t in base}
    if NOVEL_HEAD in heads:
        raise ValueError(f"task id {NOVEL_HEAD!r} is reserved")
    heads[NOVEL_HEAD] = novel.class_count
    widths = [novel.dim, *config.hidden_widths]
    return init_params(widths, heads, _stream(seed, _INIT))


def pretrain(base_tasks: list[Task], novel_src_domains: list[Domain], config: ExperimentConfig,
             params: ParameterSet, method: str | None = None,
             rng: np.random.Generator | None = None,
             probe_rng: np.random.Generator | None = None) -> PretrainResult:
    """Episodic training over the base pool; returns a new parameter set.

    ``erm`` skips the phase. ``mldg_uniform`` samples tasks uniformly;
    ``mats`` re-scores the pool every ``refresh_interval`` iterations.
    """
    method = method or config.method
    params = params.copy()
    result = PretrainResult(params)
    if method == "erm" or config.pretrain_iters == 0:
        return result
    if not base_tasks:
        raise ValueError(f"method {method!r} needs at least one base task")
    for t in base_tasks:
        if not t.tar_domains:
            raise ValueError(f"base task {t.task_id!r} has no target domains")
        if t.task_id not in params.heads:
            raise ValueError(f"no head initialized for base task {t.task_id!r}")

    rng = rng or _stream(config.seed, _PRETRAIN)
    probe_rng = probe_rng or _stream(config.seed, _PROBE)
    mats_cfg = replace(config.mats, gamma=0.0) if method == "mats_gamma0" else config.mats
    ep_cfg = config.episodic
    M = len(base_tasks)
    p = np.full(M, 1.0 / M)
    for it in range(config.pretrain_iters):
        if method != "mldg_uniform" and it % mats_cfg.refresh_interval == 0:
            records = score_pool(params.theta, base_tasks, novel_src_domains, mats_cfg, probe_rng)
            result.refreshes.append(records)
            p = np.array([r.p for r in records])
        m = sample_task(p, rng)
        result.sampled.append(m)
        task = base_tasks[m]
        episode = make_episode(task, ep_cfg.batch_per_domain, rng)
        pair = (params.theta, params.heads[task.task_id])
        _, grads = mldg_objective(pair, episode, ep_cfg)
        sgd_update(pair, grads, ep_cfg.eta)
    return result


def finetune(params: ParameterSet, novel_src_domains: list[Domain], config: ExperimentConfig,
             rng: np.random.Generator | None = None) -> ParameterSet:
    """ERM on batches pooled across the visible novel source domains.

    Updates the extractor and the novel head; base heads are dropped.
    """
    if not novel_src_domains or sum(len(d) for d in novel_src_domains) == 0:
        raise ValueError("no usable novel-task samples to fine-tune on")
    rng = rng or _stream(config.seed, _FINETUNE)
    out = ParameterSet([(w.copy(), b.copy()) for w, b in params.theta],
                       {NOVEL_HEAD: tuple(a.copy() for a in params.heads[NOVEL_HEAD])})
    eta = config.finetune_eta or config.episodic.eta
    bpd = config.episodic.batch_per_domain
    for _ in range(config.finetune_iters):
        batches = sample_batch(novel_src_domains, bpd, rng)
        merged = (np.concatenate([b[0] for b in batches]), np.concatenate([b[1] for b in batches]))
        pair = (out.theta, out.heads[NOVEL_HEAD])
        _, grads = erm_step(pair, merged)
        sgd_update(pair, grads, eta)
    return out


def accuracy(theta, head, domain: Domain) -> float:
    if len(domain) == 0:
        raise ValueError(f"target domain {domain.domain_id!r} is empty")
    pred = np.argmax(predict(theta, head, domain.X), axis=1)
    return float(np.mean(pred == domain.y))


def evaluate(theta, psi, target_domains: list[Domain]) -> tuple[float, dict[str, float]]:
    """Per-domain argmax accuracy and its unweighted mean."""
    if not target_domains:
        raise ValueError("no target domains to evaluate on")
    per = {d.domain_id: accuracy(theta, psi, d) for d in target_domains}
    return float(np.mean(list(per.values()))), per


# cells --------------------------------------------------------------------------

@dataclass
class Cell:
    method: str
    K: int
    seed: int
    data_fraction: float
    base: list[Task]
    sources: list[Domain]
    targets: list[Domain]
    params: ParameterSet


def prepare_cells(config: ExperimentConfig, method: str, K: int, seed: int, fraction: float) -> list[Cell]:
    base, novel = build_tasks(config, seed)
    params = initial_params(config, base, novel, seed)
    cells = []
    for split in source_splits(novel, K, config.split, _stream(seed, _SPLIT)):
        chosen = [novel.domain(i) for i in split]
        targets = [d for d in novel.domains if d.domain_id not in split]
        if not targets:
            raise ValueError(f"K={K} leaves no target domains to evaluate on")
        sources = restrict_fraction(chosen, fraction, _stream(seed, _FRACTION))
        visible = {(t.task_id, d.domain_id) for t in base for d in t.domains}
        visible |= {(novel.task_id, d.domain_id) for d in sources}
        check_disjoint(visible, {(novel.task_id, d.domain_id) for d in targets})
        cells.append(Cell(method, K, seed, fraction, base, sources, targets, params))
    return cells


def _cell_config(cell: Cell, config: ExperimentConfig) -> ExperimentConfig:
    return replace(config, method=cell.method, K=cell.K, seed=cell.seed, data_fraction=cell.data_fraction)


def pretrain_cell(cell: Cell, config: ExperimentConfig) -> PretrainResult:
    """Pre-training phase of a cell; an empty base pool means pure novel-task ERM."""
    if not cell.base:
        return PretrainResult(cell.params.copy())
    cfg = _cell_config(cell, config)
    return pretrain(cell.base, cell.sources, cfg, cell.params, cell.method,
                    _stream(cell.seed, _PRETRAIN), _stream(cell.seed, _PROBE))


def finetune_cell(cell: Cell, params: ParameterSet, config: ExperimentConfig) -> ParameterSet:
    return finetune(params, cell.sources, _cell_config(cell, config), _stream(cell.seed, _FINETUNE))


def evaluate_cell(cell: Cell, params: ParameterSet, config: ExperimentConfig) -> MetricsRecord:
    ood, per = evaluate(params.theta, params.heads[NOVEL_HEAD], cell.targets)
    iters = (config.pretrain_iters if cell.method != "erm" and cell.base else 0) + config.finetune_iters
    return MetricsRecord(cell.method, cell.K, cell.seed, cell.data_fraction, ood, per, iters,
                         tuple(d.domain_id for d in cell.sources))


def run_cell(cell: Cell, config: ExperimentConfig) -> tuple[MetricsRecord, PretrainResult]:
    pre = pretrain_cell(cell, config)
    tuned = finetune_cell(cell, pre.params, config)
    return evaluate_cell(cell, tuned, config), pre


def similarity_records(cell: Cell, config: ExperimentConfig, params: ParameterSet | None = None):
    """Score the base pool against the cell's visible novel domains.

    Probes are drawn from the same stream the first pre-training refresh uses.
    """
    if not cell.base:
        raise ValueError("similarity needs at least one base task")
    theta = (params or cell.params).theta
    cfg = replace(config.mats, gamma=0.0) if cell.method == "mats_gamma0" else config.mats
    return score_pool(theta, cell.base, cell.sources, cfg, _stream(cell.seed, _PROBE))


# results file -------------------------------------------------------------------

def read_metrics(path) -> list[MetricsRecord]:
    """Parse a metrics file back into records.

    A record is the run of per-domain rows closed by its ``ALL`` row.
    """
    path = Path(path)
    if not path.exists():
        return []
    records, pending = [], {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line or line == HEADER:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields")
        method, k, seed, frac, dom, acc = parts
        if dom == "ALL":
            records.append(MetricsRecord(method, int(k), int(seed), float(frac), float(acc), pending))
            pending = {}
        else:
            pending[dom] = float(acc)
    return records


def _check_writable(path) -> None:
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if path.exists():
        if path.is_dir() or not os.access(path, os.W_OK):
            raise PermissionError(f"output path {path} is not writable")
    elif not parent.is_dir() or not os.access(parent, os.W_OK):
        raise PermissionError(f"output path {path} is not writable")


def run_experiment(config: ExperimentConfig, trace: list | None = None) -> list[MetricsRecord]:
    """Run every requested cell, appending rows to ``config.output_path``.

    Cells already present in the output file are not rerun. ``trace``, when
    given, collects ``(record, PretrainResult)`` pairs of cells actually run.
    """
    out = config.output_path
    done = {}
    if out:
        _check_writable(out)
        done = {r.key: r for r in read_metrics(out)}
        if not Path(out).exists() or Path(out).stat().st_size == 0:
            Path(out).write_text(HEADER + "\n", encoding="utf-8")

    records = []
    for method, K, seed, frac in config.grid():
        for cell in prepare_cells(config, method, K, seed, frac):
            key = (method, K, seed, frac, frozenset(d.domain_id for d in cell.targets))
            if key in done:
                records.append(done[key])
                continue
            rec, pre = run_cell(cell, config)
            log.info("%s K=%d seed=%d frac=%g -> %.4f", method, K, seed, frac, rec.ood_accuracy)
            if trace is not None:
                trace.append((rec, pre))
            if out:
                with open(out, "a", encoding="utf-8") as fh:
                    fh.write("\n".join(rec.rows()) + "\n")
            done[key] = rec
            records.append(rec)
    return records


# summaries ------------------------------------------------------------------------

@dataclass
class Summary:
    title: str
    row_label: str
    col_label: str
    rows: list
    cols: list
    cells: dict  # (row, col) -> list of per-seed OOD accuracies

    def stat(self, row, col) -> tuple[float, float, int] | None:
        vals = self.cells.get((row, col))
        if not vals:
            return None
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
        return float(np.mean(vals)), std, len(vals)

    def render(self) -> str:
        def fmt(cell):
            st = self.stat(*cell)
            if st is None:
                return "absent"
            mean, std, _ = st
            return f"{mean:.4f} ± {std:.4f}" if not math.isnan(std) else f"{mean:.4f} ± n/a"

        header = [f"{self.row_label}\\{self.col_label}"] + [str(c) for c in self.cols]
        body = [[str(r)] + [fmt((r, c)) for c in self.cols] for r in self.rows]
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
        lines = [self.title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(line, widths)) for line in body]
        return "\n".join(line.rstrip() for line in lines)


def _seed_means(records, row_key, col_key) -> dict:
    """Average over source splits within a seed, then group by (row, col)."""
    per_seed: dict = {}
    for r in records:
        per_seed.setdefault((row_key(r), col_key(r), r.seed), []).append(r.ood_accuracy)
    cells: dict = {}
    for (row, col, _), vals in sorted(per_seed.items(), key=lambda kv: kv[0][2]):
        cells.setdefault((row, col), []).append(float(np.mean(vals)))
    return cells


def summarize(records, row_key, col_key, rows, cols, title="", row_label="", col_label="") -> Summary:
    return Summary(title, row_label, col_label, list(rows), list(cols), _seed_means(records, row_key, col_key))


def sweep_k(config: ExperimentConfig) -> tuple[Summary, list[MetricsRecord]]:
    methods = config.methods or [config.method]
    ks = config.ks or [1, 2, 3]
    records = run_experiment(replace(config, methods=methods, ks=ks))
    return summarize(records, lambda r: r.method, lambda r: r.K, methods, ks,
                     "OOD accuracy by number of source domains", "method", "K"), records


def sweep_fraction(config: ExperimentConfig) -> tuple[Summary, list[MetricsRecord]]:
    methods = config.methods or ["erm", "mldg_uniform", "mats"]
    fracs = config.data_fractions or [0.05, 0.2, 0.5, 1.0]
    records = run_experiment(replace(config, methods=methods, data_fractions=fracs))
    return summarize(records, lambda r: r.method, lambda r: r.data_fraction, methods, fracs,
                     "OOD accuracy by available fraction of novel data", "method", "fraction"), records


ABLATION_ARMS = ("mldg_uniform", "mats_gamma0", "mats")


def ablate_gamma(config: ExperimentConfig) -> tuple[Summary, list[MetricsRecord]]:
    ks = config.ks or [config.K]
    records = run_experiment(replace(config, methods=list(ABLATION_ARMS), ks=ks))
    return summarize(records, lambda r: r.K, lambda r: r.method, ks, ABLATION_ARMS,
                     "Similarity ablation", "K", "arm"), records


def base_task_contribution(config: ExperimentConfig) -> Summary:
    """Pre-train on each base task alone and compare with no pre-training.

    Rows are ``none`` followed by the base task ids; columns are K. The
    episodic method is ``mldg_uniform`` (a single task makes the sampler moot).
    """
    ks = [int(k) for k in (config.ks or [config.K])]
    seeds = [int(s) for s in (config.seeds or [config.seed])]
    frac = float(config.data_fraction)
    labels = ["none"]
    cells: dict = {}
    for K in ks:
        for seed in seeds:
            for cell in prepare_cells(config, "erm", K, seed, frac):
                rec, _ = run_cell(cell, config)
                cells.setdefault(("none", K, seed), []).append(rec.ood_accuracy)
                for task in cell.base:
                    if task.task_id not in labels:
                        labels.append(task.task_id)
                    single = replace(cell, method="mldg_uniform", base=[task])
                    rec, _ = run_cell(single, config)
                    cells.setdefault((task.task_id, K, seed), []).append(rec.ood_accuracy)
    grouped: dict = {}
    for (label, K, _), vals in cells.items():
        grouped.setdefault((label, K), []).append(float(np.mean(vals)))
    return Summary("OOD accuracy after pre-training on a single base task", "base task", "K",
                   labels, ks, grouped)
