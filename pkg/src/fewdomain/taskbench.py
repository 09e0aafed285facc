"""Synthetic multi-domain tasks and the precomputed-feature file format.

A synthetic task places one prototype per class in R^d. Each domain applies
a global transform (rotation in a coordinate plane, scaling, translation) to
the prototypes and adds isotropic Gaussian noise; labels are uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FeatureFileError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class Domain:
    domain_id: str
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError(f"domain {self.domain_id!r}: X must be (n, d) with one label per row")

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> Domain:
        return Domain(self.domain_id, self.X[idx], self.y[idx])


@dataclass
class Task:
    task_id: str
    class_count: int
    src_domains: list[Domain]
    tar_domains: list[Domain] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.src_domains:
            raise ValueError(f"task {self.task_id!r} has no source domains")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError(f"task {self.task_id!r} has duplicate domain ids")
        dims = {d.dim for d in self.domains}
        if len(dims) != 1:
            raise ValueError(f"task {self.task_id!r} mixes feature dimensions {sorted(dims)}")
        for d in self.domains:
            if len(d) == 0:
                raise ValueError(f"domain {d.domain_id!r} of task {self.task_id!r} is empty")
            if d.y.max() >= self.class_count or d.y.min() < 0:
                raise ValueError(f"domain {d.domain_id!r} has labels outside [0, {self.class_count})")

    @property
    def domains(self) -> list[Domain]:
        return list(self.src_domains) + list(self.tar_domains)

    @property
    def dim(self) -> int:
        return self.src_domains[0].dim

    def domain(self, domain_id: str) -> Domain:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(domain_id)


@dataclass
class DomainTransform:
    """Rotation by ``angle`` in coordinate ``plane``, then scale, then shift."""

    domain_id: str
    split: str = "src"
    angle: float = 0.0
    plane: tuple[int, int] = (0, 1)
    translation: np.ndarray | None = None
    scale: float = 1.0

    def matrix(self, d: int) -> np.ndarray:
        i, j = self.plane
        r = np.eye(d)
        c, s = math.cos(self.angle), math.sin(self.angle)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        return r

    def apply(self, points: np.ndarray) -> np.ndarray:
        d = points.shape[-1]
        out = self.scale * (points @ self.matrix(d).T)
        if self.translation is not None:
            out = out + np.asarray(self.translation, dtype=np.float64)
        return out


@dataclass
class TaskSpec:
    task_id: str
    class_prototypes: np.ndarray
    domain_transforms: list[DomainTransform]
    noise_sigma: float = 0.1
    n_per_domain: int = 200
    subspace_id: str = ""

    def validate(self) -> None:
        protos = np.asarray(self.class_prototypes, dtype=np.float64)
        if protos.ndim != 2 or protos.shape[0] < 2:
            raise ValueError("class_prototypes: need at least 2 prototype vectors")
        if self.n_per_domain < 1:
            raise ValueError(f"n_per_domain: must be >= 1, got {self.n_per_domain}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma: must be >= 0, got {self.noise_sigma}")
        if not self.domain_transforms:
            raise ValueError("domain_transforms: need at least one domain")
        d = protos.shape[1]
        for t in self.domain_transforms:
            if not t.scale > 0:
                raise ValueError(f"domain_transforms[{t.domain_id}].scale: must be > 0, got {t.scale}")
            if t.split not in ("src", "tar"):
                raise ValueError(f"domain_transforms[{t.domain_id}].split: must be src or tar, got {t.split!r}")
            i, j = t.plane
            if not (0 <= i < d and 0 <= j < d and i != j):
                raise ValueError(f"domain_transforms[{t.domain_id}].plane: invalid plane {t.plane} for d={d}")
            if t.translation is not None and np.shape(t.translation) != (d,):
                raise ValueError(f"domain_transforms[{t.domain_id}].translation: expected length {d}")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "subspace_id": self.subspace_id,
            "class_prototypes": np.asarray(self.class_prototypes).tolist(),
            "noise_sigma": self.noise_sigma,
            "n_per_domain": self.n_per_domain,
            "domain_transforms": [
                {
                    "domain_id": t.domain_id,
                    "split": t.split,
                    "angle": t.angle,
                    "plane": list(t.plane),
                    "translation": None if t.translation is None else np.asarray(t.translation).tolist(),
                    "scale": t.scale,
                }
                for t in self.domain_transforms
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> TaskSpec:
        transforms = [
            DomainTransform(
                domain_id=t["domain_id"],
                split=t.get("split", "src"),
                angle=float(t.get("angle", 0.0)),
                plane=tuple(t.get("plane", (0, 1))),
                translation=None if t.get("translation") is None else np.asarray(t["translation"], float),
                scale=float(t.get("scale", 1.0)),
            )
            for t in data["domain_transforms"]
        ]
        return cls(
            task_id=data["task_id"],
            class_prototypes=np.asarray(data["class_prototypes"], dtype=np.float64),
            domain_transforms=transforms,
            noise_sigma=float(data.get("noise_sigma", 0.1)),
            n_per_domain=int(data.get("n_per_domain", 200)),
            subspace_id=data.get("subspace_id", ""),
        )


def make_task(spec: TaskSpec, rng: np.random.Generator) -> Task:
    spec.validate()
    protos = np.asarray(spec.class_prototypes, dtype=np.float64)
    n_cls, d = protos.shape
    src, tar = [], []
    for t in spec.domain_transforms:
        y = rng.integers(0, n_cls, size=spec.n_per_domain)
        x = t.apply(protos)[y] + spec.noise_sigma * rng.standard_normal((spec.n_per_domain, d))
        (src if t.split == "src" else tar).append(Domain(t.domain_id, x, y))
    return Task(spec.task_id, n_cls, src, tar, {"subspace_id": spec.subspace_id})


def sample_batch(domains, n_per_domain: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Uniform draws with replacement, one ``(X, y)`` batch per domain."""
    if not domains:
        raise ValueError("sample_batch: no domains given")
    if n_per_domain < 1:
        raise ValueError(f"sample_batch: n_per_domain must be >= 1, got {n_per_domain}")
    out = []
    for d in domains:
        idx = rng.integers(0, len(d), size=n_per_domain)
        out.append((d.X[idx], d.y[idx]))
    return out


# feature files ---------------------------------------------------------------

def write_feature_file(path, tasks) -> None:
    """Write one or more tasks in the ``task_id,domain_id,split,label,v1..vd`` format."""
    if isinstance(tasks, Task):
        tasks = [tasks]
    dims = {t.dim for t in tasks}
    if len(dims) != 1:
        raise ValueError(f"all tasks in one file must share a dimension, got {sorted(dims)}")
    (d,) = dims
    lines = [f"#dim={d}"]
    for task in tasks:
        for split, doms in (("src", task.src_domains), ("tar", task.tar_domains)):
            for dom in doms:
                for x, y in zip(dom.X, dom.y):
                    vals = ",".join(repr(float(v)) for v in x)
                    lines.append(f"{task.task_id},{dom.domain_id},{split},{int(y)},{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_feature_tasks(path) -> list[Task]:
    """Parse every task in a feature file, in order of first appearance."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#dim="):
        raise FeatureFileError(1, "missing '#dim=<d>' header")
    try:
        d = int(lines[0][len("#dim="):])
    except ValueError:
        raise FeatureFileError(1, f"bad header {lines[0]!r}") from None
    if d < 1:
        raise FeatureFileError(1, f"dimension must be >= 1, got {d}")

    # task -> domain -> [split, xs, ys]
    tasks: dict[str, dict[str, list]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 5:
            raise FeatureFileError(lineno, "expected task_id,domain_id,split,label,v1,...")
        task_id, dom_id, split, label = parts[:4]
        if not task_id or not dom_id:
            raise FeatureFileError(lineno, "empty task or domain id")
        if split not in ("src", "tar"):
            raise FeatureFileError(lineno, f"unknown split flag {split!r}")
        if not label.isdigit():
            raise FeatureFileError(lineno, f"label must be a non-negative integer, got {label!r}")
        if len(parts) - 4 != d:
            raise FeatureFileError(lineno, f"expected {d} feature values, got {len(parts) - 4}")
        try:
            vec = [float(v) for v in parts[4:]]
        except ValueError:
            raise FeatureFileError(lineno, "non-numeric feature value") from None
        entry = tasks.setdefault(task_id, {}).setdefault(dom_id, [split, [], []])
        if entry[0] != split:
            raise FeatureFileError(lineno, f"domain {dom_id!r} appears under both splits")
        entry[1].append(vec)
        entry[2].append(int(label))

    if not tasks:
        raise FeatureFileError(len(lines), "no samples")
    out = []
    for task_id, doms in tasks.items():
        src, tar, labels = [], [], set()
        for dom_id, (split, xs, ys) in doms.items():
            dom = Domain(dom_id, np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64))
            labels.update(ys)
            (src if split == "src" else tar).append(dom)
        # classes present are recorded; C covers the largest label seen
        meta = {"classes": sorted(labels), "source_file": str(path)}
        out.append(Task(task_id, max(max(labels) + 1, 2), src, tar, meta))
    return out


def load_feature_file(path, task_id: str | None = None) -> Task:
    tasks = load_feature_tasks(path)
    if task_id is None:
        if len(tasks) != 1:
            raise ValueError(f"{path} holds {len(tasks)} tasks; pass task_id")
        return tasks[0]
    for t in tasks:
        if t.task_id == task_id:
            return t
    raise KeyError(f"task {task_id!r} not in {path}")
