"""Preset synthetic benches for the experiment harness.

All tasks live in R^10. Class prototypes occupy one of two disjoint
4-dim subspaces (``A`` = dims 0-3, ``B`` = dims 4-7) and share a common
offset inside that subspace; dims 8 and 9 are nuisance axes. A domain is
a rotation of the prototypes in a plane that mixes one class axis with one
nuisance axis, so a *shift family* is a choice of plane:

    u1: (first class axis, 8)      u2: (second class axis, 9)

Rotating by a multiple of ``delta`` degrees gives a family of domains. The
novel task exposes six source domains at 0, delta, ..., 5*delta in family
u1. A *matched* base task uses the same subspace and family; distractors
differ in subspace, in family, or both.
"""

from __future__ import annotations

import math

import numpy as np

from fewdomain.episodic import EpisodicConfig
from fewdomain.mats import MatsConfig
from fewdomain.pipeline import ExperimentConfig
from fewdomain.taskbench import DomainTransform, TaskSpec

DIM = 10
SUBSPACES = {"A": (0, 1, 2, 3), "B": (4, 5, 6, 7)}
FAMILIES = {"u1": (0, 8), "u2": (1, 9)}  # offsets into the subspace, nuisance axis

N_NOVEL_DOMAINS = 6
SEEDS = list(range(20))


def orthonormal_prototypes(subspace: str = "A", dim: int = DIM) -> np.ndarray:
    """One unit basis vector per class inside the subspace."""
    protos = np.zeros((len(SUBSPACES[subspace]), dim))
    for c, axis in enumerate(SUBSPACES[subspace]):
        protos[c, axis] = 1.0
    return protos


def bench_prototypes(subspace: str = "A", amplitude: float = 1.0, center: float = 8.0,
                     center_angle: float = 0.0) -> np.ndarray:
    """Zero-mean class simplex plus a shared offset of norm ``center``.

    ``center_angle`` (degrees) turns the offset away from the all-ones
    direction of the subspace, which changes the task's mean embedding
    without touching the class geometry.
    """
    axes = list(SUBSPACES[subspace])
    protos = amplitude * orthonormal_prototypes(subspace)
    protos[:, axes] -= protos[:, axes].mean(axis=0)
    a = math.radians(center_angle)
    direction = math.cos(a) * np.full(4, 0.5) + math.sin(a) * np.array([0.5, -0.5, 0.5, -0.5])
    protos[:, axes] += center * direction
    return protos


def rotation_plane(subspace: str, family: str) -> tuple[int, int]:
    offset, nuisance = FAMILIES[family]
    return SUBSPACES[subspace][offset], nuisance


def bench_task(task_id: str, subspace: str, family: str, src_steps, tar_steps=(), *,
               delta: float = 12.0, noise: float = 0.25, n_per_domain: int = 200,
               center: float = 8.0, center_angle: float = 0.0) -> TaskSpec:
    """Task whose domains are rotations by ``step * delta`` degrees."""
    plane = rotation_plane(subspace, family)
    transforms = [DomainTransform(f"s{i}", "src", math.radians(k * delta), plane)
                  for i, k in enumerate(src_steps)]
    transforms += [DomainTransform(f"t{i}", "tar", math.radians(k * delta), plane)
                   for i, k in enumerate(tar_steps)]
    tag = subspace if not center_angle else f"{subspace}@{center_angle:g}"
    return TaskSpec(task_id, bench_prototypes(subspace, center=center, center_angle=center_angle),
                    transforms, noise, n_per_domain, tag)


def novel_task(delta: float = 12.0, noise: float = 0.25) -> TaskSpec:
    return bench_task("novel", "A", "u1", range(N_NOVEL_DOMAINS), delta=delta, noise=noise)


def base_task(task_id: str, subspace: str = "A", family: str = "u1", *, delta: float = 12.0,
              noise: float = 0.25, center_angle: float = 0.0) -> TaskSpec:
    """Base task seen at steps {0, 1} with targets at steps {3, 4, 5}."""
    return bench_task(task_id, subspace, family, (0, 1), (3, 4, 5), delta=delta, noise=noise,
                      center_angle=center_angle)


def pool(distractor: str, n_matched: int = 2, n_distractors: int = 6, *,
         delta: float = 12.0, noise: float = 0.25) -> list[TaskSpec]:
    """Matched tasks first, then distractors of kind ``"<subspace>:<family>"``."""
    sub, fam = distractor.split(":")
    specs = [base_task(f"match{i}", delta=delta, noise=noise) for i in range(n_matched)]
    specs += [base_task(f"distract{i}", sub, fam, delta=delta, noise=noise)
              for i in range(n_distractors)]
    return specs


def _config(base, novel, **kw) -> ExperimentConfig:
    defaults = dict(
        base_task_specs=base,
        novel_task_spec=novel,
        K=2,
        pretrain_iters=300,
        finetune_iters=200,
        hidden_widths=[128, 64],
        finetune_eta=0.05,
        episodic=EpisodicConfig(eta=0.05),
        mats=MatsConfig(probe_per_domain=200),
        seeds=list(SEEDS),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def mats_pool(delta: float = 12.0, **kw) -> ExperimentConfig:
    """Two matched base tasks among six in the other subspace and family."""
    kw.setdefault("methods", ["mldg_uniform", "mats"])
    return _config(pool("B:u2", delta=delta), novel_task(delta), **kw)


def gamma_pool(delta: float = 18.0, **kw) -> ExperimentConfig:
    """Distractors share the novel subspace but rotate in the other plane."""
    kw.setdefault("methods", ["mldg_uniform", "mats_gamma0", "mats"])
    return _config(pool("A:u2", delta=delta), novel_task(delta), **kw)


def k_trend(delta: float = 12.0, **kw) -> ExperimentConfig:
    """ERM on the novel task for K = 1, 2, 3, averaged over every K-subset."""
    kw.setdefault("methods", ["erm"])
    kw.setdefault("ks", [1, 2, 3])
    kw.setdefault("split", "all")
    return _config(pool("B:u2", delta=delta), novel_task(delta), **kw)


def fraction_sweep(delta: float = 12.0, **kw) -> ExperimentConfig:
    kw.setdefault("methods", ["erm", "mats"])
    kw.setdefault("data_fractions", [0.05, 0.2, 0.5, 1.0])
    return mats_pool(delta, **kw)


def contribution(delta: float = 12.0, **kw) -> ExperimentConfig:
    """One base task of each kind, for single-task pre-training comparisons."""
    base = [base_task("matched", delta=delta),
            base_task("same_semantics", "A", "u2", delta=delta),
            base_task("same_shift", "B", "u1", delta=delta),
            base_task("unrelated", "B", "u2", delta=delta)]
    kw.setdefault("methods", ["mldg_uniform"])
    return _config(base, novel_task(delta), **kw)


PRESETS = {
    "mats_pool": mats_pool,
    "gamma_pool": gamma_pool,
    "k_trend": k_trend,
    "fraction_sweep": fraction_sweep,
    "contribution": contribution,
}


def preset(name: str, **kw) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown bench {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](**kw)
