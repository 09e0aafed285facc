"""Similarity-weighted sampling of base tasks.

Each base task is scored against the novel task by two cosines over mean
embeddings: how close the source-side representations are (semantic), and
how well the base task's source-to-target shift lines up with some shift
observed between two novel source domains (domain shift). Sampling
probabilities are the floored combined scores, normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fewdomain.model import mean_domain_embedding
from fewdomain.taskbench import Domain, Task

DEGENERATE_NORM = 1e-12


@dataclass
class MatsConfig:
    gamma: float = 1.0
    epsilon_floor: float = 1e-6
    refresh_interval: int = 50
    probe_per_domain: int = 64

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.epsilon_floor > 0:
            raise ValueError(f"epsilon_floor must be > 0, got {self.epsilon_floor}")
        if self.refresh_interval < 1:
            raise ValueError(f"refresh_interval must be >= 1, got {self.refresh_interval}")
        if self.probe_per_domain < 1:
            raise ValueError(f"probe_per_domain must be >= 1, got {self.probe_per_domain}")


@dataclass
class SimilarityRecord:
    task_id: str
    s: float
    q: float
    sim: float
    p: float

    def row(self) -> str:
        return f"{self.task_id},{self.s!r},{self.q!r},{self.sim!r},{self.p!r}"


def cosine(u, v) -> float:
    """Cosine similarity; 0 when either vector has (near) zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"cosine: dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < DEGENERATE_NORM or nv < DEGENERATE_NORM:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def probe(domain: Domain, n: int | None, rng: np.random.Generator | None) -> Domain:
    """Random subset of at most ``n`` samples, without replacement."""
    if n is None or rng is None or len(domain) <= n:
        return domain
    return domain.subset(np.sort(rng.choice(len(domain), size=n, replace=False)))


def domain_means(theta, domains, probe_per_domain=None, rng=None) -> list[np.ndarray]:
    return [mean_domain_embedding(theta, probe(d, probe_per_domain, rng)) for d in domains]


def task_semantic_representation(theta, task: Task, side: str = "src",
                                 probe_per_domain: int | None = None, rng=None) -> np.ndarray:
    if side not in ("src", "tar"):
        raise ValueError(f"side must be 'src' or 'tar', got {side!r}")
    domains = task.src_domains if side == "src" else task.tar_domains
    if not domains:
        raise ValueError(f"task {task.task_id!r} has no {side} domains")
    return np.mean(domain_means(theta, domains, probe_per_domain, rng), axis=0)


def _source_domains(task_or_domains) -> list[Domain]:
    if isinstance(task_or_domains, Task):
        return task_or_domains.src_domains
    return list(task_or_domains)


def semantic_similarity(theta, base_task: Task, novel, probe_per_domain=None, rng=None) -> float:
    """``novel`` is the novel task or its list of visible source domains."""
    novel_src = _source_domains(novel)
    if not novel_src:
        raise ValueError("novel task has no source domains")
    z_base = task_semantic_representation(theta, base_task, "src", probe_per_domain, rng)
    z_novel = np.mean(domain_means(theta, novel_src, probe_per_domain, rng), axis=0)
    return cosine(z_base, z_novel)


def shift_similarity_from_means(novel_means, base_src_rep, base_tar_rep) -> float:
    """Best cosine between any ordered novel-domain difference and the base shift."""
    shift = np.asarray(base_tar_rep) - np.asarray(base_src_rep)
    best = None
    for k, zk in enumerate(novel_means):
        for j, zj in enumerate(novel_means):
            if k != j:
                c = cosine(zk - zj, shift)
                best = c if best is None else max(best, c)
    # a single domain offers no pair, hence no observed shift
    return 0.0 if best is None else best


def domain_shift_similarity(theta, base_task: Task, novel_src_domains, probe_per_domain=None, rng=None) -> float:
    if not base_task.tar_domains:
        raise ValueError(f"base task {base_task.task_id!r} has no target domains")
    novel_src = _source_domains(novel_src_domains)
    if len(novel_src) < 2:
        return 0.0
    means = domain_means(theta, novel_src, probe_per_domain, rng)
    src = task_semantic_representation(theta, base_task, "src", probe_per_domain, rng)
    tar = task_semantic_representation(theta, base_task, "tar", probe_per_domain, rng)
    return shift_similarity_from_means(means, src, tar)


def overall_similarity(s: float, q: float, gamma: float) -> float:
    return s + gamma * q


def sampling_distribution(sims, epsilon_floor: float = 1e-6) -> np.ndarray:
    sims = np.asarray(sims, dtype=np.float64)
    if sims.size == 0:
        raise ValueError("sampling_distribution: empty similarity list")
    floored = np.maximum(sims, epsilon_floor)
    return floored / floored.sum()


def sample_task(p, rng: np.random.Generator) -> int:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"sample_task: invalid distribution {p}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"sample_task: probabilities sum to {p.sum()}, not 1")
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    return min(idx, p.size - 1)


def score_pool(theta, base_tasks, novel_src_domains, cfg: MatsConfig,
               rng: np.random.Generator | None = None) -> list[SimilarityRecord]:
    """Similarity records for every base task against the visible novel domains.

    Each domain is embedded once, from a probe subsample when ``rng`` is given.
    """
    n = cfg.probe_per_domain if rng is not None else None
    novel_src = _source_domains(novel_src_domains)
    novel_means = domain_means(theta, novel_src, n, rng)
    z_novel = np.mean(novel_means, axis=0)
    s_list, q_list = [], []
    for task in base_tasks:
        if not task.tar_domains:
            raise ValueError(f"base task {task.task_id!r} has no target domains")
        src = np.mean(domain_means(theta, task.src_domains, n, rng), axis=0)
        tar = np.mean(domain_means(theta, task.tar_domains, n, rng), axis=0)
        s_list.append(cosine(src, z_novel))
        q_list.append(shift_similarity_from_means(novel_means, src, tar))
    sims = [overall_similarity(s, q, cfg.gamma) for s, q in zip(s_list, q_list)]
    p = sampling_distribution(sims, cfg.epsilon_floor)
    return [SimilarityRecord(t.task_id, s, q, sim, float(pm))
            for t, s, q, sim, pm in zip(base_tasks, s_list, q_list, sims, p)]
