"""End-to-end fitting: initialize, run chains, relabel, summarize, pool, score."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import MixedDataset
from .evaluation import (
    ConvergenceReport,
    DiagnosticError,
    ModelScore,
    failed_score,
    monitored_parameters,
    mpsrf,
    score_model,
)
from .gibbs import ChainConfig, ChainFailure, SamplerData, run_chain
from .model import (
    Hyperparameters,
    InitResult,
    Structure,
    bootstrap_kmeans_init,
    default_hyperparameters,
)
from .postprocess import (
    FitResult,
    alignment_permutation,
    apply_relabel,
    kl_relabel,
    pool_chains,
    summarize,
)

log = logging.getLogger(__name__)

# spawn key of the initialization stream; chain streams use (chain_id, purpose)
INIT_STREAM = (1 << 31,)


@dataclass(frozen=True)
class FitConfig:
    G: int = 3
    structure: Structure = Structure.VVV
    chains: int = 4
    T: int = 500
    t_star: int = 200
    seed: int = 0
    k_percentile: int = 75
    bootstrap: int = 50
    spike_concentration: float = 1000.0
    overrides: dict = field(default_factory=dict)
    n_jobs: int = 1
    keep_traces: bool = False

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure.parse(self.structure))
        if self.chains < 1:
            raise ValueError("need at least one chain")
        ChainConfig(T=self.T, t_star=self.t_star)  # validates T / t_star

    def replace(self, **kw) -> FitConfig:
        return dataclasses.replace(self, **kw)


@dataclass
class FitOutcome:
    config: FitConfig
    hyper: Hyperparameters | None
    init: InitResult | None
    result: FitResult | None
    chain_results: list
    failures: list[ChainFailure]
    score: ModelScore
    convergence: ConvergenceReport | None = None
    traces: list | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None


def _run_one(args):
    data, structure, hyper, chain_cfg, init = args
    try:
        trace = run_chain(data, structure, hyper, chain_cfg, init)
    except ChainFailure as exc:
        return exc
    perms = kl_relabel(trace.P)
    trace = apply_relabel(trace, perms.perms)
    result = summarize(trace, data)
    result.diagnostics["relabel_passes"] = perms.passes
    return trace, result


def fit(ds: MixedDataset, config: FitConfig) -> FitOutcome:
    """Fit one (G, structure) model with ``config.chains`` independent chains.

    All chains share the initialization and hyperparameters and differ only
    in their sampler streams.  Chain failures are recorded, not retried.
    """
    G, structure = config.G, config.structure
    try:
        init = bootstrap_kmeans_init(ds, G, kernels.stream(config.seed, *INIT_STREAM), B=config.bootstrap)
        hyper = default_hyperparameters(
            ds, G, config.k_percentile, init, spike_concentration=config.spike_concentration
        )
        if config.overrides:
            hyper = hyper.with_overrides(**config.overrides)
    except (ValueError, np.linalg.LinAlgError) as exc:
        cause = f"initialization failed: {exc}"
        return FitOutcome(config, None, None, None, [], [], failed_score(G, structure, cause))
    data = SamplerData(ds)
    jobs = [
        (data, structure, hyper, ChainConfig(T=config.T, t_star=config.t_star, seed=config.seed, chain_id=c), init)
        for c in range(config.chains)
    ]
    if config.n_jobs > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.n_jobs, config.chains)) as pool:
            outputs = list(pool.map(_run_one, jobs))
    else:
        outputs = [_run_one(job) for job in jobs]

    failures = [o for o in outputs if isinstance(o, ChainFailure)]
    done = [o for o in outputs if not isinstance(o, ChainFailure)]
    chain_results = [None if isinstance(o, ChainFailure) else o[1] for o in outputs]
    for f in failures:
        log.warning("%s", f)
    if not done:
        cause = "; ".join(str(f) for f in failures)
        return FitOutcome(config, hyper, init, None, chain_results, failures, failed_score(G, structure, cause))

    traces = [t for t, _ in done]
    results = [r for _, r in done]
    pooled = pool_chains(results, ds)
    pooled.diagnostics["failed_chains"] = [f.chain_id for f in failures]

    convergence = None
    if len(traces) >= 2:
        # align every chain's relabeled trace to the first before comparing
        aligned = []
        for trace, res in zip(traces, results):
            perm = alignment_permutation(res.z_hat, results[0].z_hat, G)
            aligned.append(apply_relabel(trace, np.tile(perm, (len(trace), 1))))
        try:
            convergence = mpsrf([monitored_parameters(t) for t in aligned])
            pooled.diagnostics["mpsrf"] = convergence.mpsrf
        except DiagnosticError as exc:
            pooled.diagnostics["mpsrf_error"] = str(exc)
    score = score_model(ds, pooled)
    return FitOutcome(
        config, hyper, init, pooled, chain_results, failures, score, convergence,
        traces=traces if config.keep_traces else None,
    )

