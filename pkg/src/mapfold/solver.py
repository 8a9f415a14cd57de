"""Reconstruction loops: the alternating denoise/data-match solver, the
posterior-sampling and no-prior baselines, replica management, and
likelihood-based outlier filtering.

All randomness flows from a root seed; replica r draws from the stream
(seed, r), so runs are reproducible bit for bit and replicas may execute
concurrently.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .prior import CorrelatedPrior, Schedule

DIVERGENCE_FACTOR = 1e6  # abort gradient-only runs past this loss blow-up


@dataclass
class LikelihoodBinding:
    """One measurement term: evaluator, step size, momentum, optional gating.

    ``window`` restricts gradient accumulation to epochs in [start, end);
    outside it the momentum buffer only decays.  ``rt_schedule(step, total)``
    supplies the per-epoch resolution cutoff for band-limited likelihoods.
    """

    likelihood: object
    lr: float
    momentum: float = 0.9
    window: tuple[int, int] | None = None
    rt_schedule: object = None
    label: str = ""

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.label:
            self.label = getattr(self.likelihood, "label", "likelihood")

    def active(self, step: int) -> bool:
        if self.window is None:
            return True
        return self.window[0] <= step < self.window[1]

    def rt_at(self, step: int, total: int):
        if self.rt_schedule is None:
            return None
        return self.rt_schedule(step, total)


def resolution_annealing(start: float = 5.0, end: float = 1.5,
                         anneal_fraction: float = 0.25):
    """Hold ``start`` then ramp linearly to ``end`` over the final fraction."""
    if not 0.0 < anneal_fraction <= 1.0:
        raise ValueError("anneal_fraction must lie in (0, 1]")

    def rt(step: int, total: int) -> float:
        knee = (1.0 - anneal_fraction) * total
        if step <= knee or total == knee:
            return start
        return start + (end - start) * (step - knee) / (total - knee)

    return rt


@dataclass
class SolverConfig:
    total_steps: int = 1000
    schedule_kind: str = "linear_time"
    beta_min: float = 0.2
    beta_max: float = 20.0
    seed: int = 0
    replicas: int = 1
    jobs: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def schedule(self) -> Schedule:
        return Schedule(self.schedule_kind, self.total_steps,
                        self.beta_min, self.beta_max)


def task_defaults(task: str, n_measurements: int | None = None) -> dict:
    """Stock hyperparameters per task: step sizes, momenta, schedules."""
    if task == "complete":
        return {"lr": 0.3, "momentum": 0.9, "steps": 1000,
                "schedule": "linear_time"}
    if task == "distances":
        if not n_measurements:
            raise ValueError("distances defaults need the measurement count")
        return {"lr": 200.0 / n_measurements, "momentum": 0.99, "steps": 1000,
                "schedule": "sqrt_time"}
    if task == "refine":
        return {"lr_model": 0.1, "lr_density": 0.01, "momentum": 0.9,
                "steps": 4000, "schedule": "sqrt_time",
                "rt_start": 5.0, "rt_end": 1.5, "rt_anneal_fraction": 0.25}
    raise ValueError(f"unknown task {task!r}")


@dataclass
class ReplicaResult:
    index: int
    status: str                      # "ok" or "aborted: ..."
    coords: np.ndarray | None        # final (4N, 3), None if aborted early
    final_z: np.ndarray | None
    final_losses: dict
    trace: np.ndarray                # (T, n_bindings + 1): per-binding, total

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class RunReport:
    replicas: list
    binding_labels: list
    metadata: dict
    wall_time: float = 0.0

    def ok_replicas(self):
        return [r for r in self.replicas if r.ok]

    def to_json_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "wall_time_s": self.wall_time,
            "binding_labels": self.binding_labels,
            "replicas": [
                {
                    "index": r.index,
                    "status": r.status,
                    "final_losses": {k: (None if v is None or not math.isfinite(v)
                                         else v)
                                     for k, v in r.final_losses.items()},
                }
                for r in self.replicas
            ],
        }

    def write_traces_csv(self, directory):
        """One CSV per replica: epoch, one column per binding, total."""
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for rep in self.replicas:
            path = directory / f"trace_replica{rep.index}.csv"
            with open(path, "w") as fh:
                fh.write("epoch," + ",".join(self.binding_labels)
                         + ("," if self.binding_labels else "") + "total\n")
                for epoch, row in enumerate(rep.trace):
                    cells = ["" if not math.isfinite(v) else repr(float(v))
                             for v in row]
                    fh.write(f"{epoch}," + ",".join(cells) + "\n")
            paths.append(path)
        return paths


class ReplicaAborted(RuntimeError):
    pass


def _fresh_bindings(bindings):
    return [replace(b) for b in bindings]


def _final_losses(bindings, z, coords, total_steps):
    losses = {}
    for b in bindings:
        rt = b.rt_at(total_steps - 1, total_steps)
        try:
            losses[b.label], _ = b.likelihood.evaluate(z, coords, rt)
        except Exception:
            losses[b.label] = float("nan")
    return losses


def _reverse_replica(prior, schedule, denoiser, bindings, seed, index,
                     z_init=None, guidance=None):
    """One replica of the reverse loop shared by the solver and the
    posterior-sampling baseline (``guidance`` hooks in after each renoise)."""
    rng = np.random.default_rng((seed, index))
    dim = prior.dim
    total = schedule.total_steps
    z = rng.standard_normal((dim, 3)) if z_init is None else np.array(z_init, float)
    if z.shape != (dim, 3):
        raise ValueError("z_init has wrong shape")
    bindings = _fresh_bindings(bindings)
    velocity = [np.zeros((dim, 3)) for _ in bindings]
    trace = np.full((total, len(bindings) + 1), np.nan)

    def fail(step, why):
        return ReplicaResult(index, f"aborted at step {step}: {why}", None, None,
                             {b.label: float("nan") for b in bindings}, trace)

    for step in range(total):
        t = schedule.time_of_step(step)
        t_next = schedule.time_of_step(step + 1)
        x = prior.matrix @ z
        try:
            xhat = denoiser.denoise(x, t)
        except Exception as exc:
            return fail(step, f"denoiser failed ({exc})")
        if not np.all(np.isfinite(xhat)):
            return fail(step, "denoiser produced non-finite output")
        z_tilde = solve_triangular(prior.matrix, xhat, lower=True)
        total_loss = 0.0
        any_active = any(b.active(step) for b in bindings)
        coords_tilde = prior.matrix @ z_tilde if any_active else None
        for i, b in enumerate(bindings):
            if b.active(step):
                loss, grad = b.likelihood.evaluate(z_tilde, coords_tilde,
                                                   b.rt_at(step, total))
                velocity[i] = b.momentum * velocity[i] + b.lr * grad
                trace[step, i] = loss
                total_loss += loss
            else:
                velocity[i] = b.momentum * velocity[i]
        trace[step, -1] = total_loss if bindings else np.nan
        z_hat = z_tilde
        for v in velocity:
            z_hat = z_hat + v
        a_next = schedule.alpha(t_next)
        s_next = schedule.sigma(t_next)
        z = a_next * z_hat
        if s_next > 0.0:
            z = z + s_next * rng.standard_normal((dim, 3))
        if guidance is not None:
            z = guidance(z, z_tilde, x, t)
        if not np.all(np.isfinite(z)):
            return fail(step, "non-finite state")
    coords = prior.matrix @ z
    return ReplicaResult(index, "ok", coords, z,
                         _final_losses(bindings, z, coords, total), trace)


def _run_replicas(worker, config):
    start = time.perf_counter()
    if config.jobs > 1 and config.replicas > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(worker, range(config.replicas)))
    else:
        results = [worker(i) for i in range(config.replicas)]
    return results, time.perf_counter() - start


def _metadata(config, prior, bindings, extra=None):
    md = {
        "seed": config.seed,
        "replicas": config.replicas,
        "total_steps": config.total_steps,
        "schedule": config.schedule_kind,
        "prior": {"n_residues": prior.n_residues, "a": prior.a, "b": prior.b},
        "bindings": [{"label": b.label, "lr": b.lr, "momentum": b.momentum}
                     for b in bindings],
    }
    if extra:
        md.update(extra)
    return md


def run_adp(config: SolverConfig, prior: CorrelatedPrior, denoiser, bindings,
            z_init=None) -> RunReport:
    """Alternate denoising with momentum ascent on the measurement terms.

    Per step: pull the iterate through the denoiser at the current noise
    level, accumulate each active binding's gradient into its momentum
    buffer at that denoised point, add the buffers, then renoise to the next
    level.  Returns the unwhitened chains per replica; a replica that hits a
    NaN or a denoiser failure is marked aborted while the others continue.
    """
    schedule = config.schedule()
    worker = lambda i: _reverse_replica(prior, schedule, denoiser, bindings,
                                        config.seed, i, z_init)
    results, wall = _run_replicas(worker, config)
    return RunReport(results, [b.label for b in bindings],
                     _metadata(config, prior, bindings, {"method": "adp"}), wall)


def run_dps(config: SolverConfig, prior: CorrelatedPrior, denoiser, binding,
            zeta_prime: float) -> RunReport:
    """Posterior-sampling baseline: reverse step plus guidance through the
    denoiser.

    After each ancestral update the iterate takes a step of size zeta_prime
    down the gradient of the squared masked-coordinate misfit evaluated at
    the denoised estimate, differentiated with respect to the *noisy*
    iterate.  In the whitened frame the denoiser Jacobian is symmetric for
    any exact posterior-mean denoiser, so the vector-Jacobian product is
    computed with the forward ``jvp``.  With zeta_prime = 0 the trajectory
    is exactly unconditional reverse sampling.
    """
    schedule = config.schedule()
    meas = binding.likelihood.meas if hasattr(binding.likelihood, "meas") else None
    if meas is None:
        raise ValueError("run_dps needs a raw masked-linear binding")
    rows = meas.mask_rows
    mr_t = prior.matrix[rows, :].T  # (dim, m)

    def guidance(z_next, z_tilde, x_t, t):
        if zeta_prime == 0.0:
            return z_next
        residual = meas.observed - (prior.matrix[rows, :] @ z_tilde)
        u = mr_t @ residual
        jv = denoiser.jvp(x_t, t, prior.matrix @ u)
        grad = -2.0 * solve_triangular(prior.matrix, jv, lower=True)
        return z_next - zeta_prime * grad

    worker = lambda i: _reverse_replica(prior, schedule, denoiser, [binding],
                                        config.seed, i, None, guidance)
    results, wall = _run_replicas(worker, config)
    return RunReport(results, [binding.label],
                     _metadata(config, prior, [binding],
                               {"method": "dps", "zeta_prime": zeta_prime}), wall)


NO_PRIOR_VARIANTS = ("plain_gd", "momentum", "preconditioned",
                     "preconditioned_momentum")


def run_no_prior(bindings, prior: CorrelatedPrior, config: SolverConfig,
                 variant: str = "plain_gd", learning_rate: float | None = None,
                 tol: float = 1e-6, monitor=None) -> RunReport:
    """Pure gradient ascent on the summed log-likelihoods; no denoiser.

    ``variant`` picks momentum on/off (the binding's own momentum
    coefficient is used when on).  Whether the objective is the raw or the
    rotated (preconditioned) quadratic is decided by which likelihoods the
    caller binds; the variant name only records the choice for reporting.
    Convergence is declared when the monitored loss falls to ``tol`` of its
    initial value; a loss blow-up past 1e6x aborts with the trace kept.
    """
    if variant not in NO_PRIOR_VARIANTS:
        raise ValueError(f"variant must be one of {NO_PRIOR_VARIANTS}")
    if not bindings:
        raise ValueError("run_no_prior needs at least one binding")
    use_momentum = variant in ("momentum", "preconditioned_momentum")
    schedule_total = config.total_steps

    def monitored(z, coords):
        if monitor is not None:
            return -monitor.evaluate(z, coords)[0]
        return -sum(b.likelihood.evaluate(z, coords)[0] for b in bindings)

    def worker(index):
        rng = np.random.default_rng((config.seed, index))
        dim = prior.dim
        z = rng.standard_normal((dim, 3))
        local = _fresh_bindings(bindings)
        velocity = [np.zeros((dim, 3)) for _ in local]
        trace = np.full((schedule_total, len(local) + 1), np.nan)
        coords = prior.matrix @ z
        initial = monitored(z, coords)
        floor = max(initial, 1e-300)
        status = "nonconverged"
        steps_taken = schedule_total
        for step in range(schedule_total):
            coords = prior.matrix @ z
            total_loss = 0.0
            step_vec = np.zeros((dim, 3))
            for i, b in enumerate(local):
                lr = b.lr if learning_rate is None else learning_rate
                loss, grad = b.likelihood.evaluate(z, coords)
                if use_momentum:
                    velocity[i] = b.momentum * velocity[i] + lr * grad
                    step_vec += velocity[i]
                else:
                    step_vec += lr * grad
                trace[step, i] = loss
                total_loss += loss
            z = z + step_vec
            trace[step, -1] = total_loss
            current = monitored(z, prior.matrix @ z)
            if not math.isfinite(current) or current > DIVERGENCE_FACTOR * floor:
                status = f"aborted at step {step}: divergence"
                steps_taken = step + 1
                break
            if current <= tol * floor:
                status = "ok"
                steps_taken = step + 1
                break
        else:
            if monitored(z, prior.matrix @ z) <= tol * floor:
                status = "ok"
        coords = prior.matrix @ z
        result = ReplicaResult(index, status, coords, z,
                               _final_losses(local, z, coords, schedule_total),
                               trace[:steps_taken])
        return result

    results, wall = _run_replicas(worker, config)
    return RunReport(results, [b.label for b in bindings],
                     _metadata(config, prior, bindings,
                               {"method": f"no_prior/{variant}"}), wall)


def iterations_to_converge(report: RunReport) -> int | None:
    """Steps the (first) replica took to reach tolerance, None if it never did."""
    rep = report.replicas[0]
    if rep.status != "ok":
        return None
    return rep.trace.shape[0]


def filter_replicas(report: RunReport, data_fit, keep_fraction: float) -> RunReport:
    """Keep the ceil(fraction * n) replicas that best fit the data term.

    Ranking uses only the supplied likelihood evaluated at each replica's
    final state (no ground truth); aborted replicas rank worst; ties break
    toward the lower replica index.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    n_keep = math.ceil(keep_fraction * len(report.replicas))
    scored = []
    for rep in report.replicas:
        if rep.ok and rep.final_z is not None:
            score, _ = data_fit.evaluate(rep.final_z, rep.coords, None)
            if not math.isfinite(score):
                score = -math.inf
        else:
            score = -math.inf
        scored.append((score, rep))
    order = sorted(range(len(scored)),
                   key=lambda i: (-scored[i][0], scored[i][1].index))
    kept = sorted(order[:n_keep])
    return RunReport([report.replicas[i] for i in kept], report.binding_labels,
                     {**report.metadata, "filtered_keep_fraction": keep_fraction},
                     report.wall_time)
