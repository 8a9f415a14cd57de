"""Command-line entry point: wires configs to solver runs and writes artifacts.

Subcommands: complete, distances, refine, simulate-map, bench, serve-echo.
Exit codes: 0 success, 1 configuration error, 2 runtime failure (partial
artifacts are left in place).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import socket
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentSpec, load_config
from .denoise import GaussianLibraryDenoiser, OracleDenoiser
from .density import AtomSpec, DensityMap, DensityLikelihood, render_density
from .evaluate import MetricRecord, rmsd, rmsd_vs_completeness, write_metrics_csv
from .likelihood import (LinearLikelihood, RawLinearLikelihood, precondition)
from .mrcio import MrcFormatError, read_mrc, write_mrc
from .pdbio import PdbParseError, read_backbone, write_backbone
from .prior import BackboneChain, build_prior, unwhiten
from .remote import RemoteDenoiserClient, serve_denoiser
from .sampling import (delete_residues, mask_measurement,
                       measurement_from_partial, sample_distances)
from .solver import (LikelihoodBinding, RunReport, SolverConfig,
                     filter_replicas, iterations_to_converge,
                     resolution_annealing, run_adp, run_dps, run_no_prior,
                     task_defaults)
from .likelihood import DistanceLikelihood

# fixed per-purpose rng stream tags hung off the root seed
_STREAM_DECOYS = 1000003
_STREAM_MEAS_NOISE = 2000003
_STREAM_DISTANCES = 3000003
_STREAM_PARTIAL = 4000003
_STREAM_MAP_NOISE = 5000003


def _build_prior(spec: ExperimentSpec, n_residues: int):
    return build_prior(
        n_residues,
        radius_coeff=spec.get("prior.radius_coeff", 2.0),
        radius_exponent=spec.get("prior.radius_exponent", 0.4),
        scale_a=spec.get("prior.scale_a", 1.45),
        fix_b=spec.get("prior.fix_b"),
    )


def _solver_config(spec: ExperimentSpec, defaults: dict) -> SolverConfig:
    return SolverConfig(
        total_steps=int(spec.get("steps", defaults["steps"])),
        schedule_kind=_schedule_kind(spec.get("schedule", defaults["schedule"])),
        beta_min=float(spec.get("beta_min", 0.2)),
        beta_max=float(spec.get("beta_max", 20.0)),
        seed=int(spec.get("seed", 0)),
        replicas=int(spec.get("replicas", 8)),
        jobs=int(spec.get("jobs", os.cpu_count() or 1)),
    )


def _schedule_kind(name: str) -> str:
    aliases = {"linear": "linear_time", "sqrt": "sqrt_time"}
    return aliases.get(name, name)


def _make_decoys(prior, count, seed):
    rng = np.random.default_rng((seed, _STREAM_DECOYS))
    return [unwhiten(prior, rng.standard_normal((prior.dim, 3)))
            for _ in range(count)]


def _build_denoiser(spec: ExperimentSpec, prior, schedule, target: BackboneChain):
    kind = spec.get("denoiser", "library")
    seed = int(spec.get("seed", 0))
    if kind == "oracle":
        return OracleDenoiser(target.coords, float(spec.get("oracle.blend", 1.0)),
                              schedule)
    if kind == "gaussian":
        return GaussianLibraryDenoiser(prior, schedule, target.coords,
                                       spread=float(spec.get("gaussian.spread", 0.0)))
    if kind == "library":
        refs = _make_decoys(prior, int(spec.get("library.decoys", 15)), seed)
        if spec.get("library.include_target", True):
            refs.append(np.array(target.coords))
        return GaussianLibraryDenoiser(prior, schedule, np.stack(refs),
                                       spread=float(spec.get("library.spread", 0.1)))
    if kind.startswith("remote:"):
        return RemoteDenoiserClient(kind[len("remote:"):], prior.dim,
                                    timeout=float(spec.get("remote.timeout", 30.0)))
    raise ConfigError(f"unknown denoiser kind {kind!r}")


def _write_report(report: RunReport, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    report.write_traces_csv(out_dir)


def _write_chains(report: RunReport, out_dir: Path, residue_ids=None):
    for rep in report.replicas:
        if rep.coords is None:
            continue
        chain = BackboneChain.from_coords(rep.coords, residue_ids)
        write_backbone(chain, out_dir / f"replica_{rep.index}.pdb")


def _metrics_for_report(report, target, task, atoms="backbone", align="none"):
    records = []
    completeness = len(target.present_residues()) / target.n_residues
    best = None
    for rep in report.replicas:
        if rep.coords is None:
            value = float("nan")
        else:
            pred = BackboneChain.from_coords(rep.coords, target.residue_ids)
            value = rmsd(pred, target, atoms=atoms, align=align)
        loss = sum(v for v in rep.final_losses.values()
                   if v is not None and math.isfinite(v))
        records.append(MetricRecord(rep.index, task, value if math.isfinite(value)
                                    else 0.0, completeness, loss))
        if math.isfinite(value) and (best is None or value < best):
            best = value
    if best is not None:
        records.append(MetricRecord("best", task, best, completeness, 0.0))
    return records


def cmd_complete(spec: ExperimentSpec) -> int:
    target = read_backbone(spec.require("target"))
    k = int(spec.get("complete.k", 2))
    if k < 1:
        raise ConfigError("complete.k must be >= 1")
    defaults = task_defaults("complete")
    config = _solver_config(spec, defaults)
    prior = _build_prior(spec, target.n_residues)
    schedule = config.schedule()
    denoiser = _build_denoiser(spec, prior, schedule, target)
    meas = mask_measurement(
        target, k, noise=float(spec.get("complete.noise", 0.0)),
        rng=np.random.default_rng((config.seed, _STREAM_MEAS_NOISE)))
    binding = LikelihoodBinding(
        LinearLikelihood(precondition(prior, meas)),
        lr=float(spec.get("lr", defaults["lr"])),
        momentum=float(spec.get("momentum", defaults["momentum"])))
    report = run_adp(config, prior, denoiser, [binding])
    out = spec.out_dir
    _write_report(report, out)
    _write_chains(report, out, target.residue_ids)
    write_metrics_csv(_metrics_for_report(report, target, "complete"),
                      out / "metrics.csv")
    return 0


def cmd_distances(spec: ExperimentSpec) -> int:
    target = read_backbone(spec.require("target"))
    m = int(spec.get("distances.m", 500))
    if m < 0 or m > target.n_residues * (target.n_residues - 1) // 2:
        raise ConfigError(f"distances.m={m} out of range for "
                          f"{target.n_residues} residues")
    defaults = task_defaults("distances", max(m, 1))
    config = _solver_config(spec, defaults)
    prior = _build_prior(spec, target.n_residues)
    schedule = config.schedule()
    denoiser = _build_denoiser(spec, prior, schedule, target)
    bindings = []
    if m > 0:
        dset = sample_distances(target, m,
                                np.random.default_rng((config.seed,
                                                       _STREAM_DISTANCES)))
        bindings.append(LikelihoodBinding(
            DistanceLikelihood(dset, prior),
            lr=float(spec.get("lr", defaults["lr"])),
            momentum=float(spec.get("momentum", defaults["momentum"]))))
    report = run_adp(config, prior, denoiser, bindings)
    out = spec.out_dir
    _write_report(report, out)
    _write_chains(report, out, target.residue_ids)
    write_metrics_csv(_metrics_for_report(report, target, "distances",
                                          align="rigid"),
                      out / "metrics.csv")
    return 0


def _grid_template(coords, voxel, margin, resolution, blur_sigma=0.0):
    lo = coords.min(axis=0) - margin
    hi = coords.max(axis=0) + margin
    side = int(np.ceil((hi - lo).max() / voxel)) + 1
    side += side % 2  # keep the FFT side even
    return DensityMap(np.zeros((side, side, side)), voxel, lo, resolution,
                      blur_sigma)


def _simulate_map(target, resolution, voxel, margin, noise, seed):
    present = target.present_mask
    spec_atoms = AtomSpec.for_backbone(target.n_residues, resolution)
    template = _grid_template(target.coords[present], voxel, margin, resolution)
    partial_spec = AtomSpec(spec_atoms.atomic_numbers[present], spec_atoms.width)
    dmap = render_density(target.coords[present], partial_spec, template)
    if noise > 0.0:
        rng = np.random.default_rng((seed, _STREAM_MAP_NOISE))
        dmap.grid += noise * rng.standard_normal(dmap.grid.shape)
    return dmap


def cmd_refine(spec: ExperimentSpec) -> int:
    target = read_backbone(spec.require("target"))
    defaults = task_defaults("refine")
    config = _solver_config(spec, defaults)
    prior = _build_prior(spec, target.n_residues)
    schedule = config.schedule()
    denoiser = _build_denoiser(spec, prior, schedule, target)
    resolution = float(spec.get("refine.resolution", 2.0))

    partial_path = spec.get("refine.partial")
    if partial_path:
        partial = read_backbone(partial_path)
    else:
        partial = delete_residues(
            target, float(spec.get("refine.delete_fraction", 0.2)),
            np.random.default_rng((config.seed, _STREAM_PARTIAL)),
            noise=float(spec.get("refine.partial_noise", 0.3)))
    map_path = spec.get("refine.map")
    if map_path:
        dmap = read_mrc(map_path, resolution=resolution)
    else:
        dmap = _simulate_map(target, resolution,
                             float(spec.get("refine.voxel_size", 1.0)),
                             float(spec.get("refine.margin", 6.0)),
                             float(spec.get("refine.map_noise", 0.0)),
                             config.seed)

    meas = measurement_from_partial(partial, target)
    atom_spec = AtomSpec.for_backbone(target.n_residues, resolution)
    rt = resolution_annealing(float(spec.get("refine.rt_start", defaults["rt_start"])),
                              float(spec.get("refine.rt_end", defaults["rt_end"])),
                              float(spec.get("refine.rt_anneal_fraction",
                                             defaults["rt_anneal_fraction"])))
    momentum = float(spec.get("momentum", defaults["momentum"]))
    bindings = [
        LikelihoodBinding(LinearLikelihood(precondition(prior, meas),
                                           label="model"),
                          lr=float(spec.get("refine.lr_model",
                                            defaults["lr_model"])),
                          momentum=momentum),
        LikelihoodBinding(DensityLikelihood(dmap, atom_spec, prior),
                          lr=float(spec.get("refine.lr_density",
                                            defaults["lr_density"])),
                          momentum=momentum, rt_schedule=rt),
    ]
    report = run_adp(config, prior, denoiser, bindings)
    keep = float(spec.get("refine.keep_fraction", 1.0))
    filtered = filter_replicas(report, bindings[1].likelihood, keep)

    out = spec.out_dir
    _write_report(filtered, out)
    _write_chains(filtered, out, target.residue_ids)
    write_metrics_csv(_metrics_for_report(filtered, target, "refine"),
                      out / "metrics.csv")

    input_curve = dict(rmsd_vs_completeness(partial, target))
    best = None
    for rep in filtered.replicas:
        if rep.coords is not None:
            best = BackboneChain.from_coords(rep.coords, target.residue_ids)
            break
    rows = []
    if best is not None:
        for x, value in rmsd_vs_completeness(best, target):
            cell = repr(input_curve[x]) if x in input_curve else ""
            rows.append(f"{repr(x)},{cell},{repr(value)}")
    (out / "curve.csv").write_text(
        "completeness_pct,input_rmsd,output_rmsd\n" + "\n".join(rows) + "\n")
    return 0


def cmd_simulate_map(spec: ExperimentSpec) -> int:
    target = read_backbone(spec.require("target"))
    resolution = float(spec.get("simulate.resolution", 2.0))
    dmap = _simulate_map(target, resolution,
                         float(spec.get("simulate.voxel_size", 1.0)),
                         float(spec.get("simulate.margin", 6.0)),
                         float(spec.get("simulate.noise", 0.0)),
                         int(spec.get("seed", 0)))
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / str(spec.get("simulate.filename", "simulated.mrc"))
    write_mrc(dmap, path)
    print(f"wrote {path} ({dmap.side}^3 voxels at {dmap.voxel_size} A)")
    return 0


def _bench_gd(spec: ExperimentSpec, out: Path) -> None:
    n_res = int(spec.get("bench.n_residues", 130))
    k = int(spec.get("bench.k", 2))
    seed = int(spec.get("seed", 0))
    max_iters = int(spec.get("bench.max_iters", 200000))
    prior = _build_prior(spec, n_res)
    rng = np.random.default_rng((seed, _STREAM_DECOYS))
    target = BackboneChain.from_coords(unwhiten(prior,
                                                rng.standard_normal((prior.dim, 3))))
    meas = mask_measurement(target, k)
    pre = precondition(prior, meas)
    raw_monitor = RawLinearLikelihood(prior, meas)
    s_max = pre.s[0]
    config = SolverConfig(total_steps=max_iters, seed=seed, replicas=1)
    rows = []
    for variant in ("plain_gd", "momentum", "preconditioned",
                    "preconditioned_momentum"):
        preconditioned = variant.startswith("preconditioned")
        lik = LinearLikelihood(pre) if preconditioned else raw_monitor
        lr = 1.0 if preconditioned else 1.0 / (2.0 * s_max**2)
        binding = LikelihoodBinding(lik, lr=lr, momentum=0.9)
        report = run_no_prior([binding], prior, config, variant,
                              learning_rate=lr, monitor=raw_monitor)
        iters = iterations_to_converge(report)
        rows.append(f"{variant},{'' if iters is None else iters},"
                    f"{report.replicas[0].status}")
    (out / "bench_gd.csv").write_text(
        "variant,iterations_to_1e-6,status\n" + "\n".join(rows) + "\n")


def _bench_dps(spec: ExperimentSpec, out: Path) -> None:
    n_res = int(spec.get("bench.dps_n_residues", 32))
    steps = int(spec.get("bench.dps_steps", 200))
    seed = int(spec.get("seed", 0))
    replicas = int(spec.get("replicas", 4))
    prior = _build_prior(spec, n_res)
    rng = np.random.default_rng((seed, _STREAM_DECOYS))
    target = BackboneChain.from_coords(unwhiten(prior,
                                                rng.standard_normal((prior.dim, 3))))
    config = SolverConfig(total_steps=steps, seed=seed, replicas=replicas, jobs=1)
    schedule = config.schedule()
    denoiser = GaussianLibraryDenoiser(prior, schedule, target.coords,
                                       spread=float(spec.get("bench.spread", 0.5)))
    meas = mask_measurement(target, int(spec.get("bench.k", 2)))
    adp_binding = LikelihoodBinding(LinearLikelihood(precondition(prior, meas)),
                                    lr=0.3, momentum=0.9)
    dps_binding = LikelihoodBinding(RawLinearLikelihood(prior, meas),
                                    lr=0.0, momentum=0.0)
    rows = []
    adp = run_adp(config, prior, denoiser, [adp_binding])
    dps = run_dps(config, prior, denoiser, dps_binding,
                  float(spec.get("bench.zeta_prime", 1e-4)))
    for label, report in (("adp", adp), ("dps", dps)):
        per_iter = report.wall_time / (steps * replicas)
        for rep in report.replicas:
            if rep.coords is None:
                continue
            pred = BackboneChain.from_coords(rep.coords)
            value = rmsd(pred, target)
            rows.append(f"{label},{rep.index},{repr(value)},{repr(per_iter)}")
    (out / "bench_dps.csv").write_text(
        "method,replica,rmsd,per_iter_seconds\n" + "\n".join(rows) + "\n")


def cmd_bench(spec: ExperimentSpec) -> int:
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    steps = spec.get("steps")
    if steps is not None and int(steps) == 0:
        (out / "bench_gd.csv").write_text("variant,iterations_to_1e-6,status\n")
        (out / "bench_dps.csv").write_text("method,replica,rmsd,per_iter_seconds\n")
        return 0
    _bench_gd(spec, out)
    _bench_dps(spec, out)
    return 0


def cmd_serve_echo(spec: ExperimentSpec) -> int:
    listen = str(spec.get("serve.listen", "stdio"))
    if listen == "stdio":
        serve_denoiser(lambda x, t: x, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    if listen.startswith("tcp:"):
        port = int(listen.split(":", 1)[1])
        srv = socket.create_server(("127.0.0.1", port))
        print(f"listening on 127.0.0.1:{port}", file=sys.stderr)
        try:
            while True:
                conn, _ = srv.accept()
                with conn:
                    serve_denoiser(lambda x, t: x, conn.makefile("rb"),
                                   conn.makefile("wb"))
        except KeyboardInterrupt:
            return 0
    raise ConfigError(f"unknown listen mode {listen!r}")


_COMMANDS = {
    "complete": cmd_complete,
    "distances": cmd_distances,
    "refine": cmd_refine,
    "simulate-map": cmd_simulate_map,
    "bench": cmd_bench,
    "serve-echo": cmd_serve_echo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapfold",
        description="Backbone reconstruction from partial measurements "
                    "with plug-in denoising priors.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--replicas", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--denoiser", default=None,
                       help="gaussian | library | oracle | remote:ADDR")
        p.add_argument("--dry-run", action="store_true")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        tree = load_config(args.config, args.set)
        for key in ("seed", "replicas", "jobs", "denoiser"):
            value = getattr(args, key)
            if value is not None:
                tree[key] = value
        out_dir = args.out or tree.get("out", "out")
        spec = ExperimentSpec(args.command, tree, out_dir)
        if args.dry_run:
            print(spec.to_json())
            return 0
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](spec)
    except (ConfigError, PdbParseError, MrcFormatError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
