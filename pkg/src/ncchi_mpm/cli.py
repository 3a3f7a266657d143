"""Command-line front end: ``ncchi-mpm <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence.
Messages and logs go to standard error; ``--log-json`` switches logs to
one JSON object per line.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .crossval import loeo, predict_echo
from .distributions import Family, NoiseModel
from .forward_model import signal
from .map_fit import FitProblem, ParameterMaps, SolverSettings, Status, _group_labels, fit_maps
from .noise_em import EMConfig, fit_noise
from .synthetic import (RNG_ALGORITHM, Acquisition, PhantomSpec, default_protocol, phantom_maps,
                        simulate_acquisition)
from .volume_io import (EchoVolume, NiftiError, SidecarError, read_volume, settings_from_dict,
                        sidecar_path, write_sidecar, write_volume)

log = logging.getLogger("ncchi_mpm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONV = 0, 1, 2, 3
THREADS_ENV = "NCCHI_MPM_THREADS"
MAP_FILES = {"R1": "R1", "R2s": "R2s", "PD": "PD", "MTsat": "MTsat"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        d = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            d["exc"] = self.formatException(record.exc_info)
        return json.dumps(d, sort_keys=True)


def _setup_logging(json_logs, verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs
                         else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)
    logging.captureWarnings(True)


def _threads(args):
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV}={env!r} is not an integer") from None
    return os.cpu_count() or 1


def _dump_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_json(path, what):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as err:
        raise DataError(f"{what} {path} is not valid JSON: {err}") from None


def _read(path):
    try:
        return read_volume(path)
    except FileNotFoundError:
        raise DataError(f"volume not found: {path}") from None
    except NiftiError as err:
        raise DataError(str(err)) from None


def _read_all(paths):
    vols = [_read(p) for p in paths]
    for p, v in zip(paths, vols):
        if v.dims != vols[0].dims:
            raise DataError(f"{p}: dimensions {v.dims} differ from {paths[0]} {vols[0].dims}")
    return vols


def _sidecars(volume_paths, sidecar_paths):
    if sidecar_paths and len(sidecar_paths) != len(volume_paths):
        raise UsageError(f"{len(sidecar_paths)} sidecars given for {len(volume_paths)} volumes")
    paths = sidecar_paths or [sidecar_path(p) for p in volume_paths]
    settings, runs = [], []
    for p in paths:
        d = _load_json(p, "sidecar")
        try:
            settings.append(settings_from_dict(d, p))
        except SidecarError as err:
            raise DataError(str(err)) from None
        runs.append(d.get("run"))
    if all(r is None for r in runs):
        runs = None
    elif any(r is None for r in runs):
        raise DataError("either all sidecars carry a 'run' label or none do")
    return settings, runs


def _noise_from_report(path):
    d = _load_json(path, "noise report")
    try:
        return NoiseModel.from_dict(d["background"] if "background" in d else d)
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"{path}: not a noise report ({err})") from None


def _noise_per_volume(specs, runs, n, family):
    """``--noise`` is either one report for every run or ``RUN=report`` pairs."""
    if not specs:
        if family is not Family.GAUSSIAN:
            raise UsageError("--noise is required for the ncchi likelihood")
        return [NoiseModel(Family.GAUSSIAN, 2.0, 1.0)] * n
    if len(specs) == 1 and "=" not in specs[0]:
        return [_noise_from_report(specs[0])] * n
    table = {}
    for item in specs:
        if "=" not in item:
            raise UsageError("with several --noise options each must be RUN=report.json")
        run, path = item.split("=", 1)
        table[run] = _noise_from_report(path)
    missing = sorted({r for r in runs if r not in table})
    if missing:
        raise UsageError(f"no noise report for run(s) {missing}; known runs: {sorted(set(runs))}")
    return [table[r] for r in runs]


def _default_mask(vols, noise):
    # voxels whose mean magnitude clears three noise standard deviations
    mean = np.mean([v.data for v in vols], axis=0)
    sigma = max(m.sigma for m in noise)
    return mean > 3.0 * sigma


def _solver_settings(args):
    d = SolverSettings().to_dict()
    if getattr(args, "config", None):
        d.update(_load_json(args.config, "solver settings"))
    for key in ("likelihood", "max_iters", "tol", "mask_path"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "reg_weights", None) is not None:
        d["reg_weights"] = args.reg_weights
    d["threads"] = _threads(args)
    try:
        return SolverSettings.from_dict(d)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid solver settings: {err}") from None


def _load_mask(path, shape):
    m = _read(path).data
    if m.shape != shape:
        raise DataError(f"{path}: mask dimensions {m.shape} differ from volumes {shape}")
    return m > 0


def _nonconverged(status, mask):
    st = status[mask]
    return int(np.sum(st != Status.CONVERGED)), int(st.size)


# ---------------------------------------------------------------------------
# subcommands


def cmd_noise_estimate(args):
    vols = _read_all(args.volumes)
    x = np.concatenate([v.data.ravel() for v in vols])
    cfg = EMConfig(max_iters=args.max_iters, channels=args.channels, select_k=not args.no_select)
    try:
        fit = fit_noise(x, cfg)
    except ValueError as err:
        raise DataError(f"noise estimation failed: {err}") from None
    report = fit.to_report()
    report["inputs"] = [str(p) for p in args.volumes]
    report["settings"] = {"max_iters": cfg.max_iters, "tol": cfg.tol, "channels": cfg.channels,
                          "nu0": cfg.nu0, "select_k": cfg.select_k}
    _dump_json(report, args.out)
    bg = fit.background
    log.info("background noise: nu=%.4g sigma2=%.6g", bg.nu, bg.sigma2)
    if not fit.converged:
        print("noise estimation did not converge", file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_OK


def _build_problem(args, opts):
    vols = _read_all(args.volumes)
    settings, runs = _sidecars(args.volumes, args.sidecars)
    if runs is None:
        runs = _group_labels(settings)
    noise = _noise_per_volume(args.noise, runs, len(vols), opts.family)
    mask_path = args.mask or opts.mask_path
    mask = _load_mask(mask_path, vols[0].dims) if mask_path else _default_mask(vols, noise)
    try:
        return FitProblem(vols, settings, noise, runs, None, mask), vols
    except ValueError as err:
        raise DataError(str(err)) from None


def cmd_fit(args):
    opts = _solver_settings(args)
    problem, vols = _build_problem(args, opts)
    maps = fit_maps(problem, opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ref = vols[0]
    ext = ".nii.gz" if args.gzip else ".nii"
    for name, arr in maps.maps().items():
        write_volume(EchoVolume(arr.astype(np.float32), ref.affine, ref.voxel_size, ref.header),
                     out / (MAP_FILES[name] + ext))
    write_volume(EchoVolume(maps.status.astype(np.uint8), ref.affine, ref.voxel_size, ref.header),
                 out / ("convergence" + ext))
    write_volume(EchoVolume(maps.objective.astype(np.float64), ref.affine, ref.voxel_size,
                            ref.header), out / ("objective" + ext))
    write_volume(EchoVolume(maps.iterations.astype(np.int32), ref.affine, ref.voxel_size,
                            ref.header), out / ("iterations" + ext))
    bad, total = _nonconverged(maps.status, problem.mask)
    meta = {
        "solver": {k: v for k, v in opts.to_dict().items() if k != "threads"},
        "inputs": [str(p) for p in args.volumes],
        "runs": list(problem.runs),
        "echoes": [int(e) for e in problem.echoes],
        "noise": [m.to_dict() for m in problem.noise],
        "n_voxels": total,
        "n_nonconverged": bad,
        "status_codes": {"outside": Status.OUTSIDE, "converged": Status.CONVERGED,
                         "max_iters": Status.MAX_ITERS, "failed": Status.FAILED,
                         "skipped": Status.SKIPPED},
        "version": __version__,
    }
    _dump_json(meta, out / "fit.json")
    log.info("fitted %d voxels, %d not converged", total, bad)
    if total and bad / total > args.max_nonconverged:
        print(f"{bad} of {total} voxels did not converge "
              f"(limit {args.max_nonconverged:.3g})", file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_OK


def _read_maps(directory):
    d = Path(directory)
    arrays = {}
    ref = None
    for name, stem in MAP_FILES.items():
        for ext in (".nii", ".nii.gz"):
            p = d / (stem + ext)
            if p.exists():
                v = _read(p)
                ref = ref or v
                if v.dims != ref.dims:
                    raise DataError(f"{p}: dimensions {v.dims} differ from {ref.dims}")
                arrays[name] = v.data.astype(np.float64)
                break
        else:
            raise DataError(f"{d}: missing map {stem}.nii[.gz]")
    theta = np.stack([arrays[n] for n in ParameterMaps.NAMES], axis=-1)
    return ParameterMaps.from_theta(theta, affine=ref.affine), ref


def cmd_predict(args):
    family = Family.parse(args.family)
    maps, ref = _read_maps(args.maps)
    d = _load_json(args.sidecar, "sidecar")
    try:
        settings = settings_from_dict(d, args.sidecar)
    except SidecarError as err:
        raise DataError(str(err)) from None
    if args.noise:
        noise = _noise_from_report(args.noise)
    elif family is Family.GAUSSIAN:
        noise = NoiseModel(Family.GAUSSIAN, 2.0, 1.0)
    else:
        raise UsageError("--noise is required for the ncchi family")
    mask = _load_mask(args.mask, maps.shape) if args.mask else None
    pred = predict_echo(maps, settings, noise, family, mask)
    if not np.all(np.isfinite(pred)):
        raise DataError("non-finite prediction; check the maps inside the mask")
    write_volume(EchoVolume(pred.astype(np.float32), ref.affine, ref.voxel_size, ref.header),
                 args.out)
    write_sidecar(settings, sidecar_path(args.out))
    return EXIT_OK


def cmd_xval(args):
    cfg = _load_json(args.config, "xval config")
    if "volumes" not in cfg:
        raise DataError(f"{args.config}: missing 'volumes'")
    base = Path(args.config).parent

    def rel(p):
        return str(p) if os.path.isabs(p) else str(base / p)

    solver = dict(cfg.get("solver", {}))
    if args.reg_weights is not None:
        solver["reg_weights"] = args.reg_weights
    if args.max_iters is not None:
        solver["max_iters"] = args.max_iters
    solver["threads"] = 1
    try:
        opts = SolverSettings.from_dict(solver)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid solver settings: {err}") from None
    noise = cfg.get("noise")
    if isinstance(noise, dict):
        noise = [f"{k}={rel(v)}" for k, v in sorted(noise.items())]
    elif isinstance(noise, str):
        noise = [rel(noise)]
    ns = argparse.Namespace(volumes=[rel(p) for p in cfg["volumes"]],
                            sidecars=[rel(p) for p in cfg["sidecars"]] if cfg.get("sidecars")
                            else None,
                            noise=noise, mask=rel(cfg["mask"]) if cfg.get("mask") else None)
    # the nc-chi fold needs a noise model even though the Gaussian fold does not
    opts_nc = SolverSettings.from_dict({**opts.to_dict(), "likelihood": "ncchi"})
    problem, _ = _build_problem(ns, opts_nc)
    try:
        res = loeo(problem, opts, threads=_threads(args))
    except ValueError as err:
        raise DataError(str(err)) from None
    fmt = args.format or ("json" if str(args.out).endswith(".json") else "csv")
    text = res.to_json() + "\n" if fmt == "json" else res.to_csv()
    if str(args.out) == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    for contrast, row in res.summary().items():
        log.info("%s: mean MSE(ncchi) - MSE(gauss) = %.6g", contrast, row["diff"])
    worst = max((max(r.failed_gauss, r.failed_ncchi) / max(r.n_voxels, 1) for r in res.rows),
                default=0.0)
    if worst > args.max_nonconverged:
        print(f"some folds left {worst:.1%} of voxels unconverged", file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_OK


def _synth_noise(args, cfg, theta, labels, protocol):
    ncfg = dict(cfg.get("noise", {}))
    for key in ("snr", "sigma", "nu"):
        v = getattr(args, key)
        if v is not None:
            ncfg[key] = v
    if args.noise_family is not None:
        ncfg["family"] = args.noise_family
    if args.noiseless:
        return None, {"family": None}
    family = Family.parse(ncfg.get("family", "ncchi"))
    nu = float(ncfg.get("nu", 2.0))
    if "sigma" in ncfg:
        sigma = float(ncfg["sigma"])
    else:
        # SNR relative to the mean first-echo tissue signal of the first run
        tissue = labels > 0
        if not np.any(tissue):
            raise DataError("phantom has no tissue voxels to define an SNR")
        mu = signal(theta[tissue], protocol[0].settings)
        sigma = float(np.mean(mu)) / float(ncfg.get("snr", 5.0))
    if not sigma > 0:
        raise UsageError("noise sigma must be positive")
    model = NoiseModel(family, nu, sigma * sigma)
    return model, {**model.to_dict(), "sigma": sigma, "snr": ncfg.get("snr")}


def cmd_synth(args):
    cfg = _load_json(args.spec, "phantom spec")
    try:
        spec = PhantomSpec.from_dict(cfg)
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"{args.spec}: invalid phantom spec ({err})") from None
    if args.seed is not None:
        spec.seed = args.seed
    if "protocol" in cfg:
        protocol = [Acquisition.from_dict(a) for a in cfg["protocol"]]
    else:
        protocol = default_protocol(args.echoes or 6)
    theta, labels = phantom_maps(spec)
    noise, noise_meta = _synth_noise(args, cfg, theta, labels, protocol)
    vols, theta, labels = simulate_acquisition(spec, protocol, noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if args.gzip else ".nii"
    names = []
    for acq, vol in zip(protocol, vols):
        name = f"{acq.run}_e{acq.echo + 1:02d}"
        names.append(name + ext)
        write_volume(vol, out / (name + ext))
        write_sidecar(acq.settings, out / (name + ".json"), run=acq.run, echo=acq.echo)
    truth = out / "truth"
    truth.mkdir(exist_ok=True)
    aff, vs = vols[0].affine, vols[0].voxel_size
    for k, name in enumerate(ParameterMaps.NAMES):
        write_volume(EchoVolume(theta[..., k].astype(np.float32), aff, vs), truth / (name + ext))
    write_volume(EchoVolume(labels, aff, vs), truth / ("labels" + ext))
    write_volume(EchoVolume((labels > 0).astype(np.uint8), aff, vs), truth / ("mask" + ext))
    _dump_json({"phantom": spec.to_dict(), "protocol": [a.to_dict() for a in protocol],
                "noise": noise_meta, "volumes": names, "rng": RNG_ALGORITHM,
                "version": __version__}, out / "synth.json")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _floats4(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected four comma-separated numbers, got {text!r}")
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected one value per map (R1,R2s,PD,MTsat)")
    return vals


def build_parser():
    def common(q, default):
        # accepted before or after the subcommand; the subcommand copy must not
        # overwrite a value given before it, hence SUPPRESS there
        kw = {} if default else {"default": argparse.SUPPRESS}
        q.add_argument("--threads", type=int, **({"default": None} if default else kw),
                       help=f"worker threads (default: ${THREADS_ENV} or all cores)")
        q.add_argument("--log-json", action="store_true", **kw,
                       help="line-delimited JSON logs on stderr")
        q.add_argument("-v", "--verbose", action="count", **({"default": 0} if default else kw))

    p = _Parser(prog="ncchi-mpm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common(p, True)
    shared = _Parser(add_help=False)
    common(shared, False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[shared], **k)

    q = sub.add_parser("noise-estimate", help="fit the chi mixture to background intensities")
    q.add_argument("volumes", nargs="+")
    q.add_argument("--out", required=True, help="report JSON ('-' for stdout)")
    q.add_argument("--channels", type=float, default=None,
                   help="receive channels; initial nu = 2 * channels")
    q.add_argument("--max-iters", type=int, default=2000)
    q.add_argument("--no-select", action="store_true",
                   help="always keep two components (no BIC fallback)")
    q.set_defaults(func=cmd_noise_estimate)

    def fit_args(q):
        q.add_argument("--noise", action="append", default=None,
                       help="noise report JSON, or RUN=report.json per run")
        q.add_argument("--mask", default=None, help="mask volume (nonzero = fit)")
        q.add_argument("--config", default=None, help="solver settings JSON")
        q.add_argument("--max-iters", type=int, default=None)
        q.add_argument("--reg-weights", type=_floats4, default=None,
                       help="membrane weights R1,R2s,PD,MTsat")
        q.add_argument("--max-nonconverged", type=float, default=0.05,
                       help="fraction of unconverged voxels that triggers exit 3")

    q = sub.add_parser("fit", help="estimate R1, R2*, PD and MTsat maps")
    q.add_argument("volumes", nargs="+")
    q.add_argument("--sidecars", nargs="+", default=None,
                   help="JSON sidecars (default: next to each volume)")
    q.add_argument("--likelihood", choices=["gauss", "ncchi"], default=None)
    q.add_argument("--tol", type=float, default=None)
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--gzip", action="store_true", help="write .nii.gz")
    fit_args(q)
    q.set_defaults(func=cmd_fit, mask_path=None)

    q = sub.add_parser("predict", help="predict an echo from fitted maps")
    q.add_argument("--maps", required=True, help="directory written by 'fit'")
    q.add_argument("--sidecar", required=True, help="acquisition settings of the echo")
    q.add_argument("--family", choices=["gauss", "ncchi"], default="ncchi")
    q.add_argument("--noise", default=None, help="noise report JSON (ncchi family)")
    q.add_argument("--mask", default=None)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_predict)

    q = sub.add_parser("xval", help="leave-one-echo-out comparison of the two likelihoods")
    q.add_argument("--config", required=True,
                   help="JSON with volumes, optional sidecars, noise, mask and solver")
    q.add_argument("--out", required=True, help="report (.csv or .json; '-' for stdout)")
    q.add_argument("--format", choices=["csv", "json"], default=None)
    q.add_argument("--max-iters", type=int, default=None)
    q.add_argument("--reg-weights", type=_floats4, default=None)
    q.add_argument("--max-nonconverged", type=float, default=0.05)
    q.set_defaults(func=cmd_xval)

    q = sub.add_parser("synth", help="simulate a phantom acquisition")
    q.add_argument("--spec", required=True, help="phantom spec JSON")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--echoes", type=int, default=None)
    q.add_argument("--snr", type=float, default=None,
                   help="mean first-echo tissue signal of the first run over sigma")
    q.add_argument("--sigma", type=float, default=None)
    q.add_argument("--nu", type=float, default=None)
    q.add_argument("--noise-family", choices=["gauss", "ncchi"], default=None)
    q.add_argument("--noiseless", action="store_true")
    q.add_argument("--gzip", action="store_true")
    q.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_json, args.verbose)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"ncchi-mpm {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SidecarError, NiftiError) as err:
        print(f"ncchi-mpm {args.command}: {err}", file=sys.stderr)
        return EXIT_DATA
    except OSError as err:
        print(f"ncchi-mpm {args.command}: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
