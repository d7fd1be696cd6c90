"""Command-line entry points: fuse, dig-trace, metrics, validate-theory.

Exit status: 0 success, 2 configuration error, 3 input error (including
external denoiser timeouts), 4 sampler divergence, 5 failed theory check.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .diffusion import DivergenceError
from .dig import DIGConfig, dig_curves, record_steps
from .guidance import ModalityStack
from .io import (AdapterError, AdapterTimeout, ConfigError, ExternalDenoiser, InputError, format_config,
                 load_image, read_config, save_image, sha256_file)
from .metrics import evaluate, to_display
from .oracles import EmpiricalDataOracle, GaussianDataOracle, SpectralGaussianOracle, power_law_spectrum
from .sampler import FusionConfig, fuse, make_step_plan
from .schedule import make_linear_schedule, sub_schedule

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED, EXIT_THEORY = 0, 2, 3, 4, 5


@dataclass
class RunConfig:
    """Every setting a run can take; config-file keys are these field names."""

    inputs: tuple = ()
    names: tuple = ()
    out: str = "out"
    steps: int = 25
    step_spacing: str = "uniform"
    ramp_exponent: float = 2.0
    dig_interval: int = 10
    dig_distance: str = "l2"
    patch_grid: str = "8x8"
    temperature: float = 1.0
    auto_scale: bool = False
    shared_noise: bool = True
    weight_mode: str = "dynamic"
    guidance_scale: float = 1.0
    seed: int = 0
    seeds_for_bands: int = 16
    oracle: str = "spectral"
    prior_var: float = 0.25
    spectrum_exponent: float = 2.0
    atoms: tuple = ()
    adapter_timeout: float = 30.0
    metrics: bool = True
    reference: str = ""
    fused: str = ""
    bit_depth: int = 8
    synthetic: str = ""
    instances: int = 100
    random_policies: int = 30
    permutations: int = 9999


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _convert(key: str, raw) -> object:
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return tuple(raw) if kind is tuple else raw
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def resolve_config(file_values: dict, flag_values: dict) -> tuple[RunConfig, set]:
    """Defaults, overridden by the config file, overridden by flags."""
    unknown = sorted(set(file_values) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged, explicit = {}, set()
    for source in (file_values, flag_values):
        for k, v in source.items():
            if v is None:
                continue
            merged[k] = _convert(k, v)
            explicit.add(k)
    return replace(RunConfig(), **merged), explicit


def parse_patch_grid(text: str) -> tuple[int, int] | None:
    if text == "global":
        return None
    try:
        r, c = (int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"patch grid must be RxC or 'global', got {text!r}") from exc
    return r, c


def parse_weight_mode(text: str) -> tuple[str, tuple | None]:
    if text == "dynamic":
        return "dynamic", None
    if text in ("static-equal", "static_equal"):
        return "static_equal", None
    if text.startswith(("static-fixed=", "static_fixed=")):
        try:
            w = tuple(float(v) for v in text.split("=", 1)[1].split(","))
        except ValueError as exc:
            raise ConfigError(f"bad static-fixed weights in {text!r}") from exc
        return "static_fixed", w
    raise ConfigError(f"weight mode must be dynamic, static-equal or static-fixed=w1,w2,..., got {text!r}")


def fusion_config(rc: RunConfig) -> FusionConfig:
    mode, fixed = parse_weight_mode(rc.weight_mode)
    try:
        dig_cfg = DIGConfig(distance=rc.dig_distance, interval_S=rc.dig_interval,
                            patch_grid=parse_patch_grid(rc.patch_grid), temperature=rc.temperature,
                            auto_scale=rc.auto_scale, shared_noise=rc.shared_noise)
        return FusionConfig(total_steps_N=rc.steps, step_spacing=rc.step_spacing, dig=dig_cfg,
                            guidance_scale=rc.guidance_scale, seed=rc.seed, weight_mode=mode,
                            fixed_weights=fixed, ramp_exponent=rc.ramp_exponent)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def make_denoiser(rc: RunConfig, shape: tuple, schedule, modalities: Sequence[np.ndarray] = ()):
    kind = rc.oracle
    if kind.startswith("external:"):
        return ExternalDenoiser(Path(kind.split(":", 1)[1]), timeout=rc.adapter_timeout)
    mu = np.zeros(shape)
    if kind == "spectral":
        spec = power_law_spectrum(shape[:2], rc.spectrum_exponent, pixel_var=rc.prior_var)
        return SpectralGaussianOracle(mu, spec, schedule)
    if kind == "gaussian":
        return GaussianDataOracle(mu, rc.prior_var, schedule)
    if kind == "empirical":
        atoms = [_match_channels(load_image(p), shape[2]) for p in rc.atoms] if rc.atoms else list(modalities)
        for a in atoms:
            if a.shape != tuple(shape):
                raise InputError(f"atom shape {a.shape} does not match inputs {tuple(shape)}")
        return EmpiricalDataOracle(atoms, schedule)
    raise ConfigError(f"oracle must be gaussian, empirical, spectral or external:DIR, got {kind!r}")


def _match_channels(x: np.ndarray, channels: int) -> np.ndarray:
    if x.shape[2] == channels:
        return x
    if x.shape[2] == 1:
        return np.repeat(x, channels, axis=2)
    raise InputError(f"cannot convert a {x.shape[2]}-channel image to {channels} channels")


def load_stack(rc: RunConfig) -> ModalityStack:
    """Load the modalities; a grayscale input next to colour inputs is repeated to three channels."""
    if not rc.inputs:
        raise ConfigError("no input images given (use --ir/--vis or --inputs)")
    imgs = [load_image(p) for p in rc.inputs]
    shapes = {im.shape[:2] for im in imgs}
    if len(shapes) != 1:
        raise InputError(f"input images differ in size: {sorted(shapes)}")
    channels = max(im.shape[2] for im in imgs)
    imgs = [_match_channels(im, channels) for im in imgs]
    names = list(rc.names) if rc.names else _names_from_paths(rc.inputs)
    if len(names) != len(imgs):
        raise ConfigError("need exactly one name per input")
    return ModalityStack(imgs, names)


def _names_from_paths(paths: Sequence[str]) -> list[str]:
    names, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        seen[stem] = seen.get(stem, 0) + 1
        names.append(stem if seen[stem] == 1 else f"{stem}_{seen[stem]}")
    return names


def versions() -> dict[str, str]:
    import matplotlib
    import PIL
    import scipy

    return {"gainfuse": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__, "pillow": PIL.__version__}


def _effective(rc: RunConfig) -> dict:
    d = asdict(rc)
    d["inputs"] = tuple(str(Path(p).resolve()) for p in rc.inputs)
    d["atoms"] = tuple(str(Path(p).resolve()) for p in rc.atoms)
    for key in ("reference", "fused"):
        if d[key]:
            d[key] = str(Path(d[key]).resolve())
    return d


def write_run_files(out: Path, command: str, rc: RunConfig, argv: Sequence[str], wall: float,
                    outputs: Sequence[str]) -> None:
    eff = _effective(rc)
    (out / "config.txt").write_text(format_config(eff))
    hashed = [p for p in (*eff["inputs"], *eff["atoms"], eff["reference"], eff["fused"]) if p]
    manifest = {
        "schema": "run-manifest v1",
        "command": command,
        "argv": list(argv),
        "seed": rc.seed,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in eff.items()},
        "inputs": {p: sha256_file(p) for p in hashed},
        "outputs": {name: sha256_file(out / name) for name in outputs},
        "versions": versions(),
        "wall_time_s": round(wall, 6),
        "replay": f"gainfuse {command} --replay {out / 'manifest.json'} --out NEW_DIR",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def config_from_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    for p, digest in manifest.get("inputs", {}).items():
        if not Path(p).is_file() or sha256_file(p) != digest:
            raise InputError(f"input {p} is missing or changed since the recorded run")
    return {k: (",".join(map(str, v)) if isinstance(v, list) else v) for k, v in manifest["config"].items()}


# -- argument parsing ------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file (flags win)")
    p.add_argument("--replay", metavar="MANIFEST", help="re-run with the configuration recorded in a manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def _fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ir", help="infrared (or first) modality image")
    p.add_argument("--vis", help="visible (or second) modality image")
    p.add_argument("--inputs", nargs="+", help="K modality images")
    p.add_argument("--steps", type=int, dest="steps", metavar="N")
    p.add_argument("--spacing", dest="step_spacing", choices=("uniform", "coarse_to_fine"))
    p.add_argument("--dig-interval", type=int, dest="dig_interval", metavar="S")
    p.add_argument("--dig-distance", dest="dig_distance", choices=("l1", "l2", "ssim"))
    p.add_argument("--patch-grid", dest="patch_grid", metavar="RxC|global")
    p.add_argument("--temperature", type=float)
    p.add_argument("--auto-scale", dest="auto_scale", action="store_const", const=True)
    p.add_argument("--independent-noise", dest="shared_noise", action="store_const", const=False,
                   help="draw separate noise for the two ends of each DIG window")
    p.add_argument("--weight-mode", dest="weight_mode", metavar="{dynamic|static-equal|static-fixed=w,...}")
    p.add_argument("--guidance-scale", type=float, dest="guidance_scale")
    p.add_argument("--seeds-for-bands", type=int, dest="seeds_for_bands")
    p.add_argument("--oracle", metavar="{gaussian|empirical|spectral|external:DIR}")
    p.add_argument("--adapter-timeout", type=float, dest="adapter_timeout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gainfuse", description="Diffusion-based image fusion with dynamic information-gain weights.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse K co-registered images")
    _common(p)
    _fusion_flags(p)
    p.add_argument("--no-metrics", dest="metrics", action="store_const", const=False)

    p = sub.add_parser("dig-trace", help="cumulative DIG curves with seed bands")
    _common(p)
    _fusion_flags(p)
    p.add_argument("--synthetic", choices=("masked_complement", "structure_texture"),
                   help="use a seeded synthetic pair instead of input files")

    p = sub.add_parser("metrics", help="fusion quality metrics of a fused image")
    _common(p)
    p.add_argument("--fused", required=False)
    p.add_argument("--ir")
    p.add_argument("--vis")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--reference")

    p = sub.add_parser("validate-theory", help="covariance-mechanism checks on the synthetic bench")
    _common(p)
    p.add_argument("--instances", type=int)
    p.add_argument("--random-policies", type=int, dest="random_policies")
    p.add_argument("--permutations", type=int)
    p.add_argument("--steps", type=int, dest="steps", metavar="N")
    p.add_argument("--dig-interval", type=int, dest="dig_interval", metavar="S")
    p.add_argument("--dig-distance", dest="dig_distance", choices=("l1", "l2", "ssim"))
    p.add_argument("--guidance-scale", type=float, dest="guidance_scale")
    return parser


def config_from_args(args: argparse.Namespace) -> tuple[RunConfig, set]:
    flags = {k: v for k, v in vars(args).items() if k in FIELD_TYPES and v is not None}
    ir, vis = getattr(args, "ir", None), getattr(args, "vis", None)
    if ir or vis:
        if getattr(args, "inputs", None):
            raise ConfigError("use either --ir/--vis or --inputs, not both")
        pairs = [(n, p) for n, p in (("ir", ir), ("vis", vis)) if p]
        flags["inputs"] = tuple(p for _, p in pairs)
        flags["names"] = tuple(n for n, _ in pairs)
    elif flags.get("inputs"):
        flags["inputs"] = tuple(flags["inputs"])
    file_values = {}
    if args.replay:
        file_values = config_from_manifest(args.replay)
        file_values.pop("out", None)
    if args.config:
        file_values.update(read_config(args.config))
    return resolve_config(file_values, flags)


# -- commands ------------------------------------------------------------------------

def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fuse(args, argv) -> int:
    from .plotting import plot_dig_trace

    t0 = time.perf_counter()
    rc, _ = config_from_args(args)
    cfg = fusion_config(rc)
    ms = load_stack(rc)
    s = make_linear_schedule()
    d = make_denoiser(rc, ms.shape, s, ms.images)
    x, trace = fuse(ms, d, s, cfg)
    out = _out_dir(rc)
    save_image(out / "fused.png", x, rc.bit_depth)
    trace.to_csv(out / "trace.csv")
    outputs = ["fused.png", "trace.csv"]
    if rc.metrics:
        ref = load_image(rc.reference, ms.shape) if rc.reference else None
        # score the image as saved: clipped to the displayable range
        report = evaluate(to_display(np.clip(x, -1.0, 1.0)), [to_display(c) for c in ms.images],
                          None if ref is None else to_display(ref))
        report.to_csv(out / "report.csv")
        outputs.append("report.csv")
    plot_dig_trace(trace.timesteps, trace.gains(), trace.weights(), ms.names, out / "dig_trace.png")
    write_run_files(out, "fuse", rc, argv, time.perf_counter() - t0, outputs)
    print(f"wrote {out / 'fused.png'}")
    return EXIT_OK


def cmd_dig_trace(args, argv) -> int:
    from .plotting import plot_dig_bands
    from .theory import make_instance, structure_texture_pair

    t0 = time.perf_counter()
    rc, explicit = config_from_args(args)
    cfg = fusion_config(rc)
    s = make_linear_schedule()
    if rc.synthetic:
        if rc.synthetic == "masked_complement":
            inst = make_instance("masked_complement", seed=rc.seed, schedule=s)
            ms, d = inst.modalities, inst.denoiser
        else:
            ms, _, d = structure_texture_pair(rc.seed, schedule=s)
    else:
        ms = load_stack(rc)
        d = make_denoiser(rc, ms.shape, s, ms.images)
    if rc.seeds_for_bands < 1:
        raise ConfigError("seeds_for_bands must be >= 1")
    rs = sub_schedule(s, make_step_plan(s, cfg.total_steps_N, cfg.step_spacing, cfg.ramp_exponent))
    curves = dig_curves(ms.images, d, rs, cfg.dig, rc.seed, rc.seeds_for_bands)
    steps = record_steps(rs.T, cfg.dig.interval_S)
    ts = [rs.model_timestep(t) for t in steps]
    cum = np.cumsum(curves, axis=1)
    ddof = 1 if rc.seeds_for_bands > 1 else 0
    stats = [curves.mean(0), curves.var(0, ddof=ddof), cum.mean(0), cum.var(0, ddof=ddof)]
    out = _out_dir(rc)
    with open(out / "dig_curves.csv", "w", newline="") as fh:
        import csv

        fh.write("# schema: dig-curves v1\n")
        w = csv.writer(fh)
        w.writerow(["t", "modality", "patch_row", "patch_col", "mean_dig", "var_dig", "mean_cum", "var_cum", "n_seeds"])
        for i, t in enumerate(ts):
            for k, name in enumerate(ms.names):
                cells = [(-1, -1, ())] if curves.ndim == 3 else [
                    (r, c, (r, c)) for r in range(curves.shape[3]) for c in range(curves.shape[4])]
                for r, c, idx in cells:
                    vals = [a[(i, k, *idx)] for a in stats]
                    w.writerow([t, name, r, c, *(f"{v:.17g}" for v in vals), rc.seeds_for_bands])
    per_mod = cum.reshape(*cum.shape[:3], -1).sum(axis=3)
    plot_dig_bands(ts, per_mod.mean(0), per_mod.var(0, ddof=ddof), ms.names, out / "dig_curves.png")
    write_run_files(out, "dig-trace", rc, argv, time.perf_counter() - t0, ["dig_curves.csv"])
    print(f"wrote {out / 'dig_curves.csv'}")
    return EXIT_OK


def cmd_metrics(args, argv) -> int:
    t0 = time.perf_counter()
    rc, _ = config_from_args(args)
    if not rc.fused:
        raise ConfigError("metrics needs --fused")
    ms = load_stack(rc)
    x = load_image(rc.fused)
    x = _match_channels(x, ms.shape[2]) if x.shape[:2] == ms.shape[:2] else x
    if x.shape != ms.shape:
        raise InputError(f"fused image shape {x.shape} does not match sources {ms.shape}")
    ref = load_image(rc.reference, ms.shape) if rc.reference else None
    report = evaluate(to_display(x), [to_display(c) for c in ms.images], None if ref is None else to_display(ref))
    out = _out_dir(rc)
    report.to_csv(out / "report.csv", image_id=Path(rc.fused).stem)
    write_run_files(out, "metrics", rc, argv, time.perf_counter() - t0, ["report.csv"])
    sys.stdout.write(report.to_table(Path(rc.fused).stem))
    return EXIT_OK


def cmd_validate_theory(args, argv) -> int:
    from .plotting import plot_mechanism
    from .theory import (bench_fusion_config, covariance_report, make_population, mechanism_check,
                         noise_term_stats, policy_family, write_ledgers, zero_guidance_identity)

    t0 = time.perf_counter()
    rc, explicit = config_from_args(args)
    if rc.instances < 2:
        raise ConfigError("validate-theory needs at least 2 instances")
    overrides = {}
    if "steps" in explicit:
        overrides["total_steps_N"] = rc.steps
    if "guidance_scale" in explicit:
        overrides["guidance_scale"] = rc.guidance_scale
    cfg = bench_fusion_config(seed=rc.seed, **overrides)
    if "dig_interval" in explicit or "dig_distance" in explicit:
        cfg = replace(cfg, dig=replace(cfg.dig, interval_S=rc.dig_interval if "dig_interval" in explicit else cfg.dig.interval_S,
                                       distance=rc.dig_distance if "dig_distance" in explicit else cfg.dig.distance))
    s = make_linear_schedule()
    pop = make_population(rc.instances, schedule=s, first_seed=rc.seed)
    res = mechanism_check(pop, s, cfg, policy_family(rc.random_policies), n_resamples=rc.permutations)
    ledgers = res.ledgers["dynamic"]
    out = _out_dir(rc)
    write_ledgers(out / "ledger.csv", ledgers)
    covariance_report(ledgers).to_csv(out / "covariance.csv", label="dynamic")
    with open(out / "policies.csv", "w") as fh:
        fh.write("# schema: policy-summary v1\npolicy,cov_sum,mean_gerror\n")
        for n, c, m in zip(res.names, res.cov_sum, res.mean_gerror):
            fh.write(f"{n},{c:.17g},{m:.17g}\n")
    identity = zero_guidance_identity(pop[0], s, cfg.total_steps_N, rc.seed)
    residual = max(abs(led.expansion_residual()) / max(1.0, led.zeta_T) for led in ledgers)
    t_noise, m_noise, se_noise = noise_term_stats(ledgers)
    checks = {
        "covariance-mechanism": res.covariance_ok,
        "dynamic-vs-static": res.dynamic_beats_static,
        "anti-DIG-dominance": res.anti_dig_ok,
        "zero-guidance-identity": identity <= 1e-12,
        "expansion-identity": residual <= 1e-10,
    }
    lines = [f"{name}: {'PASS' if ok else 'FAIL'}" for name, ok in checks.items()]
    lines += [
        "",
        f"instances = {rc.instances}, policies = {len(res.names)}",
        f"spearman rho = {res.spearman_rho:.4f}, permutation p = {res.permutation_p:.4g}",
        f"mean GError: dynamic {res.dynamic_mean:.6g}, static_equal {res.static_mean:.6g}, anti_dig {res.anti_dig_mean:.6g}",
        f"dynamic wins {res.dynamic_wins}/{rc.instances}, sign test p = {res.sign_test_p:.4g}",
        f"zero-guidance max |diff| = {identity:.3g}; expansion residual (relative) = {residual:.3g}",
        "noise term grad_zeta . sigma z (reported, not asserted): "
        f"max |mean| / se = {np.max(np.abs(m_noise) / np.where(se_noise > 0, se_noise, 1.0)):.3g} over {len(t_noise)} steps",
    ]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    plot_mechanism(res.cov_sum, res.mean_gerror, res.names, res.spearman_rho, out / "mechanism.png")
    write_run_files(out, "validate-theory", rc, argv, time.perf_counter() - t0,
                    ["ledger.csv", "covariance.csv", "policies.csv", "summary.txt"])
    print("\n".join(lines[:len(checks)]))
    return EXIT_OK if all(checks.values()) else EXIT_THEORY


COMMANDS = {"fuse": cmd_fuse, "dig-trace": cmd_dig_trace, "metrics": cmd_metrics,
            "validate-theory": cmd_validate_theory}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, AdapterError, AdapterTimeout) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
