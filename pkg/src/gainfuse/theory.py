"""Synthetic fusion instances with a known ideal image, and the bound quantities.

Every instance carries its ideal fused image ``x*``, so the generalisation
error of a weighting policy can be measured directly. Observing the
sampler step by step gives the terms of the one-step loss expansion

    zeta(x_{t-1}) - zeta(x_t) = G + grad_zeta . [coef * guidance] + grad_zeta . [sigma z] + |dx|^2

with ``zeta(x) = |x - x*|^2`` (sum over pixels), ``coef = (1 - alpha)/sqrt(alpha)``
and ``G`` collecting the scaling and unconditional-score terms. For this
quadratic loss the expansion is an identity, not just a bound. The
guidance term splits as ``-A * sum_k w_k B_k`` with ``A = coef * |v|``,
``v = 2 (x* - x_t)`` and ``B_k = <v, g_k> / |v|``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage, stats

from .diffusion import DivergenceError, as_image, reverse_step, rng_stream, score_from_eps
from .dig import DIGConfig, dig_curves, patch_sum, record_steps, softmax
from .guidance import GuidanceWeights, ModalityStack, modality_guidance_grad, upsample_patch_weights
from .oracles import Denoiser, GaussianDataOracle, SpectralGaussianOracle, power_law_spectrum
from .sampler import (FusionConfig, FusionContext, StepInfo, WeightPolicy, dynamic_policy, fuse, make_step_plan,
                      static_equal_policy)
from .schedule import NoiseSchedule, make_linear_schedule, sub_schedule

KINDS = ("masked_complement", "blended", "gaussian_1d")
LOSS_L = 2.0  # smoothness constant of the squared loss


# -- instances ---------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    """Parameters of the synthetic instance generator.

    Ground truth is drawn from a stationary power-law Gaussian prior, which
    is also the denoiser's data model. ``obs_noise`` is added to the
    informative part of each modality and ``fill_noise`` to its flat,
    uninformative part.
    """

    shape: tuple[int, int] = (16, 16)
    channels: int = 1
    spectrum_exponent: float = 2.0
    pixel_var: float = 0.25
    mask_cell: int = 4
    obs_noise: float = 0.1
    fill_noise: float = 0.05
    exposure: float = 0.4
    var_1d: float = 0.25


# Fusion settings of the synthetic bench. Summed patch distances scale with
# patch area, so the temperature matches a 16-pixel bench patch to the
# 1024-pixel patches of a 256x256 image on the default 8x8 grid. A guidance
# scale below 1 keeps the final step from projecting onto the last weights
# alone, so the weight schedule along the chain matters.
BENCH_PATCH_GRID = (4, 4)
BENCH_TEMPERATURE = 16 / 1024
BENCH_GUIDANCE_SCALE = 0.3


def bench_fusion_config(**overrides) -> FusionConfig:
    dig_cfg = DIGConfig(patch_grid=BENCH_PATCH_GRID, temperature=BENCH_TEMPERATURE)
    return replace(FusionConfig(dig=dig_cfg, guidance_scale=BENCH_GUIDANCE_SCALE), **overrides)


@dataclass(frozen=True)
class TheoryInstance:
    modalities: ModalityStack
    ideal: np.ndarray
    denoiser: Denoiser
    seed: int
    kind: str
    rule: str
    loss: str = "l2"


def _prior(bench: BenchConfig, s: NoiseSchedule) -> SpectralGaussianOracle:
    spec = power_law_spectrum(bench.shape, bench.spectrum_exponent, pixel_var=bench.pixel_var)
    return SpectralGaussianOracle(np.zeros((*bench.shape, bench.channels)), spec, s)


def random_cell_mask(shape: tuple[int, int], cell: int, rng: np.random.Generator) -> np.ndarray:
    """Binary (H, W) mask of square cells, each on with probability 1/2."""
    H, W = shape
    rows, cols = -(-H // cell), -(-W // cell)
    cells = rng.random((rows, cols)) < 0.5
    return np.kron(cells, np.ones((cell, cell)))[:H, :W]


def make_instance(kind: str, shape: tuple[int, int] | None = None, seed: int = 0,
                  bench: BenchConfig = BenchConfig(), schedule: NoiseSchedule | None = None,
                  mask: np.ndarray | None = None) -> TheoryInstance:
    """Build a seeded synthetic fusion instance.

    masked_complement: ``c1 = g*M + fill*(1-M)`` and ``c2 = g*(1-M) + fill*M``
    with ideal ``g``. blended: two exposure-shifted, clipped copies of ``g``
    with the unshifted ``g`` as ideal. gaussian_1d: a single pixel with a
    Gaussian prior and two noisy observations.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    s = schedule or make_linear_schedule()
    rng = rng_stream(seed, "instance", kind)
    if kind == "gaussian_1d":
        d = GaussianDataOracle(np.zeros((1, 1, 1)), bench.var_1d, s)
        g = np.sqrt(bench.var_1d) * rng.standard_normal((1, 1, 1))
        cs = [g + bench.obs_noise * rng.standard_normal(g.shape) for _ in range(2)]
        return TheoryInstance(ModalityStack(cs, ("a", "b")), g, d, seed, kind,
                              f"c_k = g + N(0, {bench.obs_noise}^2); ideal = g")

    if shape is not None:
        bench = replace(bench, shape=tuple(shape))
    d = _prior(bench, s)
    g = d.sample(rng)
    if kind == "blended":
        e = bench.exposure
        cs = [np.clip(g - e, -1.0, 1.0), np.clip(g + e, -1.0, 1.0)]
        return TheoryInstance(ModalityStack(cs, ("under", "over")), g, d, seed, kind,
                              f"c_k = clip(g -/+ {e}); ideal = g")

    if mask is None:
        mask = random_cell_mask(bench.shape, bench.mask_cell, rng)
    M = np.asarray(mask, dtype=np.float64)
    if M.shape != bench.shape:
        raise ValueError(f"mask shape {M.shape} does not match {bench.shape}")
    M = M[..., None]

    def noise(sd):
        return sd * rng.standard_normal(g.shape)

    c1 = (g + noise(bench.obs_noise)) * M + noise(bench.fill_noise) * (1 - M)
    c2 = (g + noise(bench.obs_noise)) * (1 - M) + noise(bench.fill_noise) * M
    rule = (f"c1 = (g + N(0,{bench.obs_noise}^2))*M + N(0,{bench.fill_noise}^2)*(1-M); "
            "c2 likewise with 1-M; ideal = g")
    return TheoryInstance(ModalityStack([c1, c2], ("a", "b")), g, d, seed, kind, rule)


def make_population(n: int, kind: str = "masked_complement", bench: BenchConfig = BenchConfig(),
                    schedule: NoiseSchedule | None = None, first_seed: int = 0) -> list[TheoryInstance]:
    s = schedule or make_linear_schedule()
    return [make_instance(kind, None, first_seed + i, bench, s) for i in range(n)]


# -- alignment and the bound ledger -----------------------------------------

@dataclass(frozen=True)
class Alignment:
    B: float
    cos_theta: float
    norm_grad: float
    degenerate: bool = False


def _align(v: np.ndarray, g: np.ndarray) -> Alignment:
    nv, ng = float(np.linalg.norm(v)), float(np.linalg.norm(g))
    if nv == 0.0 or ng == 0.0:
        return Alignment(0.0, 0.0, ng, True)
    cos = float(np.clip(np.vdot(v, g) / (nv * ng), -1.0, 1.0))
    return Alignment(ng * cos, cos, ng)


def alignment_measure(x_t, t: int, c_k, ideal, d: Denoiser, s: NoiseSchedule) -> Alignment:
    """Projection of modality k's guidance gradient onto the ideal direction ``v = 2(x* - x_t)``."""
    x_t, ideal = as_image(x_t, "x_t"), as_image(ideal, "ideal")
    g = modality_guidance_grad(c_k, x_t, t, d, s)
    return _align(2.0 * (ideal - x_t), g)


def _patch_inner(a: np.ndarray, b: np.ndarray, grid) -> np.ndarray:
    return np.atleast_1d(patch_sum(a * b, grid)).ravel()


def _patch_mean(w: np.ndarray, grid) -> np.ndarray:
    return np.atleast_1d(patch_sum(w, grid) / patch_sum(np.ones_like(w), grid)).ravel()


LEDGER_FIELDS = ("run", "step", "t", "k", "patch", "A", "norm_v", "B", "cos_theta", "norm_grad",
                 "w", "G", "guidance_term", "noise_term", "delta_sq", "zeta")


@dataclass
class BoundLedger:
    """Per-step, per-modality (and per-patch) bound quantities of one run.

    ``rows`` has one entry per (step, k, patch); ``steps`` one per reverse
    step with the remaining terms of the loss expansion. ``gerror`` is the
    mean squared error of the final sample to the ideal.
    """

    run: str
    grid: tuple[int, int] | None
    rows: list = field(default_factory=list)  # (K*P, 10) blocks, one per step
    steps: list = field(default_factory=list)
    zeta_T: float = float("nan")
    zeta_0: float = float("nan")
    gerror: float = float("nan")

    def columns(self) -> dict[str, np.ndarray]:
        names = ("step", "t", "k", "patch", "A", "norm_v", "B", "cos_theta", "norm_grad", "w")
        arr = np.concatenate(self.rows) if self.rows else np.empty((0, len(names)))
        return {n: arr[:, i] for i, n in enumerate(names)}

    def expansion_residual(self) -> float:
        """zeta_0 - zeta_T minus the summed per-step terms (zero up to rounding)."""
        total = sum(st["G"] + st["guidance_term"] + st["noise_term"] + st["delta_sq"] for st in self.steps)
        return (self.zeta_0 - self.zeta_T) - total

    def constant_bucket(self) -> dict[str, float]:
        return {
            "zeta_T": self.zeta_T,
            "sum_G": float(sum(st["G"] for st in self.steps)),
            "sum_L2_delta_sq": float(sum(LOSS_L / 2 * st["delta_sq"] for st in self.steps)),
            "max_delta": float(max(np.sqrt(st["delta_sq"]) for st in self.steps)),
        }

    def write_rows(self, writer) -> None:
        by_step = {st["step"]: st for st in self.steps}
        for r in np.concatenate(self.rows):
            st = by_step[int(r[0])]
            step, t, k, patch, *rest = r
            writer.writerow([self.run, int(step), int(t), int(k), int(patch), *(f"{v:.17g}" for v in rest),
                             *(f"{st[n]:.17g}" for n in ("G", "guidance_term", "noise_term", "delta_sq", "zeta"))])


def ledger_observer(inst: TheoryInstance, ledger: BoundLedger) -> Callable[[StepInfo], None]:
    """Observer for ``fuse`` that fills ``ledger`` from every reverse step."""
    ideal = inst.ideal
    grid = ledger.grid

    def observe(info: StepInfo) -> None:
        s, t = info.schedule, info.t
        a = s.a(t)
        coef = (1.0 - a) / np.sqrt(a)
        diff = info.x_t - ideal
        grad_zeta = 2.0 * diff
        v = -grad_zeta
        if not ledger.steps:
            ledger.zeta_T = float(np.sum(diff**2))
        score = score_from_eps(info.eps_hat, t, s)
        G = float(np.vdot(grad_zeta, (1.0 / np.sqrt(a) - 1.0) * info.x_t) + np.vdot(grad_zeta, coef * score))
        dx = info.x_next - info.x_t
        step = len(ledger.steps)
        ledger.steps.append({
            "step": step,
            "t": s.model_timestep(t),
            "G": G,
            "guidance_term": float(np.vdot(grad_zeta, coef * info.guidance)),
            "noise_term": float(np.vdot(grad_zeta, s.sig(t) * info.z)),
            "delta_sq": float(np.sum(dx**2)),
            "zeta": float(np.sum(diff**2)),
        })
        w = info.weights
        norm_v = np.sqrt(_patch_inner(v, v, grid))
        P = norm_v.size
        for k, g in enumerate(info.grads):
            vg = _patch_inner(v, g, grid)
            gg = np.sqrt(_patch_inner(g, g, grid))
            ok = (norm_v > 0) & (gg > 0)
            B = np.where(ok, vg / np.where(norm_v > 0, norm_v, 1.0), 0.0)
            cos = np.where(ok, np.clip(vg / np.where(ok, norm_v * gg, 1.0), -1.0, 1.0), 0.0)
            if w.mode == "global":
                wk = np.full(P, w.values[k])
            else:
                wk = _patch_mean(w.values[k][..., None], grid)
            block = np.empty((P, 10))
            block[:, 0] = step
            block[:, 1] = s.model_timestep(t)
            block[:, 2] = k
            block[:, 3] = np.arange(P) if grid is not None else -1
            block[:, 4] = coef * norm_v
            block[:, 5] = norm_v
            block[:, 6] = B
            block[:, 7] = cos
            block[:, 8] = gg
            block[:, 9] = wk
            ledger.rows.append(block)

    return observe


def run_with_ledger(inst: TheoryInstance, s: NoiseSchedule, cfg: FusionConfig,
                    policy: WeightPolicy | None = None, run: str = "") -> tuple[np.ndarray, BoundLedger]:
    ledger = BoundLedger(run or f"seed{inst.seed}", cfg.dig.patch_grid)
    x0, _ = fuse(inst.modalities, inst.denoiser, s, cfg, policy=policy, observer=ledger_observer(inst, ledger))
    ledger.zeta_0 = float(np.sum((x0 - inst.ideal) ** 2))
    ledger.gerror = float(np.mean((x0 - inst.ideal) ** 2))
    return x0, ledger


def write_ledgers(path: str | Path, ledgers: Sequence[BoundLedger]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: bound-ledger v1\n")
        w = csv.writer(fh)
        w.writerow(LEDGER_FIELDS)
        for led in ledgers:
            led.write_rows(w)


# -- generalisation error ----------------------------------------------------

@dataclass(frozen=True)
class GErrorResult:
    mean: float
    samples: np.ndarray  # per instance, nan where the run diverged
    diverged: int


def gerror(instances: Sequence[TheoryInstance], s: NoiseSchedule, cfg: FusionConfig,
           policy: WeightPolicy | None = None,
           outputs: Sequence[np.ndarray] | None = None) -> GErrorResult:
    """Mean squared error to the ideal over a population.

    ``outputs`` injects precomputed fused images instead of sampling.
    Divergent runs are excluded from the mean and counted.
    """
    if len(instances) < 2:
        raise ValueError("gerror needs at least two instances")
    errs = np.full(len(instances), np.nan)
    for i, inst in enumerate(instances):
        if outputs is not None:
            x = outputs[i]
        else:
            try:
                x, _ = fuse(inst.modalities, inst.denoiser, s, replace(cfg, seed=inst.seed), policy=policy)
            except DivergenceError:
                continue
        errs[i] = float(np.mean((np.asarray(x) - inst.ideal) ** 2))
    ok = np.isfinite(errs)
    return GErrorResult(float(np.mean(errs[ok])) if ok.any() else float("nan"), errs, int((~ok).sum()))


# -- covariance report -------------------------------------------------------

@dataclass(frozen=True)
class CovarianceReport:
    t: np.ndarray          # (n_steps,) model timesteps
    A_mean: np.ndarray     # (n_steps,)
    cov: np.ndarray        # (n_steps, K) unbiased Cov(w_k, B_k)
    n: int                 # population size per (t, k)

    @property
    def weighted_sum(self) -> float:
        """sum_t A(t) sum_k Cov(w_k, B_k)."""
        return float(np.sum(self.A_mean * self.cov.sum(axis=1)))

    def to_csv(self, path: str | Path, label: str = "") -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema: covariance-report v1\n")
            if label:
                fh.write(f"# policy={label}\n")
            fh.write(f"# weighted_sum={self.weighted_sum:.17g}\n")
            w = csv.writer(fh)
            w.writerow(["t", "k", "A_mean", "cov_w_B", "n"])
            for i, t in enumerate(self.t):
                for k in range(self.cov.shape[1]):
                    w.writerow([int(t), k, f"{self.A_mean[i]:.17g}", f"{self.cov[i, k]:.17g}", self.n])


def covariance_from_arrays(w: np.ndarray, B: np.ndarray, A: np.ndarray, t=None) -> CovarianceReport:
    """Covariance report from stacked samples.

    ``w`` and ``B`` have shape (n, n_steps, K), ``A`` (n, n_steps); the
    first axis is the population (instances, or instances x patches).
    """
    w, B, A = (np.asarray(a, dtype=np.float64) for a in (w, B, A))
    n = w.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least two population members")
    wc = w - w.mean(axis=0)
    Bc = B - B.mean(axis=0)
    cov = np.sum(wc * Bc, axis=0) / (n - 1)
    t = np.arange(w.shape[1]) if t is None else np.asarray(t)
    return CovarianceReport(t, A.mean(axis=0), cov, n)


def covariance_report(ledgers: Sequence[BoundLedger]) -> CovarianceReport:
    """Cov(w_k, B_k) at matched steps across runs (and patches, when present)."""
    if len(ledgers) < 1:
        raise ValueError("need at least one ledger")
    ws, Bs, As = [], [], []
    t = None
    for led in ledgers:
        c = led.columns()
        steps = int(c["step"].max()) + 1
        K = int(c["k"].max()) + 1
        P = c["step"].size // (steps * K)
        shape = (steps, K, P)
        # rows are ordered step-major, then k, then patch
        ws.append(c["w"].reshape(shape).transpose(2, 0, 1))
        Bs.append(c["B"].reshape(shape).transpose(2, 0, 1))
        As.append(c["A"].reshape(shape)[:, 0, :].T)
        if t is None:
            t = c["t"].reshape(shape)[:, 0, 0]
    return covariance_from_arrays(np.concatenate(ws), np.concatenate(Bs), np.concatenate(As), t)


# -- policy family and mechanism checks ----------------------------------------

def signed_dig_policy(scale: float) -> WeightPolicy:
    """Softmax of ``scale * DIG``; negative scales give anti-DIG weights."""

    def policy(gains, ctx: FusionContext) -> GuidanceWeights:
        g = scale * np.asarray(gains, dtype=np.float64) / ctx.dig_cfg.temperature
        w = softmax(g, axis=0)
        if w.ndim == 1:
            return GuidanceWeights("global", w, ctx.t)
        return GuidanceWeights("patchwise", upsample_patch_weights(w, ctx.shape), ctx.t, patch_values=w)

    return policy


def anti_dig_policy(gains, ctx: FusionContext) -> GuidanceWeights:
    return signed_dig_policy(-1.0)(gains, ctx)


def random_simplex_policy(key: int, concentration: float = 1.0) -> WeightPolicy:
    """Dirichlet weights drawn afresh at every record (per patch when patchwise)."""

    def policy(gains, ctx: FusionContext) -> GuidanceWeights:
        rng = rng_stream(ctx.seed, "random-policy", key, ctx.record)
        g = np.asarray(gains)
        cells = int(np.prod(g.shape[1:])) if g.ndim > 1 else 1
        w = rng.dirichlet(np.full(ctx.K, concentration), size=cells).T.reshape(g.shape)
        if w.ndim == 1:
            return GuidanceWeights("global", w, ctx.t)
        return GuidanceWeights("patchwise", upsample_patch_weights(w, ctx.shape), ctx.t, patch_values=w)

    return policy


def fixed_policy(w) -> WeightPolicy:
    w = np.asarray(w, dtype=np.float64)
    return lambda gains, ctx: GuidanceWeights("global", w, ctx.t)


def policy_family(n_random: int = 30) -> dict[str, WeightPolicy]:
    """Named policies spanning DIG-aligned, static, anti-aligned and random weights."""
    fam: dict[str, WeightPolicy] = {"dynamic": dynamic_policy, "static_equal": static_equal_policy,
                                    "anti_dig": anti_dig_policy}
    for scale in (4.0, 2.0, 0.5, 0.25, 0.1, -0.1, -0.25, -0.5, -2.0, -4.0):
        fam[f"dig_x{scale:g}"] = signed_dig_policy(scale)
    for a in np.linspace(0.0, 1.0, 11):
        if a != 0.5:
            fam[f"fixed_{a:.1f}"] = fixed_policy([a, 1.0 - a])
    for i in range(n_random):
        fam[f"random_{i}"] = random_simplex_policy(i, concentration=0.5 + (i % 4))
    return fam


@dataclass
class MechanismResult:
    names: list
    cov_sum: np.ndarray
    mean_gerror: np.ndarray
    samples: dict
    spearman_rho: float
    permutation_p: float
    sign_test_p: float
    dynamic_wins: int
    anti_dig_mean: float
    dynamic_mean: float
    static_mean: float
    ledgers: dict
    reports: dict

    @property
    def covariance_ok(self) -> bool:
        return self.spearman_rho < 0 and self.permutation_p < 0.05

    @property
    def dynamic_beats_static(self) -> bool:
        return self.dynamic_mean < self.static_mean and self.sign_test_p < 0.05

    @property
    def anti_dig_ok(self) -> bool:
        return self.anti_dig_mean >= self.dynamic_mean


def _spearman_permutation(x: np.ndarray, y: np.ndarray, n_resamples: int, seed: int) -> tuple[float, float]:
    def rho(a):
        return stats.spearmanr(a, y).statistic

    res = stats.permutation_test((x,), rho, permutation_type="pairings", n_resamples=n_resamples,
                                 alternative="less", random_state=rng_stream(seed, "permutation"))
    return float(res.statistic), float(res.pvalue)


def mechanism_check(instances: Sequence[TheoryInstance], s: NoiseSchedule, cfg: FusionConfig,
                    policies: dict[str, WeightPolicy] | None = None, n_resamples: int = 9999,
                    keep_ledgers: Sequence[str] = ("dynamic",)) -> MechanismResult:
    """Run every policy on every instance and test the covariance mechanism.

    For each policy the population covariance sum is computed over
    instances x patches at matched steps; Spearman's rank correlation
    between that sum and mean GError is tested against zero with a
    one-sided permutation test.
    """
    policies = policies or policy_family()
    names, covs, means, samples, ledgers, reports = [], [], [], {}, {}, {}
    for name, pol in policies.items():
        leds = []
        errs = np.empty(len(instances))
        for i, inst in enumerate(instances):
            _, led = run_with_ledger(inst, s, replace(cfg, seed=inst.seed), policy=pol, run=f"{name}/seed{inst.seed}")
            errs[i] = led.gerror
            leds.append(led)
        rep = covariance_report(leds)
        names.append(name)
        covs.append(rep.weighted_sum)
        means.append(errs.mean())
        samples[name] = errs
        reports[name] = rep
        if name in keep_ledgers:
            ledgers[name] = leds
    covs, means = np.array(covs), np.array(means)
    rho, p = _spearman_permutation(covs, means, n_resamples, cfg.seed)
    dyn, sta = samples["dynamic"], samples["static_equal"]
    wins = int(np.sum(dyn < sta))
    ties = int(np.sum(dyn == sta))
    sign_p = float(stats.binomtest(wins, len(dyn) - ties, 0.5, alternative="greater").pvalue) if len(dyn) > ties else 1.0
    return MechanismResult(names, covs, means, samples, rho, p, sign_p, wins,
                           float(samples["anti_dig"].mean()), float(dyn.mean()), float(sta.mean()),
                           ledgers, reports)


# -- sweeps --------------------------------------------------------------------

def sweep(instances: Sequence[TheoryInstance], s: NoiseSchedule, base: FusionConfig,
          make_cfg: Callable[[FusionConfig, object], FusionConfig], values: Sequence,
          policy: WeightPolicy | None = None) -> dict:
    """Per-instance GError samples for each value of one configuration knob."""
    return {v: gerror(instances, s, make_cfg(base, v), policy).samples for v in values}


def with_interval(cfg: FusionConfig, S: int) -> FusionConfig:
    return replace(cfg, dig=replace(cfg.dig, interval_S=int(S)))


def with_steps(cfg: FusionConfig, N: int) -> FusionConfig:
    return replace(cfg, total_steps_N=int(N))


def with_distance(cfg: FusionConfig, dist: str) -> FusionConfig:
    return replace(cfg, dig=replace(cfg.dig, distance=dist))


def paired_se(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(b) - np.asarray(a)
    return float(d.std(ddof=1) / np.sqrt(d.size))


def interior_minimum(curve: dict) -> tuple[bool, object]:
    """Whether the mean curve's minimiser is strictly inside the sweep (and the curve is not monotone)."""
    keys = list(curve)
    means = np.array([np.mean(curve[k]) for k in keys])
    i = int(np.argmin(means))
    d = np.diff(means)
    monotone = bool(np.all(d >= 0) or np.all(d <= 0))
    return (0 < i < len(keys) - 1) and not monotone, keys[i]


def non_increasing_within_noise(curve: dict, z: float = 2.0) -> tuple[bool, list]:
    """Each consecutive increase in mean must be within ``z`` paired standard errors."""
    keys = list(curve)
    out = []
    ok = True
    for a, b in zip(keys, keys[1:]):
        inc = float(np.mean(curve[b]) - np.mean(curve[a]))
        tol = z * paired_se(curve[a], curve[b])
        out.append((a, b, inc, tol))
        ok &= inc <= tol
    return ok, out


def time_steps(inst: TheoryInstance, s: NoiseSchedule, cfg: FusionConfig, Ns: Sequence[int],
               repeats: int = 3) -> dict:
    """Best-of-``repeats`` wall time of one fusion run for each N."""
    out = {}
    for N in Ns:
        c = with_steps(cfg, N)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fuse(inst.modalities, inst.denoiser, s, c)
            best = min(best, time.perf_counter() - t0)
        out[N] = best
    return out


def linear_fit_r2(xs, ys) -> tuple[float, float]:
    fit = stats.linregress(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    return float(fit.slope), float(fit.rvalue**2)


# -- identities and the noise term --------------------------------------------

def zero_guidance_identity(inst: TheoryInstance, s: NoiseSchedule, N: int = 25, seed: int = 0) -> float:
    """Largest gap between plain reverse steps and guided steps with zero guidance."""
    from .diffusion import guided_reverse_step
    from .sampler import make_step_plan
    from .schedule import sub_schedule

    rs = sub_schedule(s, make_step_plan(s, N))
    rng = rng_stream(seed, "identity")
    x = y = rng.standard_normal(inst.ideal.shape)
    worst = 0.0
    zero = np.zeros_like(x)
    for t in range(rs.T, 0, -1):
        z = rng.standard_normal(x.shape)
        x = reverse_step(x, t, inst.denoiser.predict_eps(x, rs.model_timestep(t)), z, rs)
        y = guided_reverse_step(y, t, inst.denoiser.predict_eps(y, rs.model_timestep(t)), zero, z, rs)
        worst = max(worst, float(np.max(np.abs(x - y))))
    return worst


def noise_term_stats(ledgers: Sequence[BoundLedger]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Population mean and standard error of grad_zeta . sigma z per step."""
    vals = np.array([[st["noise_term"] for st in led.steps] for led in ledgers])
    t = np.array([st["t"] for st in ledgers[0].steps])
    se = vals.std(axis=0, ddof=1) / np.sqrt(len(ledgers)) if len(ledgers) > 1 else np.zeros(vals.shape[1])
    return t, vals.mean(axis=0), se


# -- structured / texture pair -------------------------------------------------

def structure_texture_pair(seed: int, shape: tuple[int, int] = (32, 32), schedule: NoiseSchedule | None = None,
                           cutoff: float = 4.0, taper: float = 2.0, bench: BenchConfig = BenchConfig()):
    """Modality A: smooth structure inside region R; B: fine texture outside R.

    Both are drawn from the power-law prior and split by a radial frequency
    cutoff (cycles per image). R is the left half of the image; the
    modalities are windowed by R blurred with a periodic Gaussian of width
    ``taper`` so the window itself adds little high-frequency content.
    Returns the stack, the hard (H, W) region mask and the prior.
    """
    s = schedule or make_linear_schedule()
    bench = replace(bench, shape=tuple(shape))
    d = _prior(bench, s)
    rng = rng_stream(seed, "structure-texture")
    H, W = shape
    k = np.hypot(*np.meshgrid(np.fft.fftfreq(H) * H, np.fft.fftfreq(W) * W, indexing="ij"))
    low = (k <= cutoff)[..., None]

    def band(x, keep):
        return np.fft.ifft2(np.fft.fft2(x, axes=(0, 1)) * keep, axes=(0, 1)).real

    R = np.zeros(shape)
    R[:, : W // 2] = 1.0
    soft = ndimage.gaussian_filter(R, taper, mode="wrap")[..., None] if taper > 0 else R[..., None]
    a = band(d.sample(rng), low) * soft
    b = band(d.sample(rng), ~low) * (1.0 - soft)
    return ModalityStack([a, b], ("structure", "texture")), R, d


def half_gain_time(ts: np.ndarray, cum: np.ndarray) -> float:
    """Largest timestep by which the cumulative gain first reaches half its final value.

    ``ts`` runs from the noisy end downwards, ``cum`` is the matching
    cumulative curve; returns nan when the total gain is not positive.
    """
    total = cum[-1]
    if not total > 0:
        return float("nan")
    idx = int(np.argmax(cum >= 0.5 * total))
    return float(ts[idx])


@dataclass(frozen=True)
class CrossingResult:
    t_half_structure: float
    t_half_texture: float
    ts: np.ndarray
    cum_structure: np.ndarray    # structure modality, patches inside R
    cum_texture: np.ndarray      # texture modality, patches outside R

    @property
    def ok(self) -> bool:
        """Structure in R reaches half its gain at a noisier step than texture outside R."""
        return bool(self.t_half_structure > self.t_half_texture)


def crossing_order(seed: int, schedule: NoiseSchedule | None = None, N: int = 1000, S: int = 10,
                   patch_grid: tuple[int, int] = (4, 4), n_noise: int = 4, **pair_kw) -> CrossingResult:
    """Per-region cumulative DIG on the structure/texture pair, averaged over noise draws."""
    s = schedule or make_linear_schedule()
    rs = sub_schedule(s, make_step_plan(s, N))
    ms, R, d = structure_texture_pair(seed, schedule=s, **pair_kw)
    cfg = DIGConfig(interval_S=S, patch_grid=patch_grid)
    cur = dig_curves(ms.images, d, rs, cfg, seed, n_noise).mean(axis=0)
    rows, cols = patch_grid
    H, W = R.shape
    inside = R.reshape(rows, H // rows, cols, W // cols).mean(axis=(1, 3)) > 0.5
    a = np.cumsum(cur[:, 0][:, inside].sum(axis=1))
    b = np.cumsum(cur[:, 1][:, ~inside].sum(axis=1))
    ts = np.array([rs.model_timestep(t) for t in record_steps(rs.T, S)])
    return CrossingResult(half_gain_time(ts, a), half_gain_time(ts, b), ts, a, b)
