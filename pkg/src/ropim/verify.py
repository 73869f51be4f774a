"""Self-check suite behind ``ropim verify``.

Each check returns a :class:`CheckResult`. ``ROPIM_FAULT`` names a fault to
inject (``variance``, ``decomposition`` or ``gradient``) so that the failure
path of the suite itself can be exercised.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ropim import autodiff as ad
from ropim import rng
from ropim.pretrain.loss import complement_tokens, predict, ropim_loss
from ropim.sketch import (Mode, as_dense, complement_roundtrip, draw_sketch, project,
                          retract, roundtrip, signed_permutation, sketch_size)
from ropim.sketch.stats import inner_product_stats, mean_roundtrip
from ropim.vit import ViTConfig, ViTModel

FAULTS = ("variance", "decomposition", "gradient")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def active_fault() -> str | None:
    fault = os.environ.get("ROPIM_FAULT", "").strip().lower()
    return fault or None


def _unit(gen: np.random.Generator, K: int) -> np.ndarray:
    v = gen.standard_normal(K)
    return v / np.linalg.norm(v)


def check_column_structure(draws: int = 10_000, seed: int = 1) -> CheckResult:
    gen = rng.generator(seed)
    bad = 0
    for i in range(draws):
        K = int(gen.integers(2, 257))
        rho = float(gen.uniform(0.05, 1.0))
        P = as_dense(draw_sketch(K, rho, rng.derive_seed(seed, i)))
        nz = P != 0
        if not (np.all(nz.sum(axis=0) == 1) and np.all(np.abs(P[nz]) == 1)):
            bad += 1
    return CheckResult("column_structure", bad == 0, f"{draws} draws, {bad} malformed")


def check_exact_decomposition(cases: int = 1000, seed: int = 2, tol: float = 1e-12,
                              fault: str | None = None) -> CheckResult:
    gen = rng.generator(seed)
    worst = 0.0
    for i in range(cases):
        K = int(gen.integers(1, 129))
        D = int(gen.integers(1, 17))
        mode = Mode(i % 2)
        spec = draw_sketch(K, float(gen.uniform(0.05, 1.0)), rng.derive_seed(seed, i), mode)
        X = gen.normal(scale=10.0, size=(K, D))
        comp = complement_roundtrip(spec, X)
        if fault == "decomposition":
            comp = comp * (1 + 1e-9)
        worst = max(worst, float(np.abs(roundtrip(spec, X) + comp - X).max()))
    return CheckResult("exact_decomposition", worst < tol, f"max |rt + comp - X| = {worst:.2e}")


def check_oracle_equivalence(cases: int = 1000, seed: int = 3, tol: float = 1e-12) -> CheckResult:
    gen = rng.generator(seed)
    worst = 0.0
    for i in range(cases):
        K = int(gen.integers(1, 65))
        D = int(gen.integers(1, 17))
        mode = Mode(i % 2)
        spec = draw_sketch(K, float(gen.uniform(0.01, 1.0)), rng.derive_seed(seed, i), mode)
        P = as_dense(spec)
        Pinv = P.T * spec.bucket_scale[None, :]
        X = gen.standard_normal((K, D))
        Y = gen.standard_normal((spec.K_out, D))
        worst = max(worst,
                    float(np.abs(project(spec, X) - P @ X).max()),
                    float(np.abs(retract(spec, Y) - Pinv @ Y).max()),
                    float(np.abs(roundtrip(spec, X) - Pinv @ (P @ X)).max()))
    return CheckResult("oracle_equivalence", worst < tol, f"{cases} cases, max dev {worst:.2e}")


def check_row_orthogonality(draws: int = 1000, seed: int = 4) -> CheckResult:
    gen = rng.generator(seed)
    bad = 0
    for i in range(draws):
        K = int(gen.integers(1, 129))
        P = as_dense(draw_sketch(K, float(gen.uniform(0.05, 1.0)), rng.derive_seed(seed, i)))
        G = P @ P.T
        d = np.diag(G)
        if (np.any(G - np.diag(d)) or np.any(d < 0) or d.sum() != K
                or not np.array_equal(d, np.round(d))):
            bad += 1
    return CheckResult("row_orthogonality", bad == 0, f"{draws} draws, {bad} violations")


def inner_product_checks(draws: int = 100_000, seed: int = 5, K: int = 64,
                         buckets=(8, 16, 32), fault: str | None = None) -> list[CheckResult]:
    """Unbiasedness and the variance bound of <Px, Py> for unit x, y."""
    gen = rng.generator(seed)
    x, y = _unit(gen, K), _unit(gen, K)
    inflate = 1.5 if fault == "variance" else 1.0
    unb, var = [], []
    for K_out in buckets:
        st = inner_product_stats(x, y, K_out, draws, rng.derive_seed(seed, K_out), inflate)
        unb.append((K_out, st.unbiased(), abs(st.mean - st.true_value) / st.standard_error))
        var.append((K_out, st.within_bound(), st.variance / st.variance_bound))
    return [
        CheckResult("unbiasedness", all(ok for _, ok, _ in unb),
                    ", ".join(f"K'={k}: |bias|/se={z:.2f}" for k, _, z in unb)),
        CheckResult("variance_bound", all(ok for _, ok, _ in var),
                    ", ".join(f"K'={k}: var/bound={r:.3f}" for k, _, r in var)),
    ]


def check_shrinkage(draws: int = 10_000, seed: int = 6, K: int = 64,
                    rho=0.25) -> CheckResult:
    gen = rng.generator(seed)
    x = gen.standard_normal(K)
    K_out = sketch_size(K, rho)
    r = K_out / K
    mrt, mc = mean_roundtrip(x, K_out, draws, rng.derive_seed(seed, 1))
    tol = 0.02 * np.abs(x).max()
    e1 = float(np.abs(mrt - r * x).max())
    e2 = float(np.abs(mc - (1 - r) * x).max())
    return CheckResult("shrinkage", e1 < tol and e2 < tol,
                       f"rho={r:.3f}: |E[rt]-rho x|={e1:.4f}, |E[comp]-(1-rho)x|={e2:.4f}, tol={tol:.4f}")


def check_exact_idempotence(cases: int = 500, seed: int = 7, tol: float = 1e-10) -> CheckResult:
    gen = rng.generator(seed)
    worst = 0.0
    for i in range(cases):
        K = int(gen.integers(1, 129))
        spec = draw_sketch(K, float(gen.uniform(0.05, 1.0)), rng.derive_seed(seed, i),
                           Mode.EXACT_PROJECTOR)
        X = gen.standard_normal((K, int(gen.integers(1, 9))))
        R = roundtrip(spec, X)
        worst = max(worst, float(np.abs(roundtrip(spec, R) - R).max()))
    return CheckResult("exact_idempotence", worst < tol, f"max |rt(rt X) - rt X| = {worst:.2e}")


GRAD_CONFIG = ViTConfig(image_size=8, channels=3, patch_size=2, embed_dim=16, depth=2, heads=2)


def _randomize(model: ViTModel, gen: np.random.Generator, scale: float = 0.3) -> None:
    for name, p in model.params.items():
        offset = 1.0 if ".norm" in name and name.endswith(".weight") else 0.0
        p.data[...] = gen.normal(0.0, scale, p.shape) + offset


def gradient_check(seed: int, config: ViTConfig = GRAD_CONFIG, batch: int = 2,
                   entries: int = 12, step: float = 1e-5, rho=0.25, margin: float = 1e-3,
                   fault: str | None = None) -> tuple[float, dict[str, float]]:
    """Backward vs central differences on the full loss for one seeded draw.

    All parameters are re-drawn at O(1) scale so every path carries signal.
    The l1 objective has kinks; a draw whose complement residual has an entry
    within ``margin`` of zero is replaced by the next one, since central
    differences straddling a kink do not estimate the derivative.

    Returns the largest per-tensor error max|g - fd| / max(|g|, |fd|) over
    ``entries`` sampled coordinates per tensor, and the per-tensor table.
    """
    N = config.token_count
    for attempt in range(100):
        gen = rng.generator(rng.derive_seed(seed, 0x6C, attempt))
        model = ViTModel.init(config, rng.derive_seed(seed, attempt), dtype=np.float64)
        _randomize(model, gen)
        X = gen.standard_normal((batch, N, config.patch_dim))
        specs = [draw_sketch(N, rho, rng.derive_seed(seed, attempt, b)) for b in range(batch)]
        comp = complement_tokens(ad.sub(X, predict(X, model, specs)), specs).data
        if np.abs(comp).min() > margin:
            break
    model.zero_grad()
    ropim_loss(X, model, specs).backward()

    def f() -> float:
        return float(ropim_loss(X, model, specs).data)

    table = {}
    for name, p in model.params.items():
        idx = gen.choice(p.data.size, min(p.data.size, entries), replace=False)
        fd = ad.numerical_grad(f, p, step, idx).reshape(-1)[idx]
        g = p.grad.reshape(-1)[idx]
        if fault == "gradient":
            g = g * 1.01
        denom = max(np.abs(g).max(), np.abs(fd).max())
        table[name] = float(np.abs(g - fd).max() / denom) if denom > 0 else 0.0
    return max(table.values()), table


def check_gradients(seeds=range(5), tol: float = 1e-4, fault: str | None = None) -> CheckResult:
    errs = [gradient_check(rng.derive_seed(100, s), fault=fault)[0] for s in seeds]
    return CheckResult("gradient_check", max(errs) < tol,
                       f"{len(errs)} seeds, max rel err {max(errs):.2e}")


def check_zero_loss(seed: int = 8) -> CheckResult:
    """Lossless sketch makes the complement vanish, so the loss is exactly zero."""
    gen = rng.generator(seed)
    cfg = ViTConfig(image_size=8, channels=3, patch_size=2, embed_dim=16, depth=1, heads=2)
    model = ViTModel.init(cfg, seed)
    _randomize(model, gen)
    N = cfg.token_count
    spec = signed_permutation(rng.random_permutation(rng.philox(seed), N),
                              rng.random_signs(rng.philox(seed + 1), N))
    X = gen.standard_normal((N, cfg.patch_dim))
    model.zero_grad()
    loss = ropim_loss(X, model, spec)
    loss.backward()
    gmax = max(float(np.abs(p.grad).max()) for p in model.params.values() if p.grad is not None)
    v = float(loss.data)
    return CheckResult("zero_loss_fixed_point", abs(v) < 1e-12 and gmax < 1e-12,
                       f"loss={v:.1e}, max |grad|={gmax:.1e}")


def run_suite(fault: str | None = None) -> list[CheckResult]:
    fault = active_fault() if fault is None else fault
    steps: list[Callable[[], list[CheckResult] | CheckResult]] = [
        check_column_structure,
        lambda: check_exact_decomposition(fault=fault),
        check_oracle_equivalence,
        check_row_orthogonality,
        lambda: inner_product_checks(fault=fault),
        check_shrinkage,
        check_exact_idempotence,
        lambda: check_gradients(fault=fault),
        check_zero_loss,
    ]
    results = []
    for step in steps:
        t0 = time.perf_counter()
        out = step()
        dt = time.perf_counter() - t0
        for r in (out if isinstance(out, list) else [out]):
            results.append(CheckResult(r.name, r.passed, r.detail, dt))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}    "
                     f"{r.seconds:5.1f}s  {r.detail}")
    return "\n".join(lines)
