"""Central-difference gradient checking.

The numeric side never touches the reverse pass: it re-evaluates the target
function at perturbed points, so it is an independent oracle for the analytic
gradients produced by :func:`radgazeintent.autodiff.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic vs central-difference gradients.

    Errors are normalized by the largest gradient magnitude seen for the
    checked tensor (with a 1e-12 floor), so coordinates whose true gradient
    is exactly zero are judged against the tensor's own scale rather than
    against round-off noise.
    """

    max_rel_error: float
    mean_rel_error: float
    n_coords: int
    worst_index: tuple[int, ...]
    worst_name: str = ""
    per_tensor: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        return (f"gradcheck: {self.n_coords} coords, "
                f"max rel err {self.max_rel_error:.3e}, "
                f"mean rel err {self.mean_rel_error:.3e}")


def _compare(analytic: np.ndarray, numeric: np.ndarray):
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    err = np.abs(analytic - numeric) / scale
    return err


def finite_diff_check(fn, point: Tensor, step: float = 1e-5,
                      max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Check the analytic gradient of ``fn`` at ``point``.

    ``fn`` maps a tensor to a scalar tensor and must be deterministic. When
    ``max_coords`` is given, a random subset of coordinates is checked
    (seeded through ``rng``); otherwise every coordinate is.
    """
    if step <= 0:
        raise ValueError(f"finite_diff_check: step must be positive, got {step}")

    x = Tensor(point.data.copy(), requires_grad=True)
    analytic = backward(fn(x))[x]

    flat = point.data.reshape(-1).copy()
    n = flat.size
    coords = np.arange(n)
    if max_coords is not None and max_coords < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(gen.choice(n, size=max_coords, replace=False))

    numeric = np.zeros(coords.size)
    for pos, i in enumerate(coords):
        saved = flat[i]
        flat[i] = saved + step
        hi = fn(Tensor(flat.reshape(point.shape))).item()
        flat[i] = saved - step
        lo = fn(Tensor(flat.reshape(point.shape))).item()
        flat[i] = saved
        numeric[pos] = (hi - lo) / (2.0 * step)

    err = _compare(analytic.reshape(-1)[coords], numeric)
    worst = int(np.argmax(err))
    return GradCheckReport(
        max_rel_error=float(err.max(initial=0.0)),
        mean_rel_error=float(err.mean()) if err.size else 0.0,
        n_coords=int(coords.size),
        worst_index=np.unravel_index(int(coords[worst]), point.shape) if err.size else (),
    )


def check_parameters(loss_fn, params: dict[str, Tensor], step: float = 1e-5,
                     max_coords_per_tensor: int | None = None,
                     seed: int = 0) -> GradCheckReport:
    """Gradient-check a loss over a named parameter set.

    ``loss_fn`` takes no arguments and evaluates the loss from the current
    contents of ``params``; parameters are perturbed in place for the numeric
    probes and restored afterwards. Returns a pooled report plus the max
    relative error per parameter tensor.
    """
    analytic = backward(loss_fn())
    rng = np.random.default_rng(seed)

    worst = 0.0
    worst_name = ""
    worst_idx: tuple[int, ...] = ()
    total_err = 0.0
    total_n = 0
    per_tensor: dict[str, float] = {}

    for name, p in params.items():
        if not p.requires_grad:
            continue
        grad = analytic.get(p)
        if grad is None:
            raise ValueError(f"gradcheck: parameter {name} unreachable from the loss")
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords_per_tensor is not None and max_coords_per_tensor < n:
            coords = np.sort(rng.choice(n, size=max_coords_per_tensor, replace=False))
        numeric = np.zeros(coords.size)
        for pos, i in enumerate(coords):
            saved = flat[i]
            flat[i] = saved + step
            hi = loss_fn().item()
            flat[i] = saved - step
            lo = loss_fn().item()
            flat[i] = saved
            numeric[pos] = (hi - lo) / (2.0 * step)
        err = _compare(grad.reshape(-1)[coords], numeric)
        tensor_max = float(err.max(initial=0.0))
        per_tensor[name] = tensor_max
        if tensor_max > worst:
            worst = tensor_max
            worst_name = name
            worst_idx = np.unravel_index(int(coords[int(np.argmax(err))]), p.shape)
        total_err += float(err.sum())
        total_n += int(err.size)

    return GradCheckReport(
        max_rel_error=worst,
        mean_rel_error=total_err / total_n if total_n else 0.0,
        n_coords=total_n,
        worst_index=worst_idx,
        worst_name=worst_name,
        per_tensor=per_tensor,
    )
