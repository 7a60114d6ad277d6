"""Reported metrics, the rotational-equivariance certification harness, and
the heavy-atom-binned relative deviatoric error analysis.

All reductions run in float64 regardless of model precision. Reports are
plain dataclasses that serialize to JSON; the size-binned report also emits
a flat (bin, median, count) TSV table for plotting tools.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_algebra as ta
from .model import ModelConfig, parameter_shapes


class LengthMismatch(ValueError):
    """Prediction and target lists differ in length."""


def _stack(tensors, name) -> np.ndarray:
    arr = np.asarray(tensors, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (3, 3):
        raise ValueError(f"{name} must be a sequence of 3x3 tensors, got {arr.shape}")
    return arr


def _deviatoric(arr: np.ndarray) -> np.ndarray:
    trace = np.trace(arr, axis1=-2, axis2=-1)
    return arr - trace[..., None, None] / 3.0 * np.eye(3)


@dataclass
class MetricReport:
    frob_mae: float
    iso_mae: float
    aniso_frob_mae: float
    n_samples: int
    residual_frob: list = field(default_factory=list)  # per-sample, optional

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


@dataclass
class EquivReport:
    eps_equiv: float
    eps_target: float | None
    n_rotations: int
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EquivReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


@dataclass
class SizeBinnedReport:
    medians: dict  # heavy-atom count -> median relative deviatoric error
    counts: dict  # heavy-atom count -> samples in bin
    eps: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "medians": {str(k): v for k, v in self.medians.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "eps": self.eps,
            "n_samples": self.n_samples,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_table(self, path):
        """Flat (bin, median, count) table, one row per heavy-atom bin."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("heavy_atoms\tmedian_rel_dev_err\tcount\n")
            for k in sorted(self.medians):
                fh.write(f"{k}\t{self.medians[k]:.10g}\t{self.counts[k]}\n")

    @classmethod
    def load(cls, path) -> "SizeBinnedReport":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(
            medians={int(k): v for k, v in d["medians"].items()},
            counts={int(k): v for k, v in d["counts"].items()},
            eps=d["eps"],
            n_samples=d["n_samples"],
        )


def metrics(preds, targets, keep_residuals: bool = False) -> MetricReport:
    """frob_mae = mean ||dA||_F; iso_mae = mean |tr(dA)/3|;
    aniso_frob_mae = mean ||dev(dA)||_F."""
    if len(preds) != len(targets):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(targets)} targets")
    if len(preds) == 0:
        raise ValueError("need at least one sample")
    p = _stack(preds, "preds")
    t = _stack(targets, "targets")
    resid = p - t
    frob = np.linalg.norm(resid, axis=(1, 2))
    iso = np.abs(np.trace(resid, axis1=-2, axis2=-1) / 3.0)
    aniso = np.linalg.norm(_deviatoric(resid), axis=(1, 2))
    return MetricReport(
        frob_mae=float(frob.mean()),
        iso_mae=float(iso.mean()),
        aniso_frob_mae=float(aniso.mean()),
        n_samples=len(preds),
        residual_frob=[float(x) for x in frob] if keep_residuals else [],
    )


def naive_metrics(preds, targets) -> MetricReport:
    """Independent scalar-loop reference implementation of metrics()."""
    if len(preds) != len(targets):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(targets)} targets")
    frob_sum = iso_sum = aniso_sum = 0.0
    for p, t in zip(preds, targets):
        sq = 0.0
        tr = 0.0
        for i in range(3):
            tr += p[i][i] - t[i][i]
            for j in range(3):
                sq += (p[i][j] - t[i][j]) ** 2
        frob_sum += math.sqrt(sq)
        iso_sum += abs(tr / 3.0)
        dev_sq = 0.0
        for i in range(3):
            for j in range(3):
                d = p[i][j] - t[i][j]
                if i == j:
                    d -= tr / 3.0
                dev_sq += d * d
        aniso_sum += math.sqrt(dev_sq)
    n = len(preds)
    return MetricReport(frob_sum / n, iso_sum / n, aniso_sum / n, n)


def equiv_test(
    model, molecules, n_rot: int = 64, seed: int = 0, identity_rotations: bool = False
) -> EquivReport:
    """Certify rotational consistency of any object exposing predict(mol).

    eps_equiv averages ||a(Rx) - R a(x) R^T||_F over the molecule x rotation
    grid; eps_target averages ||a(Rx) - R a_true(x) R^T||_F over molecules
    that carry targets (None when none do). One rotation set is drawn per
    run and shared across molecules.
    """
    if not molecules:
        raise ValueError("need at least one molecule")
    if n_rot < 1:
        raise ValueError("need at least one rotation")
    if identity_rotations:
        rotations = np.broadcast_to(np.eye(3), (n_rot, 3, 3)).copy()
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        rotations = ta.sample_rotations(n_rot, rng)
    equiv_sum = 0.0
    target_sum = 0.0
    n_target = 0
    for mol in molecules:
        base = np.asarray(model.predict(mol), dtype=np.float64)
        has_target = mol.target_alpha is not None
        for r in rotations:
            rotated_pred = np.asarray(model.predict(mol.rotated(r)), dtype=np.float64)
            equiv_sum += ta.frob_norm(rotated_pred - ta.conjugate(r, base))
            if has_target:
                target_sum += ta.frob_norm(
                    rotated_pred - ta.conjugate(r, mol.target_alpha)
                )
        if has_target:
            n_target += 1
    eps_equiv = equiv_sum / (len(molecules) * n_rot)
    eps_target = target_sum / (n_target * n_rot) if n_target else None
    return EquivReport(
        eps_equiv=float(eps_equiv),
        eps_target=None if eps_target is None else float(eps_target),
        n_rotations=n_rot,
        n_samples=len(molecules),
    )


def relative_deviatoric_report(
    preds, targets, heavy_atom_counts, eps: float = 1e-8
) -> SizeBinnedReport:
    """Per-sample ||dev(pred) - dev(target)||_F / (||dev(target)||_F + eps),
    grouped by heavy-atom count with the median reported per bin."""
    if not len(preds) == len(targets) == len(heavy_atom_counts):
        raise LengthMismatch(
            f"got {len(preds)} preds, {len(targets)} targets, "
            f"{len(heavy_atom_counts)} counts"
        )
    if len(preds) == 0:
        raise ValueError("need at least one sample")
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = _deviatoric(_stack(preds, "preds"))
    t = _deviatoric(_stack(targets, "targets"))
    ratio = np.linalg.norm(p - t, axis=(1, 2)) / (np.linalg.norm(t, axis=(1, 2)) + eps)
    by_bin = {}
    for count, r in zip(heavy_atom_counts, ratio):
        by_bin.setdefault(int(count), []).append(float(r))
    medians = {k: float(np.median(v)) for k, v in by_bin.items()}
    counts = {k: len(v) for k, v in by_bin.items()}
    assert sum(counts.values()) == len(preds)
    return SizeBinnedReport(medians=medians, counts=counts, eps=eps, n_samples=len(preds))


def count_parameters(shapes) -> int:
    """Total scalars across an iterable of (name, shape, kind) entries."""
    return int(sum(np.prod(shape, dtype=np.int64) for _, shape, _ in shapes))


def param_count(config: ModelConfig) -> int:
    """Exact number of trainable scalars for a model configuration."""
    return count_parameters(parameter_shapes(config))
