"""Dataset ingestion, canonical file formats, splits, and synthetic data.

Canonical on-disk format is extended XYZ: the per-frame comment line carries
``mol_id=... conformer_id=... alpha="xx yy zz xy xz yz"`` (alpha optional,
Bohr^3, quoted Voigt-style six-component order). A line-delimited JSON
variant with the same fields is also supported for programmatic pipelines.

Splits are generated at the molecule level: all conformers of a mol_id land
in the same partition. The shuffle is an explicit Fisher-Yates pass over the
sorted unique mol_ids driven by numpy's PCG64 generator, so a fixed seed
reproduces the same manifest everywhere.
"""

from __future__ import annotations

import hashlib
import json
import shlex
import warnings
from dataclasses import dataclass, field

import numpy as np

from .graph import SUPPORTED_ELEMENTS, Molecule

ELEMENT_SYMBOLS = {1: "H", 6: "C", 7: "N", 8: "O", 16: "S", 17: "Cl"}
SYMBOL_TO_Z = {s: z for z, s in ELEMENT_SYMBOLS.items()}

SYMMETRY_TOL = 1e-8


class ParseError(ValueError):
    """Malformed dataset file; message carries the 1-based line number."""


class InvalidTensor(ValueError):
    """Polarizability block is not a valid symmetric tensor."""


class EmptyDataset(ValueError):
    """No records to split."""


def _voigt_to_matrix(alpha6: np.ndarray) -> np.ndarray:
    xx, yy, zz, xy, xz, yz = alpha6
    return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]], dtype=np.float64)


def _matrix_to_voigt(mat: np.ndarray) -> np.ndarray:
    m = np.asarray(mat, dtype=np.float64)
    return np.array([m[0, 0], m[1, 1], m[2, 2], m[0, 1], m[0, 2], m[1, 2]])


def _coerce_alpha(value) -> np.ndarray:
    """Accept 6 Voigt components or a full 3x3; always store 6 components."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape == (6,):
        pass
    elif arr.shape == (3, 3):
        if np.abs(arr - arr.T).max() > SYMMETRY_TOL:
            raise InvalidTensor(
                f"3x3 polarizability asymmetric beyond {SYMMETRY_TOL}"
            )
        arr = _matrix_to_voigt(0.5 * (arr + arr.T))
    else:
        raise InvalidTensor(f"polarizability must have 6 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidTensor("polarizability contains non-finite values")
    return arr


@dataclass
class DatasetRecord:
    """One conformer: identity, geometry, and optional 6-component target."""

    mol_id: str
    conformer_id: str
    atomic_numbers: np.ndarray
    positions: np.ndarray
    alpha: np.ndarray | None = None  # (6,) xx yy zz xy xz yz, Bohr^3

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.shape != (len(self.atomic_numbers), 3):
            raise ValueError("positions must have shape (n_atoms, 3)")
        if self.alpha is not None:
            self.alpha = _coerce_alpha(self.alpha)

    def alpha_matrix(self) -> np.ndarray | None:
        if self.alpha is None:
            return None
        return _voigt_to_matrix(self.alpha)

    def to_molecule(self) -> Molecule:
        return Molecule(
            self.mol_id, self.atomic_numbers, self.positions, self.alpha_matrix()
        )

    def geometry_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.atomic_numbers.tobytes())
        h.update(np.ascontiguousarray(self.positions).tobytes())
        return h.hexdigest()


def _dedup(records: list[DatasetRecord], source: str) -> list[DatasetRecord]:
    seen = set()
    out = []
    for rec in records:
        key = (rec.mol_id, rec.conformer_id, rec.geometry_hash())
        if key in seen:
            warnings.warn(
                f"{source}: dropping duplicate record "
                f"mol_id={rec.mol_id} conformer_id={rec.conformer_id}"
            )
            continue
        seen.add(key)
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# extended XYZ


def _parse_symbol(token: str, lineno: int) -> int:
    if token in SYMBOL_TO_Z:
        return SYMBOL_TO_Z[token]
    if token.isdigit() and int(token) in ELEMENT_SYMBOLS:
        return int(token)
    raise ParseError(f"line {lineno}: unknown element {token!r}")


def parse_xyz(path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    records = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n_atoms = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"line {i + 1}: expected atom count, got {lines[i]!r}")
        if n_atoms < 1:
            raise ParseError(f"line {i + 1}: atom count must be positive")
        if i + 2 + n_atoms > len(lines):
            raise ParseError(f"line {i + 1}: frame declares {n_atoms} atoms but file ends early")
        comment_no = i + 2
        try:
            fields = dict(
                tok.split("=", 1) for tok in shlex.split(lines[i + 1]) if "=" in tok
            )
        except ValueError as exc:
            raise ParseError(f"line {comment_no}: bad comment line ({exc})")
        if "mol_id" not in fields:
            raise ParseError(f"line {comment_no}: comment line missing mol_id")
        alpha = None
        if "alpha" in fields:
            parts = fields["alpha"].split()
            if len(parts) != 6:
                raise InvalidTensor(
                    f"line {comment_no}: alpha needs 6 components, got {len(parts)}"
                )
            try:
                alpha = np.array([float(p) for p in parts])
            except ValueError:
                raise InvalidTensor(f"line {comment_no}: non-numeric alpha component")
        zs, pos = [], []
        for k in range(n_atoms):
            lineno = i + 2 + k + 1
            toks = lines[i + 2 + k].split()
            if len(toks) < 4:
                raise ParseError(f"line {lineno}: expected 'symbol x y z'")
            zs.append(_parse_symbol(toks[0], lineno))
            try:
                pos.append([float(toks[1]), float(toks[2]), float(toks[3])])
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric coordinate")
        try:
            records.append(
                DatasetRecord(
                    mol_id=fields["mol_id"],
                    conformer_id=fields.get("conformer_id", "0"),
                    atomic_numbers=np.array(zs),
                    positions=np.array(pos),
                    alpha=alpha,
                )
            )
        except InvalidTensor:
            raise
        except ValueError as exc:
            raise ParseError(f"line {i + 1}: {exc}")
        i += 2 + n_atoms
    return _dedup(records, str(path))


def write_xyz(records, path):
    """Serialize with %.17g so numeric fields round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f"{len(rec.atomic_numbers)}\n")
            comment = f"mol_id={rec.mol_id} conformer_id={rec.conformer_id}"
            if rec.alpha is not None:
                comment += ' alpha="' + " ".join(f"{a:.17g}" for a in rec.alpha) + '"'
            fh.write(comment + "\n")
            for z, (x, y, zc) in zip(rec.atomic_numbers, rec.positions):
                fh.write(f"{ELEMENT_SYMBOLS[int(z)]} {x:.17g} {y:.17g} {zc:.17g}\n")


# ---------------------------------------------------------------------------
# JSONL variant


def parse_jsonl(path) -> list[DatasetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})")
            try:
                records.append(
                    DatasetRecord(
                        mol_id=str(obj["mol_id"]),
                        conformer_id=str(obj.get("conformer_id", "0")),
                        atomic_numbers=np.array(obj["Z"], dtype=np.int64),
                        positions=np.array(obj["pos"], dtype=np.float64),
                        alpha=obj.get("alpha"),
                    )
                )
            except InvalidTensor:
                raise
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(f"line {lineno}: {exc}")
    return _dedup(records, str(path))


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "mol_id": rec.mol_id,
                "conformer_id": rec.conformer_id,
                "Z": rec.atomic_numbers.tolist(),
                "pos": rec.positions.tolist(),
            }
            if rec.alpha is not None:
                obj["alpha"] = rec.alpha.tolist()
            fh.write(json.dumps(obj) + "\n")


def parse_dataset(path) -> list[DatasetRecord]:
    """Dispatch on extension: .jsonl for the JSON variant, XYZ otherwise."""
    if str(path).endswith(".jsonl"):
        return parse_jsonl(path)
    return parse_xyz(path)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitManifest:
    seed: int
    fractions: tuple
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.validate()

    def validate(self):
        parts = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(p) for p in parts)
        union = parts[0] | parts[1] | parts[2]
        if total != len(union):
            raise ValueError("split partitions overlap")

    def partition(self, name: str) -> list:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def select(self, records, name: str) -> list:
        wanted = set(self.partition(name))
        return [r for r in records if r.mol_id in wanted]

    def save(self, path):
        payload = {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=0, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(
            seed=int(payload["seed"]),
            fractions=tuple(payload["fractions"]),
            train=list(payload["train"]),
            val=list(payload["val"]),
            test=list(payload["test"]),
        )


def _fisher_yates(items: list, rng: np.random.Generator) -> list:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        out[i], out[j] = out[j], out[i]
    return out


def make_splits(records, seed: int = 42, fractions=(0.8, 0.1, 0.1)) -> SplitManifest:
    """Molecule-level split: floor-allocated val/test, remainder to train."""
    if not records:
        raise EmptyDataset("no records to split")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be 3 nonnegative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    ids = sorted({r.mol_id for r in records})
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    shuffled = _fisher_yates(ids, rng)
    n = len(shuffled)
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    return SplitManifest(
        seed=seed,
        fractions=fractions,
        train=sorted(shuffled[:n_train]),
        val=sorted(shuffled[n_train:n_train + n_val]),
        test=sorted(shuffled[n_train + n_val:]),
    )


# ---------------------------------------------------------------------------
# synthetic teacher


TEACHER_CUTOFF = 4.0
BOND_SCALE = 3.0
ANGULAR_SCALE = 2.0

# per-element isotropic baseline (Bohr^3) and bond-strength factor
TEACHER_ISO = {1: 4.5, 6: 12.0, 7: 7.4, 8: 5.4, 16: 19.6, 17: 14.6}
TEACHER_BOND = {1: 0.6, 6: 1.0, 7: 0.9, 8: 0.8, 16: 1.4, 17: 1.2}

ELEMENT_WEIGHTS = {1: 0.35, 6: 0.30, 7: 0.12, 8: 0.12, 16: 0.06, 17: 0.05}


def _teacher_envelope(d):
    if d >= TEACHER_CUTOFF:
        return 0.0
    return 0.5 * (np.cos(np.pi * d / TEACHER_CUTOFF) + 1.0)


def _tl(mat):
    s = 0.5 * (mat + mat.T)
    return s - np.trace(s) / 3.0 * np.eye(3)


def teacher_alpha(atomic_numbers, positions, teacher: str = "pairwise") -> np.ndarray:
    """Analytic, exactly equivariant polarizability teacher.

    pairwise: alpha = sum_i a(Z_i) I + sum_{i<j, d<c} b(Z_i,Z_j,d) TL(rhat rhat^T)
    angular:  adds cross-bond terms g(Z_i) env(d_ij) env(d_ik) TL(sym(rhat_ij rhat_ik^T))
              over bond pairs at each center, anisotropy an RR-style single-bond
              expansion cannot express directly.
    """
    if teacher not in ("pairwise", "angular"):
        raise ValueError(f"unknown teacher {teacher!r}")
    z = np.asarray(atomic_numbers)
    pos = np.asarray(positions, dtype=np.float64)
    n = len(z)
    alpha = sum(TEACHER_ISO[int(zi)] for zi in z) * np.eye(3)
    for i in range(n):
        for j in range(i + 1, n):
            rij = pos[i] - pos[j]
            d = np.linalg.norm(rij)
            if d >= TEACHER_CUTOFF:
                continue
            rhat = rij / d
            b = BOND_SCALE * TEACHER_BOND[int(z[i])] * TEACHER_BOND[int(z[j])]
            alpha += b * _teacher_envelope(d) * _tl(np.outer(rhat, rhat))
    if teacher == "angular":
        for i in range(n):
            neighbors = []
            for j in range(n):
                if j == i:
                    continue
                rij = pos[j] - pos[i]
                d = np.linalg.norm(rij)
                if d < TEACHER_CUTOFF:
                    neighbors.append((rij / d, _teacher_envelope(d)))
            g = ANGULAR_SCALE * TEACHER_BOND[int(z[i])]
            for a in range(len(neighbors)):
                for b_ in range(a + 1, len(neighbors)):
                    ra, ea = neighbors[a]
                    rb, eb = neighbors[b_]
                    alpha += g * ea * eb * _tl(np.outer(ra, rb))
    return alpha


def _random_geometry(rng: np.random.Generator, n: int) -> np.ndarray:
    """Grow a connected random geometry: each new atom bonds to an existing
    one at 1.0-1.8 A, rejecting placements closer than 0.8 A to any atom."""
    while True:
        pos = [np.zeros(3)]
        failed = False
        while len(pos) < n:
            for _ in range(200):
                parent = pos[int(rng.integers(len(pos)))]
                direction = rng.standard_normal(3)
                direction /= np.linalg.norm(direction)
                cand = parent + rng.uniform(1.0, 1.8) * direction
                if all(np.linalg.norm(cand - p) >= 0.8 for p in pos):
                    pos.append(cand)
                    break
            else:
                failed = True
                break
        if not failed:
            return np.array(pos)


def synthetic_generator(
    n: int, seed: int, teacher: str = "pairwise", min_atoms: int = 3, max_atoms: int = 10
) -> list[DatasetRecord]:
    """Random small molecules labeled by the analytic teacher."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    elements = sorted(ELEMENT_WEIGHTS)
    probs = np.array([ELEMENT_WEIGHTS[z] for z in elements])
    probs = probs / probs.sum()
    records = []
    for idx in range(n):
        n_atoms = int(rng.integers(min_atoms, max_atoms + 1))
        zs = rng.choice(elements, size=n_atoms, p=probs)
        pos = _random_geometry(rng, n_atoms)
        alpha = teacher_alpha(zs, pos, teacher)
        records.append(
            DatasetRecord(
                mol_id=f"syn-{idx:05d}",
                conformer_id="0",
                atomic_numbers=zs,
                positions=pos,
                alpha=_matrix_to_voigt(alpha),
            )
        )
    assert all(int(z) in SUPPORTED_ELEMENTS for r in records for z in r.atomic_numbers)
    return records
